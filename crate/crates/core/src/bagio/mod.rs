//! Patch-bag persistence, manifests, subsampling and the synthetic slide
//! generator.

mod format;
mod manifest;
mod synth;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub use format::{read_bag, write_bag, BAG_HEADER_LEN, BAG_MAGIC, BAG_VERSION};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use synth::{
    gen_synthetic_dataset, gen_synthetic_slide, split_counts, ClassRule, SplitPlan, SynthSpec,
};

/// One slide: `N` patch embeddings with their 2D coordinates and a label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBag<T> {
    pub slide_id: String,
    /// `N x d_in`, row-major.
    pub embeddings: Array2<T>,
    /// `N x 2`, arbitrary units.
    pub coords: Array2<T>,
    pub label: u32,
}

impl<T: Scalar> PatchBag<T> {
    pub fn new(
        slide_id: impl Into<String>,
        embeddings: Array2<T>,
        coords: Array2<T>,
        label: u32,
    ) -> Result<Self> {
        let bag = Self {
            slide_id: slide_id.into(),
            embeddings,
            coords,
            label,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_in(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.nrows() == 0 {
            return Err(Error::invalid("bag must contain at least one patch"));
        }
        if self.embeddings.ncols() == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if self.coords.ncols() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "coords must have 2 columns, got {}",
                self.coords.ncols()
            )));
        }
        if self.coords.nrows() != self.embeddings.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinate rows for {} embeddings",
                self.coords.nrows(),
                self.embeddings.nrows()
            )));
        }
        if self
            .embeddings
            .iter()
            .chain(self.coords.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("bag {}", self.slide_id)));
        }
        Ok(())
    }

    /// Rows selected by `idx`, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            slide_id: self.slide_id.clone(),
            embeddings: self.embeddings.select(Axis(0), idx),
            coords: self.coords.select(Axis(0), idx),
            label: self.label,
        }
    }

    pub fn cast<U: Scalar>(&self) -> PatchBag<U> {
        let conv = |v: &T| U::lit(v.to_f64_lossy());
        PatchBag {
            slide_id: self.slide_id.clone(),
            embeddings: self.embeddings.map(conv),
            coords: self.coords.map(conv),
            label: self.label,
        }
    }
}

/// Uniform subset of at most `max_n` patches, drawn without replacement by a
/// seeded shuffle. Kept rows stay in their original relative order.
pub fn subsample_bag<T: Scalar>(bag: &PatchBag<T>, max_n: usize, seed: u64) -> Result<PatchBag<T>> {
    if max_n == 0 {
        return Err(Error::invalid("max_n must be at least 1"));
    }
    if bag.len() <= max_n {
        return Ok(bag.clone());
    }
    let mut idx: Vec<usize> = (0..bag.len()).collect();
    idx.shuffle(&mut rng::stream(seed));
    idx.truncate(max_n);
    idx.sort_unstable();
    Ok(bag.select(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ramp_bag(n: usize, d: usize) -> PatchBag<f64> {
        let emb = Array2::from_shape_fn((n, d), |(i, j)| (i * d + j) as f64);
        let coords = Array2::from_shape_fn((n, 2), |(i, j)| (i as f64) * 10.0 + j as f64);
        PatchBag::new("ramp", emb, coords, 1).unwrap()
    }

    #[test]
    fn subsample_is_noop_under_the_cap() {
        let bag = ramp_bag(100, 3);
        assert_eq!(subsample_bag(&bag, 4096, 3).unwrap(), bag);
    }

    #[test]
    fn subsample_caps_at_4096_and_keeps_rows_paired() {
        let bag = ramp_bag(5000, 2);
        let sub = subsample_bag(&bag, 4096, 11).unwrap();
        assert_eq!(sub.len(), 4096);
        for (e, c) in sub.embeddings.rows().into_iter().zip(sub.coords.rows()) {
            let i = (e[0] / 2.0) as usize;
            assert_eq!(e, bag.embeddings.row(i));
            assert_eq!(c, bag.coords.row(i));
        }
        assert_eq!(sub, subsample_bag(&bag, 4096, 11).unwrap());
        assert_ne!(sub, subsample_bag(&bag, 4096, 12).unwrap());
    }

    #[test]
    fn zero_cap_is_rejected() {
        assert!(subsample_bag(&ramp_bag(3, 1), 0, 0).is_err());
    }

    #[test]
    fn validation_catches_shape_and_finiteness() {
        let emb = Array2::<f64>::zeros((2, 3));
        assert!(PatchBag::new("a", emb.clone(), Array2::zeros((3, 2)), 0).is_err());
        assert!(
            PatchBag::new("a", Array2::<f64>::zeros((0, 3)), Array2::zeros((0, 2)), 0).is_err()
        );
        let mut bad = emb.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(PatchBag::new("a", bad, Array2::zeros((2, 2)), 0).is_err());
    }
}
