//! Spatially structured synthetic slides.
//!
//! Patches sit on a jittered grid in the unit square. A handful of Voronoi
//! seeds partition the square into cells and every cell carries a single
//! morphology archetype, so neighbouring patches usually share an archetype.
//! Each class owns one marker archetype; the remaining archetypes form a
//! shared background.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_bag, DatasetManifest, ManifestEntry, PatchBag, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_slides_per_class: usize,
    pub n_classes: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub d_in: usize,
    pub n_archetypes: usize,
    /// Approximate pairwise distance between archetype means.
    pub separation: f64,
    pub noise: f64,
    pub cells_min: usize,
    pub cells_max: usize,
    /// Probability that a Voronoi cell takes the class marker archetype.
    pub marker_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_slides_per_class: 20,
            n_classes: 2,
            patches_min: 256,
            patches_max: 512,
            d_in: 32,
            n_archetypes: 4,
            separation: 3.0,
            noise: 1.0,
            cells_min: 6,
            cells_max: 12,
            marker_fraction: 0.35,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synthetic spec: {m}")));
        if self.n_slides_per_class == 0 {
            return bad("n_slides_per_class must be positive");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive");
        }
        if self.n_archetypes < self.n_classes {
            return bad("n_archetypes must be at least n_classes");
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return bad("need 1 <= patches_min <= patches_max");
        }
        if self.cells_min == 0 || self.cells_min > self.cells_max {
            return bad("need 1 <= cells_min <= cells_max");
        }
        if self.d_in == 0 {
            return bad("d_in must be positive");
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return bad("noise must be positive and finite");
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return bad("separation must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.marker_fraction) {
            return bad("marker_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn class_rule(&self) -> ClassRule {
        let n_bg = self.n_archetypes - self.n_classes;
        ClassRule {
            background: (0..n_bg).collect(),
            markers: (n_bg..self.n_archetypes).collect(),
            marker_fraction: self.marker_fraction,
        }
    }

    /// Archetype means, shared by every slide generated from this spec.
    pub fn archetype_means(&self) -> Array2<f64> {
        let mut rng = stream(derive_seed(self.seed, &[0xA4C7]));
        let scale = self.separation / std::f64::consts::SQRT_2;
        let mut means = Array2::zeros((self.n_archetypes, self.d_in));
        for mut row in means.rows_mut() {
            let v: Array1<f64> = (0..self.d_in)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.dot(&v).sqrt().max(f64::MIN_POSITIVE);
            row.assign(&(v * (scale / norm)));
        }
        means
    }
}

/// Which archetypes a slide of each class may contain.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRule {
    pub background: Vec<usize>,
    /// `markers[c]` is the archetype that identifies class `c`.
    pub markers: Vec<usize>,
    pub marker_fraction: f64,
}

impl ClassRule {
    fn draw<R: Rng>(&self, class: usize, rng: &mut R) -> usize {
        if self.background.is_empty() || rng.gen::<f64>() < self.marker_fraction {
            self.markers[class]
        } else {
            self.background[rng.gen_range(0..self.background.len())]
        }
    }
}

pub fn gen_synthetic_slide<T: Scalar>(
    spec: &SynthSpec,
    class: usize,
    seed: u64,
) -> Result<PatchBag<T>> {
    spec.validate()?;
    let rule = spec.class_rule();
    if class >= rule.markers.len() {
        return Err(Error::invalid(format!(
            "class {class} not covered by class rule with {} classes",
            rule.markers.len()
        )));
    }
    let means = spec.archetype_means();
    let mut rng = stream(derive_seed(seed, &[class as u64]));

    let n = rng.gen_range(spec.patches_min..=spec.patches_max);
    let side = (n as f64).sqrt().ceil() as usize;
    let mut slots: Vec<usize> = (0..side * side).collect();
    slots.shuffle(&mut rng);
    let mut coords = Array2::<f64>::zeros((n, 2));
    for (i, &slot) in slots.iter().take(n).enumerate() {
        let (gx, gy) = (slot % side, slot / side);
        coords[[i, 0]] = (gx as f64 + rng.gen::<f64>()) / side as f64;
        coords[[i, 1]] = (gy as f64 + rng.gen::<f64>()) / side as f64;
    }

    let n_cells = rng.gen_range(spec.cells_min..=spec.cells_max);
    let seeds: Vec<[f64; 2]> = (0..n_cells).map(|_| [rng.gen(), rng.gen()]).collect();
    let mut cell_arch: Vec<usize> = (0..n_cells).map(|_| rule.draw(class, &mut rng)).collect();
    let owner: Vec<usize> = coords
        .rows()
        .into_iter()
        .map(|p| {
            let d2 = |s: &[f64; 2]| (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2);
            (0..n_cells)
                .min_by(|&a, &b| d2(&seeds[a]).total_cmp(&d2(&seeds[b])))
                .unwrap_or(0)
        })
        .collect();
    let marker = rule.markers[class];
    if !owner.iter().any(|&c| cell_arch[c] == marker) {
        cell_arch[owner[0]] = marker;
    }

    let mut emb = Array2::<f64>::zeros((n, spec.d_in));
    for (i, mut row) in emb.rows_mut().into_iter().enumerate() {
        let mean = means.row(cell_arch[owner[i]]);
        for (v, m) in row.iter_mut().zip(mean.iter()) {
            *v = m + spec.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let id = format!("synth_c{class}_s{seed:016x}");
    Ok(PatchBag::new(id, emb, coords, class as u32)?.cast())
}

/// How slides are divided among train/val/test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitPlan {
    /// Fractions for val and test; each count is floored, train gets the rest.
    Ratios { val: f64, test: f64 },
    Counts {
        train: usize,
        val: usize,
        test: usize,
    },
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan::Ratios {
            val: 0.15,
            test: 0.15,
        }
    }
}

/// `(train, val, test)` slide counts for `total` slides.
pub fn split_counts(total: usize, plan: SplitPlan) -> Result<(usize, usize, usize)> {
    match plan {
        SplitPlan::Ratios { val, test } => {
            if !(val >= 0.0 && test >= 0.0 && val + test <= 1.0) {
                return Err(Error::invalid(
                    "split ratios must be non-negative and sum to at most 1",
                ));
            }
            let nv = (total as f64 * val).floor() as usize;
            let nt = (total as f64 * test).floor() as usize;
            Ok((total - nv - nt, nv, nt))
        }
        SplitPlan::Counts { train, val, test } => {
            if train + val + test != total {
                return Err(Error::invalid(format!(
                    "split counts {train}+{val}+{test} do not sum to {total} slides"
                )));
            }
            Ok((train, val, test))
        }
    }
}

/// Writes `bags/*.bag` and `manifest.csv` under `out_dir`.
///
/// Splits are stratified: slides are shuffled within each class, the classes
/// are interleaved round-robin, and the interleaved list is cut into
/// val, test, then train.
pub fn gen_synthetic_dataset(
    spec: &SynthSpec,
    out_dir: &Path,
    plan: SplitPlan,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let bag_dir = out_dir.join("bags");
    std::fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;

    let mut per_class: Vec<Vec<ManifestEntry>> = Vec::with_capacity(spec.n_classes);
    for class in 0..spec.n_classes {
        let mut entries = Vec::with_capacity(spec.n_slides_per_class);
        for idx in 0..spec.n_slides_per_class {
            let seed = derive_seed(spec.seed, &[class as u64, idx as u64]);
            let mut bag = gen_synthetic_slide::<f64>(spec, class, seed)?;
            bag.slide_id = format!("synth_c{class}_{idx:04}");
            let rel = Path::new("bags").join(format!("{}.bag", bag.slide_id));
            write_bag(&bag, out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                slide_id: bag.slide_id,
                path: rel,
                label: class as u32,
                split: Split::Train,
            });
        }
        entries.shuffle(&mut stream(derive_seed(spec.seed, &[0x5EED, class as u64])));
        per_class.push(entries);
    }

    let total = spec.n_classes * spec.n_slides_per_class;
    let (_, n_val, n_test) = split_counts(total, plan)?;
    let mut interleaved = Vec::with_capacity(total);
    for i in 0..spec.n_slides_per_class {
        for class in &per_class {
            interleaved.push(class[i].clone());
        }
    }
    for (pos, e) in interleaved.iter_mut().enumerate() {
        e.split = if pos < n_val {
            Split::Val
        } else if pos < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    interleaved.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let manifest = DatasetManifest::new(interleaved, out_dir)?;
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanishing_noise_reproduces_archetype_means() {
        let spec = SynthSpec {
            noise: 1e-300,
            ..SynthSpec::default()
        };
        let means = spec.archetype_means();
        let bag = gen_synthetic_slide::<f64>(&spec, 1, 5).unwrap();
        for row in bag.embeddings.rows() {
            assert!(means.rows().into_iter().any(|m| m == row));
        }
    }

    #[test]
    fn single_cell_slide_has_one_archetype() {
        let spec = SynthSpec {
            cells_min: 1,
            cells_max: 1,
            noise: 1e-300,
            ..SynthSpec::default()
        };
        let bag = gen_synthetic_slide::<f64>(&spec, 0, 9).unwrap();
        let first = bag.embeddings.row(0);
        assert!(bag.embeddings.rows().into_iter().all(|r| r == first));
        // a lone cell must carry the class marker
        assert_eq!(
            first,
            spec.archetype_means().row(spec.class_rule().markers[0])
        );
    }

    #[test]
    fn generator_is_deterministic_and_class_checked() {
        let spec = SynthSpec::default();
        let a = gen_synthetic_slide::<f64>(&spec, 0, 3).unwrap();
        assert_eq!(a, gen_synthetic_slide::<f64>(&spec, 0, 3).unwrap());
        assert_ne!(a, gen_synthetic_slide::<f64>(&spec, 0, 4).unwrap());
        assert!(gen_synthetic_slide::<f64>(&spec, 2, 3).is_err());
        assert!(a.coords.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec {
            n_archetypes: 1,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            noise: 0.0,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            n_slides_per_class: 0,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ratio_split_floors_val_and_test() {
        assert_eq!(split_counts(20, SplitPlan::default()).unwrap(), (14, 3, 3));
        assert_eq!(
            split_counts(
                100,
                SplitPlan::Counts {
                    train: 40,
                    val: 20,
                    test: 40
                }
            )
            .unwrap(),
            (40, 20, 40)
        );
        assert!(split_counts(
            10,
            SplitPlan::Counts {
                train: 4,
                val: 2,
                test: 2
            }
        )
        .is_err());
    }

    #[test]
    fn dataset_is_stratified() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_slides_per_class: 10,
            patches_min: 20,
            patches_max: 30,
            ..SynthSpec::default()
        };
        let m = gen_synthetic_dataset(&spec, dir.path(), SplitPlan::default()).unwrap();
        assert_eq!(m.entries.len(), 20);
        let count = |s: Split, c: u32| m.split(s).filter(|e| e.label == c).count();
        assert_eq!(m.split(Split::Val).count(), 3);
        assert_eq!(m.split(Split::Test).count(), 3);
        assert!(count(Split::Val, 0) >= 1 && count(Split::Val, 1) >= 1);
        let loaded = DatasetManifest::load(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded.entries, m.entries);
    }
}
