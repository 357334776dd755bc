//! Binary bag layout (little-endian):
//!
//! ```text
//! "ROAMBAG1" | u32 version | u32 N | u32 d_in | i32 label | 12 zero bytes
//! N*d_in f32 embeddings (row-major) | N*2 f32 coords
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::PatchBag;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BAG_MAGIC: &[u8; 8] = b"ROAMBAG1";
pub const BAG_VERSION: u32 = 1;
pub const BAG_HEADER_LEN: usize = 8 + 4 + 4 + 4 + 4 + 12;

pub fn encode_bag<T: Scalar>(bag: &PatchBag<T>) -> Result<Vec<u8>> {
    bag.validate()?;
    let n = bag.len();
    let d = bag.d_in();
    let label = i32::try_from(bag.label)
        .map_err(|_| Error::invalid(format!("label {} does not fit in i32", bag.label)))?;
    let mut out = Vec::with_capacity(BAG_HEADER_LEN + 4 * n * (d + 2));
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_dim(n)?.to_le_bytes());
    out.extend_from_slice(&u32_dim(d)?.to_le_bytes());
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&[0u8; 12]);
    for v in bag.embeddings.iter().chain(bag.coords.iter()) {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    Ok(out)
}

fn u32_dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} exceeds u32")))
}

pub fn write_bag<T: Scalar>(bag: &PatchBag<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a bag; the slide id is the file stem.
pub fn read_bag<T: Scalar>(path: impl AsRef<Path>) -> Result<PatchBag<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let slide_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_bag(&bytes, slide_id, path)
}

pub fn decode_bag<T: Scalar>(bytes: &[u8], slide_id: String, path: &Path) -> Result<PatchBag<T>> {
    if bytes.len() < BAG_MAGIC.len() || &bytes[..8] != BAG_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "ROAMBAG1",
        });
    }
    if bytes.len() < BAG_HEADER_LEN {
        return Err(Error::Truncated {
            expected: BAG_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |at: usize| [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]];
    let version = u32::from_le_bytes(word(8));
    if version != BAG_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: BAG_VERSION,
        });
    }
    let n = u32::from_le_bytes(word(12)) as usize;
    let d = u32::from_le_bytes(word(16)) as usize;
    let label = i32::from_le_bytes(word(20));
    if n == 0 || d == 0 {
        return Err(Error::DimensionMismatch(format!(
            "header declares N={n}, d_in={d}"
        )));
    }
    let label = u32::try_from(label)
        .map_err(|_| Error::invalid(format!("negative label {label} in bag header")))?;

    let expected = n
        .checked_mul(d + 2)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(BAG_HEADER_LEN))
        .ok_or_else(|| Error::DimensionMismatch(format!("N={n}, d_in={d} overflows")))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "payload is {} bytes but header N={n}, d_in={d} implies {}",
            bytes.len() - BAG_HEADER_LEN,
            expected - BAG_HEADER_LEN
        )));
    }

    let mut values = bytes[BAG_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
    let emb: Vec<T> = values.by_ref().take(n * d).collect();
    let coords: Vec<T> = values.collect();
    let embeddings =
        Array2::from_shape_vec((n, d), emb).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let coords = Array2::from_shape_vec((n, 2), coords)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    PatchBag::new(slide_id, embeddings, coords, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_patch_roundtrip() {
        let bag = PatchBag::new(
            "one",
            array![[1.0f64, -2.0, 0.5, 3.25]],
            array![[0.0, 0.0]],
            0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.bag");
        write_bag(&bag, &p).unwrap();
        assert_eq!(read_bag::<f64>(&p).unwrap(), bag);
    }

    #[test]
    fn bad_magic_is_distinct() {
        let mut bytes =
            encode_bag(&PatchBag::new("x", array![[1.0f64]], array![[0.0, 1.0]], 0).unwrap())
                .unwrap();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        let err = decode_bag::<f64>(&bytes, "x".into(), Path::new("x.bag")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn truncation_and_size_mismatch_are_distinct() {
        let bag = PatchBag::new(
            "x",
            array![[1.0f64, 2.0], [3.0, 4.0]],
            array![[0.0, 1.0], [2.0, 3.0]],
            1,
        )
        .unwrap();
        let bytes = encode_bag(&bag).unwrap();
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            decode_bag::<f64>(short, "x".into(), Path::new("x")).unwrap_err(),
            Error::Truncated { .. }
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0u8; 4]);
        assert!(matches!(
            decode_bag::<f64>(&long, "x".into(), Path::new("x")).unwrap_err(),
            Error::DimensionMismatch(_)
        ));
        assert!(matches!(
            decode_bag::<f64>(&bytes[..20], "x".into(), Path::new("x")).unwrap_err(),
            Error::Truncated { .. }
        ));
    }

    #[test]
    fn file_size_follows_layout() {
        let (n, d) = (4096usize, 512usize);
        let emb = Array2::from_shape_fn((n, d), |(i, j)| ((i * 31 + j * 7) % 97) as f32 * 0.25);
        let coords = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f32);
        let bag = PatchBag::new("big", emb, coords, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.bag");
        write_bag(&bag, &p).unwrap();
        let len = fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(len, 36 + 4 * n * (d + 2));
        assert_eq!(read_bag::<f32>(&p).unwrap(), bag);
    }
}
