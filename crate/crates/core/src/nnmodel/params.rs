use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::config::RoamConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub const CKPT_MAGIC: &[u8; 8] = b"ROAMCKPT";
pub const CKPT_VERSION: u32 = 1;

/// A named learnable tensor. Values are held as 2-D arrays; `shape` is the
/// logical shape (rank 1 for biases and attention vectors, which are
/// stored as `1 x n` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Array2<T>,
}

/// Parameter slot indices, resolved once from the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slots {
    pub phi_w: usize,
    pub phi_b: usize,
    /// `(self, neigh, bias)` per GNN layer.
    pub gnn: [(usize, usize, usize); 2],
    pub proto: usize,
    /// `(V, U, w)` per expert.
    pub experts: Vec<(usize, usize, usize)>,
    pub gate: [usize; 4],
    pub head: [usize; 4],
}

/// Every learnable of the model, in a fixed documented order:
///
/// `phi.weight`, `phi.bias`, `gnn.{0,1}.{self,neigh,bias}`, `proto`,
/// `expert.{e}.{V,U,w}`, `gate.{0,1}.{weight,bias}`, `head.{0,1}.{weight,bias}`.
///
/// Linear maps store `out x in` weights and act as `x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: Vec<Tensor<T>>,
    pub slots: Slots,
}

/// Tensor names with their logical shapes.
pub type Layout = Vec<(String, Vec<usize>)>;

/// Names and logical shapes implied by a config.
pub fn param_layout(cfg: &RoamConfig) -> Result<(Layout, Slots)> {
    let d_in = cfg.d_in()?;
    let (d, a, e, h, c) = (
        cfg.d,
        cfg.d_attn,
        cfg.n_experts,
        cfg.head_hidden,
        cfg.n_classes,
    );
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| {
        specs.push((name, shape));
        specs.len() - 1
    };
    let phi_w = add("phi.weight".into(), vec![d, d_in]);
    let phi_b = add("phi.bias".into(), vec![d]);
    let mut gnn = [(0, 0, 0); 2];
    for (l, slot) in gnn.iter_mut().enumerate() {
        *slot = (
            add(format!("gnn.{l}.self"), vec![d, d]),
            add(format!("gnn.{l}.neigh"), vec![d, d]),
            add(format!("gnn.{l}.bias"), vec![d]),
        );
    }
    let proto = add("proto".into(), vec![e, d]);
    let experts = (0..e)
        .map(|i| {
            (
                add(format!("expert.{i}.V"), vec![a, d]),
                add(format!("expert.{i}.U"), vec![a, d]),
                add(format!("expert.{i}.w"), vec![a]),
            )
        })
        .collect();
    let gate = [
        add("gate.0.weight".into(), vec![a, d]),
        add("gate.0.bias".into(), vec![a]),
        add("gate.1.weight".into(), vec![1, a]),
        add("gate.1.bias".into(), vec![1]),
    ];
    let head = [
        add("head.0.weight".into(), vec![h, d]),
        add("head.0.bias".into(), vec![h]),
        add("head.1.weight".into(), vec![c, h]),
        add("head.1.bias".into(), vec![c]),
    ];
    Ok((
        specs,
        Slots {
            phi_w,
            phi_b,
            gnn,
            proto,
            experts,
            gate,
            head,
        },
    ))
}

fn storage_dim(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("parameters are rank 1 or 2"),
    }
}

/// Glorot bound `sqrt(6 / (fan_in + fan_out))` for an `out x in` weight.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights, zero biases, unit-norm Gaussian prototypes.
/// Each tensor draws from its own stream, so the values of one tensor do
/// not depend on the sizes of the others.
pub fn init_params<T: Scalar>(cfg: &RoamConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let (specs, slots) = param_layout(cfg)?;
    let tensors = specs
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let (rows, cols) = storage_dim(&shape);
            let mut rng = rng::stream(rng::derive_seed(seed, &[0x5041_5241, i as u64]));
            let value = if i == slots.proto {
                let mut p = Array2::from_shape_simple_fn((rows, cols), || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(z)
                });
                for mut row in p.rows_mut() {
                    let n = row.dot(&row).sqrt();
                    row.mapv_inplace(|v| v / n);
                }
                p
            } else if shape.len() == 1 && !name.ends_with(".w") {
                Array2::zeros((rows, cols))
            } else {
                // attention vectors `w_e` are rank 1 but act as a d_attn -> 1 map
                let (fan_in, fan_out) = if shape.len() == 1 {
                    (cols, 1)
                } else {
                    (cols, rows)
                };
                let a = glorot_bound(fan_in, fan_out);
                let dist = Uniform::new_inclusive(-a, a);
                Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.sample(dist)))
            };
            Tensor { name, shape, value }
        })
        .collect::<Vec<_>>();
    Ok(ModelParams { tensors, slots })
}

impl<T: Scalar> ModelParams<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn value(&self, slot: usize) -> &Array2<T> {
        &self.tensors[slot].value
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// Round every value through `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.value
                .mapv_inplace(|v| T::lit(v.to_f64_lossy() as f32 as f64));
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    value: t.value.mapv(|v| U::lit(v.to_f64_lossy())),
                })
                .collect(),
            slots: self.slots.clone(),
        }
    }

    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.value.iter() {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode_checkpoint())
            .map_err(|e| Error::io(path, e))
    }

    /// Parse a checkpoint and check it against the layout implied by `cfg`.
    pub fn decode_checkpoint(bytes: &[u8], cfg: &RoamConfig) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CKPT_MAGIC {
            return Err(Error::BadMagic {
                path: "<checkpoint>".into(),
                expected: "ROAMCKPT",
            });
        }
        let version = cur.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CKPT_VERSION,
            });
        }
        let count = cur.u32()? as usize;
        let (specs, slots) = param_layout(cfg)?;
        if count != specs.len() {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint has {count} tensors, config implies {}",
                specs.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in specs {
            let len = cur.u16()? as usize;
            let got = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::invalid("checkpoint tensor name is not UTF-8"))?;
            let rank = cur.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if got != name || dims != shape {
                return Err(Error::DimensionMismatch(format!(
                    "checkpoint tensor {got} {dims:?} does not match expected {name} {shape:?}"
                )));
            }
            let (rows, cols) = storage_dim(&shape);
            let raw = cur.take(4 * rows * cols)?;
            let vals: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let value = Array2::from_shape_vec((rows, cols), vals).expect("length checked");
            tensors.push(Tensor { name, shape, value });
        }
        if cur.pos != bytes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { tensors, slots })
    }

    pub fn load(path: &Path, cfg: &RoamConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode_checkpoint(&bytes, cfg).map_err(|e| match e {
            Error::BadMagic { expected, .. } => Error::BadMagic {
                path: path.to_path_buf(),
                expected,
            },
            other => other,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
