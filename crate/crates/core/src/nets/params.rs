//! Flat parameter vectors with per-layer views and a versioned checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;

use super::tape::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, Rng};

const MAGIC: &[u8; 8] = b"ADRTCKPT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform with variance 2 / fan_in, for layers followed by a rectifier.
    He,
    /// Uniform with variance 1 / fan_in.
    LeCun,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Architecture description shared by every parameter set of one network.
#[derive(Debug, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    offsets: Vec<usize>,
    len: usize,
    hash: u64,
}

impl Layout {
    pub fn new(specs: Vec<ParamSpec>) -> Arc<Self> {
        let mut offsets = Vec::with_capacity(specs.len());
        let mut len = 0;
        let mut desc = String::new();
        for s in &specs {
            offsets.push(len);
            len += s.numel();
            desc.push_str(&format!("{}:{:?};", s.name, s.shape));
        }
        Arc::new(Layout {
            hash: fnv1a(desc.as_bytes()),
            specs,
            offsets,
            len,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Stable hash of layer names and shapes.
    pub fn hash(&self) -> u64 {
        self.hash
    }
}

/// One network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len];
        ParamSet { layout, values }
    }

    pub fn init(layout: Arc<Layout>, rng: &mut Rng) -> Self {
        let mut p = ParamSet::zeros(layout);
        for (i, spec) in p.layout.specs.iter().enumerate() {
            let bound = match spec.init {
                Init::He => (6.0 / spec.fan_in as f64).sqrt(),
                Init::LeCun => (3.0 / spec.fan_in as f64).sqrt(),
                Init::Zero => continue,
            };
            let off = p.layout.offsets[i];
            for v in &mut p.values[off..off + spec.numel()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::invalid(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.len
            )));
        }
        Ok(ParamSet { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// View of layer `i`.
    pub fn layer(&self, i: usize) -> &[f64] {
        let off = self.layout.offsets[i];
        &self.values[off..off + self.layout.specs[i].numel()]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut [f64] {
        let off = self.layout.offsets[i];
        let n = self.layout.specs[i].numel();
        &mut self.values[off..off + n]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the little-endian bytes of every value.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a(&bytes)
    }

    /// Inserts every layer into `g`; `tracked = false` binds them as constants.
    pub fn bind(&self, g: &mut Graph, tracked: bool) -> Vec<Var> {
        self.layout
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = Tensor::new(s.shape.clone(), self.layer(i).to_vec());
                if tracked {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    /// Flattens the gradients of the bound layers back into this set's layout.
    pub fn gather(&self, vars: &[Var], grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.len];
        for (i, &v) in vars.iter().enumerate() {
            if let Some(t) = grads.get(v) {
                let off = self.layout.offsets[i];
                out[off..off + t.len()].copy_from_slice(t.data());
            }
        }
        debug_assert_eq!(vars.len(), self.layout.specs.len());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.layout.hash.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(layout: Arc<Layout>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let le_u64 = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hash = le_u64(&bytes[12..20]);
        if hash != layout.hash {
            return Err(Error::Format(format!(
                "architecture hash {hash:016x} does not match expected {:016x}",
                layout.hash
            )));
        }
        let count = le_u64(&bytes[20..28]) as usize;
        if count != layout.len || bytes.len() != HEADER_LEN + 8 * count {
            return Err(Error::Format("checkpoint parameter count mismatch".into()));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(ParamSet { layout, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(layout: Arc<Layout>, path: &Path) -> Result<Self> {
        Self::from_bytes(layout, &fs::read(path)?)
    }
}
