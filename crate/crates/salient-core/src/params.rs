//! Named parameter collections and their binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "SALP" | u32 version | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | f32 payload
//! u32 CRC32 (IEEE) of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SalientError};
use crate::nn::graph::{Grads, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SALP_MAGIC: &[u8; 4] = b"SALP";
pub const SALP_VERSION: u32 = 1;

/// Parameters keyed by name; iteration order (and flat indexing) is the
/// lexicographic name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamTree<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamTree<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self { entries: self.entries.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    pub fn congruent(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|t| t.is_finite())
    }

    /// First entry holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries.iter().find(|(_, t)| !t.is_finite()).map(|(k, _)| k.as_str())
    }

    fn locate(&self, mut i: usize) -> (&String, usize) {
        for (k, v) in &self.entries {
            if i < v.numel() {
                return (k, i);
            }
            i -= v.numel();
        }
        panic!("flat parameter index out of range");
    }

    /// Name and local offset of the `i`-th scalar in flat order.
    pub fn coordinate(&self, i: usize) -> (String, usize) {
        let (k, j) = self.locate(i);
        (k.clone(), j)
    }

    pub fn get_flat(&self, i: usize) -> T {
        let (k, j) = self.locate(i);
        self.entries[k].data()[j]
    }

    pub fn set_flat(&mut self, i: usize, v: T) {
        let (k, j) = self.locate(i);
        let k = k.clone();
        self.entries.get_mut(&k).unwrap().data_mut()[j] = v;
    }

    pub fn cast<U: Scalar>(&self) -> ParamTree<U> {
        ParamTree { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// `self += alpha * other`, entry by entry.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        for (k, v) in self.entries.iter_mut() {
            if let Some(o) = other.entries.get(k) {
                v.axpy(alpha, o);
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for v in self.entries.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + self.num_scalars() * 4);
        out.extend_from_slice(SALP_MAGIC);
        out.extend_from_slice(&SALP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(SalientError::format("entry", format!("entry `{}` too large to encode", name)));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(SalientError::format("length", format!("{} bytes is shorter than the minimal container", bytes.len())));
        }
        if &bytes[..4] != SALP_MAGIC {
            return Err(SalientError::format("magic", "expected SALP"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(SalientError::format("crc32", "checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32("version")?;
        if version != SALP_VERSION {
            return Err(SalientError::format("version", format!("unsupported version {}", version)));
        }
        let count = r.u32("count")?;
        let mut tree = Self::new();
        for _ in 0..count {
            let nlen = r.u16("name_len")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| SalientError::format("name", "invalid UTF-8"))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "payload")?;
            let data = raw.chunks_exact(4).map(|c| T::c(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
            tree.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(SalientError::format("length", "trailing bytes after last entry"));
        }
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SalientError::format(field, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self, f: &'static str) -> Result<u8> {
        Ok(self.take(1, f)?[0])
    }
    pub fn u16(&mut self, f: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, f)?.try_into().unwrap()))
    }
    pub fn u32(&mut self, f: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, f)?.try_into().unwrap()))
    }
}

/// Builder used by network constructors.
pub struct Init<'a, R: Rng> {
    pub tree: ParamTree<f64>,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { tree: ParamTree::new(), rng }
    }

    /// He-style normal init scaled by `gain / sqrt(fan_in)`.
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.tree.insert(name, Tensor::from_vec(shape, data).unwrap());
    }

    pub fn fill(&mut self, name: impl Into<String>, shape: &[usize], v: f64) {
        self.tree.insert(name, Tensor::full(shape, v));
    }

    pub fn finish<T: Scalar>(self) -> ParamTree<T> {
        self.tree.cast()
    }
}

/// Graph leaves for every entry of a [`ParamTree`].
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamTree<T>, requires_grad: bool) -> Self {
        let vars = params.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad))).collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("missing parameter `{}`", name),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients shaped like `params`; entries the loss does not reach are zero.
    pub fn grads<T: Scalar>(&self, params: &ParamTree<T>, grads: &Grads<T>) -> ParamTree<T> {
        let mut out = params.zeros_like();
        for (k, t) in out.iter_mut() {
            if let Some(g) = grads.get(self.vars[k]) {
                t.data_mut().copy_from_slice(g);
            }
        }
        out
    }
}
