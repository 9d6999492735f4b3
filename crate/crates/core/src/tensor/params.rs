use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::graph::{Graph, Tensor};
use super::{numel, Real};
use crate::error::{contract_err, Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"POUR";
const CKPT_VERSION: u8 = 1;

/// A named, shaped parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Result<()> {
        let name = name.into();
        if data.len() != numel(&shape) {
            return Err(Error::SizeMismatch { expected: numel(&shape), found: data.len() });
        }
        if self.index.contains_key(&name) {
            return contract_err(format!("duplicate parameter {name}"));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, shape, data });
        Ok(())
    }

    /// Inserts a parameter drawn uniformly from `±bound`.
    pub fn insert_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut R) -> Result<()> {
        let data = (0..numel(&shape)).map(|_| T::cast(rng.gen_range(-bound..=bound))).collect();
        self.insert(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Converts every buffer to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::cast(v.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter into `graph` as a leaf; variables if `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, '_, T> {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                let (shape, data) = (p.shape.clone(), p.data.clone());
                if trainable {
                    graph.variable(shape, data)
                } else {
                    graph.constant(shape, data)
                }
                .expect("parameter buffers are validated on insert")
            })
            .collect();
        Bound { tensors, store: self }
    }

    /// Binds caller-made leaves, one per parameter in store order.
    pub fn bind_tensors<'g>(&self, tensors: Vec<Tensor<'g, T>>) -> Result<Bound<'g, '_, T>> {
        if tensors.len() != self.params.len() {
            return Err(Error::Contract(format!("{} tensors for {} parameters", tensors.len(), self.params.len())));
        }
        for (t, p) in tensors.iter().zip(&self.params) {
            if t.shape() != p.shape {
                return Err(Error::Shape(format!("{}: tensor shape {:?}, parameter shape {:?}", p.name, t.shape(), p.shape)));
            }
        }
        Ok(Bound { tensors, store: self })
    }

    /// Encodes the store in the checkpoint layout (f32 payloads).
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.push(CKPT_VERSION);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Contract(format!("parameter name too long: {}", p.name)))?;
            let rank = u8::try_from(p.shape.len())
                .map_err(|_| Error::Contract(format!("parameter rank too large: {}", p.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &e in &p.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CKPT_MAGIC {
            return Err(Error::Format("magic: expected \"POUR\"".into()));
        }
        let version = r.take(1, "version")?[0];
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("version: expected {CKPT_VERSION}, found {version}")));
        }
        let count = r.u32("count")? as usize;
        let mut store = Self::new();
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format(format!("name of parameter {i}: invalid UTF-8")))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = numel(&shape);
            let payload = r.take(4 * n, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| T::cast(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
                .collect();
            store.insert(name, shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("trailing bytes: {} after last parameter", bytes.len() - r.pos)));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("{field}: truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Parameters of a [`ParamStore`] placed into a graph.
pub struct Bound<'g, 's, T: Real> {
    tensors: Vec<Tensor<'g, T>>,
    store: &'s ParamStore<T>,
}

impl<'g, T: Real> Bound<'g, '_, T> {
    pub fn get(&self, name: &str) -> Result<Tensor<'g, T>> {
        self.store
            .position(name)
            .map(|i| self.tensors[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.store.position(name).is_some()
    }

    /// Gradients in store order; zeros for parameters the loss did not reach.
    pub fn grads(&self) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.weight", vec![2, 3], vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-3]).unwrap();
        s.insert("a.bias", vec![2], vec![0.1, 0.2]).unwrap();
        s.insert("scalar", vec![], vec![7.0]).unwrap();
        let bytes = s.to_checkpoint_bytes().unwrap();
        assert_eq!(&bytes[..5], b"POUR\x01");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
        let back = ParamStore::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_rejects_truncation_and_duplicates() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(s.insert("w", vec![1], vec![1.0]).is_err());
        let bytes = s.to_checkpoint_bytes().unwrap();
        assert!(matches!(
            ParamStore::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(m)) if m.starts_with("payload")
        ));
    }
}
