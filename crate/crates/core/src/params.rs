//! Named parameter storage and a binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EQFLCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Flat, ordered store of named matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    keys: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a new tensor. Panics on duplicate keys, which indicates a
    /// model construction bug.
    pub fn insert(&mut self, key: impl Into<String>, value: Array2<f64>) -> ParamId {
        let key = key.into();
        assert!(!self.index.contains_key(&key), "duplicate parameter key {key}");
        let id = ParamId(self.values.len());
        self.index.insert(key.clone(), id);
        self.keys.push(key);
        self.values.push(value);
        id
    }

    /// Normal(0, std) initialisation.
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        key: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let value = Array2::from_shape_simple_fn(shape, || normal.sample(rng));
        self.insert(key, value)
    }

    pub fn insert_zeros(&mut self, key: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.insert(key, Array2::zeros(shape))
    }

    pub fn insert_filled(&mut self, key: impl Into<String>, shape: (usize, usize), v: f64) -> ParamId {
        self.insert(key, Array2::from_elem(shape, v))
    }

    pub fn id(&self, key: &str) -> Option<ParamId> {
        self.index.get(key).copied()
    }

    pub fn key(&self, id: ParamId) -> &str {
        &self.keys[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn get(&self, key: &str) -> Option<&Array2<f64>> {
        self.id(key).map(|id| &self.values[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.keys.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// True if both stores have identical keys, shapes and bit patterns.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.keys == other.keys
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Copies values from `other` for every key present in both; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, key) in self.keys.iter().enumerate() {
            let src = other
                .get(key)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {key}")))?;
            if src.dim() != self.values[i].dim() {
                return Err(Error::Format(format!(
                    "parameter {key}: checkpoint shape {:?} does not match model shape {:?}",
                    src.dim(),
                    self.values[i].dim()
                )));
            }
            self.values[i].assign(src);
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (key, v) in self.iter() {
            w.write_all(&(key.len() as u32).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            w.write_all(&(v.nrows() as u64).to_le_bytes())?;
            w.write_all(&(v.ncols() as u64).to_le_bytes())?;
            for x in v.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let klen = read_u32(&mut r)? as usize;
            if klen > 4096 {
                return Err(Error::Format(format!("implausible key length {klen}")));
            }
            let mut kb = vec![0u8; klen];
            r.read_exact(&mut kb).map_err(|_| Error::Format("truncated key".into()))?;
            let key = String::from_utf8(kb).map_err(|_| Error::Format("key is not UTF-8".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let n = rows.checked_mul(cols).filter(|&n| n <= 1 << 28);
            let n = n.ok_or_else(|| Error::Format(format!("implausible shape {rows}x{cols}")))?;
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|_| Error::Format("truncated tensor data".into()))?;
                data.push(f64::from_le_bytes(buf));
            }
            if store.id(&key).is_some() {
                return Err(Error::Format(format!("duplicate key {key}")));
            }
            let value = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
            store.insert(key, value);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(b))
}
