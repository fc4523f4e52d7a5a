use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OFGP0001";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Matrix,
    trainable: bool,
}

/// Named parameter matrices in registration order. Non-trainable entries
/// hold state such as batch-norm running statistics; they are saved with the
/// checkpoint but never receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { tensor: name });
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    /// Glorot-uniform initialization, `U(−a, a)` with `a = √(6/(fan_in+fan_out))`.
    pub fn add_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..=a));
        self.add(name, m, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.data().len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Decodes a checkpoint into `(name, matrix)` pairs in file order.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Matrix)>> {
        let bad = |reason: &str| Error::Malformed {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing OFGP0001 header"));
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated record"))?;
            pos += n;
            Ok(s)
        };
        let mut out = Vec::new();
        loop {
            let Ok(len) = take(4) else { break };
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let raw = take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Matrix::new(rows, cols, data)?));
        }
        Ok(out)
    }

    /// Overwrites every value from a checkpoint whose names and shapes match
    /// this store exactly.
    pub fn load_values(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes, path)
    }

    pub fn load_bytes(&mut self, bytes: &[u8], origin: &Path) -> Result<()> {
        let records = Self::decode(bytes, origin)?;
        if records.len() != self.entries.len() {
            return Err(Error::Malformed {
                path: origin.to_path_buf(),
                reason: format!("{} parameters, model has {}", records.len(), self.entries.len()),
            });
        }
        for ((name, m), e) in records.into_iter().zip(&mut self.entries) {
            if name != e.name || m.shape() != e.value.shape() {
                return Err(Error::Malformed {
                    path: origin.to_path_buf(),
                    reason: format!(
                        "parameter `{name}` {:?} does not match `{}` {:?}",
                        m.shape(),
                        e.name,
                        e.value.shape()
                    ),
                });
            }
            e.value = m;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_xavier("w", 3, 2, &mut rng).unwrap();
        s.add("run", Matrix::row_vector(vec![1.0, 2.0]), false).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..8], b"OFGP0001");
        let mut t = s.clone();
        t.value_mut(ParamId(0)).data_mut()[0] = 9.0;
        t.load_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(t, s);
        assert!(t.load_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        assert!(s.clone().add("w", Matrix::zeros(1, 1), true).is_err());
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let id = s.add_xavier("w", 10, 14, &mut rng).unwrap();
        let a = 0.5;
        assert!(s.value(id).data().iter().all(|v| v.abs() <= a));
    }
}
