use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a parameter is, for fan-in/fan-out computation at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution weight `[cout, cin, kh, kw]`.
    ConvW,
    /// Transposed-convolution weight `[cin, cout, kh, kw]`.
    ConvTW,
    /// Dense weight `[out, in]`.
    DenseW,
    /// Bias vector, initialized to zero.
    Bias,
}

/// Declared name/shape/kind of one trainable tensor.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, kind: ParamKind) -> Self {
        ParamSpec { name: name.into(), shape, kind }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named collection of trainable tensors addressed by hierarchical keys
/// like `enc1.conv1.w`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    order: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a store from specs: uniform Glorot for weights
    /// (`limit = sqrt(6 / (fan_in + fan_out))`), zeros for biases.
    /// Initialization order follows the spec list, so a fixed seed gives a
    /// fixed store.
    pub fn init_glorot(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in specs {
            let t = match spec.kind {
                ParamKind::Bias => Tensor::zeros(spec.shape.clone()),
                kind => {
                    let (fan_in, fan_out) = fans(kind, &spec.shape);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let data = (0..spec.numel()).map(|_| rng.gen_range(-limit..limit)).collect();
                    Tensor { shape: spec.shape.clone(), data }
                }
            };
            store.insert(spec.name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        if !self.tensors.contains_key(&name) {
            self.order.push(name.clone());
        }
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::usage(format!("parameter `{}` not found in store", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("parameter `{}` not found in store", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Names in insertion (spec) order.
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    // ---- checkpoint format ------------------------------------------------
    //
    // magic "MSRF1", u32 tensor count, then per tensor:
    //   u32 name length, name bytes, u32 rank, u64 extents, f64 data
    // All integers and floats little-endian.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"MSRF1");
        buf.extend_from_slice(&(self.order.len() as u32).to_le_bytes());
        for name in &self.order {
            let t = &self.tensors[name];
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        // Write-temp-then-rename keeps partially written checkpoints from
        // ever being visible under the final name.
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a checkpoint and validates it against the declared specs:
    /// unknown magic, missing/extra tensors, and shape mismatches are all
    /// rejected.
    pub fn load(path: &Path, specs: &[ParamSpec]) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;

        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::checkpoint("truncated checkpoint".to_string()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        if take(&mut pos, 5)? != b"MSRF1" {
            return Err(Error::checkpoint("unknown checkpoint magic".to_string()));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::checkpoint("non-UTF8 tensor name".to_string()))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(name, Tensor { shape, data });
        }
        if pos != bytes.len() {
            return Err(Error::checkpoint("trailing bytes after checkpoint payload".to_string()));
        }

        for spec in specs {
            match store.tensors.get(&spec.name) {
                None => {
                    return Err(Error::checkpoint(format!(
                        "checkpoint missing parameter `{}`",
                        spec.name
                    )))
                }
                Some(t) if t.shape != spec.shape => {
                    return Err(Error::checkpoint(format!(
                        "parameter `{}` has shape {:?}, config expects {:?}",
                        spec.name, t.shape, spec.shape
                    )))
                }
                _ => {}
            }
        }
        if store.len() != specs.len() {
            return Err(Error::checkpoint(format!(
                "checkpoint holds {} tensors, config expects {}",
                store.len(),
                specs.len()
            )));
        }
        Ok(store)
    }
}

fn fans(kind: ParamKind, shape: &[usize]) -> (usize, usize) {
    match kind {
        ParamKind::ConvW => {
            let rf = shape[2] * shape[3];
            (shape[1] * rf, shape[0] * rf)
        }
        ParamKind::ConvTW => {
            let rf = shape[2] * shape[3];
            (shape[0] * rf, shape[1] * rf)
        }
        ParamKind::DenseW => (shape[1], shape[0]),
        ParamKind::Bias => (1, 1),
    }
}

/// Convenience constructors for the conv/bias spec pairs every block uses.
pub fn conv_spec(name: &str, cout: usize, cin: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.w"), vec![cout, cin, k, k], ParamKind::ConvW),
        ParamSpec::new(format!("{name}.b"), vec![cout], ParamKind::Bias),
    ]
}

pub fn convt_spec(name: &str, cin: usize, cout: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.w"), vec![cin, cout, k, k], ParamKind::ConvTW),
        ParamSpec::new(format!("{name}.b"), vec![cout], ParamKind::Bias),
    ]
}

pub fn dense_spec(name: &str, out: usize, inp: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.w"), vec![out, inp], ParamKind::DenseW),
        ParamSpec::new(format!("{name}.b"), vec![out], ParamKind::Bias),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        let mut v = Vec::new();
        v.extend(conv_spec("a.conv", 4, 2, 3));
        v.extend(dense_spec("a.fc", 3, 4));
        v
    }

    #[test]
    fn glorot_is_deterministic_and_bounded() {
        let s1 = ParamStore::init_glorot(&specs(), 7);
        let s2 = ParamStore::init_glorot(&specs(), 7);
        for name in s1.names() {
            assert!(s1.get(name).unwrap().bit_eq(s2.get(name).unwrap()));
        }
        let w = s1.get("a.conv.w").unwrap();
        let limit = (6.0 / ((2 * 9 + 4 * 9) as f64)).sqrt();
        assert!(w.data.iter().all(|v| v.abs() <= limit));
        assert!(s1.get("a.conv.b").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("msrf-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        let store = ParamStore::init_glorot(&specs(), 3);
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path, &specs()).unwrap();
        for name in store.names() {
            assert!(store.get(name).unwrap().bit_eq(loaded.get(name).unwrap()));
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_shape_mismatch() {
        let dir = std::env::temp_dir().join(format!("msrf-ckpt-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        let store = ParamStore::init_glorot(&specs(), 3);
        store.save(&path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.join("bad.ckpt");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(ParamStore::load(&bad, &specs()), Err(Error::Checkpoint(_))));

        let mut wrong = specs();
        wrong[0].shape = vec![4, 2, 5, 5];
        assert!(matches!(ParamStore::load(&path, &wrong), Err(Error::Checkpoint(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
