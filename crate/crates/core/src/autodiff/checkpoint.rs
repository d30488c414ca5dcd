//! Versioned container of named dense arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "TMCKPT\0\0"
//! version  u32       currently 1
//! count    u32       number of arrays
//! count x {
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (u64 x ndim)
//!   data     f64 x product(dims), row-major
//! }
//! ```

use std::io::{Read, Write};

use super::{Activation, AdError, Layer, MlpParams, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

fn bad(msg: impl Into<String>) -> AdError {
    AdError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, AdError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, AdError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.push(name, vec![1], vec![v]);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64, AdError> {
        match self.get(name) {
            Some(a) if a.data.len() == 1 => Ok(a.data[0]),
            Some(_) => Err(bad(format!("`{name}` is not a scalar"))),
            None => Err(bad(format!("missing array `{name}`"))),
        }
    }

    /// Stores `prefix.layer{i}.{weight,bias,activation}` for every layer.
    pub fn push_mlp(&mut self, prefix: &str, params: &MlpParams) {
        for (i, l) in params.layers.iter().enumerate() {
            self.push(
                format!("{prefix}.layer{i}.weight"),
                vec![l.weight.rows(), l.weight.cols()],
                l.weight.data().to_vec(),
            );
            self.push(
                format!("{prefix}.layer{i}.bias"),
                vec![l.bias.cols()],
                l.bias.data().to_vec(),
            );
            self.push_scalar(format!("{prefix}.layer{i}.activation"), l.activation.code());
        }
    }

    pub fn mlp(&self, prefix: &str) -> Result<MlpParams, AdError> {
        let mut layers = Vec::new();
        for i in 0.. {
            let Some(w) = self.get(&format!("{prefix}.layer{i}.weight")) else {
                break;
            };
            if w.shape.len() != 2 {
                return Err(bad(format!("{prefix}.layer{i}.weight must be 2-D")));
            }
            let b = self
                .get(&format!("{prefix}.layer{i}.bias"))
                .ok_or_else(|| bad(format!("missing {prefix}.layer{i}.bias")))?;
            let act = self.scalar(&format!("{prefix}.layer{i}.activation"))?;
            layers.push(Layer {
                weight: Tensor::from_vec(w.shape[0], w.shape[1], w.data.clone())?,
                bias: Tensor::from_vec(1, b.data.len(), b.data.clone())?,
                activation: Activation::from_code(act).ok_or_else(|| bad(format!("unknown activation code {act}")))?,
            });
        }
        if layers.is_empty() {
            return Err(bad(format!("no layers under `{prefix}`")));
        }
        MlpParams::from_layers(layers)
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), AdError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            w.write_all(&(a.name.len() as u32).to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
            for &d in &a.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in &a.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read(mut r: impl Read) -> Result<Self, AdError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8"))?;
            let ndim = read_u32(&mut r)?;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        Ok(Self { arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MlpParams::init(&[5, 4, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let mut c = Checkpoint::default();
        c.push_mlp("net", &p);
        c.push_scalar("tau", 0.1);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::read(&bytes[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.mlp("net").unwrap(), p);
        assert_eq!(back.scalar("tau").unwrap(), 0.1);
        assert!(back.mlp("other").is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read(&b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut bytes = Checkpoint::default().to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::read(&bytes[..]).is_err());
    }
}
