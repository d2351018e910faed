//! Flat named-parameter table and its MVWT file format.
//!
//! MVWT layout (little-endian): magic `MVWT`, `u32` version, `u32` entry
//! count, then per entry a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank` x `u32` dims and the `f32` payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing weight {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing weight {name:?}")))
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::Config(format!(
                "weight {name:?} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Fills every listed parameter with uniform(-scale, scale) values drawn
    /// in name order from one seeded stream.
    pub fn seeded(specs: impl IntoIterator<Item = (String, Vec<usize>)>, seed: u64, scale: f32) -> Self {
        let sorted: BTreeMap<String, Vec<usize>> = specs.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for (name, shape) in sorted {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
            store.insert(name, Tensor { shape, data });
        }
        store
    }

    pub fn zeros(specs: impl IntoIterator<Item = (String, Vec<usize>)>) -> Self {
        let mut store = Self::new();
        for (name, shape) in specs {
            store.insert(name, Tensor::zeros(shape));
        }
        store
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MVWT_MAGIC);
        buf.extend_from_slice(&MVWT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| mvwt_err(format!("name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape.len()).map_err(|_| mvwt_err("rank exceeds 255"))?;
            buf.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| mvwt_err("dimension exceeds u32"))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MVWT_MAGIC {
            return Err(mvwt_err("bad magic"));
        }
        let version = cur.u32()?;
        if version != MVWT_VERSION {
            return Err(mvwt_err(format!("unsupported version {version}")));
        }
        let count = cur.u32()?;
        let mut store = Self::new();
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| mvwt_err("parameter name is not UTF-8"))?
                .to_owned();
            let rank = cur.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| mvwt_err("tensor size overflows"))?;
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| mvwt_err("tensor size overflows"))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(mvwt_err(format!("non-finite value in {name}")));
            }
            store.insert(name, Tensor { shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(mvwt_err("trailing bytes after last entry"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

const MVWT_MAGIC: &[u8; 4] = b"MVWT";
const MVWT_VERSION: u32 = 1;

fn mvwt_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "MVWT", reason: reason.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| mvwt_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
