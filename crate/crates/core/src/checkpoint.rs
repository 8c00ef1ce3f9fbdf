//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DSOD1"  u8 version
//! u32 len   config text (UTF-8, `key = value` lines)
//! u64       iteration
//! u32       tensor count
//! per tensor: u32 len, name, u32 rank, rank × u32 extents, f32 payload
//! ```
//!
//! Batch-norm running statistics travel as ordinary tensors named
//! `<bn>.running_mean` and `<bn>.running_var`, after all learnable parameters.

use std::fs;
use std::path::Path;

use crate::arch::{ArchSpec, Model};
use crate::error::{Error, Result};
use crate::kv;

pub const MAGIC: &[u8; 5] = b"DSOD1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub iteration: u64,
    pub tensors: Vec<NamedTensor>,
}

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

impl Checkpoint {
    pub fn from_model(model: &Model, config_text: &str, iteration: u64) -> Self {
        let mut tensors: Vec<NamedTensor> = model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, t)| NamedTensor { name: name.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        for (name, st) in model.bn_names().iter().zip(model.bn_states()) {
            let c = st.running_mean.len();
            tensors.push(NamedTensor { name: format!("{name}{RUNNING_MEAN}"), shape: vec![c], data: st.running_mean.clone() });
            tensors.push(NamedTensor { name: format!("{name}{RUNNING_VAR}"), shape: vec![c], data: st.running_var.clone() });
        }
        Checkpoint { config_text: config_text.to_string(), iteration, tensors }
    }

    /// Architecture described by the config echo; keys it does not know are skipped.
    pub fn arch(&self) -> Result<ArchSpec> {
        let mut spec = ArchSpec::default();
        for e in kv::parse(&self.config_text)? {
            spec.apply_entry(&e)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Rebuilds the model; every parameter and running statistic must be present exactly once.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.arch()?)?;
        let mut seen = vec![false; model.params().len() + 2 * model.bn_states().len()];
        for t in &self.tensors {
            let slot = if let Some(bn) = t.name.strip_suffix(RUNNING_MEAN) {
                let i = model.bn_index(bn).ok_or_else(|| unknown(&t.name))?;
                set_stat(&mut model.bn_states_mut()[i].running_mean, t)?;
                model.params().len() + 2 * i
            } else if let Some(bn) = t.name.strip_suffix(RUNNING_VAR) {
                let i = model.bn_index(bn).ok_or_else(|| unknown(&t.name))?;
                set_stat(&mut model.bn_states_mut()[i].running_var, t)?;
                model.params().len() + 2 * i + 1
            } else {
                model.set_param(&t.name, &t.shape, t.data.clone())?;
                model.param_names().iter().position(|n| n == &t.name).expect("set_param accepted the name")
            };
            if std::mem::replace(&mut seen[slot], true) {
                return Err(Error::data(format!("checkpoint repeats tensor `{}`", t.name)));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let np = model.params().len();
            let name = if missing < np {
                model.param_names()[missing].clone()
            } else {
                let i = (missing - np) / 2;
                let suffix = if (missing - np) % 2 == 0 { RUNNING_MEAN } else { RUNNING_VAR };
                format!("{}{suffix}", model.bn_names()[i])
            };
            return Err(Error::data(format!("checkpoint lacks tensor `{name}`")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|t| 12 + t.name.len() + 4 * (t.shape.len() + t.data.len())).sum();
        let mut out = Vec::with_capacity(32 + self.config_text.len() + payload);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::data("not a checkpoint: bad magic"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let config_text = r.string()?;
        let iteration = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.error("extent overflow"))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| r.error("extent overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Checkpoint { config_text, iteration, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn unknown(name: &str) -> Error {
    Error::data(format!("checkpoint tensor `{name}` does not belong to this architecture"))
}

fn set_stat(dst: &mut [f32], t: &NamedTensor) -> Result<()> {
    if t.shape != [dst.len()] {
        return Err(Error::data(format!("`{}` has shape {:?}, expected [{}]", t.name, t.shape, dst.len())));
    }
    dst.copy_from_slice(&t.data);
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, what: &str) -> Error {
        Error::data(format!("corrupt checkpoint at byte {}: {what}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.error("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::data(format!("corrupt checkpoint at byte {at}: invalid UTF-8")))
    }
}
