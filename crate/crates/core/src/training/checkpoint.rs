//! Binary checkpoint format.
//!
//! ```text
//! "LLIP" | version u32 | entry count u32 | entries… | CRC32 of the entry bytes
//! entry: name length u16 | UTF-8 name | ndim u8 | dims u32… | f32 payload
//! ```
//! All integers and floats are little-endian. Entries are `param/<name>`,
//! `adam.m/<name>`, `adam.v/<name>` in parameter order, then `meta/step` and
//! `meta/config` (the JSON configuration, one byte per element).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LlipError, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::numerics::Tensor;

use super::{Moments, TrainConfig};

pub const MAGIC: &[u8; 4] = b"LLIP";
pub const VERSION: u32 = 1;

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
    pub params: ParamStore<f32>,
    pub moments: Moments,
}

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    train: TrainConfig,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.model.clone(), self.params.clone())
    }
}

fn push_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let nb = name.as_bytes();
    let len = u16::try_from(nb.len()).map_err(|_| LlipError::Format(format!("entry name too long: {}", name)))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(nb);
    let ndim = u8::try_from(t.ndim()).map_err(|_| LlipError::Format(format!("`{}` has too many axes", name)))?;
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| LlipError::Format(format!("`{}` axis too long", name)))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut count: u32 = 0;
    for (prefix, store) in [("param", &ck.params), ("adam.m", &ck.moments.m), ("adam.v", &ck.moments.v)] {
        for (name, t) in store.iter() {
            push_entry(&mut entries, &format!("{prefix}/{name}"), t)?;
            count += 1;
        }
    }
    if ck.step >= 1 << 24 {
        return Err(LlipError::Format(format!("step {} is not exactly representable", ck.step)));
    }
    push_entry(&mut entries, "meta/step", &Tensor::full(&[1], ck.step as f32))?;
    let echo = serde_json::to_string(&ConfigEcho {
        model: ck.model.clone(),
        train: ck.train.clone(),
    })
    .map_err(|e| LlipError::Format(format!("config echo: {}", e)))?;
    let bytes: Vec<f32> = echo.bytes().map(f32::from).collect();
    push_entry(&mut entries, "meta/config", &Tensor::new(&[bytes.len()], bytes)?)?;
    count += 2;

    let mut out = Vec::with_capacity(entries.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&entries);
    out.extend_from_slice(&crc32fast::hash(&entries).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(LlipError::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(LlipError::Format("not a checkpoint (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(LlipError::Format(format!("unsupported checkpoint version {}", version)));
    }
    let count = r.u32()?;
    let body = &bytes[12..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(LlipError::Format("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| LlipError::Format("entry name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(LlipError::Format("trailing bytes after the last entry".into()));
    }
    Ok(out)
}

/// Parses checkpoint bytes. When `expected` is given, the stored parameters
/// must have exactly the shapes that configuration implies.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    let mut step = None;
    let mut echo = None;
    for (name, t) in decode_entries(bytes)? {
        let (prefix, rest) = name
            .split_once('/')
            .ok_or_else(|| LlipError::Format(format!("entry `{}` has no section", name)))?;
        match prefix {
            "param" => params.insert(rest, t),
            "adam.m" => m.insert(rest, t),
            "adam.v" => v.insert(rest, t),
            "meta" if rest == "step" => step = Some(t.item() as usize),
            "meta" if rest == "config" => {
                let text: Vec<u8> = t.data().iter().map(|&b| b as u8).collect();
                let parsed: ConfigEcho = serde_json::from_slice(&text)
                    .map_err(|e| LlipError::Format(format!("config echo: {}", e)))?;
                echo = Some(parsed);
            }
            _ => return Err(LlipError::Format(format!("unknown entry `{}`", name))),
        }
    }
    let step = step.ok_or_else(|| LlipError::Format("missing meta/step".into()))?;
    let echo = echo.ok_or_else(|| LlipError::Format("missing meta/config".into()))?;
    let model_cfg = match expected {
        Some(cfg) => cfg.clone(),
        None => echo.model,
    };
    let params = Model::from_params(model_cfg.clone(), params)?.params;
    for (label, store) in [("first", &m), ("second", &v)] {
        let same = store.len() == params.len()
            && store
                .iter()
                .zip(params.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(LlipError::Compatibility(format!(
                "{} moment entries do not match the parameters",
                label
            )));
        }
    }
    Ok(Checkpoint {
        model: model_cfg,
        train: echo.train,
        step,
        params,
        moments: Moments { m, v },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LlipError::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| LlipError::io(path, e))
}

/// Loads a checkpoint, checking it against `expected` when given.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| LlipError::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::desk(10);
        c.vit.depth = 1;
        c.vit.mixture_tokens = 2;
        c.text.depth = 1;
        c
    }

    fn sample() -> Checkpoint {
        let model = tiny();
        let params = init_params::<f32>(&model, 3).unwrap();
        let mut moments = Moments::zeros_like(&params);
        moments.m.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|x| *x = 0.25));
        Checkpoint {
            model,
            train: TrainConfig::default(),
            step: 7,
            params,
            moments,
        }
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let ck = sample();
        let a = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&a, None).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), a);
        assert_eq!(&a[..4], b"LLIP");
        assert_eq!(u32::from_le_bytes(a[4..8].try_into().unwrap()), VERSION);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let mut a = encode_checkpoint(&sample()).unwrap();
        let mut bad_magic = a.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad_magic, None), Err(LlipError::Format(_))));
        let mut bad_version = a.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_checkpoint(&bad_version, None), Err(LlipError::Format(_))));
        let mid = a.len() / 2;
        a[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&a, None), Err(LlipError::Format(_))));
    }

    #[test]
    fn mismatched_config_is_incompatible() {
        let a = encode_checkpoint(&sample()).unwrap();
        let mut other = tiny();
        other.vit.width = 32;
        other.text.width = 32;
        assert!(matches!(decode_checkpoint(&a, Some(&other)), Err(LlipError::Compatibility(_))));
    }
}
