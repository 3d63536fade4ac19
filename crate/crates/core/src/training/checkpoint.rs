//! `FVOC` checkpoints.
//!
//! Layout: magic, `u32` version, `u32` entry count, then entries of
//! `{u16 name length, UTF-8 name, u8 rank, u32 dims…, f32 LE data}`,
//! followed by a `u32`-length-prefixed UTF-8 `key = value` block holding the
//! resolved config and the run state (iteration, optimizer step, RNG).

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::flowstack::{FlowModel, ModelDims};
use crate::numcore::RealArray;

use super::optim::Adam;

const MAGIC: &[u8; 4] = b"FVOC";
const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub iteration: u64,
    pub names: Vec<String>,
    pub params: Vec<RealArray>,
    pub adam: Option<Adam>,
    pub rng: Option<RngState>,
}

/// Round every entry to the nearest `f32`, the precision stored on disk.
pub fn quantize(values: &mut [RealArray]) {
    for v in values {
        v.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

fn put_entry(out: &mut Vec<u8>, name: &str, v: &RealArray) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(v.shape().len() as u8);
    for &d in v.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in v.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("bad rng seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn from_model(
        config: &Config,
        iteration: u64,
        model: &FlowModel,
        adam: Option<&Adam>,
        rng: Option<&ChaCha8Rng>,
    ) -> Self {
        Self {
            config: config.clone(),
            iteration,
            names: model.params().names().to_vec(),
            params: model.params().values().to_vec(),
            adam: adam.cloned(),
            rng: rng.map(RngState::capture),
        }
    }

    pub fn model(&self) -> Result<FlowModel> {
        FlowModel::with_params(
            ModelDims::from_config(&self.config),
            &self.names,
            self.params.clone(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let n_adam = if self.adam.is_some() { 2 * self.params.len() } else { 0 };
        out.extend_from_slice(&((self.params.len() + n_adam) as u32).to_le_bytes());
        for (name, v) in self.names.iter().zip(&self.params) {
            put_entry(&mut out, name, v);
        }
        if let Some(adam) = &self.adam {
            for (name, v) in self.names.iter().zip(&adam.m) {
                put_entry(&mut out, &format!("{ADAM_M}{name}"), v);
            }
            for (name, v) in self.names.iter().zip(&adam.v) {
                put_entry(&mut out, &format!("{ADAM_V}{name}"), v);
            }
        }
        let mut text = self.config.to_text();
        text.push_str(&format!("iteration = {}\n", self.iteration));
        if let Some(adam) = &self.adam {
            text.push_str(&format!("adam_t = {}\n", adam.t));
        }
        if let Some(rng) = &self.rng {
            text.push_str(&format!("rng_seed = {}\n", hex(&rng.seed)));
            text.push_str(&format!("rng_word_pos = {}\n", rng.word_pos));
        }
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let (mut names, mut params, mut ms, mut vs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let arr = RealArray::new(shape, data)?;
            if !arr.all_finite() {
                return Err(Error::Format(format!("entry {name} holds non-finite values")));
            }
            if let Some(base) = name.strip_prefix(ADAM_M) {
                ms.push((base.to_string(), arr));
            } else if let Some(base) = name.strip_prefix(ADAM_V) {
                vs.push((base.to_string(), arr));
            } else {
                names.push(name);
                params.push(arr);
            }
        }
        let tlen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(tlen)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }

        let mut cfg_text = String::new();
        let (mut iteration, mut adam_t, mut seed, mut word_pos) = (None, None, None, None);
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                cfg_text.push_str(line);
                cfg_text.push('\n');
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<u128>().map_err(|_| Error::Format(format!("bad {k}")));
            match k {
                "iteration" => iteration = Some(num(v)? as u64),
                "adam_t" => adam_t = Some(num(v)? as u64),
                "rng_seed" => seed = Some(unhex(v)?),
                "rng_word_pos" => word_pos = Some(num(v)?),
                _ => {
                    cfg_text.push_str(line);
                    cfg_text.push('\n');
                }
            }
        }
        let config = Config::parse(&cfg_text)?;
        let adam = if ms.is_empty() && vs.is_empty() {
            None
        } else {
            let aligned = |v: &[(String, RealArray)]| {
                v.len() == names.len() && v.iter().zip(&names).all(|((a, _), b)| a == b)
            };
            if !aligned(&ms) || !aligned(&vs) {
                return Err(Error::Format("optimizer moments do not match parameters".into()));
            }
            Some(Adam {
                m: ms.into_iter().map(|(_, a)| a).collect(),
                v: vs.into_iter().map(|(_, a)| a).collect(),
                t: adam_t.ok_or_else(|| Error::Format("missing adam_t".into()))?,
            })
        };
        let rng = match (seed, word_pos) {
            (Some(seed), Some(word_pos)) => Some(RngState { seed, word_pos }),
            (None, None) => None,
            _ => return Err(Error::Format("incomplete rng state".into())),
        };
        Ok(Self {
            config,
            iteration: iteration.ok_or_else(|| Error::Format("missing iteration".into()))?,
            names,
            params,
            adam,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
