//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `SVTR2CKP`, a little-endian `u32` header length,
//! a UTF-8 `key=value` header, then every array as raw little-endian `f32`
//! in header order.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{make_config, Variant};
use crate::error::{Error, Result};
use crate::frm::SequenceHead;
use crate::model::{ModelConfig, SvtrV2, SGM_PREFIX};
use crate::msr::Charset;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SVTR2CKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    A,
    B,
    Inference,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::Inference => "inference",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Phase::A),
            "B" | "b" => Ok(Phase::B),
            "inference" => Ok(Phase::Inference),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub charset: Charset,
    pub phase: Phase,
    pub step: u64,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(
        model: &SvtrV2,
        store: &ParamStore<f32>,
        charset: &Charset,
        phase: Phase,
        step: u64,
    ) -> Result<Self> {
        if model.config.num_classes != charset.len() {
            return Err(Error::Config(format!(
                "model has {} classes, charset {}",
                model.config.num_classes,
                charset.len()
            )));
        }
        if phase == Phase::Inference && (model.has_sgm() || store.has_prefix(SGM_PREFIX)) {
            return Err(Error::Config(
                "inference checkpoints must not carry the guidance branch".into(),
            ));
        }
        let arrays = store
            .entries()
            .iter()
            .map(|e| NamedArray {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                decay: e.decay,
                data: e.tensor.data().to_vec(),
            })
            .collect();
        Ok(Checkpoint {
            config: model.config.clone(),
            charset: charset.clone(),
            phase,
            step,
            arrays,
        })
    }

    /// Rebuilds the model; fails if any parameter is missing or misshapen.
    pub fn to_model(&self) -> Result<(SvtrV2, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        for a in &self.arrays {
            store.insert(&a.name, Tensor::new(&a.shape, a.data.clone())?, a.decay)?;
        }
        let before = store.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SvtrV2::build(self.config.clone(), &mut store, &mut rng)
            .map_err(|e| Error::Format(format!("arrays do not fit the model: {e}")))?;
        if store.len() != before {
            let missing: Vec<&str> = store.entries()[before..].iter().map(|e| e.name.as_str()).collect();
            return Err(Error::Format(format!("missing arrays: {}", missing.join(", "))));
        }
        Ok((model, store))
    }

    fn header(&self) -> Result<String> {
        let c = &self.config;
        let mut h = String::new();
        let codepoints: Vec<String> = self.charset.chars().iter().map(|&ch| (ch as u32).to_string()).collect();
        h.push_str(&format!("version={FORMAT_VERSION}\n"));
        h.push_str(&format!("variant={}\n", c.variant()));
        h.push_str(&format!("head={}\n", c.head.as_str()));
        h.push_str(&format!("sgm={}\n", u8::from(c.sgm)));
        h.push_str(&format!("window={}\n", c.window));
        h.push_str(&format!("num_classes={}\n", c.num_classes));
        h.push_str(&format!("charset_hash={}\n", self.charset.hash()));
        h.push_str(&format!("charset={}\n", codepoints.join(",")));
        h.push_str(&format!("phase={}\n", self.phase));
        h.push_str(&format!("step={}\n", self.step));
        for a in &self.arrays {
            if a.name.is_empty() || a.name.contains(['\t', '\n', '=']) {
                return Err(Error::Format(format!("array name {:?} is not storable", a.name)));
            }
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Format(format!("array {} has inconsistent shape", a.name)));
            }
            let dims: Vec<String> = a.shape.iter().map(usize::to_string).collect();
            h.push_str(&format!(
                "array={}\t{}\t{}\n",
                a.name,
                u8::from(a.decay),
                dims.join(",")
            ));
        }
        Ok(h)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header()?;
        let len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
        let payload: usize = self.arrays.iter().map(|a| a.data.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let eof = |what: &str| {
            Error::io(
                "<checkpoint>",
                io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
            )
        };
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8).ok_or_else(|| eof("magic"))?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let len = cur.take(4).ok_or_else(|| eof("header length"))?;
        let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
        let header = cur.take(len).ok_or_else(|| eof("header"))?;
        let header = std::str::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut parsed = parse_header(header)?;
        for a in &mut parsed.arrays {
            let n: usize = a.shape.iter().product();
            let raw = cur.take(n * 4).ok_or_else(|| eof(&format!("array {}", a.name)))?;
            a.data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(parsed)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
}

fn parse_header(text: &str) -> Result<Checkpoint> {
    let fmt_err = |m: String| Error::Format(m);
    let mut fields = std::collections::HashMap::new();
    let mut arrays = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("malformed header line {line:?}")))?;
        if k == "array" {
            let parts: Vec<&str> = v.split('\t').collect();
            if parts.len() != 3 {
                return Err(fmt_err(format!("malformed array entry {v:?}")));
            }
            let shape = if parts[2].is_empty() {
                Vec::new()
            } else {
                parts[2]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| fmt_err(format!("bad shape for {}", parts[0])))?
            };
            arrays.push(NamedArray {
                name: parts[0].to_string(),
                shape,
                decay: parts[1] == "1",
                data: Vec::new(),
            });
        } else if fields.insert(k, v).is_some() {
            return Err(fmt_err(format!("duplicate header key {k}")));
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| fmt_err(format!("header lacks {k}")))
    };
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| fmt_err(format!("bad {k}"))) };
    let version = num("version")?;
    if version != FORMAT_VERSION as u64 {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let variant: Variant = get("variant")?.parse().map_err(|e: Error| fmt_err(e.to_string()))?;
    let head: SequenceHead = get("head")?.parse().map_err(|e: Error| fmt_err(e.to_string()))?;
    let chars: Vec<char> = get("charset")?
        .split(',')
        .map(|c| c.parse::<u32>().ok().and_then(char::from_u32))
        .collect::<Option<_>>()
        .ok_or_else(|| fmt_err("bad charset".into()))?;
    let charset = Charset::new(chars).map_err(|e| fmt_err(e.to_string()))?;
    if charset.hash() != get("charset_hash")? {
        return Err(fmt_err("charset does not match its recorded hash".into()));
    }
    let config = ModelConfig {
        backbone: make_config(variant),
        num_classes: num("num_classes")? as usize,
        head,
        sgm: num("sgm")? == 1,
        window: num("window")? as usize,
    };
    if config.num_classes != charset.len() {
        return Err(fmt_err("class count disagrees with the charset".into()));
    }
    Ok(Checkpoint {
        config,
        charset,
        phase: get("phase")?.parse().map_err(|e: Error| fmt_err(e.to_string()))?,
        step: num("step")?,
        arrays,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Loads and requires the checkpoint's charset to hash like `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &Charset) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.charset.hash() != expected.hash() {
        return Err(Error::Config(format!(
            "charset hash {} does not match checkpoint {}",
            expected.hash(),
            ckpt.charset.hash()
        )));
    }
    Ok(ckpt)
}
