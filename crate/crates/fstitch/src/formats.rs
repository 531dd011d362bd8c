//! Binary containers for keys (`FSTITCH1`) and models (`FSMODEL1`).
//!
//! Both start with an 8-byte magic whose last byte is the format version,
//! followed by a `u32` little-endian length and a UTF-8 `key=value` header,
//! one pair per line. Payloads are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fstitch_core::{
    Activation, AdvKind, DenseLayer, KeyBaseSet, KeyEntry, Model, ModelDigest, Norm, Tensor, WatermarkKey,
};
use thiserror::Error;

const KEY_MAGIC: &[u8; 7] = b"FSTITCH";
const MODEL_MAGIC: &[u8; 7] = b"FSMODEL";
const VERSION: u8 = b'1';

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a {expected} file (bad magic)")]
    Magic { expected: &'static str },
    #[error("unsupported {format} version byte {found:#04x}")]
    Version { format: &'static str, found: u8 },
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("header: {0}")]
    Header(String),
    #[error("invalid content: {0}")]
    Content(String),
}

fn header_err(msg: impl Into<String>) -> FormatError {
    FormatError::Header(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(FormatError::Truncated(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n.checked_mul(8).ok_or(FormatError::Truncated(self.bytes.len()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 7], pairs: &[(&str, String)]) {
    out.extend_from_slice(magic);
    out.push(VERSION);
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
}

struct Header(BTreeMap<String, String>);

impl Header {
    fn get(&self, key: &str) -> Result<&str, FormatError> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| header_err(format!("missing field `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| header_err(format!("field `{key}` has invalid value `{raw}`")))
    }
}

fn read_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 7],
    format: &'static str,
) -> Result<(Header, Reader<'a>), FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(7).map_err(|_| FormatError::Magic { expected: format })? != magic {
        return Err(FormatError::Magic { expected: format });
    }
    let found = r.u8()?;
    if found != VERSION {
        return Err(FormatError::Version { format, found });
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| header_err("not UTF-8"))?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| header_err(format!("malformed line `{line}`")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(header_err(format!("duplicate field `{k}`")));
        }
    }
    let header = Header(map);
    let version: u32 = header.parse("version")?;
    if version != 1 {
        return Err(FormatError::Version {
            format,
            found: version as u8,
        });
    }
    Ok((header, r))
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_key(key: &WatermarkKey) -> Vec<u8> {
    let dim = key.input_dim();
    let mut out = Vec::with_capacity(64 + key.len() * (10 + 8 * dim));
    write_header(
        &mut out,
        KEY_MAGIC,
        &[
            ("version", "1".into()),
            // `{:?}` on f64 prints the shortest string that parses back exactly
            ("epsilon", format!("{:?}", key.epsilon)),
            ("norm", key.norm.as_str().into()),
            ("seed", key.rng_seed.to_string()),
            ("model_digest", key.model_digest.to_hex()),
            ("entries", key.len().to_string()),
            ("input_dim", dim.to_string()),
            ("base_set", key.base_set.as_str().into()),
        ],
    );
    for e in key.entries() {
        out.push(match e.kind {
            AdvKind::TrueAdv => 0,
            AdvKind::FalseAdv => 1,
        });
        out.push(e.label as u8);
        out.extend_from_slice(&e.base_source_id.to_le_bytes());
        put_f64s(&mut out, e.input.data());
    }
    out
}

pub fn decode_key(bytes: &[u8]) -> Result<WatermarkKey, FormatError> {
    let (h, mut r) = read_header(bytes, KEY_MAGIC, "FSTITCH key")?;
    let epsilon: f64 = h.parse("epsilon")?;
    let norm = Norm::parse(h.get("norm")?).ok_or_else(|| header_err("unknown norm"))?;
    let seed: u64 = h.parse("seed")?;
    let digest = ModelDigest::from_hex(h.get("model_digest")?)
        .ok_or_else(|| header_err("model_digest must be 64 lowercase hex chars"))?;
    let n: usize = h.parse("entries")?;
    let dim: usize = h.parse("input_dim")?;
    let base_set = KeyBaseSet::parse(h.get("base_set")?).ok_or_else(|| header_err("unknown base_set"))?;
    if dim == 0 {
        return Err(header_err("input_dim must be positive"));
    }
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let kind = match r.u8()? {
            0 => AdvKind::TrueAdv,
            1 => AdvKind::FalseAdv,
            b => return Err(FormatError::Content(format!("entry {i}: unknown kind byte {b}"))),
        };
        let label = r.u8()? as usize;
        let base_source_id = r.u64()?;
        let input = Tensor::new(vec![dim], r.f64s(dim)?)
            .map_err(|e| FormatError::Content(format!("entry {i}: {e}")))?;
        entries.push(KeyEntry {
            input,
            label,
            kind,
            base_source_id,
        });
    }
    r.finish()?;
    WatermarkKey::new(entries, epsilon, norm, digest, seed, base_set)
        .map_err(|e| FormatError::Content(e.to_string()))
}

pub fn save_key(path: impl AsRef<Path>, key: &WatermarkKey) -> Result<(), FormatError> {
    write_file(path.as_ref(), &encode_key(key))
}

pub fn load_key(path: impl AsRef<Path>) -> Result<WatermarkKey, FormatError> {
    decode_key(&read_file(path.as_ref())?)
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let arch: Vec<String> = model
        .layers()
        .iter()
        .map(|l| format!("{}x{}:{}", l.fan_in(), l.fan_out(), l.activation().code()))
        .collect();
    let mut out = Vec::with_capacity(64 + model.n_params() * 8);
    write_header(
        &mut out,
        MODEL_MAGIC,
        &[
            ("version", "1".into()),
            ("layers", model.layers().len().to_string()),
            ("arch", arch.join(",")),
        ],
    );
    for l in model.layers() {
        put_f64s(&mut out, l.weights().data());
        put_f64s(&mut out, l.biases().data());
    }
    out
}

fn parse_layer_spec(spec: &str) -> Option<(usize, usize, Activation)> {
    let (dims, act) = spec.split_once(':')?;
    let (fan_in, fan_out) = dims.split_once('x')?;
    Some((
        fan_in.parse().ok()?,
        fan_out.parse().ok()?,
        Activation::from_code(act.parse().ok()?)?,
    ))
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, FormatError> {
    let (h, mut r) = read_header(bytes, MODEL_MAGIC, "FSMODEL model")?;
    let n: usize = h.parse("layers")?;
    let specs: Vec<_> = h
        .get("arch")?
        .split(',')
        .map(|s| parse_layer_spec(s).ok_or_else(|| header_err(format!("bad layer spec `{s}`"))))
        .collect::<Result<_, _>>()?;
    if specs.len() != n {
        return Err(header_err(format!("{} layer specs for {n} layers", specs.len())));
    }
    let mut layers = Vec::with_capacity(n);
    for (i, (fan_in, fan_out, act)) in specs.into_iter().enumerate() {
        let content = |e: &dyn std::fmt::Display| FormatError::Content(format!("layer {i}: {e}"));
        let w = Tensor::new(vec![fan_in, fan_out], r.f64s(fan_in * fan_out)?).map_err(|e| content(&e))?;
        let b = Tensor::new(vec![fan_out], r.f64s(fan_out)?).map_err(|e| content(&e))?;
        layers.push(DenseLayer::new(w, b, act).map_err(|e| content(&e))?);
    }
    r.finish()?;
    Model::new(layers).map_err(|e| FormatError::Content(e.to_string()))
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<(), FormatError> {
    write_file(path.as_ref(), &encode_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, FormatError> {
    decode_model(&read_file(path.as_ref())?)
}
