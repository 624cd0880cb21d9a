//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMF1"  u32 version
//! u32 config_len  config_len bytes of `key=value` lines
//! u32 record_count
//! record_count × { u32 name_len, name, u32 rank, rank × u64 dim, numel × f64 }
//! u32 crc32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mmf_core::episodes::Normalization;
use mmf_core::metatrain::{Checkpoint, TrainConfig};
use mmf_core::{AdaptConfig, ModelConfig, ModelParams, Tensor};

use crate::error::{Error, Result};
use crate::num::fmt_f64;

pub const MAGIC: &[u8; 4] = b"MMF1";
pub const VERSION: u32 = 1;

/// Canonical `key=value` text for the run configuration and training summary.
pub fn render_config(ck: &Checkpoint) -> String {
    let c = &ck.config;
    let channels: Vec<String> = c.model.exml_channels.iter().map(usize::to_string).collect();
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
    kv("model.exml_channels", channels.join(","));
    kv("model.ff_hidden", c.model.ff_hidden.to_string());
    kv("model.ff_layers", c.model.ff_layers.to_string());
    kv("model.latent", c.model.latent.to_string());
    kv("model.lambda_init", fmt_f64(c.model.lambda_init));
    kv("adapt.eta", fmt_f64(c.adapt.eta));
    kv("adapt.steps", c.adapt.steps.to_string());
    kv("train.epochs", c.epochs.to_string());
    kv("train.batches_per_epoch", c.batches_per_epoch.to_string());
    kv("train.batch_size", c.batch_size.to_string());
    kv("train.outer_lr", fmt_f64(c.outer_lr));
    kv("train.rows", c.rows.to_string());
    kv("train.cols", c.cols.to_string());
    kv("train.train_ratio", fmt_f64(c.train_ratio));
    kv("train.dropout", fmt_f64(c.dropout));
    kv("train.seed", c.seed.to_string());
    kv("train.patience", c.patience.to_string());
    kv("train.valid_episodes", c.valid_episodes.to_string());
    kv("train.valid_holdout", fmt_f64(c.valid_holdout));
    kv("norm.mean", fmt_f64(ck.normalization.mean));
    kv("norm.std", fmt_f64(ck.normalization.std));
    kv("best_valid_loss", fmt_f64(ck.best_valid_loss));
    kv("best_epoch", ck.best_epoch.to_string());
    s
}

struct ConfigMap<'a> {
    path: &'a Path,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> ConfigMap<'a> {
    fn parse(path: &'a Path, text: &'a str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let Some((k, v)) = line.split_once('=') else {
                return Err(format_err(path, format!("config line without '=': {line:?}")));
            };
            if map.insert(k, v).is_some() {
                return Err(format_err(path, format!("duplicate config key {k:?}")));
            }
        }
        Ok(Self { path, map })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.map.get(key).ok_or_else(|| format_err(self.path, format!("missing config key {key:?}")))?;
        raw.parse().map_err(|_| format_err(self.path, format!("bad value {raw:?} for {key:?}")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let raw: String = self.get(key)?;
        raw.split(',')
            .map(|p| p.parse().map_err(|_| format_err(self.path, format!("bad list {raw:?} for {key:?}"))))
            .collect()
    }
}

fn format_err(path: &Path, message: String) -> Error {
    Error::Format { path: path.to_path_buf(), message }
}

fn parse_config(path: &Path, text: &str) -> Result<(TrainConfig, Normalization, f64, usize)> {
    let m = ConfigMap::parse(path, text)?;
    let config = TrainConfig {
        model: ModelConfig {
            exml_channels: m.list("model.exml_channels")?,
            ff_hidden: m.get("model.ff_hidden")?,
            ff_layers: m.get("model.ff_layers")?,
            latent: m.get("model.latent")?,
            lambda_init: m.get("model.lambda_init")?,
        },
        adapt: AdaptConfig { eta: m.get("adapt.eta")?, steps: m.get("adapt.steps")? },
        epochs: m.get("train.epochs")?,
        batches_per_epoch: m.get("train.batches_per_epoch")?,
        batch_size: m.get("train.batch_size")?,
        outer_lr: m.get("train.outer_lr")?,
        rows: m.get("train.rows")?,
        cols: m.get("train.cols")?,
        train_ratio: m.get("train.train_ratio")?,
        dropout: m.get("train.dropout")?,
        seed: m.get("train.seed")?,
        patience: m.get("train.patience")?,
        valid_episodes: m.get("train.valid_episodes")?,
        valid_holdout: m.get("train.valid_holdout")?,
    };
    let norm = Normalization { mean: m.get("norm.mean")?, std: m.get("norm.std")? };
    Ok((config, norm, m.get("best_valid_loss")?, m.get("best_epoch")?))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(what: &str, len: usize) -> Result<u32> {
    u32::try_from(len).map_err(|_| Error::Usage(format!("{what} too large for the checkpoint format")))
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let config = render_config(ck);
    put_u32(&mut buf, len_u32("config", config.len())?);
    buf.extend_from_slice(config.as_bytes());
    let named = ck.params.named_tensors();
    put_u32(&mut buf, len_u32("record count", named.len())?);
    for (name, t) in named {
        put_u32(&mut buf, len_u32("name", name.len())?);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, len_u32("rank", t.rank())?);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err(self.path, format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| format_err(self.path, format!("{what} is not UTF-8")))
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(format_err(path, format!("truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic)".into()));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found, expected: VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { path: path.to_path_buf(), stored, computed });
    }

    let mut r = Reader { path, bytes: body, pos: 8 };
    let config_len = r.u32("config length")? as usize;
    let config_text = r.utf8(config_len, "config")?;
    let (config, normalization, best_valid_loss, best_epoch) = parse_config(path, config_text)?;
    let count = r.u32("record count")?;
    let mut named = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = r.utf8(name_len, "name")?.to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("dimension")?).map_err(|_| format_err(path, "dimension overflow".into()))?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| format_err(path, format!("shape {shape:?} overflows")))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| format_err(path, "payload overflow".into()))?, &name)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        named.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(format_err(path, format!("{} trailing bytes before the checksum", body.len() - r.pos)));
    }
    let params = ModelParams::from_named(&config.model, &named)?;
    Ok(Checkpoint { params, config, normalization, best_valid_loss, best_epoch })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)?).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(path, &bytes)
}
