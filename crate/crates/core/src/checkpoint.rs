//! Parameter checkpoints: a binary tensor file plus a `key=value` sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::ParamStore;
use crate::config::TrainConfig;
use crate::error::{CcsdError, Result};
use crate::ssnet::{NetConfig, SsNet};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"CCSDCKP1";

/// Sidecar contents.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub seed: u64,
    pub steps: u64,
    pub epoch: usize,
    pub dtype: DType,
    /// Validation mean Dice that selected this checkpoint.
    pub val_mean_dice: f64,
}

const NET_KEYS: &[&str] = &[
    "net.n_modalities",
    "net.spatial_rank",
    "net.input_size",
    "net.base_channels",
    "net.depth",
    "net.n_classes",
    "net.feature_channels",
];

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        let cfg = TrainConfig {
            net: self.net.clone(),
            ..TrainConfig::default()
        };
        let mut out = String::new();
        for k in NET_KEYS {
            out.push_str(&format!("{k}={}\n", cfg.get(k).expect("net key")));
        }
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("steps={}\n", self.steps));
        out.push_str(&format!("epoch={}\n", self.epoch));
        out.push_str(&format!("dtype={}\n", self.dtype.name()));
        out.push_str(&format!("val_mean_dice={}\n", self.val_mean_dice));
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| CcsdError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| map.remove(k).ok_or_else(|| bad(format!("missing key {k}")));
        let mut cfg = TrainConfig::default();
        for k in NET_KEYS {
            let v = take(k)?;
            cfg.set(k, &v).map_err(|e| bad(e.to_string()))?;
        }
        let num = |k: &str, v: String| v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
        let seed = take("seed")?.parse().map_err(|e| bad(format!("seed: {e}")))?;
        let steps = take("steps")?.parse().map_err(|e| bad(format!("steps: {e}")))?;
        let epoch = take("epoch")?.parse().map_err(|e| bad(format!("epoch: {e}")))?;
        let dtype = match take("dtype")?.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(bad(format!("unknown dtype {other:?}"))),
        };
        let val_mean_dice = num("val_mean_dice", take("val_mean_dice")?)?;
        if let Some(k) = map.keys().next() {
            return Err(bad(format!("unknown key {k}")));
        }
        Ok(Self {
            net: cfg.net,
            seed,
            steps,
            epoch,
            dtype,
            val_mean_dice,
        })
    }
}

/// Sidecar path for a checkpoint file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn encode_params<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        let t = params.get(id);
        for d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CcsdError::Format {
                path: self.path.to_path_buf(),
                reason: "truncated checkpoint".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_params<T: Scalar>(buf: &[u8], path: &Path) -> Result<ParamStore<T>> {
    let bad = |reason: String| CcsdError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut c = Cursor { buf, pos: 0, path };
    if c.take(8)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let dtype = DType::from_code(c.take(1)?[0]).ok_or_else(|| bad("unknown dtype code".into()))?;
    let count = c.u64()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = c.u64()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let mut shape = [0usize; 5];
        for d in &mut shape {
            *d = c.u64()? as usize;
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            DType::F32 => c
                .take(4 * n)?
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => c
                .take(8 * n)?
                .chunks_exact(8)
                .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
        };
        params.add(name, Tensor::from_vec(shape, data)?);
    }
    if c.pos != buf.len() {
        return Err(bad("trailing bytes after parameters".into()));
    }
    Ok(params)
}

/// Writes `net` to `path` and its sidecar to `path.meta`.
pub fn save<T: Scalar>(net: &SsNet<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if meta.net != *net.config() {
        return Err(CcsdError::invalid("checkpoint metadata does not describe this network"));
    }
    fs::write(path, encode_params(net.params())).map_err(|e| CcsdError::io(path, e))?;
    let mp = meta_path(path);
    fs::write(&mp, meta.to_text()).map_err(|e| CcsdError::io(&mp, e))
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| CcsdError::io(&mp, e))?;
    CheckpointMeta::parse(&text, &mp)
}

/// Loads a checkpoint. When `expected` is given its network config must match
/// the stored one.
pub fn load<T: Scalar>(path: &Path, expected: Option<&NetConfig>) -> Result<(SsNet<T>, CheckpointMeta)> {
    let meta = load_meta(path)?;
    if let Some(cfg) = expected {
        if *cfg != meta.net {
            return Err(CcsdError::Incompatible(format!(
                "checkpoint {} was trained with {:?} but the run config asks for {:?}",
                path.display(),
                meta.net,
                cfg
            )));
        }
    }
    let buf = fs::read(path).map_err(|e| CcsdError::io(path, e))?;
    let params = decode_params::<T>(&buf, path)?;
    let net = SsNet::with_params(meta.net.clone(), params)?;
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetConfig {
        NetConfig {
            n_modalities: 2,
            spatial_rank: 2,
            input_size: vec![8, 8],
            base_channels: 4,
            depth: 2,
            n_classes: 4,
            feature_channels: 4,
        }
    }

    fn meta(net: &NetConfig) -> CheckpointMeta {
        CheckpointMeta {
            net: net.clone(),
            seed: 3,
            steps: 17,
            epoch: 2,
            dtype: DType::F32,
            val_mean_dice: 0.625,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = SsNet::<f32>::new(cfg(), 11).unwrap();
        save(&net, &meta(&cfg()), &path).unwrap();
        let (back, m) = load::<f32>(&path, Some(&cfg())).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(m, meta(&cfg()));
        assert_eq!(CheckpointMeta::parse(&m.to_text(), &path).unwrap(), m);
    }

    #[test]
    fn mismatch_and_corruption_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = SsNet::<f32>::new(cfg(), 11).unwrap();
        save(&net, &meta(&cfg()), &path).unwrap();
        let mut other = cfg();
        other.feature_channels = 8;
        assert!(matches!(load::<f32>(&path, Some(&other)), Err(CcsdError::Incompatible(_))));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load::<f32>(&path, None), Err(CcsdError::Format { .. })));
        assert!(matches!(load::<f32>(&dir.path().join("none"), None), Err(CcsdError::Io { .. })));
    }
}
