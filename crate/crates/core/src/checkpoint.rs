//! Named-array archives with a JSON header and a trailing content hash.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, little-endian
//! f64 payload in header order, SHA-256 over everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use d2m_autograd::{Adam, ParamStore, Tensor};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Codebook, CodecConfig, CodecLevel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"D2MCKPT1";
const HASH_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

fn corrupt(path: &Path, what: &str) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.arrays.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no array {name:?}")))
    }

    /// Stores every tensor of `store` under `prefix/`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, value, _) in store.iter() {
            self.push(format!("{prefix}/{name}"), value.clone());
        }
    }

    /// Fills `store` from arrays under `prefix/`; every tensor must be present.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let missing = store.load_from(|n| self.get(&format!("{prefix}/{n}")).ok());
        if let Some(first) = missing.first() {
            return Err(Error::Checkpoint(format!(
                "{} tensors missing or misshapen under {prefix:?}, first {first:?}",
                missing.len()
            )));
        }
        Ok(())
    }

    /// Adam moments keyed by parameter name; the step count goes in `meta`.
    pub fn add_adam(&mut self, prefix: &str, opt: &Adam, store: &ParamStore) {
        for (id, m, v) in opt.moments() {
            let name = store.name(id);
            self.push(format!("{prefix}/m/{name}"), m.clone());
            self.push(format!("{prefix}/v/{name}"), v.clone());
        }
    }

    pub fn load_adam(&self, prefix: &str, opt: &mut Adam, store: &ParamStore, step: u64) -> Result<()> {
        let mut ms: Vec<Tensor> = Vec::new();
        let mut vs: Vec<Tensor> = Vec::new();
        for (id, _, _) in opt.moments() {
            let name = store.name(id);
            ms.push(self.get(&format!("{prefix}/m/{name}"))?.clone());
            vs.push(self.get(&format!("{prefix}/v/{name}"))?.clone());
        }
        opt.restore(step, ms, vs);
        Ok(())
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(n, a)| (n.clone(), a.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.iter().map(|(_, a)| a.len() * 8).sum();
        let mut buf = Vec::with_capacity(16 + json.len() + payload + HASH_LEN);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, a) in &self.arrays {
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let hash = Sha256::digest(&buf);
        buf.extend_from_slice(&hash);
        Ok(buf)
    }

    /// Atomic write (temp file then rename); returns the hex content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode()?;
        let hash = hex::encode(&bytes[bytes.len() - HASH_LEN..]);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(hash)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 + HASH_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint archive"));
        }
        let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != hash {
            return Err(corrupt(path, "content hash mismatch (truncated or corrupted file)"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| corrupt(path, "header overruns file"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(path, &e.to_string()))?;
        let mut pos = 16 + hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for (name, shape) in header.arrays {
            let n: usize = shape.iter().product();
            let raw = body.get(pos..pos + n * 8).ok_or_else(|| corrupt(path, "payload overruns file"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()));
            pos += n * 8;
        }
        if pos != body.len() {
            return Err(corrupt(path, "trailing bytes after payload"));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CodecMeta {
    kind: String,
    codec: CodecConfig,
    mel: crate::audio::MelParams,
}

pub fn save_codec(codec: &CodecLevel, path: &Path) -> Result<String> {
    let meta = CodecMeta {
        kind: "codec".into(),
        codec: codec.cfg,
        mel: codec.mel,
    };
    let mut a = Archive::new(serde_json::to_value(meta)?);
    a.add_store("encoder", &codec.encoder_params);
    a.add_store("decoder", &codec.decoder_params);
    a.push("codebook", codec.codebook.entries.clone().into_dyn());
    a.save(path)
}

pub fn load_codec(path: &Path) -> Result<CodecLevel> {
    let a = Archive::load(path)?;
    let meta: CodecMeta = serde_json::from_value(a.meta.clone()).map_err(|e| corrupt(path, &e.to_string()))?;
    if meta.kind != "codec" {
        return Err(corrupt(path, &format!("expected a codec archive, found {:?}", meta.kind)));
    }
    let mut codec = CodecLevel::new(meta.codec);
    codec.mel = meta.mel;
    a.load_store("encoder", &mut codec.encoder_params)?;
    a.load_store("decoder", &mut codec.decoder_params)?;
    let entries = a
        .get("codebook")?
        .clone()
        .into_dimensionality()
        .map_err(|_| corrupt(path, "codebook is not a matrix"))?;
    codec.codebook = Codebook::new(entries)?;
    Ok(codec)
}
