//! Single-file checkpoint archive plus a JSON sidecar.
//!
//! Layout: magic `UDASEGCK`, `u32` version, `u64` header length, a JSON
//! header (config, iteration, RNG state, per-network parameter names and
//! shapes, optimizer step counts), then little-endian `f32` payload: every
//! network's parameters in header order, followed by every network's first
//! and second Adam moments.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelParams, Net, RunConfig, TrainState};
use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"UDASEGCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetEntry {
    network: String,
    params: Vec<TensorEntry>,
    adam_steps: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    iteration: u64,
    rng: ChaCha8Rng,
    networks: Vec<NetEntry>,
    payload_sha256: String,
}

/// Sidecar metadata written next to each archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub iteration: u64,
    pub seed: u64,
    pub ablation: String,
    pub archive: String,
    pub archive_sha256: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, state: &TrainState) -> Result<CheckpointMeta> {
    let mut payload: Vec<u8> = Vec::new();
    let push = |buf: &mut Vec<u8>, xs: &[f32]| buf.extend(xs.iter().flat_map(|v| v.to_le_bytes()));
    for net in Net::ALL {
        for t in state.params.get(net).tensors() {
            push(&mut payload, t.data());
        }
    }
    for net in Net::ALL {
        let (m, v) = state.adam(net).moments();
        for x in m.iter().chain(v) {
            push(&mut payload, x);
        }
    }
    let networks = Net::ALL
        .iter()
        .map(|&net| {
            let store = state.params.get(net);
            NetEntry {
                network: net.name().into(),
                params: store
                    .names()
                    .iter()
                    .zip(store.tensors())
                    .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape() })
                    .collect(),
                adam_steps: state.adam(net).steps(),
            }
        })
        .collect();
    let header = Header {
        config: config.clone(),
        iteration: state.iteration,
        rng: state.rng.clone(),
        networks,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + hjson.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&payload);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, &out)?;
    let meta = CheckpointMeta {
        config: config.clone(),
        iteration: state.iteration,
        seed: config.seed,
        ablation: config.ablation.name().into(),
        archive: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        archive_sha256: hex::encode(Sha256::digest(&out)),
    };
    fs::write(sidecar(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint(format!("{}: archive truncated", self.path.display())));
        }
        self.at += n;
        Ok(&self.bytes[self.at - n..self.at])
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

/// Reads an archive back into its run configuration and training state.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, TrainState)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let bad = |reason: &str| Error::Checkpoint(format!("{}: {reason}", path.display()));
    let mut r = Reader { path, bytes: &bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported archive version {version}")));
    }
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| bad(&format!("header: {e}")))?;
    let payload_start = r.at;
    if hex::encode(Sha256::digest(&bytes[payload_start..])) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    if header.networks.len() != 4 {
        return Err(bad("expected four networks"));
    }
    let mut stores = Vec::with_capacity(4);
    for (net, entry) in Net::ALL.iter().zip(&header.networks) {
        if entry.network != net.name() {
            return Err(bad(&format!("network {} where {} was expected", entry.network, net.name())));
        }
        let mut tensors = Vec::with_capacity(entry.params.len());
        for p in &entry.params {
            let n = p.shape.iter().product();
            tensors.push(Tensor::from_vec(p.shape, r.floats(n)?)?);
        }
        let names = entry.params.iter().map(|p| p.name.clone()).collect();
        stores.push(ParamStore::from_parts(names, tensors)?);
    }
    let mut optim = Vec::with_capacity(4);
    for (store, entry) in stores.iter().zip(&header.networks) {
        let read = |r: &mut Reader| -> Result<Vec<Vec<f32>>> {
            store.tensors().iter().map(|t| r.floats(t.numel())).collect()
        };
        let m = read(&mut r)?;
        let v = read(&mut r)?;
        optim.push(Adam::from_parts(entry.adam_steps, m, v));
    }
    if r.at != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    let mut s = stores.into_iter();
    let params = ModelParams {
        extractor: s.next().unwrap(),
        classifier: s.next().unwrap(),
        generator: s.next().unwrap(),
        discriminator: s.next().unwrap(),
    };
    let optim: [Adam<f32>; 4] = optim.try_into().map_err(|_| bad("optimizer count"))?;
    Ok((header.config, TrainState { iteration: header.iteration, params, optim, rng: header.rng }))
}
