//! Binary checkpoints: magic, version, a JSON header, then a little-endian
//! `f64` blob holding every tensor listed in the header.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vlprompt_core::features::Frg;
use vlprompt_core::model::{Encoders, PromptModel};
use vlprompt_core::optim::SgdState;
use vlprompt_core::params::Parameterized;
use vlprompt_core::tensor::Tensor;
use vlprompt_core::trainer::{EpochMetrics, TrainState};

use crate::config::RunConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VLPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config_hash: String,
    pub config: RunConfig,
    /// Index into `train.seeds`.
    pub seed_index: usize,
    pub run_seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub stats_ready: bool,
    pub history: Vec<EpochMetrics>,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

fn named_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let m = &state.model;
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for (n, t) in m.rho.param_names().into_iter().zip(m.rho.params()) {
        out.push((n, t.clone()));
    }
    for (n, t) in m.pv.param_names().into_iter().zip(m.pv.params()) {
        out.push((n, t.clone()));
    }
    let (mean, var, _) = m.pv.running_stats();
    out.push(("pv.running_mean".into(), Tensor::row_vector(mean.to_vec())));
    out.push(("pv.running_var".into(), Tensor::row_vector(var.to_vec())));
    out.push(("frg.matrix".into(), m.frg.matrix().clone()));
    for (i, b) in state.sgd.buffers.iter().enumerate() {
        out.push((format!("sgd.buffer{i}"), b.clone()));
    }
    out
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, seed_index: usize, state: &TrainState) -> Self {
        let named = named_tensors(state);
        let mut entries = Vec::with_capacity(named.len());
        let mut offset = 0;
        for (name, t) in &named {
            entries.push(TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                offset,
            });
            offset += t.len();
        }
        let tensors: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
        let header = Header {
            config_hash: cfg.hash(),
            config: cfg.clone(),
            seed_index,
            run_seed: state.seed,
            epoch: state.epoch,
            step: state.step,
            stats_ready: state.model.pv.running_stats().2,
            history: state.history.clone(),
            tensors: entries,
            blob_sha256: hex::encode(Sha256::digest(blob(&tensors))),
        };
        Self { header, tensors }
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut bytes = Vec::with_capacity(24 + header.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&blob(&self.tensors));
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(Error::io(&tmp))?;
            f.write_all(&bytes).map_err(Error::io(&tmp))?;
            f.sync_all().map_err(Error::io(&tmp))?;
        }
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        let bad = |msg: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(&format!("header: {e}")))?;
        let raw = &bytes[hend..];
        if hex::encode(Sha256::digest(raw)) != header.blob_sha256 {
            return Err(bad("tensor blob checksum mismatch"));
        }
        if raw.len() % 8 != 0 {
            return Err(bad("tensor blob length is not a multiple of 8"));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let end = e.offset + e.rows * e.cols;
            if end > values.len() {
                return Err(bad(&format!("tensor {} extends past the blob", e.name)));
            }
            tensors.push(Tensor::from_vec(e.rows, e.cols, values[e.offset..end].to_vec())?);
        }
        Ok(Self { header, tensors })
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Rebuilds the training state on top of `enc`, shape-checking every tensor.
    pub fn restore(&self, enc: Encoders<'_>) -> Result<TrainState> {
        let h = &self.header;
        let mut model = PromptModel::new(enc, &h.config.model(), h.run_seed)?;
        let missing = |n: &str| Error::Checkpoint {
            path: Default::default(),
            msg: format!("tensor {n} missing"),
        };
        let assign = |dst: &mut Tensor, name: &str| -> Result<()> {
            let src = self.get(name).ok_or_else(|| missing(name))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint {
                    path: Default::default(),
                    msg: format!("tensor {name} is {:?}, model expects {:?}", src.shape(), dst.shape()),
                });
            }
            *dst = src.clone();
            Ok(())
        };
        let names = model.rho.param_names();
        for (t, n) in model.rho.params_mut().into_iter().zip(&names) {
            assign(t, n)?;
        }
        let names = model.pv.param_names();
        for (t, n) in model.pv.params_mut().into_iter().zip(&names) {
            assign(t, n)?;
        }
        let mut frg = model.frg.matrix().clone();
        assign(&mut frg, "frg.matrix")?;
        model.frg = Frg::from_matrix(frg);
        let d = model.pv.d_joint();
        let mut mean = Tensor::zeros(1, d);
        let mut var = Tensor::zeros(1, d);
        assign(&mut mean, "pv.running_mean")?;
        assign(&mut var, "pv.running_var")?;
        model.pv.set_running_stats(mean.into_vec(), var.into_vec(), h.stats_ready);
        let mut buffers = Vec::new();
        while let Some(b) = self.get(&format!("sgd.buffer{}", buffers.len())) {
            buffers.push(b.clone());
        }
        Ok(TrainState {
            model,
            sgd: SgdState { buffers },
            seed: h.run_seed,
            epoch: h.epoch,
            step: h.step,
            history: h.history.clone(),
        })
    }
}

fn blob(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensors.iter().map(|t| t.len() * 8).sum());
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
