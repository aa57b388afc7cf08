//! Binary checkpoint container: magic, `u64` LE header length, JSON header,
//! then every tensor as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dpsm::SoftPromptNetParams;
use crate::model::{init_model, ModelConfig, ModelParams, Parameters, TokenId, Vocab};

use super::{CheckpointMeta, PipelineError, TrainConfig};

pub const CHECKPOINT_VERSION: &str = "gcsd-ckpt-v1";
const MAGIC: &[u8; 8] = b"GCSDCKPT";

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub net: SoftPromptNetParams,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    meta: CheckpointMeta,
    config: TrainConfig,
    model: ModelConfig,
    net_dims: [usize; 4],
    vocab: BTreeMap<String, TokenId>,
    tensors: Vec<TensorEntry>,
}

fn entries(p: &impl Parameters) -> Vec<TensorEntry> {
    p.params()
        .into_iter()
        .map(|r| TensorEntry {
            name: r.name,
            rows: r.tensor.rows(),
            cols: r.tensor.cols(),
        })
        .collect()
}

fn corrupt(msg: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), PipelineError> {
        let net = &self.net;
        let mut tensors = entries(&self.params);
        tensors.extend(entries(net));
        let header = Header {
            version: CHECKPOINT_VERSION.into(),
            meta: self.meta.clone(),
            config: self.config.clone(),
            model: self.params.config.clone(),
            net_dims: [net.input_dim(), net.w1.cols(), net.w2.cols(), net.prompt_dim()],
            vocab: self.vocab.to_map(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let all = self.params.params().into_iter().chain(net.params());
        for p in all {
            let mut buf = Vec::with_capacity(p.tensor.len() * 4);
            for &v in p.tensor.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, PipelineError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("file too short"))?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {:?}", header.version)));
        }
        let vocab = Vocab::from_map(&header.vocab).map_err(|e| corrupt(e.to_string()))?;
        if vocab.len() != header.model.vocab_size {
            return Err(corrupt("vocabulary size disagrees with the model config"));
        }
        let mut params = init_model(&header.model)?;
        let [d_in, h1, h2, d_p] = header.net_dims;
        let mut net = SoftPromptNetParams::zeros(d_in, h1, h2, d_p);

        let mut expected = entries(&params);
        expected.extend(entries(&net));
        if expected.len() != header.tensors.len()
            || expected
                .iter()
                .zip(&header.tensors)
                .any(|(a, b)| a.name != b.name || a.rows != b.rows || a.cols != b.cols)
        {
            return Err(corrupt("tensor table does not match the declared configuration"));
        }
        let mut targets = params.params_mut();
        targets.extend(net.params_mut());
        for t in targets {
            let mut buf = vec![0u8; t.len() * 4];
            r.read_exact(&mut buf)
                .map_err(|_| corrupt("truncated tensor data"))?;
            for (v, b) in t.data_mut().iter_mut().zip(buf.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
        }
        Ok(Self {
            meta: header.meta,
            config: header.config,
            vocab,
            params,
            net,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), PipelineError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    ckpt.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    let f = std::fs::File::open(path)
        .map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    Checkpoint::read_from(std::io::BufReader::new(f))
}
