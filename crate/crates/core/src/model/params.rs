use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

use super::ModelError;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_seq: 512,
            vocab_size: 0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq,
            self.vocab_size,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 4 * d * d + d + 4 * d + d * f + f + f * d + d;
        self.vocab_size * d + self.max_seq * d + self.n_layers * per_layer + 2 * d
    }
}

/// One named parameter tensor and whether weight decay applies to it.
pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub decay: bool,
}

/// Uniform access to a parameter set, in a fixed order shared by
/// [`Parameters::params`], [`Parameters::params_mut`] and gradient vectors.
pub trait Parameters {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    fn decay_mask(&self) -> Vec<bool> {
        self.params().iter().map(|p| p.decay).collect()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.tensor.is_finite())
    }

    /// Registers every tensor on `tape` as a borrowed leaf.
    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.tensor)).collect()
    }

    /// SHA-256 over the raw bits of every tensor.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    fn snap_to_f32(&mut self) {
        for t in self.params_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

const LAYER_TENSORS: usize = 13;

impl LayerParams {
    fn list(&self) -> [(&'static str, &Tensor, bool); LAYER_TENSORS] {
        [
            ("ln1_gain", &self.ln1_gain, false),
            ("ln1_bias", &self.ln1_bias, false),
            ("w_q", &self.w_q, true),
            ("w_k", &self.w_k, true),
            ("w_v", &self.w_v, true),
            ("w_o", &self.w_o, true),
            ("b_o", &self.b_o, false),
            ("ln2_gain", &self.ln2_gain, false),
            ("ln2_bias", &self.ln2_bias, false),
            ("w_ff1", &self.w_ff1, true),
            ("b_ff1", &self.b_ff1, false),
            ("w_ff2", &self.w_ff2, true),
            ("b_ff2", &self.b_ff2, false),
        ]
    }

    fn list_mut(&mut self) -> [&mut Tensor; LAYER_TENSORS] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

/// Decoder-only transformer weights. The token embedding doubles as the
/// output projection; there is no separate unembedding matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
}

impl ModelParams {
    pub fn token_embedding(&self) -> &Tensor {
        &self.tok_emb
    }

    /// The output projection, shared storage with [`Self::token_embedding`].
    pub fn output_projection(&self) -> &Tensor {
        &self.tok_emb
    }

    pub fn bind_model<'a>(&'a self, tape: &mut Tape<'a>) -> BoundModel {
        BoundModel::from_vars(self.bind(tape), self.config.n_layers)
    }
}

impl Parameters for ModelParams {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            ParamRef {
                name: "tok_emb".into(),
                tensor: &self.tok_emb,
                decay: true,
            },
            ParamRef {
                name: "pos_emb".into(),
                tensor: &self.pos_emb,
                decay: true,
            },
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.list().into_iter().map(|(n, t, decay)| ParamRef {
                name: format!("layers.{l}.{n}"),
                tensor: t,
                decay,
            }));
        }
        out.push(ParamRef {
            name: "lnf_gain".into(),
            tensor: &self.lnf_gain,
            decay: false,
        });
        out.push(ParamRef {
            name: "lnf_bias".into(),
            tensor: &self.lnf_bias,
            decay: false,
        });
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.list_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }
}

pub struct BoundLayer {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
}

/// Tape handles for every [`ModelParams`] tensor.
pub struct BoundModel {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    /// All handles, in [`Parameters::params`] order.
    pub all: Vec<Var>,
}

impl BoundModel {
    fn from_vars(all: Vec<Var>, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let v = &all[2 + l * LAYER_TENSORS..2 + (l + 1) * LAYER_TENSORS];
                BoundLayer {
                    ln1_gain: v[0],
                    ln1_bias: v[1],
                    w_q: v[2],
                    w_k: v[3],
                    w_v: v[4],
                    w_o: v[5],
                    b_o: v[6],
                    ln2_gain: v[7],
                    ln2_bias: v[8],
                    w_ff1: v[9],
                    b_ff1: v[10],
                    w_ff2: v[11],
                    b_ff2: v[12],
                }
            })
            .collect();
        let n = all.len();
        Self {
            tok_emb: all[0],
            pos_emb: all[1],
            layers,
            lnf_gain: all[n - 2],
            lnf_bias: all[n - 1],
            all,
        }
    }
}

/// Seeded initialization: weights `N(0, 0.02²)`, biases 0, norm gains 1.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let (d, f) = (config.d_model, config.d_ff);
    let tok_emb = Tensor::randn(config.vocab_size, d, INIT_STD, &mut rng);
    let pos_emb = Tensor::randn(config.max_seq, d, INIT_STD, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gain: Tensor::full(1, d, 1.0),
            ln1_bias: Tensor::zeros(1, d),
            w_q: Tensor::randn(d, d, INIT_STD, &mut rng),
            w_k: Tensor::randn(d, d, INIT_STD, &mut rng),
            w_v: Tensor::randn(d, d, INIT_STD, &mut rng),
            w_o: Tensor::randn(d, d, INIT_STD, &mut rng),
            b_o: Tensor::zeros(1, d),
            ln2_gain: Tensor::full(1, d, 1.0),
            ln2_bias: Tensor::zeros(1, d),
            w_ff1: Tensor::randn(d, f, INIT_STD, &mut rng),
            b_ff1: Tensor::zeros(1, f),
            w_ff2: Tensor::randn(f, d, INIT_STD, &mut rng),
            b_ff2: Tensor::zeros(1, d),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        lnf_gain: Tensor::full(1, d, 1.0),
        lnf_bias: Tensor::zeros(1, d),
    })
}
