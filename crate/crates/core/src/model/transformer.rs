//! Pre-norm decoder forward pass with an optional virtual soft-prompt token.

use crate::autograd::{log_softmax, Tape, Var};
use crate::tensor::Tensor;

use super::params::{BoundModel, ModelParams};
use super::vocab::TokenId;
use super::ModelError;

/// Per layer, per head: causal attention weights (query × key).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionMap {
    pub fn final_layer(&self) -> &[Tensor] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Tape handles produced by [`forward_on_tape`].
pub struct ForwardVars {
    /// `positions × vocab_size`.
    pub logits: Var,
    /// `attn[layer][head]`, each `positions × positions`.
    pub attn: Vec<Vec<Var>>,
    /// 1 when a soft prompt occupies position 0.
    pub offset: usize,
}

impl ForwardVars {
    /// Row of the logits that predicts `ids[k]` (`k ≥ 1`, or `k = 0` with a
    /// soft prompt).
    pub fn predicting_row(&self, k: usize) -> usize {
        k + self.offset - 1
    }
}

/// Records the forward pass on `tape`. `soft_prompt`, when given, is a
/// `1 × d_model` node placed at position 0 ahead of the token embeddings.
pub fn forward_on_tape<'a>(
    tape: &mut Tape<'a>,
    params: &ModelParams,
    bound: &BoundModel,
    ids: &[TokenId],
    soft_prompt: Option<Var>,
) -> Result<ForwardVars, ModelError> {
    let cfg = &params.config;
    let offset = usize::from(soft_prompt.is_some());
    let positions = ids.len() + offset;
    if positions > cfg.max_seq {
        return Err(ModelError::SequenceTooLong {
            len: positions,
            max: cfg.max_seq,
        });
    }
    if positions == 0 {
        return Err(ModelError::EmptyInput);
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange(bad));
    }
    if let Some(p) = soft_prompt {
        let shape = tape.value(p).shape();
        if shape != (1, cfg.d_model) {
            return Err(ModelError::PromptShape {
                expected: cfg.d_model,
                got: shape.0 * shape.1,
            });
        }
    }

    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let mut x = if rows.is_empty() {
        soft_prompt.expect("positions > 0")
    } else {
        let tok = tape.gather_rows(bound.tok_emb, &rows);
        match soft_prompt {
            Some(p) => tape.concat_rows(p, tok),
            None => tok,
        }
    };
    let pos_rows: Vec<usize> = (0..positions).collect();
    let pos = tape.gather_rows(bound.pos_emb, &pos_rows);
    x = tape.add(x, pos);

    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut attn = Vec::with_capacity(cfg.n_layers);
    for layer in &bound.layers {
        let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias);
        let q = tape.matmul(h, layer.w_q);
        let k = tape.matmul(h, layer.w_k);
        let v = tape.matmul(h, layer.w_v);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut maps = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, head * hd, hd);
            let kh = tape.slice_cols(k, head * hd, hd);
            let vh = tape.slice_cols(v, head * hd, hd);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let p = tape.causal_softmax(scores);
            maps.push(p);
            heads.push(tape.matmul(p, vh));
        }
        attn.push(maps);
        let merged = tape.concat_cols(&heads);
        let o = tape.matmul(merged, layer.w_o);
        let o = tape.add_row(o, layer.b_o);
        x = tape.add(x, o);

        let h2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias);
        let f = tape.matmul(h2, layer.w_ff1);
        let f = tape.add_row(f, layer.b_ff1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, layer.w_ff2);
        let f = tape.add_row(f, layer.b_ff2);
        x = tape.add(x, f);
    }
    let xf = tape.layer_norm(x, bound.lnf_gain, bound.lnf_bias);
    let logits = tape.matmul_bt(xf, bound.tok_emb);
    Ok(ForwardVars {
        logits,
        attn,
        offset,
    })
}

/// Logits for every position (`len(ids) + [prompt ? 1 : 0]` rows) and the
/// full attention maps.
pub fn forward(
    params: &ModelParams,
    ids: &[TokenId],
    soft_prompt: Option<&[f64]>,
) -> Result<(Tensor, AttentionMap), ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind_model(&mut tape);
    let prompt = soft_prompt.map(|p| tape.constant(Tensor::row_vector(p.to_vec())));
    let fv = forward_on_tape(&mut tape, params, &bound, ids, prompt)?;
    let attn = AttentionMap {
        layers: fv
            .attn
            .iter()
            .map(|heads| heads.iter().map(|h| tape.value(*h).clone()).collect())
            .collect(),
    };
    Ok((tape.value(fv.logits).clone(), attn))
}

/// `log p(ids[t+1] | ids[..=t])` for every `t`; `len(ids) − 1` values.
pub fn log_probs(
    params: &ModelParams,
    ids: &[TokenId],
    soft_prompt: Option<&[f64]>,
) -> Result<Vec<f64>, ModelError> {
    if ids.len() < 2 {
        return Err(ModelError::EmptyInput);
    }
    let (logits, _) = forward(params, ids, soft_prompt)?;
    let offset = usize::from(soft_prompt.is_some());
    Ok((1..ids.len())
        .map(|k| log_softmax(logits.row(k + offset - 1))[ids[k] as usize])
        .collect())
}

/// Log-probabilities of `continuation` given `context`, one per
/// continuation token.
pub fn continuation_log_probs(
    params: &ModelParams,
    context: &[TokenId],
    continuation: &[TokenId],
    soft_prompt: Option<&[f64]>,
) -> Result<Vec<f64>, ModelError> {
    if continuation.is_empty() {
        return Ok(Vec::new());
    }
    if context.is_empty() && soft_prompt.is_none() {
        return Err(ModelError::EmptyInput);
    }
    let ids: Vec<TokenId> = context.iter().chain(continuation).copied().collect();
    let (logits, _) = forward(params, &ids, soft_prompt)?;
    let offset = usize::from(soft_prompt.is_some());
    Ok((context.len()..ids.len())
        .map(|k| log_softmax(logits.row(k + offset - 1))[ids[k] as usize])
        .collect())
}
