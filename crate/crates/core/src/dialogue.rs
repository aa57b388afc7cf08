//! Turning sessions into model inputs: assistant-turn enumeration, context
//! and response encoding under the position budget, addressee selection,
//! soft-prompt conditioning, and a model-backed response generator.

use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::corpus::{serialize_utterance, serialize_utterances, Session, SpeakerRole};
use crate::dpsm::{
    featurize, soft_prompt_forward, update_state, DpsmConfig, DpsmError, ParticipantState,
    SoftPromptNetParams,
};
use crate::metrics::ResponseGenerator;
use crate::model::{sample_response, ModelError, ModelParams, SamplingConfig, TokenId, Vocab};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum DialogueError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dpsm(#[from] DpsmError),
    #[error("position budget {0} leaves no room for context")]
    NoRoom(usize),
}

/// An assistant utterance that has at least one utterance before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DialogueTurn {
    pub session: usize,
    pub index: usize,
}

pub fn assistant_turns(corpus: &[Session]) -> Vec<DialogueTurn> {
    corpus
        .iter()
        .enumerate()
        .flat_map(|(s, sess)| {
            sess.utterances
                .iter()
                .enumerate()
                .filter(|(i, u)| *i > 0 && u.speaker == SpeakerRole::Assistant)
                .map(move |(index, _)| DialogueTurn { session: s, index })
        })
        .collect()
}

/// The most recent human speaker before `index`.
pub fn addressee(session: &Session, index: usize) -> Option<u32> {
    session.utterances[..index]
        .iter()
        .rev()
        .find_map(|u| u.speaker.human_index())
}

/// Addressee features split into the fixed head (one-hot speaker,
/// cognitive score, engagement) and the token ids whose embedding mean forms
/// the history vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantInputs {
    pub human: u32,
    pub head: Vec<f64>,
    pub history_ids: Vec<TokenId>,
}

impl ParticipantInputs {
    /// Full feature vector for the given embedding table.
    pub fn features(&self, token_embedding: &Tensor) -> Vec<f64> {
        let d = token_embedding.cols();
        let mut hist = vec![0.0; d];
        for &id in &self.history_ids {
            for (h, e) in hist.iter_mut().zip(token_embedding.row(id as usize)) {
                *h += e;
            }
        }
        if !self.history_ids.is_empty() {
            let n = self.history_ids.len() as f64;
            hist.iter_mut().for_each(|h| *h /= n);
        }
        self.head.iter().copied().chain(hist).collect()
    }

    /// Records the feature vector on `tape` as a `1 × D_in` node, with the
    /// history mean differentiable in `token_embedding`.
    pub fn features_on_tape(&self, tape: &mut Tape<'_>, token_embedding: Var) -> Var {
        let head = tape.constant(Tensor::row_vector(self.head.clone()));
        let d = tape.value(token_embedding).cols();
        let hist = if self.history_ids.is_empty() {
            tape.constant(Tensor::zeros(1, d))
        } else {
            let rows: Vec<usize> = self.history_ids.iter().map(|&i| i as usize).collect();
            let g = tape.gather_rows(token_embedding, &rows);
            let s = tape.sum_rows(g);
            tape.scale(s, 1.0 / rows.len() as f64)
        };
        tape.concat_cols(&[head, hist])
    }
}

/// Addressee inputs as of the utterance just before `index`.
pub fn participant_inputs(
    session: &Session,
    index: usize,
    vocab: &Vocab,
    cfg: &DpsmConfig,
) -> Result<Option<ParticipantInputs>, DpsmError> {
    let Some(h) = addressee(session, index) else {
        return Ok(None);
    };
    let role = SpeakerRole::Human(h);
    let mut state = ParticipantState::new(role, cfg.cognitive_score(h), 0);
    let last_turn = session.utterances[index - 1].turn;
    let empty = Tensor::zeros(vocab.len(), 0);
    state = update_state(&state, session, last_turn, vocab, &empty, cfg.window);
    let head = featurize(&state, cfg.max_humans)?;
    let history_ids = session.utterances[..index]
        .iter()
        .filter(|u| u.speaker == role)
        .flat_map(|u| vocab.encode(&u.text))
        .collect();
    Ok(Some(ParticipantInputs {
        human: h,
        head,
        history_ids,
    }))
}

/// Features of the addressee as of the utterance just before `index`.
pub fn participant_features(
    session: &Session,
    index: usize,
    vocab: &Vocab,
    token_embedding: &Tensor,
    cfg: &DpsmConfig,
) -> Result<Option<(u32, Vec<f64>)>, DpsmError> {
    Ok(participant_inputs(session, index, vocab, cfg)?
        .map(|p| (p.human, p.features(token_embedding))))
}

/// Soft prompt for the reply at `index`, with the addressee it targets.
pub fn soft_prompt_for(
    params: &ModelParams,
    net: &SoftPromptNetParams,
    vocab: &Vocab,
    cfg: &DpsmConfig,
    session: &Session,
    index: usize,
) -> Result<Option<(u32, Vec<f64>)>, DpsmError> {
    match participant_features(session, index, vocab, params.token_embedding(), cfg)? {
        Some((h, x)) => Ok(Some((h, soft_prompt_forward(net, &x)?))),
        None => Ok(None),
    }
}

/// Keeps the last `budget` context tokens.
pub fn fit_context(context: &[TokenId], budget: usize) -> &[TokenId] {
    &context[context.len().saturating_sub(budget)..]
}

/// Teacher-forcing input for one assistant turn.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTurn {
    pub context: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl EncodedTurn {
    pub fn ids(&self) -> Vec<TokenId> {
        self.context.iter().chain(&self.response).copied().collect()
    }
}

/// `<|im_start|>` plus the prior utterances as context and
/// `[Assistant] text<|im_end|>` as response, fitted into `positions` slots.
/// The response is cut from the right only when it alone would leave no
/// room for a context token; the context is cut from the left.
pub fn encode_turn(
    vocab: &Vocab,
    session: &Session,
    index: usize,
    positions: usize,
) -> Result<EncodedTurn, DialogueError> {
    if positions < 2 {
        return Err(DialogueError::NoRoom(positions));
    }
    let context = vocab.encode(&serialize_utterances(&session.utterances[..index]));
    let mut response = vocab.encode(&serialize_utterance(&session.utterances[index]));
    response.truncate(positions - 1);
    let context = fit_context(&context, positions - response.len()).to_vec();
    Ok(EncodedTurn { context, response })
}

/// Sampling-based responder backed by the model and the soft-prompt net.
pub struct ModelResponder<'a> {
    pub params: &'a ModelParams,
    pub net: &'a SoftPromptNetParams,
    pub vocab: &'a Vocab,
    pub dpsm: &'a DpsmConfig,
    pub sampling: SamplingConfig,
}

impl ModelResponder<'_> {
    /// Generated token ids for the reply at `index`.
    pub fn respond_ids(
        &self,
        session: &Session,
        index: usize,
        seed: u64,
    ) -> Result<Vec<TokenId>, DialogueError> {
        let prompt = soft_prompt_for(self.params, self.net, self.vocab, self.dpsm, session, index)?;
        let offset = usize::from(prompt.is_some());
        let budget = self
            .params
            .config
            .max_seq
            .checked_sub(offset + self.sampling.max_new)
            .filter(|&b| b > 0)
            .ok_or(DialogueError::NoRoom(self.params.config.max_seq))?;
        let context = self
            .vocab
            .encode(&serialize_utterances(&session.utterances[..index]));
        let context = fit_context(&context, budget);
        Ok(sample_response(
            self.params,
            context,
            prompt.as_ref().map(|(_, p)| p.as_slice()),
            &self.sampling,
            self.vocab.im_end_id(),
            seed,
        )?)
    }
}

impl ResponseGenerator for ModelResponder<'_> {
    fn respond(&self, session: &Session, index: usize, seed: u64) -> Result<String, String> {
        self.respond_ids(session, index, seed)
            .map(|ids| self.vocab.decode(&ids))
            .map_err(|e| e.to_string())
    }
}
