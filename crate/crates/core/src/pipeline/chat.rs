//! Line-oriented chat loop for inspecting multi-party behaviour.

use std::io::{BufRead, Write};

use crate::corpus::{clean_utterance, Origin, Session, SpeakerRole, Utterance};
use crate::dialogue::ModelResponder;
use crate::model::{derive_seed, SamplingConfig};

use super::{Checkpoint, PipelineError};

const USAGE: &str = "usage: /as <participant> <text> | /seed <n> | /quit";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChatCommand {
    Say { human: u32, text: String },
    Seed(u64),
    Quit,
}

impl ChatCommand {
    pub fn parse(line: &str) -> Option<Self> {
        let line = line.trim();
        let (cmd, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        match cmd {
            "/quit" if rest.is_empty() => Some(Self::Quit),
            "/seed" => rest.parse().ok().map(Self::Seed),
            "/as" => {
                let (who, text) = rest.split_once(char::is_whitespace)?;
                let human = who.parse().ok().filter(|&h| h >= 1)?;
                let text = text.trim();
                (!text.is_empty()).then(|| Self::Say {
                    human,
                    text: text.to_string(),
                })
            }
            _ => None,
        }
    }
}

/// Live transcript plus the sampling seed.
pub struct ChatSession {
    pub session: Session,
    pub seed: u64,
}

impl ChatSession {
    pub fn new(seed: u64) -> Self {
        Self {
            session: Session {
                id: "chat".into(),
                origin: Origin::Real,
                utterances: Vec::new(),
            },
            seed,
        }
    }

    fn push(&mut self, speaker: SpeakerRole, text: String) {
        let turn = self.session.utterances.len() as u32 + 1;
        self.session.utterances.push(Utterance { turn, speaker, text });
    }

    /// Appends a human turn, then samples and appends the assistant reply.
    pub fn step(&mut self, ckpt: &Checkpoint, human: u32, text: &str) -> Result<String, PipelineError> {
        let max = ckpt.vocab.max_humans();
        if human > max {
            return Err(PipelineError::Data(format!("participant {human} exceeds max_humans {max}")));
        }
        let text = clean_utterance(text);
        if text.is_empty() {
            return Err(PipelineError::Data("utterance is empty after cleaning".into()));
        }
        self.push(SpeakerRole::Human(human), text);
        self.push(SpeakerRole::Assistant, String::new());
        let index = self.session.utterances.len() - 1;
        let responder = ModelResponder {
            params: &ckpt.params,
            net: &ckpt.net,
            vocab: &ckpt.vocab,
            dpsm: &ckpt.config.dpsm,
            sampling: SamplingConfig {
                max_new: ckpt.config.eval.sampling.max_new,
                ..SamplingConfig::default()
            },
        };
        let ids = responder.respond_ids(&self.session, index, derive_seed(self.seed, &[index as u64]))?;
        let reply = clean_utterance(ckpt.vocab.decode(&ckpt.vocab.strip_special(&ids)).trim());
        self.session.utterances[index].text = reply.clone();
        Ok(reply)
    }
}

/// Reads commands from `input` until `/quit` or end of input, printing each
/// reply to `output`. On `/quit` the transcript is appended to `transcript`
/// as one JSONL line when a path is given.
pub fn chat_repl<R: BufRead, W: Write>(
    ckpt: &Checkpoint,
    input: R,
    mut output: W,
    seed: u64,
    transcript: Option<&std::path::Path>,
) -> Result<Session, PipelineError> {
    let mut chat = ChatSession::new(seed);
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match ChatCommand::parse(&line) {
            Some(ChatCommand::Quit) => break,
            Some(ChatCommand::Seed(s)) => {
                chat.seed = s;
                writeln!(output, "seed set to {s}")?;
            }
            Some(ChatCommand::Say { human, text }) => match chat.step(ckpt, human, &text) {
                Ok(reply) => writeln!(output, "{} {reply}", SpeakerRole::Assistant.token())?,
                Err(PipelineError::Data(msg)) => writeln!(output, "{msg}\n{USAGE}")?,
                Err(e) => return Err(e),
            },
            None => writeln!(output, "{USAGE}")?,
        }
    }
    if let Some(path) = transcript {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(&chat.session).map_err(std::io::Error::other)?)?;
    }
    Ok(chat.session)
}
