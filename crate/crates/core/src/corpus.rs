//! Multi-party dialogue records: cleaning, construction, the chat-template
//! serialization, JSON Lines storage, statistics and train/test splitting.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";
pub const ASSISTANT_TOKEN: &str = "[Assistant]";
pub const MAX_UTTERANCE_CHARS: usize = 1000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("every utterance is empty after cleaning")]
    AllUtterancesEmpty,
    #[error("session has no assistant utterance")]
    NoAssistant,
    #[error("session has no human utterance")]
    NoHuman,
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),
    #[error("corpus of {0} sessions is too small to split")]
    CorpusTooSmall(usize),
    #[error("malformed serialized session: {0}")]
    Malformed(String),
    #[error("invalid session: {0}")]
    Invalid(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Who produced an utterance. Human indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpeakerRole {
    Assistant,
    Human(u32),
}

impl SpeakerRole {
    /// The structural token, `[Assistant]` or `[Human_i]`.
    pub fn token(&self) -> String {
        match self {
            SpeakerRole::Assistant => ASSISTANT_TOKEN.to_string(),
            SpeakerRole::Human(i) => format!("[Human_{i}]"),
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        if token == ASSISTANT_TOKEN {
            return Some(SpeakerRole::Assistant);
        }
        let idx = token.strip_prefix("[Human_")?.strip_suffix(']')?;
        parse_index(idx).map(SpeakerRole::Human)
    }

    /// Label used in corpus files: `assistant` or `human_i`.
    pub fn label(&self) -> String {
        match self {
            SpeakerRole::Assistant => "assistant".to_string(),
            SpeakerRole::Human(i) => format!("human_{i}"),
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        if label == "assistant" {
            return Some(SpeakerRole::Assistant);
        }
        label
            .strip_prefix("human_")
            .and_then(parse_index)
            .map(SpeakerRole::Human)
    }

    pub fn is_human(&self) -> bool {
        matches!(self, SpeakerRole::Human(_))
    }

    pub fn human_index(&self) -> Option<u32> {
        match self {
            SpeakerRole::Human(i) => Some(*i),
            SpeakerRole::Assistant => None,
        }
    }
}

fn parse_index(s: &str) -> Option<u32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || s.starts_with('0') {
        return None;
    }
    s.parse().ok().filter(|&i| i >= 1)
}

impl fmt::Display for SpeakerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

impl Serialize for SpeakerRole {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for SpeakerRole {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SpeakerRole::from_label(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown speaker label {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub turn: u32,
    pub speaker: SpeakerRole,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Simulated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub origin: Origin,
    pub utterances: Vec<Utterance>,
}

impl Session {
    /// Checks the record invariants: contiguous turns from 1, contiguous
    /// human indices, both roles present, clean non-empty texts.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut max_human = 0;
        let mut seen = Vec::new();
        let (mut has_a, mut has_h) = (false, false);
        for (i, u) in self.utterances.iter().enumerate() {
            if u.turn as usize != i + 1 {
                return Err(CorpusError::Invalid(format!(
                    "turn {} at position {}",
                    u.turn,
                    i + 1
                )));
            }
            if u.text.is_empty() {
                return Err(CorpusError::Invalid(format!("turn {} is empty", u.turn)));
            }
            if clean_utterance(&u.text) != u.text {
                return Err(CorpusError::Invalid(format!("turn {} is not clean", u.turn)));
            }
            match u.speaker {
                SpeakerRole::Assistant => has_a = true,
                SpeakerRole::Human(k) => {
                    has_h = true;
                    max_human = max_human.max(k);
                    if !seen.contains(&k) {
                        seen.push(k);
                    }
                }
            }
        }
        if !has_a {
            return Err(CorpusError::NoAssistant);
        }
        if !has_h {
            return Err(CorpusError::NoHuman);
        }
        if seen.len() as u32 != max_human {
            return Err(CorpusError::Invalid(
                "human indices are not contiguous".to_string(),
            ));
        }
        Ok(())
    }

    /// Distinct human speakers (equal to the highest index for valid sessions).
    pub fn human_count(&self) -> u32 {
        self.utterances
            .iter()
            .filter_map(|u| u.speaker.human_index())
            .max()
            .unwrap_or(0)
    }
}

static MARKERS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\[S\]|\[UNK\]|\[Assistant\]|\[Human_\d+\]|<\|im_start\|>|<\|im_end\|>")
        .expect("marker pattern")
});

static PUNCT_RUN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[\p{Po}\p{Pe}\p{Pi}\p{Pf}!?.,;:！？。，；：…]{2,}").expect("punctuation pattern")
});

/// Cleans one transcribed utterance.
///
/// Deletes `[S]`/`[UNK]` markers (and any structural speaker or chat tokens),
/// collapses each run of two or more punctuation symbols to its final symbol,
/// then keeps the first 1000 characters. The first two rules repeat until
/// neither applies, which makes the function idempotent even when a deletion
/// or collapse assembles a new marker.
pub fn clean_utterance(raw: &str) -> String {
    let mut text = raw.to_string();
    loop {
        let stripped = MARKERS.replace_all(&text, "");
        let collapsed = PUNCT_RUN.replace_all(&stripped, |caps: &regex::Captures<'_>| {
            caps[0].chars().last().map(String::from).unwrap_or_default()
        });
        if collapsed == text {
            break;
        }
        text = collapsed.into_owned();
    }
    match text.char_indices().nth(MAX_UTTERANCE_CHARS) {
        Some((byte, _)) => text[..byte].to_string(),
        None => text,
    }
}

/// Cleans and assembles a session from raw turns.
///
/// Empty utterances are dropped, turns renumbered from 1, and human indices
/// remapped to `1..=K` in order of first appearance.
pub fn build_session(
    raw_turns: &[(SpeakerRole, String)],
    id: &str,
    origin: Origin,
) -> Result<Session, CorpusError> {
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut utterances = Vec::with_capacity(raw_turns.len());
    for (speaker, raw) in raw_turns {
        let text = clean_utterance(raw);
        if text.is_empty() {
            continue;
        }
        let speaker = match speaker {
            SpeakerRole::Assistant => SpeakerRole::Assistant,
            SpeakerRole::Human(k) => {
                let next = remap.len() as u32 + 1;
                SpeakerRole::Human(*remap.entry(*k).or_insert(next))
            }
        };
        utterances.push(Utterance {
            turn: utterances.len() as u32 + 1,
            speaker,
            text,
        });
    }
    if utterances.is_empty() {
        return Err(CorpusError::AllUtterancesEmpty);
    }
    if !utterances.iter().any(|u| u.speaker == SpeakerRole::Assistant) {
        return Err(CorpusError::NoAssistant);
    }
    if !utterances.iter().any(|u| u.speaker.is_human()) {
        return Err(CorpusError::NoHuman);
    }
    Ok(Session {
        id: id.to_string(),
        origin,
        utterances,
    })
}

/// Renders one utterance as `SPEAKER text<|im_end|>`.
pub fn serialize_utterance(u: &Utterance) -> String {
    format!("{} {}{}", u.speaker.token(), u.text, IM_END)
}

/// `<|im_start|>` followed by every utterance in chat-template form.
pub fn serialize_session(s: &Session) -> String {
    serialize_utterances(&s.utterances)
}

pub fn serialize_utterances(utterances: &[Utterance]) -> String {
    let mut out = String::from(IM_START);
    for u in utterances {
        out.push_str(&serialize_utterance(u));
    }
    out
}

/// Inverse of [`serialize_session`].
pub fn parse_serialized(text: &str, id: &str, origin: Origin) -> Result<Session, CorpusError> {
    let mut rest = text
        .strip_prefix(IM_START)
        .ok_or_else(|| CorpusError::Malformed("missing <|im_start|>".to_string()))?;
    let mut utterances = Vec::new();
    while !rest.is_empty() {
        let close = rest
            .find(']')
            .ok_or_else(|| CorpusError::Malformed("missing speaker token".to_string()))?;
        let speaker = SpeakerRole::from_token(&rest[..=close])
            .ok_or_else(|| CorpusError::Malformed(format!("bad speaker {:?}", &rest[..=close])))?;
        let body = rest[close + 1..]
            .strip_prefix(' ')
            .ok_or_else(|| CorpusError::Malformed("missing space after speaker".to_string()))?;
        let end = body
            .find(IM_END)
            .ok_or_else(|| CorpusError::Malformed("missing <|im_end|>".to_string()))?;
        utterances.push(Utterance {
            turn: utterances.len() as u32 + 1,
            speaker,
            text: body[..end].to_string(),
        });
        rest = &body[end + IM_END.len()..];
    }
    let session = Session {
        id: id.to_string(),
        origin,
        utterances,
    };
    session.validate()?;
    Ok(session)
}

/// Maps a raw-record speaker string (`Therapist`, `Assistant`, `Patient_i`,
/// `Human_i`) onto a role.
pub fn map_record_speaker(s: &str) -> Option<SpeakerRole> {
    let s = s.trim();
    if s == "Therapist" || s == "Assistant" {
        return Some(SpeakerRole::Assistant);
    }
    s.strip_prefix("Patient_")
        .or_else(|| s.strip_prefix("Human_"))
        .and_then(parse_index)
        .map(SpeakerRole::Human)
}

/// Parses a simulated-dialogue record: a JSON array of
/// `{"turn": int, "speaker": str, "dialogue": str}` objects.
pub fn parse_session_record(
    record: &Value,
    id: &str,
    origin: Origin,
) -> Result<Session, CorpusError> {
    let items = record
        .as_array()
        .ok_or_else(|| CorpusError::Schema("record is not an array".to_string()))?;
    let mut turns = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| CorpusError::Schema(format!("entry {i} is not an object")))?;
        obj.get("turn")
            .and_then(Value::as_i64)
            .ok_or_else(|| CorpusError::Schema(format!("entry {i}: missing integer `turn`")))?;
        let speaker = obj
            .get("speaker")
            .and_then(Value::as_str)
            .ok_or_else(|| CorpusError::Schema(format!("entry {i}: missing string `speaker`")))?;
        let dialogue = obj
            .get("dialogue")
            .and_then(Value::as_str)
            .ok_or_else(|| CorpusError::Schema(format!("entry {i}: missing string `dialogue`")))?;
        let role = map_record_speaker(speaker)
            .ok_or_else(|| CorpusError::UnknownSpeaker(speaker.to_string()))?;
        turns.push((role, dialogue.to_string()));
    }
    if turns.is_empty() {
        return Err(CorpusError::AllUtterancesEmpty);
    }
    build_session(&turns, id, origin)
}

/// One line of a raw input file for `prepare-data`. Accepted shapes:
/// a bare record array, an object with a record array under `dialogue` or
/// `turns`, or an object with a serialized transcript under `text`. Objects
/// may carry `id` and `origin`; otherwise `raw-<line>` and `real` are used.
pub fn parse_raw_line(line: &str, line_no: usize) -> Result<Session, CorpusError> {
    let v: Value =
        serde_json::from_str(line).map_err(|source| CorpusError::Json { line: line_no, source })?;
    let default_id = format!("raw-{line_no}");
    if v.is_array() {
        return parse_session_record(&v, &default_id, Origin::Real);
    }
    let obj = v
        .as_object()
        .ok_or_else(|| CorpusError::Schema(format!("line {line_no}: expected array or object")))?;
    let id = obj.get("id").and_then(Value::as_str).unwrap_or(&default_id);
    let origin = match obj.get("origin").and_then(Value::as_str) {
        None | Some("real") => Origin::Real,
        Some("simulated") => Origin::Simulated,
        Some(other) => {
            return Err(CorpusError::Schema(format!("line {line_no}: unknown origin {other:?}")))
        }
    };
    if let Some(records) = obj.get("dialogue").or_else(|| obj.get("turns")) {
        return parse_session_record(records, id, origin);
    }
    if let Some(text) = obj.get("text").and_then(Value::as_str) {
        return parse_serialized(text, id, origin);
    }
    Err(CorpusError::Schema(format!(
        "line {line_no}: object needs `dialogue`, `turns` or `text`"
    )))
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Session>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Session =
            serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, corpus: &[Session]) -> Result<(), CorpusError> {
    for s in corpus {
        let line = serde_json::to_string(s).map_err(|source| CorpusError::Json { line: 0, source })?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn load_corpus(path: &std::path::Path) -> Result<Vec<Session>, CorpusError> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

pub fn save_corpus(path: &std::path::Path, corpus: &[Session]) -> Result<(), CorpusError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_jsonl(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

/// Utterance-level corpus statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub data_count: usize,
    pub total_tokens: usize,
    pub assistant_count: usize,
    pub assistant_tokens: usize,
    pub human_count: usize,
    pub human_tokens: usize,
    pub distinct_human_speakers: u32,
    pub total_avg_length: f64,
    pub assistant_avg_length: f64,
    pub human_avg_length: f64,
}

fn ratio(total: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

/// Computes [`StatsReport`] with `token_count` measuring each utterance text.
pub fn corpus_stats<F>(corpus: &[Session], token_count: F) -> StatsReport
where
    F: Fn(&str) -> usize,
{
    let mut r = StatsReport::default();
    for s in corpus {
        for u in &s.utterances {
            let n = token_count(&u.text);
            r.data_count += 1;
            r.total_tokens += n;
            match u.speaker {
                SpeakerRole::Assistant => {
                    r.assistant_count += 1;
                    r.assistant_tokens += n;
                }
                SpeakerRole::Human(k) => {
                    r.human_count += 1;
                    r.human_tokens += n;
                    r.distinct_human_speakers = r.distinct_human_speakers.max(k);
                }
            }
        }
    }
    r.total_avg_length = ratio(r.total_tokens, r.data_count);
    r.assistant_avg_length = ratio(r.assistant_tokens, r.assistant_count);
    r.human_avg_length = ratio(r.human_tokens, r.human_count);
    r
}

/// Seeded session-level split; the test side gets `round(fraction·n)`
/// sessions, at least one.
pub fn split_corpus(
    corpus: &[Session],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Session>, Vec<Session>), CorpusError> {
    if corpus.len() < 2 {
        return Err(CorpusError::CorpusTooSmall(corpus.len()));
    }
    assert!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test_fraction must lie in (0, 1)"
    );
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((test_fraction * corpus.len() as f64).round() as usize).clamp(1, corpus.len() - 1);
    let test = order[..n_test].iter().map(|&i| corpus[i].clone()).collect();
    let train = order[n_test..].iter().map(|&i| corpus[i].clone()).collect();
    Ok((train, test))
}
