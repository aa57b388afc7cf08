//! Principle-guided scenario simulation.
//!
//! Builds the four-step generation prompt (task and JSON format, roles and
//! setting, activities and phase prompts, the eighteen facilitation
//! principles) and produces simulated sessions either through a
//! chat-completions HTTP endpoint or an offline seeded template engine.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{build_session, parse_session_record, CorpusError, Origin, Session, SpeakerRole};
use crate::model::derive_seed;

pub const TOKEN_ENV: &str = "PGSS_API_TOKEN";
const REQUIRED_PRINCIPLES: [&str; 3] = ["Encourage new ideas", "Value opinions", "Use reminiscence"];

pub const DEFAULT_PRINCIPLES: [&str; 18] = [
    "Provide mental stimulation",
    "Encourage new ideas",
    "Use orientation sensitively",
    "Value opinions",
    "Use reminiscence",
    "Provide triggers to aid recall",
    "Keep continuity between sessions",
    "Favour implicit learning",
    "Stimulate language",
    "Stimulate executive function",
    "Be person-centred",
    "Show respect",
    "Promote involvement",
    "Ensure inclusion",
    "Offer choice",
    "Make it fun",
    "Maximise potential",
    "Build relationships",
];

#[derive(Debug, Error)]
pub enum PgssError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("api error: {0}")]
    Api(String),
    #[error("malformed response after {attempts} attempts: {last}")]
    MalformedResponse { attempts: usize, last: String },
    #[error("simulated session failed validation: {}", .0.failures().join("; "))]
    ValidationFailed(ValidationReport),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub name: String,
    pub history: String,
    pub interests: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePrompts {
    pub opening: String,
    pub middle: String,
    pub closing: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_patients: u32,
    pub patient_profiles: Vec<PatientProfile>,
    pub activity_categories: Vec<String>,
    pub phase_prompts: PhasePrompts,
    pub principles: Vec<String>,
    pub min_turns: usize,
    pub seed: u64,
}

fn profile(name: &str, history: &str, interests: &[&str]) -> PatientProfile {
    PatientProfile {
        name: name.into(),
        history: history.into(),
        interests: interests.iter().map(|s| s.to_string()).collect(),
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_patients: 5,
            patient_profiles: vec![
                profile("Mr Chan", "worked forty years as a tram driver", &["tea", "old songs"]),
                profile("Mrs Wong", "ran a tailoring shop in the market", &["sewing", "cooking"]),
                profile("Mr Lee", "taught mathematics at a village school", &["chess", "calligraphy"]),
                profile("Mrs Ho", "raised five children by the harbour", &["gardening", "opera"]),
                profile("Mr Lam", "was a fisherman on the outlying islands", &["boats", "weather"]),
                profile("Mrs Cheung", "kept accounts for a trading company", &["mahjong", "travel"]),
            ],
            activity_categories: [
                "art creation",
                "thematic discussion",
                "physical games",
                "sounds and music",
                "childhood memories",
                "food and cooking",
                "current affairs",
                "word games",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            phase_prompts: PhasePrompts {
                opening: "Welcome everyone, orient the group to the day and warm up with a song or greeting.".into(),
                middle: "Run the main activity, inviting each person to share opinions and memories.".into(),
                closing: "Summarise the session, thank each participant and mention the next meeting.".into(),
            },
            principles: DEFAULT_PRINCIPLES.iter().map(|s| s.to_string()).collect(),
            min_turns: 31,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), PgssError> {
        let bad = |m: String| Err(PgssError::InvalidConfig(m));
        if !(5..=6).contains(&self.n_patients) {
            return bad(format!("n_patients must be 5 or 6, got {}", self.n_patients));
        }
        if self.patient_profiles.len() < self.n_patients as usize {
            return bad(format!(
                "{} patient profiles for {} patients",
                self.patient_profiles.len(),
                self.n_patients
            ));
        }
        if self.activity_categories.is_empty() {
            return bad("activity_categories is empty".into());
        }
        if self.principles.len() != 18 {
            return bad(format!("expected 18 principles, got {}", self.principles.len()));
        }
        for req in REQUIRED_PRINCIPLES {
            if !self.principles.iter().any(|p| p == req) {
                return bad(format!("principle list lacks {req:?}"));
            }
        }
        for (i, a) in self.principles.iter().enumerate() {
            if a.trim().is_empty() {
                return bad("empty principle".into());
            }
            for b in &self.principles[i + 1..] {
                if a.contains(b.as_str()) || b.contains(a.as_str()) {
                    return bad(format!("principles {a:?} and {b:?} overlap"));
                }
            }
        }
        if self.min_turns < 31 {
            return bad(format!("min_turns must exceed 30, got {}", self.min_turns));
        }
        Ok(())
    }

    fn patients(&self) -> &[PatientProfile] {
        &self.patient_profiles[..self.n_patients as usize]
    }
}

/// The generation prompt, steps in order.
pub fn build_pgss_prompt(cfg: &ScenarioConfig) -> Result<String, PgssError> {
    cfg.validate()?;
    let mut p = String::new();
    p.push_str("Step 1. Task and output format.\n");
    p.push_str(&format!(
        "Write one group cognitive stimulation session with more than {} exchanges. \
         Output only a JSON array; each element is an object with three fields: \
         \"turn\" (integer, starting at 1), \"speaker\" (\"Therapist\" or \"Patient_k\") \
         and \"dialogue\" (the spoken text).\n\n",
        cfg.min_turns - 1
    ));
    p.push_str("Step 2. Roles and setting.\n");
    p.push_str(&format!(
        "There is one therapist who facilitates and {} patients with cognitive impairment. \
         The session takes place in a well-equipped activity room.\n",
        cfg.n_patients
    ));
    for (i, pt) in cfg.patients().iter().enumerate() {
        p.push_str(&format!(
            "Patient_{}: {}, who {}; interests: {}.\n",
            i + 1,
            pt.name,
            pt.history,
            pt.interests.join(", ")
        ));
    }
    p.push_str("\nStep 3. Activities and phase prompts.\n");
    p.push_str("Randomly select one activity from this list: ");
    p.push_str(&cfg.activity_categories.join("; "));
    p.push_str(".\n");
    p.push_str(&format!("Opening phase: {}\n", cfg.phase_prompts.opening));
    p.push_str(&format!("Middle phase: {}\n", cfg.phase_prompts.middle));
    p.push_str(&format!("Closing phase: {}\n\n", cfg.phase_prompts.closing));
    p.push_str("Step 4. Constraining principles.\n");
    p.push_str(
        "Every therapist utterance must strictly adhere to the following principles \
         throughout the entire session:\n",
    );
    for (i, pr) in cfg.principles.iter().enumerate() {
        p.push_str(&format!("{}. {}\n", i + 1, pr));
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Opening,
    Middle,
    Closing,
}

/// Phase of 0-based utterance `i` in a session of `total` utterances:
/// first 20% opening, next 60% middle, remainder closing.
pub fn phase_of(i: usize, total: usize) -> Phase {
    let opening = (total as f64 * 0.2).round() as usize;
    let middle_end = (total as f64 * 0.8).round() as usize;
    if i < opening.max(1) {
        Phase::Opening
    } else if i < middle_end {
        Phase::Middle
    } else {
        Phase::Closing
    }
}

/// Therapist templates per default principle index; `{name}`, `{activity}`
/// and `{interest}` are filled in.
const THERAPIST_TEMPLATES: [&str; 18] = [
    "Let us warm up our minds with today's {activity}, {name}. What do you notice first?",
    "{name}, what new idea comes to mind when you think about {interest}?",
    "It is a bright morning here in our activity room. {name}, how has your week been?",
    "{name}, there is no right or wrong answer. What is your opinion on {activity}?",
    "{name}, does {interest} remind you of something from your younger days?",
    "Here is a picture to help us remember. {name}, what does it bring back for you?",
    "Last time we talked about {interest}. {name}, shall we carry on from there?",
    "Let us simply try it together, {name}, and see how it goes with {activity}.",
    "{name}, can you describe {interest} in your own words for the group?",
    "{name}, how would you plan the next step of our {activity}?",
    "{name}, you know a lot about {interest}. Tell us what matters most to you.",
    "Thank you, {name}. Your experience is valuable to all of us.",
    "{name}, would you like to lead this part of the {activity}?",
    "We would love to hear from everyone. {name}, what do you think?",
    "{name}, would you prefer to talk about {interest} or carry on with the {activity}?",
    "That made everyone smile. {name}, what else about {interest} makes you laugh?",
    "You did that very well, {name}. Shall we try a slightly harder one?",
    "{name}, who here shares your love of {interest}? Maybe you can swap stories.",
];

/// Which default principles suit each phase.
fn phase_principles(phase: Phase) -> &'static [usize] {
    match phase {
        Phase::Opening => &[2, 6, 10, 13, 15],
        Phase::Middle => &[0, 1, 3, 4, 5, 7, 8, 9, 12, 14, 16],
        Phase::Closing => &[11, 13, 15, 17, 6],
    }
}

const PATIENT_TEMPLATES: [&str; 8] = [
    "I remember when I {history}. Those were good days.",
    "I like {interest} very much. It makes me feel calm.",
    "I think {activity} is a nice idea. Let me try.",
    "Oh, {interest} reminds me of my family.",
    "I am not sure, but I will give it a go.",
    "When I {history}, we never had time for {interest}.",
    "Yes, I agree. {interest} was popular in my time.",
    "That is interesting. Can you say it again slowly?",
];

/// A template-generated session with the principle behind each therapist
/// utterance (`None` for patient turns).
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSession {
    pub session: Session,
    pub activity: String,
    pub principles: Vec<Option<String>>,
}

/// Seeded offline session: the therapist opens and then alternates with
/// patients, who are visited round-robin in a fresh shuffled order each
/// round. The session has `max(min_turns, 4·n + 1)` utterances so every
/// patient speaks at least twice.
pub fn template_generate_tagged(cfg: &ScenarioConfig) -> Result<TemplateSession, PgssError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patients = cfg.patients();
    let n = patients.len();
    let total = cfg.min_turns.max(4 * n + 1);
    let activity = cfg.activity_categories.choose(&mut rng).expect("non-empty").clone();

    let mut queue: Vec<usize> = Vec::new();
    let mut turns: Vec<(SpeakerRole, String)> = Vec::with_capacity(total);
    let mut tags = Vec::with_capacity(total);
    let mut next_patient = None;
    for i in 0..total {
        if i % 2 == 0 {
            if queue.is_empty() {
                queue = (0..n).collect();
                queue.shuffle(&mut rng);
                queue.reverse();
            }
            let who = queue.pop().expect("refilled");
            next_patient = Some(who);
            let pt = &patients[who];
            let pool = phase_principles(phase_of(i, total));
            let pi = pool[rng.gen_range(0..pool.len())];
            let principle = cfg.principles[pi].clone();
            let interest = pt.interests.choose(&mut rng).map(String::as_str).unwrap_or("music");
            let text = if i == 0 {
                format!(
                    "Good morning everyone, welcome to our activity room. Today we will enjoy {activity} together. {} {}",
                    cfg.phase_prompts.opening,
                    fill(THERAPIST_TEMPLATES[pi], &pt.name, &activity, interest, &pt.history)
                )
            } else if i + 1 == total {
                format!(
                    "{} Thank you all for joining today, see you next time.",
                    fill(THERAPIST_TEMPLATES[pi], &pt.name, &activity, interest, &pt.history)
                )
            } else {
                fill(THERAPIST_TEMPLATES[pi], &pt.name, &activity, interest, &pt.history)
            };
            turns.push((SpeakerRole::Assistant, text));
            tags.push(Some(principle));
        } else {
            let who = next_patient.take().expect("therapist turn addressed a patient");
            let pt = &patients[who];
            let interest = pt.interests.choose(&mut rng).map(String::as_str).unwrap_or("music");
            let t = PATIENT_TEMPLATES[rng.gen_range(0..PATIENT_TEMPLATES.len())];
            turns.push((SpeakerRole::Human(who as u32 + 1), fill(t, &pt.name, &activity, interest, &pt.history)));
            tags.push(None);
        }
    }
    let id = format!("sim-{:016x}", cfg.seed);
    let session = build_session(&turns, &id, Origin::Simulated)
        .map_err(|e| PgssError::InvalidConfig(format!("template produced an invalid session: {e}")))?;
    if session.utterances.len() != total {
        return Err(PgssError::InvalidConfig("a template rendered to an empty utterance".into()));
    }
    Ok(TemplateSession {
        session,
        activity,
        principles: tags,
    })
}

fn fill(t: &str, name: &str, activity: &str, interest: &str, history: &str) -> String {
    t.replace("{name}", name)
        .replace("{activity}", activity)
        .replace("{interest}", interest)
        .replace("{history}", history)
}

pub fn template_generate(cfg: &ScenarioConfig) -> Result<Session, PgssError> {
    template_generate_tagged(cfg).map(|t| t.session)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.detail.clone())
            .collect()
    }
}

/// Structural checks on a simulated session.
pub fn validate_simulated(s: &Session, cfg: &ScenarioConfig) -> ValidationReport {
    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        checks.push(ValidationCheck {
            name: name.into(),
            passed,
            detail,
        })
    };
    let n = s.utterances.len();
    check(
        "turn_count",
        n >= cfg.min_turns,
        if n >= cfg.min_turns {
            format!("turns = {n}")
        } else {
            format!("turns < {}", cfg.min_turns)
        },
    );
    let therapist = s.utterances.iter().filter(|u| u.speaker == SpeakerRole::Assistant).count();
    check(
        "single_therapist",
        therapist > 0,
        if therapist > 0 {
            "one therapist role".into()
        } else {
            "no therapist utterances".into()
        },
    );
    let mut humans: Vec<u32> = s.utterances.iter().filter_map(|u| u.speaker.human_index()).collect();
    humans.sort_unstable();
    humans.dedup();
    check(
        "speaker_count",
        humans.len() == cfg.n_patients as usize,
        format!("{} distinct patients, expected {}", humans.len(), cfg.n_patients),
    );
    let schema = s.validate();
    check(
        "schema",
        schema.is_ok(),
        schema.err().map_or_else(|| "ok".into(), |e| e.to_string()),
    );
    let empty = s.utterances.iter().filter(|u| u.text.trim().is_empty()).count();
    check(
        "non_empty",
        empty == 0,
        format!("{empty} empty utterances"),
    );
    ValidationReport { checks }
}

/// Connection settings for the chat-completions backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub attempts: usize,
    pub backoff_ms: u64,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            temperature: 1.0,
            timeout_secs: 120,
            max_in_flight: 4,
            attempts: 3,
            backoff_ms: 1000,
        }
    }
}

/// Chat-completions client settings with the bearer token.
#[derive(Clone)]
pub struct ApiBackend {
    pub config: ApiConfig,
    token: Option<String>,
}

impl fmt::Debug for ApiBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApiBackend")
            .field("config", &self.config)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl ApiBackend {
    pub fn new(config: ApiConfig, token: Option<String>) -> Self {
        Self { config, token }
    }

    /// Reads the token from the `PGSS_API_TOKEN` environment variable.
    pub fn from_env(config: ApiConfig) -> Self {
        Self::new(config, std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()))
    }

    fn client(&self) -> Result<reqwest::blocking::Client, PgssError> {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.config.timeout_secs))
            .build()
            .map_err(|e| PgssError::Api(e.to_string()))
    }

    /// One POST; returns the first text payload of the response.
    fn complete(&self, client: &reqwest::blocking::Client, prompt: &str) -> Result<String, Attempt> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        });
        let mut req = client.post(&self.config.endpoint).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| {
            let msg = if e.is_timeout() { "timeout".to_string() } else { e.without_url().to_string() };
            Attempt::Transient(msg)
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Transient(e.without_url().to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Transient(format!("status {}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("status {}", status.as_u16())));
        }
        first_text_payload(&text).ok_or_else(|| Attempt::Malformed("no text payload in response".into()))
    }
}

enum Attempt {
    Transient(String),
    Fatal(String),
    Malformed(String),
}

/// First text payload of a chat-completions style body, accepting the
/// common `choices[0].message.content`, `choices[0].text` and
/// `content[0].text` shapes.
pub fn first_text_payload(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let candidates = [
        v.pointer("/choices/0/message/content"),
        v.pointer("/choices/0/text"),
        v.pointer("/content/0/text"),
        v.pointer("/output_text"),
    ];
    let text = candidates
        .into_iter()
        .flatten()
        .find_map(|c| c.as_str().map(str::to_string));
    text
}

/// Parses a model reply as a dialogue record: a JSON array, or an object
/// holding one under `dialogue`, possibly wrapped in prose or a code fence.
pub fn parse_dialogue_reply(text: &str, id: &str) -> Result<Session, CorpusError> {
    let direct: Option<Value> = serde_json::from_str(text.trim()).ok();
    let value = match direct {
        Some(v) => v,
        None => {
            let (start, end) = (text.find('['), text.rfind(']'));
            match (start, end) {
                (Some(s), Some(e)) if s < e => serde_json::from_str(&text[s..=e])
                    .map_err(|e| CorpusError::Schema(format!("reply is not JSON: {e}")))?,
                _ => return Err(CorpusError::Schema("reply contains no JSON array".into())),
            }
        }
    };
    let record = match &value {
        Value::Object(o) => o.get("dialogue").cloned().unwrap_or(Value::Null),
        other => other.clone(),
    };
    parse_session_record(&record, id, Origin::Simulated)
}

#[derive(Clone, Debug)]
pub enum GeneratorBackend {
    Template,
    ExternalApi(ApiBackend),
}

/// One simulated session with id `id`.
pub fn generate_simulated_session(
    cfg: &ScenarioConfig,
    backend: &GeneratorBackend,
    id: &str,
) -> Result<Session, PgssError> {
    match backend {
        GeneratorBackend::Template => {
            let mut s = template_generate(cfg)?;
            s.id = id.to_string();
            Ok(s)
        }
        GeneratorBackend::ExternalApi(api) => {
            let prompt = build_pgss_prompt(cfg)?;
            let client = api.client()?;
            api_session(api, &client, &prompt, cfg, id)
        }
    }
}

fn api_session(
    api: &ApiBackend,
    client: &reqwest::blocking::Client,
    prompt: &str,
    cfg: &ScenarioConfig,
    id: &str,
) -> Result<Session, PgssError> {
    let attempts = api.config.attempts.max(1);
    let mut last = String::new();
    let mut malformed = false;
    for attempt in 0..attempts {
        if attempt > 0 {
            let wait = api.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            std::thread::sleep(Duration::from_millis(wait));
        }
        log::debug!("session {id}: request {} of {attempts} to {}", attempt + 1, api.config.endpoint);
        match api.complete(client, prompt) {
            Ok(text) => match parse_dialogue_reply(&text, id) {
                Ok(session) => {
                    let report = validate_simulated(&session, cfg);
                    return if report.passed() {
                        Ok(session)
                    } else {
                        Err(PgssError::ValidationFailed(report))
                    };
                }
                Err(e) => {
                    malformed = true;
                    last = e.to_string();
                }
            },
            Err(Attempt::Malformed(m)) => {
                malformed = true;
                last = m;
            }
            Err(Attempt::Transient(m)) => {
                malformed = false;
                last = m;
            }
            Err(Attempt::Fatal(m)) => return Err(PgssError::Api(m)),
        }
        log::warn!("session {id}: attempt {} failed: {last}", attempt + 1);
    }
    if malformed {
        Err(PgssError::MalformedResponse { attempts, last })
    } else {
        Err(PgssError::Api(last))
    }
}

/// Scenario for the `i`-th session of a batch: same settings, derived seed.
pub fn scenario_for(cfg: &ScenarioConfig, i: usize) -> ScenarioConfig {
    ScenarioConfig {
        seed: derive_seed(cfg.seed, &[i as u64]),
        ..cfg.clone()
    }
}

/// `n` sessions with ids `sim-00000`, `sim-00001`, ...; results are in index
/// order. API calls run on at most `max_in_flight` worker threads, each
/// with its own client.
pub fn generate_batch(
    cfg: &ScenarioConfig,
    backend: &GeneratorBackend,
    n: usize,
) -> Vec<Result<Session, PgssError>> {
    let id = |i: usize| format!("sim-{i:05}");
    match backend {
        GeneratorBackend::Template => (0..n)
            .into_par_iter()
            .map(|i| generate_simulated_session(&scenario_for(cfg, i), backend, &id(i)))
            .collect(),
        GeneratorBackend::ExternalApi(api) => {
            let prompt = match build_pgss_prompt(cfg) {
                Ok(p) => p,
                Err(e) => {
                    let msg = e.to_string();
                    return (0..n).map(|_| Err(PgssError::InvalidConfig(msg.clone()))).collect();
                }
            };
            let next = AtomicUsize::new(0);
            let results: Mutex<Vec<Option<Result<Session, PgssError>>>> =
                Mutex::new((0..n).map(|_| None).collect());
            let workers = api.config.max_in_flight.clamp(1, n.max(1));
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| {
                        let client = api.client();
                        loop {
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            if i >= n {
                                break;
                            }
                            let r = match &client {
                                Ok(c) => api_session(api, c, &prompt, cfg, &id(i)),
                                Err(e) => Err(PgssError::Api(e.to_string())),
                            };
                            results.lock().expect("no poisoned lock")[i] = Some(r);
                        }
                    });
                }
            });
            results
                .into_inner()
                .expect("no poisoned lock")
                .into_iter()
                .map(|r| r.expect("every index handled"))
                .collect()
        }
    }
}
