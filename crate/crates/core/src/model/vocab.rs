//! Character-level vocabulary with single-id special tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{SpeakerRole, ASSISTANT_TOKEN, IM_END, IM_START};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
    /// Matchable special tokens, longest first.
    specials: Vec<(String, TokenId)>,
    max_humans: u32,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VocabError {
    #[error("ids are not a bijection onto 0..{0}")]
    NotBijective(usize),
    #[error("required symbol {0:?} missing or misplaced")]
    MissingSpecial(String),
}

impl Vocab {
    /// Builds a vocabulary over every character of `texts`, plus `<pad>` (id
    /// 0), `<unk>`, the chat delimiters and the speaker tokens
    /// `[Assistant]`, `[Human_1]`..`[Human_{max_humans}]`.
    pub fn build<'t, I>(texts: I, max_humans: u32) -> Self
    where
        I: IntoIterator<Item = &'t str>,
    {
        let mut symbols: Vec<String> = Self::special_symbols(max_humans);
        let mut chars = BTreeSet::new();
        chars.insert(' ');
        for t in texts {
            chars.extend(t.chars());
        }
        symbols.extend(chars.into_iter().map(String::from));
        Self::from_symbols(symbols, max_humans)
    }

    fn special_symbols(max_humans: u32) -> Vec<String> {
        let mut s = vec![
            PAD.to_string(),
            UNK.to_string(),
            IM_START.to_string(),
            IM_END.to_string(),
            ASSISTANT_TOKEN.to_string(),
        ];
        s.extend((1..=max_humans).map(|i| SpeakerRole::Human(i).token()));
        s
    }

    fn from_symbols(symbols: Vec<String>, max_humans: u32) -> Self {
        let index: HashMap<String, TokenId> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        let mut specials: Vec<(String, TokenId)> = Self::special_symbols(max_humans)
            .into_iter()
            .skip(2)
            .map(|s| {
                let id = index[&s];
                (s, id)
            })
            .collect();
        specials.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        Self {
            symbols,
            index,
            specials,
            max_humans,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn max_humans(&self) -> u32 {
        self.max_humans
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id as usize]
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }

    pub fn unk_id(&self) -> TokenId {
        self.index[UNK]
    }

    pub fn im_start_id(&self) -> TokenId {
        self.index[IM_START]
    }

    pub fn im_end_id(&self) -> TokenId {
        self.index[IM_END]
    }

    pub fn assistant_id(&self) -> TokenId {
        self.index[ASSISTANT_TOKEN]
    }

    /// Id of a speaker token; humans beyond `max_humans` have none.
    pub fn speaker_id(&self, role: SpeakerRole) -> Option<TokenId> {
        self.id(&role.token())
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < 5 + self.max_humans as usize
    }

    pub fn is_human_token(&self, id: TokenId) -> bool {
        id >= 5 && (id as usize) < 5 + self.max_humans as usize
    }

    /// Longest-match tokenization: special tokens become single ids, other
    /// characters map to their own id or to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while let Some(c) = rest.chars().next() {
            if c == '<' || c == '[' {
                for (sym, id) in &self.specials {
                    if rest.starts_with(sym.as_str()) {
                        out.push(*id);
                        rest = &rest[sym.len()..];
                        continue 'outer;
                    }
                }
            }
            let mut buf = [0u8; 4];
            out.push(
                self.index
                    .get(c.encode_utf8(&mut buf) as &str)
                    .copied()
                    .unwrap_or_else(|| self.unk_id()),
            );
            rest = &rest[c.len_utf8()..];
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.symbol(i)).collect()
    }

    /// Drops special tokens (used before scoring).
    pub fn strip_special(&self, ids: &[TokenId]) -> Vec<TokenId> {
        ids.iter().copied().filter(|&i| !self.is_special(i)).collect()
    }

    /// Symbol → id mapping, the on-disk vocabulary format.
    pub fn to_map(&self) -> BTreeMap<String, TokenId> {
        self.index.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, TokenId>) -> Result<Self, VocabError> {
        let n = map.len();
        let mut symbols = vec![None; n];
        for (sym, &id) in map {
            let slot = symbols
                .get_mut(id as usize)
                .ok_or(VocabError::NotBijective(n))?;
            if slot.is_some() {
                return Err(VocabError::NotBijective(n));
            }
            *slot = Some(sym.clone());
        }
        let symbols: Vec<String> = symbols
            .into_iter()
            .collect::<Option<_>>()
            .ok_or(VocabError::NotBijective(n))?;
        let max_humans = (1..)
            .take_while(|&i| map.contains_key(&SpeakerRole::Human(i).token()))
            .count() as u32;
        for (i, want) in Self::special_symbols(max_humans).iter().enumerate() {
            if symbols.get(i) != Some(want) {
                return Err(VocabError::MissingSpecial(want.clone()));
            }
        }
        Ok(Self::from_symbols(symbols, max_humans))
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile(BTreeMap<String, TokenId>);

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VocabFile(self.to_map()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let VocabFile(map) = VocabFile::deserialize(d)?;
        Vocab::from_map(&map).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["早晨好", "ab"], 3)
    }

    #[test]
    fn specials_are_single_ids() {
        let v = vocab();
        assert_eq!(v.pad_id(), 0);
        assert_eq!(v.id(PAD), Some(0));
        let ids = v.encode("[Assistant] 好");
        assert_eq!(ids, vec![v.assistant_id(), v.id(" ").unwrap(), v.id("好").unwrap()]);
        let ids = v.encode("<|im_start|>[Human_2] a<|im_end|>");
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], v.im_start_id());
        assert_eq!(ids[4], v.im_end_id());
    }

    #[test]
    fn roundtrip_and_unknowns() {
        let v = vocab();
        assert_eq!(v.decode(&v.encode("早晨")), "早晨");
        let ids = v.encode("z");
        assert_eq!(ids, vec![v.unk_id()]);
        assert_eq!(v.decode(&ids), UNK);
        // an unmatched bracket falls back to character lookup
        assert_eq!(v.encode("[Human_9]").len(), 9);
    }

    #[test]
    fn map_roundtrip() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.max_humans(), 3);
    }

    #[test]
    fn rejects_non_bijective_map() {
        let mut m = vocab().to_map();
        m.insert("extra".into(), 0);
        assert!(Vocab::from_map(&m).is_err());
    }
}
