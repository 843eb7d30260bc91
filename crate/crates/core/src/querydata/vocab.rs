use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{QueryDataError, QueryRecord};

/// Token and tag id maps with reserved entries at the front.
///
/// Token ids 0..4 are PAD, CLS, SEP and UNK; tag ids 0..3 are PAD, NONE
/// (carried by CLS/SEP) and UNK. Learned entries follow in lexicographic
/// order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabLists", into = "VocabLists")]
pub struct Vocab {
    tokens: Vec<String>,
    tags: Vec<String>,
    token_ids: HashMap<String, usize>,
    tag_ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabLists {
    tokens: Vec<String>,
    tags: Vec<String>,
}

impl From<VocabLists> for Vocab {
    fn from(l: VocabLists) -> Self {
        Self::from_lists(l.tokens, l.tags)
    }
}

impl From<Vocab> for VocabLists {
    fn from(v: Vocab) -> Self {
        Self {
            tokens: v.tokens,
            tags: v.tags,
        }
    }
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const CLS: usize = 1;
    pub const SEP: usize = 2;
    pub const UNK: usize = 3;
    pub const RESERVED_TOKENS: [&'static str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

    pub const TAG_PAD: usize = 0;
    pub const TAG_NONE: usize = 1;
    pub const TAG_UNK: usize = 2;
    pub const RESERVED_TAGS: [&'static str; 3] = ["[PAD]", "[NONE]", "[UNK]"];

    fn from_lists(tokens: Vec<String>, tags: Vec<String>) -> Self {
        let token_ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let tag_ids = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            tags,
            token_ids,
            tag_ids,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_ids.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn tag_id(&self, tag: &str) -> usize {
        self.tag_ids.get(tag).copied().unwrap_or(Self::TAG_UNK)
    }

    /// Id of a tag seen when the vocabulary was built.
    pub fn tag_id_known(&self, tag: &str) -> Option<usize> {
        self.tag_ids.get(tag).copied()
    }

    pub fn contains_token(&self, token: &str) -> bool {
        self.token_ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tag(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }
}

/// Collects every token and tag of `records` behind the reserved entries.
pub fn build_vocab(records: &[QueryRecord]) -> Result<Vocab, QueryDataError> {
    if records.is_empty() {
        return Err(QueryDataError::Empty);
    }
    let mut tokens = BTreeSet::new();
    let mut tags = BTreeSet::new();
    for r in records {
        tokens.extend(r.source.iter().map(String::as_str));
        tags.extend(r.tags.iter().map(String::as_str));
    }
    for reserved in Vocab::RESERVED_TOKENS {
        tokens.remove(reserved);
    }
    for reserved in Vocab::RESERVED_TAGS {
        tags.remove(reserved);
    }
    let tokens = Vocab::RESERVED_TOKENS
        .iter()
        .copied()
        .chain(tokens)
        .map(String::from)
        .collect();
    let tags = Vocab::RESERVED_TAGS
        .iter()
        .copied()
        .chain(tags)
        .map(String::from)
        .collect();
    Ok(Vocab::from_lists(tokens, tags))
}
