// SPDX-License-Identifier: Apache-2.0

//! Character-level and byte-pair-style tokenizers over a small fixed alphabet.
//!
//! Two tokenizers built from the same alphabet but with different merge tables
//! give the reward model and the target model genuinely different vocabularies,
//! which is what the cross-tokenizer logits mapping in [`crate::decode`] needs.
//!
//! Merged tokens may carry a single leading space (`" chair"`) but never an
//! inner or trailing one, so words are the largest units a merge can build.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Lower-case letters, digits, space and a little punctuation.
pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,?!:;'-";

/// What `decode` emits for the unknown token. It is outside every alphabet, so
/// re-encoding it yields UNK again.
pub const UNK_GLYPH: char = '\u{FFFD}';

pub const TOKENIZER_FORMAT_VERSION: u32 = 1;

const SPECIAL_STRINGS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Roles of the reserved tokens. The numeric value is the token id in every vocab.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Bos = 0,
    Eos = 1,
    Pad = 2,
    Unk = 3,
}

impl Special {
    pub const ALL: [Special; 4] = [Special::Bos, Special::Eos, Special::Pad, Special::Unk];

    pub fn id(self) -> TokenId {
        self as TokenId
    }

    pub fn from_id(id: TokenId) -> Option<Special> {
        Special::ALL.get(id as usize).copied()
    }
}

pub const BOS: TokenId = Special::Bos as TokenId;
pub const EOS: TokenId = Special::Eos as TokenId;
/// Also used as the section separator inside model contexts.
pub const PAD: TokenId = Special::Pad as TokenId;
pub const UNK: TokenId = Special::Unk as TokenId;

/// Dense token-id space: specials first, then alphabet characters, then merges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_STRINGS {
            v.push(s.to_string());
        }
        v
    }

    /// Inserts `token` unless present; returns its id either way.
    fn push(&mut self, token: String) -> TokenId {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Char,
    Merged,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    kind: TokenizerKind,
    alphabet: Vec<char>,
    merge_rules: Vec<(String, String)>,
    vocab: Vocab,
    char_ids: HashMap<char, TokenId>,
    /// (left id, right id) -> (rule rank, merged id)
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    id: String,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

fn validate_alphabet(alphabet: &[char]) -> Result<()> {
    if alphabet.is_empty() {
        return Err(Error::InvalidAlphabet("alphabet is empty".into()));
    }
    for &c in alphabet {
        if c == '<' || c == '>' || c == UNK_GLYPH || c.is_control() {
            return Err(Error::InvalidAlphabet(format!(
                "character {c:?} collides with special-token syntax"
            )));
        }
    }
    Ok(())
}

fn normalize_alphabet(alphabet: impl IntoIterator<Item = char>) -> Vec<char> {
    let mut chars: Vec<char> = alphabet.into_iter().collect();
    chars.sort_unstable();
    chars.dedup();
    chars
}

impl Tokenizer {
    /// One token per alphabet character plus the four specials.
    pub fn char_level(alphabet: impl IntoIterator<Item = char>) -> Result<Self> {
        let alphabet = normalize_alphabet(alphabet);
        validate_alphabet(&alphabet)?;
        Ok(Self::assemble(TokenizerKind::Char, alphabet, Vec::new()))
    }

    /// Learns `num_merges` merge rules over [`DEFAULT_ALPHABET`].
    pub fn merged(corpus: &[String], num_merges: usize) -> Result<Self> {
        Self::merged_with_alphabet(DEFAULT_ALPHABET.chars(), corpus, num_merges)
    }

    /// Greedy pair-frequency merge learning. Ties go to the lexicographically
    /// smallest merged string, then to the smallest left part. Characters
    /// outside the alphabet act as barriers that no merge crosses.
    pub fn merged_with_alphabet(
        alphabet: impl IntoIterator<Item = char>,
        corpus: &[String],
        num_merges: usize,
    ) -> Result<Self> {
        let alphabet = normalize_alphabet(alphabet);
        validate_alphabet(&alphabet)?;
        if corpus.is_empty() {
            return Err(Error::InvalidCorpus("corpus is empty".into()));
        }

        // Distinct words (runs of in-alphabet characters) with multiplicities.
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for text in corpus {
            let mut run = String::new();
            for c in text.chars() {
                if alphabet.binary_search(&c).is_ok() {
                    run.push(c);
                } else if !run.is_empty() {
                    *counts.entry(std::mem::take(&mut run)).or_default() += 1;
                }
            }
            if !run.is_empty() {
                *counts.entry(run).or_default() += 1;
            }
        }
        let mut seqs: Vec<(Vec<String>, u64)> = counts
            .into_iter()
            .map(|(s, n)| (s.chars().map(String::from).collect(), n))
            .collect();

        let mut rules = Vec::with_capacity(num_merges);
        for _ in 0..num_merges {
            let mut freq: HashMap<(&str, &str), u64> = HashMap::new();
            for (seq, n) in &seqs {
                for w in seq.windows(2) {
                    if w[1].contains(' ') {
                        continue;
                    }
                    *freq.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
                }
            }
            let best = freq
                .iter()
                .map(|(&(a, b), &n)| (n, a, b))
                .max_by(|x, y| {
                    x.0.cmp(&y.0)
                        .then_with(|| {
                            let mx = format!("{}{}", x.1, x.2);
                            let my = format!("{}{}", y.1, y.2);
                            my.cmp(&mx)
                        })
                        .then_with(|| y.1.cmp(x.1))
                });
            let Some((_, a, b)) = best else { break };
            let (a, b) = (a.to_string(), b.to_string());
            for (seq, _) in seqs.iter_mut() {
                *seq = merge_strings(seq, &a, &b);
            }
            rules.push((a, b));
        }
        Ok(Self::assemble(TokenizerKind::Merged, alphabet, rules))
    }

    fn assemble(kind: TokenizerKind, alphabet: Vec<char>, merge_rules: Vec<(String, String)>) -> Self {
        let mut vocab = Vocab::with_specials();
        let mut char_ids = HashMap::new();
        for &c in &alphabet {
            char_ids.insert(c, vocab.push(c.to_string()));
        }
        let mut ranks = HashMap::new();
        for (rank, (a, b)) in merge_rules.iter().enumerate() {
            let left = vocab.id(a).expect("merge parts precede the merge");
            let right = vocab.id(b).expect("merge parts precede the merge");
            let merged = vocab.push(format!("{a}{b}"));
            ranks.entry((left, right)).or_insert((rank, merged));
        }
        let mut tok = Tokenizer {
            kind,
            alphabet,
            merge_rules,
            vocab,
            char_ids,
            ranks,
            id: String::new(),
        };
        let canonical = serde_json::to_vec(&tok.to_file()).expect("tokenizer file serializes");
        tok.id = hex::encode(&Sha256::digest(&canonical)[..8]);
        tok
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn merge_rules(&self) -> &[(String, String)] {
        &self.merge_rules
    }

    /// Content hash identifying this exact tokenizer; checkpoints bind to it.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Characters outside the alphabet become UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text
            .chars()
            .map(|c| self.char_ids.get(&c).copied().unwrap_or(UNK))
            .collect();
        if self.ranks.is_empty() {
            return ids;
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])))
                .min_by_key(|(rank, _)| *rank)
                .copied();
            let Some((rank, merged)) = best else { break };
            let (a, b) = {
                let (a, b) = &self.merge_rules[rank];
                (self.vocab.id(a).unwrap(), self.vocab.id(b).unwrap())
            };
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Concatenates token strings. BOS, EOS and PAD decode to nothing, UNK to [`UNK_GLYPH`].
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token_text(id)?);
        }
        Ok(out)
    }

    /// Surface text of a single token.
    pub fn token_text(&self, id: TokenId) -> Result<&str> {
        match Special::from_id(id) {
            Some(Special::Unk) => Ok("\u{FFFD}"),
            Some(_) => Ok(""),
            None => self.vocab.token(id).ok_or(Error::InvalidTokenId {
                id,
                vocab_size: self.vocab.len(),
            }),
        }
    }

    pub fn to_file(&self) -> TokenizerFile {
        TokenizerFile {
            version: TOKENIZER_FORMAT_VERSION,
            kind: self.kind,
            alphabet: self.alphabet.iter().collect(),
            merge_rules: self.merge_rules.clone(),
            specials: SpecialStrings::default(),
        }
    }

    pub fn from_file(file: TokenizerFile) -> Result<Self> {
        if file.version > TOKENIZER_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: file.version,
                supported: TOKENIZER_FORMAT_VERSION,
            });
        }
        if file.specials != SpecialStrings::default() {
            return Err(Error::InvalidConfig("unexpected special-token strings".into()));
        }
        let alphabet = normalize_alphabet(file.alphabet.chars());
        validate_alphabet(&alphabet)?;
        if file.kind == TokenizerKind::Char && !file.merge_rules.is_empty() {
            return Err(Error::InvalidConfig("char tokenizer with merge rules".into()));
        }
        // Each rule may only reference tokens that already exist.
        let mut known: std::collections::HashSet<String> =
            alphabet.iter().map(|c| c.to_string()).collect();
        for (a, b) in &file.merge_rules {
            if !known.contains(a) || !known.contains(b) {
                return Err(Error::InvalidConfig(format!("merge rule ({a:?}, {b:?}) references unknown tokens")));
            }
            known.insert(format!("{a}{b}"));
        }
        Ok(Self::assemble(file.kind, alphabet, file.merge_rules))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(serde_json::from_slice(&bytes)?)
    }
}

fn merge_strings(seq: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(seq[i].clone());
            i += 1;
        }
    }
    out
}

/// On-disk tokenizer description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerFile {
    pub version: u32,
    pub kind: TokenizerKind,
    pub alphabet: String,
    pub merge_rules: Vec<(String, String)>,
    pub specials: SpecialStrings,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialStrings {
    pub bos: String,
    pub eos: String,
    pub pad: String,
    pub unk: String,
}

impl Default for SpecialStrings {
    fn default() -> Self {
        let [bos, eos, pad, unk] = SPECIAL_STRINGS.map(String::from);
        SpecialStrings { bos, eos, pad, unk }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn char_vocab_counts_specials() {
        let tok = Tokenizer::char_level("ab".chars()).unwrap();
        assert_eq!(tok.vocab_size(), 6);
        let a = tok.vocab().id("a").unwrap();
        let b = tok.vocab().id("b").unwrap();
        assert_eq!(tok.encode("ab"), vec![a, b]);
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.kind(), TokenizerKind::Char);
    }

    #[test]
    fn empty_alphabet_rejected() {
        assert!(matches!(Tokenizer::char_level("".chars()), Err(Error::InvalidAlphabet(_))));
        assert!(matches!(Tokenizer::char_level("a<".chars()), Err(Error::InvalidAlphabet(_))));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Tokenizer::merged(&[], 3), Err(Error::InvalidCorpus(_))));
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // "ab" occurs twice in "abab" and once in "ab"; "ba" only once.
        let tok = Tokenizer::merged_with_alphabet("ab".chars(), &corpus(&["abab", "ab"]), 1).unwrap();
        assert_eq!(tok.merge_rules(), &[("a".to_string(), "b".to_string())]);
        let ab = tok.vocab().id("ab").unwrap();
        let a = tok.vocab().id("a").unwrap();
        assert_eq!(tok.encode("aba"), vec![ab, a]);
    }

    #[test]
    fn ties_break_on_merged_string() {
        // "ab" and "cd" both occur once; "ab" sorts first.
        let tok = Tokenizer::merged_with_alphabet("abcd".chars(), &corpus(&["ab", "cd"]), 1).unwrap();
        assert_eq!(tok.merge_rules()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn zero_merges_matches_char_tokenizer() {
        let merged = Tokenizer::merged(&corpus(&["hello world"]), 0).unwrap();
        let chars = Tokenizer::char_level(DEFAULT_ALPHABET.chars()).unwrap();
        for s in ["hello", "a b, c?", ""] {
            assert_eq!(merged.encode(s), chars.encode(s));
        }
        assert_eq!(merged.vocab_size(), chars.vocab_size());
    }

    #[test]
    fn merges_never_absorb_a_following_space() {
        let tok = Tokenizer::merged(&corpus(&["red cat red cat red cat"]), 40).unwrap();
        for t in tok.vocab().tokens().iter().skip(4) {
            assert!(!t[1..].contains(' '), "token {t:?} has an inner space");
        }
        assert!(tok.vocab().id(" cat").is_some());
    }

    #[test]
    fn unk_handling() {
        let tok = Tokenizer::char_level("ab".chars()).unwrap();
        assert_eq!(tok.encode("aZb"), vec![tok.vocab().id("a").unwrap(), UNK, tok.vocab().id("b").unwrap()]);
        assert_eq!(tok.decode(&[UNK]).unwrap(), UNK_GLYPH.to_string());
        assert_eq!(tok.decode(&[BOS, EOS, PAD]).unwrap(), "");
        assert!(matches!(tok.decode(&[99]), Err(Error::InvalidTokenId { id: 99, .. })));
    }

    #[test]
    fn hello_round_trips_both_kinds() {
        let chars = Tokenizer::char_level(DEFAULT_ALPHABET.chars()).unwrap();
        let merged = Tokenizer::merged(&corpus(&["hello there", "help me"]), 10).unwrap();
        assert_eq!(chars.decode(&chars.encode("hello")).unwrap(), "hello");
        assert_eq!(merged.decode(&merged.encode("hello")).unwrap(), "hello");
    }

    #[test]
    fn merged_and_char_encodings_differ_in_length() {
        let chars = Tokenizer::char_level(DEFAULT_ALPHABET.chars()).unwrap();
        let merged = Tokenizer::merged(&corpus(&["the table and the chair"]), 1).unwrap();
        let s = "the table and the chair";
        assert_ne!(chars.encode(s).len(), merged.encode(s).len());
    }

    #[test]
    fn file_round_trip_and_version_gate() {
        let tok = Tokenizer::merged(&corpus(&["a cat and a dog"]), 6).unwrap();
        let back = Tokenizer::from_file(tok.to_file()).unwrap();
        assert_eq!(back.id(), tok.id());
        assert_eq!(back.encode("a cat"), tok.encode("a cat"));

        let mut newer = tok.to_file();
        newer.version = TOKENIZER_FORMAT_VERSION + 1;
        assert!(matches!(Tokenizer::from_file(newer), Err(Error::UnsupportedVersion { .. })));
    }

    fn alphabet_string() -> impl Strategy<Value = String> {
        let chars: Vec<char> = DEFAULT_ALPHABET.chars().collect();
        proptest::collection::vec(proptest::sample::select(chars), 0..40)
            .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn round_trip_any_alphabet_string(s in alphabet_string()) {
            let chars = Tokenizer::char_level(DEFAULT_ALPHABET.chars()).unwrap();
            let merged = Tokenizer::merged(&corpus(&["is there a chair? describe the scene. red table"]), 30).unwrap();
            prop_assert_eq!(chars.decode(&chars.encode(&s)).unwrap(), s.clone());
            prop_assert_eq!(merged.decode(&merged.encode(&s)).unwrap(), s.clone());
            prop_assert_eq!(merged.encode(&s), merged.encode(&s));
        }
    }
}
