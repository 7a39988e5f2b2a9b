//! WordPiece vocabulary induction, greedy longest-match encoding,
//! vocab.txt persistence, and rank-tier vocabulary comparison.
//!
//! Merge score is likelihood-style: `count(pair) / (count(left) *
//! count(right))`, ties broken lexicographically by merged string.
//! Pairs must occur at least twice to merge.

use crate::corpus::Document;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// The five reserved tokens at fixed ids 0–4.
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub const MIN_PAIR_FREQUENCY: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("budget {budget} is below the minimum {minimum} (5 specials + {alphabet} alphabet tokens)")]
    BudgetTooSmall {
        budget: usize,
        minimum: usize,
        alphabet: usize,
    },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("{path}:{line}: duplicate token {token:?}")]
    DuplicateToken {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("rank tier [{lo}, {hi}] out of range for vocabularies of sizes {a} and {b}")]
    TierOutOfRange {
        lo: usize,
        hi: usize,
        a: usize,
        b: usize,
    },
    #[error("fertility is undefined on an empty corpus")]
    EmptyFertilityCorpus,
}

/// Ordered subword inventory; id = position in the list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn is_special_id(&self, id: u32) -> bool {
        id < SPECIAL_TOKENS.len() as u32
    }

    /// SHA-256 over the exact vocab.txt byte representation.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Rank-tier diff of two vocabularies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabDiff {
    pub rank_lo: usize,
    pub rank_hi: usize,
    pub left_only: Vec<String>,
    pub right_only: Vec<String>,
    pub shared: Vec<String>,
}

/// Split on whitespace, then split every non-alphanumeric, non-`#`
/// character into its own word. Keeps equations tokenizable.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '#' {
                current.push(ch);
            } else {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(ch.to_string());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

fn initial_segmentation(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("##{c}")
            }
        })
        .collect()
}

/// Induce a WordPiece vocabulary of at most `budget` tokens.
pub fn train_vocabulary<'a>(
    documents: impl IntoIterator<Item = &'a Document>,
    budget: usize,
) -> Result<Vocabulary, TokenizerError> {
    let mut word_freqs: BTreeMap<String, u64> = BTreeMap::new();
    for doc in documents {
        for word in pre_tokenize(&doc.text) {
            *word_freqs.entry(word).or_insert(0) += 1;
        }
    }
    if word_freqs.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    // Alphabet: every observed character word-initially, plus the
    // continuation form of every character seen past position 0.
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    for word in word_freqs.keys() {
        for (i, c) in word.chars().enumerate() {
            alphabet.insert(c.to_string());
            if i > 0 {
                alphabet.insert(format!("##{c}"));
            }
        }
    }
    let minimum = SPECIAL_TOKENS.len() + alphabet.len();
    if budget < minimum {
        return Err(TokenizerError::BudgetTooSmall {
            budget,
            minimum,
            alphabet: alphabet.len(),
        });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().cloned());

    let mut segmentations: Vec<(Vec<String>, u64)> = word_freqs
        .iter()
        .map(|(w, &f)| (initial_segmentation(w), f))
        .collect();

    while tokens.len() < budget {
        match best_merge(&segmentations) {
            Some((left, right)) => {
                let merged = merge_token(&left, &right);
                apply_merge(&mut segmentations, &left, &right, &merged);
                tokens.push(merged);
            }
            None => break,
        }
    }

    Ok(Vocabulary::from_tokens(tokens))
}

fn merge_token(left: &str, right: &str) -> String {
    let right_body = right.strip_prefix("##").unwrap_or(right);
    format!("{left}{right_body}")
}

/// Best adjacent pair by score = count(pair)/(count(left)·count(right)),
/// restricted to pairs occurring at least [`MIN_PAIR_FREQUENCY`] times.
/// Scores compared exactly in integer arithmetic; ties broken by the
/// lexicographically smallest merged string.
fn best_merge(segmentations: &[(Vec<String>, u64)]) -> Option<(String, String)> {
    let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
    let mut symbol_counts: HashMap<String, u64> = HashMap::new();
    for (seg, freq) in segmentations {
        for sym in seg {
            *symbol_counts.entry(sym.clone()).or_insert(0) += freq;
        }
        for pair in seg.windows(2) {
            *pair_counts
                .entry((pair[0].clone(), pair[1].clone()))
                .or_insert(0) += freq;
        }
    }

    let mut best: Option<(u128, u128, String, (String, String))> = None;
    for ((left, right), count) in pair_counts {
        if count < MIN_PAIR_FREQUENCY {
            continue;
        }
        let denom = symbol_counts[&left] as u128 * symbol_counts[&right] as u128;
        let merged = merge_token(&left, &right);
        // score = count/denom; compare count1*denom2 vs count2*denom1.
        let better = match &best {
            None => true,
            Some((bc, bd, bm, _)) => {
                let lhs = count as u128 * bd;
                let rhs = *bc * denom;
                lhs > rhs || (lhs == rhs && merged < *bm)
            }
        };
        if better {
            best = Some((count as u128, denom, merged, (left, right)));
        }
    }
    best.map(|(_, _, _, pair)| pair)
}

fn apply_merge(
    segmentations: &mut [(Vec<String>, u64)],
    left: &str,
    right: &str,
    merged: &str,
) {
    for (seg, _) in segmentations.iter_mut() {
        let mut i = 0;
        while i + 1 < seg.len() {
            if seg[i] == left && seg[i + 1] == right {
                seg[i] = merged.to_string();
                seg.remove(i + 1);
            } else {
                i += 1;
            }
        }
    }
}

/// Greedy longest-match-first segmentation of a single pre-tokenized
/// word. Returns `None` when no match exists at some position (the
/// whole word becomes `[UNK]`).
fn segment_word(word: &str, vocab: &Vocabulary) -> Option<Vec<u32>> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut pos = 0usize;
    while pos < chars.len() {
        let mut found = None;
        for end in (pos + 1..=chars.len()).rev() {
            let body: String = chars[pos..end].iter().collect();
            let candidate = if pos == 0 { body } else { format!("##{body}") };
            if let Some(id) = vocab.id(&candidate) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                pieces.push(id);
                pos = end;
            }
            None => return None,
        }
    }
    Some(pieces)
}

/// Whitespace-split, pre-tokenize, then greedy longest-match encode.
pub fn encode(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids = Vec::new();
    for word in pre_tokenize(text) {
        match segment_word(&word, vocab) {
            Some(pieces) => ids.extend(pieces),
            None => ids.push(UNK_ID),
        }
    }
    ids
}

/// Pieces joined with spaces between words; `##` continuations fused
/// to the previous piece; specials rendered by their bracketed names.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(TokenizerError::IdOutOfRange {
            id,
            size: vocab.size(),
        })?;
        if let Some(body) = token.strip_prefix("##") {
            out.push_str(body);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(token);
        }
    }
    Ok(out)
}

/// vocab.txt: one token per line, LF endings, no trailing blank line.
pub fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<(), TokenizerError> {
    let mut content = String::new();
    for t in vocab.tokens() {
        content.push_str(t);
        content.push('\n');
    }
    std::fs::write(path, content).map_err(|e| TokenizerError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary, TokenizerError> {
    let content = std::fs::read_to_string(path).map_err(|e| TokenizerError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut tokens = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if let Some(_prev) = seen.insert(line.to_string(), lineno) {
            return Err(TokenizerError::DuplicateToken {
                path: path.to_path_buf(),
                line: lineno + 1,
                token: line.to_string(),
            });
        }
        tokens.push(line.to_string());
    }
    Ok(Vocabulary::from_tokens(tokens))
}

/// Partition the tokens whose rank lies in `[rank_lo, rank_hi]`
/// (inclusive) into shared / left-only / right-only, mirroring the
/// origVocab-vs-mathVocab tier comparison.
pub fn compare_vocabularies(
    a: &Vocabulary,
    b: &Vocabulary,
    rank_lo: usize,
    rank_hi: usize,
) -> Result<VocabDiff, TokenizerError> {
    if rank_lo > rank_hi || rank_hi >= a.size().min(b.size()) {
        return Err(TokenizerError::TierOutOfRange {
            lo: rank_lo,
            hi: rank_hi,
            a: a.size(),
            b: b.size(),
        });
    }
    let a_tier: BTreeSet<&str> = a.tokens()[rank_lo..=rank_hi]
        .iter()
        .map(|s| s.as_str())
        .collect();
    let b_tier: BTreeSet<&str> = b.tokens()[rank_lo..=rank_hi]
        .iter()
        .map(|s| s.as_str())
        .collect();
    let collect = |it: std::collections::btree_set::Iter<'_, &str>| -> Vec<String> {
        it.map(|s| s.to_string()).collect()
    };
    Ok(VocabDiff {
        rank_lo,
        rank_hi,
        left_only: a_tier.difference(&b_tier).cloned().map(String::from).collect(),
        right_only: b_tier.difference(&a_tier).cloned().map(String::from).collect(),
        shared: collect(a_tier.intersection(&b_tier).cloned().collect::<BTreeSet<_>>().iter()),
    })
}

/// Average subword pieces emitted per whitespace word.
pub fn fertility<'a>(
    documents: impl IntoIterator<Item = &'a Document>,
    vocab: &Vocabulary,
) -> Result<f64, TokenizerError> {
    let mut words = 0u64;
    let mut pieces = 0u64;
    for doc in documents {
        for word in doc.text.split_whitespace() {
            words += 1;
            pieces += encode(word, vocab).len() as u64;
        }
    }
    if words == 0 {
        return Err(TokenizerError::EmptyFertilityCorpus);
    }
    Ok(pieces as f64 / words as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Document {
        Document {
            id: "t".into(),
            source: "test".into(),
            text: text.into(),
        }
    }

    fn vocab_of(extra: &[&str]) -> Vocabulary {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(tokens)
    }

    #[test]
    fn pre_tokenize_splits_symbols() {
        assert_eq!(
            pre_tokenize("3x+y=z2"),
            vec!["3x", "+", "y", "=", "z2"]
        );
    }

    #[test]
    fn train_single_merge() {
        // "ab" x100: alphabet {a, b, ##b}; only candidate pair (a, ##b).
        let docs: Vec<Document> = (0..100).map(|_| doc("ab")).collect();
        let budget = 5 + 3 + 1;
        let vocab = train_vocabulary(&docs, budget).unwrap();
        assert_eq!(vocab.size(), budget);
        assert!(vocab.id("ab").is_some());
        assert!(vocab.id("a").is_some());
        assert!(vocab.id("b").is_some());
        assert!(vocab.id("##b").is_some());
        assert!(vocab.id("##a").is_none());
    }

    #[test]
    fn train_zero_merge_budget() {
        let docs: Vec<Document> = (0..10).map(|_| doc("ab")).collect();
        let vocab = train_vocabulary(&docs, 5 + 3).unwrap();
        assert_eq!(vocab.size(), 8);
        assert!(vocab.id("ab").is_none());
    }

    #[test]
    fn train_two_merges_matches_simulator() {
        // "aaab" x50: verified against the brute-force simulator in
        // tests/oracles (same sequence asserted here by hand).
        let docs: Vec<Document> = (0..50).map(|_| doc("aaab")).collect();
        // alphabet: a, ##a, b?? -> a, b(initial? no, b never initial)...
        // observed: chars a (initial + continuation), b (continuation only)
        // alphabet = {a, b, ##a, ##b}
        let vocab = train_vocabulary(&docs, 5 + 4 + 2).unwrap();
        let merges: Vec<&str> = vocab.tokens()[9..].iter().map(|s| s.as_str()).collect();
        // Pair counts in (a ##a ##a ##b): (a,##a)=50, (##a,##a)=50, (##a,##b)=50.
        // symbol counts: a=50, ##a=100, ##b=50.
        // scores: (a,##a)=50/5000, (##a,##a)=50/10000, (##a,##b)=50/5000.
        // tie between merged "aa" and "##ab": "##ab" < "aa" lexicographically.
        assert_eq!(merges[0], "##ab");
        // after merge: (a ##a ##ab); pairs (a,##a)=50 score 50/(50*50),
        // (##a,##ab)=50 score 50/(50*50); tie "##aab" vs "aa" -> "##aab".
        assert_eq!(merges[1], "##aab");
    }

    #[test]
    fn train_empty_corpus_errors() {
        let docs: Vec<Document> = vec![];
        assert!(matches!(
            train_vocabulary(&docs, 100).unwrap_err(),
            TokenizerError::EmptyCorpus
        ));
    }

    #[test]
    fn train_budget_below_minimum_errors() {
        let docs = vec![doc("abc")];
        match train_vocabulary(&docs, 6).unwrap_err() {
            TokenizerError::BudgetTooSmall { minimum, .. } => {
                // alphabet: a, b, c, ##b, ##c
                assert_eq!(minimum, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn train_is_deterministic() {
        let docs: Vec<Document> = (0..30)
            .map(|i| doc(if i % 2 == 0 { "abab cd" } else { "cdcd ab" }))
            .collect();
        let a = train_vocabulary(&docs, 30).unwrap();
        let b = train_vocabulary(&docs, 30).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_empty() {
        let vocab = vocab_of(&["a"]);
        assert!(encode("", &vocab).is_empty());
    }

    #[test]
    fn encode_greedy_longest_match() {
        let vocab = vocab_of(&["ab", "a", "b", "##b", "##c"]);
        let ids = encode("abb", &vocab);
        assert_eq!(
            ids,
            vec![vocab.id("ab").unwrap(), vocab.id("##b").unwrap()]
        );
    }

    #[test]
    fn encode_no_match_is_unk() {
        let vocab = vocab_of(&["ab", "a", "b", "##b", "##c"]);
        assert_eq!(encode("q", &vocab), vec![UNK_ID]);
    }

    #[test]
    fn encode_word_with_uncovered_tail_is_single_unk() {
        let vocab = vocab_of(&["ab", "a", "b", "##b", "##c"]);
        // "abq": 'q' has no continuation form, whole word -> [UNK]
        assert_eq!(encode("abq", &vocab), vec![UNK_ID]);
    }

    #[test]
    fn decode_empty() {
        let vocab = vocab_of(&["a"]);
        assert_eq!(decode(&[], &vocab).unwrap(), "");
    }

    #[test]
    fn decode_fuses_continuations() {
        let vocab = vocab_of(&["ab", "a", "b", "##b", "##c"]);
        let ids = vec![vocab.id("ab").unwrap(), vocab.id("##b").unwrap()];
        assert_eq!(decode(&ids, &vocab).unwrap(), "abb");
    }

    #[test]
    fn decode_renders_specials() {
        let vocab = vocab_of(&["a"]);
        let ids = vec![CLS_ID, vocab.id("a").unwrap(), SEP_ID];
        assert_eq!(decode(&ids, &vocab).unwrap(), "[CLS] a [SEP]");
    }

    #[test]
    fn decode_out_of_range_errors() {
        let vocab = vocab_of(&["a"]);
        assert!(matches!(
            decode(&[99], &vocab).unwrap_err(),
            TokenizerError::IdOutOfRange { id: 99, .. }
        ));
    }

    #[test]
    fn vocab_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = vocab_of(&["a", "b", "##b", "ab", "∑"]);
        save_vocab(&vocab, &path).unwrap();
        let loaded = load_vocab(&path).unwrap();
        assert_eq!(vocab, loaded);
        // bit-exact file contract: LF endings, no trailing blank line
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.ends_with("∑\n".as_bytes()));
        assert!(!bytes.ends_with(b"\n\n"));
    }

    #[test]
    fn load_duplicate_token_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "[PAD]\n[UNK]\na\na\n").unwrap();
        match load_vocab(&path).unwrap_err() {
            TokenizerError::DuplicateToken { line, token, .. } => {
                assert_eq!(line, 4);
                assert_eq!(token, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_specials_only_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n").unwrap();
        let vocab = load_vocab(&path).unwrap();
        assert_eq!(vocab.size(), 5);
        for (i, t) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(vocab.id(t), Some(i as u32));
        }
    }

    #[test]
    fn compare_identical_vocabularies() {
        let vocab = vocab_of(&["a", "b", "c", "d"]);
        let diff = compare_vocabularies(&vocab, &vocab, 5, 8).unwrap();
        assert!(diff.left_only.is_empty());
        assert!(diff.right_only.is_empty());
        assert_eq!(diff.shared.len(), 4);
    }

    #[test]
    fn compare_disjoint_vocabularies() {
        let a = vocab_of(&["a", "b", "c"]);
        let b = vocab_of(&["x", "y", "z"]);
        let diff = compare_vocabularies(&a, &b, 5, 7).unwrap();
        assert!(diff.shared.is_empty());
        assert_eq!(diff.left_only.len(), 3);
        assert_eq!(diff.right_only.len(), 3);
    }

    #[test]
    fn compare_tier_width_51() {
        // 51 ranks examined per side for tier [2050, 2100].
        let make = |prefix: &str| {
            let mut tokens: Vec<String> =
                SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
            tokens.extend((0..30_517).map(|i| format!("{prefix}{i}")));
            Vocabulary::from_tokens(tokens)
        };
        let a = make("a");
        let b = make("b");
        assert_eq!(a.size(), 30_522);
        let diff = compare_vocabularies(&a, &b, 2050, 2100).unwrap();
        assert_eq!(diff.left_only.len() + diff.shared.len(), 51);
        assert_eq!(diff.right_only.len() + diff.shared.len(), 51);
    }

    #[test]
    fn compare_tier_out_of_range_errors() {
        let a = vocab_of(&["a"]);
        assert!(matches!(
            compare_vocabularies(&a, &a, 2, 10).unwrap_err(),
            TokenizerError::TierOutOfRange { .. }
        ));
    }

    #[test]
    fn fertility_all_in_vocab() {
        let vocab = vocab_of(&["ab", "cd"]);
        let docs = vec![doc("ab cd ab")];
        assert_eq!(fertility(&docs, &vocab).unwrap(), 1.0);
    }

    #[test]
    fn fertility_two_pieces() {
        let vocab = vocab_of(&["ab", "a", "b", "##b", "##c"]);
        let docs = vec![doc("abb")];
        assert_eq!(fertility(&docs, &vocab).unwrap(), 2.0);
    }

    #[test]
    fn fertility_unk_counts_one_piece() {
        let vocab = vocab_of(&["ab"]);
        let docs = vec![doc("ab q")];
        assert_eq!(fertility(&docs, &vocab).unwrap(), 1.0);
    }

    #[test]
    fn fertility_empty_corpus_errors() {
        let vocab = vocab_of(&["ab"]);
        let docs: Vec<Document> = vec![];
        assert!(fertility(&docs, &vocab).is_err());
    }

    #[test]
    fn training_corpus_chars_are_encodable() {
        let docs = vec![doc("x = 1.5 + y^2"), doc("∑ i^2 quad")];
        let vocab = train_vocabulary(&docs, 60).unwrap();
        for d in &docs {
            for word in d.text.split_whitespace() {
                if word.chars().count() == 1 {
                    assert_ne!(encode(word, &vocab), vec![UNK_ID], "word {word:?}");
                }
            }
        }
    }
}
