//! Vocabularies and bag-of-words encoding.

use crate::error::{DtamError, Result};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

/// Order in which surviving tokens compete for the `max_size` slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrequencyRank {
    /// Most frequent first.
    Descending,
    /// Least frequent first.
    Ascending,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocabConfig {
    pub min_df: usize,
    pub max_size: usize,
    pub rank: FrequencyRank,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_df: 5,
            max_size: 5000,
            rank: FrequencyRank::Descending,
        }
    }
}

/// Dense token ids `0..V` with a per-token frequency column.
///
/// For the topic-model vocabulary the column is document frequency; for the
/// language-model vocabulary it is the raw token count and id 0 is `<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freq: Vec<usize>,
    index: HashMap<String, usize>,
    unk: Option<usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>, freq: Vec<usize>, unk: Option<usize>) -> Result<Self> {
        if tokens.len() != freq.len() {
            return Err(DtamError::Data("token and frequency columns differ in length".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DtamError::Data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            freq,
            index,
            unk,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id with `<unk>` fallback for vocabularies that have one.
    pub fn id_or_unk(&self, token: &str) -> Option<usize> {
        self.id(token).or(self.unk)
    }

    pub fn unk(&self) -> Option<usize> {
        self.unk
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, id: usize) -> usize {
        self.freq[id]
    }

    /// `id\ttoken\tfrequency` per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (t, f)) in self.tokens.iter().zip(&self.freq).enumerate() {
            writeln!(out, "{i}\t{t}\t{f}").expect("string write");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freq = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| DtamError::Parse {
                line: n + 1,
                message: m.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(err("expected id, token, frequency"));
            }
            let id: usize = cols[0].parse().map_err(|_| err("bad id"))?;
            if id != tokens.len() {
                return Err(err("ids must be dense and ascending"));
            }
            tokens.push(cols[1].to_string());
            freq.push(cols[2].parse().map_err(|_| err("bad frequency"))?);
        }
        let unk = tokens.iter().position(|t| t == UNK_TOKEN);
        Self::from_tokens(tokens, freq, unk)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the TSV serialization.
    pub fn content_hash(&self) -> String {
        dtam_numcore::blob::sha256_hex(self.to_tsv().as_bytes())
    }
}

/// Topic-model vocabulary: tokens in at least `min_df` documents, capped at
/// `max_size` by frequency rank with lexicographic tie-breaks. Ids follow rank.
pub fn build_vocabulary<S: AsRef<str>>(docs: &[Vec<S>], config: &VocabConfig) -> Result<Vocabulary> {
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        let unique: HashSet<&str> = doc.iter().map(AsRef::as_ref).collect();
        for t in unique {
            *df.entry(t).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = df.into_iter().filter(|&(_, n)| n >= config.min_df).collect();
    if kept.is_empty() {
        return Err(DtamError::Data(format!(
            "no token appears in at least {} documents",
            config.min_df
        )));
    }
    kept.sort_by(|a, b| {
        let by_freq = match config.rank {
            FrequencyRank::Descending => b.1.cmp(&a.1),
            FrequencyRank::Ascending => a.1.cmp(&b.1),
        };
        by_freq.then_with(|| a.0.cmp(b.0))
    });
    kept.truncate(config.max_size);
    let (tokens, freq) = kept.into_iter().map(|(t, n)| (t.to_string(), n)).unzip();
    Vocabulary::from_tokens(tokens, freq, None)
}

/// Language-model vocabulary: `<unk>` at id 0, then every token occurring at
/// least `min_count` times, most frequent first.
pub fn build_lm_vocabulary<S: AsRef<str>>(docs: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        for t in doc {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, n)| n >= min_count && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![UNK_TOKEN.to_string()];
    let mut freq = vec![0];
    for (t, n) in kept {
        tokens.push(t.to_string());
        freq.push(n);
    }
    Vocabulary::from_tokens(tokens, freq, Some(0))
}

/// Sparse word counts, sorted by id.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Bow {
    entries: Vec<(usize, u32)>,
}

impl Bow {
    pub fn from_ids(ids: &[usize]) -> Self {
        let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
        for &i in ids {
            *counts.entry(i).or_default() += 1;
        }
        Self {
            entries: counts.into_iter().collect(),
        }
    }

    pub fn from_dense(counts: &[f64]) -> Self {
        Self {
            entries: counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0.0)
                .map(|(i, &c)| (i, c.round() as u32))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size];
        for &(i, c) in &self.entries {
            out[i] += c as f64;
        }
        out
    }

    pub fn add(&self, other: &Bow) -> Bow {
        let mut counts: BTreeMap<usize, u32> = self.entries.iter().copied().collect();
        for &(i, c) in &other.entries {
            *counts.entry(i).or_default() += c;
        }
        Bow {
            entries: counts.into_iter().collect(),
        }
    }

    pub fn max_id(&self) -> Option<usize> {
        self.entries.last().map(|&(i, _)| i)
    }
}

/// In-vocabulary ids of `tokens`, in order.
pub fn vocab_ids<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vec<usize> {
    tokens.iter().filter_map(|t| vocab.id(t.as_ref())).collect()
}

/// Counts of in-vocabulary tokens; unknown tokens are skipped.
pub fn bow_encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Bow {
    Bow::from_ids(&vocab_ids(tokens, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(
            tokens.iter().map(|t| t.to_string()).collect(),
            vec![1; tokens.len()],
            None,
        )
        .unwrap()
    }

    fn docs_with(df: &[(&str, usize)], n_docs: usize) -> Vec<Vec<String>> {
        (0..n_docs)
            .map(|d| {
                df.iter()
                    .filter(|(_, n)| d < *n)
                    .map(|(t, _)| t.to_string())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn rare_tokens_only_is_an_error() {
        let docs: Vec<Vec<String>> = (0..10).map(|i| vec![format!("t{i}")]).collect();
        assert!(build_vocabulary(&docs, &VocabConfig::default()).is_err());
    }

    #[test]
    fn min_df_and_max_size() {
        let docs = docs_with(&[("a", 10), ("b", 6), ("c", 2)], 10);
        let cfg = VocabConfig {
            min_df: 5,
            max_size: 2,
            rank: FrequencyRank::Descending,
        };
        let v = build_vocabulary(&docs, &cfg).unwrap();
        assert_eq!(v.tokens(), &["a", "b"]);
        assert_eq!((v.frequency(0), v.frequency(1)), (10, 6));
        let cfg1 = VocabConfig { max_size: 1, ..cfg.clone() };
        assert_eq!(build_vocabulary(&docs, &cfg1).unwrap().tokens(), &["a"]);
        let asc = VocabConfig {
            max_size: 1,
            rank: FrequencyRank::Ascending,
            ..cfg
        };
        assert_eq!(build_vocabulary(&docs, &asc).unwrap().tokens(), &["b"]);
    }

    #[test]
    fn ties_are_lexicographic() {
        let docs = docs_with(&[("zeta", 5), ("alpha", 5), ("mid", 5)], 5);
        let v = build_vocabulary(&docs, &VocabConfig::default()).unwrap();
        assert_eq!(v.tokens(), &["alpha", "mid", "zeta"]);
    }

    #[test]
    fn fixture_matches_brute_force_recount() {
        let words = ["stock", "moon", "buy", "sell", "hold", "gme", "call", "put", "yolo"];
        let docs: Vec<Vec<String>> = (0..20)
            .map(|d| {
                (0..12)
                    .map(|k| words[(d * 7 + k * k * 3 + k) % (3 + d % 7)].to_string())
                    .collect()
            })
            .collect();
        let cfg = VocabConfig {
            min_df: 5,
            max_size: 5000,
            rank: FrequencyRank::Descending,
        };
        let v = build_vocabulary(&docs, &cfg).unwrap();
        for w in words {
            let df = docs.iter().filter(|d| d.iter().any(|t| t == w)).count();
            match v.id(w) {
                Some(id) => {
                    assert!(df >= 5);
                    assert_eq!(v.frequency(id), df);
                }
                None => assert!(df < 5, "{w} has df {df}"),
            }
        }
    }

    #[test]
    fn lm_vocab_has_unk_first() {
        let docs = vec![vec!["a", "a", "b", "c", "c", "c"]];
        let v = build_lm_vocabulary(&docs, 2).unwrap();
        assert_eq!(v.tokens(), &[UNK_TOKEN, "c", "a"]);
        assert_eq!(v.id_or_unk("b"), Some(0));
    }

    #[test]
    fn tsv_roundtrip_and_hash() {
        let docs = docs_with(&[("a", 10), ("b", 6)], 10);
        let v = build_vocabulary(&docs, &VocabConfig::default()).unwrap();
        let back = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        assert!(Vocabulary::from_tsv("1\ta\t3\n").is_err());
    }

    #[test]
    fn bow_examples() {
        let v = vocab(&["a", "b"]);
        assert!(bow_encode(&["x", "y"], &v).is_empty());
        assert_eq!(bow_encode(&["a", "b", "a"], &v).to_dense(2), vec![2.0, 1.0]);
        assert_eq!(bow_encode(&["b", "a", "a"], &v), bow_encode(&["a", "b", "a"], &v));
    }

    proptest! {
        #[test]
        fn bow_is_permutation_invariant_and_additive(
            a in prop::collection::vec(0usize..8, 0..30),
            b in prop::collection::vec(0usize..8, 0..30),
        ) {
            let v = vocab(&["t0", "t1", "t2", "t3", "t4"]);
            let ta: Vec<String> = a.iter().map(|i| format!("t{i}")).collect();
            let tb: Vec<String> = b.iter().map(|i| format!("t{i}")).collect();
            let mut rev = ta.clone();
            rev.reverse();
            prop_assert_eq!(bow_encode(&ta, &v), bow_encode(&rev, &v));
            let joined: Vec<String> = ta.iter().chain(&tb).cloned().collect();
            prop_assert_eq!(bow_encode(&joined, &v), bow_encode(&ta, &v).add(&bow_encode(&tb, &v)));
            let in_vocab = ta.iter().filter(|t| v.id(t).is_some()).count() as u64;
            prop_assert_eq!(bow_encode(&ta, &v).total(), in_vocab);
        }
    }
}
