//! Raw posts to causally split timelines.

use super::ingest::RawDocument;
use super::labels::{normalize_labels_fit_on, LabelScaler, DEFAULT_LABEL_CAP};
use super::split::temporal_split;
use super::timeline::{bucketize_with_clock, CorpusTimeline, Document, Granularity, SliceClock};
use super::tokenize::{tokenize_with, Lemmatizer, NoopLemmatizer};
use super::vocab::{build_lm_vocabulary, build_vocabulary, Bow, VocabConfig, Vocabulary};
use crate::error::{DtamError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Clone, Debug)]
pub struct PrepareConfig {
    pub granularity: Granularity,
    pub subsample_per_slice: Option<usize>,
    pub n_prediction: usize,
    pub vocab: VocabConfig,
    pub lm_min_count: usize,
    pub max_len: usize,
    pub label_cap: f64,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            granularity: Granularity::Weekly,
            subsample_per_slice: None,
            n_prediction: 20,
            vocab: VocabConfig::default(),
            lm_min_count: 2,
            max_len: 256,
            label_cap: DEFAULT_LABEL_CAP,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub tm_vocab: Vocabulary,
    pub lm_vocab: Vocabulary,
    pub scaler: LabelScaler,
    pub up_to_date: CorpusTimeline,
    pub prediction: CorpusTimeline,
    pub warnings: Vec<String>,
}

/// Encodes tokens against both vocabularies.
pub fn encode_document(
    id: String,
    tokens: &[String],
    timestamp: i64,
    rating: f64,
    tm_vocab: &Vocabulary,
    lm_vocab: &Vocabulary,
    max_len: usize,
) -> Document {
    let tm_ids: Vec<usize> = tokens.iter().filter_map(|t| tm_vocab.id(t)).collect();
    let token_ids = tokens
        .iter()
        .take(max_len)
        .filter_map(|t| lm_vocab.id_or_unk(t))
        .collect();
    Document {
        id,
        token_ids,
        bow: Bow::from_ids(&tm_ids),
        tm_ids,
        time_index: 0,
        rating,
        timestamp,
    }
}

/// Tokenizes, slices, fits vocabularies and the label scaler on the
/// up-to-date slices only, encodes every document and splits off the last
/// `n_prediction` slices.
pub fn prepare_corpus(raw: Vec<RawDocument>, config: &PrepareConfig) -> Result<PreparedCorpus> {
    prepare_corpus_with(raw, config, &NoopLemmatizer)
}

pub fn prepare_corpus_with(
    raw: Vec<RawDocument>,
    config: &PrepareConfig,
    lemmatizer: &dyn Lemmatizer,
) -> Result<PreparedCorpus> {
    let earliest = raw
        .iter()
        .map(|d| d.timestamp)
        .min()
        .ok_or_else(|| DtamError::Data("no documents".into()))?;
    let clock = SliceClock::anchored(config.granularity, earliest);
    let latest = raw.iter().map(|d| d.timestamp).max().expect("nonempty");
    let t = clock.index(latest) + 1;
    if t <= config.n_prediction {
        return Err(DtamError::Data(format!(
            "corpus spans {t} slices; need more than {} for the prediction split",
            config.n_prediction
        )));
    }
    let cut = t - config.n_prediction;

    let mut by_slice: Vec<Vec<RawDocument>> = vec![Vec::new(); t];
    for d in raw {
        by_slice[clock.index(d.timestamp)].push(d);
    }
    if let Some(cap) = config.subsample_per_slice {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for s in &mut by_slice {
            if s.len() > cap {
                let mut keep = rand::seq::index::sample(&mut rng, s.len(), cap).into_vec();
                keep.sort_unstable();
                let old = std::mem::take(s);
                let mut old: Vec<Option<RawDocument>> = old.into_iter().map(Some).collect();
                *s = keep.into_iter().map(|i| old[i].take().expect("distinct")).collect();
            }
        }
    }
    let raw: Vec<RawDocument> = by_slice.into_iter().flatten().collect();
    let (raw, scaler) =
        normalize_labels_fit_on(raw, config.label_cap, |d| clock.index(d.timestamp) < cut)?;

    let tokens: Vec<Vec<String>> = raw.par_iter().map(|d| tokenize_with(&d.text, lemmatizer)).collect();
    let history: Vec<Vec<String>> = raw
        .iter()
        .zip(&tokens)
        .filter(|(d, _)| clock.index(d.timestamp) < cut)
        .map(|(_, t)| t.clone())
        .collect();
    let tm_vocab = build_vocabulary(&history, &config.vocab)?;
    let lm_vocab = build_lm_vocabulary(&history, config.lm_min_count)?;

    let mut warnings = Vec::new();
    let mut docs = Vec::with_capacity(raw.len());
    for (d, toks) in raw.into_iter().zip(&tokens) {
        if toks.is_empty() {
            warnings.push(format!("document {} has no tokens after cleaning; dropped", d.id));
            continue;
        }
        docs.push(encode_document(
            d.id,
            toks,
            d.timestamp,
            d.label,
            &tm_vocab,
            &lm_vocab,
            config.max_len,
        ));
    }
    let timeline = bucketize_with_clock(docs, clock, t, None, config.seed, tm_vocab.len())?;
    let (up_to_date, prediction) = temporal_split(&timeline, config.n_prediction)?;
    Ok(PreparedCorpus {
        tm_vocab,
        lm_vocab,
        scaler,
        up_to_date,
        prediction,
        warnings,
    })
}
