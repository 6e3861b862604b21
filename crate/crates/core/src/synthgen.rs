//! Ancestral sampling of drifting synthetic corpora with planted rating links.

use crate::corpus::ingest::RawDocument;
use crate::corpus::timeline::bucketize_with_clock;
use crate::corpus::{Bow, CorpusTimeline, Document, Granularity, SliceClock, Vocabulary};
use crate::error::{DtamError, Result};
use dtam_numcore::graph::sigmoid;
use dtam_numcore::prob::softmax;
use dtam_numcore::Tensor;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Monday 2020-01-06 00:00 UTC; synthetic slice `t` is the `t`-th week after it.
pub const SYNTH_ORIGIN: i64 = 1_578_268_800;
const WEEK: i64 = 7 * 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    /// Linear drift from `-amplitude` to `+amplitude`.
    Trend,
    /// Sinusoid with a period of a third of the horizon.
    Seasonal,
    /// Gaussian bump centered at 60% of the horizon.
    Burst,
    /// Constant zero.
    Stationary,
    /// Gaussian random walk with stddev `amplitude / sqrt(T)` per step.
    RandomWalk,
}

impl fmt::Display for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dynamics::Trend => "trend",
            Dynamics::Seasonal => "seasonal",
            Dynamics::Burst => "burst",
            Dynamics::Stationary => "stationary",
            Dynamics::RandomWalk => "randomwalk",
        })
    }
}

impl FromStr for Dynamics {
    type Err = DtamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trend" => Ok(Dynamics::Trend),
            "seasonal" => Ok(Dynamics::Seasonal),
            "burst" => Ok(Dynamics::Burst),
            "stationary" => Ok(Dynamics::Stationary),
            "randomwalk" => Ok(Dynamics::RandomWalk),
            _ => Err(DtamError::Config(format!("unknown dynamics {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub k: usize,
    pub v: usize,
    pub e: usize,
    pub t: usize,
    pub docs_per_slice: usize,
    pub tokens_per_doc: usize,
    pub dynamics: Vec<Dynamics>,
    /// Rating link weights, one per topic.
    pub rating_weights: Vec<f64>,
    pub rating_noise_std: f64,
    /// Scale of the scripted trajectories.
    pub amplitude: f64,
    /// Stddev of extra Gaussian noise on every scripted `eta_t`.
    pub eta_noise: f64,
    /// Stddev of `zeta` around `eta`.
    pub zeta_std: f64,
    /// Stddev of the topic and word embeddings; larger means peakier topics.
    pub embedding_scale: f64,
    /// When set, topic `k` owns words `k*n..(k+1)*n` with logit
    /// `embedding_scale` and every other word is shared background at logit 0.
    #[serde(default)]
    pub planted_words: Option<usize>,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(k: usize, v: usize, t: usize) -> Self {
        Self {
            k,
            v,
            e: 8,
            t,
            docs_per_slice: 100,
            tokens_per_doc: 50,
            dynamics: vec![Dynamics::Stationary; k],
            rating_weights: vec![0.0; k],
            rating_noise_std: 0.0,
            amplitude: 2.0,
            eta_noise: 0.0,
            zeta_std: 1.0,
            embedding_scale: 1.0,
            planted_words: None,
            seed: 0,
        }
    }

    /// Topic 0 drifts and carries the rating link; the rest are stationary.
    pub fn drift(seed: u64) -> Self {
        let mut c = Self::new(3, 100, 30);
        c.dynamics = vec![Dynamics::Trend, Dynamics::Stationary, Dynamics::Stationary];
        c.rating_weights = vec![4.0, -2.0, -2.0];
        c.rating_noise_std = 0.1;
        c.zeta_std = 0.5;
        c.seed = seed;
        c
    }

    /// Same as [`ScenarioConfig::drift`] with every topic stationary.
    pub fn stationary(seed: u64) -> Self {
        let mut c = Self::drift(seed);
        c.dynamics = vec![Dynamics::Stationary; 3];
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.v == 0 || self.e == 0 || self.t == 0 {
            return Err(DtamError::Config("scenario sizes must be positive".into()));
        }
        if self.docs_per_slice == 0 || self.tokens_per_doc == 0 {
            return Err(DtamError::Config("scenario needs documents and tokens".into()));
        }
        if self.dynamics.len() != self.k || self.rating_weights.len() != self.k {
            return Err(DtamError::Config(format!(
                "scenario has K={} but {} dynamics and {} rating weights",
                self.k,
                self.dynamics.len(),
                self.rating_weights.len()
            )));
        }
        if let Some(n) = self.planted_words {
            if n == 0 || n * self.k > self.v || self.e < self.k {
                return Err(DtamError::Config(format!(
                    "cannot plant {n} words per topic with K={}, V={}, E={}",
                    self.k, self.v, self.e
                )));
            }
        }
        if self.rating_noise_std < 0.0 || self.eta_noise < 0.0 || self.zeta_std < 0.0 {
            return Err(DtamError::Config("scenario stddevs must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocLatent {
    pub id: String,
    pub time_index: usize,
    pub zeta: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Everything drawn while sampling, for oracle checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub eta: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub docs: Vec<DocLatent>,
}

impl Latents {
    pub fn beta_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.beta).expect("rectangular")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("latents serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| DtamError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SampledCorpus {
    pub timeline: CorpusTimeline,
    /// The same documents in the ingestion format.
    pub raw: Vec<RawDocument>,
    pub vocab: Vocabulary,
    pub latents: Latents,
}

pub fn token_name(w: usize) -> String {
    format!("w{w:05}")
}

/// Scripted global trajectory, `T × K`.
pub fn scripted_eta(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let t_max = cfg.t.max(2) as f64 - 1.0;
    let a = cfg.amplitude;
    let mut walk = vec![0.0; cfg.k];
    (0..cfg.t)
        .map(|t| {
            let x = t as f64;
            (0..cfg.k)
                .map(|k| {
                    let base = match cfg.dynamics[k] {
                        Dynamics::Trend => a * (2.0 * x / t_max - 1.0),
                        Dynamics::Seasonal => a * (2.0 * std::f64::consts::PI * x / (cfg.t as f64 / 3.0).max(2.0)).sin(),
                        Dynamics::Burst => {
                            let c = 0.6 * t_max;
                            let w = (cfg.t as f64 / 10.0).max(1.0);
                            a * (-(x - c).powi(2) / (2.0 * w * w)).exp()
                        }
                        Dynamics::Stationary => 0.0,
                        Dynamics::RandomWalk => {
                            if t > 0 {
                                walk[k] += a / (cfg.t as f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
                            }
                            walk[k]
                        }
                    };
                    base + cfg.eta_noise * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        })
        .collect()
}

fn mix(seed: u64, t: u64) -> u64 {
    let mut x = seed ^ (t + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 29;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Samples a corpus: scripted `eta`, `zeta ~ N(eta, zeta_std²)`,
/// `theta = softmax(zeta)`, a topic per token and a word from that topic.
/// Ratings are planted with the scenario's link weights.
pub fn sample_scenario(cfg: &ScenarioConfig) -> Result<SampledCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eta = scripted_eta(cfg, &mut rng);
    let normal = |rng: &mut ChaCha8Rng, rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| {
                (0..cfg.e)
                    .map(|_| cfg.embedding_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };
    let (alpha, rho) = match cfg.planted_words {
        None => (normal(&mut rng, cfg.k), normal(&mut rng, cfg.v)),
        Some(n) => {
            let unit = |i: usize, scale: f64| (0..cfg.e).map(|j| if j == i { scale } else { 0.0 }).collect::<Vec<_>>();
            let alpha = (0..cfg.k).map(|k| unit(k, cfg.embedding_scale)).collect();
            let rho = (0..cfg.v)
                .map(|w| if w < n * cfg.k { unit(w / n, 1.0) } else { vec![0.0; cfg.e] })
                .collect();
            (alpha, rho)
        }
    };
    let beta: Vec<Vec<f64>> = alpha
        .iter()
        .map(|a| {
            let logits: Vec<f64> = rho.iter().map(|r| a.iter().zip(r).map(|(x, y)| x * y).sum()).collect();
            softmax(&logits)
        })
        .collect();
    let word_dists: Vec<WeightedIndex<f64>> = beta
        .iter()
        .map(|b| WeightedIndex::new(b).expect("valid topic distribution"))
        .collect();

    let per_slice: Vec<Vec<(Document, DocLatent)>> = (0..cfg.t)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, t as u64));
            (0..cfg.docs_per_slice)
                .map(|i| {
                    let id = format!("s{t}-d{i}");
                    let zeta: Vec<f64> = eta[t]
                        .iter()
                        .map(|m| m + cfg.zeta_std * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let theta = softmax(&zeta);
                    let topics = WeightedIndex::new(&theta).expect("valid proportions");
                    let words: Vec<usize> = (0..cfg.tokens_per_doc)
                        .map(|_| word_dists[topics.sample(&mut rng)].sample(&mut rng))
                        .collect();
                    let doc = Document {
                        id: id.clone(),
                        token_ids: words.clone(),
                        bow: Bow::from_ids(&words),
                        tm_ids: words,
                        time_index: t,
                        rating: 0.0,
                        timestamp: SYNTH_ORIGIN + t as i64 * WEEK + 60 * i as i64,
                    };
                    (
                        doc,
                        DocLatent {
                            id,
                            time_index: t,
                            zeta,
                            theta,
                        },
                    )
                })
                .collect()
        })
        .collect();
    let (docs, doc_latents): (Vec<Document>, Vec<DocLatent>) = per_slice.into_iter().flatten().unzip();
    let latents = Latents {
        eta,
        alpha,
        rho,
        beta,
        docs: doc_latents,
    };
    let clock = SliceClock::anchored(Granularity::Weekly, SYNTH_ORIGIN);
    let timeline = bucketize_with_clock(docs, clock, cfg.t, None, cfg.seed, cfg.v)?;
    let timeline = plant_ratings(
        &timeline,
        &latents,
        &cfg.rating_weights,
        cfg.rating_noise_std,
        mix(cfg.seed, u64::MAX - 1),
    )?;
    let tokens: Vec<String> = (0..cfg.v).map(token_name).collect();
    let mut freq = vec![0usize; cfg.v];
    for d in timeline.documents() {
        let mut seen = std::collections::BTreeSet::new();
        for &w in &d.tm_ids {
            if seen.insert(w) {
                freq[w] += 1;
            }
        }
    }
    let vocab = Vocabulary::from_tokens(tokens, freq, None)?;
    let raw = timeline
        .documents()
        .map(|d| RawDocument {
            id: d.id.clone(),
            text: d.tm_ids.iter().map(|&w| token_name(w)).collect::<Vec<_>>().join(" "),
            timestamp: d.timestamp,
            label: d.rating,
            author: None,
        })
        .collect();
    Ok(SampledCorpus {
        timeline,
        raw,
        vocab,
        latents,
    })
}

/// `r = logistic(vᵀθ + ε)` with `ε ~ N(0, noise_std²)`, clipped to [0, 1].
pub fn plant_ratings(
    timeline: &CorpusTimeline,
    latents: &Latents,
    v: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<CorpusTimeline> {
    let by_id: std::collections::HashMap<&str, &DocLatent> =
        latents.docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = None;
    let out = timeline.map_documents(|d| {
        let Some(l) = by_id.get(d.id.as_str()) else {
            err.get_or_insert_with(|| DtamError::Data(format!("no latents for document {}", d.id)));
            return;
        };
        if l.theta.len() != v.len() {
            err.get_or_insert_with(|| DtamError::Config("rating weights do not match K".into()));
            return;
        }
        let eps = noise_std * rng.sample::<f64, _>(StandardNormal);
        let score: f64 = v.iter().zip(&l.theta).map(|(a, b)| a * b).sum::<f64>() + eps;
        d.rating = sigmoid(score).clamp(0.0, 1.0);
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ScenarioConfig {
        let mut c = ScenarioConfig::new(2, 12, 6);
        c.docs_per_slice = 20;
        c.tokens_per_doc = 15;
        c.dynamics = vec![Dynamics::Trend, Dynamics::Seasonal];
        c.rating_weights = vec![3.0, -1.0];
        c.seed = seed;
        c
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = sample_scenario(&small(4)).unwrap();
        let b = sample_scenario(&small(4)).unwrap();
        assert_eq!(a.latents, b.latents);
        assert_eq!(a.raw, b.raw);
        let c = sample_scenario(&small(5)).unwrap();
        assert_ne!(a.latents, c.latents);
    }

    #[test]
    fn slice_counts_sum_document_counts() {
        let s = sample_scenario(&small(1)).unwrap();
        s.timeline.check_invariants().unwrap();
        assert_eq!(s.timeline.num_slices(), 6);
        assert_eq!(s.timeline.num_docs(), 120);
        for (k, slice) in s.timeline.slices().iter().enumerate() {
            let mut w = vec![0.0; 12];
            for d in slice {
                for (i, c) in d.bow.to_dense(12).iter().enumerate() {
                    w[i] += c;
                }
            }
            assert_eq!(&w, &s.timeline.slice_bows()[k]);
        }
    }

    #[test]
    fn trajectories_follow_their_scripts() {
        let mut c = small(0);
        c.k = 4;
        c.t = 11;
        c.dynamics = vec![Dynamics::Trend, Dynamics::Seasonal, Dynamics::Burst, Dynamics::Stationary];
        let eta = scripted_eta(&c, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(eta[0][0], -2.0);
        assert_eq!(eta[10][0], 2.0);
        assert!(eta.iter().all(|r| r[3] == 0.0));
        assert_eq!(eta[6][2], 2.0);
        assert!(eta.iter().all(|r| r[1].abs() <= 2.0));
    }

    #[test]
    fn zero_link_and_noise_give_half() {
        let mut c = small(2);
        c.rating_weights = vec![0.0, 0.0];
        let s = sample_scenario(&c).unwrap();
        assert!(s.timeline.documents().all(|d| d.rating == 0.5));
    }

    #[test]
    fn noiseless_ratings_are_a_function_of_theta() {
        let s = sample_scenario(&small(3)).unwrap();
        let lat: std::collections::HashMap<_, _> = s.latents.docs.iter().map(|d| (d.id.clone(), d)).collect();
        for d in s.timeline.documents() {
            let th = &lat[&d.id].theta;
            assert_eq!(d.rating, sigmoid(3.0 * th[0] - th[1]));
        }
    }

    #[test]
    fn drifting_linked_topic_shifts_mean_rating() {
        let mut c = ScenarioConfig::drift(1);
        c.docs_per_slice = 200;
        c.tokens_per_doc = 5;
        c.t = 6;
        let s = sample_scenario(&c).unwrap();
        let means: Vec<f64> = s
            .timeline
            .slices()
            .iter()
            .map(|sl| sl.iter().map(|d| d.rating).sum::<f64>() / sl.len() as f64)
            .collect();
        for w in means.windows(2) {
            assert!(w[1] > w[0], "{means:?}");
        }
    }

    #[test]
    fn single_topic_unigrams_match_beta() {
        let mut c = ScenarioConfig::new(1, 6, 1);
        c.docs_per_slice = 400;
        c.tokens_per_doc = 50;
        let s = sample_scenario(&c).unwrap();
        let w = &s.timeline.slice_bows()[0];
        let n: f64 = w.iter().sum();
        for (count, p) in w.iter().zip(&s.latents.beta[0]) {
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((count - n * p).abs() < 4.0 * sd + 1.0, "{count} vs {}", n * p);
        }
    }

    #[test]
    fn stationary_low_noise_theta_is_constant_over_time() {
        // Two-sample Kolmogorov-Smirnov on theta_0 between the first and last slice.
        let mut c = ScenarioConfig::new(2, 8, 5);
        c.docs_per_slice = 300;
        c.tokens_per_doc = 1;
        c.seed = 9;
        let s = sample_scenario(&c).unwrap();
        let slice_theta = |t: usize| {
            let mut v: Vec<f64> = s
                .latents
                .docs
                .iter()
                .filter(|d| d.time_index == t)
                .map(|d| d.theta[0])
                .collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (slice_theta(0), slice_theta(4));
        let cdf = |v: &[f64], x: f64| v.partition_point(|&y| y <= x) as f64 / v.len() as f64;
        let d = a.iter().chain(&b).map(|&x| (cdf(&a, x) - cdf(&b, x)).abs()).fold(0.0, f64::max);
        // Critical value at the 1% level for two samples of 300.
        let crit = 1.628 * (2.0 / 300.0f64).sqrt();
        assert!(d < crit, "{d} >= {crit}");
    }

    #[test]
    fn raw_documents_round_trip_through_ingestion() {
        let s = sample_scenario(&small(6)).unwrap();
        let mut buf = Vec::new();
        crate::corpus::ingest::write_jsonl(&mut buf, &s.raw).unwrap();
        let keep_all = crate::corpus::ingest::IngestFilters {
            min_words: 0,
            ..Default::default()
        };
        let back = crate::corpus::ingest::read_jsonl(&buf[..], &keep_all).unwrap();
        assert_eq!(back, s.raw);
        let lat = Latents::from_json(&s.latents.to_json()).unwrap();
        assert_eq!(lat, s.latents);
        let clock = SliceClock::anchored(Granularity::Weekly, s.raw[0].timestamp);
        assert!(s.raw.iter().all(|r| clock.index(r.timestamp) == r.id[1..r.id.find('-').unwrap()].parse::<usize>().unwrap()));
    }

    #[test]
    fn planted_words_give_block_topics() {
        let mut c = ScenarioConfig::new(3, 20, 2);
        c.e = 4;
        c.embedding_scale = 2.0;
        c.planted_words = Some(5);
        let s = sample_scenario(&c).unwrap();
        let hot = 2.0f64.exp();
        let z = 5.0 * hot + 15.0;
        for (k, row) in s.latents.beta.iter().enumerate() {
            for (w, p) in row.iter().enumerate() {
                let want = if w / 5 == k { hot / z } else { 1.0 / z };
                assert!((p - want).abs() < 1e-12, "k={k} w={w}");
            }
        }
        c.planted_words = Some(7);
        assert!(sample_scenario(&c).is_err());
        c.planted_words = Some(0);
        assert!(sample_scenario(&c).is_err());
    }
}
