#![allow(dead_code)]

use dtam::corpus::{random_split, temporal_split, Bow, Document, SplitRatios};
use dtam::forecast::{predict_future, ForecastConfig, RolloutMode};
use dtam::metrics::r2;
use dtam::model::{HeadKind, ModelConfig};
use dtam::synthgen::{sample_scenario, ScenarioConfig};
use dtam::trainer::{train, TrainConfig};
use dtam_numcore::nn::{Activation, CellKind};
use dtam_numcore::prob::softmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Slices held out at the end of a synthetic timeline.
pub const HELD_OUT: usize = 10;

/// Small architecture for desk-scale synthetic runs.
pub fn small_model(k: usize, v: usize, lm: usize) -> ModelConfig {
    let mut c = ModelConfig::new(HeadKind::Attention, k, v, lm);
    c.dtm.e = 8;
    c.dtm.encoder_hidden = vec![32];
    c.dtm.transition_hidden = vec![16];
    c.dtm.decoder_hidden = vec![];
    c.dtm.activation = Activation::Tanh;
    c.dtm.dropout = 0.0;
    c.dtm.cell = CellKind::Gru;
    c.dtm.rnn_layers = 1;
    c.dtm.rnn_hidden = 16;
    c.tam.lm_dim = 8;
    c.tam.word_hidden = 8;
    c.tam.query_hidden = vec![];
    c.tam.regressor_hidden = vec![16];
    c.tam.activation = Activation::Tanh;
    c.tam.dropout = 0.0;
    c
}

/// Every width at most 8.
pub fn toy_model(k: usize, v: usize, lm: usize) -> ModelConfig {
    let mut c = small_model(k, v, lm);
    c.dtm.e = 6;
    c.dtm.encoder_hidden = vec![8];
    c.dtm.transition_hidden = vec![5];
    c.dtm.rnn_hidden = 8;
    c.tam.lm_dim = 6;
    c.tam.word_hidden = 7;
    c.tam.regressor_hidden = vec![8];
    c
}

pub fn drift_train_config(k: usize, v: usize, seed: u64, static_topics: bool) -> TrainConfig {
    let mut m = small_model(k, v, v);
    m.static_topics = static_topics;
    m.seed = seed;
    m.tam.alpha_y = 1000.0;
    let mut cfg = TrainConfig::new(m);
    cfg.seed = seed;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 32;
    cfg.max_epochs = 40;
    cfg.patience = 8;
    cfg.deterministic = true;
    cfg
}

pub struct DriftRun {
    pub r2_dynamic: f64,
    pub r2_static: f64,
}

/// Trains the dynamic and the collapsed model on all but the last
/// `HELD_OUT` slices and scores R² on those.
pub fn drift_run(scenario: &ScenarioConfig) -> DriftRun {
    let s = sample_scenario(scenario).unwrap();
    let (history, future) = temporal_split(&s.timeline, HELD_OUT).unwrap();
    let ratios = SplitRatios {
        train: 0.9,
        val: 0.1,
        test: 0.0,
    };
    let split = random_split(&history, ratios, scenario.seed).unwrap();
    let val: Vec<&Document> = split.val.documents().collect();
    let future_docs: Vec<&Document> = future.documents().collect();
    let truth: Vec<f64> = future_docs.iter().map(|d| d.rating).collect();
    let score = |static_topics: bool| {
        let cfg = drift_train_config(scenario.k, scenario.v, scenario.seed, static_topics);
        let out = train(&cfg, &split.train, &val).unwrap();
        let h = out.model.history(&split.train);
        let fc = ForecastConfig {
            n_samples: 32,
            mode: RolloutMode::Mean,
            seed: scenario.seed,
            ..ForecastConfig::default()
        };
        let preds = predict_future(&out.model, &out.params, &h, &future_docs, &fc).unwrap();
        let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        r2(&means, &truth).unwrap()
    };
    DriftRun {
        r2_dynamic: score(false),
        r2_static: score(true),
    }
}

/// R² on the held-out slices of a predictor that knows the generator
/// exactly and computes the posterior mean rating from each document's
/// words, once with the true global state of its slice and once with the
/// state of a uniformly chosen training slice.
pub fn oracle_run(scenario: &ScenarioConfig, samples: usize) -> DriftRun {
    let s = sample_scenario(scenario).unwrap();
    let (beta, eta) = (&s.latents.beta, &s.latents.eta);
    let cutoff = scenario.t - HELD_OUT;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let posterior_rating = |bow: &Bow, prior: &mut dyn FnMut(&mut ChaCha8Rng) -> usize, rng: &mut ChaCha8Rng| {
        let mut logw = Vec::with_capacity(samples);
        let mut rating = Vec::with_capacity(samples);
        for _ in 0..samples {
            let t = prior(rng);
            let zeta: Vec<f64> = eta[t]
                .iter()
                .map(|m| m + scenario.zeta_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let th = softmax(&zeta);
            let ll: f64 = bow
                .entries()
                .iter()
                .map(|&(w, c)| c as f64 * (0..scenario.k).map(|k| th[k] * beta[k][w]).sum::<f64>().ln())
                .sum();
            logw.push(ll);
            let score: f64 = scenario.rating_weights.iter().zip(&th).map(|(a, b)| a * b).sum();
            rating.push(1.0 / (1.0 + (-score).exp()));
        }
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|x| (x - m).exp()).collect();
        w.iter().zip(&rating).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()
    };
    let future: Vec<&Document> = s.timeline.documents().filter(|d| d.time_index >= cutoff).collect();
    let truth: Vec<f64> = future.iter().map(|d| d.rating).collect();
    let dynamic: Vec<f64> = future
        .iter()
        .map(|d| posterior_rating(&d.bow, &mut |_| d.time_index, &mut rng))
        .collect();
    let collapsed: Vec<f64> = future
        .iter()
        .map(|d| posterior_rating(&d.bow, &mut |r| r.random_range(0..cutoff), &mut rng))
        .collect();
    DriftRun {
        r2_dynamic: r2(&dynamic, &truth).unwrap(),
        r2_static: r2(&collapsed, &truth).unwrap(),
    }
}
