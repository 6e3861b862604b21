//! Optimization loop, early stopping and grid search.

use crate::corpus::{CorpusTimeline, Document};
use crate::error::{DtamError, Result};
use crate::model::{History, Model, ModelConfig};
use crate::tam::rmse;
use dtam_numcore::optim::{clip_global_norm, Optimizer, OptimizerKind};
use dtam_numcore::prob::Noise;
use dtam_numcore::{Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::{self, Write as _};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    /// Linear KL warm-up length in epochs; 0 disables it.
    pub kl_warmup_epochs: usize,
    /// Seeds shuffling, dropout, reparameterization noise and initialization.
    pub seed: u64,
    /// Records zero wall time so repeated runs give identical histories.
    pub deterministic: bool,
}

fn parse_optimizer(v: &str) -> Result<OptimizerKind> {
    match v.trim() {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(DtamError::Config(format!("optimizer must be adam or sgd, got {v:?}"))),
    }
}

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| DtamError::Config(format!("bad value {v:?} for {key}")))
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        let seed = model.seed;
        Self {
            model,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            optimizer: OptimizerKind::Adam,
            clip_norm: 5.0,
            kl_warmup_epochs: 0,
            seed,
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DtamError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(DtamError::Config("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(DtamError::Config("patience must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(DtamError::Config("clip_norm must be positive".into()));
        }
        self.model.validate()
    }

    /// Sets a training key, or forwards to the model configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "optimizer" => self.optimizer = parse_optimizer(value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "kl_warmup_epochs" => self.kl_warmup_epochs = parse_num(key, value)?,
            "deterministic" => self.deterministic = parse_num(key, value)?,
            "seed" => {
                self.seed = parse_num(key, value)?;
                self.model.seed = self.seed;
            }
            "k" => {
                // Latent sizes and the delta defaults follow K unless set afterwards.
                let k: usize = parse_num(key, value)?;
                let d = crate::dtm::default_delta(k);
                self.model.dtm.k = k;
                self.model.dtm.dim_eta = k;
                self.model.dtm.dim_zeta = k;
                self.model.dtm.delta_tr = d;
                self.model.tam.delta_att = d;
                self.model.dim_xi = k;
                self.model.delta_xi = d;
            }
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let mut kv = vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("optimizer", optimizer_name(self.optimizer).to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("kl_warmup_epochs", self.kl_warmup_epochs.to_string()),
            ("deterministic", self.deterministic.to_string()),
        ];
        kv.extend(self.model.to_kv());
        kv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-document reconstruction log-likelihood.
    pub recon: f64,
    /// Mean per-document local KL.
    pub kl_local: f64,
    /// Mean over batches of the global KL.
    pub kl_global: f64,
    /// Mean over batches of the rating RMSE.
    pub reg_loss: f64,
    /// Training objective after the epoch, in evaluation mode with fixed noise.
    pub loss: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,recon,kl_local,kl_global,reg_loss,val_rmse,seconds\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.epoch, e.recon, e.kl_local, e.kl_global, e.reg_loss, e.val_rmse, e.seconds
            )
            .expect("string write");
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the best validation epoch.
    pub params: ParamStore,
    pub history: TrainHistory,
    pub best_val_rmse: f64,
    /// Epoch that produced `params`; 0 is the initialization.
    pub best_epoch: usize,
}

#[derive(Debug)]
pub enum TrainError {
    /// The loss or a parameter became non-finite. Carries the best parameters so far.
    Diverged {
        epoch: usize,
        message: String,
        last_good: Box<TrainOutcome>,
    },
    Other(DtamError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Diverged { epoch, message, .. } => write!(f, "training diverged in epoch {epoch}: {message}"),
            TrainError::Other(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<DtamError> for TrainError {
    fn from(e: DtamError) -> Self {
        TrainError::Other(e)
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 31;
    x.wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// RMSE of evaluation-mode predictions.
pub fn validation_rmse(model: &Model, params: &ParamStore, history: &History, val: &[&Document]) -> Result<f64> {
    if val.is_empty() {
        return Err(DtamError::Data("validation set is empty".into()));
    }
    let pred = model.predict_observed(params, history, val)?;
    let truth: Vec<f64> = val.iter().map(|d| d.rating).collect();
    rmse(&pred, &truth)
}

/// Full-data objective with dropout off and a fixed noise stream, so
/// successive epochs are compared on common random numbers.
pub fn training_objective(
    model: &Model,
    params: &ParamStore,
    history: &History,
    docs: &[&Document],
    seed: u64,
) -> Result<f64> {
    let mut noise = Noise::seeded(seed);
    let mut acc = 0.0;
    for chunk in docs.chunks(256) {
        let mut g = Graph::new();
        let parts = model.batch_loss(&mut g, params, history, chunk, docs.len(), &mut noise)?;
        acc += g.scalar(parts.total) * chunk.len() as f64;
    }
    Ok(acc / docs.len() as f64)
}

/// Trains on the documents of `train`; the global chain runs over its
/// slice counts. Returns the parameters with the best validation RMSE.
pub fn train(
    config: &TrainConfig,
    train: &CorpusTimeline,
    val: &[&Document],
) -> std::result::Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut model_cfg = config.model.clone();
    model_cfg.seed = config.seed;
    let (model, mut params) = Model::init(model_cfg)?;
    let history = model.history(train);
    let docs: Vec<&Document> = train.documents().collect();
    if docs.is_empty() {
        return Err(DtamError::Data("no training documents".into()).into());
    }
    let init_rmse = validation_rmse(&model, &params, &history, val)?;
    let mut best = TrainOutcome {
        model: model.clone(),
        params: params.clone(),
        history: TrainHistory::default(),
        best_val_rmse: init_rmse,
        best_epoch: 0,
    };
    let mut hist = TrainHistory::default();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &params);
    let mut stale = 0;
    let n = docs.len();
    let diverged = |epoch: usize, message: String, best: &TrainOutcome, hist: &TrainHistory| {
        let mut last_good = best.clone();
        last_good.history = hist.clone();
        TrainError::Diverged {
            epoch,
            message,
            last_good: Box::new(last_good),
        }
    };
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0)));
        let (mut recon, mut kl_local, mut kl_global, mut reg) = (0.0, 0.0, 0.0, 0.0);
        let kl_weight = match config.kl_warmup_epochs {
            0 => 1.0,
            w => (epoch as f64 / w as f64).min(1.0),
        };
        let mut batches = 0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Document> = chunk.iter().map(|&i| docs[i]).collect();
            let s = mix(config.seed, epoch as u64, bi as u64 + 1);
            let mut g = Graph::training(s);
            let mut noise = Noise::seeded(s ^ 1);
            let parts = match model.weighted_batch_loss(&mut g, &params, &history, &batch, n, &mut noise, kl_weight) {
                Ok(p) => p,
                Err(DtamError::NonFinite(m)) | Err(DtamError::Num(dtam_numcore::NumError::NonFinite(m))) => {
                    return Err(diverged(epoch, m, &best, &hist))
                }
                Err(e) => return Err(e.into()),
            };
            let loss = g.scalar(parts.total);
            if !loss.is_finite() {
                return Err(diverged(epoch, format!("loss is {loss}"), &best, &hist));
            }
            let mut grads = g.backward(parts.total).param_grads(&params);
            let norm = clip_global_norm(&mut grads, config.clip_norm);
            if !norm.is_finite() {
                return Err(diverged(epoch, "gradient is not finite".into(), &best, &hist));
            }
            opt.step(&mut params, &grads);
            recon += g.scalar(parts.recon);
            kl_local += g.scalar(parts.kl_local);
            kl_global += g.scalar(parts.kl_global);
            reg += g.scalar(parts.reg);
            batches += 1;
        }
        let val_rmse = match validation_rmse(&model, &params, &history, val) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => return Err(diverged(epoch, format!("validation RMSE is {v}"), &best, &hist)),
            Err(DtamError::NonFinite(m)) | Err(DtamError::Num(dtam_numcore::NumError::NonFinite(m))) => {
                return Err(diverged(epoch, m, &best, &hist))
            }
            Err(e) => return Err(e.into()),
        };
        let b = batches as f64;
        let objective = match training_objective(&model, &params, &history, &docs, config.seed) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => return Err(diverged(epoch, format!("training objective is {v}"), &best, &hist)),
            Err(DtamError::NonFinite(m)) | Err(DtamError::Num(dtam_numcore::NumError::NonFinite(m))) => {
                return Err(diverged(epoch, m, &best, &hist))
            }
            Err(e) => return Err(e.into()),
        };
        hist.epochs.push(EpochRecord {
            epoch,
            recon: recon / n as f64,
            kl_local: kl_local / n as f64,
            kl_global: kl_global / b,
            reg_loss: reg / b,
            loss: objective,
            val_rmse,
            seconds: if config.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
        });
        if val_rmse < best.best_val_rmse {
            best.params = params.clone();
            best.best_val_rmse = val_rmse;
            best.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    best.history = hist;
    Ok(best)
}

/// Finite cartesian product of setting values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridSpace {
    pub axes: Vec<(String, Vec<String>)>,
}

impl GridSpace {
    pub fn axis(mut self, key: &str, values: &[&str]) -> Self {
        self.axes.push((key.to_string(), values.iter().map(|v| v.to_string()).collect()));
        self
    }

    pub fn len(&self) -> usize {
        if self.axes.is_empty() {
            0
        } else {
            self.axes.iter().map(|(_, v)| v.len()).product()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every cell, with the last axis varying fastest.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut out: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        if self.is_empty() {
            Vec::new()
        } else {
            out
        }
    }

    /// The default search grid over learning rate, batch size, rating weight and K.
    pub fn default_grid() -> Self {
        GridSpace::default()
            .axis("learning_rate", &["0.001", "0.0005"])
            .axis("batch_size", &["32", "128"])
            .axis("alpha_y", &["1", "100", "500", "1000"])
            .axis("k", &["25", "50", "100"])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeaderboardEntry {
    pub cell: Vec<(String, String)>,
    pub val_rmse: f64,
    pub best_epoch: usize,
    /// Set when the cell diverged or failed; its RMSE is then infinite.
    pub failure: Option<String>,
}

/// Leaderboard as CSV, best first.
pub fn leaderboard_csv(entries: &[LeaderboardEntry]) -> String {
    let mut s = String::from("rank,cell,val_rmse,best_epoch,failure\n");
    for (i, e) in entries.iter().enumerate() {
        let cell: Vec<String> = e.cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(
            s,
            "{},{},{},{},{}",
            i + 1,
            cell.join(";"),
            e.val_rmse,
            e.best_epoch,
            e.failure.as_deref().unwrap_or("")
        )
        .expect("string write");
    }
    s
}

/// Trains every cell of `space` on top of `base` and ranks by validation RMSE.
/// A diverged cell is ranked by its last good checkpoint.
pub fn grid_search(
    base: &TrainConfig,
    space: &GridSpace,
    train_tl: &CorpusTimeline,
    val: &[&Document],
) -> Result<(TrainConfig, Vec<LeaderboardEntry>)> {
    if space.is_empty() {
        return Err(DtamError::Config("grid search space is empty".into()));
    }
    let mut scored = Vec::new();
    for (idx, cell) in space.cells().into_iter().enumerate() {
        let mut cfg = base.clone();
        for (k, v) in &cell {
            cfg.set(k, v)?;
        }
        let entry = match train(&cfg, train_tl, val) {
            Ok(out) => LeaderboardEntry {
                cell,
                val_rmse: out.best_val_rmse,
                best_epoch: out.best_epoch,
                failure: None,
            },
            Err(TrainError::Diverged { message, last_good, .. }) => LeaderboardEntry {
                cell,
                val_rmse: last_good.best_val_rmse,
                best_epoch: last_good.best_epoch,
                failure: Some(format!("diverged: {message}")),
            },
            Err(TrainError::Other(e @ DtamError::Config(_))) => LeaderboardEntry {
                cell,
                val_rmse: f64::INFINITY,
                best_epoch: 0,
                failure: Some(e.to_string()),
            },
            Err(TrainError::Other(e)) => return Err(e),
        };
        scored.push((idx, cfg, entry));
    }
    scored.sort_by(|a, b| a.2.val_rmse.total_cmp(&b.2.val_rmse).then(a.0.cmp(&b.0)));
    let best = scored[0].1.clone();
    Ok((best, scored.into_iter().map(|(_, _, e)| e).collect()))
}
