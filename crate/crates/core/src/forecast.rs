//! Rating prediction for future documents: posterior inference over the
//! history, then prior rollout of the global chain.

use crate::corpus::Document;
use crate::dtm::{bow_log_likelihood, Dtm};
use crate::error::{DtamError, Result};
use crate::model::{History, Model, PosteriorState};
use dtam_numcore::prob::Noise;
use dtam_numcore::{Graph, ParamStore, Tensor};
use rayon::prelude::*;
use std::fmt::{self, Write as _};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Iterate the transition mean.
    Mean,
    /// Add transition noise at every step.
    Sampled,
}

impl fmt::Display for RolloutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RolloutMode::Mean => "mean",
            RolloutMode::Sampled => "sampled",
        })
    }
}

impl FromStr for RolloutMode {
    type Err = DtamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(RolloutMode::Mean),
            "sampled" => Ok(RolloutMode::Sampled),
            _ => Err(DtamError::Config(format!("rollout mode must be mean or sampled, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastConfig {
    /// Monte-Carlo samples of the latent path.
    pub n_samples: usize,
    pub mode: RolloutMode,
    /// Infer the local latent from the future document's counts instead of
    /// drawing it from its prior.
    pub condition_future_bow: bool,
    /// Use posterior means and zero noise everywhere.
    pub noise_free: bool,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            n_samples: 32,
            mode: RolloutMode::Sampled,
            condition_future_bow: false,
            noise_free: false,
            seed: 0,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(DtamError::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }

    fn noise(&self, sample: usize) -> Noise {
        if self.noise_free {
            Noise::Zero
        } else {
            Noise::seeded(self.seed ^ (sample as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        }
    }
}

/// `eta_{T+1..T+n}` from `eta_T`.
pub fn rollout_eta(
    dtm: &Dtm,
    store: &ParamStore,
    eta_t: &[f64],
    n: usize,
    mode: RolloutMode,
    noise: &mut Noise,
) -> Result<Vec<Vec<f64>>> {
    let std = dtm.config.transition_std();
    rollout_with(eta_t, n, mode, noise, std, |x| dtm.transition_mean(store, x))
}

/// Trend-chain counterpart of [`rollout_eta`].
pub fn rollout_xi(
    dtm: &Dtm,
    store: &ParamStore,
    xi_t: &[f64],
    n: usize,
    mode: RolloutMode,
    noise: &mut Noise,
) -> Result<Vec<Vec<f64>>> {
    let std = dtm.xi_transition_std()?;
    rollout_with(xi_t, n, mode, noise, std, |x| dtm.xi_transition_mean(store, x))
}

fn rollout_with(
    start: &[f64],
    n: usize,
    mode: RolloutMode,
    noise: &mut Noise,
    std: f64,
    mean: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n);
    let mut prev = start.to_vec();
    for _ in 0..n {
        let mut next = mean(&prev)?;
        if mode == RolloutMode::Sampled {
            let eps = noise.draw(1, next.len());
            for (x, e) in next.iter_mut().zip(eps.data()) {
                *x += std * e;
            }
        }
        out.push(next.clone());
        prev = next;
    }
    Ok(out)
}

/// One draw of the global latents at arbitrary absolute slices.
pub struct LatentPath {
    pub eta: Vec<Vec<f64>>,
    pub xi: Option<Vec<Vec<f64>>>,
    first_index: usize,
}

impl LatentPath {
    /// Posterior draw over the history followed by a rollout up to absolute slice `until`.
    pub fn draw(
        model: &Model,
        store: &ParamStore,
        history: &History,
        until: usize,
        mode: RolloutMode,
        noise: &mut Noise,
    ) -> Result<Self> {
        let dtm = model.dtm()?;
        let PosteriorState { eta, xi } = model.posterior_state(store, history, noise)?;
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let mut eta = rows(&eta);
        let mut xi = xi.as_ref().map(rows);
        // A collapsed history has a single state that stands for every slice.
        let steps = if history.collapsed {
            0
        } else {
            until.saturating_sub(history.last_index)
        };
        if steps > 0 {
            let last = eta.last().expect("nonempty history").clone();
            eta.extend(rollout_eta(dtm, store, &last, steps, mode, noise)?);
            if let Some(xi) = xi.as_mut() {
                let last = xi.last().expect("nonempty history").clone();
                xi.extend(rollout_xi(dtm, store, &last, steps, mode, noise)?);
            }
        }
        Ok(Self {
            eta,
            xi,
            first_index: history.first_index,
        })
    }

    /// Row holding absolute slice `time_index`.
    pub fn row(&self, history: &History, time_index: usize) -> Result<usize> {
        if time_index < self.first_index {
            return Err(DtamError::Data(format!(
                "slice {time_index} precedes the history start {}",
                self.first_index
            )));
        }
        Ok(if history.collapsed { 0 } else { time_index - self.first_index })
    }
}

/// Monte-Carlo summary of a rating forecast.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

fn summarize(samples: &[f64]) -> Prediction {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = if samples.len() > 1 {
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Prediction { mean, std }
}

/// One Monte-Carlo draw of ratings for `docs`.
fn predict_sample(
    model: &Model,
    store: &ParamStore,
    history: &History,
    docs: &[&Document],
    cfg: &ForecastConfig,
    sample: usize,
) -> Result<Vec<f64>> {
    let mut noise = cfg.noise(sample);
    let until = docs.iter().map(|d| d.time_index).max().unwrap_or(0);
    let path = LatentPath::draw(model, store, history, until, cfg.mode, &mut noise)?;
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(128) {
        let rows = chunk
            .iter()
            .map(|d| path.row(history, d.time_index))
            .collect::<Result<Vec<_>>>()?;
        let eta = Tensor::from_rows(&rows.iter().map(|&r| path.eta[r].clone()).collect::<Vec<_>>())?;
        let counts: Vec<Vec<f64>> = chunk.iter().map(|d| d.bow.to_dense(model.config.dtm.v)).collect();
        let mut g = Graph::new();
        let w = {
            let normalized: Vec<Vec<f64>> = counts.iter().map(|c| crate::dtm::l1_normalize(c)).collect();
            g.constant(Tensor::from_rows(&normalized)?)
        };
        let (theta, zeta) = if cfg.condition_future_bow {
            let (t, z, _) = model.theta_posterior(&mut g, store, &eta, &counts, &mut noise)?;
            (t, z)
        } else {
            model.theta_prior(&mut g, store, &eta, &mut noise)?
        };
        let xi = match &path.xi {
            None => None,
            Some(xi) => Some(Tensor::from_rows(xi)?),
        };
        let alphas = model.alphas_for_rows(&mut g, store, xi.as_ref(), &rows)?;
        let r = model.head_forward(&mut g, store, chunk, theta, zeta, w, alphas)?;
        out.extend_from_slice(g.value(r).data());
    }
    Ok(out)
}

/// Rating forecasts for documents at or after the end of `history`. Models
/// without a topic model predict deterministically from counts.
pub fn predict_future(
    model: &Model,
    store: &ParamStore,
    history: &History,
    docs: &[&Document],
    cfg: &ForecastConfig,
) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    if model.dtm.is_none() {
        let mut h = history.clone();
        h.last_index = usize::MAX;
        let r = model.predict_observed(store, &h, docs)?;
        return Ok(r.into_iter().map(|mean| Prediction { mean, std: 0.0 }).collect());
    }
    let samples: Vec<Vec<f64>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|s| predict_sample(model, store, history, docs, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..docs.len())
        .map(|d| summarize(&samples.iter().map(|s| s[d]).collect::<Vec<_>>()))
        .collect())
}

/// Perplexity of future documents under latents drawn from the history
/// posterior and rolled forward with the prior: the exponentiated negative
/// Monte-Carlo mean log-likelihood per token.
pub fn ppl_p_forecast(
    model: &Model,
    store: &ParamStore,
    history: &History,
    docs: &[&Document],
    cfg: &ForecastConfig,
) -> Result<f64> {
    cfg.validate()?;
    let v = model.config.dtm.v;
    let ntok: f64 = docs.iter().map(|d| d.bow.total() as f64).sum();
    if ntok == 0.0 {
        return Err(DtamError::Data("future slice has no in-vocabulary tokens".into()));
    }
    let until = docs.iter().map(|d| d.time_index).max().unwrap_or(0);
    let per_sample: Vec<f64> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|s| -> Result<f64> {
            let mut noise = cfg.noise(s);
            let path = LatentPath::draw(model, store, history, until, cfg.mode, &mut noise)?;
            let mut ll = 0.0;
            for d in docs {
                let r = path.row(history, d.time_index)?;
                let eta = Tensor::matrix(1, path.eta[r].len(), &path.eta[r]);
                let mut g = Graph::new();
                let (theta, _) = model.theta_prior(&mut g, store, &eta, &mut noise)?;
                let beta = model.beta_for(store, path.xi.as_ref().map(|x| x[r].as_slice()))?;
                ll += bow_log_likelihood(&d.bow.to_dense(v), g.value(theta).data(), &beta)?;
            }
            Ok(ll)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_ll = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok((-mean_ll / ntok).exp())
}

/// CSV with one row per document.
pub fn predictions_csv(docs: &[&Document], preds: &[Prediction], known: &[Option<f64>]) -> String {
    let mut s = String::from("doc_id,time_index,r_hat_mean,r_hat_std,r_true_if_known\n");
    for ((d, p), k) in docs.iter().zip(preds).zip(known) {
        let truth = k.map(|x| x.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{},{}", d.id, d.time_index, p.mean, p.std, truth).expect("string write");
    }
    s
}
