//! Neural variational dynamic topic model.
//!
//! Global states `eta_t` follow a Markov chain whose posterior is driven by a
//! recurrence over the normalized slice counts. Each document has a local
//! state `zeta` decoded into topic proportions; words are a mixture of
//! topic-word distributions built from topic and word embeddings.

use crate::error::{DtamError, Result};
use dtam_numcore::nn::{Activation, CellKind, MlpParams, Recurrent};
use dtam_numcore::prob::{clamp_log_std, kl_gaussian_var, DiagGaussian, GaussianVar, Noise};
use dtam_numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

/// Floor applied to mixture probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Which recurrent state the global posterior at step `t` conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtaConditioning {
    /// `h_T` at every step.
    Final,
    /// `h_t` at step `t`.
    PerStep,
}

impl fmt::Display for EtaConditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EtaConditioning::Final => "final",
            EtaConditioning::PerStep => "per-step",
        })
    }
}

impl FromStr for EtaConditioning {
    type Err = DtamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(EtaConditioning::Final),
            "per-step" => Ok(EtaConditioning::PerStep),
            _ => Err(DtamError::Config(format!("eta conditioning must be final or per-step, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendConfig {
    pub dim_xi: usize,
    pub delta_xi: f64,
    /// Clamp the gate exponent to `[-20, 20]`.
    pub gate_clamp: bool,
    /// Width of the word representations the trendy pool consumes.
    pub word_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtmConfig {
    pub k: usize,
    pub v: usize,
    pub e: usize,
    pub dim_eta: usize,
    pub dim_zeta: usize,
    pub encoder_hidden: Vec<usize>,
    pub transition_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub cell: CellKind,
    pub rnn_layers: usize,
    pub rnn_hidden: usize,
    pub delta_tr: f64,
    /// Read `delta_tr` as a variance instead of a standard deviation.
    pub delta_is_variance: bool,
    pub eta_conditioning: EtaConditioning,
    pub trend: Option<TrendConfig>,
}

/// Transition noise scale for `k` topics.
pub fn default_delta(k: usize) -> f64 {
    match k {
        0..=25 => 0.2,
        26..=50 => 0.1,
        _ => 0.005,
    }
}

impl DtmConfig {
    pub fn new(k: usize, v: usize) -> Self {
        Self {
            k,
            v,
            e: 300,
            dim_eta: k,
            dim_zeta: k,
            encoder_hidden: vec![256, 256],
            transition_hidden: vec![64, 64],
            decoder_hidden: vec![256, 256],
            activation: Activation::Relu,
            dropout: 0.3,
            cell: CellKind::Lstm,
            rnn_layers: 4,
            rnn_hidden: 400,
            delta_tr: default_delta(k),
            delta_is_variance: false,
            eta_conditioning: EtaConditioning::Final,
            trend: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.k, self.v, self.e, self.dim_eta, self.dim_zeta, self.rnn_layers, self.rnn_hidden];
        if sizes.contains(&0) {
            return Err(DtamError::Config("model dimensions must be positive".into()));
        }
        if !(self.delta_tr > 0.0 && self.delta_tr.is_finite()) {
            return Err(DtamError::Config(format!("delta_tr must be positive, got {}", self.delta_tr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DtamError::Config("dropout must lie in [0, 1)".into()));
        }
        if let Some(t) = &self.trend {
            if t.dim_xi == 0 || t.word_dim == 0 || !(t.delta_xi > 0.0) {
                return Err(DtamError::Config("trend dimensions and delta_xi must be positive".into()));
            }
        }
        Ok(())
    }

    /// Log-stddev of the transition prior.
    pub fn transition_log_std(&self) -> f64 {
        if self.delta_is_variance {
            0.5 * self.delta_tr.ln()
        } else {
            self.delta_tr.ln()
        }
    }

    /// Stddev of the transition prior.
    pub fn transition_std(&self) -> f64 {
        if self.delta_is_variance {
            self.delta_tr.sqrt()
        } else {
            self.delta_tr
        }
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GenerativeParams {
    pub alpha: ParamId,
    pub rho: ParamId,
    pub transition: MlpParams,
    pub w_zeta: ParamId,
    pub c_zeta: ParamId,
    pub decoder: MlpParams,
}

#[derive(Clone, Debug)]
pub struct InferenceParams {
    pub local_mean: MlpParams,
    pub local_logstd: MlpParams,
    pub global_mean: MlpParams,
    pub global_logstd: MlpParams,
    pub recurrence: Recurrent,
}

#[derive(Clone, Debug)]
pub struct TrendParams {
    pub xi_transition: MlpParams,
    pub xi_mean: MlpParams,
    pub xi_logstd: MlpParams,
    pub xi_recurrence: Recurrent,
    pub mq_alpha: ParamId,
    pub mk_alpha: ParamId,
    pub mv_alpha: ParamId,
    pub mq_u: ParamId,
    pub mk_u: ParamId,
    pub mv_u: ParamId,
}

#[derive(Clone, Debug)]
pub struct Dtm {
    pub config: DtmConfig,
    pub gen: GenerativeParams,
    pub inf: InferenceParams,
    pub trend: Option<TrendParams>,
}

/// Global chain on the tape.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub eta: Vec<Var>,
    pub posteriors: Vec<GaussianVar>,
    pub priors: Vec<GaussianVar>,
    pub h: Vec<Var>,
    /// `T × dim_eta` stack of `eta`.
    pub matrix: Var,
}

/// Plain copy of a [`Trajectory`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub eta: Tensor,
    pub eta_posteriors: Vec<DiagGaussian>,
    pub h: Tensor,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn to_plain(&self, g: &Graph) -> LatentTrajectory {
        let rows = |vs: &[Var]| {
            let rows: Vec<Vec<f64>> = vs.iter().map(|&v| g.value(v).data().to_vec()).collect();
            Tensor::from_rows(&rows).expect("equal widths")
        };
        LatentTrajectory {
            eta: rows(&self.eta),
            eta_posteriors: self.posteriors.iter().map(|q| q.to_plain(g)).collect(),
            h: rows(&self.h),
        }
    }
}

/// Dense document counts plus the local slice index of each row.
#[derive(Clone, Debug)]
pub struct DocBatch {
    pub counts: Tensor,
    pub slices: Vec<usize>,
}

impl DocBatch {
    pub fn new(rows: &[Vec<f64>], slices: Vec<usize>) -> Result<Self> {
        if rows.len() != slices.len() || rows.is_empty() {
            return Err(DtamError::Data("batch needs one slice index per nonempty row".into()));
        }
        Ok(Self {
            counts: Tensor::from_rows(rows)?,
            slices,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Row-wise L1-normalized counts; empty rows stay zero.
    pub fn normalized(&self) -> Tensor {
        let v = self.counts.cols();
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|i| l1_normalize(self.counts.row(i))).collect();
        if rows.is_empty() {
            return Tensor::zeros(&[0, v]);
        }
        Tensor::from_rows(&rows).expect("equal widths")
    }
}

pub fn l1_normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter().map(|x| x / s).collect()
    } else {
        vec![0.0; w.len()]
    }
}

/// Per-document local quantities.
#[derive(Clone, Debug)]
pub struct LocalOut {
    pub posterior: GaussianVar,
    pub zeta: Var,
    pub theta: Var,
    pub kl: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub loss: Var,
    pub recon: Var,
    pub kl_local: Var,
    pub kl_global: Var,
}

/// Plain values of [`ElboTerms`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboValues {
    pub loss: f64,
    pub recon: f64,
    pub kl_local: f64,
    pub kl_global: f64,
}

impl ElboTerms {
    pub fn values(&self, g: &Graph) -> ElboValues {
        ElboValues {
            loss: g.scalar(self.loss),
            recon: g.scalar(self.recon),
            kl_local: g.scalar(self.kl_local),
            kl_global: g.scalar(self.kl_global),
        }
    }
}

/// Everything [`Dtm::elbo_pieces`] builds on the way to the loss.
#[derive(Clone, Debug)]
pub struct ElboPieces {
    pub terms: ElboTerms,
    pub local: LocalOut,
    pub traj: Trajectory,
    pub w_norm: Var,
    /// Dynamic topic embeddings per local slice present in the batch (trend only).
    pub slice_alphas: BTreeMap<usize, Var>,
}

/// The trend chain on the tape.
#[derive(Clone, Debug)]
pub struct XiTrajectory {
    pub xi: Vec<Var>,
    pub posteriors: Vec<GaussianVar>,
    pub priors: Vec<GaussianVar>,
    pub h: Vec<Var>,
}

fn standard_prior(g: &mut Graph, dim: usize) -> GaussianVar {
    GaussianVar {
        mean: g.constant(Tensor::zeros(&[1, dim])),
        log_std: g.constant(Tensor::zeros(&[1, dim])),
    }
}

/// Checks every component and names the first non-finite one.
pub fn ensure_finite(g: &Graph, parts: &[(&str, Var)]) -> Result<()> {
    for &(name, v) in parts {
        if !g.value(v).is_finite() {
            return Err(DtamError::NonFinite(name.to_string()));
        }
    }
    Ok(())
}

impl Dtm {
    pub fn new<R: Rng + ?Sized>(config: DtmConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let act = c.activation;
        let gen = GenerativeParams {
            alpha: store.add_glorot("gen.alpha", c.k, c.e, rng),
            rho: store.add_glorot("gen.rho", c.v, c.e, rng),
            transition: MlpParams::new(
                store,
                "gen.transition",
                &sizes(c.dim_eta, &c.transition_hidden, c.dim_eta),
                act,
                c.dropout,
                rng,
            ),
            w_zeta: store.add_glorot("gen.w_zeta", c.dim_zeta, c.dim_eta, rng),
            c_zeta: store.add_zeros("gen.c_zeta", &[1, c.dim_zeta]),
            decoder: MlpParams::new(
                store,
                "gen.decoder",
                &sizes(c.dim_zeta, &c.decoder_hidden, c.k),
                act,
                c.dropout,
                rng,
            ),
        };
        let local_in = c.v + c.dim_eta;
        let global_in = c.dim_eta + c.rnn_hidden;
        let inf = InferenceParams {
            local_mean: MlpParams::new(
                store,
                "inf.local_mean",
                &sizes(local_in, &c.encoder_hidden, c.dim_zeta),
                act,
                c.dropout,
                rng,
            ),
            local_logstd: MlpParams::new(
                store,
                "inf.local_logstd",
                &sizes(local_in, &c.encoder_hidden, c.dim_zeta),
                act,
                c.dropout,
                rng,
            ),
            global_mean: MlpParams::new(
                store,
                "inf.global_mean",
                &sizes(global_in, &c.encoder_hidden, c.dim_eta),
                act,
                c.dropout,
                rng,
            ),
            global_logstd: MlpParams::new(
                store,
                "inf.global_logstd",
                &sizes(global_in, &c.encoder_hidden, c.dim_eta),
                act,
                c.dropout,
                rng,
            ),
            recurrence: Recurrent::new(c.cell, store, "inf.rnn", c.v, c.rnn_hidden, c.rnn_layers, c.dropout, rng),
        };
        let trend = c.trend.as_ref().map(|t| {
            let xi_in = t.dim_xi + c.rnn_hidden;
            TrendParams {
                xi_transition: MlpParams::new(
                    store,
                    "trend.transition",
                    &sizes(t.dim_xi, &c.transition_hidden, t.dim_xi),
                    act,
                    c.dropout,
                    rng,
                ),
                xi_mean: MlpParams::new(
                    store,
                    "trend.mean",
                    &sizes(xi_in, &c.encoder_hidden, t.dim_xi),
                    act,
                    c.dropout,
                    rng,
                ),
                xi_logstd: MlpParams::new(
                    store,
                    "trend.logstd",
                    &sizes(xi_in, &c.encoder_hidden, t.dim_xi),
                    act,
                    c.dropout,
                    rng,
                ),
                xi_recurrence: Recurrent::new(
                    c.cell,
                    store,
                    "trend.rnn",
                    c.v,
                    c.rnn_hidden,
                    c.rnn_layers,
                    c.dropout,
                    rng,
                ),
                mq_alpha: store.add_glorot("trend.mq_alpha", c.e, t.dim_xi, rng),
                mk_alpha: store.add_glorot("trend.mk_alpha", c.e, c.e, rng),
                mv_alpha: store.add("trend.mv_alpha", Tensor::identity(c.e)),
                mq_u: store.add_glorot("trend.mq_u", c.e, c.e, rng),
                mk_u: store.add_glorot("trend.mk_u", c.e, t.word_dim, rng),
                mv_u: store.add("trend.mv_u", Tensor::identity(t.word_dim)),
            }
        });
        Ok(Self {
            config,
            gen,
            inf,
            trend,
        })
    }

    /// `softmax_rows(alpha rhoᵀ)`, `K × V`.
    pub fn beta(&self, g: &mut Graph, store: &ParamStore) -> Var {
        let alpha = g.param(store, self.gen.alpha);
        self.beta_from(g, store, alpha)
    }

    /// Topic-word matrix for an arbitrary `K × E` topic embedding.
    pub fn beta_from(&self, g: &mut Graph, store: &ParamStore, alpha: Var) -> Var {
        let rho = g.param(store, self.gen.rho);
        let logits = g.matmul_nt(alpha, rho);
        g.softmax_rows(logits)
    }

    pub fn topic_word_matrix(&self, store: &ParamStore) -> Tensor {
        let mut g = Graph::new();
        let b = self.beta(&mut g, store);
        g.value(b).clone()
    }

    /// `p(eta_t | eta_{t-1})`; the standard normal when `prev` is `None`.
    pub fn eta_prior(&self, g: &mut Graph, store: &ParamStore, prev: Option<Var>) -> Result<GaussianVar> {
        let d = self.config.dim_eta;
        Ok(match prev {
            None => standard_prior(g, d),
            Some(eta) => GaussianVar {
                mean: self.gen.transition.apply(g, store, eta)?,
                log_std: g.constant(Tensor::full(&[1, d], self.config.transition_log_std())),
            },
        })
    }

    /// Plain transition mean `mu(eta)` for a single row.
    pub fn transition_mean(&self, store: &ParamStore, eta: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, eta.len(), eta));
        let m = self.gen.transition.apply(&mut g, store, x)?;
        Ok(g.value(m).data().to_vec())
    }

    /// Mean of `p(zeta | eta)` for each row of `eta_rows`; the stddev is 1.
    pub fn zeta_prior_mean(&self, g: &mut Graph, store: &ParamStore, eta_rows: Var) -> Var {
        let w = g.param(store, self.gen.w_zeta);
        let c = g.param(store, self.gen.c_zeta);
        let m = g.matmul_nt(eta_rows, w);
        g.add_row(m, c)
    }

    pub fn zeta_prior(&self, g: &mut Graph, store: &ParamStore, eta_rows: Var) -> GaussianVar {
        let mean = self.zeta_prior_mean(g, store, eta_rows);
        let (r, c) = (g.value(mean).rows(), g.value(mean).cols());
        GaussianVar {
            mean,
            log_std: g.constant(Tensor::zeros(&[r, c])),
        }
    }

    /// `softmax(f(zeta))` row-wise.
    pub fn decode_theta(&self, g: &mut Graph, store: &ParamStore, zeta: Var) -> Result<Var> {
        let logits = self.gen.decoder.apply(g, store, zeta)?;
        Ok(g.softmax_rows(logits))
    }

    fn slice_inputs(&self, g: &mut Graph, slice_bows: &[Vec<f64>]) -> Result<Vec<Var>> {
        if slice_bows.is_empty() {
            return Err(DtamError::Data("global encoder needs at least one slice".into()));
        }
        slice_bows
            .iter()
            .map(|w| {
                if w.len() != self.config.v {
                    return Err(DtamError::Data(format!(
                        "slice counts have length {}, vocabulary is {}",
                        w.len(),
                        self.config.v
                    )));
                }
                Ok(g.constant(Tensor::matrix(1, w.len(), &l1_normalize(w))))
            })
            .collect()
    }

    /// Runs the recurrence over the slices, then the posterior chain.
    pub fn encode_global(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slice_bows: &[Vec<f64>],
        noise: &mut Noise,
    ) -> Result<Trajectory> {
        let inputs = self.slice_inputs(g, slice_bows)?;
        let h = self.inf.recurrence.sequence(g, store, &inputs, None)?;
        let d = self.config.dim_eta;
        let mut prev = g.constant(Tensor::zeros(&[1, d]));
        let mut traj = Trajectory {
            eta: Vec::with_capacity(h.len()),
            posteriors: Vec::with_capacity(h.len()),
            priors: Vec::with_capacity(h.len()),
            h: h.clone(),
            matrix: prev,
        };
        let last = *h.last().expect("nonempty");
        for (t, &h_t) in h.iter().enumerate() {
            let cond = match self.config.eta_conditioning {
                EtaConditioning::Final => last,
                EtaConditioning::PerStep => h_t,
            };
            let ctx = g.concat_cols(&[prev, cond]);
            let mean = self.inf.global_mean.apply(g, store, ctx)?;
            let raw = self.inf.global_logstd.apply(g, store, ctx)?;
            let q = GaussianVar {
                mean,
                log_std: clamp_log_std(g, raw),
            };
            let p = self.eta_prior(g, store, (t > 0).then_some(prev))?;
            let eta = q.sample(g, noise.draw(1, d));
            traj.eta.push(eta);
            traj.posteriors.push(q);
            traj.priors.push(p);
            prev = eta;
        }
        traj.matrix = g.concat_rows(&traj.eta);
        Ok(traj)
    }

    /// `KL(q(eta_1) ‖ N(0, I)) + Σ_{t≥2} KL(q(eta_t) ‖ p(eta_t | eta_{t-1}))`.
    pub fn global_kl(&self, g: &mut Graph, traj: &Trajectory) -> Var {
        let parts: Vec<Var> = traj
            .posteriors
            .iter()
            .zip(&traj.priors)
            .map(|(&q, &p)| kl_gaussian_var(g, q, p))
            .collect();
        let stacked = g.concat_rows(&parts);
        g.sum(stacked)
    }

    /// `q(zeta | w, eta)` for a batch; `w_norm` is `B × V`, `eta_rows` is `B × dim_eta`.
    pub fn encode_local(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        w_norm: Var,
        eta_rows: Var,
        noise: &mut Noise,
    ) -> Result<(GaussianVar, Var)> {
        let x = g.concat_cols(&[w_norm, eta_rows]);
        let mean = self.inf.local_mean.apply(g, store, x)?;
        let raw = self.inf.local_logstd.apply(g, store, x)?;
        let q = GaussianVar {
            mean,
            log_std: clamp_log_std(g, raw),
        };
        let b = g.value(mean).rows();
        let zeta = q.sample(g, noise.draw(b, self.config.dim_zeta));
        Ok((q, zeta))
    }

    /// Local posterior, sample, decoded proportions and summed local KL.
    pub fn local(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        w_norm: Var,
        eta_rows: Var,
        noise: &mut Noise,
    ) -> Result<LocalOut> {
        let (posterior, zeta) = self.encode_local(g, store, w_norm, eta_rows, noise)?;
        let prior = self.zeta_prior(g, store, eta_rows);
        let kl = kl_gaussian_var(g, posterior, prior);
        let theta = self.decode_theta(g, store, zeta)?;
        Ok(LocalOut {
            posterior,
            zeta,
            theta,
            kl,
        })
    }

    /// `Σ_d Σ_v w_dv log(θ_d β[:, v])` for a `B × K` theta and `K × V` beta.
    pub fn recon(&self, g: &mut Graph, theta: Var, beta: Var, counts: &Tensor) -> Var {
        let p = g.matmul(theta, beta);
        let lp = g.ln(p, LOG_FLOOR);
        let weighted = g.mul_const(lp, counts.clone());
        g.sum(weighted)
    }

    /// Reconstruction with per-row topic-word matrices picked by `slices`.
    pub fn recon_per_slice(
        &self,
        g: &mut Graph,
        theta: Var,
        betas: &BTreeMap<usize, Var>,
        batch: &DocBatch,
    ) -> Var {
        let mut parts = Vec::new();
        for (&s, &beta) in betas {
            let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch.slices[i] == s).collect();
            if rows.is_empty() {
                continue;
            }
            let th = g.gather_rows(theta, &rows);
            let counts: Vec<Vec<f64>> = rows.iter().map(|&i| batch.counts.row(i).to_vec()).collect();
            let counts = Tensor::from_rows(&counts).expect("equal widths");
            parts.push(self.recon(g, th, beta, &counts));
        }
        let stacked = g.concat_rows(&parts);
        g.sum(stacked)
    }

    /// Negative ELBO summed over a batch drawn from the slices of `slice_bows`.
    ///
    /// Draws global noise first, then local noise, then trend noise.
    pub fn elbo(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slice_bows: &[Vec<f64>],
        batch: &DocBatch,
        noise: &mut Noise,
    ) -> Result<ElboTerms> {
        Ok(self.elbo_pieces(g, store, slice_bows, batch, noise)?.terms)
    }

    /// [`Dtm::elbo`] together with the intermediate quantities heads consume.
    pub fn elbo_pieces(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slice_bows: &[Vec<f64>],
        batch: &DocBatch,
        noise: &mut Noise,
    ) -> Result<ElboPieces> {
        let traj = self.encode_global(g, store, slice_bows, noise)?;
        let mut kl_global = self.global_kl(g, &traj);
        let eta_rows = g.gather_rows(traj.matrix, &batch.slices);
        let w_norm = g.constant(batch.normalized());
        let local = self.local(g, store, w_norm, eta_rows, noise)?;
        let mut slice_alphas = BTreeMap::new();
        let recon = match &self.trend {
            None => {
                let beta = self.beta(g, store);
                self.recon(g, local.theta, beta, &batch.counts)
            }
            Some(_) => {
                let xi = self.xi_trajectory(g, store, slice_bows, noise)?;
                let kl_xi = self.xi_kl(g, &xi);
                kl_global = g.add(kl_global, kl_xi);
                let mut betas = BTreeMap::new();
                for &s in &batch.slices {
                    if let std::collections::btree_map::Entry::Vacant(e) = betas.entry(s) {
                        let alpha_t = self.dynamic_topic_embeddings(g, store, xi.xi[s])?;
                        slice_alphas.insert(s, alpha_t);
                        e.insert(self.beta_from(g, store, alpha_t));
                    }
                }
                self.recon_per_slice(g, local.theta, &betas, batch)
            }
        };
        let neg = g.sub(local.kl, recon);
        let loss = g.add(neg, kl_global);
        ensure_finite(
            g,
            &[
                ("reconstruction", recon),
                ("local KL", local.kl),
                ("global KL", kl_global),
            ],
        )?;
        Ok(ElboPieces {
            terms: ElboTerms {
                loss,
                recon,
                kl_local: local.kl,
                kl_global,
            },
            local,
            traj,
            w_norm,
            slice_alphas,
        })
    }

    fn trend_params(&self) -> Result<(&TrendParams, &TrendConfig)> {
        match (&self.trend, &self.config.trend) {
            (Some(p), Some(c)) => Ok((p, c)),
            _ => Err(DtamError::Disabled("trend extension is not enabled".into())),
        }
    }

    /// Trend chain with per-step conditioning on its own recurrence.
    pub fn xi_trajectory(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slice_bows: &[Vec<f64>],
        noise: &mut Noise,
    ) -> Result<XiTrajectory> {
        let (tp, tc) = self.trend_params()?;
        let inputs = self.slice_inputs(g, slice_bows)?;
        let h = tp.xi_recurrence.sequence(g, store, &inputs, None)?;
        let d = tc.dim_xi;
        let log_std = if self.config.delta_is_variance {
            0.5 * tc.delta_xi.ln()
        } else {
            tc.delta_xi.ln()
        };
        let mut prev = g.constant(Tensor::zeros(&[1, d]));
        let mut out = XiTrajectory {
            xi: Vec::new(),
            posteriors: Vec::new(),
            priors: Vec::new(),
            h: h.clone(),
        };
        for (t, &h_t) in h.iter().enumerate() {
            let ctx = g.concat_cols(&[prev, h_t]);
            let mean = tp.xi_mean.apply(g, store, ctx)?;
            let raw = tp.xi_logstd.apply(g, store, ctx)?;
            let q = GaussianVar {
                mean,
                log_std: clamp_log_std(g, raw),
            };
            let p = if t == 0 {
                standard_prior(g, d)
            } else {
                GaussianVar {
                    mean: tp.xi_transition.apply(g, store, prev)?,
                    log_std: g.constant(Tensor::full(&[1, d], log_std)),
                }
            };
            let xi = q.sample(g, noise.draw(1, d));
            out.xi.push(xi);
            out.posteriors.push(q);
            out.priors.push(p);
            prev = xi;
        }
        Ok(out)
    }

    /// Plain trend transition mean for a single row.
    pub fn xi_transition_mean(&self, store: &ParamStore, xi: &[f64]) -> Result<Vec<f64>> {
        let (tp, _) = self.trend_params()?;
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, xi.len(), xi));
        let m = tp.xi_transition.apply(&mut g, store, x)?;
        Ok(g.value(m).data().to_vec())
    }

    /// Stddev of the trend transition.
    pub fn xi_transition_std(&self) -> Result<f64> {
        let (_, tc) = self.trend_params()?;
        Ok(if self.config.delta_is_variance {
            tc.delta_xi.sqrt()
        } else {
            tc.delta_xi
        })
    }

    pub fn xi_kl(&self, g: &mut Graph, xi: &XiTrajectory) -> Var {
        let parts: Vec<Var> = xi
            .posteriors
            .iter()
            .zip(&xi.priors)
            .map(|(&q, &p)| kl_gaussian_var(g, q, p))
            .collect();
        let stacked = g.concat_rows(&parts);
        g.sum(stacked)
    }

    /// `alpha_{t,i} = exp[(M_Q xi)·(M_K alpha_i) / √E] (M_V alpha_i)`, `K × E`.
    pub fn dynamic_topic_embeddings(&self, g: &mut Graph, store: &ParamStore, xi_t: Var) -> Result<Var> {
        let (tp, tc) = self.trend_params()?;
        let alpha = g.param(store, self.gen.alpha);
        let mq = g.param(store, tp.mq_alpha);
        let mk = g.param(store, tp.mk_alpha);
        let mv = g.param(store, tp.mv_alpha);
        let q = g.matmul_nt(xi_t, mq);
        let keys = g.matmul_nt(alpha, mk);
        let scores = g.matmul_nt(keys, q);
        let mut scores = g.scale(scores, 1.0 / (self.config.e as f64).sqrt());
        if tc.gate_clamp {
            scores = g.clamp(scores, -20.0, 20.0);
        } else if g.value(scores).data().iter().any(|&s| s > 700.0) {
            return Err(DtamError::NonFinite(
                "trend gate exponent overflows; enable trend_gate_clamp".into(),
            ));
        }
        let gate = g.exp(scores);
        let values = g.matmul_nt(alpha, mv);
        Ok(g.mul_col(values, gate))
    }
}

/// `Σ_v w_v log(θᵀ β[:, v])` with the log argument floored at `LOG_FLOOR`.
pub fn bow_log_likelihood(w: &[f64], theta: &[f64], beta: &Tensor) -> Result<f64> {
    if beta.rows() != theta.len() || beta.cols() != w.len() {
        return Err(DtamError::Data(format!(
            "likelihood shapes: w {}, theta {}, beta {:?}",
            w.len(),
            theta.len(),
            beta.shape()
        )));
    }
    if w.iter().any(|&x| x < 0.0) {
        return Err(DtamError::Data("negative word count".into()));
    }
    let mut ll = 0.0;
    for (v, &c) in w.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let p: f64 = theta.iter().enumerate().map(|(k, t)| t * beta.get(k, v)).sum();
        ll += c * p.max(LOG_FLOOR).ln();
    }
    Ok(ll)
}

/// Top `n` word ids per topic, by descending weight with ties broken by token.
pub fn top_words(beta: &Tensor, tokens: &[String], n: usize) -> Vec<Vec<usize>> {
    let n = n.min(beta.cols());
    (0..beta.rows())
        .map(|k| {
            let row = beta.row(k);
            let mut ids: Vec<usize> = (0..row.len()).collect();
            ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then_with(|| tokens[a].cmp(&tokens[b])));
            ids.truncate(n);
            ids
        })
        .collect()
}

/// Overwrites rows of `rho` for tokens present in a GloVe-format text file.
/// Returns the number of tokens found.
pub fn load_glove(path: &Path, tokens: &[String], rho: &mut Tensor) -> Result<usize> {
    let e = rho.cols();
    let index: std::collections::HashMap<&str, usize> =
        tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut found = 0;
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        let mut parts = line.split(' ');
        let Some(word) = parts.next() else { continue };
        let Some(&row) = index.get(word) else { continue };
        let values: Vec<f64> = parts
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DtamError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        if values.len() != e {
            return Err(DtamError::Parse {
                line: n + 1,
                message: format!("expected {e} components, found {}", values.len()),
            });
        }
        rho.data_mut()[row * e..(row + 1) * e].copy_from_slice(&values);
        found += 1;
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dtam_numcore::gradcheck::grad_check_params;
    use dtam_numcore::prob::kl_diag_gaussian;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(k: usize, v: usize) -> DtmConfig {
        DtmConfig {
            e: 3,
            encoder_hidden: vec![5],
            transition_hidden: vec![4],
            decoder_hidden: vec![],
            activation: Activation::Tanh,
            dropout: 0.0,
            cell: CellKind::Gru,
            rnn_layers: 1,
            rnn_hidden: 4,
            ..DtmConfig::new(k, v)
        }
    }

    fn build(cfg: DtmConfig, seed: u64) -> (Dtm, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Dtm::new(cfg, &mut store, &mut rng).unwrap();
        (m, store)
    }

    fn zero_inference(store: &mut ParamStore) {
        store.zero_prefix("inf.");
    }

    #[test]
    fn beta_examples() {
        let (m, mut store) = build(tiny_config(1, 4), 0);
        store.zero_prefix("gen.alpha");
        let b = m.topic_word_matrix(&store);
        assert!(b.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let (m, store) = build(tiny_config(2, 3), 1);
        let b = m.topic_word_matrix(&store);
        let a = store.get(m.gen.alpha);
        let r = store.get(m.gen.rho);
        for k in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|v| (0..3).map(|e| a.get(k, e) * r.get(v, e)).sum::<f64>())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (v, l) in logits.iter().enumerate() {
                assert!((b.get(k, v) - l.exp() / z).abs() < 1e-12);
            }
            assert!((b.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_topic_gives_uniform_row() {
        let (m, mut store) = build(tiny_config(1, 3), 2);
        store.set(m.gen.alpha, Tensor::matrix(1, 3, &[0.0, 0.0, 1.0])).unwrap();
        let rho = Tensor::matrix(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, -1.0, 0.0]);
        store.set(m.gen.rho, rho).unwrap();
        let b = m.topic_word_matrix(&store);
        assert!(b.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    fn identity_transition(dim: usize, delta: f64) -> (Dtm, ParamStore) {
        let cfg = DtmConfig {
            transition_hidden: vec![],
            dim_eta: dim,
            delta_tr: delta,
            ..tiny_config(2, 3)
        };
        let (m, mut store) = build(cfg, 3);
        store.set(m.gen.transition.layers[0].weight, Tensor::identity(dim)).unwrap();
        (m, store)
    }

    #[test]
    fn eta_prior_examples() {
        let (m, store) = identity_transition(1, 0.1);
        let mut g = Graph::new();
        let p1 = m.eta_prior(&mut g, &store, None).unwrap().to_plain(&g);
        assert_eq!(p1, DiagGaussian::standard(1));
        let eta = g.input(Tensor::matrix(1, 1, &[2.0]));
        let p = m.eta_prior(&mut g, &store, Some(eta)).unwrap().to_plain(&g);
        assert!((p.mean()[0] - 2.0).abs() < 1e-15);
        assert!((p.stddev()[0] - 0.1).abs() < 1e-15);

        let (mut m, mut store) = identity_transition(1, 0.1);
        m.config.delta_is_variance = true;
        store.zero_prefix("gen.transition");
        let mut g = Graph::new();
        let eta = g.input(Tensor::matrix(1, 1, &[5.0]));
        let p = m.eta_prior(&mut g, &store, Some(eta)).unwrap().to_plain(&g);
        assert_eq!(p.mean(), &[0.0]);
        assert!((p.stddev()[0] - 0.1f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zeta_prior_examples() {
        let cfg = DtmConfig {
            dim_eta: 2,
            dim_zeta: 2,
            ..tiny_config(2, 3)
        };
        let (m, mut store) = build(cfg, 4);
        let mut g = Graph::new();
        store.set(m.gen.w_zeta, Tensor::identity(2)).unwrap();
        let eta = g.input(Tensor::matrix(1, 2, &[1.0, -1.0]));
        let p = m.zeta_prior(&mut g, &store, eta).to_plain(&g);
        assert_eq!(p.mean(), &[1.0, -1.0]);
        assert_eq!(p.stddev(), &[1.0, 1.0]);

        let (m, mut store) = build(
            DtmConfig {
                dim_eta: 3,
                dim_zeta: 2,
                ..tiny_config(2, 3)
            },
            5,
        );
        store.set(m.gen.c_zeta, Tensor::matrix(1, 2, &[0.5, -0.25])).unwrap();
        let w = store.get(m.gen.w_zeta).clone();
        let x = [0.3, -1.2, 2.0];
        let mut g = Graph::new();
        let eta = g.input(Tensor::matrix(1, 3, &x));
        let mean = m.zeta_prior_mean(&mut g, &store, eta);
        for i in 0..2 {
            let want = (0..3).map(|j| w.get(i, j) * x[j]).sum::<f64>() + [0.5, -0.25][i];
            assert!((g.value(mean).get(0, i) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn decode_theta_examples() {
        let cfg = DtmConfig {
            dim_zeta: 2,
            ..tiny_config(2, 3)
        };
        let (m, mut store) = build(cfg, 6);
        store.zero_prefix("gen.decoder");
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 2, &[3.0, -7.0]));
        let th = m.decode_theta(&mut g, &store, z).unwrap();
        assert_eq!(g.value(th).data(), &[0.5, 0.5]);
        let bias = m.gen.decoder.layers[0].bias;
        store.set(bias, Tensor::vector(&[2f64.ln(), 0.0])).unwrap();
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 2, &[3.0, -7.0]));
        let th = m.decode_theta(&mut g, &store, z).unwrap();
        assert!((g.value(th).get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn likelihood_examples() {
        let beta = Tensor::matrix(1, 3, &[0.2, 0.3, 0.5]);
        let ll = bow_log_likelihood(&[1.0, 0.0, 2.0], &[1.0], &beta).unwrap();
        assert!((ll - (0.2f64.ln() + 2.0 * 0.5f64.ln())).abs() < 1e-15);
        let uni = Tensor::full(&[2, 4], 0.25);
        let ll = bow_log_likelihood(&[1.0, 2.0, 0.0, 3.0], &[0.5, 0.5], &uni).unwrap();
        assert!((ll - 6.0 * 0.25f64.ln()).abs() < 1e-14);
        let beta = Tensor::matrix(2, 3, &[0.1, 0.6, 0.3, 0.7, 0.2, 0.1]);
        let theta = [0.4, 0.6];
        let ll = bow_log_likelihood(&[0.0, 1.0, 0.0], &theta, &beta).unwrap();
        let brute: f64 = (0..2).map(|z| theta[z] * beta.get(z, 1)).sum();
        assert!((ll - brute.ln()).abs() < 1e-15);
        assert!(bow_log_likelihood(&[-1.0, 0.0, 0.0], &theta, &beta).is_err());
    }

    #[test]
    fn global_encoder_examples() {
        let (m, mut store) = build(tiny_config(2, 3), 7);
        zero_inference(&mut store);
        let mut g = Graph::new();
        let tr = m.encode_global(&mut g, &store, &[vec![1.0, 2.0, 0.0]], &mut Noise::Zero).unwrap();
        assert!(g.value(tr.eta[0]).data().iter().all(|&x| x == 0.0));
        assert!(m.encode_global(&mut g, &store, &[], &mut Noise::Zero).is_err());

        let (m, store) = build(tiny_config(2, 3), 8);
        let bows = vec![vec![1.0, 0.0, 2.0], vec![0.0; 3], vec![3.0, 1.0, 1.0]];
        let run = || {
            let mut g = Graph::new();
            let tr = m.encode_global(&mut g, &store, &bows, &mut Noise::Zero).unwrap();
            tr.to_plain(&g)
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.eta.shape(), &[3, 2]);
        assert!(a.eta_posteriors.iter().all(|q| q.stddev().iter().all(|&s| s > 0.0)));
    }

    #[test]
    fn per_step_conditioning_differs_from_final() {
        let (m, store) = build(tiny_config(2, 3), 9);
        let mut m2 = m.clone();
        m2.config.eta_conditioning = EtaConditioning::PerStep;
        let bows = vec![vec![1.0, 0.0, 2.0], vec![3.0, 1.0, 1.0]];
        let mut g = Graph::new();
        let a = m.encode_global(&mut g, &store, &bows, &mut Noise::Zero).unwrap().to_plain(&g);
        let b = m2.encode_global(&mut g, &store, &bows, &mut Noise::Zero).unwrap().to_plain(&g);
        assert_ne!(a.eta.row(0), b.eta.row(0));
    }

    #[test]
    fn local_encoder_examples() {
        let (m, mut store) = build(tiny_config(2, 3), 10);
        zero_inference(&mut store);
        let mut g = Graph::new();
        let w = g.constant(Tensor::matrix(1, 3, &[0.5, 0.5, 0.0]));
        let eta = g.constant(Tensor::matrix(1, 2, &[1.0, 2.0]));
        let (q, z) = m.encode_local(&mut g, &store, w, eta, &mut Noise::Zero).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);
        assert_eq!(q.to_plain(&g).stddev(), &[1.0, 1.0]);

        let (m, store) = build(tiny_config(2, 3), 11);
        let sample = |seed| {
            let mut g = Graph::new();
            let w = g.constant(Tensor::matrix(1, 3, &[0.2, 0.3, 0.5]));
            let eta = g.constant(Tensor::matrix(1, 2, &[1.0, -2.0]));
            let (q, z) = m.encode_local(&mut g, &store, w, eta, &mut Noise::seeded(seed)).unwrap();
            assert!(q.to_plain(&g).stddev().iter().all(|&s| s > 0.0));
            g.value(z).clone()
        };
        assert_eq!(sample(5), sample(5));
    }

    /// Zero inference nets plus a zero transition make every posterior equal
    /// its prior when `delta_tr = 1`: `q(eta) = N(0, I)` and `q(zeta) = N(0, I)`
    /// with `W = 0, c = 0`.
    fn prior_matching(k: usize, v: usize) -> (Dtm, ParamStore) {
        let cfg = DtmConfig {
            delta_tr: 1.0,
            ..tiny_config(k, v)
        };
        let (m, mut store) = build(cfg, 12);
        zero_inference(&mut store);
        store.zero_prefix("gen.transition");
        store.zero_prefix("gen.w_zeta");
        (m, store)
    }

    #[test]
    fn prior_matching_posteriors_have_zero_kl() {
        let (m, store) = prior_matching(2, 4);
        let bows = vec![vec![1.0, 0.0, 2.0, 1.0], vec![0.0, 3.0, 1.0, 0.0]];
        let batch = DocBatch::new(&bows, vec![0, 1]).unwrap();
        let mut g = Graph::new();
        let terms = m.elbo(&mut g, &store, &bows, &batch, &mut Noise::seeded(1)).unwrap();
        let v = terms.values(&g);
        assert!(v.kl_global.abs() < 1e-15 && v.kl_local.abs() < 1e-15);
        assert!((v.loss + v.recon).abs() < 1e-12);
    }

    #[test]
    fn single_topic_recon_matches_likelihood() {
        let (m, store) = build(tiny_config(1, 4), 13);
        let w = vec![2.0, 0.0, 1.0, 1.0];
        let batch = DocBatch::new(std::slice::from_ref(&w), vec![0]).unwrap();
        let mut g = Graph::new();
        let terms = m.elbo(&mut g, &store, std::slice::from_ref(&w), &batch, &mut Noise::seeded(3)).unwrap();
        let beta = m.topic_word_matrix(&store);
        let ll = bow_log_likelihood(&w, &[1.0], &beta).unwrap();
        assert_eq!(g.scalar(terms.recon), ll);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let (m, store) = build(tiny_config(2, 4), 14);
        let bows = vec![vec![1.0, 0.0, 2.0, 1.0], vec![0.0, 3.0, 1.0, 2.0]];
        let batch = DocBatch::new(&bows, vec![0, 1]).unwrap();
        let report = grad_check_params(
            |g, s| m.elbo(g, s, &bows, &batch, &mut Noise::seeded(9)).unwrap().loss,
            &store,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn global_kl_matches_plain_kl() {
        let (m, store) = build(tiny_config(2, 3), 15);
        let bows = vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 4.0]];
        let mut g = Graph::new();
        let tr = m.encode_global(&mut g, &store, &bows, &mut Noise::seeded(2)).unwrap();
        let kl = m.global_kl(&mut g, &tr);
        let mut want = 0.0;
        for (q, p) in tr.posteriors.iter().zip(&tr.priors) {
            want += kl_diag_gaussian(&q.to_plain(&g), &p.to_plain(&g)).unwrap();
        }
        assert!((g.scalar(kl) - want).abs() < 1e-12);
    }

    #[test]
    fn top_words_examples() {
        let toks: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        let beta = Tensor::matrix(2, 3, &[0.5, 0.3, 0.2, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let top = top_words(&beta, &toks, 2);
        assert_eq!(top[0], vec![0, 1]);
        assert_eq!(top[1], vec![1, 2]);
        let all = top_words(&beta, &toks, 10);
        let mut ids = all[0].clone();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    fn trend_config(k: usize, v: usize, clamp: bool) -> DtmConfig {
        DtmConfig {
            trend: Some(TrendConfig {
                dim_xi: 2,
                delta_xi: 0.1,
                gate_clamp: clamp,
                word_dim: 3,
            }),
            ..tiny_config(k, v)
        }
    }

    #[test]
    fn trend_disabled_is_an_error() {
        let (m, store) = build(tiny_config(2, 3), 16);
        let mut g = Graph::new();
        let r = m.xi_trajectory(&mut g, &store, &[vec![1.0; 3]], &mut Noise::Zero);
        assert!(matches!(r, Err(DtamError::Disabled(_))));
    }

    #[test]
    fn xi_examples() {
        let (m, mut store) = build(trend_config(2, 3, false), 17);
        store.zero_prefix("trend.mean");
        store.zero_prefix("trend.logstd");
        let mut g = Graph::new();
        let bows = vec![vec![1.0, 2.0, 0.0]; 3];
        let xi = m.xi_trajectory(&mut g, &store, &bows, &mut Noise::Zero).unwrap();
        assert!(xi.xi.iter().all(|&x| g.value(x).data().iter().all(|&v| v == 0.0)));

        let (m, store) = build(trend_config(2, 3, false), 18);
        let mut g = Graph::new();
        let xi = m.xi_trajectory(&mut g, &store, &bows, &mut Noise::seeded(1)).unwrap();
        assert!(xi.posteriors.iter().all(|q| q.to_plain(&g).stddev().iter().all(|&s| s > 0.0)));
    }

    #[test]
    fn dynamic_embeddings_examples() {
        let (m, mut store) = build(trend_config(2, 3, false), 19);
        let alpha = store.get(m.gen.alpha).clone();
        store.zero_prefix("trend.mq_alpha");
        let mut g = Graph::new();
        let xi = g.constant(Tensor::matrix(1, 2, &[0.3, -0.4]));
        let a = m.dynamic_topic_embeddings(&mut g, &store, xi).unwrap();
        assert!(g.value(a).max_abs_diff(&alpha) < 1e-15);

        let (m, store) = build(trend_config(2, 3, false), 20);
        let alpha = store.get(m.gen.alpha).clone();
        let tp = m.trend.as_ref().unwrap();
        let (mq, mk) = (store.get(tp.mq_alpha).clone(), store.get(tp.mk_alpha).clone());
        let xi = [0.7, -1.1];
        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(1, 2, &xi));
        let got = m.dynamic_topic_embeddings(&mut g, &store, xv).unwrap();
        for i in 0..2 {
            let mut dot = 0.0;
            for e in 0..3 {
                let q: f64 = (0..2).map(|j| mq.get(e, j) * xi[j]).sum();
                let k: f64 = (0..3).map(|j| mk.get(e, j) * alpha.get(i, j)).sum();
                dot += q * k;
            }
            let gate = (dot / 3f64.sqrt()).exp();
            for e in 0..3 {
                assert!((g.value(got).get(i, e) - gate * alpha.get(i, e)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_overflow_needs_clamp() {
        for clamp in [false, true] {
            let (m, mut store) = build(trend_config(1, 3, clamp), 21);
            let tp = m.trend.clone().unwrap();
            store.set(tp.mq_alpha, Tensor::full(&[3, 2], 100.0)).unwrap();
            store.set(tp.mk_alpha, Tensor::full(&[3, 3], 100.0)).unwrap();
            store.set(m.gen.alpha, Tensor::full(&[1, 3], 1.0)).unwrap();
            let mut g = Graph::new();
            let xi = g.constant(Tensor::matrix(1, 2, &[1.0, 1.0]));
            let r = m.dynamic_topic_embeddings(&mut g, &store, xi);
            assert_eq!(r.is_ok(), clamp);
        }
    }

    #[test]
    fn trend_elbo_gradient() {
        let (m, store) = build(trend_config(2, 4, false), 22);
        let bows = vec![vec![1.0, 0.0, 2.0, 1.0], vec![0.0, 3.0, 1.0, 2.0]];
        let batch = DocBatch::new(&bows, vec![0, 1]).unwrap();
        let report = grad_check_params(
            |g, s| m.elbo(g, s, &bows, &batch, &mut Noise::seeded(4)).unwrap().loss,
            &store,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn glove_rows_are_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        std::fs::write(&path, "b 1 2\nzz 3 4\na 0.5 -0.5\n").unwrap();
        let toks: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut rho = Tensor::full(&[3, 2], 9.0);
        assert_eq!(load_glove(&path, &toks, &mut rho).unwrap(), 2);
        assert_eq!(rho.data(), &[0.5, -0.5, 1.0, 2.0, 9.0, 9.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn likelihood_is_additive(
            a in prop::collection::vec(0u8..4, 5),
            b in prop::collection::vec(0u8..4, 5),
            t in prop::collection::vec(0.01f64..1.0, 3),
        ) {
            let z: f64 = t.iter().sum();
            let theta: Vec<f64> = t.iter().map(|x| x / z).collect();
            let beta = dtam_numcore::prob::softmax_axis(
                &Tensor::matrix(3, 5, &(0..15).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()),
                1,
            ).unwrap();
            let wa: Vec<f64> = a.iter().map(|&x| x as f64).collect();
            let wb: Vec<f64> = b.iter().map(|&x| x as f64).collect();
            let wab: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| x + y).collect();
            let lab = bow_log_likelihood(&wab, &theta, &beta).unwrap();
            let sum = bow_log_likelihood(&wa, &theta, &beta).unwrap() + bow_log_likelihood(&wb, &theta, &beta).unwrap();
            prop_assert!((lab - sum).abs() < 1e-10);
        }
    }
}
