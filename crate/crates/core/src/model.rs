//! Complete models: the topic model plus a rating head, and their configuration.

use crate::corpus::{CorpusTimeline, Document};
use crate::dtm::{l1_normalize, Dtm, DtmConfig, EtaConditioning, TrendConfig};
use crate::error::{DtamError, Result};
use crate::tam::{
    full_loss, regression_loss, AttentionRegressorParams, DstParams, MlpBowParams, TamConfig, WordStates,
};
use dtam_numcore::nn::{Activation, CellKind};
use dtam_numcore::prob::Noise;
use dtam_numcore::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Topic attention over encoded words.
    Attention,
    /// Regressor on the local latent.
    Dst,
    /// Regressor on an MLP encoding of the counts; no topic model.
    MlpBow,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Attention => "attention",
            HeadKind::Dst => "dst",
            HeadKind::MlpBow => "mlp",
        })
    }
}

impl FromStr for HeadKind {
    type Err = DtamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(HeadKind::Attention),
            "dst" => Ok(HeadKind::Dst),
            "mlp" => Ok(HeadKind::MlpBow),
            _ => Err(DtamError::Config(format!("head must be attention, dst or mlp, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub head: HeadKind,
    /// Collapse the timeline to one slice (static topic proportions).
    pub static_topics: bool,
    /// Topic-model settings; its `trend` field is derived from the fields below.
    pub dtm: DtmConfig,
    pub tam: TamConfig,
    pub trend: bool,
    pub dim_xi: usize,
    pub delta_xi: f64,
    pub trend_gate_clamp: bool,
    /// Seed for parameter initialization.
    pub seed: u64,
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.trim().parse().map_err(|_| DtamError::Config(format!("bad size list {v:?}"))))
        .collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| DtamError::Config(format!("bad value {v:?} for {key}")))
}

impl ModelConfig {
    pub fn new(head: HeadKind, k: usize, v: usize, lm_vocab: usize) -> Self {
        let dtm = DtmConfig::new(k, v);
        let tam = TamConfig::new(lm_vocab, dtm.delta_tr);
        Self {
            head,
            static_topics: false,
            trend: false,
            dim_xi: dtm.dim_eta,
            delta_xi: dtm.delta_tr,
            trend_gate_clamp: false,
            dtm,
            tam,
            seed: 0,
        }
    }

    /// The topic-model configuration actually built.
    pub fn effective_dtm(&self) -> DtmConfig {
        let mut c = self.dtm.clone();
        c.trend = self.trend.then_some(TrendConfig {
            dim_xi: self.dim_xi,
            delta_xi: self.delta_xi,
            gate_clamp: self.trend_gate_clamp,
            word_dim: self.tam.word_hidden,
        });
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_dtm().validate()?;
        self.tam.validate()?;
        if self.trend && self.head != HeadKind::Attention {
            return Err(DtamError::Config("the trend extension needs the attention head".into()));
        }
        Ok(())
    }

    /// Every setting as `(key, value)` in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let d = &self.dtm;
        let t = &self.tam;
        vec![
            ("head", self.head.to_string()),
            ("static_topics", self.static_topics.to_string()),
            ("seed", self.seed.to_string()),
            ("k", d.k.to_string()),
            ("v", d.v.to_string()),
            ("e", d.e.to_string()),
            ("dim_eta", d.dim_eta.to_string()),
            ("dim_zeta", d.dim_zeta.to_string()),
            ("encoder_hidden", fmt_list(&d.encoder_hidden)),
            ("transition_hidden", fmt_list(&d.transition_hidden)),
            ("decoder_hidden", fmt_list(&d.decoder_hidden)),
            ("activation", d.activation.to_string()),
            ("dropout", d.dropout.to_string()),
            ("cell", d.cell.to_string()),
            ("rnn_layers", d.rnn_layers.to_string()),
            ("rnn_hidden", d.rnn_hidden.to_string()),
            ("delta_tr", d.delta_tr.to_string()),
            ("delta_is_variance", d.delta_is_variance.to_string()),
            ("eta_conditioning", d.eta_conditioning.to_string()),
            ("trend", self.trend.to_string()),
            ("dim_xi", self.dim_xi.to_string()),
            ("delta_xi", self.delta_xi.to_string()),
            ("trend_gate_clamp", self.trend_gate_clamp.to_string()),
            ("lm_vocab", t.lm_vocab.to_string()),
            ("lm_dim", t.lm_dim.to_string()),
            ("word_hidden", t.word_hidden.to_string()),
            ("word_layers", t.word_layers.to_string()),
            ("query_hidden", fmt_list(&t.query_hidden)),
            ("regressor_hidden", fmt_list(&t.regressor_hidden)),
            ("head_activation", t.activation.to_string()),
            ("head_dropout", t.dropout.to_string()),
            ("delta_att", t.delta_att.to_string()),
            ("alpha_y", t.alpha_y.to_string()),
            ("residual_outside", t.residual_outside.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.dtm;
        let t = &mut self.tam;
        match key {
            "head" => self.head = parse(key, value)?,
            "static_topics" => self.static_topics = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "k" => d.k = parse(key, value)?,
            "v" => d.v = parse(key, value)?,
            "e" => d.e = parse(key, value)?,
            "dim_eta" => d.dim_eta = parse(key, value)?,
            "dim_zeta" => d.dim_zeta = parse(key, value)?,
            "encoder_hidden" => d.encoder_hidden = parse_list(value)?,
            "transition_hidden" => d.transition_hidden = parse_list(value)?,
            "decoder_hidden" => d.decoder_hidden = parse_list(value)?,
            "activation" => d.activation = value.trim().parse::<Activation>()?,
            "dropout" => d.dropout = parse(key, value)?,
            "cell" => d.cell = value.trim().parse::<CellKind>()?,
            "rnn_layers" => d.rnn_layers = parse(key, value)?,
            "rnn_hidden" => d.rnn_hidden = parse(key, value)?,
            "delta_tr" => d.delta_tr = parse(key, value)?,
            "delta_is_variance" => d.delta_is_variance = parse(key, value)?,
            "eta_conditioning" => d.eta_conditioning = value.trim().parse::<EtaConditioning>()?,
            "trend" => self.trend = parse(key, value)?,
            "dim_xi" => self.dim_xi = parse(key, value)?,
            "delta_xi" => self.delta_xi = parse(key, value)?,
            "trend_gate_clamp" => self.trend_gate_clamp = parse(key, value)?,
            "lm_vocab" => t.lm_vocab = parse(key, value)?,
            "lm_dim" => t.lm_dim = parse(key, value)?,
            "word_hidden" => t.word_hidden = parse(key, value)?,
            "word_layers" => t.word_layers = parse(key, value)?,
            "query_hidden" => t.query_hidden = parse_list(value)?,
            "regressor_hidden" => t.regressor_hidden = parse_list(value)?,
            "head_activation" => t.activation = value.trim().parse::<Activation>()?,
            "head_dropout" => t.dropout = parse(key, value)?,
            "delta_att" => t.delta_att = parse(key, value)?,
            "alpha_y" => t.alpha_y = parse(key, value)?,
            "residual_outside" => t.residual_outside = parse(key, value)?,
            _ => return Err(DtamError::Config(format!("unknown model setting {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::new(HeadKind::Attention, 1, 1, 1);
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DtamError::Config(format!("expected key=value, got {line:?}")))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Attention(AttentionRegressorParams),
    Dst(DstParams),
    MlpBow(MlpBowParams),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dtm: Option<Dtm>,
    pub head: Head,
}

/// The slice-level counts the global chain consumes, with the mapping from
/// absolute slice indices to rows.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub bows: Vec<Vec<f64>>,
    /// Absolute index of the first covered slice.
    pub first_index: usize,
    /// Absolute index of the last covered slice.
    pub last_index: usize,
    pub collapsed: bool,
}

impl History {
    pub fn new(timeline: &CorpusTimeline, collapsed: bool) -> Self {
        let first_index = timeline.start_index();
        let last_index = first_index + timeline.num_slices() - 1;
        let bows = if collapsed {
            let mut w = vec![0.0; timeline.vocab_size()];
            for b in timeline.slice_bows() {
                for (x, y) in w.iter_mut().zip(b) {
                    *x += y;
                }
            }
            vec![w]
        } else {
            timeline.slice_bows().to_vec()
        };
        Self {
            bows,
            first_index,
            last_index,
            collapsed,
        }
    }

    pub fn num_slices(&self) -> usize {
        self.bows.len()
    }

    /// Row of the chain holding absolute slice `time_index`.
    pub fn local(&self, time_index: usize) -> Option<usize> {
        if time_index < self.first_index || time_index > self.last_index {
            return None;
        }
        Some(if self.collapsed { 0 } else { time_index - self.first_index })
    }

    fn local_or_err(&self, d: &Document) -> Result<usize> {
        self.local(d.time_index).ok_or_else(|| {
            DtamError::Data(format!(
                "document {} at slice {} lies outside the history {}..={}",
                d.id, d.time_index, self.first_index, self.last_index
            ))
        })
    }
}

/// Posterior over the global chain, as plain rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorState {
    pub eta: Tensor,
    pub xi: Option<Tensor>,
}

/// Loss components of one minibatch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub recon: Var,
    pub kl_local: Var,
    pub kl_global: Var,
    pub reg: Var,
}

/// Topic embeddings fed to the attention head.
pub enum Alphas {
    Shared(Var),
    PerDoc(Vec<Var>),
}

fn dense_rows(docs: &[&Document], v: usize) -> Vec<Vec<f64>> {
    docs.iter().map(|d| d.bow.to_dense(v)).collect()
}

fn normalized_rows(rows: &[Vec<f64>]) -> Tensor {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| l1_normalize(r)).collect();
    Tensor::from_rows(&rows).expect("equal widths")
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn init(config: ModelConfig) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dtm = match config.head {
            HeadKind::MlpBow => None,
            _ => Some(Dtm::new(config.effective_dtm(), &mut store, &mut rng)?),
        };
        let head = match config.head {
            HeadKind::Attention => Head::Attention(AttentionRegressorParams::new(
                &config.tam,
                config.dtm.e,
                &mut store,
                &mut rng,
            )?),
            HeadKind::Dst => Head::Dst(DstParams::new(&config.tam, config.dtm.dim_zeta, &mut store, &mut rng)),
            HeadKind::MlpBow => Head::MlpBow(MlpBowParams::new(&config.tam, config.dtm.v, &mut store, &mut rng)),
        };
        Ok((Model { config, dtm, head }, store))
    }

    pub fn history(&self, timeline: &CorpusTimeline) -> History {
        History::new(timeline, self.config.static_topics)
    }

    pub fn dtm(&self) -> Result<&Dtm> {
        self.dtm
            .as_ref()
            .ok_or_else(|| DtamError::Disabled("this model has no topic model".into()))
    }

    /// Training objective on a minibatch. The topic-model part is the
    /// per-document negative ELBO of the batch plus the global KL spread over
    /// the `n_train` training documents.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        history: &History,
        docs: &[&Document],
        n_train: usize,
        noise: &mut Noise,
    ) -> Result<LossParts> {
        self.weighted_batch_loss(g, store, history, docs, n_train, noise, 1.0)
    }

    /// [`Model::batch_loss`] with both KL terms scaled by `kl_weight`.
    #[allow(clippy::too_many_arguments)]
    pub fn weighted_batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        history: &History,
        docs: &[&Document],
        n_train: usize,
        noise: &mut Noise,
        kl_weight: f64,
    ) -> Result<LossParts> {
        if docs.is_empty() {
            return Err(DtamError::Data("empty minibatch".into()));
        }
        let ratings: Vec<f64> = docs.iter().map(|d| d.rating).collect();
        let b = docs.len() as f64;
        let Some(dtm) = &self.dtm else {
            let Head::MlpBow(p) = &self.head else { unreachable!("only the MLP head lacks a topic model") };
            let w = g.constant(normalized_rows(&dense_rows(docs, self.config.dtm.v)));
            let r_hat = p.forward(g, store, w)?;
            let reg = regression_loss(g, r_hat, &ratings)?;
            let zero = g.constant(Tensor::scalar(0.0));
            return Ok(LossParts {
                total: reg,
                recon: zero,
                kl_local: zero,
                kl_global: zero,
                reg,
            });
        };
        let slices = docs
            .iter()
            .map(|d| history.local_or_err(d))
            .collect::<Result<Vec<_>>>()?;
        let batch = crate::dtm::DocBatch::new(&dense_rows(docs, dtm.config.v), slices.clone())?;
        let pieces = dtm.elbo_pieces(g, store, &history.bows, &batch, noise)?;
        let alphas = if pieces.slice_alphas.is_empty() {
            Alphas::Shared(g.param(store, dtm.gen.alpha))
        } else {
            Alphas::PerDoc(slices.iter().map(|s| pieces.slice_alphas[s]).collect())
        };
        let r_hat = self.head_forward(g, store, docs, pieces.local.theta, pieces.local.zeta, pieces.w_norm, alphas)?;
        let reg = regression_loss(g, r_hat, &ratings)?;
        let t = pieces.terms;
        let kl_local = g.scale(t.kl_local, kl_weight);
        let local = g.sub(kl_local, t.recon);
        let local = g.scale(local, 1.0 / b);
        let global = g.scale(t.kl_global, kl_weight / n_train.max(1) as f64);
        let tm = g.add(local, global);
        let total = full_loss(g, tm, reg, self.config.tam.alpha_y);
        Ok(LossParts {
            total,
            recon: t.recon,
            kl_local: t.kl_local,
            kl_global: t.kl_global,
            reg,
        })
    }

    /// Rating predictions from given topic proportions and latents.
    #[allow(clippy::too_many_arguments)]
    pub fn head_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        docs: &[&Document],
        theta: Var,
        zeta: Var,
        w_norm: Var,
        alphas: Alphas,
    ) -> Result<Var> {
        match &self.head {
            Head::Attention(p) => {
                let seqs: Vec<&[usize]> = docs.iter().map(|d| d.token_ids.as_slice()).collect();
                let words: WordStates = p.encode_words(g, store, &seqs)?;
                let s = match alphas {
                    Alphas::Shared(alpha) => p.topic_attention_pool(g, store, &words, theta, alpha)?.s,
                    Alphas::PerDoc(per_doc) => {
                        let dtm = self.dtm()?;
                        let rows = per_doc
                            .iter()
                            .enumerate()
                            .map(|(b, &alpha_t)| {
                                let th = g.row(theta, b);
                                p.trendy_attention_pool(g, store, dtm, &words, b, th, alpha_t)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        g.concat_rows(&rows)
                    }
                };
                p.predict_rating(g, store, s)
            }
            Head::Dst(p) => p.forward(g, store, zeta),
            Head::MlpBow(p) => p.forward(g, store, w_norm),
        }
    }

    /// Posterior of the global chain over `history`: the mean with
    /// `Noise::Zero`, a sample otherwise.
    pub fn posterior_state(&self, store: &ParamStore, history: &History, noise: &mut Noise) -> Result<PosteriorState> {
        let dtm = self.dtm()?;
        let mut g = Graph::new();
        let traj = dtm.encode_global(&mut g, store, &history.bows, noise)?;
        let eta = g.value(traj.matrix).clone();
        let xi = match &dtm.trend {
            None => None,
            Some(_) => {
                let xi = dtm.xi_trajectory(&mut g, store, &history.bows, noise)?;
                let m = g.concat_rows(&xi.xi);
                Some(g.value(m).clone())
            }
        };
        Ok(PosteriorState { eta, xi })
    }

    /// Topic embeddings for an optional trend state.
    pub fn alpha_for(&self, g: &mut Graph, store: &ParamStore, xi: Option<&[f64]>) -> Result<Var> {
        let dtm = self.dtm()?;
        match xi {
            None => Ok(g.param(store, dtm.gen.alpha)),
            Some(x) => {
                let xv = g.constant(Tensor::matrix(1, x.len(), x));
                dtm.dynamic_topic_embeddings(g, store, xv)
            }
        }
    }

    /// Topic-word matrix for an optional trend state.
    pub fn beta_for(&self, store: &ParamStore, xi: Option<&[f64]>) -> Result<Tensor> {
        let dtm = self.dtm()?;
        let mut g = Graph::new();
        let alpha = self.alpha_for(&mut g, store, xi)?;
        let b = dtm.beta_from(&mut g, store, alpha);
        Ok(g.value(b).clone())
    }

    /// Topic proportions from the local posterior given `eta` rows and counts.
    pub fn theta_posterior(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        eta_rows: &Tensor,
        counts: &[Vec<f64>],
        noise: &mut Noise,
    ) -> Result<(Var, Var, Var)> {
        let dtm = self.dtm()?;
        let eta = g.constant(eta_rows.clone());
        let w = g.constant(normalized_rows(counts));
        let local = dtm.local(g, store, w, eta, noise)?;
        Ok((local.theta, local.zeta, w))
    }

    /// Topic proportions with `zeta` drawn from its prior given `eta` rows.
    pub fn theta_prior(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        eta_rows: &Tensor,
        noise: &mut Noise,
    ) -> Result<(Var, Var)> {
        let dtm = self.dtm()?;
        let eta = g.constant(eta_rows.clone());
        let prior = dtm.zeta_prior(g, store, eta);
        let zeta = prior.sample(g, noise.draw(eta_rows.rows(), dtm.config.dim_zeta));
        let theta = dtm.decode_theta(g, store, zeta)?;
        Ok((theta, zeta))
    }

    /// Evaluation-mode predictions for documents inside the history window.
    pub fn predict_observed(&self, store: &ParamStore, history: &History, docs: &[&Document]) -> Result<Vec<f64>> {
        let state = match self.dtm {
            Some(_) => Some(self.posterior_state(store, history, &mut Noise::Zero)?),
            None => None,
        };
        let mut out = Vec::with_capacity(docs.len());
        for chunk in docs.chunks(128) {
            let mut g = Graph::new();
            let counts = dense_rows(chunk, self.config.dtm.v);
            let r = match &state {
                None => {
                    let w = g.constant(normalized_rows(&counts));
                    let zero = g.constant(Tensor::zeros(&[chunk.len(), 1]));
                    self.head_forward(&mut g, store, chunk, zero, zero, w, Alphas::PerDoc(Vec::new()))?
                }
                Some(state) => {
                    let slices = chunk
                        .iter()
                        .map(|d| history.local_or_err(d))
                        .collect::<Result<Vec<_>>>()?;
                    let rows: Vec<Vec<f64>> = slices.iter().map(|&s| state.eta.row(s).to_vec()).collect();
                    let eta = Tensor::from_rows(&rows)?;
                    let (theta, zeta, w) = self.theta_posterior(&mut g, store, &eta, &counts, &mut Noise::Zero)?;
                    let alphas = self.alphas_for_rows(&mut g, store, state.xi.as_ref(), &slices)?;
                    self.head_forward(&mut g, store, chunk, theta, zeta, w, alphas)?
                }
            };
            out.extend_from_slice(g.value(r).data());
        }
        Ok(out)
    }

    /// Shared embeddings, or per-document dynamic ones read from `xi` rows.
    pub fn alphas_for_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xi: Option<&Tensor>,
        rows: &[usize],
    ) -> Result<Alphas> {
        match xi {
            None => Ok(Alphas::Shared(self.alpha_for(g, store, None)?)),
            Some(xi) => {
                let mut cache = std::collections::BTreeMap::new();
                let mut out = Vec::with_capacity(rows.len());
                for &r in rows {
                    let a = match cache.get(&r) {
                        Some(&a) => a,
                        None => {
                            let a = self.alpha_for(g, store, Some(xi.row(r)))?;
                            cache.insert(r, a);
                            a
                        }
                    };
                    out.push(a);
                }
                Ok(Alphas::PerDoc(out))
            }
        }
    }
}
