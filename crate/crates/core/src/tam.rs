//! Word encoding, topic-attention pooling and rating regression heads.

use crate::dtm::{Dtm, TrendParams};
use crate::error::{DtamError, Result};
use dtam_numcore::nn::{Activation, GruParams, MlpParams};
use dtam_numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TamConfig {
    pub lm_vocab: usize,
    pub lm_dim: usize,
    pub word_hidden: usize,
    pub word_layers: usize,
    pub query_hidden: Vec<usize>,
    pub regressor_hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub delta_att: f64,
    pub alpha_y: f64,
    /// Trendy pool adds one mean residual instead of the in-sum residual.
    pub residual_outside: bool,
}

impl TamConfig {
    pub fn new(lm_vocab: usize, delta_att: f64) -> Self {
        Self {
            lm_vocab,
            lm_dim: 128,
            word_hidden: 128,
            word_layers: 1,
            query_hidden: vec![256, 256],
            regressor_hidden: vec![256, 256],
            activation: Activation::Relu,
            dropout: 0.3,
            delta_att,
            alpha_y: 1.0,
            residual_outside: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lm_vocab, self.lm_dim, self.word_hidden, self.word_layers].contains(&0) {
            return Err(DtamError::Config("word encoder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.delta_att) {
            return Err(DtamError::Config(format!("delta_att must lie in [0, 1), got {}", self.delta_att)));
        }
        if !(self.alpha_y >= 0.0 && self.alpha_y.is_finite()) {
            return Err(DtamError::Config("alpha_y must be nonnegative".into()));
        }
        Ok(())
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

#[derive(Clone, Debug)]
pub struct AttentionRegressorParams {
    pub embeddings: ParamId,
    pub encoder: GruParams,
    pub query: MlpParams,
    pub regressor: MlpParams,
    pub delta_att: f64,
    pub alpha_y: f64,
    pub residual_outside: bool,
}

/// Hidden states of a padded batch. `states[j]` is `B × H`; `mask[j·B + b]`
/// tells whether position `j` exists in document `b`.
#[derive(Clone, Debug)]
pub struct WordStates {
    pub states: Vec<Var>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl WordStates {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.states.len()
    }
}

/// Pooled batch: `s` is `B × H`, `attention` is `(M·B) × K` laid out like the mask.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub s: Var,
    pub attention: Var,
}

/// Plain pooled representation of one document.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRepresentation {
    pub s: Vec<f64>,
    /// `K × M`, each row summing to 1.
    pub attention_weights: Tensor,
    pub theta_used: Vec<f64>,
}

impl AttentionRegressorParams {
    pub fn new<R: Rng + ?Sized>(
        cfg: &TamConfig,
        topic_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let embeddings = store.add("tam.embeddings", Tensor::standard_normal(&[cfg.lm_vocab, cfg.lm_dim], rng).map(|x| 0.1 * x));
        let encoder = GruParams::new(
            store,
            "tam.encoder",
            cfg.lm_dim,
            cfg.word_hidden,
            cfg.word_layers,
            cfg.dropout,
            rng,
        );
        let query = MlpParams::new(
            store,
            "tam.query",
            &sizes(cfg.word_hidden, &cfg.query_hidden, topic_dim),
            cfg.activation,
            cfg.dropout,
            rng,
        );
        let regressor = regressor(store, "tam.regressor", cfg.word_hidden, cfg, rng);
        Ok(Self {
            embeddings,
            encoder,
            query,
            regressor,
            delta_att: cfg.delta_att,
            alpha_y: cfg.alpha_y,
            residual_outside: cfg.residual_outside,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.encoder.hidden_size()
    }

    /// Embeds and encodes a batch of token sequences, padding with id 0.
    pub fn encode_words(&self, g: &mut Graph, store: &ParamStore, docs: &[&[usize]]) -> Result<WordStates> {
        if docs.is_empty() {
            return Err(DtamError::Data("empty batch".into()));
        }
        let vocab = store.get(self.embeddings).rows();
        for (b, d) in docs.iter().enumerate() {
            if d.is_empty() {
                return Err(DtamError::Data(format!("document {b} of the batch has no tokens")));
            }
            if let Some(&bad) = d.iter().find(|&&t| t >= vocab) {
                return Err(DtamError::Data(format!("token id {bad} outside the vocabulary of {vocab}")));
            }
        }
        let m = docs.iter().map(|d| d.len()).max().expect("nonempty");
        let bsz = docs.len();
        let table = g.param(store, self.embeddings);
        let inputs: Vec<Var> = (0..m)
            .map(|j| {
                let ids: Vec<usize> = docs.iter().map(|d| d.get(j).copied().unwrap_or(0)).collect();
                g.gather_rows(table, &ids)
            })
            .collect();
        let states = self.encoder.sequence(g, store, &inputs, None)?;
        let mut mask = vec![false; m * bsz];
        for (b, d) in docs.iter().enumerate() {
            for j in 0..d.len() {
                mask[j * bsz + b] = true;
            }
        }
        Ok(WordStates {
            states,
            mask,
            lengths: docs.iter().map(|d| d.len()).collect(),
        })
    }

    /// `s_b = Σ_j Σ_i (θ_bi − δ) a_{i,j} u_j` with `a_{i,·} = softmax_j(q(u_j)·α_i)`.
    pub fn topic_attention_pool(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        words: &WordStates,
        theta: Var,
        alpha: Var,
    ) -> Result<Pooled> {
        let m = words.max_len();
        let u = g.concat_rows(&words.states);
        let q = self.query.apply(g, store, u)?;
        let scores = g.matmul_nt(q, alpha);
        let attention = g.block_softmax(scores, m, &words.mask);
        let offset = g.add_scalar(theta, -self.delta_att);
        let tiled = g.tile_rows(offset, m);
        let weighted = g.mul(attention, tiled);
        let w = g.sum_cols(weighted);
        let scaled = g.mul_col(u, w);
        let s = g.block_sum_rows(scaled, m);
        Ok(Pooled { s, attention })
    }

    /// Trendy summary for one document of the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn trendy_attention_pool(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dtm: &Dtm,
        words: &WordStates,
        b: usize,
        theta_b: Var,
        alpha_t: Var,
    ) -> Result<Var> {
        let tp: &TrendParams = dtm
            .trend
            .as_ref()
            .ok_or_else(|| DtamError::Disabled("trend extension is not enabled".into()))?;
        let len = words.lengths[b];
        let bsz = words.batch_size();
        let rows: Vec<Var> = (0..len).map(|j| g.row(words.states[j], b)).collect();
        let u = g.concat_rows(&rows);
        let mq = g.param(store, tp.mq_u);
        let mk = g.param(store, tp.mk_u);
        let mv = g.param(store, tp.mv_u);
        let queries = g.matmul_nt(alpha_t, mq);
        let keys = g.matmul_nt(u, mk);
        let scores = g.matmul_nt(queries, keys);
        let scores = g.scale(scores, 1.0 / (dtm.config.e as f64).sqrt());
        let att = g.softmax_rows(scores);
        let values = g.matmul_nt(u, mv);
        let mixed = g.matmul(theta_b, att);
        let pooled = g.matmul(mixed, values);
        let usum = g.sum_rows(u);
        let residual = if self.residual_outside {
            g.scale(usum, 1.0 / len as f64)
        } else {
            g.scale(usum, dtm.config.k as f64)
        };
        debug_assert!(b < bsz);
        Ok(g.add(pooled, residual))
    }

    pub fn predict_rating(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var> {
        let z = self.regressor.apply(g, store, s)?;
        Ok(g.sigmoid(z))
    }

    /// Plain summaries for inspection.
    pub fn summaries(g: &Graph, pooled: &Pooled, words: &WordStates, theta: Var) -> Vec<SummaryRepresentation> {
        let bsz = words.batch_size();
        let att = g.value(pooled.attention);
        let k = att.cols();
        (0..bsz)
            .map(|b| {
                let len = words.lengths[b];
                let mut w = Vec::with_capacity(k * len);
                for i in 0..k {
                    for j in 0..len {
                        w.push(att.get(j * bsz + b, i));
                    }
                }
                SummaryRepresentation {
                    s: g.value(pooled.s).row(b).to_vec(),
                    attention_weights: Tensor::matrix(k, len, &w),
                    theta_used: g.value(theta).row(b).to_vec(),
                }
            })
            .collect()
    }
}

/// `K × M` attention weights as CSV, one topic per row.
pub fn attention_csv(summary: &SummaryRepresentation) -> String {
    let a = &summary.attention_weights;
    let mut out = String::new();
    for i in 0..a.rows() {
        let row: Vec<String> = a.row(i).iter().map(|x| format!("{x}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn regressor<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, cfg: &TamConfig, rng: &mut R) -> MlpParams {
    MlpParams::new(
        store,
        name,
        &sizes(input, &cfg.regressor_hidden, 1),
        cfg.activation,
        cfg.dropout,
        rng,
    )
}

/// Regressor on the local latent.
#[derive(Clone, Debug)]
pub struct DstParams {
    pub regressor: MlpParams,
}

impl DstParams {
    pub fn new<R: Rng + ?Sized>(cfg: &TamConfig, dim_zeta: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            regressor: regressor(store, "dst.regressor", dim_zeta, cfg, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, zeta: Var) -> Result<Var> {
        let z = self.regressor.apply(g, store, zeta)?;
        Ok(g.sigmoid(z))
    }
}

/// MLP encoder on normalized counts followed by a regressor.
#[derive(Clone, Debug)]
pub struct MlpBowParams {
    pub encoder: MlpParams,
    pub regressor: MlpParams,
}

impl MlpBowParams {
    pub fn new<R: Rng + ?Sized>(cfg: &TamConfig, v: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let encoder = MlpParams::new(
            store,
            "mlp.encoder",
            &sizes(v, &cfg.query_hidden, cfg.word_hidden),
            cfg.activation,
            cfg.dropout,
            rng,
        );
        Self {
            encoder,
            regressor: regressor(store, "mlp.regressor", cfg.word_hidden, cfg, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, w_norm: Var) -> Result<Var> {
        let h = self.encoder.apply(g, store, w_norm)?;
        let h = g.relu(h);
        let z = self.regressor.apply(g, store, h)?;
        Ok(g.sigmoid(z))
    }
}

/// `sqrt(mean((r_hat - r)^2))` on the tape; `r_hat` is `n × 1`.
pub fn regression_loss(g: &mut Graph, r_hat: Var, r: &[f64]) -> Result<Var> {
    if r.is_empty() {
        return Err(DtamError::Data("regression loss over zero examples".into()));
    }
    if g.value(r_hat).len() != r.len() {
        return Err(DtamError::Data("prediction and target counts differ".into()));
    }
    let target = g.constant(Tensor::matrix(r.len(), 1, r));
    let d = g.sub(r_hat, target);
    let sq = g.square(d);
    let m = g.mean(sq);
    Ok(g.sqrt(m))
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(DtamError::Data("RMSE needs equal nonzero lengths".into()));
    }
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// `L_TM + alpha_y · L_r`.
pub fn full_loss(g: &mut Graph, tm_loss: Var, reg_loss: Var, alpha_y: f64) -> Var {
    let r = g.scale(reg_loss, alpha_y);
    g.add(tm_loss, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtm::{DtmConfig, TrendConfig};
    use dtam_numcore::gradcheck::grad_check_params;
    use dtam_numcore::nn::CellKind;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(delta_att: f64) -> TamConfig {
        TamConfig {
            lm_dim: 3,
            word_hidden: 4,
            query_hidden: vec![],
            regressor_hidden: vec![3],
            activation: Activation::Tanh,
            dropout: 0.0,
            ..TamConfig::new(6, delta_att)
        }
    }

    fn build(cfg: &TamConfig, e: usize, seed: u64) -> (AttentionRegressorParams, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionRegressorParams::new(cfg, e, &mut store, &mut rng).unwrap();
        (p, store)
    }

    #[test]
    fn encode_words_examples() {
        let (p, mut store) = build(&tiny(0.0), 2, 0);
        let mut g = Graph::new();
        let w = p.encode_words(&mut g, &store, &[&[3]]).unwrap();
        assert_eq!(w.max_len(), 1);
        let mut g2 = Graph::new();
        let x = g2.param(&store, p.embeddings);
        let x = g2.row(x, 3);
        let h0 = g2.constant(Tensor::zeros(&[1, 4]));
        let h = p.encoder.layers[0].step(&mut g2, &store, x, h0);
        assert_eq!(g.value(w.states[0]), g2.value(h));

        store.zero_prefix("tam.encoder");
        let mut g = Graph::new();
        let w = p.encode_words(&mut g, &store, &[&[1, 2, 3]]).unwrap();
        assert!(w.states.iter().all(|&s| g.value(s).data().iter().all(|&x| x == 0.0)));

        let mut g = Graph::new();
        let w = p.encode_words(&mut g, &store, &[&[1, 2, 3, 4, 5], &[0, 1]]).unwrap();
        assert_eq!(w.lengths, vec![5, 2]);
        assert_eq!(w.mask.iter().filter(|&&m| m).count(), 7);
        assert!(p.encode_words(&mut g, &store, &[&[]]).is_err());
    }

    #[test]
    fn padding_does_not_change_real_states() {
        let (p, store) = build(&tiny(0.0), 2, 1);
        let mut g = Graph::new();
        let alone = p.encode_words(&mut g, &store, &[&[2, 4]]).unwrap();
        let padded = p.encode_words(&mut g, &store, &[&[1, 1, 1, 1], &[2, 4]]).unwrap();
        for j in 0..2 {
            assert_eq!(g.value(alone.states[j]).row(0), g.value(padded.states[j]).row(1));
        }
    }

    fn pool_plain(
        p: &AttentionRegressorParams,
        store: &ParamStore,
        docs: &[&[usize]],
        theta: &Tensor,
        alpha: &Tensor,
    ) -> (Tensor, Vec<SummaryRepresentation>, Vec<Vec<Vec<f64>>>) {
        let mut g = Graph::new();
        let w = p.encode_words(&mut g, store, docs).unwrap();
        let th = g.constant(theta.clone());
        let al = g.constant(alpha.clone());
        let pooled = p.topic_attention_pool(&mut g, store, &w, th, al).unwrap();
        let sums = AttentionRegressorParams::summaries(&g, &pooled, &w, th);
        let u: Vec<Vec<Vec<f64>>> = (0..docs.len())
            .map(|b| (0..w.lengths[b]).map(|j| g.value(w.states[j]).row(b).to_vec()).collect())
            .collect();
        (g.value(pooled.s).clone(), sums, u)
    }

    #[test]
    fn single_word_single_topic_returns_u() {
        let (p, store) = build(&tiny(0.0), 2, 2);
        let (s, _, u) = pool_plain(&p, &store, &[&[3]], &Tensor::matrix(1, 1, &[1.0]), &Tensor::matrix(1, 2, &[0.3, 0.1]));
        assert_eq!(s.row(0), u[0][0].as_slice());
    }

    #[test]
    fn offset_equal_to_uniform_theta_vanishes() {
        let (p, store) = build(&tiny(0.25), 2, 3);
        let theta = Tensor::full(&[1, 4], 0.25);
        let alpha = Tensor::matrix(4, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]);
        let (s, _, _) = pool_plain(&p, &store, &[&[1, 2, 3]], &theta, &alpha);
        assert!(s.data().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn four_term_expansion() {
        let (p, store) = build(&tiny(0.1), 2, 4);
        let theta = Tensor::matrix(1, 2, &[0.7, 0.3]);
        let alpha = Tensor::matrix(2, 2, &[0.5, -1.0, 1.5, 0.25]);
        let (s, sums, u) = pool_plain(&p, &store, &[&[1, 4]], &theta, &alpha);
        // Hand expansion: a_{i,j} = exp(q_j·α_i) / Σ_j' exp(q_j'·α_i).
        let mut g = Graph::new();
        let q: Vec<Vec<f64>> = u[0]
            .iter()
            .map(|uj| {
                let x = g.constant(Tensor::matrix(1, 4, uj));
                let y = p.query.apply(&mut g, &store, x).unwrap();
                g.value(y).data().to_vec()
            })
            .collect();
        let dot = |j: usize, i: usize| q[j][0] * alpha.get(i, 0) + q[j][1] * alpha.get(i, 1);
        let a = |i: usize, j: usize| dot(j, i).exp() / (dot(0, i).exp() + dot(1, i).exp());
        for (h, (u0, u1)) in u[0][0].iter().zip(&u[0][1]).enumerate() {
            let want = (0.7 - 0.1) * a(0, 0) * u0
                + (0.7 - 0.1) * a(0, 1) * u1
                + (0.3 - 0.1) * a(1, 0) * u0
                + (0.3 - 0.1) * a(1, 1) * u1;
            assert!((s.get(0, h) - want).abs() < 1e-14);
        }
        assert!((sums[0].attention_weights.get(1, 0) - a(1, 0)).abs() < 1e-14);
        assert!(attention_csv(&sums[0]).lines().count() == 2);
    }

    #[test]
    fn batched_pool_matches_single_documents() {
        let (p, store) = build(&tiny(0.05), 3, 5);
        let theta = Tensor::matrix(2, 2, &[0.6, 0.4, 0.1, 0.9]);
        let alpha = Tensor::matrix(2, 3, &[0.2, -0.4, 0.9, 1.1, 0.3, -0.2]);
        let docs: [&[usize]; 2] = [&[1, 2, 3, 4], &[5, 0]];
        let (s, sums, _) = pool_plain(&p, &store, &docs, &theta, &alpha);
        for b in 0..2 {
            let th = Tensor::matrix(1, 2, theta.row(b));
            let (sb, one, _) = pool_plain(&p, &store, &docs[b..b + 1], &th, &alpha);
            for h in 0..4 {
                assert!((s.get(b, h) - sb.get(0, h)).abs() < 1e-13);
            }
            assert!(sums[b].attention_weights.max_abs_diff(&one[0].attention_weights) < 1e-13);
        }
    }

    #[test]
    fn rating_head_examples() {
        let (p, mut store) = build(&tiny(0.0), 2, 6);
        store.zero_prefix("tam.regressor");
        let mut g = Graph::new();
        let s = g.constant(Tensor::matrix(2, 4, &[1.0, -2.0, 3.0, 0.5, 100.0, 0.0, 0.0, 0.0]));
        let r = p.predict_rating(&mut g, &store, s).unwrap();
        assert_eq!(g.value(r).data(), &[0.5, 0.5]);
        let (p, store) = build(&tiny(0.0), 2, 7);
        let mut g = Graph::new();
        let s = g.constant(Tensor::matrix(1, 4, &[1e3, -1e3, 1e3, 1e3]));
        let r = { let v = p.predict_rating(&mut g, &store, s).unwrap(); g.scalar(v) };
        assert!(r > 0.0 && r < 1.0);
    }

    #[test]
    fn regression_loss_examples() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::matrix(2, 1, &[0.3, 0.7]));
        assert_eq!({ let v = regression_loss(&mut g, r, &[0.3, 0.7]).unwrap(); g.scalar(v) }, 0.0);
        let r = g.constant(Tensor::matrix(1, 1, &[0.5]));
        assert_eq!({ let v = regression_loss(&mut g, r, &[0.0]).unwrap(); g.scalar(v) }, 0.5);
        let r = g.constant(Tensor::matrix(2, 1, &[0.0, 1.0]));
        assert_eq!({ let v = regression_loss(&mut g, r, &[1.0, 0.0]).unwrap(); g.scalar(v) }, 1.0);
        assert!(regression_loss(&mut g, r, &[]).is_err());
        assert_eq!(rmse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn full_loss_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(3.0));
        assert_eq!({ let v = full_loss(&mut g, a, b, 0.0); g.scalar(v) }, 2.0);
        let l = full_loss(&mut g, a, b, 1.0);
        assert_eq!(g.scalar(l), 5.0);
        let grads = g.backward(l);
        assert_eq!(grads.wrt(a).unwrap().item(), 1.0);
        assert_eq!(grads.wrt(b).unwrap().item(), 1.0);
    }

    #[test]
    fn baseline_heads() {
        let cfg = tiny(0.0);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dst = DstParams::new(&cfg, 2, &mut store, &mut rng);
        let mlp = MlpBowParams::new(&cfg, 5, &mut store, &mut rng);
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, &[0.4, -0.1]));
        let a = { let v = dst.forward(&mut g, &store, z).unwrap(); g.scalar(v) };
        let b = { let v = dst.forward(&mut g, &store, z).unwrap(); g.scalar(v) };
        assert_eq!(a, b);
        let bad = g.constant(Tensor::matrix(1, 3, &[0.0; 3]));
        assert!(dst.forward(&mut g, &store, bad).is_err());
        let mut zeroed = store.clone();
        zeroed.zero_all();
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, &[0.4, -0.1]));
        let w = g.constant(Tensor::matrix(1, 5, &[0.2; 5]));
        assert_eq!({ let v = dst.forward(&mut g, &zeroed, z).unwrap(); g.scalar(v) }, 0.5);
        assert_eq!({ let v = mlp.forward(&mut g, &zeroed, w).unwrap(); g.scalar(v) }, 0.5);
    }

    fn trend_dtm(k: usize) -> (Dtm, AttentionRegressorParams, ParamStore) {
        let dcfg = DtmConfig {
            e: 3,
            encoder_hidden: vec![],
            transition_hidden: vec![],
            decoder_hidden: vec![],
            dropout: 0.0,
            cell: CellKind::Gru,
            rnn_layers: 1,
            rnn_hidden: 2,
            trend: Some(TrendConfig {
                dim_xi: 2,
                delta_xi: 0.1,
                gate_clamp: false,
                word_dim: 4,
            }),
            ..DtmConfig::new(k, 5)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dtm = Dtm::new(dcfg, &mut store, &mut rng).unwrap();
        let p = AttentionRegressorParams::new(&tiny(0.0), 3, &mut store, &mut rng).unwrap();
        (dtm, p, store)
    }

    #[test]
    fn trendy_pool_examples() {
        let (dtm, p, mut store) = trend_dtm(1);
        store.zero_prefix("trend.mq_u");
        store.zero_prefix("trend.mk_u");
        store.zero_prefix("trend.mv_u");
        let mut g = Graph::new();
        let w = p.encode_words(&mut g, &store, &[&[2]]).unwrap();
        let th = g.constant(Tensor::matrix(1, 1, &[1.0]));
        let al = g.constant(Tensor::matrix(1, 3, &[0.1, 0.2, 0.3]));
        let s = p.trendy_attention_pool(&mut g, &store, &dtm, &w, 0, th, al).unwrap();
        assert_eq!(g.value(s).data(), g.value(w.states[0]).data());

        let (dtm, p, mut store) = trend_dtm(1);
        store.zero_prefix("trend.mq_u");
        let mut g = Graph::new();
        let w = p.encode_words(&mut g, &store, &[&[2, 3, 5]]).unwrap();
        let th = g.constant(Tensor::matrix(1, 1, &[1.0]));
        let al = g.constant(Tensor::matrix(1, 3, &[0.1, 0.2, 0.3]));
        let s = p.trendy_attention_pool(&mut g, &store, &dtm, &w, 0, th, al).unwrap();
        for h in 0..4 {
            let sum: f64 = (0..3).map(|j| g.value(w.states[j]).get(0, h)).sum();
            assert!((g.value(s).get(0, h) - (sum / 3.0 + sum)).abs() < 1e-14);
        }
    }

    #[test]
    fn trendy_residual_outside_is_mean() {
        let (dtm, mut p, mut store) = trend_dtm(2);
        p.residual_outside = true;
        store.zero_prefix("trend.mv_u");
        let mut g = Graph::new();
        let w = p.encode_words(&mut g, &store, &[&[2, 3]]).unwrap();
        let th = g.constant(Tensor::matrix(1, 2, &[0.5, 0.5]));
        let al = g.constant(Tensor::matrix(2, 3, &[0.1, 0.2, 0.3, 0.0, 1.0, 0.0]));
        let s = p.trendy_attention_pool(&mut g, &store, &dtm, &w, 0, th, al).unwrap();
        for h in 0..4 {
            let mean: f64 = (0..2).map(|j| g.value(w.states[j]).get(0, h)).sum::<f64>() / 2.0;
            assert!((g.value(s).get(0, h) - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        let (p, mut store) = build(&tiny(0.1), 2, 10);
        let inputs = [
            store.add("u0", Tensor::matrix(2, 4, &[0.1, -0.2, 0.3, 0.4, 0.5, 0.0, -0.3, 0.2])),
            store.add("u1", Tensor::matrix(2, 4, &[-0.1, 0.2, 0.6, -0.4, 0.0, 0.0, 0.0, 0.0])),
            store.add("theta", Tensor::matrix(2, 3, &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3])),
            store.add("alpha", Tensor::matrix(3, 2, &[0.4, -0.3, 0.2, 0.9, -0.5, 0.1])),
        ];
        let report = grad_check_params(
            |g, s| {
                let x: Vec<Var> = inputs.iter().map(|&id| g.param(s, id)).collect();
                let words = WordStates {
                    states: vec![x[0], x[1]],
                    mask: vec![true, true, true, false],
                    lengths: vec![2, 1],
                };
                let pooled = p.topic_attention_pool(g, s, &words, x[2], x[3]).unwrap();
                let r = p.predict_rating(g, s, pooled.s).unwrap();
                regression_loss(g, r, &[0.3, 0.9]).unwrap()
            },
            &store,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pool_is_linear_in_offset_theta(
            a in prop::collection::vec(0.01f64..1.0, 3),
            b in prop::collection::vec(0.01f64..1.0, 3),
            lambda in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let (p, store) = build(&tiny(0.2), 2, seed);
            let norm = |v: &[f64]| { let z: f64 = v.iter().sum(); v.iter().map(|x| x / z).collect::<Vec<_>>() };
            let (ta, tb) = (norm(&a), norm(&b));
            let mix: Vec<f64> = ta.iter().zip(&tb).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
            let alpha = Tensor::matrix(3, 2, &[0.3, -0.2, 0.8, 0.1, -0.4, 0.6]);
            let run = |t: &[f64]| pool_plain(&p, &store, &[&[1, 3, 2]], &Tensor::matrix(1, 3, t), &alpha);
            let (sa, sums, _) = run(&ta);
            let (sb, _, _) = run(&tb);
            let (sm, _, _) = run(&mix);
            for h in 0..4 {
                let want = lambda * sa.get(0, h) + (1.0 - lambda) * sb.get(0, h);
                prop_assert!((sm.get(0, h) - want).abs() < 1e-12);
            }
            for i in 0..3 {
                let row = sums[0].attention_weights.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
