//! Evaluation: R², document-completion perplexity, topic coherence and the
//! evaluation report.

use crate::corpus::{completion_split, Bow, CorpusTimeline, Document};
use crate::dtm::bow_log_likelihood;
use crate::error::{DtamError, Result};
use crate::forecast::{ppl_p_forecast, predict_future, ForecastConfig, LatentPath, Prediction, RolloutMode};
use crate::model::{History, Model};
use dtam_numcore::prob::Noise;
use dtam_numcore::{Graph, ParamStore, Tensor};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Coefficient of determination; negative when worse than the mean.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(DtamError::Data(format!(
            "r2 needs equal lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    if target.len() < 2 {
        return Err(DtamError::Data("r2 needs at least two targets".into()));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(DtamError::Data("r2 undefined: targets have zero variance".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, y)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean latent path (posterior means, mean rollout) covering `docs`.
fn mean_path(model: &Model, store: &ParamStore, history: &History, docs: &[&Document]) -> Result<LatentPath> {
    let until = docs.iter().map(|d| d.time_index).max().unwrap_or(0);
    LatentPath::draw(model, store, history, until, RolloutMode::Mean, &mut Noise::Zero)
}

/// Document-completion perplexity: topic proportions are inferred from the
/// first half of each document and score its second half. Documents with
/// fewer than two tokens or an empty second half are excluded.
pub fn ppl_dc(model: &Model, store: &ParamStore, history: &History, docs: &[&Document]) -> Result<f64> {
    let v = model.config.dtm.v;
    let halves: Vec<(&Document, Bow, Bow)> = docs
        .iter()
        .filter_map(|d| completion_split(d).ok().map(|(a, b)| (*d, a, b)))
        .filter(|(_, _, b)| !b.is_empty())
        .collect();
    if halves.is_empty() {
        return Err(DtamError::Data("no documents eligible for completion perplexity".into()));
    }
    let eligible: Vec<&Document> = halves.iter().map(|(d, ..)| *d).collect();
    let path = mean_path(model, store, history, &eligible)?;
    let mut betas = BTreeMap::new();
    let (mut ll, mut ntok) = (0.0, 0.0);
    for chunk in halves.chunks(128) {
        let rows = chunk
            .iter()
            .map(|(d, ..)| path.row(history, d.time_index))
            .collect::<Result<Vec<_>>>()?;
        let eta = Tensor::from_rows(&rows.iter().map(|&r| path.eta[r].clone()).collect::<Vec<_>>())?;
        let first: Vec<Vec<f64>> = chunk.iter().map(|(_, a, _)| a.to_dense(v)).collect();
        let mut g = Graph::new();
        let (theta, ..) = model.theta_posterior(&mut g, store, &eta, &first, &mut Noise::Zero)?;
        let theta = g.value(theta).clone();
        for (i, ((_, _, second), &r)) in chunk.iter().zip(&rows).enumerate() {
            let key = if path.xi.is_some() { r } else { 0 };
            if let std::collections::btree_map::Entry::Vacant(e) = betas.entry(key) {
                let xi = path.xi.as_ref().map(|x| x[r].as_slice());
                e.insert(model.beta_for(store, xi)?);
            }
            ll += bow_log_likelihood(&second.to_dense(v), theta.row(i), &betas[&key])?;
            ntok += second.total() as f64;
        }
    }
    Ok((-ll / ntok).exp())
}

fn top_ids(row: &[f64], n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..row.len()).collect();
    ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    ids.truncate(n);
    ids
}

pub const NPMI_EPS: f64 = 1e-12;

/// Average NPMI of each topic's top words, or `None` for a topic whose
/// pairs were all skipped because a word never occurs in `reference`.
pub fn topic_npmi(beta: &Tensor, reference: &[&Bow], top_n: usize) -> Vec<Option<f64>> {
    let n_docs = reference.len() as f64;
    let tops: Vec<Vec<usize>> = (0..beta.rows()).map(|k| top_ids(beta.row(k), top_n)).collect();
    let mut wanted: Vec<usize> = tops.iter().flatten().copied().collect();
    wanted.sort_unstable();
    wanted.dedup();
    let pos: BTreeMap<usize, usize> = wanted.iter().enumerate().map(|(i, &w)| (w, i)).collect();
    let m = wanted.len();
    let mut df = vec![0.0; m];
    let mut co = vec![0.0; m * m];
    for bow in reference {
        let present: Vec<usize> = bow.entries().iter().filter_map(|(w, _)| pos.get(w).copied()).collect();
        for (a, &i) in present.iter().enumerate() {
            df[i] += 1.0;
            for &j in &present[a + 1..] {
                co[i * m + j] += 1.0;
                co[j * m + i] += 1.0;
            }
        }
    }
    tops.iter()
        .map(|top| {
            let mut scores = Vec::new();
            for (a, &wi) in top.iter().enumerate() {
                for &wj in &top[a + 1..] {
                    let (i, j) = (pos[&wi], pos[&wj]);
                    if df[i] == 0.0 || df[j] == 0.0 {
                        continue;
                    }
                    let (pi, pj, pij) = (df[i] / n_docs, df[j] / n_docs, co[i * m + j] / n_docs);
                    let denom = -(pij + NPMI_EPS).ln();
                    let npmi = if denom <= NPMI_EPS {
                        // Both words appear in every document.
                        1.0
                    } else {
                        ((pij + NPMI_EPS) / (pi * pj)).ln() / denom
                    };
                    scores.push(npmi.clamp(-1.0, 1.0));
                }
            }
            (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

/// Topic coherence averaged over pairs, then over topics.
pub fn topic_coherence(beta: &Tensor, reference: &[&Bow], top_n: usize) -> Result<f64> {
    let per: Vec<f64> = topic_npmi(beta, reference, top_n).into_iter().flatten().collect();
    if per.is_empty() {
        return Err(DtamError::Data("topic coherence: every word pair was skipped".into()));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceR2 {
    pub time_index: usize,
    pub n_docs: usize,
    /// `None` when the slice has fewer than two documents or constant ratings.
    pub r2: Option<f64>,
    /// Running mean of the defined per-slice values up to this slice.
    pub cumulative_r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_docs: usize,
    pub r2: f64,
    pub rmse: f64,
    pub ppl_dc: Option<f64>,
    pub ppl_p: Option<f64>,
    pub tc: Option<f64>,
    pub per_slice: Vec<SliceR2>,
    /// Hash of the model and forecast settings.
    pub fingerprint: String,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_else(|| "NA".into())
}

impl EvalReport {
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("fingerprint", self.fingerprint.clone()),
            ("n_docs", self.n_docs.to_string()),
            ("ppl_dc", opt(self.ppl_dc)),
            ("ppl_p", opt(self.ppl_p)),
            ("r2", self.r2.to_string()),
            ("rmse", self.rmse.to_string()),
            ("slices", self.per_slice.len().to_string()),
            ("tc", opt(self.tc)),
        ] {
            writeln!(s, "{k}={v}").expect("string write");
        }
        s
    }

    pub fn per_slice_csv(&self) -> String {
        let mut s = String::from("time_index,n_docs,r2,cumulative_r2\n");
        for r in &self.per_slice {
            let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{}", r.time_index, r.n_docs, cell(r.r2), cell(r.cumulative_r2))
                .expect("string write");
        }
        s
    }
}

/// Per-slice R² and its running mean.
pub fn per_slice_r2(docs: &[&Document], preds: &[f64]) -> Vec<SliceR2> {
    let mut by_slice: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (d, &p) in docs.iter().zip(preds) {
        let e = by_slice.entry(d.time_index).or_default();
        e.0.push(p);
        e.1.push(d.rating);
    }
    let mut acc = Vec::new();
    by_slice
        .into_iter()
        .map(|(t, (p, y))| {
            let v = r2(&p, &y).ok();
            if let Some(v) = v {
                acc.push(v);
            }
            SliceR2 {
                time_index: t,
                n_docs: p.len(),
                r2: v,
                cumulative_r2: (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub forecast: ForecastConfig,
    pub top_n: usize,
    pub with_perplexity: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            forecast: ForecastConfig {
                mode: RolloutMode::Mean,
                ..ForecastConfig::default()
            },
            top_n: 10,
            with_perplexity: true,
        }
    }
}

/// Scores the prediction split. Coherence uses the history documents as
/// the reference corpus and the topic-word matrix at the last history slice.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    history_tl: &CorpusTimeline,
    prediction: &CorpusTimeline,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let history = model.history(history_tl);
    let docs: Vec<&Document> = prediction.documents().collect();
    let preds = predict_future(model, store, &history, &docs, &cfg.forecast)?;
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let truth: Vec<f64> = docs.iter().map(|d| d.rating).collect();
    let r2_all = r2(&means, &truth)?;
    let rmse = crate::tam::rmse(&means, &truth)?;
    let (mut ppl_dc_v, mut ppl_p_v, mut tc) = (None, None, None);
    if model.dtm.is_some() && cfg.with_perplexity {
        ppl_dc_v = Some(ppl_dc(model, store, &history, &docs)?);
        ppl_p_v = Some(ppl_p_forecast(model, store, &history, &docs, &cfg.forecast)?);
        let xi_last = {
            let path = mean_path(model, store, &history, &[])?;
            path.xi.map(|x| x.last().expect("nonempty history").clone())
        };
        let beta = model.beta_for(store, xi_last.as_deref())?;
        let reference: Vec<&Bow> = history_tl.documents().map(|d| &d.bow).collect();
        tc = topic_coherence(&beta, &reference, cfg.top_n).ok();
    }
    let mut fp = model.config.to_text();
    writeln!(
        fp,
        "n_samples={}\nmode={}\ncondition_future_bow={}\nnoise_free={}\nforecast_seed={}\ntop_n={}",
        cfg.forecast.n_samples,
        cfg.forecast.mode,
        cfg.forecast.condition_future_bow,
        cfg.forecast.noise_free,
        cfg.forecast.seed,
        cfg.top_n
    )
    .expect("string write");
    let report = EvalReport {
        n_docs: docs.len(),
        r2: r2_all,
        rmse,
        ppl_dc: ppl_dc_v,
        ppl_p: ppl_p_v,
        tc,
        per_slice: per_slice_r2(&docs, &means),
        fingerprint: dtam_numcore::blob::sha256_hex(fp.as_bytes()),
    };
    Ok((report, preds))
}
