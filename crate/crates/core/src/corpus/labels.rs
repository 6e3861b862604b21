//! Min-max rating scaling.

use super::ingest::RawDocument;
use crate::error::{DtamError, Result};

pub const DEFAULT_LABEL_CAP: f64 = 50_000.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelScaler {
    pub min: f64,
    pub max: f64,
}

impl LabelScaler {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(DtamError::Data(format!(
                "degenerate label range [{min}, {max}]; labels must not all be equal"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn fit(labels: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (lo, hi) = labels
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        Self::new(lo, hi)
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    /// Scaled value clamped into `[0, 1]`, for labels outside the fitted range.
    pub fn transform_clamped(&self, x: f64) -> f64 {
        self.transform(x).clamp(0.0, 1.0)
    }

    pub fn inverse(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

/// Drops documents above `cap` and min-max scales the rest, fitting only on
/// the documents selected by `fit_on`. Labels outside the fitted range clamp.
pub fn normalize_labels_fit_on(
    docs: Vec<RawDocument>,
    cap: f64,
    fit_on: impl Fn(&RawDocument) -> bool,
) -> Result<(Vec<RawDocument>, LabelScaler)> {
    if let Some(d) = docs.iter().find(|d| d.label < 0.0) {
        return Err(DtamError::Data(format!("document {} has a negative label", d.id)));
    }
    let kept: Vec<RawDocument> = docs.into_iter().filter(|d| d.label <= cap).collect();
    let scaler = LabelScaler::fit(kept.iter().filter(|d| fit_on(d)).map(|d| d.label))?;
    let scaled = kept
        .into_iter()
        .map(|mut d| {
            d.label = scaler.transform_clamped(d.label);
            d
        })
        .collect();
    Ok((scaled, scaler))
}

pub fn normalize_labels(docs: Vec<RawDocument>, cap: f64) -> Result<(Vec<RawDocument>, LabelScaler)> {
    normalize_labels_fit_on(docs, cap, |_| true)
}
