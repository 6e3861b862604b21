//! Gaussian and simplex primitives, in plain and taped form.

use crate::error::{NumError, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Log-stddev outputs of inference networks are clamped to this range before `exp`.
pub const LOG_STD_CLAMP: f64 = 8.0;

/// Softmax of a plain slice, max-subtracted.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    if !out.is_empty() {
        softmax_in_place(&mut out);
    }
    out
}

/// Softmax of a tensor along `axis` (0 = down columns, 1 = across rows).
pub fn softmax_axis(v: &Tensor, axis: usize) -> Result<Tensor> {
    if !v.is_finite() {
        return Err(NumError::NonFinite("softmax input".into()));
    }
    match axis {
        1 => {
            let n = v.cols();
            let mut out = v.clone();
            for row in out.data_mut().chunks_mut(n) {
                softmax_in_place(row);
            }
            Ok(out)
        }
        0 => {
            let t = softmax_axis(&v.transpose(), 1)?.transpose();
            t.reshape(v.shape())
        }
        _ => Err(NumError::Shape(format!("softmax axis {axis} on a matrix"))),
    }
}

/// Diagonal Gaussian with explicit standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        if mean.len() != stddev.len() {
            return Err(NumError::Shape(format!(
                "mean has {} entries, stddev {}",
                mean.len(),
                stddev.len()
            )));
        }
        if let Some(s) = stddev.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(NumError::Domain(format!("stddev must be positive, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(NumError::NonFinite("gaussian mean".into()));
        }
        Ok(Self { mean, stddev })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            stddev: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + stddev ⊙ noise`.
    pub fn reparam_sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(NumError::Shape(format!(
                "noise has {} entries, gaussian {}",
                noise.len(),
                self.dim()
            )));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.stddev)
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect())
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.stddev)
            .zip(x)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -0.5 * (z * z + ln2pi) - s.ln()
            })
            .sum()
    }
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(NumError::Shape(format!(
            "KL between dims {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    Ok(q.mean
        .iter()
        .zip(&q.stddev)
        .zip(p.mean.iter().zip(&p.stddev))
        .map(|((mq, sq), (mp, sp))| {
            let d = mq - mp;
            (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// A Gaussian living on the tape, parameterized by log-stddev.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianVar {
    pub fn stddev(&self, g: &mut Graph) -> Var {
        g.exp(self.log_std)
    }

    /// Reparameterized sample with caller-supplied standard-normal noise.
    pub fn sample(&self, g: &mut Graph, noise: Tensor) -> Var {
        let std = g.exp(self.log_std);
        let eps = g.constant(noise);
        let scaled = g.mul(std, eps);
        g.add(self.mean, scaled)
    }

    /// Plain copy of the (first-row) distribution.
    pub fn to_plain(&self, g: &Graph) -> DiagGaussian {
        let mean = g.value(self.mean).data().to_vec();
        let stddev = g.value(self.log_std).data().iter().map(|l| l.exp()).collect();
        DiagGaussian { mean, stddev }
    }
}

/// `KL(q ‖ p)` summed over every element, on the tape.
pub fn kl_gaussian_var(g: &mut Graph, q: GaussianVar, p: GaussianVar) -> Var {
    // (lp - lq) + (exp(2 lq) + (mq - mp)^2) / (2 exp(2 lp)) - 1/2
    let dlog = g.sub(p.log_std, q.log_std);
    let two_lq = g.scale(q.log_std, 2.0);
    let var_q = g.exp(two_lq);
    let dm = g.sub(q.mean, p.mean);
    let dm2 = g.square(dm);
    let num = g.add(var_q, dm2);
    let neg_two_lp = g.scale(p.log_std, -2.0);
    let inv_var_p = g.exp(neg_two_lp);
    let ratio = g.mul(num, inv_var_p);
    let half = g.scale(ratio, 0.5);
    let t = g.add(dlog, half);
    let t = g.add_scalar(t, -0.5);
    g.sum(t)
}

/// Clamps a raw log-stddev network output to `[-LOG_STD_CLAMP, LOG_STD_CLAMP]`.
pub fn clamp_log_std(g: &mut Graph, raw: Var) -> Var {
    g.clamp(raw, -LOG_STD_CLAMP, LOG_STD_CLAMP)
}

/// Source of standard-normal noise for reparameterized sampling.
///
/// `Zero` turns every sample into its distribution's mean.
#[derive(Clone, Debug)]
pub enum Noise {
    Zero,
    Sampled(Box<ChaCha8Rng>),
}

impl Noise {
    pub fn seeded(seed: u64) -> Self {
        Noise::Sampled(Box::new(ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Noise::Zero)
    }

    pub fn draw(&mut self, rows: usize, cols: usize) -> Tensor {
        match self {
            Noise::Zero => Tensor::zeros(&[rows, cols]),
            Noise::Sampled(rng) => Tensor::standard_normal(&[rows, cols], rng.as_mut()),
        }
    }
}
