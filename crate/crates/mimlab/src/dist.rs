//! Diagonal Gaussians, finite Gaussian mixtures, and anchor distributions.
//!
//! Parameter bundles here are plain values. Anchors never carry graph
//! nodes: they are fixed by definition and sampled outside the tape. The
//! `*_rows` helpers build differentiable log-density and reparameterized
//! sampling graphs on a [`Tape`] for whole batches at once.

use crate::autodiff::{AdResult, Tape, Tensor, Var, HALF_LN_2PI};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use thiserror::Error;

/// log-std values are clamped to this range at construction and at every
/// network head; it keeps densities finite without affecting any quantity
/// of interest at desk scale.
pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 7.0;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("mixture needs at least one component")]
    EmptyMixture,
    #[error("empirical anchor has no data")]
    EmptyEmpirical,
}

pub type DistResult<T> = Result<T, DistError>;

/// Factored Gaussian with per-dimension mean and log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Tensor,
    log_std: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, log_std: Tensor) -> DistResult<Self> {
        if mean.shape().len() != 1 || log_std.shape().len() != 1 || mean.len() != log_std.len() {
            return Err(DistError::DimMismatch(format!(
                "mean {:?} vs log_std {:?}",
                mean.shape(),
                log_std.shape()
            )));
        }
        let mut log_std = log_std;
        for v in log_std.data_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian { mean: Tensor::zeros(&[dim]), log_std: Tensor::zeros(&[dim]) }
    }

    /// Isotropic Gaussian with the given mean and scalar std.
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let d = mean.len();
        DiagGaussian::new(Tensor::vector(mean), Tensor::filled(&[d], std.ln())).expect("isotropic")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn log_std(&self) -> &Tensor {
        &self.log_std
    }

    /// Log density at `x`: sum_i [-log_std_i - ln(2*pi)/2
    /// - ((x_i - mean_i) / exp(log_std_i))^2 / 2].
    pub fn log_prob(&self, x: &[f64]) -> DistResult<f64> {
        if x.len() != self.dim() {
            return Err(DistError::DimMismatch(format!("x has dim {}, expected {}", x.len(), self.dim())));
        }
        let mut lp = 0.0;
        for i in 0..x.len() {
            let ls = self.log_std.data()[i];
            let z = (x[i] - self.mean.data()[i]) * (-ls).exp();
            lp += -ls - HALF_LN_2PI - 0.5 * z * z;
        }
        Ok(lp)
    }

    /// Reparameterized draw: `mean + exp(log_std) * noise`.
    pub fn sample_with_noise(&self, noise: &[f64]) -> DistResult<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(DistError::DimMismatch(format!("noise has dim {}, expected {}", noise.len(), self.dim())));
        }
        Ok((0..self.dim())
            .map(|i| self.mean.data()[i] + self.log_std.data()[i].exp() * noise[i])
            .collect())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.dim()).map(|_| standard_normal(rng)).collect();
        self.sample_with_noise(&noise).expect("dims match")
    }

    /// In-place access for the optimizer; callers must re-clamp log-std
    /// afterwards.
    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.mean, &mut self.log_std)
    }
}

/// Finite mixture of diagonal Gaussians with softmax-parameterized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    logit_weights: Tensor,
    components: Vec<DiagGaussian>,
}

impl Mixture {
    pub fn new(logit_weights: Tensor, components: Vec<DiagGaussian>) -> DistResult<Self> {
        if components.is_empty() {
            return Err(DistError::EmptyMixture);
        }
        if logit_weights.len() != components.len() {
            return Err(DistError::DimMismatch(format!(
                "{} logits for {} components",
                logit_weights.len(),
                components.len()
            )));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(DistError::DimMismatch("components disagree on dimension".into()));
        }
        Ok(Mixture { logit_weights, components })
    }

    /// Equal-weight mixture.
    pub fn uniform(components: Vec<DiagGaussian>) -> DistResult<Self> {
        let k = components.len();
        Mixture::new(Tensor::zeros(&[k]), components)
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn logit_weights(&self) -> &Tensor {
        &self.logit_weights
    }

    /// Normalized weights (softmax of the logits).
    pub fn weights(&self) -> Vec<f64> {
        let m = self.logit_weights.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logit_weights.data().iter().map(|&l| (l - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / s).collect()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        let m = self.logit_weights.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + self.logit_weights.data().iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        self.logit_weights.data().iter().map(|&l| l - lse).collect()
    }

    /// Log density via max-subtracted log-sum-exp over components.
    pub fn log_prob(&self, x: &[f64]) -> DistResult<f64> {
        let logw = self.log_weights();
        let mut terms = Vec::with_capacity(self.components.len());
        for (k, comp) in self.components.iter().enumerate() {
            terms.push(logw[k] + comp.log_prob(x)?);
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln())
    }

    /// In-place access for the optimizer; callers must re-clamp log-std
    /// afterwards.
    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor, &mut Vec<DiagGaussian>) {
        (&mut self.logit_weights, &mut self.components)
    }

    /// Draw a point and the index of the component that produced it.
    /// Component choice is inverse-CDF on the cumulative weights.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
        let w = self.weights();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = w.len() - 1;
        for (k, wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                idx = k;
                break;
            }
        }
        (self.components[idx].sample(rng), idx)
    }
}

/// Data rows backing an empirical anchor.
#[derive(Debug, Clone)]
pub struct EmpiricalData {
    dim: usize,
    rows: Vec<f64>,
}

impl EmpiricalData {
    pub fn new(dim: usize, rows: Vec<f64>) -> Self {
        assert_eq!(rows.len() % dim.max(1), 0, "row data not a multiple of dim");
        EmpiricalData { dim, rows }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 { 0 } else { self.rows.len() / self.dim }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// A fixed, non-trainable distribution: the latent prior and the data
/// distribution. Anchors never carry graph nodes.
#[derive(Debug, Clone)]
pub enum AnchorSpec {
    StandardNormal(usize),
    FixedMixture(Mixture),
    Empirical(Arc<EmpiricalData>),
}

impl AnchorSpec {
    pub fn dim(&self) -> usize {
        match self {
            AnchorSpec::StandardNormal(d) => *d,
            AnchorSpec::FixedMixture(m) => m.dim(),
            AnchorSpec::Empirical(e) => e.dim,
        }
    }

    /// Log density; `None` for empirical anchors, which have no density.
    pub fn log_prob(&self, x: &[f64]) -> DistResult<Option<f64>> {
        match self {
            AnchorSpec::StandardNormal(d) => {
                if x.len() != *d {
                    return Err(DistError::DimMismatch(format!("x has dim {}, expected {}", x.len(), d)));
                }
                let quad: f64 = x.iter().map(|v| v * v).sum();
                Ok(Some(-0.5 * quad - *d as f64 * HALF_LN_2PI))
            }
            AnchorSpec::FixedMixture(m) => Ok(Some(m.log_prob(x)?)),
            AnchorSpec::Empirical(_) => Ok(None),
        }
    }
}

/// `n` i.i.d. draws from an anchor as an `[n, d]` tensor, plus the
/// responsible component index per draw for mixture anchors.
pub fn anchor_sample(
    a: &AnchorSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> DistResult<(Tensor, Option<Vec<usize>>)> {
    assert!(n >= 1, "anchor_sample needs n >= 1");
    let d = a.dim();
    let mut data = Vec::with_capacity(n * d);
    match a {
        AnchorSpec::StandardNormal(_) => {
            for _ in 0..n * d {
                data.push(standard_normal(rng));
            }
            Ok((Tensor::new(vec![n, d], data).expect("shape"), None))
        }
        AnchorSpec::FixedMixture(m) => {
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let (x, k) = m.sample(rng);
                data.extend_from_slice(&x);
                labels.push(k);
            }
            Ok((Tensor::new(vec![n, d], data).expect("shape"), Some(labels)))
        }
        AnchorSpec::Empirical(e) => {
            if e.is_empty() {
                return Err(DistError::EmptyEmpirical);
            }
            for _ in 0..n {
                let i = rng.gen_range(0..e.len());
                data.extend_from_slice(e.row(i));
            }
            Ok((Tensor::new(vec![n, d], data).expect("shape"), None))
        }
    }
}

/// Standard-normal draw via Box-Muller (single value; the sibling is
/// discarded to keep the stream position independent of call pattern).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Tensor of standard-normal noise.
pub fn normal_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

// --- On-tape builders ------------------------------------------------------

/// Per-row Gaussian parameters living on a tape, shape `[n, d]` each.
#[derive(Debug, Clone, Copy)]
pub struct GaussRows {
    pub mean: Var,
    pub log_std: Var,
}

/// Per-row log density `[n]` of `x` under row-wise Gaussian parameters.
/// Differentiable w.r.t. `x`, `mean` and `log_std`.
pub fn gaussian_log_prob_rows(tape: &mut Tape, x: Var, g: GaussRows) -> AdResult<Var> {
    let d = tape.value(x).cols();
    let n = tape.value(x).rows();
    let diff = tape.sub(x, g.mean)?;
    let neg_ls = tape.neg(g.log_std)?;
    let inv_sigma = tape.exp(neg_ls)?;
    let z = tape.mul(diff, inv_sigma)?;
    let sq = tape.square(z)?;
    let quad = tape.sum_axis(sq, 1)?;
    let ls_sum = tape.sum_axis(g.log_std, 1)?;
    let half_quad = tape.scale(quad, 0.5)?;
    let partial = tape.add(half_quad, ls_sum)?;
    let const_term = tape.leaf(Tensor::filled(&[n], d as f64 * HALF_LN_2PI));
    let total = tape.add(partial, const_term)?;
    tape.neg(total)
}

/// Scalar log density of a single point `x: [d]` under Gaussian parameter
/// vectors `[d]`; the single-point counterpart of
/// [`gaussian_log_prob_rows`].
pub fn gaussian_log_prob_point(tape: &mut Tape, x: Var, mean: Var, log_std: Var) -> AdResult<Var> {
    let d = tape.value(x).len();
    let diff = tape.sub(x, mean)?;
    let neg_ls = tape.neg(log_std)?;
    let inv_sigma = tape.exp(neg_ls)?;
    let z = tape.mul(diff, inv_sigma)?;
    let sq = tape.square(z)?;
    let quad = tape.sum(sq)?;
    let ls_sum = tape.sum(log_std)?;
    let half_quad = tape.scale(quad, 0.5)?;
    let partial = tape.add(half_quad, ls_sum)?;
    let const_term = tape.scalar(d as f64 * HALF_LN_2PI);
    let total = tape.add(partial, const_term)?;
    tape.neg(total)
}

/// Reparameterized batch draw `mean + exp(log_std) * noise`; the noise
/// enters as a constant leaf so gradients flow to the parameters only.
pub fn reparam_sample_rows(tape: &mut Tape, g: GaussRows, noise: &Tensor) -> AdResult<Var> {
    let noise_v = tape.leaf(noise.clone());
    let sigma = tape.exp(g.log_std)?;
    let scaled = tape.mul(sigma, noise_v)?;
    tape.add(g.mean, scaled)
}

/// Per-row log density `[n]` under a standard normal.
pub fn std_normal_log_prob_rows(tape: &mut Tape, x: Var) -> AdResult<Var> {
    let d = tape.value(x).cols();
    let n = tape.value(x).rows();
    let sq = tape.square(x)?;
    let quad = tape.sum_axis(sq, 1)?;
    let half = tape.scale(quad, 0.5)?;
    let const_term = tape.leaf(Tensor::filled(&[n], d as f64 * HALF_LN_2PI));
    let total = tape.add(half, const_term)?;
    tape.neg(total)
}

/// `[n, K]` matrix of log densities of each row of `x: [n, d]` under each
/// of `K` Gaussians given as stacked parameter matrices `[K, d]`.
///
/// Uses the expanded quadratic form so everything reduces to matrix
/// products: (x - m)^2 / s^2 = x^2 s^-2 - 2 x (m s^-2) + m^2 s^-2.
pub fn component_log_prob_matrix(
    tape: &mut Tape,
    x: Var,
    comp_means: Var,
    comp_log_stds: Var,
) -> AdResult<Var> {
    let d = tape.value(x).cols();
    let k = tape.value(comp_means).rows();
    let neg2ls = tape.scale(comp_log_stds, -2.0)?;
    let inv_var = tape.exp(neg2ls)?; // [K, d]
    let inv_var_t = tape.transpose(inv_var)?; // [d, K]
    let x_sq = tape.square(x)?;
    let t1 = tape.matmul(x_sq, inv_var_t)?; // [n, K]
    let m_inv_var = tape.mul(comp_means, inv_var)?;
    let m_inv_var_t = tape.transpose(m_inv_var)?;
    let t2 = tape.matmul(x, m_inv_var_t)?; // [n, K]
    let m_sq = tape.square(comp_means)?;
    let m_sq_inv_var = tape.mul(m_sq, inv_var)?;
    let c3 = tape.sum_axis(m_sq_inv_var, 1)?; // [K]
    let t2x2 = tape.scale(t2, 2.0)?;
    let quad = tape.sub(t1, t2x2)?;
    let quad = tape.bias_add(quad, c3)?; // [n, K]
    let half_quad = tape.scale(quad, -0.5)?;
    let ls_sum = tape.sum_axis(comp_log_stds, 1)?; // [K]
    let const_k = tape.leaf(Tensor::filled(&[k], d as f64 * HALF_LN_2PI));
    let offs = tape.add(ls_sum, const_k)?;
    let neg_offs = tape.neg(offs)?;
    tape.bias_add(half_quad, neg_offs)
}

/// Mixture parameters lifted onto a tape.
#[derive(Debug, Clone)]
pub struct MixtureVars {
    pub logit_weights: Var,
    pub comp_means: Var,    // [K, d]
    pub comp_log_stds: Var, // [K, d]
}

impl MixtureVars {
    /// Lift a value-level mixture onto the tape as leaves (one leaf per
    /// parameter tensor, stacked across components).
    pub fn bind(tape: &mut Tape, m: &Mixture) -> Self {
        let k = m.num_components();
        let d = m.dim();
        let mut means = Vec::with_capacity(k * d);
        let mut log_stds = Vec::with_capacity(k * d);
        for c in m.components() {
            means.extend_from_slice(c.mean().data());
            log_stds.extend_from_slice(c.log_std().data());
        }
        MixtureVars {
            logit_weights: tape.leaf(m.logit_weights().clone()),
            comp_means: tape.leaf(Tensor::new(vec![k, d], means).expect("shape")),
            comp_log_stds: tape.leaf(Tensor::new(vec![k, d], log_stds).expect("shape")),
        }
    }
}

/// Per-row mixture log density `[n]`: log-sum-exp over components of
/// log w_k + log N(x; comp_k).
pub fn mixture_log_prob_rows(tape: &mut Tape, x: Var, m: &MixtureVars) -> AdResult<Var> {
    let k = tape.value(m.comp_means).rows();
    let lp = component_log_prob_matrix(tape, x, m.comp_means, m.comp_log_stds)?; // [n, K]
    // log softmax of the logits
    let lse = tape.logsumexp(m.logit_weights, 0)?;
    let lse_k = tape.broadcast(lse, k)?;
    let log_w = tape.sub(m.logit_weights, lse_k)?; // [K]
    let shifted = tape.bias_add(lp, log_w)?;
    tape.logsumexp(shifted, 1)
}

/// Scalar mixture log density of a single point `[d]`.
pub fn mixture_log_prob_point(tape: &mut Tape, x: Var, m: &MixtureVars) -> AdResult<Var> {
    let rows = tape.broadcast(x, 1)?;
    let lp = mixture_log_prob_rows(tape, rows, m)?;
    tape.sum(lp)
}
