//! Conditional-distribution parameterizations and the model bundle.
//!
//! A [`ModelBundle`] holds the four model factors: encoder q(z|x),
//! decoder p(x|z), latent prior p(z) and data prior q(x), together with
//! the fixed anchors. Conditionals are two-hidden-layer MLPs with
//! Gaussian heads (an exactly-linear conditional is also provided; it
//! makes conjugate closed forms representable, which the test oracles
//! rely on). Priors come in four flavors: the anchor itself, a learned
//! mixture, a mixture of encoder posteriors at learned pseudo-inputs,
//! and the implicit decoder marginal evaluated through single-sample
//! importance bounds.

use crate::autodiff::{AdError, AdResult, Tape, Tensor, Var};
use crate::dist::{
    component_log_prob_matrix, gaussian_log_prob_rows, mixture_log_prob_rows, AnchorSpec,
    DiagGaussian, GaussRows, Mixture, MixtureVars, LOG_STD_MAX, LOG_STD_MIN,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("marginal data prior needs an importance sample z, none provided")]
    MissingMarginalContext,
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Dist(#[from] crate::dist::DistError),
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Swish,
}

/// Two-hidden-layer MLP with Gaussian mean / log-std output heads.
#[derive(Debug, Clone)]
pub struct MlpCondGaussian {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w_mean: Tensor,
    pub b_mean: Tensor,
    pub w_log_std: Tensor,
    pub b_log_std: Tensor,
}

impl MlpCondGaussian {
    /// Fresh network with weights and biases uniform in [-s, s],
    /// s = 1 / sqrt(fan_in).
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let u = |fan_in: usize, shape: &[usize], rng: &mut ChaCha8Rng| -> Tensor {
            let s = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-s..=s)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        };
        let net = MlpCondGaussian {
            in_dim,
            hidden,
            out_dim,
            activation,
            w1: u(in_dim, &[in_dim, hidden], rng),
            b1: u(in_dim, &[hidden], rng),
            w2: u(hidden, &[hidden, hidden], rng),
            b2: u(hidden, &[hidden], rng),
            w_mean: u(hidden, &[hidden, out_dim], rng),
            b_mean: u(hidden, &[out_dim], rng),
            w_log_std: u(hidden, &[hidden, out_dim], rng),
            b_log_std: u(hidden, &[out_dim], rng),
        };
        debug_assert_eq!(net.param_count(), Self::expected_param_count(in_dim, hidden, out_dim));
        net
    }

    /// All-zero parameters: outputs mean 0, log_std 0 regardless of input.
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize, activation: Activation) -> Self {
        MlpCondGaussian {
            in_dim,
            hidden,
            out_dim,
            activation,
            w1: Tensor::zeros(&[in_dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, hidden]),
            b2: Tensor::zeros(&[hidden]),
            w_mean: Tensor::zeros(&[hidden, out_dim]),
            b_mean: Tensor::zeros(&[out_dim]),
            w_log_std: Tensor::zeros(&[hidden, out_dim]),
            b_log_std: Tensor::zeros(&[out_dim]),
        }
    }

    /// in*h + h + h*h + h + 2*(h*out + out).
    pub fn expected_param_count(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        in_dim * hidden + hidden + hidden * hidden + hidden + 2 * (hidden * out_dim + out_dim)
    }

    pub fn param_count(&self) -> usize {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w_mean, &self.b_mean, &self.w_log_std, &self.b_log_std]
            .iter()
            .map(|t| t.len())
            .sum()
    }
}

/// Exactly-linear conditional Gaussian: mean = x W + b with a trainable
/// per-dimension log-std.
#[derive(Debug, Clone)]
pub struct LinearCondGaussian {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub log_std: Tensor,
}

impl LinearCondGaussian {
    pub fn new(weight: Tensor, bias: Tensor, log_std: Tensor) -> ModelResult<Self> {
        if weight.shape().len() != 2 {
            return Err(ModelError::DimMismatch("linear weight must be a matrix".into()));
        }
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        if bias.shape() != [out_dim] || log_std.shape() != [out_dim] {
            return Err(ModelError::DimMismatch(format!(
                "bias {:?} / log_std {:?} for out dim {}",
                bias.shape(),
                log_std.shape(),
                out_dim
            )));
        }
        Ok(LinearCondGaussian { in_dim, out_dim, weight, bias, log_std })
    }

    /// Identity mean map with a constant log-std.
    pub fn identity(dim: usize, log_std: f64) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        LinearCondGaussian {
            in_dim: dim,
            out_dim: dim,
            weight: w,
            bias: Tensor::zeros(&[dim]),
            log_std: Tensor::filled(&[dim], log_std),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len() + self.log_std.len()
    }
}

/// A conditional Gaussian distribution parameterization.
#[derive(Debug, Clone)]
pub enum CondNet {
    Mlp(MlpCondGaussian),
    Linear(LinearCondGaussian),
}

impl CondNet {
    pub fn in_dim(&self) -> usize {
        match self {
            CondNet::Mlp(m) => m.in_dim,
            CondNet::Linear(l) => l.in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            CondNet::Mlp(m) => m.out_dim,
            CondNet::Linear(l) => l.out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            CondNet::Mlp(m) => m.param_count(),
            CondNet::Linear(l) => l.param_count(),
        }
    }

    fn num_param_tensors(&self) -> usize {
        match self {
            CondNet::Mlp(_) => 8,
            CondNet::Linear(_) => 3,
        }
    }

    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            CondNet::Mlp(m) => {
                out.push((format!("{prefix}.w1"), &m.w1));
                out.push((format!("{prefix}.b1"), &m.b1));
                out.push((format!("{prefix}.w2"), &m.w2));
                out.push((format!("{prefix}.b2"), &m.b2));
                out.push((format!("{prefix}.w_mean"), &m.w_mean));
                out.push((format!("{prefix}.b_mean"), &m.b_mean));
                out.push((format!("{prefix}.w_log_std"), &m.w_log_std));
                out.push((format!("{prefix}.b_log_std"), &m.b_log_std));
            }
            CondNet::Linear(l) => {
                out.push((format!("{prefix}.weight"), &l.weight));
                out.push((format!("{prefix}.bias"), &l.bias));
                out.push((format!("{prefix}.log_std"), &l.log_std));
            }
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match self {
            CondNet::Mlp(m) => {
                out.push((format!("{prefix}.w1"), &mut m.w1));
                out.push((format!("{prefix}.b1"), &mut m.b1));
                out.push((format!("{prefix}.w2"), &mut m.w2));
                out.push((format!("{prefix}.b2"), &mut m.b2));
                out.push((format!("{prefix}.w_mean"), &mut m.w_mean));
                out.push((format!("{prefix}.b_mean"), &mut m.b_mean));
                out.push((format!("{prefix}.w_log_std"), &mut m.w_log_std));
                out.push((format!("{prefix}.b_log_std"), &mut m.b_log_std));
            }
            CondNet::Linear(l) => {
                out.push((format!("{prefix}.weight"), &mut l.weight));
                out.push((format!("{prefix}.bias"), &mut l.bias));
                out.push((format!("{prefix}.log_std"), &mut l.log_std));
            }
        }
    }
}

/// Prior parameterization for p(z) or q(x).
#[derive(Debug, Clone)]
pub enum PriorSpec {
    /// The prior is the corresponding anchor; contributes no parameters.
    Anchor,
    /// Trainable finite Gaussian mixture.
    LearnedMixture(Mixture),
    /// Mixture of encoder posteriors at trainable pseudo-inputs, stored
    /// as a [K, dx] matrix. Legal only for the latent prior.
    VampPrior { pseudo_inputs: Tensor },
    /// q(x) defined implicitly as the decoder marginal, evaluated via a
    /// single-sample importance bound. Legal only for the data prior.
    MarginalX,
}

impl PriorSpec {
    pub fn param_count(&self) -> usize {
        match self {
            PriorSpec::Anchor | PriorSpec::MarginalX => 0,
            PriorSpec::LearnedMixture(m) => {
                m.logit_weights().len()
                    + m.components().iter().map(|c| c.mean().len() + c.log_std().len()).sum::<usize>()
            }
            PriorSpec::VampPrior { pseudo_inputs } => pseudo_inputs.len(),
        }
    }

    fn num_param_tensors(&self) -> usize {
        match self {
            PriorSpec::Anchor | PriorSpec::MarginalX => 0,
            PriorSpec::LearnedMixture(m) => 1 + 2 * m.num_components(),
            PriorSpec::VampPrior { .. } => 1,
        }
    }
}

/// The model: encoder, decoder, two priors, two anchors.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub encoder: CondNet,
    pub decoder: CondNet,
    pub z_prior: PriorSpec,
    pub x_prior: PriorSpec,
    pub x_anchor: AnchorSpec,
    pub z_anchor: AnchorSpec,
}

impl ModelBundle {
    pub fn new(
        encoder: CondNet,
        decoder: CondNet,
        z_prior: PriorSpec,
        x_prior: PriorSpec,
        x_anchor: AnchorSpec,
        z_anchor: AnchorSpec,
    ) -> ModelResult<Self> {
        let dx = encoder.in_dim();
        let dz = encoder.out_dim();
        if decoder.in_dim() != dz || decoder.out_dim() != dx {
            return Err(ModelError::DimMismatch(format!(
                "encoder {}->{} vs decoder {}->{}",
                dx,
                dz,
                decoder.in_dim(),
                decoder.out_dim()
            )));
        }
        if x_anchor.dim() != dx || z_anchor.dim() != dz {
            return Err(ModelError::DimMismatch("anchor dimensions disagree with networks".into()));
        }
        match &x_prior {
            PriorSpec::Anchor => {
                return Err(ModelError::InvalidBundle(
                    "the data anchor is empirical and has no density; use a learned mixture or the decoder marginal"
                        .into(),
                ))
            }
            PriorSpec::VampPrior { .. } => {
                return Err(ModelError::InvalidBundle(
                    "posterior-mixture priors are legal only for the latent prior".into(),
                ))
            }
            PriorSpec::LearnedMixture(m) if m.dim() != dx => {
                return Err(ModelError::DimMismatch("data-prior mixture dimension".into()))
            }
            _ => {}
        }
        match &z_prior {
            PriorSpec::MarginalX => {
                return Err(ModelError::InvalidBundle("the decoder marginal is legal only for the data prior".into()))
            }
            PriorSpec::Anchor => {
                if matches!(z_anchor, AnchorSpec::Empirical(_)) {
                    return Err(ModelError::InvalidBundle("anchor latent prior needs an anchor with a density".into()));
                }
            }
            PriorSpec::LearnedMixture(m) if m.dim() != dz => {
                return Err(ModelError::DimMismatch("latent-prior mixture dimension".into()))
            }
            PriorSpec::VampPrior { pseudo_inputs } => {
                if pseudo_inputs.shape().len() != 2 || pseudo_inputs.shape()[1] != dx {
                    return Err(ModelError::DimMismatch("pseudo-inputs must be [K, dx]".into()));
                }
            }
            _ => {}
        }
        Ok(ModelBundle { encoder, decoder, z_prior, x_prior, x_anchor, z_anchor })
    }

    pub fn dim_x(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn dim_z(&self) -> usize {
        self.encoder.out_dim()
    }

    /// Trainable parameters in canonical order. This order is the
    /// contract shared by gradient collection, optimizer state and
    /// checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.visit_params("encoder", &mut out);
        self.decoder.visit_params("decoder", &mut out);
        match &self.z_prior {
            PriorSpec::LearnedMixture(m) => {
                out.push(("z_prior.logit_weights".into(), m.logit_weights()));
                for (k, c) in m.components().iter().enumerate() {
                    out.push((format!("z_prior.comp{k}.mean"), c.mean()));
                    out.push((format!("z_prior.comp{k}.log_std"), c.log_std()));
                }
            }
            PriorSpec::VampPrior { pseudo_inputs } => {
                out.push(("z_prior.pseudo_inputs".into(), pseudo_inputs));
            }
            _ => {}
        }
        if let PriorSpec::LearnedMixture(m) = &self.x_prior {
            out.push(("x_prior.logit_weights".into(), m.logit_weights()));
            for (k, c) in m.components().iter().enumerate() {
                out.push((format!("x_prior.comp{k}.mean"), c.mean()));
                out.push((format!("x_prior.comp{k}.log_std"), c.log_std()));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let ModelBundle { encoder, decoder, z_prior, x_prior, .. } = self;
        encoder.visit_params_mut("encoder", &mut out);
        decoder.visit_params_mut("decoder", &mut out);
        match z_prior {
            PriorSpec::LearnedMixture(m) => {
                let (lw, comps) = m.parts_mut();
                out.push(("z_prior.logit_weights".into(), lw));
                for (k, c) in comps.iter_mut().enumerate() {
                    let (mean, ls) = c.parts_mut();
                    out.push((format!("z_prior.comp{k}.mean"), mean));
                    out.push((format!("z_prior.comp{k}.log_std"), ls));
                }
            }
            PriorSpec::VampPrior { pseudo_inputs } => {
                out.push(("z_prior.pseudo_inputs".into(), pseudo_inputs));
            }
            _ => {}
        }
        if let PriorSpec::LearnedMixture(m) = x_prior {
            let (lw, comps) = m.parts_mut();
            out.push(("x_prior.logit_weights".into(), lw));
            for (k, c) in comps.iter_mut().enumerate() {
                let (mean, ls) = c.parts_mut();
                out.push((format!("x_prior.comp{k}.mean"), mean));
                out.push((format!("x_prior.comp{k}.log_std"), ls));
            }
        }
        out
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Re-apply the log-std clamp to parameters updated in place
    /// (mixture components, linear conditionals). Network heads clamp in
    /// the graph instead.
    pub fn clamp_log_stds(&mut self) {
        for (name, t) in self.named_params_mut() {
            if name.ends_with(".log_std") && !name.starts_with("encoder.w") && !name.starts_with("decoder.w") {
                // Only raw log-std vectors, not the w_log_std/b_log_std
                // head parameters of the MLPs.
                if name.contains(".w_log_std") || name.contains(".b_log_std") {
                    continue;
                }
                for v in t.data_mut() {
                    *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
                }
            }
        }
    }

    /// Lift the bundle onto a tape; every parameter becomes a leaf.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        let named = self.named_params();
        let params: Vec<Var> = named.iter().map(|(_, t)| tape.leaf((*t).clone())).collect();
        BoundModel { model: self, params }
    }

    /// Encoder output distribution q(z|x) at a single point.
    pub fn encode(&self, x: &[f64]) -> ModelResult<DiagGaussian> {
        if x.len() != self.dim_x() {
            return Err(ModelError::DimMismatch(format!("x has dim {}, expected {}", x.len(), self.dim_x())));
        }
        let (mean, log_std) = self.encode_rows_value(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok(DiagGaussian::new(Tensor::vector(mean.data().to_vec()), Tensor::vector(log_std.data().to_vec()))?)
    }

    /// Decoder output distribution p(x|z) at a single point.
    pub fn decode(&self, z: &[f64]) -> ModelResult<DiagGaussian> {
        if z.len() != self.dim_z() {
            return Err(ModelError::DimMismatch(format!("z has dim {}, expected {}", z.len(), self.dim_z())));
        }
        let (mean, log_std) = self.decode_rows_value(&Tensor::matrix(1, z.len(), z.to_vec())?)?;
        Ok(DiagGaussian::new(Tensor::vector(mean.data().to_vec()), Tensor::vector(log_std.data().to_vec()))?)
    }

    /// Batched encoder forward outside any gradient context.
    pub fn encode_rows_value(&self, xs: &Tensor) -> ModelResult<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(xs.clone());
        let g = bound.encode_rows(&mut tape, x)?;
        Ok((tape.value(g.mean).clone(), tape.value(g.log_std).clone()))
    }

    /// Batched decoder forward outside any gradient context.
    pub fn decode_rows_value(&self, zs: &Tensor) -> ModelResult<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = tape.leaf(zs.clone());
        let g = bound.decode_rows(&mut tape, z)?;
        Ok((tape.value(g.mean).clone(), tape.value(g.log_std).clone()))
    }

    /// log p(z) under the latent prior at a single point.
    pub fn z_prior_log_prob(&self, z: &[f64]) -> ModelResult<f64> {
        if z.len() != self.dim_z() {
            return Err(ModelError::DimMismatch(format!("z has dim {}, expected {}", z.len(), self.dim_z())));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let zv = tape.leaf(Tensor::matrix(1, z.len(), z.to_vec())?);
        let lp = bound.z_prior_log_prob_rows(&mut tape, zv)?;
        Ok(tape.value(lp).data()[0])
    }

    /// log q(x) under the data prior at a single point. For the marginal
    /// data prior, `z_tilde` supplies the importance sample mandated by
    /// the single-sample bound: log p(x|z) + log p(z) - log q(z|x).
    pub fn x_prior_log_prob(&self, x: &[f64], z_tilde: Option<&[f64]>) -> ModelResult<f64> {
        if x.len() != self.dim_x() {
            return Err(ModelError::DimMismatch(format!("x has dim {}, expected {}", x.len(), self.dim_x())));
        }
        match &self.x_prior {
            PriorSpec::LearnedMixture(m) => Ok(m.log_prob(x)?),
            PriorSpec::MarginalX => {
                let z = z_tilde.ok_or(ModelError::MissingMarginalContext)?;
                let dec = self.decode(z)?;
                let enc = self.encode(x)?;
                Ok(dec.log_prob(x)? + self.z_prior_log_prob(z)? - enc.log_prob(z)?)
            }
            PriorSpec::Anchor | PriorSpec::VampPrior { .. } => {
                Err(ModelError::InvalidBundle("data prior kind rejected at construction".into()))
            }
        }
    }
}

/// A model lifted onto a tape: parameter leaves in canonical order plus
/// graph builders for conditional and prior log densities.
pub struct BoundModel<'m> {
    model: &'m ModelBundle,
    params: Vec<Var>,
}

impl<'m> BoundModel<'m> {
    pub fn model(&self) -> &'m ModelBundle {
        self.model
    }

    /// Parameter leaves, parallel to [`ModelBundle::named_params`].
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Replace one parameter leaf (test hook for gradient checks against
    /// an externally owned tensor).
    pub fn with_param_var(mut self, index: usize, var: Var) -> Self {
        self.params[index] = var;
        self
    }

    fn cond_forward(&self, tape: &mut Tape, net: &CondNet, offset: usize, input: Var) -> AdResult<GaussRows> {
        match net {
            CondNet::Mlp(m) => {
                let p = &self.params[offset..offset + 8];
                let (w1, b1, w2, b2, w_mean, b_mean, w_ls, b_ls) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]);
                let act = |tape: &mut Tape, v: Var| match m.activation {
                    Activation::Tanh => tape.tanh(v),
                    Activation::Swish => tape.swish(v),
                };
                let h1 = tape.matmul(input, w1)?;
                let h1 = tape.bias_add(h1, b1)?;
                let h1 = act(tape, h1)?;
                let h2 = tape.matmul(h1, w2)?;
                let h2 = tape.bias_add(h2, b2)?;
                let h2 = act(tape, h2)?;
                let mean = tape.matmul(h2, w_mean)?;
                let mean = tape.bias_add(mean, b_mean)?;
                let ls = tape.matmul(h2, w_ls)?;
                let ls = tape.bias_add(ls, b_ls)?;
                let ls = tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX)?;
                Ok(GaussRows { mean, log_std: ls })
            }
            CondNet::Linear(_) => {
                let p = &self.params[offset..offset + 3];
                let (w, b, ls) = (p[0], p[1], p[2]);
                let n = tape.value(input).rows();
                let mean = tape.matmul(input, w)?;
                let mean = tape.bias_add(mean, b)?;
                let ls_rows = tape.broadcast(ls, n)?;
                let ls_rows = tape.clamp(ls_rows, LOG_STD_MIN, LOG_STD_MAX)?;
                Ok(GaussRows { mean, log_std: ls_rows })
            }
        }
    }

    fn decoder_offset(&self) -> usize {
        self.model.encoder.num_param_tensors()
    }

    fn z_prior_offset(&self) -> usize {
        self.decoder_offset() + self.model.decoder.num_param_tensors()
    }

    fn x_prior_offset(&self) -> usize {
        self.z_prior_offset() + self.model.z_prior.num_param_tensors()
    }

    /// q(z|x) parameters for a batch of rows.
    pub fn encode_rows(&self, tape: &mut Tape, x: Var) -> AdResult<GaussRows> {
        self.cond_forward(tape, &self.model.encoder, 0, x)
    }

    /// p(x|z) parameters for a batch of rows.
    pub fn decode_rows(&self, tape: &mut Tape, z: Var) -> AdResult<GaussRows> {
        self.cond_forward(tape, &self.model.decoder, self.decoder_offset(), z)
    }

    fn mixture_vars(&self, offset: usize, m: &Mixture, tape: &mut Tape) -> AdResult<MixtureVars> {
        let k = m.num_components();
        let logit_weights = self.params[offset];
        // Component leaves are separate [d] tensors; stack to [K, d].
        let mut mean_vars = Vec::with_capacity(k);
        let mut ls_vars = Vec::with_capacity(k);
        for i in 0..k {
            mean_vars.push(self.params[offset + 1 + 2 * i]);
            ls_vars.push(self.params[offset + 2 + 2 * i]);
        }
        let means_cols = tape.stack_cols(&mean_vars)?; // [d, K]
        let comp_means = tape.transpose(means_cols)?; // [K, d]
        let ls_cols = tape.stack_cols(&ls_vars)?;
        let ls_rows = tape.transpose(ls_cols)?;
        let comp_log_stds = tape.clamp(ls_rows, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(MixtureVars { logit_weights, comp_means, comp_log_stds })
    }

    /// Per-row log p(z) under the latent prior, `[n]`.
    pub fn z_prior_log_prob_rows(&self, tape: &mut Tape, z: Var) -> ModelResult<Var> {
        match &self.model.z_prior {
            PriorSpec::Anchor => match &self.model.z_anchor {
                AnchorSpec::StandardNormal(_) => Ok(crate::dist::std_normal_log_prob_rows(tape, z)?),
                AnchorSpec::FixedMixture(m) => {
                    // Anchors carry no trainable state: the mixture enters
                    // as fresh constant leaves local to this tape.
                    let mv = MixtureVars::bind(tape, m);
                    Ok(mixture_log_prob_rows(tape, z, &mv)?)
                }
                AnchorSpec::Empirical(_) => Err(ModelError::InvalidBundle("anchor latent prior without density".into())),
            },
            PriorSpec::LearnedMixture(m) => {
                let mv = self.mixture_vars(self.z_prior_offset(), m, tape)?;
                Ok(mixture_log_prob_rows(tape, z, &mv)?)
            }
            PriorSpec::VampPrior { pseudo_inputs } => {
                let k = pseudo_inputs.shape()[0];
                let u = self.params[self.z_prior_offset()];
                let enc = self.encode_rows(tape, u)?; // heads are [K, dz]
                let lp = component_log_prob_matrix(tape, z, enc.mean, enc.log_std)?; // [n, K]
                let lse = tape.logsumexp(lp, 1)?;
                let n = tape.value(z).rows();
                let lnk = tape.leaf(Tensor::filled(&[n], (k as f64).ln()));
                Ok(tape.sub(lse, lnk)?)
            }
            PriorSpec::MarginalX => unreachable!("rejected at construction"),
        }
    }

    /// Per-row log q(x) for an explicitly parameterized data prior, `[n]`.
    /// The marginal data prior has no direct evaluation; objectives build
    /// its importance bound inline.
    pub fn x_prior_log_prob_rows(&self, tape: &mut Tape, x: Var) -> ModelResult<Var> {
        match &self.model.x_prior {
            PriorSpec::LearnedMixture(m) => {
                let mv = self.mixture_vars(self.x_prior_offset(), m, tape)?;
                Ok(mixture_log_prob_rows(tape, x, &mv)?)
            }
            PriorSpec::MarginalX => Err(ModelError::MissingMarginalContext),
            _ => unreachable!("rejected at construction"),
        }
    }

    /// Per-row log q(z|x) evaluated at given (x, z) rows.
    pub fn encoder_log_prob_rows(&self, tape: &mut Tape, x: Var, z: Var) -> ModelResult<Var> {
        let g = self.encode_rows(tape, x)?;
        Ok(gaussian_log_prob_rows(tape, z, g)?)
    }

    /// Per-row log p(x|z) evaluated at given (x, z) rows.
    pub fn decoder_log_prob_rows(&self, tape: &mut Tape, x: Var, z: Var) -> ModelResult<Var> {
        let g = self.decode_rows(tape, z)?;
        Ok(gaussian_log_prob_rows(tape, x, g)?)
    }
}

/// Serializable description of a bundle's architecture; enough to
/// rebuild parameter shapes for checkpoint loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim_x: usize,
    pub dim_z: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub z_prior: PriorKind,
    pub x_prior: PriorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PriorKind {
    Anchor,
    LearnedMixture { k: usize },
    VampPrior { k: usize },
    MarginalX,
}

impl ModelSpec {
    /// Build a freshly initialized bundle. The data anchor starts empty;
    /// training and evaluation attach the dataset.
    ///
    /// Pseudo-inputs for the posterior-mixture prior are initialized from
    /// `init_data` rows when provided, mirroring initialization from
    /// training samples (small uniform noise otherwise).
    pub fn build(&self, rng: &mut ChaCha8Rng, init_data: Option<&Tensor>) -> ModelResult<ModelBundle> {
        let encoder = CondNet::Mlp(MlpCondGaussian::init(self.dim_x, self.hidden, self.dim_z, self.activation, rng));
        let decoder = CondNet::Mlp(MlpCondGaussian::init(self.dim_z, self.hidden, self.dim_x, self.activation, rng));
        let mixture = |k: usize, d: usize, rng: &mut ChaCha8Rng| -> ModelResult<Mixture> {
            let comps = (0..k)
                .map(|_| {
                    let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    DiagGaussian::new(Tensor::vector(mean), Tensor::zeros(&[d]))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Mixture::uniform(comps)?)
        };
        let z_prior = match self.z_prior {
            PriorKind::Anchor => PriorSpec::Anchor,
            PriorKind::LearnedMixture { k } => PriorSpec::LearnedMixture(mixture(k, self.dim_z, rng)?),
            PriorKind::VampPrior { k } => {
                let mut data = Vec::with_capacity(k * self.dim_x);
                match init_data {
                    Some(rows) if rows.shape().len() == 2 && rows.shape()[1] == self.dim_x && rows.rows() > 0 => {
                        for _ in 0..k {
                            let i = rng.gen_range(0..rows.rows());
                            data.extend_from_slice(rows.row(i));
                        }
                    }
                    _ => {
                        for _ in 0..k * self.dim_x {
                            data.push(rng.gen_range(-0.1..0.1));
                        }
                    }
                }
                PriorSpec::VampPrior { pseudo_inputs: Tensor::new(vec![k, self.dim_x], data)? }
            }
            PriorKind::MarginalX => {
                return Err(ModelError::InvalidBundle("the decoder marginal is legal only for the data prior".into()))
            }
        };
        let x_prior = match self.x_prior {
            PriorKind::MarginalX => PriorSpec::MarginalX,
            PriorKind::LearnedMixture { k } => PriorSpec::LearnedMixture(mixture(k, self.dim_x, rng)?),
            PriorKind::Anchor | PriorKind::VampPrior { .. } => {
                return Err(ModelError::InvalidBundle("data prior must be a learned mixture or the decoder marginal".into()))
            }
        };
        ModelBundle::new(
            encoder,
            decoder,
            z_prior,
            x_prior,
            AnchorSpec::Empirical(std::sync::Arc::new(crate::dist::EmpiricalData::new(self.dim_x, vec![]))),
            AnchorSpec::StandardNormal(self.dim_z),
        )
    }
}
