//! Exact finite-alphabet oracle for the algebraic identities behind the
//! continuous objectives.
//!
//! Every distribution in the model family has a finite stand-in here: the
//! anchors, the model conditionals and priors, and all derived joints are
//! probability tables, so each identity can be checked by brute-force
//! enumeration. Identities are verified in nats to a residual tolerance
//! of 1e-12; a violation means an implementation bug, not noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiscreteError {
    #[error("table is not a distribution: sum = {0}")]
    NotNormalized(f64),
    #[error("negative entry {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("absolute continuity violated: q is zero where p = {p} > 0 (cell {index})")]
    SupportViolation { index: usize, p: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

pub type DiscreteResult<T> = Result<T, DiscreteError>;

const NORM_TOL: f64 = 1e-12;

/// Exact joint probability table over a finite alphabet |X| x |Z|.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    nx: usize,
    nz: usize,
    p: Vec<f64>, // row-major, p[x * nz + z]
}

impl DiscreteJoint {
    pub fn new(nx: usize, nz: usize, p: Vec<f64>) -> DiscreteResult<Self> {
        if p.len() != nx * nz {
            return Err(DiscreteError::DimMismatch(format!("{}x{} table with {} entries", nx, nz, p.len())));
        }
        for (i, &v) in p.iter().enumerate() {
            if v < 0.0 {
                return Err(DiscreteError::NegativeEntry { index: i, value: v });
            }
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(DiscreteError::NotNormalized(sum));
        }
        Ok(DiscreteJoint { nx, nz, p })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn get(&self, x: usize, z: usize) -> f64 {
        self.p[x * self.nz + z]
    }

    /// Marginal over x (summing out z).
    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.nx).map(|x| (0..self.nz).map(|z| self.get(x, z)).sum()).collect()
    }

    /// Marginal over z (summing out x).
    pub fn marginal_z(&self) -> Vec<f64> {
        (0..self.nz).map(|z| (0..self.nx).map(|x| self.get(x, z)).sum()).collect()
    }

    /// Equal-weight mixture of two joints on the same alphabet.
    pub fn mix(a: &DiscreteJoint, b: &DiscreteJoint) -> DiscreteResult<DiscreteJoint> {
        if a.nx != b.nx || a.nz != b.nz {
            return Err(DiscreteError::DimMismatch(format!(
                "{}x{} vs {}x{}",
                a.nx, a.nz, b.nx, b.nz
            )));
        }
        let p = a.p.iter().zip(&b.p).map(|(x, y)| 0.5 * (x + y)).collect();
        DiscreteJoint::new(a.nx, a.nz, p)
    }
}

/// Shannon entropy in nats, with 0 log 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Cross-entropy CE(p, q) = -sum p ln q in nats.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> DiscreteResult<f64> {
    kl(p, q).map(|d| d + entropy(p))
}

/// KL(p || q) in nats. Errors when support(p) is not within support(q).
pub fn kl(p: &[f64], q: &[f64]) -> DiscreteResult<f64> {
    if p.len() != q.len() {
        return Err(DiscreteError::DimMismatch(format!("{} vs {}", p.len(), q.len())));
    }
    let mut acc = 0.0;
    for (i, (&pv, &qv)) in p.iter().zip(q).enumerate() {
        if pv > 0.0 {
            if qv <= 0.0 {
                return Err(DiscreteError::SupportViolation { index: i, p: pv });
            }
            acc += pv * (pv / qv).ln();
        }
    }
    Ok(acc)
}

/// Jensen-Shannon divergence in nats; always finite, bounded by ln 2.
pub fn jsd(p: &[f64], q: &[f64]) -> DiscreteResult<f64> {
    if p.len() != q.len() {
        return Err(DiscreteError::DimMismatch(format!("{} vs {}", p.len(), q.len())));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    Ok(0.5 * (kl(p, &m)? + kl(q, &m)?))
}

/// Symmetric KL in nats: (KL(p||q) + KL(q||p)) / 2.
pub fn skl(p: &[f64], q: &[f64]) -> DiscreteResult<f64> {
    Ok(0.5 * (kl(p, q)? + kl(q, p)?))
}

/// Mutual information of a joint in nats: H(x) + H(z) - H(x, z).
pub fn mutual_information(j: &DiscreteJoint) -> f64 {
    entropy(&j.marginal_x()) + entropy(&j.marginal_z()) - entropy(j.probs())
}

/// The four model factors and two anchors of the finite-alphabet model.
///
/// Conditionals are stored row-wise: `q_z_given_x[x]` is a distribution
/// over z, `p_x_given_z[z]` a distribution over x.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    pub anchor_x: Vec<f64>,
    pub anchor_z: Vec<f64>,
    pub q_z_given_x: Vec<Vec<f64>>,
    pub p_x_given_z: Vec<Vec<f64>>,
    pub prior_x: Vec<f64>, // the model's q(x)
    pub prior_z: Vec<f64>, // the model's p(z)
}

impl DiscreteModel {
    pub fn nx(&self) -> usize {
        self.anchor_x.len()
    }

    pub fn nz(&self) -> usize {
        self.anchor_z.len()
    }

    /// Anchored encoding joint: P(x) q(z|x).
    pub fn encoding_joint(&self) -> DiscreteJoint {
        self.joint_from(|x, z| self.anchor_x[x] * self.q_z_given_x[x][z])
    }

    /// Anchored decoding joint: P(z) p(x|z).
    pub fn decoding_joint(&self) -> DiscreteJoint {
        self.joint_from(|x, z| self.anchor_z[z] * self.p_x_given_z[z][x])
    }

    /// Model encoding joint: q(x) q(z|x).
    pub fn model_q_joint(&self) -> DiscreteJoint {
        self.joint_from(|x, z| self.prior_x[x] * self.q_z_given_x[x][z])
    }

    /// Model decoding joint: p(z) p(x|z).
    pub fn model_p_joint(&self) -> DiscreteJoint {
        self.joint_from(|x, z| self.prior_z[z] * self.p_x_given_z[z][x])
    }

    /// Sample mixture M_S = (encoding + decoding) / 2.
    pub fn sample_mixture(&self) -> DiscreteJoint {
        DiscreteJoint::mix(&self.encoding_joint(), &self.decoding_joint()).expect("same alphabet")
    }

    /// Model mixture M_theta = (model q-joint + model p-joint) / 2.
    pub fn model_mixture(&self) -> DiscreteJoint {
        DiscreteJoint::mix(&self.model_q_joint(), &self.model_p_joint()).expect("same alphabet")
    }

    fn joint_from(&self, f: impl Fn(usize, usize) -> f64) -> DiscreteJoint {
        let (nx, nz) = (self.nx(), self.nz());
        let mut p = Vec::with_capacity(nx * nz);
        for x in 0..nx {
            for z in 0..nz {
                p.push(f(x, z));
            }
        }
        // Re-normalize away float dust so downstream checks see a clean table.
        let sum: f64 = p.iter().sum();
        for v in &mut p {
            *v /= sum;
        }
        DiscreteJoint::new(nx, nz, p).expect("valid model factors")
    }

    /// Random strictly-positive model: Dirichlet(1,...,1) rows with
    /// entries floored at 1e-6 and renormalized, so every KL in the
    /// identity suite is finite.
    pub fn random(nx: usize, nz: usize, rng: &mut ChaCha8Rng) -> Self {
        let simplex = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            // Exp(1) draws normalized give Dirichlet(1,...,1).
            let mut v: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
            let s: f64 = v.iter().sum();
            for x in &mut v {
                *x = (*x / s).max(1e-6);
            }
            let s: f64 = v.iter().sum();
            for x in &mut v {
                *x /= s;
            }
            v
        };
        DiscreteModel {
            anchor_x: simplex(nx, rng),
            anchor_z: simplex(nz, rng),
            q_z_given_x: (0..nx).map(|_| simplex(nz, rng)).collect(),
            p_x_given_z: (0..nz).map(|_| simplex(nx, rng)).collect(),
            prior_x: simplex(nx, rng),
            prior_z: simplex(nz, rng),
        }
    }

    /// Model whose factors all agree: priors equal anchors and the
    /// decoder is the exact posterior of the encoding joint, so the
    /// encoding and decoding joints coincide.
    pub fn consistent(nx: usize, nz: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = DiscreteModel::random(nx, nz, rng);
        let enc = m.encoding_joint();
        let mz = enc.marginal_z();
        m.anchor_z = mz.clone();
        m.prior_z = mz.clone();
        m.prior_x = m.anchor_x.clone();
        m.p_x_given_z = (0..nz)
            .map(|z| (0..nx).map(|x| enc.get(x, z) / mz[z]).collect())
            .collect();
        m
    }
}

/// Residual of the mixture-entropy identity
/// H(M_S) = JSD(encoding, decoding) + (H_enc + H_dec) / 2.
pub fn verify_jsd_entropy_identity(model: &DiscreteModel) -> DiscreteResult<f64> {
    let enc = model.encoding_joint();
    let dec = model.decoding_joint();
    let ms = model.sample_mixture();
    let lhs = entropy(ms.probs());
    let joint_entropy_avg = 0.5 * (entropy(enc.probs()) + entropy(dec.probs()));
    let rhs = jsd(enc.probs(), dec.probs())? + joint_entropy_avg;
    Ok((lhs - rhs).abs())
}

/// Residuals of the two symmetric-loss identities, plus the consistency
/// regularizer value.
#[derive(Debug, Clone, Copy)]
pub struct MimDecomposition {
    /// | L_sym - (L_ce + R) | with R evaluated in its direct KL form.
    pub regularizer_residual: f64,
    /// | L_sym - four-term expansion |
    pub parts_residual: f64,
    /// R = L_sym - L_ce, guaranteed non-negative.
    pub regularizer: f64,
}

/// Checks that the symmetric cross-entropy loss decomposes exactly as
/// L_sym = CE(M_S, M_theta) + R with R >= 0, and as the four-term
/// expansion: joint-entropy average + prior-matching KLs + cross-model
/// KLs (each KL pair weighted 1/4).
pub fn verify_mim_decomposition(model: &DiscreteModel) -> DiscreteResult<MimDecomposition> {
    let ms = model.sample_mixture();
    let qm = model.model_q_joint();
    let pm = model.model_p_joint();
    let mtheta = model.model_mixture();

    let l_sym = 0.5 * (cross_entropy(ms.probs(), qm.probs())? + cross_entropy(ms.probs(), pm.probs())?);
    let l_ce = cross_entropy(ms.probs(), mtheta.probs())?;
    let regularizer = l_sym - l_ce;
    // The direct KL form of the regularizer.
    let r_kl = 0.5 * (kl(ms.probs(), pm.probs())? + kl(ms.probs(), qm.probs())?) - kl(ms.probs(), mtheta.probs())?;
    let regularizer_residual = (regularizer - r_kl).abs();

    let enc = model.encoding_joint();
    let dec = model.decoding_joint();
    let joint_entropy_avg = 0.5 * (entropy(enc.probs()) + entropy(dec.probs()));
    let parts = joint_entropy_avg
        + 0.25 * (kl(&model.anchor_z, &model.prior_z)? + kl(&model.anchor_x, &model.prior_x)?)
        + 0.25 * (kl(enc.probs(), pm.probs())? + kl(dec.probs(), qm.probs())?);
    let parts_residual = (l_sym - parts).abs();

    assert!(regularizer >= -1e-12, "consistency regularizer must be non-negative, got {regularizer}");
    Ok(MimDecomposition { regularizer_residual, parts_residual, regularizer })
}

/// Residual of the VAE-as-cross-entropy identity:
/// (CE(M_S^q, enc) + CE(M_S^q, dec)) / 2 - H(M_S^q) = KL(enc || dec) / 2,
/// where both joints are anchored and M_S^q is the encoding joint itself.
pub fn verify_vae_identity(model: &DiscreteModel) -> DiscreteResult<f64> {
    let enc = model.encoding_joint();
    let dec = model.decoding_joint();
    let ce_form = 0.5 * (cross_entropy(enc.probs(), enc.probs())? + cross_entropy(enc.probs(), dec.probs())?)
        - entropy(enc.probs());
    let direct = 0.5 * kl(enc.probs(), dec.probs())?;
    Ok((ce_form - direct).abs())
}

/// Gaps of the asymmetric bound chain
/// L_asym >= CE(M_S^q, M_theta) >= H_q(x, z), both asserted non-negative.
#[derive(Debug, Clone, Copy)]
pub struct AmimBoundGaps {
    pub loss_minus_ce: f64,
    pub ce_minus_entropy: f64,
}

pub fn verify_amim_bound(model: &DiscreteModel) -> DiscreteResult<AmimBoundGaps> {
    let msq = model.encoding_joint();
    let qm = model.model_q_joint();
    let pm = model.model_p_joint();
    let mtheta = model.model_mixture();
    let l_asym = 0.5 * (cross_entropy(msq.probs(), qm.probs())? + cross_entropy(msq.probs(), pm.probs())?);
    let ce = cross_entropy(msq.probs(), mtheta.probs())?;
    let h = entropy(msq.probs());
    let gaps = AmimBoundGaps { loss_minus_ce: l_asym - ce, ce_minus_entropy: ce - h };
    assert!(gaps.loss_minus_ce >= -1e-12, "bound gap 1 negative: {}", gaps.loss_minus_ce);
    assert!(gaps.ce_minus_entropy >= -1e-12, "bound gap 2 negative: {}", gaps.ce_minus_entropy);
    Ok(gaps)
}

/// Residual of the exact relation between the symmetric KL and the JSD:
/// SKL / 2 = (KL(M_S||enc) + KL(M_S||dec)) / 2 + JSD.
pub fn verify_skl_jsd_relation(model: &DiscreteModel) -> DiscreteResult<f64> {
    let enc = model.encoding_joint();
    let dec = model.decoding_joint();
    let ms = model.sample_mixture();
    let lhs = 0.5 * skl(enc.probs(), dec.probs())?;
    let rhs = 0.5 * (kl(ms.probs(), enc.probs())? + kl(ms.probs(), dec.probs())?) + jsd(enc.probs(), dec.probs())?;
    Ok((lhs - rhs).abs())
}

/// One row of the identity-suite report.
#[derive(Debug, Clone)]
pub struct IdentityReport {
    pub name: &'static str,
    pub max_residual: f64,
    pub tolerance: f64,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.max_residual < self.tolerance
    }
}

/// Runs the full identity suite over `trials` random strictly-positive
/// models with alphabet sizes drawn from {2, 3, 4, 5}; returns the
/// per-identity max residuals. Deterministic for a fixed seed.
pub fn run_identity_suite(trials: usize, seed: u64) -> DiscreteResult<Vec<IdentityReport>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jsd_h: f64 = 0.0;
    let mut reg: f64 = 0.0;
    let mut parts: f64 = 0.0;
    let mut min_reg = f64::INFINITY;
    let mut vae: f64 = 0.0;
    let mut amim_gap: f64 = 0.0;
    let mut skl_rel: f64 = 0.0;
    for _ in 0..trials {
        let nx = rng.gen_range(2..=5);
        let nz = rng.gen_range(2..=5);
        let m = DiscreteModel::random(nx, nz, &mut rng);
        jsd_h = jsd_h.max(verify_jsd_entropy_identity(&m)?);
        let d = verify_mim_decomposition(&m)?;
        reg = reg.max(d.regularizer_residual);
        parts = parts.max(d.parts_residual);
        min_reg = min_reg.min(d.regularizer);
        vae = vae.max(verify_vae_identity(&m)?);
        let g = verify_amim_bound(&m)?;
        amim_gap = amim_gap.max((-g.loss_minus_ce).max(-g.ce_minus_entropy).max(0.0));
        skl_rel = skl_rel.max(verify_skl_jsd_relation(&m)?);
    }
    Ok(vec![
        IdentityReport { name: "mixture-entropy (JSD + joint-entropy average)", max_residual: jsd_h, tolerance: 1e-12 },
        IdentityReport { name: "loss = CE + consistency regularizer (R >= 0)", max_residual: reg.max(-min_reg.min(0.0)), tolerance: 1e-12 },
        IdentityReport { name: "four-term loss expansion", max_residual: parts, tolerance: 1e-12 },
        IdentityReport { name: "VAE loss as cross-entropy pair", max_residual: vae, tolerance: 1e-12 },
        IdentityReport { name: "asymmetric bound chain (gap violations)", max_residual: amim_gap, tolerance: 1e-12 },
        IdentityReport { name: "SKL/JSD exact relation", max_residual: skl_rel, tolerance: 1e-12 },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn entropy_basics() {
        let u = [0.25; 4];
        assert!((entropy(&u) - 4.0_f64.ln()).abs() < 1e-14);
        let point = [0.0, 1.0, 0.0];
        assert_eq!(entropy(&point), 0.0);
    }

    #[test]
    fn entropy_matches_duplicate_summation() {
        let mut r = rng(1);
        let m = DiscreteModel::random(3, 3, &mut r);
        let j = m.encoding_joint();
        // Second, independently-written loop.
        let mut h = 0.0;
        for x in 0..3 {
            for z in 0..3 {
                let p = j.get(x, z);
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
        }
        assert!((entropy(j.probs()) - h).abs() < 1e-14);
    }

    #[test]
    fn kl_of_self_is_zero_and_disjoint_errors() {
        let p = [0.3, 0.7];
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        let q = [0.0, 1.0];
        let r = [1.0, 0.0];
        assert!(matches!(kl(&q, &r), Err(DiscreteError::SupportViolation { .. })));
    }

    #[test]
    fn kl_matches_duplicate_implementation() {
        let mut r = rng(2);
        let a = DiscreteModel::random(4, 3, &mut r).encoding_joint();
        let b = DiscreteModel::random(4, 3, &mut r).encoding_joint();
        let mut expect = 0.0;
        for i in 0..a.probs().len() {
            let (p, q) = (a.probs()[i], b.probs()[i]);
            expect += p * (p.ln() - q.ln());
        }
        assert!((kl(a.probs(), b.probs()).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn jsd_bounds_and_degenerate_cases() {
        let p = [0.3, 0.7];
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let mut r = rng(3);
        for _ in 0..50 {
            let a = DiscreteModel::random(3, 2, &mut r).encoding_joint();
            let b = DiscreteModel::random(3, 2, &mut r).encoding_joint();
            let d = jsd(a.probs(), b.probs()).unwrap();
            assert!((0.0..=2.0_f64.ln() + 1e-15).contains(&d));
            // JSD <= SKL / 2 everywhere.
            assert!(d <= skl(a.probs(), b.probs()).unwrap() * 0.5 + 1e-12);
        }
    }

    #[test]
    fn mi_of_independent_product_is_zero() {
        let px = [0.2, 0.8];
        let pz = [0.5, 0.3, 0.2];
        let mut p = Vec::new();
        for &a in &px {
            for &b in &pz {
                p.push(a * b);
            }
        }
        let j = DiscreteJoint::new(2, 3, p).unwrap();
        assert!(mutual_information(&j).abs() < 1e-14);
    }

    #[test]
    fn mi_matches_double_sum_definition() {
        let mut r = rng(4);
        for _ in 0..20 {
            let j = DiscreteModel::random(4, 4, &mut r).sample_mixture();
            let mx = j.marginal_x();
            let mz = j.marginal_z();
            let mut mi = 0.0;
            for x in 0..4 {
                for z in 0..4 {
                    let p = j.get(x, z);
                    if p > 0.0 {
                        mi += p * (p / (mx[x] * mz[z])).ln();
                    }
                }
            }
            assert!((mutual_information(&j) - mi).abs() < 1e-14);
        }
    }

    #[test]
    fn jsd_entropy_identity_consistent_model() {
        let mut r = rng(5);
        let m = DiscreteModel::consistent(4, 3, &mut r);
        let enc = m.encoding_joint();
        let dec = m.decoding_joint();
        assert!(jsd(enc.probs(), dec.probs()).unwrap() < 1e-12);
        assert!(verify_jsd_entropy_identity(&m).unwrap() < 1e-12);
    }

    #[test]
    fn jsd_entropy_identity_random_models() {
        let mut r = rng(6);
        for _ in 0..100 {
            let m = DiscreteModel::random(4, 3, &mut r);
            assert!(verify_jsd_entropy_identity(&m).unwrap() < 1e-12);
        }
    }

    #[test]
    fn jsd_entropy_identity_deterministic_conditionals() {
        // Permutation conditionals: q(z|x) deterministic.
        let nx = 3;
        let nz = 3;
        let mut q = vec![vec![0.0; nz]; nx];
        for (x, row) in q.iter_mut().enumerate() {
            row[(x + 1) % nz] = 1.0;
        }
        let mut p = vec![vec![0.0; nx]; nz];
        for (z, row) in p.iter_mut().enumerate() {
            row[(z + 2) % nx] = 1.0;
        }
        let m = DiscreteModel {
            anchor_x: vec![0.2, 0.5, 0.3],
            anchor_z: vec![0.4, 0.4, 0.2],
            q_z_given_x: q,
            p_x_given_z: p,
            prior_x: vec![1.0 / 3.0; 3],
            prior_z: vec![1.0 / 3.0; 3],
        };
        assert!(verify_jsd_entropy_identity(&m).unwrap() < 1e-12);
    }

    #[test]
    fn mim_decomposition_consistent_model_has_zero_regularizer() {
        let mut r = rng(7);
        let m = DiscreteModel::consistent(3, 3, &mut r);
        let d = verify_mim_decomposition(&m).unwrap();
        assert!(d.regularizer.abs() < 1e-12, "R = {}", d.regularizer);
        assert!(d.regularizer_residual < 1e-12);
        assert!(d.parts_residual < 1e-12);
    }

    #[test]
    fn mim_decomposition_random_models() {
        let mut r = rng(8);
        for _ in 0..100 {
            let m = DiscreteModel::random(4, 3, &mut r);
            let d = verify_mim_decomposition(&m).unwrap();
            assert!(d.regularizer_residual < 1e-12);
            assert!(d.parts_residual < 1e-12);
            assert!(d.regularizer >= -1e-12);
        }
    }

    #[test]
    fn mim_decomposition_prior_mismatch_shows_in_kl_term() {
        let mut r = rng(9);
        let mut m = DiscreteModel::consistent(3, 3, &mut r);
        // Perturb only the model data prior q(x).
        m.prior_x = vec![0.6, 0.2, 0.2];
        let d = verify_mim_decomposition(&m).unwrap();
        assert!(d.parts_residual < 1e-12);
        let kl_px = kl(&m.anchor_x, &m.prior_x).unwrap();
        assert!(kl_px > 1e-3, "expected positive KL from perturbed prior");
    }

    #[test]
    fn vae_identity_holds() {
        let mut r = rng(10);
        let m = DiscreteModel::consistent(3, 4, &mut r);
        assert!(verify_vae_identity(&m).unwrap() < 1e-12);
        // Encoder collapse: q(z|x) = anchor_z for all x.
        let mut mc = DiscreteModel::random(3, 4, &mut r);
        mc.q_z_given_x = vec![mc.anchor_z.clone(); 3];
        assert!(verify_vae_identity(&mc).unwrap() < 1e-12);
        for _ in 0..100 {
            let m = DiscreteModel::random(4, 3, &mut r);
            assert!(verify_vae_identity(&m).unwrap() < 1e-12);
        }
    }

    #[test]
    fn amim_bound_gaps() {
        let mut r = rng(11);
        let m = DiscreteModel::consistent(4, 4, &mut r);
        let g = verify_amim_bound(&m).unwrap();
        assert!(g.loss_minus_ce.abs() < 1e-12, "consistent model should close the first gap");
        for _ in 0..100 {
            let m = DiscreteModel::random(3, 4, &mut r);
            let g = verify_amim_bound(&m).unwrap();
            assert!(g.loss_minus_ce >= -1e-12);
            assert!(g.ce_minus_entropy >= -1e-12);
        }
        // Make the model joints differ by permuting the decoder rows of a
        // consistent model: the first gap becomes strictly positive.
        let mut mp = DiscreteModel::consistent(3, 3, &mut r);
        mp.p_x_given_z.rotate_left(1);
        let g = verify_amim_bound(&mp).unwrap();
        assert!(g.loss_minus_ce > 1e-6, "permuted decoder should open the gap, got {}", g.loss_minus_ce);
    }

    #[test]
    fn skl_jsd_relation() {
        let mut r = rng(12);
        let m = DiscreteModel::consistent(3, 3, &mut r);
        let enc = m.encoding_joint();
        let dec = m.decoding_joint();
        assert!(skl(enc.probs(), dec.probs()).unwrap() < 1e-12);
        for _ in 0..100 {
            let m = DiscreteModel::random(4, 4, &mut r);
            assert!(verify_skl_jsd_relation(&m).unwrap() < 1e-12);
        }
    }

    #[test]
    fn skl_jsd_relation_near_degenerate() {
        // One encoding-joint cell pushed to ~1e-9.
        let mut m = DiscreteModel {
            anchor_x: vec![1.0 - 1e-9, 1e-9],
            anchor_z: vec![0.5, 0.5],
            q_z_given_x: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            p_x_given_z: vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            prior_x: vec![0.5, 0.5],
            prior_z: vec![0.5, 0.5],
        };
        m.q_z_given_x[1] = vec![1e-9, 1.0 - 1e-9];
        assert!(verify_skl_jsd_relation(&m).unwrap() < 1e-9);
    }

    #[test]
    fn identity_suite_runs_clean_and_deterministic() {
        let r1 = run_identity_suite(100, 9001).unwrap();
        assert!(r1.iter().all(|r| r.passed()), "{r1:?}");
        let r2 = run_identity_suite(100, 9001).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.max_residual.to_bits(), b.max_residual.to_bits());
        }
    }

    /// Mutation check: flipping the sign of the joint-entropy term in the
    /// mixture-entropy identity must blow the residual, i.e. the suite is
    /// sensitive to algebra errors.
    #[test]
    fn identity_suite_detects_injected_sign_error() {
        let mut r = rng(13);
        let m = DiscreteModel::random(4, 4, &mut r);
        let enc = m.encoding_joint();
        let dec = m.decoding_joint();
        let ms = m.sample_mixture();
        let lhs = entropy(ms.probs());
        // Sign error: subtract the joint-entropy average instead of adding.
        let broken = jsd(enc.probs(), dec.probs()).unwrap() - 0.5 * (entropy(enc.probs()) + entropy(dec.probs()));
        assert!((lhs - broken).abs() > 1e-3);
    }
}
