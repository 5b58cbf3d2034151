//! Post-hoc evaluation metrics.
//!
//! Everything here is pure and deterministic given its seed arguments.
//! Neighbor searches are brute force (n is at most a few 10^4 at desk
//! scale); heavy per-row loops fan out across threads but reduce in a
//! fixed row order, so results do not depend on the thread count.

use crate::autodiff::{Tensor, HALF_LN_2PI};
use crate::dist::{standard_normal, AnchorSpec};
use crate::model::{ModelBundle, ModelError, PriorSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need more samples: {0}")]
    TooFewSamples(String),
    #[error("coordinate {coord} of the {block} block has zero variance; pass a jitter seed to break ties")]
    ZeroVariance { coord: usize, block: &'static str },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type MetricsResult<T> = Result<T, MetricsError>;

fn worker_threads() -> usize {
    std::env::var("MIMLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Run `f` over every row index, fanning chunks out across threads;
/// outputs land in a vector indexed by row, so the result is independent
/// of the thread count.
fn par_map_rows<T: Send + Default + Clone, F: Fn(usize) -> T + Sync>(n: usize, f: F) -> Vec<T> {
    let threads = worker_threads().min(n.max(1));
    if threads <= 1 || n < 128 {
        return (0..n).map(f).collect();
    }
    let mut out = vec![T::default(); n];
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, slice) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                let start = t * chunk;
                for (off, dst) in slice.iter_mut().enumerate() {
                    *dst = f(start + off);
                }
            });
        }
    });
    out
}

/// Digamma at positive integers via harmonic numbers:
/// psi(m) = -gamma + H_{m-1}.
struct IntDigamma {
    harmonic: Vec<f64>,
}

impl IntDigamma {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    fn up_to(max_m: usize) -> Self {
        let mut harmonic = Vec::with_capacity(max_m + 1);
        harmonic.push(0.0);
        let mut acc = 0.0;
        for j in 1..=max_m {
            acc += 1.0 / j as f64;
            harmonic.push(acc);
        }
        IntDigamma { harmonic }
    }

    fn psi(&self, m: usize) -> f64 {
        debug_assert!(m >= 1);
        -Self::EULER_GAMMA + self.harmonic[m - 1]
    }
}

/// Nonparametric mutual-information estimate between paired rows of
/// `xs` (n x dx) and `zs` (n x dz) from k-nearest-neighbor statistics
/// (the first form of the estimator family):
///
/// psi(k) + psi(n) - mean_i [ psi(nx_i + 1) + psi(nz_i + 1) ],
///
/// with joint distances under the max-norm across the two blocks and
/// marginal counts strictly inside the i-th joint k-NN radius.
///
/// `jitter` seeds a deterministic uniform perturbation of amplitude
/// 1e-10 that breaks ties; without it, a zero-variance coordinate is
/// rejected.
pub fn ksg_mi(
    xs: &[f64],
    dx: usize,
    zs: &[f64],
    dz: usize,
    k: usize,
    jitter: Option<u64>,
) -> MetricsResult<f64> {
    let n = xs.len() / dx.max(1);
    if zs.len() / dz.max(1) != n || xs.len() != n * dx || zs.len() != n * dz {
        return Err(MetricsError::DimMismatch(format!(
            "{} x values over dx {} vs {} z values over dz {}",
            xs.len(),
            dx,
            zs.len(),
            dz
        )));
    }
    if k < 1 || n <= k {
        return Err(MetricsError::TooFewSamples(format!("n = {n} must exceed k = {k}")));
    }

    let (xs, zs) = match jitter {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut xj = xs.to_vec();
            for v in &mut xj {
                *v += rng.gen_range(-1e-10..1e-10);
            }
            let mut zj = zs.to_vec();
            for v in &mut zj {
                *v += rng.gen_range(-1e-10..1e-10);
            }
            (xj, zj)
        }
        None => {
            for block in [("x", xs, dx), ("z", zs, dz)] {
                let (name, data, d) = block;
                for c in 0..d {
                    let first = data[c];
                    if (0..n).all(|i| data[i * d + c] == first) {
                        return Err(MetricsError::ZeroVariance {
                            coord: c,
                            block: if name == "x" { "x" } else { "z" },
                        });
                    }
                }
            }
            (xs.to_vec(), zs.to_vec())
        }
    };

    let digamma = IntDigamma::up_to(n + 1);
    let per_row: Vec<(usize, usize)> = par_map_rows(n, |i| {
        let xi = &xs[i * dx..(i + 1) * dx];
        let zi = &zs[i * dz..(i + 1) * dz];
        let mut dxs = vec![0.0f64; n];
        let mut dzs = vec![0.0f64; n];
        for j in 0..n {
            let xj = &xs[j * dx..(j + 1) * dx];
            let mut m = 0.0f64;
            for c in 0..dx {
                m = m.max((xi[c] - xj[c]).abs());
            }
            dxs[j] = m;
            let zj = &zs[j * dz..(j + 1) * dz];
            let mut m = 0.0f64;
            for c in 0..dz {
                m = m.max((zi[c] - zj[c]).abs());
            }
            dzs[j] = m;
        }
        // k-th smallest joint distance over j != i.
        let mut joint: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dxs[j].max(dzs[j])).collect();
        let (_, kth, _) = joint.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite distances"));
        let eps = *kth;
        let mut nx = 0usize;
        let mut nz = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            if dxs[j] < eps {
                nx += 1;
            }
            if dzs[j] < eps {
                nz += 1;
            }
        }
        (nx, nz)
    });
    // Reduce through integer count histograms: the estimate is then a
    // fixed-order sum independent of row order, making permutation
    // invariance and x/z symmetry exact.
    let mut hist = vec![0u64; n + 1];
    for &(nx, nz) in &per_row {
        hist[nx] += 1;
        hist[nz] += 1;
    }
    let mut psi_sum = 0.0;
    for (m, &count) in hist.iter().enumerate() {
        if count > 0 {
            psi_sum += count as f64 * digamma.psi(m + 1);
        }
    }
    let mean_psi = psi_sum / n as f64;
    Ok(digamma.psi(k) + digamma.psi(n) - mean_psi)
}

/// Batched posterior means and log-stds for a set of rows.
fn encode_chunked(model: &ModelBundle, rows: &[f64], n: usize, chunk: usize) -> MetricsResult<(Vec<f64>, Vec<f64>)> {
    let dx = model.dim_x();
    let dz = model.dim_z();
    let mut means = Vec::with_capacity(n * dz);
    let mut log_stds = Vec::with_capacity(n * dz);
    let mut i = 0;
    while i < n {
        let hi = (i + chunk).min(n);
        let t = Tensor::new(vec![hi - i, dx], rows[i * dx..hi * dx].to_vec()).expect("shape");
        let (m, ls) = model.encode_rows_value(&t)?;
        means.extend_from_slice(m.data());
        log_stds.extend_from_slice(ls.data());
        i = hi;
    }
    Ok((means, log_stds))
}

const EVAL_CHUNK: usize = 1024;

/// Importance-sampled negative log likelihood of one observation:
/// -logmeanexp_s [ log p(x|z_s) + log p(z_s) - log q(z_s|x) ],
/// z_s ~ q(z|x). Exposed mainly for tests; evaluation uses the batched
/// [`nll_importance_mean`].
pub fn nll_importance(x: &[f64], model: &ModelBundle, s: usize, rng: &mut ChaCha8Rng) -> MetricsResult<f64> {
    let out = nll_importance_batch(std::slice::from_ref(&x.to_vec()), model, s, rng)?;
    Ok(out[0])
}

/// Single-sample encoder-path bound on the negative log likelihood:
/// -[ log p(x|z) + log p(z) - log q(z|x) ], z ~ q(z|x).
pub fn nll_encoder_bound(x: &[f64], model: &ModelBundle, rng: &mut ChaCha8Rng) -> MetricsResult<f64> {
    let out = nll_importance_batch(std::slice::from_ref(&x.to_vec()), model, 1, rng)?;
    Ok(out[0])
}

fn nll_importance_batch(points: &[Vec<f64>], model: &ModelBundle, s: usize, rng: &mut ChaCha8Rng) -> MetricsResult<Vec<f64>> {
    assert!(s >= 1, "need at least one importance sample");
    let dx = model.dim_x();
    let dz = model.dim_z();
    let c = points.len();
    // Posterior parameters per point.
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    if flat.len() != c * dx {
        return Err(MetricsError::DimMismatch("observation dimension".into()));
    }
    let (enc_means, enc_ls) = encode_chunked(model, &flat, c, EVAL_CHUNK)?;
    // All posterior samples, [c * s, dz].
    let mut z_all = Vec::with_capacity(c * s * dz);
    for i in 0..c {
        for _ in 0..s {
            for d in 0..dz {
                let eps = standard_normal(rng);
                z_all.push(enc_means[i * dz + d] + enc_ls[i * dz + d].exp() * eps);
            }
        }
    }
    // Decoder parameters and prior log-probs for every sample, chunked.
    let mut log_w = vec![0.0f64; c * s];
    let mut row = 0usize;
    while row < c * s {
        let hi = (row + EVAL_CHUNK).min(c * s);
        let zt = Tensor::new(vec![hi - row, dz], z_all[row * dz..hi * dz].to_vec()).expect("shape");
        let (dec_mean, dec_ls) = model.decode_rows_value(&zt)?;
        for r in row..hi {
            let point = r / s;
            let x = &flat[point * dx..(point + 1) * dx];
            let zr = &z_all[r * dz..(r + 1) * dz];
            let mut log_p_xz = 0.0;
            for d in 0..dx {
                let ls = dec_ls.data()[(r - row) * dx + d];
                let diff = (x[d] - dec_mean.data()[(r - row) * dx + d]) * (-ls).exp();
                log_p_xz += -ls - HALF_LN_2PI - 0.5 * diff * diff;
            }
            let log_p_z = model.z_prior_log_prob(zr)?;
            let mut log_q_zx = 0.0;
            for d in 0..dz {
                let ls = enc_ls[point * dz + d];
                let diff = (zr[d] - enc_means[point * dz + d]) * (-ls).exp();
                log_q_zx += -ls - HALF_LN_2PI - 0.5 * diff * diff;
            }
            let w = log_p_xz + log_p_z - log_q_zx;
            if !w.is_finite() {
                return Err(MetricsError::NonFinite("importance weight"));
            }
            log_w[r] = w;
        }
        row = hi;
    }
    let mut out = Vec::with_capacity(c);
    for i in 0..c {
        let ws = &log_w[i * s..(i + 1) * s];
        let m = ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + ws.iter().map(|&w| (w - m).exp()).sum::<f64>().ln();
        out.push(-(lse - (s as f64).ln()));
    }
    Ok(out)
}

/// Mean importance-sampled NLL over a set of evaluation points.
pub fn nll_importance_mean(points: &[Vec<f64>], model: &ModelBundle, s: usize, rng: &mut ChaCha8Rng) -> MetricsResult<f64> {
    let vals = nll_importance_batch(points, model, s, rng)?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Mean single-sample encoder-bound NLL over a set of points.
pub fn nll_encoder_bound_mean(points: &[Vec<f64>], model: &ModelBundle, rng: &mut ChaCha8Rng) -> MetricsResult<f64> {
    nll_importance_mean(points, model, 1, rng)
}

/// Root-mean-squared error of the deterministic reconstruction pass:
/// x -> posterior mean -> decoder mean.
pub fn recon_rmse(rows: &[f64], n: usize, model: &ModelBundle) -> MetricsResult<f64> {
    let dx = model.dim_x();
    if rows.len() != n * dx {
        return Err(MetricsError::DimMismatch(format!("{} values for {n} x {dx}", rows.len())));
    }
    let dz = model.dim_z();
    let mut sq_sum = 0.0;
    let mut i = 0;
    while i < n {
        let hi = (i + EVAL_CHUNK).min(n);
        let xt = Tensor::new(vec![hi - i, dx], rows[i * dx..hi * dx].to_vec()).expect("shape");
        let (zm, _) = model.encode_rows_value(&xt)?;
        let zt = Tensor::new(vec![hi - i, dz], zm.data().to_vec()).expect("shape");
        let (xm, _) = model.decode_rows_value(&zt)?;
        for (a, b) in xm.data().iter().zip(xt.data()) {
            let d = a - b;
            sq_sum += d * d;
        }
        i = hi;
    }
    Ok((sq_sum / (n * dx) as f64).sqrt())
}

/// Labeled point set for the representation probe.
#[derive(Debug, Clone)]
pub struct LabeledEmbedding {
    pub dim: usize,
    pub points: Vec<f64>,
    pub labels: Vec<u32>,
}

impl LabeledEmbedding {
    pub fn new(dim: usize, points: Vec<f64>, labels: Vec<u32>) -> MetricsResult<Self> {
        if dim == 0 || points.len() != labels.len() * dim {
            return Err(MetricsError::DimMismatch(format!(
                "{} coords vs {} labels at dim {dim}",
                points.len(),
                labels.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite("embedding"));
        }
        Ok(LabeledEmbedding { dim, points, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Majority-vote k-nearest-neighbor accuracy under the Euclidean metric.
/// Vote ties break toward the smallest summed distance, then the lowest
/// label index.
pub fn knn_classify(train: &LabeledEmbedding, test: &LabeledEmbedding, k: usize) -> MetricsResult<f64> {
    if train.dim != test.dim {
        return Err(MetricsError::DimMismatch(format!("train dim {} vs test dim {}", train.dim, test.dim)));
    }
    if k == 0 || k > train.len() {
        return Err(MetricsError::TooFewSamples(format!("k = {k} with {} train points", train.len())));
    }
    if test.is_empty() {
        return Err(MetricsError::TooFewSamples("empty test set".into()));
    }
    let d = train.dim;
    let hits = par_map_rows(test.len(), |t| {
        let q = test.row(t);
        // Max-heap of the k closest (distance, index) pairs.
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for i in 0..train.len() {
            let r = train.row(i);
            let mut dist = 0.0;
            for c in 0..d {
                let diff = q[c] - r[c];
                dist += diff * diff;
            }
            if heap.len() < k {
                heap.push((dist, i));
                if heap.len() == k {
                    heap.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite"));
                }
            } else if dist < heap[0].0 {
                heap[0] = (dist, i);
                let mut j = 0;
                while j + 1 < k && heap[j].0 < heap[j + 1].0 {
                    heap.swap(j, j + 1);
                    j += 1;
                }
            }
        }
        // Vote with distance-sum/label tie breaking.
        let mut tally: Vec<(u32, usize, f64)> = Vec::new(); // (label, count, dist sum)
        for &(dist, i) in &heap {
            let label = train.labels[i];
            match tally.iter_mut().find(|(l, _, _)| *l == label) {
                Some(e) => {
                    e.1 += 1;
                    e.2 += dist;
                }
                None => tally.push((label, 1, dist)),
            }
        }
        tally.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(a.2.partial_cmp(&b.2).expect("finite"))
                .then(a.0.cmp(&b.0))
        });
        u32::from(tally[0].0 == test.labels[t])
    });
    Ok(hits.iter().map(|&h| h as f64).sum::<f64>() / test.len() as f64)
}

/// Mean posterior standard deviation relative to the unit-variance
/// latent anchor: 1.0 means the posterior matches the prior scale (full
/// collapse), values near 0 a near-deterministic encoder.
pub fn collapse_index(rows: &[f64], n: usize, model: &ModelBundle) -> MetricsResult<f64> {
    if !matches!(model.z_prior, PriorSpec::Anchor) || !matches!(model.z_anchor, AnchorSpec::StandardNormal(_)) {
        return Err(MetricsError::DimMismatch("collapse index assumes the standard-normal latent anchor prior".into()));
    }
    let (_, log_stds) = encode_chunked(model, rows, n, EVAL_CHUNK)?;
    Ok(log_stds.iter().map(|ls| ls.exp()).sum::<f64>() / log_stds.len() as f64)
}

/// Posterior-mean embedding of data rows, `[n, dz]`.
pub fn embed_posterior_means(rows: &[f64], n: usize, model: &ModelBundle) -> MetricsResult<Tensor> {
    let (means, _) = encode_chunked(model, rows, n, EVAL_CHUNK)?;
    Ok(Tensor::new(vec![n, model.dim_z()], means).expect("shape"))
}

/// Evaluation configuration; every knob that affects a metric value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Neighbor count for the MI estimator.
    pub ksg_k: usize,
    /// Importance samples per point for the NLL estimate.
    pub nll_samples: usize,
    /// Evaluation points for the NLL estimates (seeded subsample of the
    /// test split when smaller than the split).
    pub nll_points: usize,
    /// Neighbor count for the classification probe.
    pub knn_k: usize,
    /// Reference-embedding size for the probe (subsampled from train).
    pub knn_train_points: usize,
    /// Cap on paired rows entering the MI estimate.
    pub mi_points: usize,
    /// Seed for evaluation-time randomness (posterior draws, subsampling,
    /// neighbor-tie jitter).
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            ksg_k: 5,
            nll_samples: 64,
            nll_points: 2000,
            knn_k: 5,
            knn_train_points: 10_000,
            mi_points: 10_000,
            seed: 0,
        }
    }
}

/// One evaluation row; serializes to the fixed CSV column order
/// `seed,loss_kind,hidden,latent_dim,epochs,mi_ksg,nll_iw,nll_enc_bound,recon_rmse,knn_acc,collapse_index`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub loss_kind: String,
    pub hidden: usize,
    pub latent_dim: usize,
    pub epochs: usize,
    pub mi_ksg: f64,
    pub nll_iw: f64,
    pub nll_enc_bound: f64,
    pub recon_rmse: f64,
    pub knn_acc: Option<f64>,
    pub collapse_index: Option<f64>,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str =
        "seed,loss_kind,hidden,latent_dim,epochs,mi_ksg,nll_iw,nll_enc_bound,recon_rmse,knn_acc,collapse_index";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.loss_kind,
            self.hidden,
            self.latent_dim,
            self.epochs,
            self.mi_ksg,
            self.nll_iw,
            self.nll_enc_bound,
            self.recon_rmse,
            opt(&self.knn_acc),
            opt(&self.collapse_index),
        )
    }

    /// Parse a row written by [`MetricsRecord::to_csv_row`].
    pub fn parse_csv_row(row: &str) -> Option<MetricsRecord> {
        let fields: Vec<&str> = row.trim_end().split(',').collect();
        if fields.len() != 11 {
            return None;
        }
        let opt = |s: &str| -> Option<Option<f64>> {
            if s.is_empty() {
                Some(None)
            } else {
                s.parse::<f64>().ok().map(Some)
            }
        };
        Some(MetricsRecord {
            seed: fields[0].parse().ok()?,
            loss_kind: fields[1].to_string(),
            hidden: fields[2].parse().ok()?,
            latent_dim: fields[3].parse().ok()?,
            epochs: fields[4].parse().ok()?,
            mi_ksg: fields[5].parse().ok()?,
            nll_iw: fields[6].parse().ok()?,
            nll_enc_bound: fields[7].parse().ok()?,
            recon_rmse: fields[8].parse().ok()?,
            knn_acc: opt(fields[9])?,
            collapse_index: opt(fields[10])?,
        })
    }
}

/// Run metadata threaded into the record.
#[derive(Debug, Clone)]
pub struct RunInfo {
    pub seed: u64,
    pub loss_kind: String,
    pub hidden: usize,
    pub epochs: usize,
}

/// Full evaluation pass over a dataset's train/test splits.
///
/// MI pairs each test point with one posterior sample; NLL uses the
/// importance estimate and the single-sample bound on a seeded subsample;
/// the probe classifies test posterior means against train posterior
/// means; the collapse index is reported only for standard-anchor priors.
pub fn evaluate(
    model: &ModelBundle,
    dataset: &crate::data::Dataset,
    spec: &EvalSpec,
    info: &RunInfo,
) -> MetricsResult<MetricsRecord> {
    use crate::data::Split;
    let dz = model.dim_z();
    let dx = model.dim_x();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (test_rows, test_labels) = dataset.split_rows(Split::Test);
    let n_test = test_rows.rows();
    if n_test == 0 {
        return Err(MetricsError::TooFewSamples("dataset has no test split".into()));
    }

    // Mutual information between observations and posterior samples.
    let n_mi = n_test.min(spec.mi_points);
    let mi_idx = seeded_subset(n_test, n_mi, &mut rng);
    let mut mi_x = Vec::with_capacity(n_mi * dx);
    for &i in &mi_idx {
        mi_x.extend_from_slice(test_rows.row(i));
    }
    let (mi_means, mi_ls) = encode_chunked(model, &mi_x, n_mi, EVAL_CHUNK)?;
    let mut mi_z = Vec::with_capacity(n_mi * dz);
    for i in 0..n_mi {
        for d in 0..dz {
            mi_z.push(mi_means[i * dz + d] + mi_ls[i * dz + d].exp() * standard_normal(&mut rng));
        }
    }
    let mi_ksg = ksg_mi(&mi_x, dx, &mi_z, dz, spec.ksg_k, Some(spec.seed ^ 0x4b53_47))?;

    // NLL estimates on a subsample.
    let n_nll = n_test.min(spec.nll_points);
    let nll_idx = seeded_subset(n_test, n_nll, &mut rng);
    let nll_points: Vec<Vec<f64>> = nll_idx.iter().map(|&i| test_rows.row(i).to_vec()).collect();
    let nll_iw = nll_importance_mean(&nll_points, model, spec.nll_samples, &mut rng)?;
    let nll_enc_bound = nll_encoder_bound_mean(&nll_points, model, &mut rng)?;

    // Deterministic reconstruction error over the full test split.
    let recon = recon_rmse(test_rows.data(), n_test, model)?;

    // Representation probe when labels exist.
    let knn_acc = match (&test_labels, &dataset.labels) {
        (Some(test_l), Some(_)) => {
            let (train_rows, train_labels) = dataset.split_rows(Split::Train);
            let train_l = train_labels.expect("labels cover all rows");
            let n_ref = train_rows.rows().min(spec.knn_train_points);
            let ref_idx = seeded_subset(train_rows.rows(), n_ref, &mut rng);
            let mut ref_x = Vec::with_capacity(n_ref * dx);
            let mut ref_l = Vec::with_capacity(n_ref);
            for &i in &ref_idx {
                ref_x.extend_from_slice(train_rows.row(i));
                ref_l.push(train_l[i]);
            }
            let ref_emb = embed_posterior_means(&ref_x, n_ref, model)?;
            let test_emb = embed_posterior_means(test_rows.data(), n_test, model)?;
            let train_set = LabeledEmbedding::new(dz, ref_emb.data().to_vec(), ref_l)?;
            let test_set = LabeledEmbedding::new(dz, test_emb.data().to_vec(), test_l.clone())?;
            Some(knn_classify(&train_set, &test_set, spec.knn_k)?)
        }
        _ => None,
    };

    let collapse = if matches!(model.z_prior, PriorSpec::Anchor)
        && matches!(model.z_anchor, AnchorSpec::StandardNormal(_))
    {
        Some(collapse_index(test_rows.data(), n_test, model)?)
    } else {
        None
    };

    Ok(MetricsRecord {
        seed: info.seed,
        loss_kind: info.loss_kind.clone(),
        hidden: info.hidden,
        latent_dim: dz,
        epochs: info.epochs,
        mi_ksg,
        nll_iw,
        nll_enc_bound,
        recon_rmse: recon,
        knn_acc,
        collapse_index: collapse,
    })
}

/// First `m` indices of a seeded shuffle of 0..n (all of them in order
/// when m == n).
fn seeded_subset(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.gen_range(0..n - i);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::EmpiricalData;
    use crate::model::{Activation, CondNet, LinearCondGaussian, MlpCondGaussian};
    use std::sync::Arc;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn correlated_pairs(n: usize, rho: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut r = rng(seed);
        let mut xs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let a = standard_normal(&mut r);
            let b = standard_normal(&mut r);
            xs.push(a);
            zs.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        (xs, zs)
    }

    #[test]
    fn ksg_independent_is_near_zero() {
        let (xs, zs) = correlated_pairs(4000, 0.0, 1);
        let mi = ksg_mi(&xs, 1, &zs, 1, 5, Some(7)).unwrap();
        assert!(mi.abs() < 0.03, "mi {mi}");
    }

    #[test]
    fn ksg_matches_gaussian_closed_form() {
        // MI = -ln(1 - rho^2) / 2.
        let rho = 0.5;
        let (xs, zs) = correlated_pairs(4000, rho, 2);
        let mi = ksg_mi(&xs, 1, &zs, 1, 5, Some(7)).unwrap();
        let analytic = -0.5 * (1.0 - rho * rho).ln();
        assert!((mi - analytic).abs() < 0.05, "mi {mi} vs {analytic}");
    }

    #[test]
    fn ksg_deterministic_copy_grows() {
        let (xs, _) = correlated_pairs(4000, 0.0, 3);
        let zs = xs.clone();
        let mi = ksg_mi(&xs, 1, &zs, 1, 5, Some(7)).unwrap();
        assert!(mi > 2.0, "deterministic copy should give large MI, got {mi}");
    }

    #[test]
    fn ksg_zero_variance_advises_jitter() {
        let xs = vec![1.0; 32];
        let (_, zs) = correlated_pairs(32, 0.0, 4);
        let err = ksg_mi(&xs, 1, &zs, 1, 5, None).unwrap_err();
        assert!(err.to_string().contains("jitter"), "{err}");
        // With jitter it runs.
        assert!(ksg_mi(&xs, 1, &zs, 1, 5, Some(1)).is_ok());
    }

    #[test]
    fn ksg_is_symmetric_and_permutation_equivariant() {
        let (xs, zs) = correlated_pairs(500, 0.7, 5);
        let a = ksg_mi(&xs, 1, &zs, 1, 4, Some(11)).unwrap();
        // Symmetry needs the jitter swapped consistently with the
        // arguments; use the raw (jitterless) path on noisy data.
        let b = ksg_mi(&zs, 1, &xs, 1, 4, None).unwrap();
        let a_raw = ksg_mi(&xs, 1, &zs, 1, 4, None).unwrap();
        assert_eq!(a_raw.to_bits(), b.to_bits(), "symmetry");
        // Identical shuffles of the pairing leave the estimate unchanged.
        let mut order: Vec<usize> = (0..500).collect();
        let mut r = rng(6);
        for i in (1..order.len()).rev() {
            let j = r.gen_range(0..=i);
            order.swap(i, j);
        }
        let xs_p: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
        let zs_p: Vec<f64> = order.iter().map(|&i| zs[i]).collect();
        let c = ksg_mi(&xs_p, 1, &zs_p, 1, 4, None).unwrap();
        assert_eq!(a_raw.to_bits(), c.to_bits(), "permutation equivariance");
        let _ = a;
    }

    #[test]
    fn ksg_rejects_bad_sizes() {
        let xs = vec![0.0; 10];
        let zs = vec![0.0; 10];
        assert!(matches!(ksg_mi(&xs, 1, &zs, 1, 10, Some(1)), Err(MetricsError::TooFewSamples(_))));
        assert!(matches!(ksg_mi(&xs, 3, &zs, 1, 2, Some(1)), Err(MetricsError::DimMismatch(_))));
    }

    fn zero_model(dim: usize) -> ModelBundle {
        ModelBundle::new(
            CondNet::Mlp(MlpCondGaussian::zeros(dim, 4, dim, Activation::Tanh)),
            CondNet::Mlp(MlpCondGaussian::zeros(dim, 4, dim, Activation::Tanh)),
            crate::model::PriorSpec::Anchor,
            crate::model::PriorSpec::MarginalX,
            AnchorSpec::Empirical(Arc::new(EmpiricalData::new(dim, vec![]))),
            AnchorSpec::StandardNormal(dim),
        )
        .unwrap()
    }

    #[test]
    fn nll_constant_weights_closed_form() {
        // Decoder ignores z with p(x|z) = N(0,1); encoder equals the
        // prior, so importance weights are exactly 1 and the estimate is
        // the true marginal NLL at any sample count.
        let model = zero_model(1);
        let mut r = rng(7);
        for s in [1, 3, 16] {
            let v = nll_importance(&[0.0], &model, s, &mut r).unwrap();
            assert!((v - HALF_LN_2PI).abs() < 1e-12, "s={s}: {v}");
        }
    }

    #[test]
    fn nll_single_sample_is_encoder_bound() {
        let model = zero_model(2);
        let x = [0.3, -0.8];
        let a = nll_importance(&x, &model, 1, &mut rng(9)).unwrap();
        let b = nll_encoder_bound(&x, &model, &mut rng(9)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn nll_converges_on_conjugate_model() {
        // Linear-Gaussian model with a non-posterior encoder: the
        // importance estimate approaches the analytic marginal.
        let (a, b, sigma): (f64, f64, f64) = (0.9, 0.2, 0.6);
        let model = ModelBundle::new(
            CondNet::Linear(LinearCondGaussian::new(
                Tensor::matrix(1, 1, vec![0.4]).unwrap(),
                Tensor::vector(vec![0.0]),
                Tensor::vector(vec![(0.7f64).ln()]),
            ).unwrap()),
            CondNet::Linear(LinearCondGaussian::new(
                Tensor::matrix(1, 1, vec![a]).unwrap(),
                Tensor::vector(vec![b]),
                Tensor::vector(vec![sigma.ln()]),
            ).unwrap()),
            crate::model::PriorSpec::Anchor,
            crate::model::PriorSpec::MarginalX,
            AnchorSpec::Empirical(Arc::new(EmpiricalData::new(1, vec![]))),
            AnchorSpec::StandardNormal(1),
        )
        .unwrap();
        let x = 0.5;
        let marg_var = a * a + sigma * sigma;
        let analytic = 0.5 * (x - b) * (x - b) / marg_var + 0.5 * marg_var.ln() + HALF_LN_2PI;
        let est = nll_importance(&[x], &model, 10_000, &mut rng(10)).unwrap();
        assert!((est - analytic).abs() < 0.01, "{est} vs {analytic}");
    }

    #[test]
    fn nll_importance_tightens_with_more_samples() {
        // Jensen: the expected estimate decreases as S doubles. Each
        // repetition compares mean estimates over a fixed point set so
        // the bias gap dominates the estimator noise; one-sided sign
        // test over 100 paired repetitions at p < 0.01 (>= 63 wins).
        let model = conjugate_mismatched();
        let mut pr = rng(999);
        let points: Vec<Vec<f64>> = (0..200).map(|_| vec![0.4 + 0.5 * standard_normal(&mut pr)]).collect();
        let mut wins = 0;
        for rep in 0..100 {
            let mut r1 = rng(1000 + rep);
            let mut r2 = rng(5000 + rep);
            let small = nll_importance_mean(&points, &model, 4, &mut r1).unwrap();
            let large = nll_importance_mean(&points, &model, 8, &mut r2).unwrap();
            if large < small {
                wins += 1;
            }
        }
        assert!(wins >= 63, "larger S should win by Jensen, got {wins}/100");
    }

    fn conjugate_mismatched() -> ModelBundle {
        ModelBundle::new(
            CondNet::Linear(LinearCondGaussian::new(
                Tensor::matrix(1, 1, vec![0.2]).unwrap(),
                Tensor::vector(vec![0.1]),
                Tensor::vector(vec![(0.9f64).ln()]),
            ).unwrap()),
            CondNet::Linear(LinearCondGaussian::new(
                Tensor::matrix(1, 1, vec![0.9]).unwrap(),
                Tensor::vector(vec![0.2]),
                Tensor::vector(vec![(0.6f64).ln()]),
            ).unwrap()),
            crate::model::PriorSpec::Anchor,
            crate::model::PriorSpec::MarginalX,
            AnchorSpec::Empirical(Arc::new(EmpiricalData::new(1, vec![]))),
            AnchorSpec::StandardNormal(1),
        )
        .unwrap()
    }

    #[test]
    fn recon_identity_and_constant_decoder() {
        // Identity encoder/decoder means reconstruct exactly.
        let id = ModelBundle::new(
            CondNet::Linear(LinearCondGaussian::identity(2, 0.0)),
            CondNet::Linear(LinearCondGaussian::identity(2, 0.0)),
            crate::model::PriorSpec::Anchor,
            crate::model::PriorSpec::MarginalX,
            AnchorSpec::Empirical(Arc::new(EmpiricalData::new(2, vec![]))),
            AnchorSpec::StandardNormal(2),
        )
        .unwrap();
        let mut r = rng(11);
        let rows: Vec<f64> = (0..200).map(|_| standard_normal(&mut r)).collect();
        assert_eq!(recon_rmse(&rows, 100, &id).unwrap(), 0.0);

        // Decoder mean 0 on unit-variance data: error ~ 1.
        let zero = zero_model(1);
        let rows: Vec<f64> = (0..10_000).map(|_| standard_normal(&mut r)).collect();
        let e = recon_rmse(&rows, 10_000, &zero).unwrap();
        assert!((e - 1.0).abs() < 0.02, "{e}");

        // Deterministic.
        let a = recon_rmse(&rows, 10_000, &zero).unwrap();
        let b = recon_rmse(&rows, 10_000, &zero).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn knn_basic_contracts() {
        // A test point duplicating a train point with k = 1 takes its label.
        let train = LabeledEmbedding::new(1, vec![0.0, 1.0, 2.0], vec![0, 1, 2]).unwrap();
        let test = LabeledEmbedding::new(1, vec![1.0], vec![1]).unwrap();
        assert_eq!(knn_classify(&train, &test, 1).unwrap(), 1.0);

        // Well-separated clusters classify perfectly.
        let mut r = rng(12);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..100 {
            let c = i % 2;
            pts.push(c as f64 * 100.0 + 0.1 * standard_normal(&mut r));
            labels.push(c as u32);
        }
        let train = LabeledEmbedding::new(1, pts.clone(), labels.clone()).unwrap();
        let test = LabeledEmbedding::new(1, pts, labels).unwrap();
        assert_eq!(knn_classify(&train, &test, 5).unwrap(), 1.0);
    }

    #[test]
    fn knn_chance_level_on_random_labels() {
        let mut r = rng(13);
        let n = 1000;
        let mk = |r: &mut ChaCha8Rng| {
            let pts: Vec<f64> = (0..n * 2).map(|_| standard_normal(r)).collect();
            let labels: Vec<u32> = (0..n).map(|_| r.gen_range(0..5)).collect();
            LabeledEmbedding::new(2, pts, labels).unwrap()
        };
        let train = mk(&mut r);
        let test = mk(&mut r);
        let acc = knn_classify(&train, &test, 5).unwrap();
        assert!((acc - 0.2).abs() < 0.05, "chance level 5-NN accuracy was {acc}");
    }

    #[test]
    fn knn_rotation_invariance() {
        let mut r = rng(14);
        let n = 300;
        let theta: f64 = 0.83;
        let (c, s) = (theta.cos(), theta.sin());
        let raw: Vec<f64> = (0..n * 2).map(|_| standard_normal(&mut r)).collect();
        let labels: Vec<u32> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let rot: Vec<f64> = raw
            .chunks(2)
            .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect();
        let (tr_raw, te_raw) = (raw[..n].to_vec(), raw[n..].to_vec());
        let (tr_rot, te_rot) = (rot[..n].to_vec(), rot[n..].to_vec());
        let (tr_l, te_l) = (labels[..n / 2].to_vec(), labels[n / 2..].to_vec());
        let a = knn_classify(
            &LabeledEmbedding::new(2, tr_raw, tr_l.clone()).unwrap(),
            &LabeledEmbedding::new(2, te_raw, te_l.clone()).unwrap(),
            3,
        )
        .unwrap();
        let b = knn_classify(
            &LabeledEmbedding::new(2, tr_rot, tr_l).unwrap(),
            &LabeledEmbedding::new(2, te_rot, te_l).unwrap(),
            3,
        )
        .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn collapse_index_closed_forms() {
        // Zero networks: log_std = 0 everywhere, index = 1.
        let model = zero_model(2);
        let rows = vec![0.3, -0.4, 1.0, 0.2];
        assert_eq!(collapse_index(&rows, 2, &model).unwrap(), 1.0);

        // Bias pushed to the clamp floor: index = exp(-7).
        let mut net = MlpCondGaussian::zeros(2, 4, 2, Activation::Tanh);
        net.b_log_std = Tensor::filled(&[2], -100.0);
        let model = ModelBundle::new(
            CondNet::Mlp(net),
            CondNet::Mlp(MlpCondGaussian::zeros(2, 4, 2, Activation::Tanh)),
            crate::model::PriorSpec::Anchor,
            crate::model::PriorSpec::MarginalX,
            AnchorSpec::Empirical(Arc::new(EmpiricalData::new(2, vec![]))),
            AnchorSpec::StandardNormal(2),
        )
        .unwrap();
        let idx = collapse_index(&rows, 2, &model).unwrap();
        assert!((idx - (-7.0f64).exp()).abs() < 1e-12, "{idx}");
    }

    #[test]
    fn metrics_record_csv_shape() {
        let rec = MetricsRecord {
            seed: 3,
            loss_kind: "mim-marginal".into(),
            hidden: 20,
            latent_dim: 2,
            epochs: 14,
            mi_ksg: 1.25,
            nll_iw: 2.5,
            nll_enc_bound: 2.75,
            recon_rmse: 0.125,
            knn_acc: Some(0.9),
            collapse_index: None,
        };
        let row = rec.to_csv_row();
        assert_eq!(MetricsRecord::CSV_HEADER.split(',').count(), row.split(',').count());
        assert!(row.starts_with("3,mim-marginal,20,2,14,1.25,2.5,2.75,0.125,0.9,"));
    }
}
