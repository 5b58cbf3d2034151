//! Synthetic benchmark generation, PCA projection, and dataset I/O.
//!
//! Datasets are flat row tables with split tags and optional component
//! labels. The on-disk format is a delimited text table with a one-line
//! header (`split,label,x0,...`) plus a JSON sidecar carrying provenance
//! (generator spec and seed, or source file and projection spec).
//! Generators are pure functions of (spec, seed).

use crate::dist::{DiagGaussian, Mixture};
use crate::autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("{path}: header mismatch: {reason}")]
    Header { path: String, reason: String },
    #[error("{path}: empty table")]
    Empty { path: String },
    #[error("power iteration failed to converge after {iterations} iterations (component {component})")]
    NoConvergence { component: usize, iterations: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
}

pub type DataResult<T> = Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Where a dataset came from; serialized into the sidecar verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

/// Row table with split tags and optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub points: Vec<f64>, // row-major n x dim
    pub labels: Option<Vec<u32>>,
    pub splits: Vec<Split>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.points.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Row indices belonging to a split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Copy one split's rows into an `[n, dim]` tensor (and its labels).
    pub fn split_rows(&self, split: Split) -> (Tensor, Option<Vec<u32>>) {
        let idx = self.split_indices(split);
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in &idx {
            data.extend_from_slice(self.row(i));
        }
        let labels = self.labels.as_ref().map(|ls| idx.iter().map(|&i| ls[i]).collect());
        (Tensor::new(vec![idx.len(), self.dim], data).expect("shape"), labels)
    }
}

/// Finite isotropic-Gaussian mixture specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation per component.
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GmmSpec {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn to_mixture(&self) -> Mixture {
        let comps: Vec<DiagGaussian> = self
            .means
            .iter()
            .zip(&self.stds)
            .map(|(m, &s)| DiagGaussian::isotropic(m.clone(), s))
            .collect();
        let logits: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        Mixture::new(Tensor::vector(logits), comps).expect("valid spec")
    }
}

pub const TRAIN_ROWS: usize = 50_000;
pub const VAL_ROWS: usize = 10_000;
pub const TEST_ROWS: usize = 10_000;

fn sample_gmm_dataset(spec: &GmmSpec, generator: &str, seed: u64) -> Dataset {
    let mixture = spec.to_mixture();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = TRAIN_ROWS + VAL_ROWS + TEST_ROWS;
    let dim = spec.dim();
    let mut points = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for i in 0..total {
        let (x, k) = mixture.sample(&mut rng);
        points.extend_from_slice(&x);
        labels.push(k as u32);
        splits.push(if i < TRAIN_ROWS {
            Split::Train
        } else if i < TRAIN_ROWS + VAL_ROWS {
            Split::Val
        } else {
            Split::Test
        });
    }
    Dataset {
        dim,
        points,
        labels: Some(labels),
        splits,
        provenance: Provenance {
            generator: generator.to_string(),
            seed,
            detail: Some(serde_json::to_value(spec).expect("serializable spec")),
        },
    }
}

/// The 2D benchmark: five equal-weight isotropic components with
/// standard deviation 0.25, means equally spaced on a circle of radius
/// 1.5 about the origin. 50k/10k/10k split with component labels.
pub fn gmm_2d_benchmark(seed: u64) -> (GmmSpec, Dataset) {
    let k = 5;
    let radius = 1.5;
    let means: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / k as f64;
            vec![radius * angle.cos(), radius * angle.sin()]
        })
        .collect();
    let spec = GmmSpec { means, stds: vec![0.25; k], weights: vec![1.0 / k as f64; k] };
    let ds = sample_gmm_dataset(&spec, "gmm2d", seed);
    (spec, ds)
}

/// Derivation seed for the high-dimensional benchmark means; fixed so
/// the benchmark is the same everywhere.
const HIGHDIM_MEAN_SEED: u64 = 0x4D49_4D32_3044;

/// The d-dimensional benchmark (d = 20 in the study): five components
/// with means drawn once from N(0, 2^2 I) under a frozen derivation
/// seed, isotropic std 0.25, same split sizes as the 2D benchmark.
pub fn gmm_highdim_benchmark(dim: usize, seed: u64) -> DataResult<(GmmSpec, Dataset)> {
    if dim < 2 {
        return Err(DataError::Invalid(format!("benchmark dimension must be >= 2, got {dim}")));
    }
    let k = 5;
    let mut mean_rng = ChaCha8Rng::seed_from_u64(HIGHDIM_MEAN_SEED);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| 2.0 * crate::dist::standard_normal(&mut mean_rng)).collect())
        .collect();
    let std = 0.25;
    // The frozen seed must keep components well separated.
    for i in 0..k {
        for j in (i + 1)..k {
            let d2: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!(
                d2.sqrt() > 4.0 * std,
                "derivation seed produced overlapping components ({i}, {j}): {}",
                d2.sqrt()
            );
        }
    }
    let spec = GmmSpec { means, stds: vec![std; k], weights: vec![1.0 / k as f64; k] };
    let ds = sample_gmm_dataset(&spec, &format!("gmm{dim}d"), seed);
    Ok((spec, ds))
}

/// PCA via iterated deflated power method.
pub struct PcaResult {
    /// Projected data, n x d.
    pub projected: Vec<f64>,
    pub target_dim: usize,
    /// Fraction of total variance captured by the retained components.
    pub explained_variance: f64,
    /// Orthonormal basis rows, d x D.
    pub basis: Vec<f64>,
    pub input_dim: usize,
    /// Column means subtracted before projection.
    pub mean: Vec<f64>,
}

impl PcaResult {
    /// Map projected rows back into the original space (mean re-added).
    pub fn back_project(&self, rows: &[f64]) -> Vec<f64> {
        let n = rows.len() / self.target_dim;
        let mut out = vec![0.0; n * self.input_dim];
        for i in 0..n {
            for c in 0..self.target_dim {
                let coef = rows[i * self.target_dim + c];
                for j in 0..self.input_dim {
                    out[i * self.input_dim + j] += coef * self.basis[c * self.input_dim + j];
                }
            }
            for j in 0..self.input_dim {
                out[i * self.input_dim + j] += self.mean[j];
            }
        }
        out
    }
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITER: usize = 10_000;

/// Project `n x input_dim` rows onto the top `target_dim` principal
/// components. Eigenvectors come from a deflated power iteration on the
/// sample covariance (tolerance 1e-9 on the vector, at most 10^4
/// iterations per component).
pub fn pca_project(data: &[f64], n: usize, input_dim: usize, target_dim: usize) -> DataResult<PcaResult> {
    if n == 0 || data.len() != n * input_dim {
        return Err(DataError::Invalid(format!(
            "data length {} does not match {n} x {input_dim}",
            data.len()
        )));
    }
    if target_dim == 0 || target_dim > input_dim.min(n) {
        return Err(DataError::Invalid(format!(
            "target dim {target_dim} out of range for {n} x {input_dim} data"
        )));
    }
    // Column means.
    let mut mean = vec![0.0; input_dim];
    for i in 0..n {
        for j in 0..input_dim {
            mean[j] += data[i * input_dim + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // Covariance (input_dim x input_dim).
    let mut cov = vec![0.0; input_dim * input_dim];
    for i in 0..n {
        let row = &data[i * input_dim..(i + 1) * input_dim];
        for a in 0..input_dim {
            let da = row[a] - mean[a];
            for b in a..input_dim {
                cov[a * input_dim + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..input_dim {
        for b in a..input_dim {
            cov[a * input_dim + b] /= denom;
            cov[b * input_dim + a] = cov[a * input_dim + b];
        }
    }
    let total_variance: f64 = (0..input_dim).map(|j| cov[j * input_dim + j]).sum();

    let mut basis = Vec::with_capacity(target_dim * input_dim);
    let mut eigenvalues = Vec::with_capacity(target_dim);
    let mut work = cov.clone();
    let mut start_rng = ChaCha8Rng::seed_from_u64(0x5043_4131);
    for comp in 0..target_dim {
        let mut v: Vec<f64> = (0..input_dim).map(|_| start_rng.gen_range(-1.0..1.0)).collect();
        normalize(&mut v);
        let mut converged = false;
        for _ in 0..PCA_MAX_ITER {
            let mut w = vec![0.0; input_dim];
            for a in 0..input_dim {
                let mut s = 0.0;
                for b in 0..input_dim {
                    s += work[a * input_dim + b] * v[b];
                }
                w[a] = s;
            }
            // Re-orthogonalize against the converged components; deflation
            // alone leaves O(tol) leakage.
            for prev in 0..comp {
                let row = &basis[prev * input_dim..(prev + 1) * input_dim];
                let dot: f64 = w.iter().zip(row).map(|(x, y)| x * y).sum();
                for (x, y) in w.iter_mut().zip(row) {
                    *x -= dot * y;
                }
            }
            normalize(&mut w);
            // Sign-align with the previous iterate before measuring change.
            let dot: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
            if dot < 0.0 {
                for x in &mut w {
                    *x = -*x;
                }
            }
            let delta = w.iter().zip(&v).map(|(x, y)| (x - y).abs()).fold(0.0_f64, f64::max);
            v = w;
            if delta < PCA_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(DataError::NoConvergence { component: comp, iterations: PCA_MAX_ITER });
        }
        // Rayleigh quotient on the undeflated covariance is the eigenvalue.
        let mut cv = vec![0.0; input_dim];
        for a in 0..input_dim {
            for b in 0..input_dim {
                cv[a] += work[a * input_dim + b] * v[b];
            }
        }
        let lambda: f64 = v.iter().zip(&cv).map(|(x, y)| x * y).sum();
        eigenvalues.push(lambda.max(0.0));
        // Deflate.
        for a in 0..input_dim {
            for b in 0..input_dim {
                work[a * input_dim + b] -= lambda * v[a] * v[b];
            }
        }
        basis.extend_from_slice(&v);
    }

    let explained = if total_variance > 0.0 {
        eigenvalues.iter().sum::<f64>() / total_variance
    } else {
        1.0
    };
    let mut projected = vec![0.0; n * target_dim];
    for i in 0..n {
        for c in 0..target_dim {
            let mut s = 0.0;
            for j in 0..input_dim {
                s += (data[i * input_dim + j] - mean[j]) * basis[c * input_dim + j];
            }
            projected[i * target_dim + c] = s;
        }
    }
    Ok(PcaResult { projected, target_dim, explained_variance: explained, basis, input_dim, mean })
}

fn normalize(v: &mut [f64]) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

/// Write a dataset as `<path>` (delimited table) plus `<path>.meta.json`.
/// Floats use the shortest round-trip representation, so save/load is
/// bit-exact.
pub fn save_table(ds: &Dataset, path: &Path) -> DataResult<()> {
    let mut out = String::new();
    out.push_str("split");
    if ds.labels.is_some() {
        out.push_str(",label");
    }
    for j in 0..ds.dim {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(ds.splits[i].as_str());
        if let Some(labels) = &ds.labels {
            let _ = write!(out, ",{}", labels[i]);
        }
        for v in ds.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    std::fs::write(path, out).map_err(io_err)?;
    let meta = serde_json::to_string_pretty(&ds.provenance).expect("provenance serializes");
    std::fs::write(meta_path(path), meta).map_err(io_err)?;
    Ok(())
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

/// Load a dataset written by [`save_table`].
pub fn load_table(path: &Path) -> DataResult<Dataset> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: pstr.clone(), source })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Empty { path: pstr.clone() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"split") {
        return Err(DataError::Header { path: pstr, reason: format!("first column must be 'split', got '{}'", cols.first().unwrap_or(&"")) });
    }
    let has_label = cols.get(1) == Some(&"label");
    let x_start = if has_label { 2 } else { 1 };
    for (j, c) in cols[x_start..].iter().enumerate() {
        let expect = format!("x{j}");
        if *c != expect {
            return Err(DataError::Header { path: pstr, reason: format!("expected column '{expect}', got '{c}'") });
        }
    }
    let dim = cols.len() - x_start;
    if dim == 0 {
        return Err(DataError::Header { path: pstr, reason: "no coordinate columns".into() });
    }
    let mut points = Vec::new();
    let mut labels: Option<Vec<u32>> = has_label.then(Vec::new);
    let mut splits = Vec::new();
    let mut any = false;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        any = true;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(DataError::Parse {
                path: pstr,
                line: lineno + 1,
                reason: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let split = Split::parse(fields[0]).ok_or_else(|| DataError::Parse {
            path: pstr.clone(),
            line: lineno + 1,
            reason: format!("unknown split '{}'", fields[0]),
        })?;
        splits.push(split);
        if let Some(ls) = labels.as_mut() {
            let v = fields[1].parse::<u32>().map_err(|e| DataError::Parse {
                path: pstr.clone(),
                line: lineno + 1,
                reason: format!("label: {e}"),
            })?;
            ls.push(v);
        }
        for f in &fields[x_start..] {
            let v = f.parse::<f64>().map_err(|e| DataError::Parse {
                path: pstr.clone(),
                line: lineno + 1,
                reason: format!("coordinate: {e}"),
            })?;
            points.push(v);
        }
    }
    if !any {
        return Err(DataError::Empty { path: pstr });
    }
    let meta = meta_path(path);
    let provenance = match std::fs::read_to_string(&meta) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: meta.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?,
        Err(_) => Provenance { generator: "unknown".into(), seed: 0, detail: None },
    };
    Ok(Dataset { dim, points, labels, splits, provenance })
}
