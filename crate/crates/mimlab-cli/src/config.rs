//! Experiment configuration: TOML schema, key=value overrides, and
//! validation.
//!
//! Every run artifact embeds the resolved form of this configuration, so
//! any output can be reproduced from its own echo.

use anyhow::{anyhow, bail, Context, Result};
use mimlab::metrics::EvalSpec;
use mimlab::model::{Activation, ModelSpec, PriorKind};
use mimlab::objective::{LossConfig, LossKind};
use mimlab::train::{AdamHyper, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// gmm2d | gmm-highdim | file
    pub generator: String,
    /// Table path (written by `generate`, read by the other commands).
    pub path: PathBuf,
    pub seed: u64,
    /// Dimension for the high-dimensional generator.
    pub dim: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { generator: "gmm2d".into(), path: PathBuf::from("data/gmm2d.csv"), seed: 1, dim: 20 }
    }
}

pub const GENERATORS: &[&str] = &["gmm2d", "gmm-highdim", "file"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    /// tanh | swish
    pub activation: String,
    /// anchor | mixture | vamp
    pub z_prior: String,
    /// marginal | mixture
    pub x_prior: String,
    pub vamp_k: usize,
    pub mixture_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 20,
            latent_dim: 2,
            activation: "tanh".into(),
            z_prior: "anchor".into(),
            x_prior: "marginal".into(),
            vamp_k: 10,
            mixture_k: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kind: String,
    pub warmup_epochs: usize,
    pub reg_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { kind: "mim-marginal".into(), warmup_epochs: 3, reg_weight: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: Option<usize>,
    pub epoch_samples: Option<usize>,
    pub val_samples: Option<usize>,
    pub seed: u64,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 128,
            max_epochs: 20,
            patience: None,
            epoch_samples: Some(10_000),
            val_samples: Some(2_000),
            seed: 1,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub ksg_k: usize,
    pub nll_samples: usize,
    pub nll_points: usize,
    pub knn_k: usize,
    pub knn_train_points: usize,
    pub mi_points: usize,
    pub seed: u64,
    pub export_embedding: bool,
    /// Checkpoint to evaluate; defaults to `<output.dir>/checkpoint.bin`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ksg_k: 5,
            nll_samples: 64,
            nll_points: 2_000,
            knn_k: 5,
            knn_train_points: 10_000,
            mi_points: 10_000,
            seed: 0,
            export_embedding: false,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/run") }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// hidden | latent_dim
    pub axis: String,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Loss kinds trained per cell.
    pub losses: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: "hidden".into(),
            values: vec![5, 20, 500],
            seeds: (1..=10).collect(),
            losses: vec!["mim-marginal".into(), "vae".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { trials: 100, seed: 9001 }
    }
}

impl ExperimentConfig {
    /// Load from a TOML file and apply `key=value` overrides in order.
    /// Absent keys take their defaults (the file may specify any subset).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        // Deep-merge over the defaults so partial sections are legal.
        let mut base: toml::Value = toml::Value::Table(
            ExperimentConfig::default().to_toml().parse::<toml::Value>().expect("defaults parse").as_table().cloned().expect("table"),
        );
        deep_merge(&mut base, value);
        let cfg: ExperimentConfig = base.try_into().map_err(|e| anyhow!("invalid configuration: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks; all run before any compute.
    pub fn validate(&self) -> Result<()> {
        if !GENERATORS.contains(&self.dataset.generator.as_str()) {
            bail!(
                "unknown generator '{}'; valid generators: {}",
                self.dataset.generator,
                GENERATORS.join(", ")
            );
        }
        self.loss_kind()?;
        self.activation()?;
        let (zp, xp) = (self.z_prior_kind()?, self.x_prior_kind()?);
        let kind = self.loss_kind()?;
        // Loss/prior compatibility, mirrored from the objective rules.
        match kind {
            LossKind::Mim | LossKind::Ce => {
                if matches!(xp, PriorKind::MarginalX) {
                    bail!("loss '{kind}' needs an evaluable data prior; set x_prior = \"mixture\" or use mim-marginal");
                }
            }
            LossKind::MimMarginal => {
                if !matches!(xp, PriorKind::MarginalX) {
                    bail!("loss '{kind}' requires x_prior = \"marginal\"");
                }
            }
            LossKind::Vae | LossKind::VaePlusEntropy => {
                if !matches!(zp, PriorKind::Anchor) || !matches!(xp, PriorKind::MarginalX) {
                    bail!("loss '{kind}' requires z_prior = \"anchor\" and x_prior = \"marginal\" (parameter parity)");
                }
            }
            LossKind::AMim | LossKind::MimMinusEntropy => {}
        }
        if kind.uses_decoder_path() && self.train.batch_size % 2 != 0 {
            bail!("mixed-path losses need an even batch size, got {}", self.train.batch_size);
        }
        match self.sweep.axis.as_str() {
            "hidden" | "latent_dim" => {}
            other => bail!("unknown sweep axis '{other}'; valid axes: hidden, latent_dim"),
        }
        for l in &self.sweep.losses {
            LossKind::parse(l).ok_or_else(|| anyhow!("unknown sweep loss kind '{l}'"))?;
        }
        if self.model.hidden == 0 || self.model.latent_dim == 0 {
            bail!("model dimensions must be positive");
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        LossKind::parse(&self.loss.kind)
            .ok_or_else(|| anyhow!("unknown loss kind '{}'; valid: mim, mim-marginal, a-mim, vae, ce, vae+h, mim-h", self.loss.kind))
    }

    pub fn activation(&self) -> Result<Activation> {
        match self.model.activation.as_str() {
            "tanh" => Ok(Activation::Tanh),
            "swish" => Ok(Activation::Swish),
            other => bail!("unknown activation '{other}'; valid: tanh, swish"),
        }
    }

    pub fn z_prior_kind(&self) -> Result<PriorKind> {
        match self.model.z_prior.as_str() {
            "anchor" => Ok(PriorKind::Anchor),
            "mixture" => Ok(PriorKind::LearnedMixture { k: self.model.mixture_k }),
            "vamp" => Ok(PriorKind::VampPrior { k: self.model.vamp_k }),
            other => bail!("unknown z_prior '{other}'; valid: anchor, mixture, vamp"),
        }
    }

    pub fn x_prior_kind(&self) -> Result<PriorKind> {
        match self.model.x_prior.as_str() {
            "marginal" => Ok(PriorKind::MarginalX),
            "mixture" => Ok(PriorKind::LearnedMixture { k: self.model.mixture_k }),
            other => bail!("unknown x_prior '{other}'; valid: marginal, mixture"),
        }
    }

    pub fn model_spec(&self, dim_x: usize) -> Result<ModelSpec> {
        Ok(ModelSpec {
            dim_x,
            dim_z: self.model.latent_dim,
            hidden: self.model.hidden,
            activation: self.activation()?,
            z_prior: self.z_prior_kind()?,
            x_prior: self.x_prior_kind()?,
        })
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            kind: self.loss_kind()?,
            warmup_epochs: self.loss.warmup_epochs,
            reg_weight: self.loss.reg_weight,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            epoch_samples: self.train.epoch_samples,
            val_samples: self.train.val_samples,
            seed: self.train.seed,
            adam: AdamHyper { lr: self.train.lr, ..AdamHyper::default() },
        }
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            ksg_k: self.eval.ksg_k,
            nll_samples: self.eval.nll_samples,
            nll_points: self.eval.nll_points,
            knn_k: self.eval.knn_k,
            knn_train_points: self.eval.knn_train_points,
            mi_points: self.eval.mi_points,
            seed: self.eval.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Overlay tables merge key-by-key; every other value replaces the base.
fn deep_merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply one `dotted.path=value` override onto the raw TOML tree. The
/// value is parsed as TOML (so numbers and booleans work) with a string
/// fallback.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{spec}' is not of the form key=value"))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").expect("parsed value"),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("override '{spec}': '{}' is not a table", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}
