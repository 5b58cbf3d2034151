//! The five subcommands: generate, train, eval, sweep, verify.

use crate::config::{ExperimentConfig, GENERATORS};
use crate::util::{append_csv_row, tmp_sibling, write_atomic};
use anyhow::{anyhow, bail, Context, Result};
use mimlab::data::{gmm_2d_benchmark, gmm_highdim_benchmark, load_table, save_table, Dataset, Split};
use mimlab::discrete::run_identity_suite;
use mimlab::dist::EmpiricalData;
use mimlab::metrics::{embed_posterior_means, evaluate, MetricsRecord, RunInfo};
use mimlab::model::ModelBundle;
use mimlab::train::{load_checkpoint, save_checkpoint, train, CheckpointMeta, EpochRecord, Trained};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::sync::Mutex;

/// Error classification drives the process exit code: validation errors
/// exit 1, runtime aborts exit 2, partial sweep failures exit 3.
pub enum CmdOutcome {
    Ok,
    PartialFailure,
}

pub enum CmdError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Validation(_) => 1,
            CmdError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CmdError::Validation(e) | CmdError::Runtime(e) => format!("{e:#}"),
        }
    }
}

fn validation<T>(r: Result<T>) -> std::result::Result<T, CmdError> {
    r.map_err(CmdError::Validation)
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, CmdError> {
    r.map_err(CmdError::Runtime)
}

pub type CmdResult = std::result::Result<CmdOutcome, CmdError>;

/// Build (or rebuild) the configured dataset files.
pub fn cmd_generate(cfg: &ExperimentConfig) -> CmdResult {
    let ds = validation(generate_dataset(cfg))?;
    if let Some(parent) = cfg.dataset.path.parent() {
        runtime(std::fs::create_dir_all(parent).context("creating dataset directory"))?;
    }
    runtime(save_table(&ds, &cfg.dataset.path).context("writing dataset"))?;
    println!(
        "wrote {} rows ({} train / {} val / {} test) to {}",
        ds.len(),
        ds.split_indices(Split::Train).len(),
        ds.split_indices(Split::Val).len(),
        ds.split_indices(Split::Test).len(),
        cfg.dataset.path.display()
    );
    Ok(CmdOutcome::Ok)
}

fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset.generator.as_str() {
        "gmm2d" => Ok(gmm_2d_benchmark(cfg.dataset.seed).1),
        "gmm-highdim" => Ok(gmm_highdim_benchmark(cfg.dataset.dim, cfg.dataset.seed)?.1),
        "file" => bail!("generator 'file' means the dataset is externally supplied; nothing to generate"),
        other => bail!("unknown generator '{other}'; valid generators: {}", GENERATORS.join(", ")),
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_table(&cfg.dataset.path).with_context(|| {
        format!(
            "loading dataset {} (run `mimlab generate` first?)",
            cfg.dataset.path.display()
        )
    })
}

/// Seed derivation for independent streams, keyed by purpose.
fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    let mut z = base ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct TrainArtifacts {
    trained: Trained,
    out_dir: PathBuf,
}

fn run_training(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<TrainArtifacts> {
    let spec = cfg.model_spec(dataset.dim)?;
    let loss = cfg.loss_config()?;
    let train_cfg = cfg.train_config();
    let (train_rows, _) = dataset.split_rows(Split::Train);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, "model-init"));
    let mut model = spec.build(&mut init_rng, Some(&train_rows))?;
    // Attach the data anchor for completeness of the bundle.
    model.x_anchor = mimlab::dist::AnchorSpec::Empirical(Arc::new(EmpiricalData::new(
        dataset.dim,
        train_rows.data().to_vec(),
    )));
    println!(
        "training {} on {} ({} params, hidden {}, latent {})",
        loss.kind,
        cfg.dataset.path.display(),
        model.param_count(),
        spec.hidden,
        spec.dim_z
    );
    let trained = train(model, &loss, dataset, &train_cfg)?;
    println!(
        "finished after {} epochs; best validation loss {:.6} at epoch {}",
        trained.history.len(),
        trained.best_val_loss,
        trained.best_epoch
    );

    let out_dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&out_dir).context("creating output directory")?;

    // History CSV.
    let mut hist = String::from(EpochRecord::CSV_HEADER);
    hist.push('\n');
    for rec in &trained.history {
        hist.push_str(&rec.to_csv_row());
        hist.push('\n');
    }
    write_atomic(&out_dir.join("history.csv"), hist.as_bytes()).context("writing history")?;

    // Checkpoint (atomic via temp + rename).
    let meta = CheckpointMeta {
        version: 1,
        model: spec,
        loss,
        train: train_cfg,
        best_epoch: trained.best_epoch,
        best_val_loss: trained.best_val_loss,
        rng_word_pos: trained.rng_word_pos,
    };
    let ckpt = out_dir.join("checkpoint.bin");
    let tmp = tmp_sibling(&ckpt);
    save_checkpoint(&trained.model, &meta, &tmp)?;
    std::fs::rename(&tmp, &ckpt).context("publishing checkpoint")?;

    // Resolved-config echo.
    write_atomic(&out_dir.join("config.resolved.toml"), cfg.to_toml().as_bytes())
        .context("writing resolved config")?;

    Ok(TrainArtifacts { trained, out_dir })
}

pub fn cmd_train(cfg: &ExperimentConfig) -> CmdResult {
    let dataset = validation(load_dataset(cfg))?;
    let arts = match run_training(cfg, &dataset) {
        Ok(a) => a,
        Err(e) => return Err(CmdError::Runtime(e)),
    };
    println!("artifacts in {}", arts.out_dir.display());
    Ok(CmdOutcome::Ok)
}

fn run_eval(cfg: &ExperimentConfig, model: &ModelBundle, dataset: &Dataset, info: &RunInfo) -> Result<MetricsRecord> {
    let spec = cfg.eval_spec();
    Ok(evaluate(model, dataset, &spec, info)?)
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> CmdResult {
    let dataset = validation(load_dataset(cfg))?;
    let ckpt_path = cfg
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join("checkpoint.bin"));
    let (model, meta) = runtime(load_checkpoint(&ckpt_path).map_err(|e| anyhow!("{e}")))?;
    if model.dim_x() != dataset.dim {
        return Err(CmdError::Validation(anyhow!(
            "checkpoint expects observations of dim {}, dataset has {}",
            model.dim_x(),
            dataset.dim
        )));
    }
    // Run identity comes from the checkpoint: the config only carries
    // evaluation knobs here.
    let info = RunInfo {
        seed: meta.train.seed,
        loss_kind: meta.loss.kind.to_string(),
        hidden: meta.model.hidden,
        epochs: meta.best_epoch + 1,
    };
    let record = runtime(run_eval(cfg, &model, &dataset, &info))?;
    let out_dir = cfg.output.dir.clone();
    runtime(std::fs::create_dir_all(&out_dir).context("creating output directory"))?;
    runtime(
        append_csv_row(&out_dir.join("metrics.csv"), MetricsRecord::CSV_HEADER, &record.to_csv_row())
            .context("appending metrics row"),
    )?;
    println!("{}", MetricsRecord::CSV_HEADER);
    println!("{}", record.to_csv_row());

    if cfg.eval.export_embedding {
        let (test_rows, test_labels) = dataset.split_rows(Split::Test);
        let emb = runtime(
            embed_posterior_means(test_rows.data(), test_rows.rows(), &model).map_err(|e| anyhow!("{e}")),
        )?;
        let dz = model.dim_z();
        let mut text = String::new();
        for d in 0..dz {
            if d > 0 {
                text.push(',');
            }
            let _ = write!(text, "z{d}");
        }
        text.push_str(",label\n");
        for i in 0..emb.rows() {
            for d in 0..dz {
                if d > 0 {
                    text.push(',');
                }
                let _ = write!(text, "{}", emb.row(i)[d]);
            }
            match &test_labels {
                Some(ls) => {
                    let _ = write!(text, ",{}", ls[i]);
                }
                None => text.push_str(","),
            }
            text.push('\n');
        }
        runtime(write_atomic(&out_dir.join("embedding.csv"), text.as_bytes()).context("writing embedding"))?;
        println!("embedding written to {}", out_dir.join("embedding.csv").display());
    }
    Ok(CmdOutcome::Ok)
}

/// One sweep cell: a loss kind at an axis value for one seed.
#[derive(Debug, Clone)]
struct SweepJob {
    loss: String,
    value: usize,
    seed: u64,
}

impl SweepJob {
    fn dir_name(&self, axis: &str) -> String {
        format!("{}_{}{}_seed{}", self.loss, axis, self.value, self.seed)
    }
}

fn sweep_worker_threads() -> usize {
    std::env::var("MIMLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> CmdResult {
    // Dataset is shared by every run: generate it when missing.
    if !cfg.dataset.path.exists() {
        if cfg.dataset.generator == "file" {
            return Err(CmdError::Validation(anyhow!(
                "dataset file {} is missing and generator is 'file'",
                cfg.dataset.path.display()
            )));
        }
        cmd_generate(cfg)?;
    }
    let dataset = Arc::new(validation(load_dataset(cfg))?);
    let axis = cfg.sweep.axis.clone();
    let jobs: Vec<SweepJob> = cfg
        .sweep
        .losses
        .iter()
        .flat_map(|loss| {
            cfg.sweep.values.iter().flat_map(move |&value| {
                cfg.sweep.seeds.iter().map(move |&seed| SweepJob { loss: loss.clone(), value, seed })
            })
        })
        .collect();
    if jobs.is_empty() {
        return Err(CmdError::Validation(anyhow!("sweep has no jobs (empty values/seeds/losses)")));
    }
    runtime(std::fs::create_dir_all(&cfg.output.dir).context("creating sweep output directory"))?;

    let results: Mutex<Vec<Option<std::result::Result<MetricsRecord, String>>>> =
        Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let threads = sweep_worker_threads().min(jobs.len());
    println!("sweep: {} runs across {} worker(s)", jobs.len(), threads);

    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let job = &jobs[i];
                let outcome = run_sweep_job(cfg, &dataset, &axis, job);
                if let Ok(rec) = &outcome {
                    println!("done {}: mi={:.3} rmse={:.4}", job.dir_name(&axis), rec.mi_ksg, rec.recon_rmse);
                } else if let Err(e) = &outcome {
                    eprintln!("FAILED {}: {e}", job.dir_name(&axis));
                }
                results.lock().expect("poisoned").get_mut(i).map(|slot| *slot = Some(outcome));
            });
        }
    });

    let results = results.into_inner().expect("poisoned");
    let mut rows: Vec<(SweepJob, MetricsRecord)> = Vec::new();
    let mut failures: Vec<(SweepJob, String)> = Vec::new();
    for (job, res) in jobs.iter().zip(results.into_iter()) {
        match res.expect("every job ran") {
            Ok(rec) => rows.push((job.clone(), rec)),
            Err(e) => failures.push((job.clone(), e)),
        }
    }

    // Per-run rows.
    let mut per_run = format!("loss_kind,{axis},{}\n", MetricsRecord::CSV_HEADER);
    for (job, rec) in &rows {
        let _ = writeln!(per_run, "{},{},{}", job.loss, job.value, rec.to_csv_row());
    }
    runtime(write_atomic(&cfg.output.dir.join("sweep.csv"), per_run.as_bytes()).context("writing sweep.csv"))?;

    // Aggregates: mean and sample std per (loss, axis value) cell.
    let mut agg = format!(
        "loss_kind,{axis},runs,mi_mean,mi_std,nll_mean,nll_std,nll_enc_bound_mean,nll_enc_bound_std,recon_mean,recon_std,knn_mean,knn_std,collapse_mean,collapse_std\n"
    );
    for loss in &cfg.sweep.losses {
        for &value in &cfg.sweep.values {
            let cell: Vec<&MetricsRecord> = rows
                .iter()
                .filter(|(j, _)| &j.loss == loss && j.value == value)
                .map(|(_, r)| r)
                .collect();
            if cell.is_empty() {
                continue;
            }
            let stats = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> (f64, f64) {
                let vals: Vec<f64> = cell.iter().filter_map(|r| f(r)).collect();
                mean_std(&vals)
            };
            let (mi_m, mi_s) = stats(&|r| Some(r.mi_ksg));
            let (nll_m, nll_s) = stats(&|r| Some(r.nll_iw));
            let (nb_m, nb_s) = stats(&|r| Some(r.nll_enc_bound));
            let (re_m, re_s) = stats(&|r| Some(r.recon_rmse));
            let (kn_m, kn_s) = stats(&|r| r.knn_acc);
            let (co_m, co_s) = stats(&|r| r.collapse_index);
            let _ = writeln!(
                agg,
                "{loss},{value},{},{mi_m},{mi_s},{nll_m},{nll_s},{nb_m},{nb_s},{re_m},{re_s},{kn_m},{kn_s},{co_m},{co_s}",
                cell.len()
            );
        }
    }
    runtime(write_atomic(&cfg.output.dir.join("sweep_aggregate.csv"), agg.as_bytes()).context("writing aggregates"))?;

    if !failures.is_empty() {
        let mut text = String::from("loss_kind,value,seed,error\n");
        for (job, e) in &failures {
            let _ = writeln!(text, "{},{},{},\"{}\"", job.loss, job.value, job.seed, e.replace('"', "'"));
        }
        runtime(write_atomic(&cfg.output.dir.join("failures.csv"), text.as_bytes()).context("writing failures"))?;
        eprintln!("{} of {} runs failed; see failures.csv", failures.len(), jobs.len());
        return Ok(CmdOutcome::PartialFailure);
    }
    println!("sweep complete: {} runs -> {}", rows.len(), cfg.output.dir.join("sweep.csv").display());
    Ok(CmdOutcome::Ok)
}

/// Sample mean and (n-1)-normalized standard deviation.
pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_sweep_job(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    axis: &str,
    job: &SweepJob,
) -> std::result::Result<MetricsRecord, String> {
    let run_dir = cfg.output.dir.join(job.dir_name(axis));
    let metrics_path = run_dir.join("metrics.csv");
    // Resume: a completed run is keyed by its metrics file.
    if let Ok(text) = std::fs::read_to_string(&metrics_path) {
        if let Some(row) = text.lines().nth(1) {
            if let Some(rec) = MetricsRecord::parse_csv_row(row) {
                return Ok(rec);
            }
        }
    }
    let mut run_cfg = cfg.clone();
    run_cfg.loss.kind = job.loss.clone();
    match axis {
        "hidden" => run_cfg.model.hidden = job.value,
        "latent_dim" => run_cfg.model.latent_dim = job.value,
        _ => return Err(format!("unknown axis '{axis}'")),
    }
    run_cfg.train.seed = job.seed;
    run_cfg.eval.seed = job.seed;
    run_cfg.output.dir = run_dir.clone();
    run_cfg.validate().map_err(|e| e.to_string())?;

    let arts = run_training(&run_cfg, dataset).map_err(|e| format!("{e:#}"))?;
    let info = RunInfo {
        seed: run_cfg.train.seed,
        loss_kind: run_cfg.loss.kind.clone(),
        hidden: run_cfg.model.hidden,
        epochs: arts.trained.history.len(),
    };
    let record = run_eval(&run_cfg, &arts.trained.model, dataset, &info).map_err(|e| format!("{e:#}"))?;
    append_csv_row(&metrics_path, MetricsRecord::CSV_HEADER, &record.to_csv_row()).map_err(|e| e.to_string())?;
    Ok(record)
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> CmdResult {
    let reports = runtime(
        run_identity_suite(cfg.verify.trials, cfg.verify.seed).map_err(|e| anyhow!("identity suite: {e}")),
    )?;
    let mut all_ok = true;
    println!(
        "identity suite: {} random strictly-positive finite models (seed {})",
        cfg.verify.trials, cfg.verify.seed
    );
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status}  {:<48} max residual {:.3e} (tolerance {:.0e})", r.name, r.max_residual, r.tolerance);
        all_ok &= r.passed();
    }
    if all_ok {
        println!("all identities hold");
        Ok(CmdOutcome::Ok)
    } else {
        Err(CmdError::Runtime(anyhow!("one or more identities failed")))
    }
}

/// Entry point used by main: also reachable from integration tests.
pub fn dispatch(cmd: &str, cfg: &ExperimentConfig) -> CmdResult {
    match cmd {
        "generate" => cmd_generate(cfg),
        "train" => cmd_train(cfg),
        "eval" => cmd_eval(cfg),
        "sweep" => cmd_sweep(cfg),
        "verify" => cmd_verify(cfg),
        other => Err(CmdError::Validation(anyhow!("unknown command '{other}'"))),
    }
}
