use mimlab::data::gmm_2d_benchmark;
use mimlab::metrics::{evaluate, EvalSpec, RunInfo};
use mimlab::model::{Activation, ModelSpec, PriorKind};
use mimlab::objective::{LossConfig, LossKind};
use mimlab::train::{train, AdamHyper, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let (_, ds) = gmm_2d_benchmark(1);
    for hidden in [20usize, 500] {
        for kind in [LossKind::MimMarginal, LossKind::Vae] {
            for seed in [11u64, 12, 13] {
                let spec = ModelSpec { dim_x: 2, dim_z: 2, hidden, activation: Activation::Tanh,
                    z_prior: PriorKind::Anchor, x_prior: PriorKind::MarginalX };
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let model = spec.build(&mut r, None).unwrap();
                let loss = LossConfig::new(kind, 3);
                let cfg = TrainConfig { batch_size: 128, max_epochs: 14, patience: Some(3),
                    epoch_samples: Some(10_000), val_samples: Some(2_000), seed, adam: AdamHyper::default() };
                let t = Instant::now();
                let out = train(model, &loss, &ds, &cfg).unwrap();
                let es = EvalSpec { seed, ..EvalSpec::default() };
                let info = RunInfo { seed, loss_kind: kind.to_string(), hidden, epochs: out.history.len() };
                let rec = evaluate(&out.model, &ds, &es, &info).unwrap();
                println!(
                    "h={hidden} {kind} seed={seed}: ep={} t={:.0?} mi={:.3} nll={:.3} nllb={:.3} rmse={:.4} knn={:.4} collapse={:.4}",
                    out.history.len(), t.elapsed(), rec.mi_ksg, rec.nll_iw, rec.nll_enc_bound,
                    rec.recon_rmse, rec.knn_acc.unwrap_or(f64::NAN), rec.collapse_index.unwrap_or(f64::NAN)
                );
            }
        }
    }
}
