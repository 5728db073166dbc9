//! Pre-training loop.
//!
//! Each epoch draws a fresh shuffle, computes the suppression ratio
//! `eta = ramp_up_eta(epoch)` once, and runs SGD over full batches (a
//! trailing partial batch is dropped). View pairs are seeded per sample by
//! `mix(seed, AUGMENT, epoch, index)` and random masks per step by
//! `mix(seed, MASK, step)`, so a run is a pure function of its config.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::sample_view_pair;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::contrast::{LossReport, SiameseNet, StepSettings};
use crate::data::{load_split, open_dataset, stratified_subset, to_batch, Split, SubsetSpec};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{Batch4, Sgd};
use crate::seed::{mix, stream};
use crate::suppression::ramp_up_eta;

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str =
    "epoch,step,eta,lr,d_orig,d_supp,lambda,total,mse_orig,mse_supp,wall_clock_s";

/// One optimizer step. `step` counts from 0 across the whole run and
/// `wall_clock_s` is the time since training started.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub eta: f64,
    pub lr: f64,
    pub report: LossReport,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6}",
            self.epoch,
            self.step,
            self.eta,
            self.lr,
            r.d_orig,
            r.d_supp,
            r.lambda,
            r.total,
            r.mse_orig,
            r.mse_supp,
            self.wall_clock_s
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::validation(format!("metrics row needs 11 fields: {line}")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::validation(format!("bad number '{}' in metrics row", f[i])))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse::<usize>()
                .map_err(|_| Error::validation(format!("bad integer '{}' in metrics row", f[i])))
        };
        Ok(Self {
            epoch: int(0)?,
            step: int(1)?,
            eta: num(2)?,
            lr: num(3)?,
            report: LossReport {
                d_orig: num(4)?,
                d_supp: num(5)?,
                lambda: num(6)?,
                total: num(7)?,
                mse_orig: num(8)?,
                mse_supp: num(9)?,
            },
            wall_clock_s: num(10)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::validation(format!("{} has an unexpected header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay to 0 over the remaining steps.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::validation(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    if warmup_steps > total_steps {
        return Err(Error::validation("warmup_steps exceeds total_steps"));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Result of a pre-training run.
pub struct TrainRun {
    pub net: SiameseNet<f32>,
    pub metrics: Vec<MetricsRow>,
    /// Checkpoints written, in order; the last one is the final state.
    pub checkpoints: Vec<PathBuf>,
}

/// Zero grads, forward/backward, SGD step and (BYOL) target update.
pub fn optimizer_step(
    net: &mut SiameseNet<f32>,
    sgd: &Sgd,
    v1: &Batch4<f32>,
    v2: &Batch4<f32>,
    settings: &StepSettings,
    lr: f64,
    tau: f64,
) -> Result<LossReport> {
    net.zero_grad();
    let report = net.train_step(v1, v2, settings)?;
    if !report.total.is_finite() {
        return Ok(report);
    }
    sgd.step(&mut net.online_params_mut(), lr);
    net.update_target(tau)?;
    Ok(report)
}

/// Both augmented batches for the samples `idx` of `images`.
pub fn view_batches(
    images: &[Image],
    idx: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(Batch4<f32>, Batch4<f32>)> {
    let mut a = Vec::with_capacity(idx.len());
    let mut b = Vec::with_capacity(idx.len());
    for &i in idx {
        let seed = mix(&[config.seed, stream::AUGMENT, epoch as u64, i as u64]);
        let (v1, v2) = sample_view_pair(&images[i], &config.augment, seed)?;
        a.push(v1);
        b.push(v2);
    }
    let ra: Vec<&Image> = a.iter().collect();
    let rb: Vec<&Image> = b.iter().collect();
    Ok((to_batch(&ra), to_batch(&rb)))
}

pub fn steps_per_epoch(n_images: usize, batch_size: usize) -> usize {
    n_images / batch_size.min(n_images).max(1)
}

/// Pre-trains on in-memory images. With `out_dir` set, `metrics.csv` and
/// checkpoints are written there.
pub fn pretrain(config: &TrainConfig, images: &[Image], out_dir: Option<&Path>) -> Result<TrainRun> {
    config.validate()?;
    if images.len() < 2 {
        return Err(Error::validation("pre-training needs at least two images"));
    }
    let mut net = SiameseNet::<f32>::new(
        config.mode,
        &config.encoder,
        &config.head,
        config.suppressed_through_predictor,
        mix(&[config.seed, stream::INIT]),
    );
    let sgd = Sgd {
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let batch = config.batch_size.min(images.len());
    let per_epoch = steps_per_epoch(images.len(), batch);
    let total_steps = per_epoch * config.epochs;
    let warmup_steps = per_epoch * config.warmup_epochs;
    let ramp = config.ramp();
    let lambda = config.effective_lambda();

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut checkpoints = Vec::new();
    let mut save = |net: &mut SiameseNet<f32>, epoch: usize, step: usize, name: String| -> Result<()> {
        if let Some(dir) = out_dir {
            let path = dir.join(name);
            Checkpoint::capture(net, config, epoch, step).save(&path)?;
            checkpoints.push(path);
        }
        Ok(())
    };

    let start = Instant::now();
    let mut metrics = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let eta = ramp_up_eta(epoch as i64, &ramp)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, stream::SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(batch) {
            let (v1, v2) = view_batches(images, chunk, config, epoch)?;
            let lr = lr_at(step, total_steps, warmup_steps, config.base_lr)?;
            let settings = StepSettings {
                eta,
                lambda,
                strategy: config.strategy,
                mask_seed: mix(&[config.seed, stream::MASK, step as u64]),
            };
            let report = optimizer_step(&mut net, &sgd, &v1, &v2, &settings, lr, config.tau)?;
            let row = MetricsRow {
                epoch,
                step,
                eta,
                lr,
                report,
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            if let Some((f, path)) = &mut metrics_file {
                writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if !report.total.is_finite() {
                if let Some((f, _)) = &mut metrics_file {
                    let _ = f.flush();
                }
                return Err(Error::Diverged {
                    epoch,
                    step,
                    diagnostics: format!(
                        "eta={eta} lr={lr} d_orig={} d_supp={} lambda={} total={} mse_orig={} mse_supp={}",
                        report.d_orig, report.d_supp, report.lambda, report.total, report.mse_orig, report.mse_supp
                    ),
                });
            }
            metrics.push(row);
            step += 1;
        }
        if let Some((f, path)) = &mut metrics_file {
            f.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        let done = epoch + 1;
        if done % config.checkpoint_every == 0 && done < config.epochs {
            save(&mut net, done, step, format!("checkpoint_epoch{done:04}.ckpt"))?;
        }
    }
    save(&mut net, config.epochs, step, "final.ckpt".into())?;
    Ok(TrainRun {
        net,
        metrics,
        checkpoints,
    })
}

/// Loads the training split named by `config.dataset` (after the configured
/// fractional subset).
pub fn load_training_images(config: &TrainConfig) -> Result<Vec<Image>> {
    let m = open_dataset(&config.dataset)?;
    let m = stratified_subset(
        &m,
        SubsetSpec {
            fraction: config.fraction,
            seed: config.seed,
        },
    )?;
    Ok(load_split(&m, Split::Train)?.images)
}

/// Pre-trains on the configured dataset, writing into `out_dir`.
pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<TrainRun> {
    config.validate()?;
    let images = load_training_images(config)?;
    pretrain(config, &images, Some(out_dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentPolicy;
    use crate::config::{Mode, Strategy};
    use crate::data::synthetic::synthetic_image;

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(10, 100, 10, 0.5).unwrap(), 0.5);
        assert_eq!(lr_at(0, 100, 10, 0.5).unwrap(), 0.0);
        assert!((lr_at(5, 100, 10, 0.5).unwrap() - 0.25).abs() < 1e-12);
        // midpoint of the 90-step decay span
        assert!((lr_at(55, 100, 10, 0.5).unwrap() - 0.25).abs() < 1e-12);
        let last = lr_at(99, 100, 10, 0.5).unwrap();
        let increment = 0.5 - lr_at(11, 100, 10, 0.5).unwrap();
        assert!(last >= 0.0 && last <= increment + 1e-12, "{last} vs {increment}");
        assert!(lr_at(100, 100, 10, 0.5).is_err());
        assert_eq!(lr_at(0, 10, 0, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn lr_is_monotone_after_warmup() {
        let v: Vec<f64> = (20..200).map(|s| lr_at(s, 200, 20, 0.5).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn metrics_rows_round_trip() {
        let row = MetricsRow {
            epoch: 3,
            step: 17,
            eta: 0.123_456_789_012_345_6,
            lr: 0.1,
            report: LossReport {
                d_orig: -0.5,
                d_supp: -0.25,
                lambda: 1.0,
                total: -0.75,
                mse_orig: 0.01,
                mse_supp: 0.02,
            },
            wall_clock_s: 1.5,
        };
        assert_eq!(MetricsRow::parse(&row.to_csv()).unwrap(), row);
        assert_eq!(METRICS_HEADER.split(',').count(), 11);
    }

    pub(crate) fn toy_config(mode: Mode) -> TrainConfig {
        let mut c = TrainConfig {
            mode,
            epochs: 3,
            batch_size: 8,
            warmup_epochs: 1,
            beta: 2,
            base_lr: 0.05,
            checkpoint_every: 2,
            ..TrainConfig::default()
        };
        c.encoder.channels = vec![8, 8];
        c.encoder.strides = vec![2, 2];
        c.head.projector_hidden = 16;
        c.head.embed_dim = 8;
        c.head.predictor_hidden = 4;
        c.augment = AugmentPolicy {
            resolution: 32,
            ..AugmentPolicy::default()
        };
        c
    }

    pub(crate) fn toy_images(n: usize) -> Vec<Image> {
        (0..n).map(|i| synthetic_image(i % 2, 32, i as u64)).collect()
    }

    #[test]
    fn zero_epochs_writes_only_the_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = toy_config(Mode::Simsiam);
        c.epochs = 0;
        c.warmup_epochs = 0;
        let run = pretrain(&c, &toy_images(8), Some(dir.path())).unwrap();
        assert!(run.metrics.is_empty());
        assert_eq!(run.checkpoints, vec![dir.path().join("final.ckpt")]);
        assert_eq!(Checkpoint::load(&run.checkpoints[0]).unwrap().epoch, 0);
        assert!(read_metrics(&dir.path().join("metrics.csv")).unwrap().is_empty());
    }

    #[test]
    fn toy_run_logs_eta_lr_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let c = toy_config(Mode::Byol);
        let run = pretrain(&c, &toy_images(20), Some(dir.path())).unwrap();
        // 20 images, batch 8 -> 2 steps per epoch
        assert_eq!(run.metrics.len(), 6);
        for (i, r) in run.metrics.iter().enumerate() {
            assert_eq!(r.step, i);
            assert_eq!(r.eta, ramp_up_eta(r.epoch as i64, &c.ramp()).unwrap());
            assert_eq!(r.lr, lr_at(i, 6, 2, c.base_lr).unwrap());
            assert!(r.report.total.is_finite());
            assert!((r.report.total - (r.report.d_orig + r.report.lambda * r.report.d_supp)).abs() < 1e-6);
        }
        let names: Vec<_> = run
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["checkpoint_epoch0002.ckpt", "final.ckpt"]);
        let logged = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(logged.len(), 6);
        for (a, b) in logged.iter().zip(&run.metrics) {
            assert_eq!(a.report, b.report);
        }
    }

    #[test]
    fn lambda_zero_total_equals_d_orig() {
        let mut c = toy_config(Mode::Simsiam);
        c.lambda = 0.0;
        let run = pretrain(&c, &toy_images(16), None).unwrap();
        for r in &run.metrics {
            assert_eq!(r.report.total, r.report.d_orig);
            assert_eq!(r.report.d_supp, 0.0);
        }
    }

    #[test]
    fn reruns_are_identical() {
        let c = toy_config(Mode::Simsiam);
        let imgs = toy_images(16);
        let a = pretrain(&c, &imgs, None).unwrap();
        let b = pretrain(&c, &imgs, None).unwrap();
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.report, y.report);
        }
        let mut c2 = c.clone();
        c2.seed = 1;
        let d = pretrain(&c2, &imgs, None).unwrap();
        assert_ne!(a.metrics[0].report, d.metrics[0].report);
    }

    #[test]
    fn strategy_none_matches_lambda_zero() {
        let imgs = toy_images(16);
        let mut a = toy_config(Mode::Simsiam);
        a.strategy = Strategy::None;
        let mut b = toy_config(Mode::Simsiam);
        b.lambda = 0.0;
        let ra = pretrain(&a, &imgs, None).unwrap();
        let rb = pretrain(&b, &imgs, None).unwrap();
        for (x, y) in ra.metrics.iter().zip(&rb.metrics) {
            assert_eq!(x.report, y.report);
        }
    }

    #[test]
    fn byol_target_follows_ema_after_each_step() {
        let c = toy_config(Mode::Byol);
        let imgs = toy_images(8);
        let mut net = SiameseNet::<f32>::new(c.mode, &c.encoder, &c.head, true, 3);
        let sgd = Sgd {
            momentum: c.momentum,
            weight_decay: c.weight_decay,
        };
        let idx: Vec<usize> = (0..8).collect();
        for step in 0..3 {
            let (v1, v2) = view_batches(&imgs, &idx, &c, step).unwrap();
            let before: Vec<Vec<f32>> = net.target_params().iter().map(|p| p.value.clone()).collect();
            let s = StepSettings {
                eta: 0.2,
                lambda: 1.0,
                strategy: Strategy::Feasc,
                mask_seed: 0,
            };
            optimizer_step(&mut net, &sgd, &v1, &v2, &s, 0.05, c.tau).unwrap();
            let mut online = Vec::new();
            crate::nn::Module::params(&net.encoder, &mut online);
            crate::nn::Module::params(&net.projector, &mut online);
            for ((t, prev), o) in net.target_params().iter().zip(&before).zip(&online) {
                for k in (0..t.value.len()).step_by(7) {
                    let want = c.tau as f32 * prev[k] + (1.0 - c.tau as f32) * o.value[k];
                    assert!((t.value[k] - want).abs() <= 1e-6 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn train_reads_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        crate::data::generate_synthetic(&dir.path().join("data"), 2, 8, 32, 0).unwrap();
        let mut c = toy_config(Mode::Simsiam);
        c.dataset = dir.path().join("data/manifest.json");
        c.epochs = 2;
        let run = train(&c, &dir.path().join("run")).unwrap();
        // 12 training images at batch 8 -> one step per epoch
        assert_eq!(run.metrics.len(), 2);
        assert!(dir.path().join("run/final.ckpt").exists());
    }
}
