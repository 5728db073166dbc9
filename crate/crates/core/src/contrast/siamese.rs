//! BYOL / SimSiam scaffolds with a suppressed third path.
//!
//! The top branch turns view `v` into the target `z` (EMA network in BYOL,
//! detached online projection in SimSiam). The online branch encodes `v'`
//! once and feeds the same feature map through the shared head twice: as is
//! (`z'`) and with its most responsive locations zeroed (`z_hat`). The base
//! loss is symmetrised over the two views; the suppressed term is applied
//! once per step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{distance_with_grad, feasc_total_loss, normalized_mse, LossReport};
use crate::config::{EncoderSpec, HeadSpec, Mode, Strategy};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, Batch4, Encoder, EncoderCache, Mat, Mlp, MlpCache,
    Module, NamedTensor, Param, Real,
};
use crate::seed::mix;
use crate::suppression::{apply_mask_in_place, channel_sum, mask_random, top_k_mask, SuppressionMask};

/// Per-step suppression settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub eta: f64,
    pub lambda: f64,
    pub strategy: Strategy,
    /// Seeds the random-mask strategy; sample `i` uses `mix(mask_seed, i)`.
    pub mask_seed: u64,
}

impl StepSettings {
    /// Whether the suppressed path runs at all.
    pub fn active(&self) -> bool {
        self.lambda > 0.0 && self.strategy != Strategy::None
    }
}

/// Where the contrast targets come from.
#[derive(Debug, Clone)]
pub enum Targets<T> {
    /// The framework's own target branch.
    Own,
    /// Fixed targets for views 1 and 2 (used to probe the stop-gradient).
    Given { z1: Mat<T>, z2: Mat<T> },
}

#[derive(Debug, Clone)]
pub struct ViewOutputs<T> {
    /// Top-branch target for view `v`.
    pub z: Mat<T>,
    /// Online output for view `v'`.
    pub z_prime: Mat<T>,
    /// Online output for the suppressed `v'` path, if it ran.
    pub z_hat: Option<Mat<T>>,
    pub masks: Vec<SuppressionMask>,
    pub report: LossReport,
}

#[derive(Debug)]
pub struct HeadCache<T> {
    proj: MlpCache<T>,
    pred: Option<MlpCache<T>>,
    h: usize,
    w: usize,
}

#[derive(Debug, Clone)]
pub struct TargetBranch<T> {
    pub encoder: Encoder<T>,
    pub projector: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct SiameseNet<T> {
    pub mode: Mode,
    pub encoder: Encoder<T>,
    pub projector: Mlp<T>,
    pub predictor: Mlp<T>,
    /// Present in BYOL mode only; SimSiam's target shares the online weights.
    pub target: Option<TargetBranch<T>>,
    pub suppressed_through_predictor: bool,
}

impl<T: Real> SiameseNet<T> {
    pub fn new(
        mode: Mode,
        enc: &EncoderSpec,
        head: &HeadSpec,
        suppressed_through_predictor: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(enc.in_channels, &enc.channels, &enc.strides, &mut rng);
        let c = encoder.out_channels();
        let out_bn = match mode {
            Mode::Simsiam => Some(false),
            Mode::Byol => None,
        };
        let projector = Mlp::new(c, &[head.projector_hidden], head.embed_dim, out_bn, &mut rng);
        let predictor = Mlp::new(
            head.embed_dim,
            &[head.predictor_hidden],
            head.embed_dim,
            None,
            &mut rng,
        );
        let target = (mode == Mode::Byol).then(|| TargetBranch {
            encoder: encoder.clone(),
            projector: projector.clone(),
        });
        Self {
            mode,
            encoder,
            projector,
            predictor,
            target,
            suppressed_through_predictor,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.output_dim()
    }

    /// Pool, project and (optionally) predict.
    fn head_forward(&mut self, f: &Batch4<T>, with_predictor: bool) -> (Mat<T>, Mat<T>, HeadCache<T>) {
        let pooled = global_avg_pool(f);
        let (proj, proj_cache) = self.projector.forward_train(&pooled);
        let (out, pred_cache) = if with_predictor {
            let (p, c) = self.predictor.forward_train(&proj);
            (p, Some(c))
        } else {
            (proj.clone(), None)
        };
        let cache = HeadCache {
            proj: proj_cache,
            pred: pred_cache,
            h: f.h,
            w: f.w,
        };
        (out, proj, cache)
    }

    fn head_backward(&mut self, g_out: &Mat<T>, cache: &HeadCache<T>) -> Batch4<T> {
        let g_proj = match &cache.pred {
            Some(c) => self.predictor.backward(g_out, c),
            None => g_out.clone(),
        };
        let g_pooled = self.projector.backward(&g_proj, &cache.proj);
        global_avg_pool_backward(&g_pooled, cache.h, cache.w)
    }

    fn target_projection(&mut self, v: &Batch4<T>) -> Mat<T> {
        match &mut self.target {
            Some(t) => {
                let (f, _) = t.encoder.forward_train(v);
                let (z, _) = t.projector.forward_train(&global_avg_pool(&f));
                z
            }
            None => {
                let (f, _) = self.encoder.forward_train(v);
                let (z, _) = self.projector.forward_train(&global_avg_pool(&f));
                z
            }
        }
    }

    /// Top-branch targets for both views, carrying no gradient.
    pub fn compute_targets(&mut self, v1: &Batch4<T>, v2: &Batch4<T>) -> (Mat<T>, Mat<T>) {
        (self.target_projection(v1), self.target_projection(v2))
    }

    /// One mask per sample of `f`, from the strategy's mask source.
    pub fn masks_for(&self, f: &Batch4<T>, s: &StepSettings) -> Result<Vec<SuppressionMask>> {
        if !(0.0..=1.0).contains(&s.eta) {
            return Err(Error::validation(format!("eta must lie in [0, 1], got {}", s.eta)));
        }
        (0..f.n)
            .map(|i| {
                let resp = || channel_sum(f.sample(i), f.c, f.h, f.w);
                Ok(match s.strategy {
                    Strategy::Feasc | Strategy::ImageSuppress => {
                        top_k_mask(&resp(), f.h, f.w, s.eta, true)
                    }
                    Strategy::LowResponse => top_k_mask(&resp(), f.h, f.w, s.eta, false),
                    Strategy::Random => mask_random(f.h, f.w, s.eta, mix(&[s.mask_seed, i as u64]))?,
                    Strategy::None => SuppressionMask::empty(f.h, f.w),
                })
            })
            .collect()
    }

    /// `D(z, head(F * (1 - mask)))`. With `grad_scale = Some(k)` the gradient
    /// of `k * D` is pushed into the head parameters and returned w.r.t. `F`.
    pub fn suppressed_term(
        &mut self,
        f: &Batch4<T>,
        masks: &[SuppressionMask],
        z: &Mat<T>,
        grad_scale: Option<f64>,
    ) -> Result<(f64, Mat<T>, Option<Batch4<T>>)> {
        if masks.len() != f.n {
            return Err(Error::validation(format!(
                "{} masks for a batch of {}",
                masks.len(),
                f.n
            )));
        }
        let mut fhat = f.clone();
        for (i, mask) in masks.iter().enumerate() {
            if (mask.height, mask.width) != (f.h, f.w) {
                return Err(Error::validation("mask shape does not match feature map"));
            }
            apply_mask_in_place(fhat.sample_mut(i), mask);
        }
        let through = self.suppressed_through_predictor;
        let (zhat, _, cache) = self.head_forward(&fhat, through);
        let (d, mut g) = distance_with_grad(self.mode, &zhat, z)?;
        let grad_f = match grad_scale {
            Some(k) => {
                let k = T::lit(k);
                g.data.iter_mut().for_each(|v| *v *= k);
                let mut gf = self.head_backward(&g, &cache);
                for (i, mask) in masks.iter().enumerate() {
                    apply_mask_in_place(gf.sample_mut(i), mask);
                }
                Some(gf)
            }
            None => None,
        };
        Ok((d, zhat, grad_f))
    }

    /// Pixel-space baseline: zero the upsampled mask cells of `v` and encode
    /// the result with a second online pass.
    fn image_suppressed_term(
        &mut self,
        v: &Batch4<T>,
        masks: &[SuppressionMask],
        z: &Mat<T>,
        grad_scale: Option<f64>,
    ) -> Result<(f64, Mat<T>)> {
        let mut masked = v.clone();
        let plane = v.h * v.w;
        for (i, mask) in masks.iter().enumerate() {
            let up = mask.upsample_nearest(v.h, v.w);
            for ch in masked.sample_mut(i).chunks_exact_mut(plane) {
                for (px, &m) in ch.iter_mut().zip(&up) {
                    if m == 1 {
                        *px = T::zero();
                    }
                }
            }
        }
        let (f, enc_cache) = self.encoder.forward_train(&masked);
        let through = self.suppressed_through_predictor;
        let (zhat, _, cache) = self.head_forward(&f, through);
        let (d, mut g) = distance_with_grad(self.mode, &zhat, z)?;
        if let Some(k) = grad_scale {
            let k = T::lit(k);
            g.data.iter_mut().for_each(|v| *v *= k);
            let gf = self.head_backward(&g, &cache);
            self.encoder.backward(&gf, &enc_cache);
        }
        Ok((d, zhat))
    }

    /// Forward both views (and the suppressed path), optionally accumulating
    /// gradients of the total loss into the online parameters.
    pub fn run(
        &mut self,
        v1: &Batch4<T>,
        v2: &Batch4<T>,
        targets: Targets<T>,
        s: &StepSettings,
        backward: bool,
    ) -> Result<ViewOutputs<T>> {
        if (v1.n, v1.c, v1.h, v1.w) != (v2.n, v2.c, v2.h, v2.w) {
            return Err(Error::validation("the two views must have identical shapes"));
        }
        if s.lambda < 0.0 {
            return Err(Error::validation(format!(
                "lambda must be non-negative, got {}",
                s.lambda
            )));
        }
        let (f1, ec1) = self.encoder.forward_train(v1);
        let (p1, h1, hc1) = self.head_forward(&f1, true);
        let (f2, ec2) = self.encoder.forward_train(v2);
        let (p2, h2, hc2) = self.head_forward(&f2, true);
        let (z1, z2) = match targets {
            Targets::Given { z1, z2 } => (z1, z2),
            Targets::Own => match self.mode {
                Mode::Simsiam => (h1, h2),
                Mode::Byol => self.compute_targets(v1, v2),
            },
        };

        let (d12, mut g1) = distance_with_grad(self.mode, &p1, &z2)?;
        let (d21, mut g2) = distance_with_grad(self.mode, &p2, &z1)?;
        let d_orig = 0.5 * (d12 + d21);
        let mse_orig = normalized_mse(&p2, &z1)?;

        let lambda = if s.active() { s.lambda } else { 0.0 };
        let scale = backward.then_some(lambda);
        let mut extra_g2 = None;
        let (d_supp, mse_supp, z_hat, masks) = if s.active() {
            let masks = self.masks_for(&f2, s)?;
            let (d, zhat) = if s.strategy == Strategy::ImageSuppress {
                self.image_suppressed_term(v2, &masks, &z1, scale)?
            } else {
                let (d, zhat, gf) = self.suppressed_term(&f2, &masks, &z1, scale)?;
                extra_g2 = gf;
                (d, zhat)
            };
            let mse = normalized_mse(&zhat, &z1)?;
            (d, mse, Some(zhat), masks)
        } else {
            (0.0, 0.0, None, Vec::new())
        };
        let total = feasc_total_loss(d_orig, d_supp, lambda)?;

        if backward {
            let half = T::lit(0.5);
            g1.data.iter_mut().for_each(|v| *v *= half);
            g2.data.iter_mut().for_each(|v| *v *= half);
            let gf1 = self.head_backward(&g1, &hc1);
            self.backward_encoder(&gf1, &ec1);
            let mut gf2 = self.head_backward(&g2, &hc2);
            if let Some(extra) = extra_g2 {
                for (a, b) in gf2.data.iter_mut().zip(&extra.data) {
                    *a += *b;
                }
            }
            self.backward_encoder(&gf2, &ec2);
        }

        Ok(ViewOutputs {
            z: z1,
            z_prime: p2,
            z_hat,
            masks,
            report: LossReport {
                d_orig,
                d_supp,
                lambda,
                total,
                mse_orig,
                mse_supp,
            },
        })
    }

    fn backward_encoder(&mut self, g: &Batch4<T>, cache: &EncoderCache<T>) {
        self.encoder.backward(g, cache);
    }

    /// Embeddings and loss terms without touching gradients.
    pub fn forward_views(
        &mut self,
        v1: &Batch4<T>,
        v2: &Batch4<T>,
        s: &StepSettings,
    ) -> Result<ViewOutputs<T>> {
        self.run(v1, v2, Targets::Own, s, false)
    }

    /// Forward plus backward; gradients accumulate into the online parameters.
    pub fn train_step(&mut self, v1: &Batch4<T>, v2: &Batch4<T>, s: &StepSettings) -> Result<LossReport> {
        Ok(self.run(v1, v2, Targets::Own, s, true)?.report)
    }

    /// Online parameters: encoder, projector, predictor.
    pub fn online_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.encoder.params_mut(&mut out);
        self.projector.params_mut(&mut out);
        self.predictor.params_mut(&mut out);
        out
    }

    pub fn target_params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        if let Some(t) = &self.target {
            t.encoder.params(&mut out);
            t.projector.params(&mut out);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.online_params_mut() {
            p.zero_grad();
        }
    }

    /// BYOL momentum update of the target branch; a no-op for SimSiam.
    pub fn update_target(&mut self, tau: f64) -> Result<()> {
        let Some(t) = &mut self.target else {
            return Ok(());
        };
        let mut online = Vec::new();
        self.encoder.params(&mut online);
        self.projector.params(&mut online);
        let mut target = Vec::new();
        t.encoder.params_mut(&mut target);
        t.projector.params_mut(&mut target);
        super::ema_update(&mut target, &online, tau)
    }

    /// All parameters and buffers, named for checkpoints.
    pub fn state(&self) -> Vec<NamedTensor<T>> {
        let mut out = Vec::new();
        self.encoder.state("online.encoder", &mut out);
        self.projector.state("online.projector", &mut out);
        self.predictor.state("online.predictor", &mut out);
        if let Some(t) = &self.target {
            t.encoder.state("target.encoder", &mut out);
            t.projector.state("target.projector", &mut out);
        }
        out
    }

    pub fn load_state(
        &mut self,
        lookup: &mut dyn FnMut(&str, &[usize]) -> std::result::Result<Vec<T>, String>,
    ) -> std::result::Result<(), String> {
        self.encoder.load_state("online.encoder", lookup)?;
        self.projector.load_state("online.projector", lookup)?;
        self.predictor.load_state("online.predictor", lookup)?;
        if let Some(t) = &mut self.target {
            t.encoder.load_state("target.encoder", lookup)?;
            t.projector.load_state("target.projector", lookup)?;
        }
        Ok(())
    }
}
