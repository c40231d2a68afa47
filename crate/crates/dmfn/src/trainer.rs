//! Adversarial training loop: strict D-then-G updates every iteration with
//! the six-term objective, exact checkpoint/resume, and per-term loss
//! tracking.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::TrainBatch;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::kernels::Exec;
use crate::losses::{
    self, total_g_loss, LossTerms,
};
use crate::masking::{compose_grad_to_pred, compose_output, crop_resize, crop_resize_backward,
    make_input};
use crate::nn::{Adam, GradMap, ParamSet};
use crate::scalar::Scalar;
use crate::types::{ImageBatch, RangeTag};
use crate::vgg::VggFeatures;

/// Scalars produced by one training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLosses {
    pub iteration: u64,
    pub mae: f64,
    pub self_guided: f64,
    pub fm_vgg: f64,
    pub fm_dis: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub align: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str =
    "iteration,mae,self_guided,fm_vgg,fm_dis,adv_g,adv_d,align,total";

impl StepLosses {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.iteration,
            self.mae,
            self.self_guided,
            self.fm_vgg,
            self.fm_dis,
            self.adv_g,
            self.adv_d,
            self.align,
            self.total
        )
    }
}

/// Trailing window used for the smoothed total (and resumed exactly).
pub const SMOOTH_WINDOW: usize = 10;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossWindow {
    totals: VecDeque<f64>,
}

impl LossWindow {
    fn push(&mut self, total: f64) {
        if self.totals.len() == SMOOTH_WINDOW {
            self.totals.pop_front();
        }
        self.totals.push_back(total);
    }

    /// Mean of the last up-to-ten totals.
    pub fn smoothed(&self) -> Option<f64> {
        if self.totals.is_empty() {
            return None;
        }
        Some(self.totals.iter().sum::<f64>() / self.totals.len() as f64)
    }
}

pub struct Trainer {
    cfg: RunConfig,
    config_hash: String,
    exec: Exec,
    generator: Generator<f32>,
    discriminator: Discriminator<f32>,
    vgg: VggFeatures<f32>,
    vgg_checksum: String,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    iteration: u64,
    window: LossWindow,
}

fn finite_or_abort(value: f64, term: &str, iteration: u64, batch_index: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            iteration,
            batch_index,
        })
    }
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let generator = Generator::new(&cfg.generator, &cfg.ablation, seed)?;
        let discriminator = Discriminator::new(&cfg.discriminator, seed)?;
        let vgg = VggFeatures::load(&cfg.vgg_source()?)?;
        let vgg_checksum = vgg.weights_checksum().to_string();
        let t = &cfg.train;
        Ok(Self {
            config_hash: cfg.config_hash(),
            cfg: cfg.clone(),
            exec: Exec::default(),
            generator,
            discriminator,
            vgg,
            vgg_checksum,
            opt_g: Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2),
            opt_d: Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2),
            iteration: 0,
            window: LossWindow::default(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn vgg(&self) -> &VggFeatures<f32> {
        &self.vgg
    }

    pub fn smoothed_total(&self) -> Option<f64> {
        self.window.smoothed()
    }

    /// Frozen-extractor invariant: the VGG weights checksum never changes.
    pub fn vgg_intact(&self) -> bool {
        self.vgg.weights_checksum() == self.vgg_checksum
    }

    /// One D-then-G update on a batch.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepLosses> {
        let exec = self.exec;
        let it = self.iteration;
        let weights = self.cfg.loss.weights;
        let metric = self.cfg.loss.metric;
        let patch_size = self.cfg.discriminator.local_patch_size.min(
            // When training below the default image size, scale the local
            // branch input down with it.
            self.cfg.train.image_size,
        );
        let batch_index = it; // batch stream index equals the iteration
        let abort = |v: f64, term: &str| finite_or_abort(v, term, it, batch_index);

        let gt = &batch.gt;
        let i_in = make_input(gt, &batch.mask)?;
        let x = Generator::<f32>::stack_input(&i_in, &batch.mask)?;
        let (pred_raw, g_cache) = self.generator.forward_train(exec, &x);
        let pred = ImageBatch::new_unchecked(pred_raw, RangeTag::ModelRange);
        let i_out = compose_output(&i_in, &pred, &batch.mask)?;

        let patches_gt = crop_resize(exec, gt.data(), &batch.boxes, patch_size);
        let patches_out = crop_resize(exec, i_out.data(), &batch.boxes, patch_size);

        // --- Discriminator step (generator output detached) ---
        let (res_real, cache_real) = self
            .discriminator
            .forward_train(exec, gt.data(), &patches_gt)?;
        let (res_fake, cache_fake) = self
            .discriminator
            .forward_train(exec, i_out.data(), &patches_out)?;
        let (l_d, g_dr, g_df) =
            losses::ragan_d_loss_grad(&res_real.score, &res_fake.score)?;
        let adv_d = abort(l_d as f64, "adv_d")?;
        let mut grads_d = GradMap::new();
        self.discriminator
            .backward(exec, &cache_real, &g_dr, None, false, Some(&mut grads_d));
        self.discriminator
            .backward(exec, &cache_fake, &g_df, None, false, Some(&mut grads_d));
        if let Some(clip) = self.cfg.schedule.grad_clip {
            grads_d.clip_global_norm(clip);
        }
        self.opt_d.step(&mut self.discriminator, &grads_d);

        // --- Generator step (fresh critic pass with updated weights) ---
        let res_real2 = self
            .discriminator
            .forward(exec, gt.data(), &patches_gt)?;
        let (res_fake2, cache_fake2) = self
            .discriminator
            .forward_train(exec, i_out.data(), &patches_out)?;
        let (l_adv, _g_real_scores, g_fake_scores) =
            losses::ragan_g_loss_grad(&res_real2.score, &res_fake2.score)?;
        let adv_g = abort(l_adv as f64, "adv_g")?;
        let (l_fmd, tap_grads_fmd) =
            losses::dis_fm_loss_grad(&res_fake2.local_taps, &res_real2.local_taps)?;
        let fm_dis = abort(l_fmd as f64, "fm_dis")?;
        let mu = weights.mu as f32;
        let eta = weights.eta as f32;
        let g_scores_weighted = g_fake_scores.mapv(|v| v * mu);
        let tap_grads_weighted: Vec<Array4<f32>> = tap_grads_fmd
            .iter()
            .map(|g| g.mapv(|v| v * eta))
            .collect();
        let (g_full_d, g_patch_d) = self.discriminator.backward(
            exec,
            &cache_fake2,
            &g_scores_weighted,
            Some(&tap_grads_weighted),
            true,
            None,
        );

        // --- Feature losses through the frozen extractor ---
        let pyr_gt = self.vgg.extract_pyramid(exec, gt)?;
        let (pyr_out, vgg_cache) = self.vgg.extract_train(exec, &i_out)?;
        let err = losses::error_map(&i_out, gt, metric)?;
        let guide = losses::guidance_pyramid(losses::normalize_guidance(&err))?;
        let (l_sg, g_sg) = losses::self_guided_loss_grad(&pyr_out, &pyr_gt, &guide)?;
        let self_guided = abort(l_sg as f64, "self_guided")?;
        let (l_fmv, g_fmv) = losses::vgg_fm_loss_grad(&pyr_out, &pyr_gt)?;
        let fm_vgg = abort(l_fmv as f64, "fm_vgg")?;
        let (l_align, g_align) =
            losses::alignment_loss_grad(pyr_out.level(3), pyr_gt.level(3))?;
        let align = abort(l_align as f64, "align")?;

        let lambda = weights.lambda as f32;
        let gamma = weights.gamma as f32;
        let mut tap_grads: Vec<Array4<f32>> = Vec::with_capacity(5);
        for l in 0..5 {
            let mut g = g_fmv[l].mapv(|v| v * lambda);
            if l < 2 {
                g.zip_mut_with(&g_sg[l], |a, &b| *a += lambda * b);
            }
            if l == 3 {
                g.zip_mut_with(&g_align, |a, &b| *a += gamma * b);
            }
            tap_grads.push(g);
        }
        let g_img_vgg = self.vgg.backward(exec, &vgg_cache, &tap_grads);

        let (l_mae, g_mae) = losses::mae_loss_grad(&i_out, gt)?;
        let mae = abort(l_mae as f64, "mae")?;

        // Combine gradients at the composited output.
        let frame_hw = (gt.height(), gt.width());
        let mut g_iout = g_mae;
        g_iout += &g_img_vgg;
        if let Some(g_full) = g_full_d {
            g_iout += &g_full;
        }
        if let Some(g_patch) = g_patch_d {
            let scattered = crop_resize_backward(exec, &g_patch, &batch.boxes, frame_hw);
            g_iout += &scattered;
        }
        let g_pred = compose_grad_to_pred(&g_iout, &batch.mask);

        let total = total_g_loss(
            &LossTerms {
                mae,
                self_guided,
                fm_vgg,
                fm_dis,
                adv: adv_g,
                align,
            },
            &weights,
        );
        abort(total, "total")?;

        let mut grads_g = GradMap::new();
        self.generator.backward(exec, &g_cache, &g_pred, &mut grads_g);
        if let Some(clip) = self.cfg.schedule.grad_clip {
            grads_g.clip_global_norm(clip);
        }
        if let (Some(every), Some(factor)) = (
            self.cfg.schedule.lr_decay_every,
            self.cfg.schedule.lr_decay_factor,
        ) {
            if it > 0 && it % every == 0 {
                self.opt_g.lr *= factor;
                self.opt_d.lr *= factor;
            }
        }
        self.opt_g.step(&mut self.generator, &grads_g);

        self.iteration += 1;
        self.window.push(total);
        Ok(StepLosses {
            iteration: self.iteration,
            mae,
            self_guided,
            fm_vgg,
            fm_dis,
            adv_g,
            adv_d,
            align,
            total,
        })
    }

    /// Write the full training state (networks, optimizer moments, window)
    /// as one manifest.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        debug_assert!(self.vgg_intact());
        let mut tensors: Vec<(String, ndarray::ArrayD<f32>)> = Vec::new();
        self.generator
            .visit_params(&mut |name, v| tensors.push((format!("g.{name}"), v.to_owned())));
        self.discriminator
            .visit_params(&mut |name, v| tensors.push((format!("d.{name}"), v.to_owned())));
        for (name, t) in self.opt_g.state_tensors() {
            tensors.push((format!("opt_g.{name}"), t));
        }
        for (name, t) in self.opt_d.state_tensors() {
            tensors.push((format!("opt_d.{name}"), t));
        }
        let meta = serde_json::json!({
            "iteration": self.iteration,
            "config": self.cfg,
            "config_hash": self.config_hash,
            "seed": self.cfg.train.seed,
            "adam_t_g": self.opt_g.t,
            "adam_t_d": self.opt_d.t,
            "window": self.window,
            "vgg_checksum": self.vgg_checksum,
        });
        checkpoint::write_manifest(path, "train_state", meta, &tensors)
    }

    /// Restore a trainer from a checkpoint written by `save_checkpoint`.
    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        let (header, tensors) = checkpoint::read_manifest::<f32>(path)?;
        if header.kind != "train_state" {
            return Err(Error::Checkpoint(format!(
                "expected train_state checkpoint, got '{}'",
                header.kind
            )));
        }
        let cfg: RunConfig = serde_json::from_value(header.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad embedded config: {e}")))?;
        let mut trainer = Trainer::new(&cfg)?;
        Self::restore_into(&mut trainer, &header, &tensors)?;
        Ok(trainer)
    }

    /// Restore a checkpoint into a trainer built from `cfg`, validating that
    /// parameter shapes match (mismatches name the offending tensor).
    pub fn load_checkpoint_with_config(path: &Path, cfg: &RunConfig) -> Result<Trainer> {
        let (header, tensors) = checkpoint::read_manifest::<f32>(path)?;
        let mut trainer = Trainer::new(cfg)?;
        Self::restore_into(&mut trainer, &header, &tensors)?;
        Ok(trainer)
    }

    fn restore_into(
        trainer: &mut Trainer,
        header: &checkpoint::ManifestHeader,
        tensors: &indexmap::IndexMap<String, ndarray::ArrayD<f32>>,
    ) -> Result<()> {
        crate::nn::param_load(&mut trainer.generator, tensors, "g.")?;
        crate::nn::param_load(&mut trainer.discriminator, tensors, "d.")?;
        let t_g = header.meta["adam_t_g"].as_u64().unwrap_or(0);
        let t_d = header.meta["adam_t_d"].as_u64().unwrap_or(0);
        trainer.opt_g.load_state(t_g, tensors, "opt_g.");
        trainer.opt_d.load_state(t_d, tensors, "opt_d.");
        trainer.iteration = header.meta["iteration"].as_u64().unwrap_or(0);
        if let Ok(window) = serde_json::from_value(header.meta["window"].clone()) {
            trainer.window = window;
        }
        Ok(())
    }

    /// Split the trainer into its networks (used by single-image commands
    /// that only need the generator).
    pub fn into_parts(self) -> (Generator<f32>, Discriminator<f32>) {
        (self.generator, self.discriminator)
    }

    /// Run the generator over one batch (composited output), for sampling
    /// and evaluation hooks.
    pub fn infer_composited(&self, batch: &TrainBatch) -> Result<ImageBatch<f32>> {
        let i_in = make_input(&batch.gt, &batch.mask)?;
        let pred = self.generator.forward(self.exec, &i_in, &batch.mask)?;
        compose_output(&i_in, &pred, &batch.mask)
    }
}

/// Convenience used by tests: scalar-generic guidance pyramid from images.
pub fn guidance_from_images<F: Scalar>(
    out: &ImageBatch<F>,
    gt: &ImageBatch<F>,
    metric: crate::losses::DistanceMetric,
) -> Result<crate::losses::GuidancePyramid<F>> {
    let err = losses::error_map(out, gt, metric)?;
    losses::guidance_pyramid(losses::normalize_guidance(&err))
}
