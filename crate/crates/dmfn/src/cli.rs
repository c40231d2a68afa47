//! Operator entry points behind the `dmfn` binary: train, eval, inpaint,
//! inspect, ablate and synth-data.
//!
//! Exit codes: 0 success, 2 config/contract error, 3 data error, 4 numeric
//! failure (non-finite loss abort).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{self, BatchIterator, BatchSettings, Dataset, TrainBatch};
use crate::error::{Error, Result};
use crate::evaluator::{self, EvalModel, EvalOptions, LpipsAdapter};
use crate::generator::{AblationVariant, Dmfb, DmfbConfig, Generator};
use crate::kernels::Exec;
use crate::losses::{self, DistanceMetric};
use crate::masking::{self, MaskProtocol};
use crate::nn::param_count;
use crate::trainer::{StepLosses, Trainer, LOSS_CSV_HEADER};
use crate::types::{from_model_range, to_model_range, ImageBatch};
use crate::vgg::{average_feature_map, VggFeatures};

/// Train a model per the run configuration.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let out_dir = &cfg.paths.output_dir;
    fs::create_dir_all(out_dir)?;
    let hash = cfg.config_hash();
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    log::info!("run config hash {hash}");

    let ds = Dataset::open(cfg.train_dataset_spec())?;
    let settings = BatchSettings::from_config(
        &cfg.train,
        cfg.mask_protocol,
        cfg.paths.irregular_mask_dir.clone(),
    );
    let mut stream = BatchIterator::new(&ds, settings)?;

    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::load_checkpoint_with_config(path, cfg)?;
            log::info!("resumed from {} at iteration {}", path.display(), t.iteration());
            t
        }
        None => Trainer::new(cfg)?,
    };
    stream.skip_to(trainer.iteration());

    let csv_path = out_dir.join("losses.csv");
    let fresh = trainer.iteration() == 0 || !csv_path.exists();
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)?;
    if fresh {
        writeln!(csv, "{LOSS_CSV_HEADER}")?;
    }

    // Fixed probe batch for periodic sample grids.
    let probe = make_probe_batch(&ds, cfg)?;

    while trainer.iteration() < cfg.train.iterations {
        let batch = stream.next_batch()?;
        let losses = trainer.train_step(&batch)?;
        writeln!(csv, "{}", losses.csv_row())?;
        let it = losses.iteration;
        if it % cfg.logging.log_every == 0 || it == 1 {
            log_losses(&losses);
            csv.flush()?;
        }
        if it % cfg.logging.sample_every == 0 {
            emit_samples(&trainer, &probe, out_dir, it)?;
            if cfg.logging.debug_maps {
                emit_debug_maps(&trainer, &probe, cfg, out_dir, it)?;
            }
        }
        if it % cfg.logging.checkpoint_every == 0 || it == cfg.train.iterations {
            let path = out_dir.join(format!("checkpoint_{it:07}.ckpt"));
            trainer.save_checkpoint(&path)?;
            trainer.save_checkpoint(&out_dir.join("checkpoint_latest.ckpt"))?;
            log::info!("checkpoint written to {}", path.display());
        }
    }
    csv.flush()?;
    if !trainer.vgg_intact() {
        return Err(Error::Contract(
            "frozen VGG weights changed during training".into(),
        ));
    }
    trainer.save_checkpoint(&out_dir.join("checkpoint_latest.ckpt"))?;
    log::info!("training finished at iteration {}", trainer.iteration());
    Ok(())
}

fn log_losses(l: &StepLosses) {
    log::info!(
        "iter {:>6}  total {:.4}  mae {:.4}  sg {:.4}  fmv {:.4}  fmd {:.4}  adv_g {:.4}  adv_d {:.4}  align {:.4}",
        l.iteration, l.total, l.mae, l.self_guided, l.fm_vgg, l.fm_dis, l.adv_g, l.adv_d, l.align
    );
}

fn make_probe_batch(ds: &Dataset, cfg: &RunConfig) -> Result<TrainBatch> {
    let size = cfg.train.image_size;
    let n = 3.min(ds.len());
    let mut gt = ndarray::Array4::<f32>::zeros((n, 3, size, size));
    for slot in 0..n {
        let mut rng = crate::rng::rng_for(cfg.train.seed, "probe", slot as u64);
        let img = ds.load_sample::<f32>(slot, &mut rng)?;
        gt.index_axis_mut(ndarray::Axis(0), slot)
            .assign(&img.data().index_axis(ndarray::Axis(0), 0));
    }
    let gt = ImageBatch::new(gt, crate::types::RangeTag::ModelRange)?;
    let mut mask = ndarray::Array4::<u8>::zeros((n, 1, size, size));
    let mut boxes = Vec::new();
    for slot in 0..n {
        let (m, b) = masking::center_mask(size, cfg.train.max_hole)?;
        mask.index_axis_mut(ndarray::Axis(0), slot)
            .assign(&m.data().index_axis(ndarray::Axis(0), 0));
        boxes.push(b);
    }
    Ok(TrainBatch {
        gt,
        mask: crate::types::Mask::new(mask)?,
        boxes,
        indices: (0..n).collect(),
    })
}

fn emit_samples(trainer: &Trainer, probe: &TrainBatch, out_dir: &Path, it: u64) -> Result<()> {
    let i_in = masking::make_input(&probe.gt, &probe.mask)?;
    let i_out = trainer.infer_composited(probe)?;
    let mut rows = Vec::new();
    for s in 0..probe.gt.batch_size() {
        let take = |img: &ImageBatch<f32>| -> Result<ImageBatch<f32>> {
            let one = img.data().slice(ndarray::s![s..s + 1, .., .., ..]).to_owned();
            from_model_range(&ImageBatch::new_unchecked(one, crate::types::RangeTag::ModelRange))
        };
        rows.push((take(&i_in)?, take(&i_out)?, take(&probe.gt)?));
    }
    let path = out_dir.join(format!("samples_{it:07}.png"));
    evaluator::emit_grid(&rows, &path)
}

fn emit_debug_maps(
    trainer: &Trainer,
    probe: &TrainBatch,
    cfg: &RunConfig,
    out_dir: &Path,
    it: u64,
) -> Result<()> {
    let dir = out_dir.join("debug");
    fs::create_dir_all(&dir)?;
    let i_out = trainer.infer_composited(probe)?;
    let one = |img: &ImageBatch<f32>| {
        ImageBatch::new_unchecked(
            img.data().slice(ndarray::s![0..1, .., .., ..]).to_owned(),
            crate::types::RangeTag::ModelRange,
        )
    };
    let out0 = one(&i_out);
    let gt0 = one(&probe.gt);
    emit_guidance_and_features(
        trainer.vgg(),
        &out0,
        &gt0,
        cfg.loss.metric,
        &dir,
        &format!("{it:07}"),
    )
}

/// Shared by `--debug-maps` and `inspect`: write guidance maps M1/M2 and the
/// per-level average feature maps, each with a min/max sidecar JSON.
pub fn emit_guidance_and_features(
    vgg: &VggFeatures<f32>,
    out: &ImageBatch<f32>,
    gt: &ImageBatch<f32>,
    metric: DistanceMetric,
    dir: &Path,
    tag: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let err = losses::error_map(out, gt, metric)?;
    let guide = losses::guidance_pyramid(losses::normalize_guidance(&err))?;
    for (idx, level) in guide.levels().iter().enumerate() {
        let path = dir.join(format!("{tag}_guidance_m{}.png", idx + 1));
        data::save_gray_map(level, &path)?;
        write_minmax_sidecar(level, &path)?;
    }
    let pyr = vgg.extract_pyramid(Exec::default(), out)?;
    for level in 1..=5 {
        let avg = average_feature_map(&pyr, level)?;
        let (lo, hi) = min_max(&avg);
        let denom = if hi > lo { hi - lo } else { 1.0 };
        let norm = avg.mapv(|v| (v - lo) / denom);
        let path = dir.join(format!("{tag}_avg_feature_l{level}.png"));
        data::save_gray_map(&norm, &path)?;
        write_minmax_values(lo, hi, &path)?;
    }
    Ok(())
}

fn min_max(a: &ndarray::Array4<f32>) -> (f32, f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in a.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn write_minmax_sidecar(map: &ndarray::Array4<f32>, png_path: &Path) -> Result<()> {
    let (lo, hi) = min_max(map);
    write_minmax_values(lo, hi, png_path)
}

fn write_minmax_values(lo: f32, hi: f32, png_path: &Path) -> Result<()> {
    let sidecar = png_path.with_extension("json");
    fs::write(
        sidecar,
        serde_json::to_string_pretty(&serde_json::json!({"min": lo, "max": hi}))?,
    )?;
    Ok(())
}

/// Evaluate a checkpoint over the validation split.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    protocol: Option<MaskProtocol>,
    out_dir: Option<&Path>,
) -> Result<()> {
    let trainer = Trainer::load_checkpoint_with_config(checkpoint, cfg)?;
    let ds = Dataset::open(cfg.val_dataset_spec())?;
    let protocol = protocol.unwrap_or(cfg.eval.protocol);
    let opts = EvalOptions {
        seed: cfg.train.seed,
        max_hole: cfg.train.max_hole,
        irregular_dir: cfg.paths.irregular_mask_dir.clone(),
        limit: cfg.eval.num_images,
        lpips: LpipsAdapter::new(cfg.lpips_cmd()),
        hole_only: cfg.eval.hole_only,
        exec: Exec::default(),
        config_hash: cfg.config_hash(),
        keep_samples: 4,
    };
    let model = EvalModel::Net(trainer.generator());
    let report = evaluator::evaluate_dataset(&model, &ds, protocol, &opts)?;
    let dir = out_dir.unwrap_or(&cfg.paths.output_dir).to_path_buf();
    fs::create_dir_all(&dir)?;
    report.write_csv(&dir.join("report.csv"))?;
    report.write_json(&dir.join("report.json"))?;
    if !report.samples.is_empty() {
        evaluator::emit_grid(&report.samples, &dir.join("report_grid.png"))?;
    }
    log::info!(
        "eval: mean PSNR {:.3} dB, mean SSIM {:.4}, LPIPS {}",
        report.mean_psnr,
        report.mean_ssim,
        report
            .mean_lpips
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "absent".into())
    );
    println!(
        "psnr {:.4} ssim {:.4} lpips {}",
        report.mean_psnr,
        report.mean_ssim,
        report
            .mean_lpips
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "absent".into())
    );
    Ok(())
}

fn load_generator(checkpoint: &Path) -> Result<(Generator<f32>, RunConfig)> {
    let trainer = Trainer::load_checkpoint(checkpoint)?;
    let cfg = trainer.config().clone();
    let (g, _) = trainer.into_parts();
    Ok((g, cfg))
}

/// Fill the holes of one image and write the composited PNG.
pub fn cmd_inpaint(
    checkpoint: &Path,
    image_path: &Path,
    mask_path: &Path,
    out_path: &Path,
) -> Result<()> {
    let (generator, _) = load_generator(checkpoint)?;
    let unit = data::load_unit_image(image_path)?;
    let gt = to_model_range(&unit)?;
    let mask = masking::load_mask_exact(mask_path)?;
    if (mask.height(), mask.width()) != (gt.height(), gt.width()) {
        return Err(Error::contract(format!(
            "image {}x{} and mask {}x{} sizes differ",
            gt.height(),
            gt.width(),
            mask.height(),
            mask.width()
        )));
    }
    let i_in = masking::make_input(&gt, &mask)?;
    let pred = generator.forward(Exec::default(), &i_in, &mask)?;
    let i_out = masking::compose_output(&i_in, &pred, &mask)?;
    data::save_unit_image(&from_model_range(&i_out)?, out_path)?;
    log::info!("wrote {}", out_path.display());
    Ok(())
}

/// Emit guidance maps and average VGG feature maps for one image.
pub fn cmd_inspect(
    cfg: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    mask_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    let trainer = Trainer::load_checkpoint_with_config(checkpoint, cfg)?;
    let unit = data::load_unit_image(image_path)?;
    let gt = to_model_range(&unit)?;
    let mask = masking::load_mask_exact(mask_path)?;
    if (mask.height(), mask.width()) != (gt.height(), gt.width()) {
        return Err(Error::contract("image / mask size mismatch"));
    }
    let i_in = masking::make_input(&gt, &mask)?;
    let pred = trainer.generator().forward(Exec::default(), &i_in, &mask)?;
    let i_out = masking::compose_output(&i_in, &pred, &mask)?;
    emit_guidance_and_features(trainer.vgg(), &i_out, &gt, cfg.loss.metric, out_dir, "inspect")?;
    data::save_unit_image(&from_model_range(&i_out)?, &out_dir.join("inspect_output.png"))?;
    log::info!("inspection maps written to {}", out_dir.display());
    Ok(())
}

/// Print the structural-ablation parameter-count table.
pub fn cmd_ablate(narrow_rate: bool) -> Result<()> {
    let cfg = DmfbConfig::default();
    let variants = [
        AblationVariant::RateK {
            rate: 2,
            wide: !narrow_rate,
        },
        AblationVariant::RateK {
            rate: 8,
            wide: !narrow_rate,
        },
        AblationVariant::NoCombination,
        AblationVariant::NoKi,
        AblationVariant::FullDmfb,
    ];
    println!("{:<20} {:>12}", "Model", "Params");
    for v in &variants {
        let block: Dmfb<f32> = Dmfb::new(&cfg, v, 0)?;
        println!("{:<20} {:>12}", v.label(), block.param_count());
    }
    let gen_cfg = crate::generator::GeneratorConfig::default();
    let generator: Generator<f32> = Generator::new(&gen_cfg, &AblationVariant::FullDmfb, 0)?;
    println!(
        "{:<20} {:>12}",
        "generator (full)",
        param_count(&generator)
    );
    Ok(())
}

/// Generate the procedural PNG corpus.
pub fn cmd_synth_data(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    data::generate_synthetic_corpus(out, count, size, seed)?;
    log::info!("wrote {count} synthetic images to {}", out.display());
    Ok(())
}
