//! Quality metrics (PSNR, SSIM, LPIPS adapter), dataset evaluation under a
//! mask protocol, and comparison-grid emission.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::Serialize;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::kernels::Exec;
use crate::masking::{self, MaskProtocol};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::types::{from_model_range, ImageBatch, RangeTag};

/// PSNR in dB per sample. Identical images have infinite PSNR; those are
/// reported capped at 99 dB with the flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsnrValue {
    pub db: f64,
    pub infinite: bool,
}

pub const PSNR_CAP_DB: f64 = 99.0;

/// Full-frame PSNR with MAX = 1 (unit range).
pub fn psnr<F: Scalar>(a: &ImageBatch<F>, b: &ImageBatch<F>) -> Result<Vec<PsnrValue>> {
    a.expect_range(RangeTag::UnitRange)?;
    b.expect_range(RangeTag::UnitRange)?;
    if a.data().dim() != b.data().dim() {
        return Err(Error::contract("psnr shape mismatch"));
    }
    let n = a.batch_size();
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let pa = a.data().index_axis(Axis(0), ni);
        let pb = b.data().index_axis(Axis(0), ni);
        let mut mse = 0.0f64;
        for (&x, &y) in pa.iter().zip(pb.iter()) {
            let d = x.to_f64() - y.to_f64();
            mse += d * d;
        }
        mse /= pa.len() as f64;
        if mse == 0.0 {
            out.push(PsnrValue {
                db: PSNR_CAP_DB,
                infinite: true,
            });
        } else {
            out.push(PsnrValue {
                db: 10.0 * (1.0 / mse).log10(),
                infinite: false,
            });
        }
    }
    Ok(out)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable 'valid' Gaussian filter.
fn filter_valid(plane: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    assert!(h >= SSIM_WINDOW && w >= SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, w - SSIM_WINDOW + 1));
    for i in 0..h {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += plane[[i, j + t]] * kv;
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for i in 0..h - SSIM_WINDOW + 1 {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += rows[[i + t, j]] * kv;
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, L = 1, averaged over valid windows and channels.
pub fn ssim<F: Scalar>(a: &ImageBatch<F>, b: &ImageBatch<F>) -> Result<Vec<f64>> {
    a.expect_range(RangeTag::UnitRange)?;
    b.expect_range(RangeTag::UnitRange)?;
    if a.data().dim() != b.data().dim() {
        return Err(Error::contract("ssim shape mismatch"));
    }
    let (n, c, h, w) = a.data().dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut acc = 0.0;
        for ci in 0..c {
            let x = a
                .data()
                .index_axis(Axis(0), ni)
                .index_axis(Axis(0), ci)
                .mapv(|v| v.to_f64());
            let y = b
                .data()
                .index_axis(Axis(0), ni)
                .index_axis(Axis(0), ci)
                .mapv(|v| v.to_f64());
            let mu_x = filter_valid(&x, &k);
            let mu_y = filter_valid(&y, &k);
            let xx = filter_valid(&(&x * &x), &k);
            let yy = filter_valid(&(&y * &y), &k);
            let xy = filter_valid(&(&x * &y), &k);
            let mut total = 0.0;
            for ((&mx, &my), ((&sxx, &syy), &sxy)) in mu_x
                .iter()
                .zip(mu_y.iter())
                .zip(xx.iter().zip(yy.iter()).zip(xy.iter()))
            {
                let var_x = sxx - mx * mx;
                let var_y = syy - my * my;
                let cov = sxy - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
                total += num / den;
            }
            acc += total / mu_x.len() as f64;
        }
        out.push(acc / c as f64);
    }
    Ok(out)
}

/// External LPIPS backend: a command that takes two PNG paths and prints a
/// float. Absent backend means absent metric, never zero.
#[derive(Debug, Clone, Default)]
pub struct LpipsAdapter {
    cmd: Option<String>,
}

impl LpipsAdapter {
    pub fn new(cmd: Option<String>) -> Self {
        Self { cmd }
    }

    pub fn available(&self) -> bool {
        self.cmd.is_some()
    }

    /// Score one pair of PNG files; `None` when unavailable or on backend
    /// failure (with a logged warning).
    pub fn eval_pair(&self, a: &Path, b: &Path) -> Option<f64> {
        let cmd = self.cmd.as_ref()?;
        let mut parts = cmd.split_whitespace();
        let program = parts.next()?;
        let output = Command::new(program)
            .args(parts)
            .arg(a)
            .arg(b)
            .output()
            .map_err(|e| log::warn!("lpips backend failed to start: {e}"))
            .ok()?;
        if !output.status.success() {
            log::warn!("lpips backend exited with {:?}", output.status.code());
            return None;
        }
        let text = String::from_utf8_lossy(&output.stdout);
        match text.trim().parse::<f64>() {
            Ok(v) => Some(v),
            Err(_) => {
                log::warn!("lpips backend printed non-numeric output: {text:?}");
                None
            }
        }
    }
}

/// Model under evaluation; the oracles exist for metric sanity checks.
pub enum EvalModel<'a> {
    Net(&'a Generator<f32>),
    /// Perfect oracle: predicts the ground truth.
    Identity,
    /// Baseline: predicts the masked input unchanged.
    CopyInput,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub seed: u64,
    pub max_hole: usize,
    pub irregular_dir: Option<PathBuf>,
    pub limit: Option<usize>,
    pub lpips: LpipsAdapter,
    /// Metrics over the hole bounding box only, instead of the full frame.
    pub hole_only: bool,
    pub exec: Exec,
    pub config_hash: String,
    /// Keep the first k (input, output, gt) triplets for grid emission.
    pub keep_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_hole: 128,
            irregular_dir: None,
            limit: None,
            lpips: LpipsAdapter::default(),
            hole_only: false,
            exec: Exec::default(),
            config_hash: String::new(),
            keep_samples: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_lpips: Option<f64>,
    /// Composited outputs matched the input bit-exactly outside every mask.
    pub known_region_exact: bool,
    pub config_hash: String,
    pub protocol: MaskProtocol,
    #[serde(skip)]
    pub samples: Vec<(ImageBatch<f32>, ImageBatch<f32>, ImageBatch<f32>)>,
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "id,psnr_db,psnr_infinite,ssim,lpips,config_hash")?;
        for r in &self.rows {
            let lp = r
                .lpips
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "absent".to_string());
            writeln!(
                f,
                "{},{:.6},{},{:.6},{},{}",
                r.id, r.psnr_db, r.psnr_infinite, r.ssim, lp, self.config_hash
            )?;
        }
        writeln!(
            f,
            "mean,{:.6},,{:.6},{},{}",
            self.mean_psnr,
            self.mean_ssim,
            self.mean_lpips
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "absent".to_string()),
            self.config_hash
        )?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

fn crop_to_box<F: Scalar>(img: &ImageBatch<F>, b: &masking::HoleBox) -> ImageBatch<F> {
    let data = img
        .data()
        .slice(ndarray::s![
            ..,
            ..,
            b.top..b.top + b.height,
            b.left..b.left + b.width
        ])
        .to_owned();
    ImageBatch::new_unchecked(data, img.range())
}

/// Run the model over the dataset under a mask protocol and collect metrics.
pub fn evaluate_dataset(
    model: &EvalModel<'_>,
    ds: &Dataset,
    protocol: MaskProtocol,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let n = opts.limit.unwrap_or(ds.len()).min(ds.len());
    if n == 0 {
        return Err(Error::data("empty evaluation split"));
    }
    let size = ds.spec().target_size;
    let irregular_files: Vec<PathBuf> = match (protocol, &opts.irregular_dir) {
        (MaskProtocol::Irregular, Some(dir)) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::data("no irregular mask files"));
            }
            files
        }
        (MaskProtocol::Irregular, None) => {
            return Err(Error::config("irregular protocol needs a mask directory"))
        }
        _ => Vec::new(),
    };

    let tmp = tempfile::tempdir()?;
    let mut rows = Vec::with_capacity(n);
    let mut samples = Vec::new();
    let mut known_exact = true;
    for idx in 0..n {
        let mut crop_rng = rng_for(opts.seed, "evalcrop", idx as u64);
        let gt: ImageBatch<f32> = ds.load_sample(idx, &mut crop_rng)?;
        let mut mask_rng = rng_for(opts.seed, "evalmask", idx as u64);
        let (mask, hole_box) = match protocol {
            MaskProtocol::Center => masking::center_mask(size, opts.max_hole)?,
            MaskProtocol::Random => {
                masking::random_regular_mask(size, opts.max_hole, &mut mask_rng)
            }
            MaskProtocol::Irregular => {
                let file = &irregular_files[mask_rng.gen_range(0..irregular_files.len())];
                let m = masking::load_irregular_mask(file, size, &mut mask_rng)?;
                let b = masking::local_patch_box(&m, opts.max_hole)?[0];
                (m, b)
            }
        };
        let i_in = masking::make_input(&gt, &mask)?;
        let pred = match model {
            EvalModel::Net(g) => g.forward(opts.exec, &i_in, &mask)?,
            EvalModel::Identity => gt.clone(),
            EvalModel::CopyInput => i_in.clone(),
        };
        let i_out = masking::compose_output(&i_in, &pred, &mask)?;

        // Known-region fidelity: outside the mask, output == input, bitwise.
        for ((ni, ci, i, j), &v) in i_out.data().indexed_iter() {
            if mask.data()[[ni, 0, i, j]] == 0 && v != i_in.data()[[ni, ci, i, j]] {
                known_exact = false;
                break;
            }
        }

        let gt_unit = from_model_range(&gt)?;
        let out_unit = from_model_range(&i_out)?;
        let (m_gt, m_out) = if opts.hole_only {
            (crop_to_box(&gt_unit, &hole_box), crop_to_box(&out_unit, &hole_box))
        } else {
            (gt_unit.clone(), out_unit.clone())
        };
        let p = psnr(&m_out, &m_gt)?[0];
        let s = ssim(&m_out, &m_gt)?[0];
        let lpips = if opts.lpips.available() {
            let a_path = tmp.path().join(format!("a_{idx}.png"));
            let b_path = tmp.path().join(format!("b_{idx}.png"));
            data::save_unit_image(&out_unit, &a_path)?;
            data::save_unit_image(&gt_unit, &b_path)?;
            opts.lpips.eval_pair(&a_path, &b_path)
        } else {
            None
        };
        let id = ds.files()[idx]
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| idx.to_string());
        rows.push(EvalRow {
            id,
            psnr_db: p.db,
            psnr_infinite: p.infinite,
            ssim: s,
            lpips,
        });
        if samples.len() < opts.keep_samples {
            let in_unit = from_model_range(&i_in)?;
            samples.push((in_unit, out_unit, gt_unit));
        }
    }

    let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / rows.len() as f64;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
    let lpips_vals: Vec<f64> = rows.iter().filter_map(|r| r.lpips).collect();
    let mean_lpips = if lpips_vals.len() == rows.len() && !lpips_vals.is_empty() {
        Some(lpips_vals.iter().sum::<f64>() / lpips_vals.len() as f64)
    } else {
        None
    };
    Ok(EvalReport {
        rows,
        mean_psnr,
        mean_ssim,
        mean_lpips,
        known_region_exact: known_exact,
        config_hash: opts.config_hash.clone(),
        protocol,
        samples,
    })
}

/// Write (input | output | gt) triplets as one PNG grid: each row is a
/// horizontal triplet, rows stack vertically.
pub fn emit_grid(
    rows: &[(ImageBatch<f32>, ImageBatch<f32>, ImageBatch<f32>)],
    path: &Path,
) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::contract("emit_grid needs at least one triplet"));
    }
    let (_, _, h, w) = rows[0].0.data().dim();
    for (a, b, c) in rows {
        for img in [a, b, c] {
            img.expect_range(RangeTag::UnitRange)?;
            if img.data().dim() != (1, 3, h, w) {
                return Err(Error::contract("grid triplets must share one size"));
            }
        }
    }
    let grid_w = 3 * w;
    let grid_h = rows.len() * h;
    let mut grid = Array4::<f32>::zeros((1, 3, grid_h, grid_w));
    for (r, (a, b, c)) in rows.iter().enumerate() {
        for (k, img) in [a, b, c].into_iter().enumerate() {
            grid.slice_mut(ndarray::s![.., .., r * h..(r + 1) * h, k * w..(k + 1) * w])
                .assign(img.data());
        }
    }
    let grid = ImageBatch::new_unchecked(grid, RangeTag::UnitRange);
    data::save_unit_image(&grid, path)
}
