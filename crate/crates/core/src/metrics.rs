//! Background-consistency and attention-quality metrics.
//!
//! PSNR and SSIM are computed in the 8-bit domain (peak 255) between the
//! original and generated images after zeroing object pixels in both with
//! `(1 − m)`. IoU compares a thresholded attention map with a mask.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::codec::unit_to_byte;
use crate::data::{augment_with, DatasetManifest, Domain, Sample, Split};
use crate::error::{Error, Result};
use crate::networks::{Direction, ForcedAttention, ModelBundle};
use crate::tensor::Tensor;

/// Returned by [`psnr_background`] when the two images agree exactly.
pub const PSNR_INFINITE: f64 = f64::INFINITY;
/// Value `PSNR_INFINITE` is replaced with in aggregates.
pub const PSNR_CLAMP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// A `C×H×W` image with values `0..=255`.
pub fn to_byte_domain(image: &Tensor<f32>) -> Tensor<f64> {
    image.map(|v| unit_to_byte(v) as f32).cast()
}

fn check_triple(a: &Tensor<f64>, b: &Tensor<f64>, mask: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 3 || s != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "metric images",
            lhs: s.to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if mask.shape() != [1, s[1], s[2]] {
        return Err(Error::ShapeMismatch {
            op: "metric mask",
            lhs: mask.shape().to_vec(),
            rhs: vec![1, s[1], s[2]],
        });
    }
    Ok((s[0], s[1], s[2]))
}

/// `x ⊙ (1 − m)` with the mask broadcast over channels.
fn zero_objects(t: &Tensor<f64>, mask: &Tensor<f32>) -> Vec<f64> {
    let plane = mask.numel();
    let m = mask.data();
    t.data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1.0 - m[i % plane] as f64))
        .collect()
}

/// Background PSNR in dB. Object pixels are zeroed in both images and still
/// count in the mean, so the error is averaged over all `C·H·W` values.
pub fn psnr_background(original: &Tensor<f64>, generated: &Tensor<f64>, mask: &Tensor<f32>) -> Result<f64> {
    check_triple(original, generated, mask)?;
    let (a, b) = (zero_objects(original, mask), zero_objects(generated, mask));
    let sse: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(psnr_from_mse(sse / a.len() as f64))
}

/// Diagnostic variant averaging the squared error over background values
/// only. An all-object mask gives [`PSNR_INFINITE`].
pub fn psnr_background_only(original: &Tensor<f64>, generated: &Tensor<f64>, mask: &Tensor<f32>) -> Result<f64> {
    let (c, ..) = check_triple(original, generated, mask)?;
    let (a, b) = (zero_objects(original, mask), zero_objects(generated, mask));
    let sse: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    let count = mask.data().iter().filter(|&&m| m < 0.5).count() * c;
    if count == 0 {
        return Ok(PSNR_INFINITE);
    }
    Ok(psnr_from_mse(sse / count as f64))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_INFINITE
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Weighted window means over every fully contained window position.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `C×H×W` byte-domain images (per-channel means averaged).
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let s = a.shape();
    if s.len() != 3 || s != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: s.to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim: image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_taps();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * plane..(ch + 1) * plane];
        let y = &b.data()[ch * plane..(ch + 1) * plane];
        let prod = |f: &dyn Fn(usize) -> f64| (0..plane).map(f).collect::<Vec<f64>>();
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let mxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &taps);
        let myy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &taps);
        let mxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// SSIM between the object-zeroed original and generated images.
pub fn ssim_background(original: &Tensor<f64>, generated: &Tensor<f64>, mask: &Tensor<f32>) -> Result<f64> {
    let (c, h, w) = check_triple(original, generated, mask)?;
    let a = Tensor::new([c, h, w], zero_objects(original, mask))?;
    let b = Tensor::new([c, h, w], zero_objects(generated, mask))?;
    ssim(&a, &b)
}

/// `|A ∩ M| / |A ∪ M|` with `A = {map ≥ threshold}`; 1 when both are empty.
pub fn attention_iou(map: &Tensor<f32>, mask: &Tensor<f32>, threshold: f32) -> Result<f64> {
    if map.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention_iou",
            lhs: map.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &m) in map.data().iter().zip(mask.data()) {
        let (a, b) = (p >= threshold, m >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr_bg: Option<f64>,
    pub ssim_bg: Option<f64>,
    pub attn_iou: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

/// Mean and median; infinite PSNR values count as [`PSNR_CLAMP_DB`].
pub fn aggregate(values: impl IntoIterator<Item = f64>) -> Option<Aggregate> {
    let mut v: Vec<f64> = values.into_iter().map(|x| x.min(PSNR_CLAMP_DB)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    Some(Aggregate {
        mean: v.iter().sum::<f64>() / n as f64,
        median,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub direction: Direction,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn has_masks(&self) -> bool {
        self.rows.first().is_some_and(|r| r.psnr_bg.is_some())
    }

    pub fn psnr(&self) -> Option<Aggregate> {
        aggregate(self.rows.iter().filter_map(|r| r.psnr_bg))
    }

    pub fn ssim(&self) -> Option<Aggregate> {
        aggregate(self.rows.iter().filter_map(|r| r.ssim_bg))
    }

    pub fn iou(&self) -> Option<Aggregate> {
        aggregate(self.rows.iter().filter_map(|r| r.attn_iou))
    }

    /// Header `id,psnr_bg,ssim_bg,attn_iou`; without masks only `id`.
    /// Exact PSNR matches are written as `inf`.
    pub fn to_csv(&self) -> String {
        let masks = self.has_masks();
        let mut out = String::from(if masks { "id,psnr_bg,ssim_bg,attn_iou\n" } else { "id\n" });
        for r in &self.rows {
            out.push_str(&r.id);
            if masks {
                let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                let _ = write!(out, ",{},{},{}", f(r.psnr_bg), f(r.ssim_bg), f(r.attn_iou));
            }
            out.push('\n');
        }
        out
    }

    /// Markdown summary table with mean and median per metric.
    pub fn to_markdown(&self) -> String {
        let cell = |a: Option<Aggregate>, digits: usize| match a {
            Some(a) => (format!("{:.*}", digits, a.mean), format!("{:.*}", digits, a.median)),
            None => ("n/a".into(), "n/a".into()),
        };
        let (pm, pd) = cell(self.psnr(), 4);
        let (sm, sd) = cell(self.ssim(), 4);
        let (im, id) = cell(self.iou(), 4);
        format!(
            "| direction | samples | PSNR mean (dB) | PSNR median (dB) | SSIM mean | SSIM median | IoU mean | IoU median |\n\
             |---|---|---|---|---|---|---|---|\n\
             | {} | {} | {pm} | {pd} | {sm} | {sd} | {im} | {id} |\n",
            self.direction,
            self.rows.len()
        )
    }

    pub fn write(&self, csv: &Path, markdown: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(markdown, self.to_markdown()).map_err(|e| Error::io(markdown, e))
    }
}

/// Translates every test image of the source domain and scores it against
/// its mask. Without a mask for every test image the metric columns are
/// left empty and a notice is logged.
pub fn evaluate_testset(
    bundle: &ModelBundle,
    manifest: &DatasetManifest,
    direction: Direction,
    forced: Option<ForcedAttention>,
) -> Result<EvalReport> {
    let domain = match direction {
        Direction::XtoY => Domain::X,
        Direction::YtoX => Domain::Y,
    };
    let paths = manifest.images(Split::Test, domain);
    if paths.is_empty() {
        return Err(Error::invalid(format!("no test images for {direction}")));
    }
    let masked = paths.iter().all(|p| manifest.mask_for(domain, p).is_some());
    if !masked {
        log::warn!("test masks missing for {direction}: PSNR, SSIM and IoU skipped");
    }
    let mut rows = Vec::with_capacity(paths.len());
    for p in paths {
        let raw = Sample::load(p, if masked { manifest.mask_for(domain, p) } else { None }, domain)?;
        let s = augment_with(&raw, None, bundle.image_size)?;
        let tr = bundle.translate(direction, &s.image, forced)?;
        let mut row = EvalRow {
            id: s.id(),
            psnr_bg: None,
            ssim_bg: None,
            attn_iou: None,
        };
        if let Some(mask) = &s.mask {
            let (orig, gen) = (to_byte_domain(&s.image), to_byte_domain(&tr.output));
            row.psnr_bg = Some(psnr_background(&orig, &gen, mask)?);
            row.ssim_bg = Some(ssim_background(&orig, &gen, mask)?);
            row.attn_iou = Some(attention_iou(&tr.attention, mask, 0.5)?);
        }
        rows.push(row);
    }
    Ok(EvalReport { direction, rows })
}
