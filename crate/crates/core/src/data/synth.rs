//! Procedural two-domain shapes dataset.
//!
//! Both domains share one background distribution (smooth value noise).
//! Objects are rotated ellipses: solid-filled in X, filled with axis-aligned
//! black/white stripes in Y. Masks are the exact rasterized object region.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Prng};
use crate::tensor::Tensor;

use super::{encode_image, encode_mask, mask_dir, split_dir, DatasetManifest, Domain, Split};

/// Rejection-sampling budget per image.
const MAX_LAYOUT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Ellipse semi-axis range as a fraction of `image_size`.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Full stripe period in pixels (one dark plus one light band).
    pub stripe_period: usize,
    /// Value-noise grid cells per side.
    pub bg_cells: usize,
    /// Peak deviation of the noise around the background base color.
    pub bg_amplitude: f64,
    /// Per-channel range of the background base color, intensities in [0, 1].
    pub bg_min: [f64; 3],
    pub bg_max: [f64; 3],
    /// Per-channel range of the domain X fill color.
    pub fill_min: [f64; 3],
    pub fill_max: [f64; 3],
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            shapes_min: 1,
            shapes_max: 2,
            radius_min: 0.15,
            radius_max: 0.3,
            stripe_period: 4,
            bg_cells: 4,
            bg_amplitude: 0.15,
            bg_min: [0.25, 0.35, 0.15],
            bg_max: [0.5, 0.6, 0.35],
            fill_min: [0.65, 0.3, 0.05],
            fill_max: [0.95, 0.5, 0.2],
            coverage_min: 0.05,
            coverage_max: 0.45,
            train_count: 400,
            test_count: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size < 4 {
            return bad("image_size must be at least 4");
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return bad("need 1 <= shapes_min <= shapes_max");
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max && self.radius_max <= 1.0) {
            return bad("need 0 < radius_min <= radius_max <= 1");
        }
        if self.stripe_period < 2 {
            return bad("stripe_period must be at least 2");
        }
        if self.bg_cells == 0 {
            return bad("bg_cells must be positive");
        }
        if !(0.0 <= self.coverage_min && self.coverage_min < self.coverage_max && self.coverage_max <= 1.0) {
            return bad("need 0 <= coverage_min < coverage_max <= 1");
        }
        let unit = |v: &[f64; 3]| v.iter().all(|c| (0.0..=1.0).contains(c));
        let ordered = |lo: &[f64; 3], hi: &[f64; 3]| lo.iter().zip(hi).all(|(a, b)| a <= b);
        if !(unit(&self.bg_min) && unit(&self.bg_max) && unit(&self.fill_min) && unit(&self.fill_max)) {
            return bad("color ranges must lie in [0, 1]");
        }
        if !(ordered(&self.bg_min, &self.bg_max) && ordered(&self.fill_min, &self.fill_max)) {
            return bad("color range minimum exceeds maximum");
        }
        if !(0.0..=1.0).contains(&self.bg_amplitude) {
            return bad("bg_amplitude must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        u * u + v * v <= 1.0
    }
}

/// One rendered sample: `3×H×W` image in `[-1, 1]` and `1×H×W` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

fn value_noise(cfg: &SynthConfig, rng: &mut Prng) -> Vec<f64> {
    let (n, g) = (cfg.image_size, cfg.bg_cells + 1);
    let grid: Vec<f64> = (0..g * g).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let fy = (i as f64 + 0.5) / n as f64 * cfg.bg_cells as f64;
            let fx = (j as f64 + 0.5) / n as f64 * cfg.bg_cells as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (smooth(fy - y0 as f64), smooth(fx - x0 as f64));
            let at = |y: usize, x: usize| grid[y * g + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn layout(cfg: &SynthConfig, rng: &mut Prng) -> Result<(Vec<Ellipse>, Vec<Option<usize>>)> {
    let n = cfg.image_size;
    let size = n as f64;
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let count = cfg.shapes_min + rng.below(cfg.shapes_max - cfg.shapes_min + 1);
        let shapes: Vec<Ellipse> = (0..count)
            .map(|_| {
                let angle = rng.uniform(0.0, std::f64::consts::PI);
                Ellipse {
                    cy: rng.uniform(0.2, 0.8) * size,
                    cx: rng.uniform(0.2, 0.8) * size,
                    ry: rng.uniform(cfg.radius_min, cfg.radius_max + f64::EPSILON) * size,
                    rx: rng.uniform(cfg.radius_min, cfg.radius_max + f64::EPSILON) * size,
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            })
            .collect();
        // Later shapes are drawn on top.
        let owner: Vec<Option<usize>> = (0..n * n)
            .map(|p| {
                let (y, x) = ((p / n) as f64 + 0.5, (p % n) as f64 + 0.5);
                (0..count).rev().find(|&k| shapes[k].contains(y, x))
            })
            .collect();
        let coverage = owner.iter().filter(|o| o.is_some()).count() as f64 / (n * n) as f64;
        if (cfg.coverage_min..=cfg.coverage_max).contains(&coverage) {
            return Ok((shapes, owner));
        }
    }
    Err(Error::Config(format!(
        "no layout within coverage [{}, {}] after {MAX_LAYOUT_ATTEMPTS} attempts",
        cfg.coverage_min, cfg.coverage_max
    )))
}

/// Renders one sample from its own random stream.
pub fn render(cfg: &SynthConfig, domain: Domain, rng: &mut Prng) -> Result<SynthSample> {
    let n = cfg.image_size;
    let base: Vec<f64> = (0..3).map(|c| rng.uniform(cfg.bg_min[c], cfg.bg_max[c] + f64::EPSILON)).collect();
    let noise = value_noise(cfg, rng);
    let (shapes, owner) = layout(cfg, rng)?;
    // Per-shape texture: a fill color in X, stripe axis and phase in Y.
    let textures: Vec<([f64; 3], bool, usize)> = shapes
        .iter()
        .map(|_| {
            let fill = std::array::from_fn(|c| rng.uniform(cfg.fill_min[c], cfg.fill_max[c] + f64::EPSILON));
            (fill, rng.coin(), rng.below(cfg.stripe_period))
        })
        .collect();
    let half = cfg.stripe_period / 2;
    let mut image = vec![0f32; 3 * n * n];
    for p in 0..n * n {
        let (y, x) = (p / n, p % n);
        for c in 0..3 {
            let v = match owner[p] {
                None => base[c] + cfg.bg_amplitude * noise[p],
                Some(k) => {
                    let (fill, vertical, phase) = textures[k];
                    match domain {
                        Domain::X => fill[c],
                        Domain::Y => {
                            let coord = if vertical { x } else { y };
                            if ((coord + phase) / half.max(1)).is_multiple_of(2) {
                                0.95
                            } else {
                                0.05
                            }
                        }
                    }
                }
            };
            image[c * n * n + p] = (2.0 * v.clamp(0.0, 1.0) - 1.0) as f32;
        }
    }
    let mask = owner.iter().map(|o| if o.is_some() { 1.0 } else { 0.0 }).collect();
    Ok(SynthSample {
        image: Tensor::new([3, n, n], image)?,
        mask: Tensor::new([1, n, n], mask)?,
    })
}

/// Random stream of one file, independent of generation order.
pub fn sample_rng(seed: u64, domain: Domain, split: Split, index: usize) -> Prng {
    let d = matches!(domain, Domain::Y) as u64;
    let s = matches!(split, Split::Test) as u64;
    Prng::new(seed, (stream::SYNTH << 40) | (d << 33) | (s << 32) | index as u64)
}

/// Writes `trainA`, `trainB`, `testA`, `testB`, `masksA`, `masksB` under
/// `root` (files `train_0000.png`, `test_0000.png`, ...) and returns the
/// resulting manifest.
pub fn synth_generate(cfg: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for domain in [Domain::X, Domain::Y] {
        let md = mask_dir(root, domain);
        std::fs::create_dir_all(&md).map_err(|e| Error::io(&md, e))?;
        for (split, count) in [(Split::Train, cfg.train_count), (Split::Test, cfg.test_count)] {
            let dir = split_dir(root, split, domain);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..count {
                let mut rng = sample_rng(cfg.seed, domain, split, i);
                let s = render(cfg, domain, &mut rng)?;
                let name = format!("{}_{i:04}.png", split.prefix());
                encode_image(&s.image, &dir.join(&name))?;
                encode_mask(&s.mask, &md.join(&name))?;
            }
        }
    }
    DatasetManifest::load(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_count: 10,
            test_count: 10,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_per_split() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&small(), dir.path()).unwrap();
        assert_eq!(
            [m.train_a.len(), m.train_b.len(), m.test_a.len(), m.test_b.len()],
            [10; 4]
        );
        assert_eq!(m.masks_a.as_ref().unwrap().len(), 20);
        assert_eq!(m.masks_b.as_ref().unwrap().len(), 20);
        assert!(m.fully_masked(Split::Train) && m.fully_masked(Split::Test));
    }

    #[test]
    fn coverage_within_window() {
        let cfg = SynthConfig::default();
        for i in 0..200 {
            let domain = if i % 2 == 0 { Domain::X } else { Domain::Y };
            let s = render(&cfg, domain, &mut sample_rng(9, domain, Split::Train, i)).unwrap();
            let cov = s.mask.data().iter().sum::<f32>() as f64 / 1024.0;
            assert!((0.05..=0.45).contains(&cov), "coverage {cov}");
        }
    }

    #[test]
    fn same_seed_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_generate(&small(), a.path()).unwrap();
        synth_generate(&small(), b.path()).unwrap();
        for sub in ["trainA", "trainB", "testA", "testB", "masksA", "masksB"] {
            for entry in std::fs::read_dir(a.path().join(sub)).unwrap() {
                let p = entry.unwrap().path();
                let q = b.path().join(sub).join(p.file_name().unwrap());
                assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
            }
        }
    }

    #[test]
    fn domains_differ_only_inside_objects() {
        let cfg = SynthConfig::default();
        let x = render(&cfg, Domain::X, &mut Prng::new(5, 77)).unwrap();
        let y = render(&cfg, Domain::Y, &mut Prng::new(5, 77)).unwrap();
        assert_eq!(x.mask, y.mask);
        let m = x.mask.data();
        for (i, (a, b)) in x.image.data().iter().zip(y.image.data()).enumerate() {
            if m[i % 1024] == 0.0 {
                assert_eq!(a, b);
            }
        }
        let stripe_values: Vec<f32> = y
            .image
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| m[i % 1024] == 1.0)
            .map(|(_, v)| *v)
            .collect();
        assert!(stripe_values.iter().all(|v| (v - 0.9).abs() < 1e-6 || (v + 0.9).abs() < 1e-6));
    }

    #[test]
    fn mask_matches_written_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        synth_generate(&cfg, dir.path()).unwrap();
        let s = render(&cfg, Domain::Y, &mut sample_rng(cfg.seed, Domain::Y, Split::Test, 4)).unwrap();
        let m = decode_mask(&dir.path().join("masksB/test_0004.png")).unwrap();
        assert_eq!(m, s.mask);
    }

    #[test]
    fn unwritable_root_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, "x").unwrap();
        let err = synth_generate(&small(), &file.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn impossible_coverage_rejected() {
        let cfg = SynthConfig {
            coverage_min: 0.95,
            coverage_max: 1.0,
            radius_max: 0.16,
            ..SynthConfig::default()
        };
        assert!(render(&cfg, Domain::X, &mut Prng::new(0, 0)).is_err());
    }

    use super::super::decode_mask;
}
