//! Resize, crop and flip for images and their masks.

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

use super::Sample;

/// Side length images are scaled to before the random crop.
pub fn train_scale(image_size: usize) -> usize {
    (image_size * 286).div_ceil(256)
}

fn dims(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::invalid(format!("expected a C×H×W tensor, got {s:?}"))),
    }
}

/// Source coordinate of output pixel `o` with half-pixel centers.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
}

pub fn resize_bilinear(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (c, ih, iw) = dims(t)?;
    if (ih, iw) == (h, w) {
        return Ok(t.clone());
    }
    let taps = |n_in, n_out| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let s = source_coord(o, n_in, n_out);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(ih, h), taps(iw, w));
    let d = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &d[ch * ih * iw..(ch + 1) * ih * iw];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * iw + x0] * (1.0 - fx) + plane[y0 * iw + x1] * fx;
                let bot = plane[y1 * iw + x0] * (1.0 - fx) + plane[y1 * iw + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new([c, h, w], out)
}

pub fn resize_nearest(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (c, ih, iw) = dims(t)?;
    let pick = |o: usize, n_in: usize, n_out: usize| ((o * 2 + 1) * n_in / (2 * n_out)).min(n_in - 1);
    let d = t.data();
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), i / w % h, i % w);
        d[ch * ih * iw + pick(y, ih, h) * iw + pick(x, iw, w)]
    }))
}

pub fn crop(t: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (c, ih, iw) = dims(t)?;
    if top + h > ih || left + w > iw {
        return Err(Error::invalid(format!(
            "crop {h}×{w} at ({top},{left}) exceeds {ih}×{iw}"
        )));
    }
    let d = t.data();
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), i / w % h, i % w);
        d[ch * ih * iw + (top + y) * iw + left + x]
    }))
}

/// Mirrors along the width axis.
pub fn hflip(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(t)?;
    let d = t.data();
    Ok(Tensor::from_fn([c, h, w], |i| {
        let row = i / w;
        d[row * w + (w - 1 - i % w)]
    }))
}

/// Random geometry of one training-mode augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn sample(rng: &mut Prng, image_size: usize) -> Self {
        let slack = train_scale(image_size) - image_size + 1;
        let top = rng.below(slack);
        let left = rng.below(slack);
        let flip = rng.coin();
        Self { top, left, flip }
    }
}

fn geometric(
    t: &Tensor<f32>,
    resize: fn(&Tensor<f32>, usize, usize) -> Result<Tensor<f32>>,
    draw: Option<AugmentDraw>,
    size: usize,
) -> Result<Tensor<f32>> {
    match draw {
        None => resize(t, size, size),
        Some(d) => {
            let s = train_scale(size);
            let scaled = resize(t, s, s)?;
            let cropped = crop(&scaled, d.top, d.left, size, size)?;
            if d.flip {
                hflip(&cropped)
            } else {
                Ok(cropped)
            }
        }
    }
}

/// Applies a fixed geometry (`None` is test mode: resize only). The mask
/// goes through the same transform with nearest-neighbor sampling.
pub fn augment_with(sample: &Sample, draw: Option<AugmentDraw>, image_size: usize) -> Result<Sample> {
    Ok(Sample {
        image: geometric(&sample.image, resize_bilinear, draw, image_size)?,
        mask: sample
            .mask
            .as_ref()
            .map(|m| geometric(m, resize_nearest, draw, image_size))
            .transpose()?,
        domain: sample.domain,
        source_path: sample.source_path.clone(),
    })
}

/// Train mode: scale to [`train_scale`], random crop, flip with p = 0.5.
/// Test mode: scale to `image_size`; no random draws are consumed.
pub fn augment(sample: &Sample, rng: &mut Prng, train_mode: bool, image_size: usize) -> Result<Sample> {
    let draw = train_mode.then(|| AugmentDraw::sample(rng, image_size));
    augment_with(sample, draw, image_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use proptest::prelude::*;

    fn sample(image: Tensor<f32>, mask: Option<Tensor<f32>>) -> Sample {
        Sample {
            image,
            mask,
            domain: Domain::X,
            source_path: "mem".into(),
        }
    }

    #[test]
    fn scale_for_32_is_36() {
        assert_eq!(train_scale(32), 36);
        assert_eq!(train_scale(256), 286);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let t = Tensor::from_fn([3, 5, 7], |i| i as f32 * 0.01);
        assert_eq!(resize_bilinear(&t, 5, 7).unwrap(), t);
        let c = Tensor::full([1, 4, 4], 0.3f32);
        let r = resize_bilinear(&c, 9, 9).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn crop_and_flip_positions() {
        let t = Tensor::from_fn([1, 3, 3], |i| i as f32);
        assert_eq!(crop(&t, 1, 1, 2, 2).unwrap().data(), &[4.0, 5.0, 7.0, 8.0]);
        assert_eq!(hflip(&t).unwrap().data()[..3], [2.0, 1.0, 0.0]);
        assert!(crop(&t, 2, 0, 2, 2).is_err());
    }

    #[test]
    fn train_mode_output_size() {
        let s = sample(Tensor::zeros([3, 32, 32]), Some(Tensor::zeros([1, 32, 32])));
        let mut rng = Prng::new(0, 0);
        let out = augment(&s, &mut rng, true, 32).unwrap();
        assert_eq!(out.image.shape(), &[3, 32, 32]);
        assert_eq!(out.mask.unwrap().shape(), &[1, 32, 32]);
    }

    #[test]
    fn test_mode_consumes_no_randomness() {
        let s = sample(Tensor::zeros([3, 40, 40]), None);
        let mut rng = Prng::new(0, 0);
        let before = rng.state();
        let out = augment(&s, &mut rng, false, 32).unwrap();
        assert_eq!(out.image.shape(), &[3, 32, 32]);
        assert_eq!(rng.state(), before);
    }

    proptest! {
        #[test]
        fn flip_is_involution(h in 1usize..9, w in 1usize..9, seed in 0u64..1000) {
            let mut rng = Prng::new(seed, 0);
            let t = Tensor::from_fn([3, h, w], |_| rng.uniform(-1.0, 1.0) as f32);
            prop_assert_eq!(hflip(&hflip(&t).unwrap()).unwrap(), t);
        }

        #[test]
        fn mask_stays_binary(seed in 0u64..500, size in prop::sample::select(vec![8usize, 16, 32])) {
            let mut rng = Prng::new(seed, 1);
            let mask = Tensor::from_fn([1, 24, 24], |_| if rng.coin() { 1.0 } else { 0.0 });
            let s = sample(Tensor::zeros([3, 24, 24]), Some(mask));
            for train in [true, false] {
                let out = augment(&s, &mut rng, train, size).unwrap();
                prop_assert!(out.mask.unwrap().data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }

        /// A solid object keeps its color on interior mask pixels after the
        /// joint transform, and the background keeps its color away from it.
        #[test]
        fn joint_geometry_aligned(seed in 0u64..300) {
            let mut rng = Prng::new(seed, 2);
            let (cy, cx, r) = (rng.uniform(10.0, 22.0), rng.uniform(10.0, 22.0), rng.uniform(4.0, 8.0));
            let inside = |i: usize| {
                let (y, x) = ((i / 32) as f64 + 0.5, (i % 32) as f64 + 0.5);
                (y - cy).powi(2) + (x - cx).powi(2) <= r * r
            };
            let mask = Tensor::from_fn([1, 32, 32], |i| if inside(i) { 1.0 } else { 0.0 });
            let (fg, bg) = ([0.8f32, -0.2, 0.1], [-0.6f32, 0.4, -0.3]);
            let image = Tensor::from_fn([3, 32, 32], |i| {
                let ch = i / 1024;
                if inside(i % 1024) { fg[ch] } else { bg[ch] }
            });
            let out = augment(&sample(image, Some(mask)), &mut rng, true, 32).unwrap();
            let (m, img) = (out.mask.unwrap(), out.image);
            let md = m.data();
            for y in 2..30 {
                for x in 2..30 {
                    let first = md[y * 32 + x];
                    let uniform = (y - 2..=y + 2).all(|yy| (x - 2..=x + 2).all(|xx| md[yy * 32 + xx] == first));
                    if !uniform {
                        continue;
                    }
                    let want = if first == 1.0 { fg } else { bg };
                    for ch in 0..3 {
                        prop_assert!((img.data()[ch * 1024 + y * 32 + x] - want[ch]).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
