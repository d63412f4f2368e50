//! Loss terms and their weighted aggregation.
//!
//! Every L1 norm is taken as a per-element mean so the weights do not depend
//! on image resolution. Adversarial terms use least-squares targets: the
//! discriminator pushes real scores to 1 and fake scores to 0, the generator
//! pushes fake scores to 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Unsupervised,
    Supervised,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(Mode::Unsupervised),
            "supervised" => Ok(Mode::Supervised),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected unsupervised or supervised)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Unsupervised => "unsupervised",
            Mode::Supervised => "supervised",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_a_cyc: f64,
    /// Weight of the sparse attention penalty (`lambda_attn` in ablations).
    pub lambda_a_sparse: f64,
    pub lambda_a_sup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_a_cyc: 1.0,
            lambda_a_sparse: 1.0,
            lambda_a_sup: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_a_cyc", self.lambda_a_cyc),
            ("lambda_a_sparse", self.lambda_a_sparse),
            ("lambda_a_sup", self.lambda_a_sup),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Weights as used by `mode`; supervised training drops the
    /// attention-cycle and sparse terms.
    pub fn effective(&self, mode: Mode) -> Self {
        match mode {
            Mode::Unsupervised => *self,
            Mode::Supervised => Self {
                lambda_a_cyc: 0.0,
                lambda_a_sparse: 0.0,
                ..*self
            },
        }
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Mean of `(v - target)^2`.
fn mean_sq_to<T: Real>(tape: &mut Tape<T>, v: Var, target: f64) -> Result<Var> {
    let d = if target == 0.0 {
        v
    } else {
        let t = tape.constant(Tensor::scalar(T::lit(target)))?;
        tape.sub(v, t)?
    };
    let sq = tape.square(d)?;
    tape.mean(sq)
}

fn mean_abs_diff<T: Real>(tape: &mut Tape<T>, op: &'static str, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, op, a, b)?;
    let d = tape.sub(a, b)?;
    let ad = tape.abs(d)?;
    tape.mean(ad)
}

/// Discriminator loss: `mean((real - 1)^2) + mean(fake^2)`.
pub fn loss_gan_d<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let r = mean_sq_to(tape, real, 1.0)?;
    let f = mean_sq_to(tape, fake, 0.0)?;
    tape.add(r, f)
}

/// Generator adversarial loss: `mean((fake - 1)^2)`.
pub fn loss_gan_g<T: Real>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    mean_sq_to(tape, fake, 1.0)
}

/// `mean|F(G(x)) - x| + mean|G(F(y)) - y|`.
pub fn loss_cycle<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    f_of_g_x: Var,
    y: Var,
    g_of_f_y: Var,
) -> Result<Var> {
    let a = mean_abs_diff(tape, "loss_cycle", f_of_g_x, x)?;
    let b = mean_abs_diff(tape, "loss_cycle", g_of_f_y, y)?;
    tape.add(a, b)
}

/// `mean|A_X(x) - A_Y(G(x))| + mean|A_Y(y) - A_X(F(y))|`.
pub fn loss_attn_cycle<T: Real>(
    tape: &mut Tape<T>,
    a_x_of_x: Var,
    a_y_of_gx: Var,
    a_y_of_y: Var,
    a_x_of_fy: Var,
) -> Result<Var> {
    let a = mean_abs_diff(tape, "loss_attn_cycle", a_x_of_x, a_y_of_gx)?;
    let b = mean_abs_diff(tape, "loss_attn_cycle", a_y_of_y, a_x_of_fy)?;
    tape.add(a, b)
}

/// `mean|A_X(x)| + mean|A_Y(y)|`. Only the maps of real inputs are
/// penalized, never the maps of translated images.
pub fn loss_attn_sparse<T: Real>(tape: &mut Tape<T>, a_x_of_x: Var, a_y_of_y: Var) -> Result<Var> {
    let ax = tape.abs(a_x_of_x)?;
    let ay = tape.abs(a_y_of_y)?;
    let mx = tape.mean(ax)?;
    let my = tape.mean(ay)?;
    tape.add(mx, my)
}

const MASK_TOLERANCE: f64 = 1e-6;

fn check_binary<T: Real>(tape: &Tape<T>, mask: Var) -> Result<()> {
    let bad = tape.value(mask).data().iter().find(|v| {
        let v = v.to_f64().unwrap();
        v.abs() > MASK_TOLERANCE && (v - 1.0).abs() > MASK_TOLERANCE
    });
    match bad {
        Some(v) => Err(Error::invalid(format!(
            "loss_attn_supervised: mask value {v} is not binary"
        ))),
        None => Ok(()),
    }
}

/// Supervised attention loss. Each slice holds `(predicted map, mask)`
/// pairs of one domain; per-sample mean absolute errors are averaged over
/// the batch and the two domains are summed.
pub fn loss_attn_supervised<T: Real>(
    tape: &mut Tape<T>,
    domain_x: &[(Var, Var)],
    domain_y: &[(Var, Var)],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for pairs in [domain_x, domain_y] {
        if pairs.is_empty() {
            return Err(Error::invalid("loss_attn_supervised: empty batch"));
        }
        let mut acc: Option<Var> = None;
        for &(pred, mask) in pairs {
            check_binary(tape, mask)?;
            let e = mean_abs_diff(tape, "loss_attn_supervised", pred, mask)?;
            acc = Some(match acc {
                None => e,
                Some(a) => tape.add(a, e)?,
            });
        }
        let domain = tape.scale(acc.expect("non-empty"), 1.0 / pairs.len() as f64)?;
        total = Some(match total {
            None => domain,
            Some(t) => tape.add(t, domain)?,
        });
    }
    Ok(total.expect("two domains"))
}

/// Generator-side loss terms, each optional so mode contracts can be checked.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorTerms<V> {
    pub gan_g_xy: Option<V>,
    pub gan_g_yx: Option<V>,
    pub cyc: Option<V>,
    pub a_cyc: Option<V>,
    pub a_sparse: Option<V>,
    pub a_sup: Option<V>,
}

impl<V: Copy> GeneratorTerms<V> {
    /// `(coefficient, term)` list making up the total for `mode`.
    pub fn weighted(&self, mode: Mode, w: &LossWeights) -> Result<Vec<(f64, V)>> {
        let need = |name: &str, v: Option<V>| {
            v.ok_or_else(|| Error::invalid(format!("{mode} objective is missing the {name} term")))
        };
        let forbid = |name: &str, v: Option<V>| match v {
            Some(_) => Err(Error::invalid(format!(
                "{mode} objective does not take the {name} term"
            ))),
            None => Ok(()),
        };
        let mut out = vec![
            (1.0, need("gan_g_xy", self.gan_g_xy)?),
            (1.0, need("gan_g_yx", self.gan_g_yx)?),
            (w.lambda_cyc, need("cyc", self.cyc)?),
        ];
        match mode {
            Mode::Unsupervised => {
                forbid("a_sup", self.a_sup)?;
                out.push((w.lambda_a_cyc, need("a_cyc", self.a_cyc)?));
                out.push((w.lambda_a_sparse, need("a_sparse", self.a_sparse)?));
            }
            Mode::Supervised => {
                forbid("a_cyc", self.a_cyc)?;
                forbid("a_sparse", self.a_sparse)?;
                out.push((w.lambda_a_sup, need("a_sup", self.a_sup)?));
            }
        }
        Ok(out)
    }
}

/// Builds the weighted generator total on the tape.
pub fn total_generator_var<T: Real>(
    tape: &mut Tape<T>,
    mode: Mode,
    weights: &LossWeights,
    terms: &GeneratorTerms<Var>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (c, v) in terms.weighted(mode, weights)? {
        let scaled = if c == 1.0 { v } else { tape.scale(v, c)? };
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    Ok(total.expect("at least three terms"))
}

/// Per-iteration loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub gan_g_xy: f64,
    pub gan_g_yx: f64,
    pub gan_d_x: f64,
    pub gan_d_y: f64,
    pub cyc: f64,
    pub a_cyc: Option<f64>,
    pub a_sparse: Option<f64>,
    pub a_sup: Option<f64>,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "gan_g_xy,gan_g_yx,gan_d_x,gan_d_y,cyc,a_cyc,a_sparse,a_sup,total_g,total_d";

    /// Comma-separated values in `CSV_HEADER` order; terms absent in the
    /// run's mode are empty fields. Floats use the shortest round-trip form.
    pub fn csv_fields(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.gan_g_xy,
            self.gan_g_yx,
            self.gan_d_x,
            self.gan_d_y,
            self.cyc,
            opt(self.a_cyc),
            opt(self.a_sparse),
            opt(self.a_sup),
            self.total_g,
            self.total_d
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            Some(self.gan_g_xy),
            Some(self.gan_g_yx),
            Some(self.gan_d_x),
            Some(self.gan_d_y),
            Some(self.cyc),
            self.a_cyc,
            self.a_sparse,
            self.a_sup,
            Some(self.total_g),
            Some(self.total_d),
        ]
        .into_iter()
        .flatten()
        .all(f64::is_finite)
    }
}

/// Scalar version of the aggregation: fills a [`LossReport`] from term
/// values. Discriminator entries are left at zero.
pub fn total_generator_loss(
    mode: Mode,
    weights: &LossWeights,
    terms: &GeneratorTerms<f64>,
) -> Result<LossReport> {
    let total_g = terms
        .weighted(mode, weights)?
        .into_iter()
        .map(|(c, v)| c * v)
        .sum();
    Ok(LossReport {
        gan_g_xy: terms.gan_g_xy.unwrap_or_default(),
        gan_g_yx: terms.gan_g_yx.unwrap_or_default(),
        cyc: terms.cyc.unwrap_or_default(),
        a_cyc: terms.a_cyc,
        a_sparse: terms.a_sparse,
        a_sup: terms.a_sup,
        total_g,
        ..LossReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape<f64>, shape: &[usize], f: impl FnMut(usize) -> f64) -> Var {
        tape.constant(Tensor::from_fn(shape.to_vec(), f)).unwrap()
    }

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    // Deterministic pseudo-random values in [-1.5, 1.5).
    fn noise(seed: usize) -> impl FnMut(usize) -> f64 {
        move |i| (((i + 1) * 2654435761usize + seed * 97) % 1000) as f64 / 1000.0 * 3.0 - 1.5
    }

    #[test]
    fn gan_d_hits_exact_targets() {
        let mut t = Tape::new();
        let ones = var(&mut t, &[1, 1, 4, 4], |_| 1.0);
        let zeros = var(&mut t, &[1, 1, 4, 4], |_| 0.0);
        let l = loss_gan_d(&mut t, ones, zeros).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let l = loss_gan_d(&mut t, zeros, ones).unwrap();
        assert_eq!(scalar(&t, l), 2.0);
    }

    #[test]
    fn gan_losses_match_elementwise_oracle() {
        let mut t = Tape::new();
        let real_v: Vec<f64> = (0..16).map(noise(1)).collect();
        let fake_v: Vec<f64> = (0..16).map(noise(2)).collect();
        let real = var(&mut t, &[1, 1, 4, 4], |i| real_v[i]);
        let fake = var(&mut t, &[1, 1, 4, 4], |i| fake_v[i]);
        let d = loss_gan_d(&mut t, real, fake).unwrap();
        let g = loss_gan_g(&mut t, fake).unwrap();
        let oracle_d = real_v.iter().map(|r| (r - 1.0) * (r - 1.0)).sum::<f64>() / 16.0
            + fake_v.iter().map(|f| f * f).sum::<f64>() / 16.0;
        let oracle_g = fake_v.iter().map(|f| (f - 1.0) * (f - 1.0)).sum::<f64>() / 16.0;
        assert!((scalar(&t, d) - oracle_d).abs() < 1e-12);
        assert!((scalar(&t, g) - oracle_g).abs() < 1e-12);
    }

    #[test]
    fn gan_g_targets() {
        let mut t = Tape::new();
        let ones = var(&mut t, &[1, 1, 2, 2], |_| 1.0);
        let zeros = var(&mut t, &[1, 1, 2, 2], |_| 0.0);
        let a = loss_gan_g(&mut t, ones).unwrap();
        let b = loss_gan_g(&mut t, zeros).unwrap();
        assert_eq!((scalar(&t, a), scalar(&t, b)), (0.0, 1.0));
    }

    #[test]
    fn cycle_loss_cases() {
        let mut t = Tape::new();
        let x = var(&mut t, &[1, 3, 4, 4], noise(3));
        let y = var(&mut t, &[1, 3, 4, 4], noise(4));
        let l = loss_cycle(&mut t, x, x, y, y).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let shifted = var(&mut t, &[1, 3, 4, 4], |i| noise(3)(i) + 0.1);
        let l = loss_cycle(&mut t, x, shifted, y, y).unwrap();
        assert!((scalar(&t, l) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_matches_oracle_and_is_symmetric() {
        let mut t = Tape::new();
        let vals: Vec<Vec<f64>> = (0..4).map(|s| (0..48).map(noise(s + 10)).collect()).collect();
        let v: Vec<Var> = vals
            .iter()
            .map(|d| var(&mut t, &[1, 3, 4, 4], |i| d[i]))
            .collect();
        let l = loss_cycle(&mut t, v[0], v[1], v[2], v[3]).unwrap();
        let swapped = loss_cycle(&mut t, v[2], v[3], v[0], v[1]).unwrap();
        let mae = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
        };
        let oracle = mae(&vals[1], &vals[0]) + mae(&vals[3], &vals[2]);
        assert!((scalar(&t, l) - oracle).abs() < 1e-12);
        assert!((scalar(&t, l) - scalar(&t, swapped)).abs() < 1e-12);
    }

    #[test]
    fn attn_cycle_cases() {
        let mut t = Tape::new();
        let a = var(&mut t, &[1, 1, 4, 4], |i| (i % 5) as f64 / 5.0);
        let b = var(&mut t, &[1, 1, 4, 4], |i| (i % 5) as f64 / 5.0 + 0.2);
        let l = loss_attn_cycle(&mut t, a, a, b, b).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let l = loss_attn_cycle(&mut t, a, b, a, a).unwrap();
        assert!((scalar(&t, l) - 0.2).abs() < 1e-12);
        let wrong = var(&mut t, &[1, 1, 2, 2], |_| 0.0);
        assert!(loss_attn_cycle(&mut t, a, wrong, a, a).is_err());
    }

    #[test]
    fn sparse_loss_cases() {
        let mut t = Tape::new();
        let zeros = var(&mut t, &[1, 1, 4, 4], |_| 0.0);
        let ones = var(&mut t, &[1, 1, 4, 4], |_| 1.0);
        let half = var(&mut t, &[1, 1, 4, 4], |i| if i < 8 { 1.0 } else { 0.0 });
        let cases = [(zeros, zeros, 0.0), (ones, ones, 2.0), (half, zeros, 0.5)];
        for (a, b, want) in cases {
            let l = loss_attn_sparse(&mut t, a, b).unwrap();
            assert_eq!(scalar(&t, l), want);
        }
    }

    #[test]
    fn supervised_loss_cases() {
        let mut t = Tape::new();
        let mask = var(&mut t, &[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let half = var(&mut t, &[1, 1, 4, 4], |_| 0.5);
        let l = loss_attn_supervised(&mut t, &[(mask, mask)], &[(mask, mask)]).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let l = loss_attn_supervised(&mut t, &[(half, mask)], &[(mask, mask)]).unwrap();
        assert_eq!(scalar(&t, l), 0.5);
        let l = loss_attn_supervised(&mut t, &[(half, mask)], &[(half, mask)]).unwrap();
        assert_eq!(scalar(&t, l), 1.0);
    }

    #[test]
    fn supervised_loss_averages_batch_per_domain() {
        let mut t = Tape::new();
        let pred: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64 / 15.0).collect();
        let m: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        let p = var(&mut t, &[1, 1, 4, 4], |i| pred[i]);
        let mk = var(&mut t, &[1, 1, 4, 4], |i| m[i]);
        let z = var(&mut t, &[1, 1, 4, 4], |_| 0.0);
        let l = loss_attn_supervised(&mut t, &[(p, mk), (mk, mk)], &[(z, z)]).unwrap();
        let mae = pred.iter().zip(&m).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
        assert!((scalar(&t, l) - mae / 2.0).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_rejects_soft_masks() {
        let mut t = Tape::new();
        let soft = var(&mut t, &[1, 1, 2, 2], |_| 0.3);
        let pred = var(&mut t, &[1, 1, 2, 2], |_| 0.3);
        let err = loss_attn_supervised(&mut t, &[(pred, soft)], &[(pred, soft)]).unwrap_err();
        assert!(err.to_string().contains("not binary"));
    }

    fn unsup_terms(v: f64) -> GeneratorTerms<f64> {
        GeneratorTerms {
            gan_g_xy: Some(v),
            gan_g_yx: Some(v),
            cyc: Some(v),
            a_cyc: Some(v),
            a_sparse: Some(v),
            a_sup: None,
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights {
            lambda_cyc: 10.0,
            lambda_a_cyc: 1.0,
            lambda_a_sparse: 1.0,
            lambda_a_sup: 1.0,
        };
        let r = total_generator_loss(Mode::Unsupervised, &w, &unsup_terms(1.0)).unwrap();
        assert_eq!(r.total_g, 14.0);
        let r = total_generator_loss(Mode::Unsupervised, &w, &unsup_terms(0.0)).unwrap();
        assert_eq!(r.total_g, 0.0);
    }

    #[test]
    fn scaling_one_weight_scales_only_its_term() {
        let terms = GeneratorTerms {
            gan_g_xy: Some(0.3),
            gan_g_yx: Some(0.7),
            cyc: Some(0.11),
            a_cyc: Some(0.05),
            a_sparse: Some(0.4),
            a_sup: None,
        };
        let w = LossWeights::default();
        let base = total_generator_loss(Mode::Unsupervised, &w, &terms).unwrap();
        let w3 = LossWeights {
            lambda_a_sparse: 3.0 * w.lambda_a_sparse,
            ..w
        };
        let scaled = total_generator_loss(Mode::Unsupervised, &w3, &terms).unwrap();
        let delta = scaled.total_g - base.total_g;
        assert!((delta - 2.0 * w.lambda_a_sparse * 0.4).abs() < 1e-12);
    }

    #[test]
    fn supervised_mode_contract() {
        let w = LossWeights::default();
        let mut terms = unsup_terms(1.0);
        assert!(total_generator_loss(Mode::Supervised, &w, &terms).is_err());
        terms.a_cyc = None;
        terms.a_sparse = None;
        terms.a_sup = Some(2.0);
        let r = total_generator_loss(Mode::Supervised, &w, &terms).unwrap();
        assert_eq!(r.total_g, 1.0 + 1.0 + 10.0 + 2.0);
        terms.a_sparse = Some(1.0);
        let err = total_generator_loss(Mode::Supervised, &w, &terms).unwrap_err();
        assert!(err.to_string().contains("a_sparse"));
    }

    #[test]
    fn missing_term_is_rejected() {
        let mut terms = unsup_terms(1.0);
        terms.cyc = None;
        assert!(total_generator_loss(Mode::Unsupervised, &LossWeights::default(), &terms).is_err());
    }

    #[test]
    fn tape_total_matches_scalar_total() {
        let mut t = Tape::<f64>::new();
        let vals = [0.3, 0.7, 0.11, 0.05, 0.4];
        let v: Vec<Var> = vals
            .iter()
            .map(|&x| t.constant(Tensor::scalar(x)).unwrap())
            .collect();
        let terms = GeneratorTerms {
            gan_g_xy: Some(v[0]),
            gan_g_yx: Some(v[1]),
            cyc: Some(v[2]),
            a_cyc: Some(v[3]),
            a_sparse: Some(v[4]),
            a_sup: None,
        };
        let w = LossWeights::default();
        let total = total_generator_var(&mut t, Mode::Unsupervised, &w, &terms).unwrap();
        let scalar_terms = GeneratorTerms {
            gan_g_xy: Some(vals[0]),
            gan_g_yx: Some(vals[1]),
            cyc: Some(vals[2]),
            a_cyc: Some(vals[3]),
            a_sparse: Some(vals[4]),
            a_sup: None,
        };
        let r = total_generator_loss(Mode::Unsupervised, &w, &scalar_terms).unwrap();
        assert!((t.value(total).item().unwrap() - r.total_g).abs() <= 1e-12 * r.total_g);
    }

    #[test]
    fn negative_weight_is_invalid() {
        let w = LossWeights {
            lambda_cyc: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
