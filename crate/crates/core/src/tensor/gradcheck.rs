//! Finite-difference verification of the backward rules.
//!
//! Each check builds a scalar function of some `f64` inputs, differentiates
//! it on the tape, and compares every input-gradient entry against the
//! central difference `(f(x+ε) − f(x−ε)) / 2ε`. The error measure is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`; the floor keeps
//! vanishing gradients from turning round-off into large ratios.
//!
//! Ops with kinks (`relu`, `leaky_relu`, `abs`) are only probed at inputs
//! with `|x| ≥ 1e-3`.

use std::fmt::Write as _;

use super::{OpKind, PadMode, Padding, Tape, Tensor, Var};
use crate::error::Result;
use crate::objectives;
use crate::rng::{stream, Prng};

const DENOM_FLOOR: f64 = 1e-3;
const KINK_EXCLUSION: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Deliberately break one backward rule (test fixture).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            epsilon: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>14}  status\n", "check", "max rel err");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<24} {:>14.3e}  {}",
                r.name,
                r.max_rel_error,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

fn eval(inputs: &[Tensor<f64>], build: &Build<'_>, fault: Option<OpKind>) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Worst error over all input entries of a scalar-valued `build`.
pub fn check_scalar_fn(
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    epsilon: f64,
    fault: Option<OpKind>,
) -> Result<f64> {
    let (mut tape, vars, loss) = eval(inputs, build, fault)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[ti].data_mut()[j] = orig + epsilon;
            let (tp, _, lp) = eval(&probe, build, None)?;
            probe[ti].data_mut()[j] = orig - epsilon;
            let (tm, _, lm) = eval(&probe, build, None)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * epsilon);
            worst = worst.max(rel_error(analytic[ti][j], numeric));
        }
    }
    Ok(worst)
}

/// Reduces a tensor-valued op to a scalar through fixed random weights so
/// that no gradient direction is trivially zero.
fn project<'a>(
    inputs: &[Tensor<f64>],
    op: &'a Build<'a>,
    rng: &mut Prng,
) -> Result<impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a> {
    let (tape, _, out) = eval(inputs, op, None)?;
    let shape = tape.shape(out).to_vec();
    let weights = Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0));
    Ok(move |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = op(tape, vars)?;
        let w = tape.constant(weights.clone())?;
        let p = tape.mul(y, w)?;
        tape.sum(p)
    })
}

fn random(rng: &mut Prng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-2.0, 2.0))
}

fn away_from_kink(rng: &mut Prng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.uniform(-2.0, 2.0);
        if v.abs() >= KINK_EXCLUSION {
            break v;
        }
    })
}

const CONV_CASES: [(usize, usize, usize, PadMode); 4] = [
    // (kernel, stride, pad, mode); pad usize::MAX means "same" padding
    (3, 1, 1, PadMode::Zero),
    (3, 2, 1, PadMode::Reflect),
    (4, 2, 1, PadMode::Zero),
    (4, 1, usize::MAX, PadMode::Zero),
];

fn op_trial(kind: OpKind, trial: usize, rng: &mut Prng) -> (Vec<Tensor<f64>>, Box<Build<'static>>) {
    let s = [2, 3, 4];
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let rhs = if trial % 2 == 1 { vec![1] } else { s.to_vec() };
            let inputs = vec![random(rng, &s), random(rng, &rhs)];
            let f: Box<Build<'static>> = match kind {
                OpKind::Add => Box::new(|t, v| t.add(v[0], v[1])),
                OpKind::Sub => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (inputs, f)
        }
        OpKind::Scale => {
            let c = rng.uniform(-3.0, 3.0);
            (vec![random(rng, &s)], Box::new(move |t, v| t.scale(v[0], c)))
        }
        OpKind::Abs => (vec![away_from_kink(rng, &s)], Box::new(|t, v| t.abs(v[0]))),
        OpKind::Square => (vec![random(rng, &s)], Box::new(|t, v| t.square(v[0]))),
        OpKind::Mean => (vec![random(rng, &s)], Box::new(|t, v| t.mean(v[0]))),
        OpKind::Sum => (vec![random(rng, &s)], Box::new(|t, v| t.sum(v[0]))),
        OpKind::Relu => (vec![away_from_kink(rng, &s)], Box::new(|t, v| t.relu(v[0]))),
        OpKind::LeakyRelu => (
            vec![away_from_kink(rng, &s)],
            Box::new(|t, v| t.leaky_relu(v[0], 0.2)),
        ),
        OpKind::Sigmoid => (vec![random(rng, &s)], Box::new(|t, v| t.sigmoid(v[0]))),
        OpKind::Tanh => (vec![random(rng, &s)], Box::new(|t, v| t.tanh(v[0]))),
        OpKind::Conv2d => {
            let (k, stride, pad, mode) = CONV_CASES[trial % CONV_CASES.len()];
            let padding = if pad == usize::MAX {
                Padding::same(k, mode)
            } else {
                Padding::symmetric(pad, mode)
            };
            let inputs = vec![
                random(rng, &[1, 2, 5, 5]),
                random(rng, &[3, 2, k, k]),
                random(rng, &[3]),
            ];
            (
                inputs,
                Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding)),
            )
        }
        OpKind::UpsampleNearest2x => (
            vec![random(rng, &[1, 2, 3, 3])],
            Box::new(|t, v| t.upsample_nearest2x(v[0])),
        ),
        OpKind::InstanceNorm => {
            let inputs = vec![
                random(rng, &[2, 2, 4, 4]),
                random(rng, &[2]),
                random(rng, &[2]),
            ];
            if trial.is_multiple_of(2) {
                (inputs, Box::new(|t, v| t.instance_norm(v[0], Some((v[1], v[2])))))
            } else {
                (inputs[..1].to_vec(), Box::new(|t, v| t.instance_norm(v[0], None)))
            }
        }
        OpKind::Concat if trial.is_multiple_of(2) => (
            vec![random(rng, &[1, 2, 3, 3]), random(rng, &[1, 1, 3, 3])],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        OpKind::Concat => (
            vec![random(rng, &[1, 2, 3, 2]), random(rng, &[1, 2, 3, 3])],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 3)),
        ),
        OpKind::Slice => (
            vec![random(rng, &[1, 4, 3, 3])],
            Box::new(|t, v| t.slice(v[0], 1, 1, 3)),
        ),
    }
}

fn check_trials(
    name: &str,
    cfg: &GradcheckConfig,
    salt: u64,
    mut make: impl FnMut(usize, &mut Prng) -> (Vec<Tensor<f64>>, Box<Build<'static>>),
    project_output: bool,
) -> CheckResult {
    let mut rng = Prng::new(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15), stream::GRADCHECK);
    let mut worst = 0.0f64;
    for trial in 0..cfg.trials {
        let (inputs, op) = make(trial, &mut rng);
        let outcome = if project_output {
            project(&inputs, op.as_ref(), &mut rng)
                .and_then(|f| check_scalar_fn(&inputs, &f, cfg.epsilon, cfg.fault))
        } else {
            check_scalar_fn(&inputs, op.as_ref(), cfg.epsilon, cfg.fault)
        };
        worst = worst.max(outcome.unwrap_or(f64::INFINITY));
    }
    CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        passed: worst <= cfg.tolerance,
    }
}

/// Checks one catalog op over `cfg.trials` random trials.
pub fn gradcheck_op(kind: OpKind, cfg: &GradcheckConfig) -> CheckResult {
    let salt = OpKind::ALL.iter().position(|k| *k == kind).unwrap() as u64 + 1;
    check_trials(kind.name(), cfg, salt, |trial, rng| op_trial(kind, trial, rng), true)
}

/// The loss terms, each fed by a small conv → tanh → conv network.
pub const LOSS_CHECKS: [&str; 6] = [
    "loss_gan_d",
    "loss_gan_g",
    "loss_cycle",
    "loss_attn_cycle",
    "loss_attn_sparse",
    "loss_attn_supervised",
];

/// Two-layer net on inputs `[x, w1, b1, w2, b2]`.
fn two_layer(t: &mut Tape<f64>, x: Var, w: &[Var]) -> Result<Var> {
    let pad = Padding::symmetric(1, PadMode::Zero);
    let h = t.conv2d(x, w[0], Some(w[1]), 1, pad)?;
    let h = t.tanh(h)?;
    t.conv2d(h, w[2], Some(w[3]), 1, pad)
}

fn loss_trial(name: &'static str, rng: &mut Prng) -> (Vec<Tensor<f64>>, Box<Build<'static>>) {
    let out_ch = match name {
        "loss_cycle" => 3,
        _ => 1,
    };
    let image = [1, 3, 5, 5];
    let mut inputs = vec![
        random(rng, &[4, 3, 3, 3]),
        random(rng, &[4]),
        random(rng, &[out_ch, 4, 3, 3]),
        random(rng, &[out_ch]),
    ];
    for _ in 0..4 {
        inputs.push(random(rng, &image));
    }
    let masks: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::from_fn(vec![1, 1, 5, 5], |_| rng.coin() as u8 as f64))
        .collect();
    let f: Box<Build<'static>> = Box::new(move |t, v| {
        let (w, xs) = v.split_at(4);
        let net = |t: &mut Tape<f64>, i: usize| two_layer(t, xs[i], w);
        match name {
            "loss_gan_d" => {
                let r = net(t, 0)?;
                let f = net(t, 1)?;
                objectives::loss_gan_d(t, r, f)
            }
            "loss_gan_g" => {
                let f = net(t, 0)?;
                objectives::loss_gan_g(t, f)
            }
            "loss_cycle" => {
                let a = net(t, 0)?;
                let b = net(t, 1)?;
                objectives::loss_cycle(t, xs[0], a, xs[1], b)
            }
            _ => {
                let mut maps = Vec::new();
                for i in 0..4 {
                    let s = net(t, i)?;
                    maps.push(t.sigmoid(s)?);
                }
                match name {
                    "loss_attn_cycle" => {
                        objectives::loss_attn_cycle(t, maps[0], maps[1], maps[2], maps[3])
                    }
                    "loss_attn_sparse" => objectives::loss_attn_sparse(t, maps[0], maps[1]),
                    _ => {
                        let mx = t.constant(masks[0].clone())?;
                        let my = t.constant(masks[1].clone())?;
                        objectives::loss_attn_supervised(t, &[(maps[0], mx)], &[(maps[1], my)])
                    }
                }
            }
        }
    });
    (inputs, f)
}

pub fn gradcheck_loss(name: &'static str, cfg: &GradcheckConfig) -> CheckResult {
    let salt = 100 + LOSS_CHECKS.iter().position(|n| *n == name).unwrap_or(99) as u64;
    check_trials(name, cfg, salt, |_, rng| loss_trial(name, rng), false)
}

/// Every catalog op followed by every loss term.
pub fn gradcheck_suite(cfg: &GradcheckConfig) -> GradcheckReport {
    let mut results: Vec<CheckResult> = OpKind::ALL.iter().map(|k| gradcheck_op(*k, cfg)).collect();
    results.extend(LOSS_CHECKS.iter().map(|n| gradcheck_loss(n, cfg)));
    GradcheckReport {
        tolerance: cfg.tolerance,
        results,
    }
}
