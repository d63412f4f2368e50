//! Alternating optimization of the generator side (attention and transform
//! networks of both directions) and the two discriminators.
//!
//! Each iteration first updates `A_X, A_Y, T_X, T_Y` jointly on the weighted
//! generator objective, then `D_X` and `D_Y` on their least-squares losses.
//! The discriminators see real images and replay-buffer fakes produced by the
//! generators before their update. An iteration is atomic: if any value on
//! either half turns non-finite nothing is updated.

pub mod adam;
pub mod buffer;
pub mod checkpoint;
pub mod sink;

use serde::{Deserialize, Serialize};

use crate::data::{augment, DatasetManifest, Domain, Sample, Split};
use crate::error::{Error, Result};
use crate::networks::{batched, build_bundle, BundleVars, Direction, ModelBundle, NetId};
use crate::objectives::{
    loss_attn_cycle, loss_attn_sparse, loss_attn_supervised, loss_cycle, loss_gan_d, loss_gan_g,
    total_generator_loss, total_generator_var, GeneratorTerms, LossReport, LossWeights, Mode,
};
use crate::rng::{stream, Prng};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use adam::{AdamHyper, AdamState};
pub use buffer::{BufferChoice, ReplayBuffer};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use sink::{DirSink, MemorySink, ProgressSink};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    /// Iterations over which the cycle and sparse weights ramp linearly up
    /// to their configured values; 0 applies the full weights from the
    /// start.
    pub warmup_iterations: u64,
    pub base_lr: f64,
    pub epochs_keep: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub image_size: usize,
    pub width_base: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Preview-grid cadence in epochs; 0 disables grids.
    pub grid_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unsupervised,
            weights: LossWeights::default(),
            warmup_iterations: 800,
            base_lr: 2e-4,
            epochs_keep: 100,
            epochs_decay: 100,
            batch_size: 1,
            buffer_capacity: 50,
            seed: 0,
            image_size: 32,
            width_base: 8,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 10,
            grid_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if self.epochs_keep + self.epochs_decay == 0 {
            return bad("epochs_keep + epochs_decay must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad("seed must be below 2^63".into());
        }
        self.weights.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_keep + self.epochs_decay
    }

    /// Loss weights in effect for the iteration with zero-based index
    /// `iteration`.
    pub fn weights_at(&self, iteration: u64) -> LossWeights {
        let mut w = self.weights;
        if iteration < self.warmup_iterations {
            let ramp = (iteration + 1) as f64 / self.warmup_iterations as f64;
            w.lambda_cyc *= ramp;
            w.lambda_a_sparse *= ramp;
        }
        w
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Constant `base_lr` for `epochs_keep` epochs, then linear decay reaching
/// zero at `epochs_keep + epochs_decay`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let end = cfg.total_epochs();
    if epoch > end {
        return Err(Error::invalid(format!("epoch {epoch} outside [0, {end}]")));
    }
    if epoch == end {
        return Ok(0.0);
    }
    if epoch < cfg.epochs_keep {
        return Ok(cfg.base_lr);
    }
    let frac = (epoch - cfg.epochs_keep) as f64 / cfg.epochs_decay as f64;
    Ok(cfg.base_lr * (1.0 - frac))
}

/// Everything needed to continue a run: parameters, optimizer moments,
/// replay buffers, random streams and position.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    /// Indexed by `NetId as usize`.
    pub adam: Vec<AdamState>,
    /// Fakes for `D_X` (outputs of ℱ) and for `D_Y` (outputs of 𝒢).
    pub buffer_x: ReplayBuffer,
    pub buffer_y: ReplayBuffer,
    /// Shuffles and augmentation draws.
    pub rng: Prng,
    /// Next epoch to run.
    pub epoch: usize,
    /// Iterations completed.
    pub iteration: u64,
}

/// A finished run's state, as persisted on disk.
pub type Checkpoint = TrainState;

impl TrainState {
    pub fn new(config: TrainConfig, image_channels: usize) -> Result<Self> {
        config.validate()?;
        let bundle = build_bundle(
            config.width_base,
            image_channels,
            config.image_size,
            &mut Prng::new(config.seed, stream::INIT),
        )?;
        let adam = NetId::ALL
            .iter()
            .map(|&id| AdamState::for_network(bundle.net(id)))
            .collect();
        Ok(Self {
            buffer_x: ReplayBuffer::new(config.buffer_capacity, Prng::new(config.seed, stream::BUFFER_X)),
            buffer_y: ReplayBuffer::new(config.buffer_capacity, Prng::new(config.seed, stream::BUFFER_Y)),
            rng: Prng::new(config.seed, stream::TRAIN),
            config,
            bundle,
            adam,
            epoch: 0,
            iteration: 0,
        })
    }

    /// FNV-1a over the bit patterns of one network's parameters.
    pub fn param_hash(&self, id: NetId) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (_, t) in self.bundle.net(id).params() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn apply(&mut self, grads: Vec<(NetId, Vec<Option<Vec<f32>>>)>, lr: f64) {
        let hp = self.config.adam();
        for (id, g) in grads {
            let refs: Vec<Option<&[f32]>> = g.iter().map(Option::as_deref).collect();
            self.adam[id as usize].step(self.bundle.net_mut(id).params_mut(), &refs, lr, hp);
        }
    }
}

fn collect_grads(tape: &Tape<f32>, vars: &BundleVars, ids: &[NetId]) -> Vec<(NetId, Vec<Option<Vec<f32>>>)> {
    ids.iter()
        .map(|&id| (id, vars.get(id).iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect()))
        .collect()
}

fn input(tape: &mut Tape<f32>, image: &Tensor<f32>) -> Result<Var> {
    tape.constant(batched(image)?)
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

fn unbatch(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    t.clone().reshape(t.shape()[1..].to_vec())
}

/// Result of the generator half before any parameter changes.
pub struct GeneratorPass {
    pub report: LossReport,
    /// ℱ(y), a fake for `D_X`.
    pub fake_x: Tensor<f32>,
    /// 𝒢(x), a fake for `D_Y`.
    pub fake_y: Tensor<f32>,
    grads: Vec<(NetId, Vec<Option<Vec<f32>>>)>,
}

fn mask_of(s: &Sample, mode: Mode) -> Result<Option<&Tensor<f32>>> {
    match (mode, &s.mask) {
        (Mode::Supervised, None) => Err(Error::invalid(format!(
            "supervised mode needs a mask for {}",
            s.source_path.display()
        ))),
        (Mode::Supervised, Some(m)) => Ok(Some(m)),
        (Mode::Unsupervised, _) => Ok(None),
    }
}

/// Forward and backward of the generator objective.
pub fn generator_pass(state: &TrainState, x: &Sample, y: &Sample) -> Result<GeneratorPass> {
    let cfg = &state.config;
    let weights = cfg.weights_at(state.iteration);
    let bundle = &state.bundle;
    let (mask_x, mask_y) = (mask_of(x, cfg.mode)?, mask_of(y, cfg.mode)?);
    let mut tape = Tape::<f32>::new();
    let vars = bundle.register(&mut tape, &NetId::GENERATORS)?;
    let xv = input(&mut tape, &x.image)?;
    let yv = input(&mut tape, &y.image)?;

    let g = bundle.translate_on(&mut tape, &vars, Direction::XtoY, xv, None)?;
    let f = bundle.translate_on(&mut tape, &vars, Direction::YtoX, yv, None)?;
    let fg = bundle.translate_on(&mut tape, &vars, Direction::YtoX, g.output, None)?;
    let gf = bundle.translate_on(&mut tape, &vars, Direction::XtoY, f.output, None)?;

    let score_y = bundle.discriminate_on(&mut tape, &vars, NetId::DY, g.output)?;
    let score_x = bundle.discriminate_on(&mut tape, &vars, NetId::DX, f.output)?;
    let mut terms = GeneratorTerms {
        gan_g_xy: Some(loss_gan_g(&mut tape, score_y)?),
        gan_g_yx: Some(loss_gan_g(&mut tape, score_x)?),
        cyc: Some(loss_cycle(&mut tape, xv, fg.output, yv, gf.output)?),
        a_cyc: None,
        a_sparse: None,
        a_sup: None,
    };
    match cfg.mode {
        Mode::Unsupervised => {
            terms.a_cyc = Some(loss_attn_cycle(&mut tape, g.attention, fg.attention, f.attention, gf.attention)?);
            terms.a_sparse = Some(loss_attn_sparse(&mut tape, g.attention, f.attention)?);
        }
        Mode::Supervised => {
            let mx = input(&mut tape, mask_x.expect("checked"))?;
            let my = input(&mut tape, mask_y.expect("checked"))?;
            terms.a_sup = Some(loss_attn_supervised(&mut tape, &[(g.attention, mx)], &[(f.attention, my)])?);
        }
    }
    let total = total_generator_var(&mut tape, cfg.mode, &weights, &terms)?;
    tape.backward(total)?;

    let values = GeneratorTerms {
        gan_g_xy: terms.gan_g_xy.map(|v| scalar(&tape, v)),
        gan_g_yx: terms.gan_g_yx.map(|v| scalar(&tape, v)),
        cyc: terms.cyc.map(|v| scalar(&tape, v)),
        a_cyc: terms.a_cyc.map(|v| scalar(&tape, v)),
        a_sparse: terms.a_sparse.map(|v| scalar(&tape, v)),
        a_sup: terms.a_sup.map(|v| scalar(&tape, v)),
    };
    let report = total_generator_loss(cfg.mode, &weights, &values)?;
    if !report.all_finite() {
        return Err(Error::NonFinite { op: "generator loss" });
    }
    Ok(GeneratorPass {
        report,
        fake_x: unbatch(tape.value(f.output))?,
        fake_y: unbatch(tape.value(g.output))?,
        grads: collect_grads(&tape, &vars, &NetId::GENERATORS),
    })
}

/// `(gan_d_x, gan_d_y)` on a tape where `D_X`, `D_Y` are registered in
/// `vars`. Fakes enter as constants, so no gradient reaches the generators.
pub fn discriminator_losses<T: Real>(
    tape: &mut Tape<T>,
    bundle: &ModelBundle,
    vars: &BundleVars,
    reals: (&Tensor<f32>, &Tensor<f32>),
    fakes: (&Tensor<f32>, &Tensor<f32>),
) -> Result<(Var, Var)> {
    let mut one = |id: NetId, real: &Tensor<f32>, fake: &Tensor<f32>| -> Result<Var> {
        let r = tape.constant(batched(real)?.cast())?;
        let f = tape.constant(batched(fake)?.cast())?;
        let sr = bundle.discriminate_on(tape, vars, id, r)?;
        let sf = bundle.discriminate_on(tape, vars, id, f)?;
        loss_gan_d(tape, sr, sf)
    };
    let dx = one(NetId::DX, reals.0, fakes.0)?;
    let dy = one(NetId::DY, reals.1, fakes.1)?;
    Ok((dx, dy))
}

/// Result of the discriminator half before any parameter changes.
pub struct DiscriminatorPass {
    pub gan_d_x: f64,
    pub gan_d_y: f64,
    grads: Vec<(NetId, Vec<Option<Vec<f32>>>)>,
}

/// Forward and backward of both discriminator losses on real images and
/// the buffer-selected fakes.
pub fn discriminator_pass(
    bundle: &ModelBundle,
    x: &Sample,
    y: &Sample,
    fake_x: &Tensor<f32>,
    fake_y: &Tensor<f32>,
) -> Result<DiscriminatorPass> {
    let mut tape = Tape::<f32>::new();
    let vars = bundle.register_only(&mut tape, &[NetId::DX, NetId::DY], true)?;
    let (dx, dy) = discriminator_losses(&mut tape, bundle, &vars, (&x.image, &y.image), (fake_x, fake_y))?;
    let total = tape.add(dx, dy)?;
    tape.backward(total)?;
    Ok(DiscriminatorPass {
        gan_d_x: scalar(&tape, dx),
        gan_d_y: scalar(&tape, dy),
        grads: collect_grads(&tape, &vars, &[NetId::DX, NetId::DY]),
    })
}

/// Generator half on its own: computes and applies the update of the four
/// generator networks. The returned fakes come from before the update.
pub fn generator_step(state: &mut TrainState, x: &Sample, y: &Sample, lr: f64) -> Result<GeneratorPass> {
    let mut pass = generator_pass(state, x, y)?;
    state.apply(std::mem::take(&mut pass.grads), lr);
    Ok(pass)
}

/// Discriminator half on its own, with fakes routed through the buffers.
pub fn discriminator_step(
    state: &mut TrainState,
    x: &Sample,
    y: &Sample,
    fake_x: Tensor<f32>,
    fake_y: Tensor<f32>,
    lr: f64,
) -> Result<(f64, f64)> {
    let fx = state.buffer_x.query(fake_x);
    let fy = state.buffer_y.query(fake_y);
    let pass = discriminator_pass(&state.bundle, x, y, &fx, &fy)?;
    state.apply(pass.grads, lr);
    Ok((pass.gan_d_x, pass.gan_d_y))
}

/// One iteration on one sample per domain.
pub fn train_step(state: &mut TrainState, x: &Sample, y: &Sample, lr: f64) -> Result<LossReport> {
    let g = generator_pass(state, x, y)?;
    let (mut bx, mut by) = (state.buffer_x.clone(), state.buffer_y.clone());
    let fx = bx.query(g.fake_x);
    let fy = by.query(g.fake_y);
    let d = discriminator_pass(&state.bundle, x, y, &fx, &fy)?;
    let mut report = g.report;
    report.gan_d_x = d.gan_d_x;
    report.gan_d_y = d.gan_d_y;
    report.total_d = d.gan_d_x + d.gan_d_y;
    if !report.all_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }
    state.apply(g.grads, lr);
    state.apply(d.grads, lr);
    state.buffer_x = bx;
    state.buffer_y = by;
    state.iteration += 1;
    Ok(report)
}

/// Training images of both domains, decoded once.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub x: Vec<Sample>,
    pub y: Vec<Sample>,
    /// First test image per domain (or first training image) for previews.
    pub preview: (Sample, Sample),
}

impl TrainData {
    pub fn load(manifest: &DatasetManifest, mode: Mode) -> Result<Self> {
        if manifest.n_x() == 0 || manifest.n_y() == 0 {
            return Err(Error::invalid(format!(
                "training needs images in both domains, found {} and {}",
                manifest.n_x(),
                manifest.n_y()
            )));
        }
        if mode == Mode::Supervised && !manifest.fully_masked(Split::Train) {
            return Err(Error::invalid(format!(
                "supervised mode needs a mask for every training image under {}",
                manifest.root.display()
            )));
        }
        let x = manifest.load_samples(Split::Train, Domain::X)?;
        let y = manifest.load_samples(Split::Train, Domain::Y)?;
        let pick = |split_first: Option<&std::path::PathBuf>, fallback: &Sample, d| match split_first {
            Some(p) => Sample::load(p, manifest.mask_for(d, p), d),
            None => Ok(fallback.clone()),
        };
        let preview = (
            pick(manifest.test_a.first(), &x[0], Domain::X)?,
            pick(manifest.test_b.first(), &y[0], Domain::Y)?,
        );
        Ok(Self { x, y, preview })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.x.len().max(self.y.len())
    }
}

/// Runs epochs from `state.epoch` to the end of the schedule. Every
/// iteration emits a loss row; grids and checkpoints follow the configured
/// cadences, and the final epoch always checkpoints.
pub fn train_loop(state: &mut TrainState, data: &TrainData, sink: &mut dyn ProgressSink) -> Result<()> {
    let cfg = state.config.clone();
    if cfg.mode == Mode::Supervised && data.x.iter().chain(&data.y).any(|s| s.mask.is_none()) {
        return Err(Error::invalid("supervised mode needs a mask for every training image"));
    }
    let total = cfg.total_epochs();
    let steps = data.steps_per_epoch();
    while state.epoch < total {
        let epoch = state.epoch;
        let lr = lr_at_epoch(&cfg, epoch)?;
        log::info!("epoch {}/{total} lr {lr:.3e}", epoch + 1);
        let mut order_x: Vec<usize> = (0..data.x.len()).collect();
        let mut order_y: Vec<usize> = (0..data.y.len()).collect();
        state.rng.shuffle(&mut order_x);
        state.rng.shuffle(&mut order_y);
        for i in 0..steps {
            let sx = augment(&data.x[order_x[i % order_x.len()]], &mut state.rng, true, cfg.image_size)?;
            let sy = augment(&data.y[order_y[i % order_y.len()]], &mut state.rng, true, cfg.image_size)?;
            let report = train_step(state, &sx, &sy, lr)?;
            sink.loss_row(epoch, state.iteration - 1, lr, &report)?;
        }
        state.epoch += 1;
        let last = state.epoch == total;
        let due = |every: usize| every > 0 && state.epoch.is_multiple_of(every);
        if due(cfg.grid_every) || (last && cfg.grid_every > 0) {
            sink.grid(epoch, &preview_grid(&state.bundle, &data.preview.0, &data.preview.1, cfg.image_size)?)?;
        }
        if due(cfg.checkpoint_every) || last {
            sink.checkpoint(epoch, state)?;
        }
    }
    Ok(())
}

/// Preview image: one row per direction with the columns input, attention
/// map, transformed image, background layer `(1 − a) ⊙ x`, object layer
/// `a ⊙ t`, composite. Returns `3 × 2s × 6s`.
pub fn preview_grid(bundle: &ModelBundle, x: &Sample, y: &Sample, size: usize) -> Result<Tensor<f32>> {
    let mut tiles: Vec<Vec<Tensor<f32>>> = Vec::new();
    for (dir, sample) in [(Direction::XtoY, x), (Direction::YtoX, y)] {
        let input = augment(sample, &mut Prng::new(0, 0), false, size)?.image;
        let tr = bundle.translate(dir, &input, None)?;
        let a = tr.attention.data();
        let plane = size * size;
        let layer = |f: &dyn Fn(usize, f32) -> f32| Tensor::from_fn([3, size, size], |i| f(i, a[i % plane]));
        let attn = layer(&|_, av| 2.0 * av - 1.0);
        let bg = layer(&|i, av| (1.0 - av) * input.data()[i]);
        let obj = layer(&|i, av| av * tr.transformed.data()[i]);
        tiles.push(vec![input.clone(), attn, tr.transformed, bg, obj, tr.output]);
    }
    let (rows, cols) = (tiles.len(), tiles[0].len());
    let (h, w) = (rows * size, cols * size);
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, yy, xx) = (i / (h * w), i / w % h, i % w);
        tiles[yy / size][xx / size].data()[c * size * size + (yy % size) * size + xx % size]
    }))
}
