//! Attention, transformation and discriminator networks, and the layered
//! compositor that combines them into the two translation mappings.
//!
//! Generators (attention and transformation) share one trunk:
//!
//! ```text
//! conv7x7(w) → conv3x3/2(2w) → 2 × residual(2w) → upsample×2 + conv3x3(w) → conv7x7(out)
//! ```
//!
//! with reflection padding and instance norm + relu after every conv but the
//! last. The attention head has one channel through a sigmoid, the
//! transformation head has the image channels through a tanh.
//!
//! The discriminator is a patch classifier: three 4×4 stride-2 convs of
//! widths `w, 2w, 4w` with leaky relu (instance norm on all but the first)
//! and a final 1-channel 4×4 stride-1 conv with no output activation. Its
//! convs zero-pad; the final conv pads `(1, 2)` so a 32×32 input scores a
//! 4×4 patch grid.

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{PadMode, Padding, Real, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
        norm: bool,
        act: Activation,
    },
    /// conv3x3 → norm → relu → conv3x3 → norm, plus the identity skip.
    Residual { name: String, channels: usize },
    UpsampleNearest2x,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Attention,
    Transform,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub kind: NetKind,
    pub width_base: usize,
    pub image_channels: usize,
    pub layers: Vec<Layer>,
}

#[allow(clippy::too_many_arguments)]
fn conv(
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: Padding,
    norm: bool,
    act: Activation,
) -> Layer {
    Layer::Conv {
        name: name.to_string(),
        in_ch,
        out_ch,
        kernel,
        stride,
        pad,
        norm,
        act,
    }
}

impl Architecture {
    fn generator(kind: NetKind, width: usize, channels: usize) -> Self {
        let reflect = |p| Padding::symmetric(p, PadMode::Reflect);
        let (out_ch, out_act) = match kind {
            NetKind::Attention => (1, Activation::Sigmoid),
            _ => (channels, Activation::Tanh),
        };
        let layers = vec![
            conv("stem", channels, width, 7, 1, reflect(3), true, Activation::Relu),
            conv("down", width, 2 * width, 3, 2, reflect(1), true, Activation::Relu),
            Layer::Residual {
                name: "res1".into(),
                channels: 2 * width,
            },
            Layer::Residual {
                name: "res2".into(),
                channels: 2 * width,
            },
            Layer::UpsampleNearest2x,
            conv("up", 2 * width, width, 3, 1, reflect(1), true, Activation::Relu),
            conv("head", width, out_ch, 7, 1, reflect(3), false, out_act),
        ];
        Self {
            kind,
            width_base: width,
            image_channels: channels,
            layers,
        }
    }

    pub fn attention(width: usize, channels: usize) -> Self {
        Self::generator(NetKind::Attention, width, channels)
    }

    pub fn transform(width: usize, channels: usize) -> Self {
        Self::generator(NetKind::Transform, width, channels)
    }

    pub fn discriminator(width: usize, channels: usize) -> Self {
        let z = |p| Padding::symmetric(p, PadMode::Zero);
        let leaky = Activation::LeakyRelu;
        let layers = vec![
            conv("d1", channels, width, 4, 2, z(1), false, leaky),
            conv("d2", width, 2 * width, 4, 2, z(1), true, leaky),
            conv("d3", 2 * width, 4 * width, 4, 2, z(1), true, leaky),
            conv(
                "score",
                4 * width,
                1,
                4,
                1,
                Padding::same(4, PadMode::Zero),
                false,
                Activation::Identity,
            ),
        ];
        Self {
            kind: NetKind::Discriminator,
            width_base: width,
            image_channels: channels,
            layers,
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        fn conv_params(
            out: &mut Vec<(String, Vec<usize>)>,
            name: &str,
            i: usize,
            o: usize,
            k: usize,
            norm: bool,
        ) {
            out.push((format!("{name}.weight"), vec![o, i, k, k]));
            out.push((format!("{name}.bias"), vec![o]));
            if norm {
                out.push((format!("{name}.gamma"), vec![o]));
                out.push((format!("{name}.beta"), vec![o]));
            }
        }
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                    norm,
                    ..
                } => conv_params(&mut out, name, *in_ch, *out_ch, *kernel, *norm),
                Layer::Residual { name, channels } => {
                    for c in ["conv1", "conv2"] {
                        conv_params(&mut out, &format!("{name}.{c}"), *channels, *channels, 3, true);
                    }
                }
                Layer::UpsampleNearest2x => {}
            }
        }
        out
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    params: Vec<(String, Tensor<f32>)>,
}

impl NetworkParams {
    /// Conv weights ~ N(0, 0.02²); biases and norm shifts 0; norm scales 1.
    pub fn init(arch: Architecture, rng: &mut Prng) -> Self {
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".weight") {
                    Tensor::from_fn(shape, |_| rng.normal(INIT_STD) as f32)
                } else if name.ends_with(".gamma") {
                    Tensor::full(shape, 1.0)
                } else {
                    Tensor::zeros(shape)
                };
                (name, t)
            })
            .collect();
        Self { arch, params }
    }

    /// Rebuilds from stored tensors, checking them against the descriptor.
    pub fn from_parts(arch: Architecture, params: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let net = Self { arch, params };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.arch.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "network expects {} parameter tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for ((en, es), (n, t)) in expected.iter().zip(&self.params) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter mismatch: expected {en} {es:?}, found {n} {:?}",
                    t.shape()
                )));
            }
            if !seen.insert(n) {
                return Err(Error::invalid(format!("duplicate parameter name {n}")));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|(_, t)| tape.leaf(t.cast(), requires_grad))
            .collect()
    }
}

/// Runs `arch` on an `N×C×H×W` input whose parameters were registered as `vars`.
pub fn forward<T: Real>(arch: &Architecture, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
    let mut cursor = vars.iter().copied();
    let mut next = || {
        cursor
            .next()
            .ok_or_else(|| Error::invalid("network parameters exhausted"))
    };
    let mut h = x;
    for layer in &arch.layers {
        h = match layer {
            Layer::Conv {
                stride,
                pad,
                norm,
                act,
                ..
            } => {
                let (w, b) = (next()?, next()?);
                let mut y = tape.conv2d(h, w, Some(b), *stride, *pad)?;
                if *norm {
                    let (g, s) = (next()?, next()?);
                    y = tape.instance_norm(y, Some((g, s)))?;
                }
                activate(tape, y, *act)?
            }
            Layer::Residual { .. } => {
                let pad = Padding::symmetric(1, PadMode::Reflect);
                let (w1, b1, g1, s1) = (next()?, next()?, next()?, next()?);
                let (w2, b2, g2, s2) = (next()?, next()?, next()?, next()?);
                let y = tape.conv2d(h, w1, Some(b1), 1, pad)?;
                let y = tape.instance_norm(y, Some((g1, s1)))?;
                let y = tape.relu(y)?;
                let y = tape.conv2d(y, w2, Some(b2), 1, pad)?;
                let y = tape.instance_norm(y, Some((g2, s2)))?;
                tape.add(h, y)?
            }
            Layer::UpsampleNearest2x => tape.upsample_nearest2x(h)?,
        };
    }
    Ok(h)
}

fn activate<T: Real>(tape: &mut Tape<T>, y: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Identity => Ok(y),
        Activation::Relu => tape.relu(y),
        Activation::LeakyRelu => tape.leaky_relu(y, LEAKY_SLOPE),
        Activation::Sigmoid => tape.sigmoid(y),
        Activation::Tanh => tape.tanh(y),
    }
}

/// Parameters of all six networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub width_base: usize,
    pub image_channels: usize,
    pub image_size: usize,
    pub a_x: NetworkParams,
    pub a_y: NetworkParams,
    pub t_x: NetworkParams,
    pub t_y: NetworkParams,
    pub d_x: NetworkParams,
    pub d_y: NetworkParams,
}

/// Which network of the bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetId {
    AX,
    AY,
    TX,
    TY,
    DX,
    DY,
}

impl NetId {
    pub const ALL: [NetId; 6] = [NetId::AX, NetId::AY, NetId::TX, NetId::TY, NetId::DX, NetId::DY];
    pub const GENERATORS: [NetId; 4] = [NetId::AX, NetId::AY, NetId::TX, NetId::TY];

    pub fn name(self) -> &'static str {
        match self {
            NetId::AX => "a_x",
            NetId::AY => "a_y",
            NetId::TX => "t_x",
            NetId::TY => "t_y",
            NetId::DX => "d_x",
            NetId::DY => "d_y",
        }
    }
}

/// Translation direction: `XtoY` is 𝒢 (uses `A_X`, `T_X`), `YtoX` is ℱ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    XtoY,
    YtoX,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x2y" => Ok(Direction::XtoY),
            "y2x" => Ok(Direction::YtoX),
            other => Err(Error::invalid(format!(
                "unknown direction `{other}` (expected x2y or y2x)"
            ))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::XtoY => "x2y",
            Direction::YtoX => "y2x",
        })
    }
}

/// Test hook replacing the predicted attention map by a constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForcedAttention {
    Zero,
    One,
}

impl std::str::FromStr for ForcedAttention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "0" => Ok(ForcedAttention::Zero),
            "one" | "1" => Ok(ForcedAttention::One),
            other => Err(Error::invalid(format!("unknown forced attention `{other}`"))),
        }
    }
}

/// Bundle parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct BundleVars {
    vars: [Vec<Var>; 6],
}

impl BundleVars {
    pub fn get(&self, id: NetId) -> &[Var] {
        &self.vars[id as usize]
    }
}

/// The three outputs of a mapping, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct Translation {
    pub output: Var,
    pub attention: Var,
    pub transformed: Var,
}

/// The three outputs of a mapping, as plain `C×H×W` / `1×H×W` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationImages {
    pub output: Tensor<f32>,
    pub attention: Tensor<f32>,
    pub transformed: Tensor<f32>,
}

pub fn build_bundle(
    width_base: usize,
    image_channels: usize,
    image_size: usize,
    rng: &mut Prng,
) -> Result<ModelBundle> {
    if image_size == 0 || !image_size.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "image_size must be a positive multiple of 4, got {image_size}"
        )));
    }
    if width_base < 8 {
        return Err(Error::invalid(format!("width_base must be >= 8, got {width_base}")));
    }
    if image_channels == 0 {
        return Err(Error::invalid("image_channels must be positive"));
    }
    let mut net = |arch: Architecture| NetworkParams::init(arch, rng);
    let a_x = net(Architecture::attention(width_base, image_channels));
    let a_y = net(Architecture::attention(width_base, image_channels));
    let t_x = net(Architecture::transform(width_base, image_channels));
    let t_y = net(Architecture::transform(width_base, image_channels));
    let d_x = net(Architecture::discriminator(width_base, image_channels));
    let d_y = net(Architecture::discriminator(width_base, image_channels));
    Ok(ModelBundle {
        width_base,
        image_channels,
        image_size,
        a_x,
        a_y,
        t_x,
        t_y,
        d_x,
        d_y,
    })
}

impl ModelBundle {
    pub fn net(&self, id: NetId) -> &NetworkParams {
        match id {
            NetId::AX => &self.a_x,
            NetId::AY => &self.a_y,
            NetId::TX => &self.t_x,
            NetId::TY => &self.t_y,
            NetId::DX => &self.d_x,
            NetId::DY => &self.d_y,
        }
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut NetworkParams {
        match id {
            NetId::AX => &mut self.a_x,
            NetId::AY => &mut self.a_y,
            NetId::TX => &mut self.t_x,
            NetId::TY => &mut self.t_y,
            NetId::DX => &mut self.d_x,
            NetId::DY => &mut self.d_y,
        }
    }

    /// Registers every network; those listed in `trainable` require grad.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>, trainable: &[NetId]) -> Result<BundleVars> {
        let mut vars: [Vec<Var>; 6] = Default::default();
        for id in NetId::ALL {
            vars[id as usize] = self.net(id).register(tape, trainable.contains(&id))?;
        }
        Ok(BundleVars { vars })
    }

    /// Registers only the listed networks; the others get empty handles.
    pub fn register_only<T: Real>(&self, tape: &mut Tape<T>, nets: &[NetId], requires_grad: bool) -> Result<BundleVars> {
        let mut vars: [Vec<Var>; 6] = Default::default();
        for &id in nets {
            vars[id as usize] = self.net(id).register(tape, requires_grad)?;
        }
        Ok(BundleVars { vars })
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let ok = s.len() == 4 && s[1] == self.image_channels && s[2].is_multiple_of(4) && s[3].is_multiple_of(4);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: s.to_vec(),
                rhs: vec![1, self.image_channels, self.image_size, self.image_size],
            });
        }
        Ok(())
    }

    pub fn attention_on<T: Real>(&self, tape: &mut Tape<T>, vars: &BundleVars, id: NetId, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        forward(&self.net(id).arch, tape, vars.get(id), x)
    }

    pub fn discriminate_on<T: Real>(&self, tape: &mut Tape<T>, vars: &BundleVars, id: NetId, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        forward(&self.net(id).arch, tape, vars.get(id), x)
    }

    /// 𝒢 (`XtoY`) or ℱ (`YtoX`) on the tape.
    pub fn translate_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &BundleVars,
        dir: Direction,
        x: Var,
        forced: Option<ForcedAttention>,
    ) -> Result<Translation> {
        self.check_input(tape, x)?;
        let (a_id, t_id) = match dir {
            Direction::XtoY => (NetId::AX, NetId::TX),
            Direction::YtoX => (NetId::AY, NetId::TY),
        };
        let attention = match forced {
            None => forward(&self.net(a_id).arch, tape, vars.get(a_id), x)?,
            Some(f) => {
                let s = tape.shape(x);
                let v = match f {
                    ForcedAttention::Zero => 0.0,
                    ForcedAttention::One => 1.0,
                };
                tape.constant(Tensor::full([s[0], 1, s[2], s[3]], T::lit(v)))?
            }
        };
        let transformed = forward(&self.net(t_id).arch, tape, vars.get(t_id), x)?;
        let output = compose_on(tape, x, attention, transformed)?;
        Ok(Translation {
            output,
            attention,
            transformed,
        })
    }

    /// Eager translation of one `C×H×W` image.
    pub fn translate(
        &self,
        dir: Direction,
        image: &Tensor<f32>,
        forced: Option<ForcedAttention>,
    ) -> Result<TranslationImages> {
        let mut tape = Tape::<f32>::new();
        let nets = match dir {
            Direction::XtoY => [NetId::AX, NetId::TX],
            Direction::YtoX => [NetId::AY, NetId::TY],
        };
        let vars = self.register_only(&mut tape, &nets, false)?;
        let x = tape.constant(batched(image)?)?;
        let tr = self.translate_on(&mut tape, &vars, dir, x, forced)?;
        Ok(TranslationImages {
            output: unbatched(tape.value(tr.output))?,
            attention: unbatched(tape.value(tr.attention))?,
            transformed: unbatched(tape.value(tr.transformed))?,
        })
    }

    fn run_single(&self, id: NetId, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.register_only(&mut tape, &[id], false)?;
        let x = tape.constant(batched(image)?)?;
        self.check_input(&tape, x)?;
        let y = forward(&self.net(id).arch, &mut tape, vars.get(id), x)?;
        unbatched(tape.value(y))
    }
}

/// Adds a leading batch axis to a `C×H×W` image.
pub fn batched(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "image",
            lhs: s.to_vec(),
            rhs: vec![3, 0, 0],
        });
    }
    image.clone().reshape([1, s[0], s[1], s[2]])
}

fn unbatched(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    t.clone().reshape(s[1..].to_vec())
}

/// Attention map `1×H×W` of a `3×H×W` image, values in `[0, 1]`.
pub fn attention_forward(bundle: &ModelBundle, id: NetId, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    match id {
        NetId::AX | NetId::AY => bundle.run_single(id, image),
        _ => Err(Error::invalid(format!("{} is not an attention network", id.name()))),
    }
}

/// Transformed image, same shape as the input, values in `[-1, 1]`.
pub fn transform_forward(bundle: &ModelBundle, id: NetId, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    match id {
        NetId::TX | NetId::TY => bundle.run_single(id, image),
        _ => Err(Error::invalid(format!("{} is not a transformation network", id.name()))),
    }
}

/// Patch score map `1×h×w`.
pub fn discriminator_forward(bundle: &ModelBundle, id: NetId, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    match id {
        NetId::DX | NetId::DY => bundle.run_single(id, image),
        _ => Err(Error::invalid(format!("{} is not a discriminator", id.name()))),
    }
}

pub fn map_g(bundle: &ModelBundle, x: &Tensor<f32>) -> Result<TranslationImages> {
    bundle.translate(Direction::XtoY, x, None)
}

pub fn map_f(bundle: &ModelBundle, y: &Tensor<f32>) -> Result<TranslationImages> {
    bundle.translate(Direction::YtoX, y, None)
}

/// `a ⊙ t + (1 − a) ⊙ x` with the single-channel map broadcast over the
/// image channels. `x`, `t` are `N×C×H×W`, `a` is `N×1×H×W`.
pub fn compose_on<T: Real>(tape: &mut Tape<T>, x: Var, a: Var, t: Var) -> Result<Var> {
    let (xs, as_, ts) = (tape.shape(x).to_vec(), tape.shape(a).to_vec(), tape.shape(t).to_vec());
    if xs != ts || as_.len() != 4 || as_[1] != 1 || as_[0] != xs[0] || as_[2..] != xs[2..] {
        return Err(Error::ShapeMismatch {
            op: "compose",
            lhs: xs,
            rhs: as_,
        });
    }
    let a_full = if xs[1] == 1 {
        a
    } else {
        tape.concat(&vec![a; xs[1]], 1)?
    };
    let one = tape.constant(Tensor::scalar(T::one()))?;
    let keep = tape.sub(one, a_full)?;
    let fg = tape.mul(a_full, t)?;
    let bg = tape.mul(keep, x)?;
    tape.add(fg, bg)
}

/// Eager layered composition of `C×H×W` images with a `1×H×W` map.
pub fn compose(x: &Tensor<f32>, a: &Tensor<f32>, t: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("compose: attention values must lie in [0, 1]"));
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(batched(x)?)?;
    let av = tape.constant(batched(a)?)?;
    let tv = tape.constant(batched(t)?)?;
    let out = compose_on(&mut tape, xv, av, tv)?;
    unbatched(tape.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn bundle(seed: u64) -> ModelBundle {
        build_bundle(8, 3, 32, &mut Prng::new(seed, stream::INIT)).unwrap()
    }

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = Prng::new(seed, 99);
        Tensor::from_fn([3, 32, 32], |_| rng.uniform(-1.0, 1.0) as f32)
    }

    #[test]
    fn invalid_sizes_rejected() {
        let mut rng = Prng::new(0, 0);
        assert!(build_bundle(16, 3, 30, &mut rng).is_err());
        assert!(build_bundle(4, 3, 32, &mut rng).is_err());
    }

    #[test]
    fn heads_match_their_roles() {
        let b = bundle(0);
        let last = |n: &NetworkParams| n.arch.layers.last().cloned().unwrap();
        match last(&b.t_x) {
            Layer::Conv { out_ch, act, .. } => assert_eq!((out_ch, act), (3, Activation::Tanh)),
            _ => panic!(),
        }
        match last(&b.a_x) {
            Layer::Conv { out_ch, act, .. } => assert_eq!((out_ch, act), (1, Activation::Sigmoid)),
            _ => panic!(),
        }
        assert_eq!(b.a_x.arch, b.a_y.arch);
        assert_eq!(b.t_x.arch, b.t_y.arch);
        assert_eq!(b.d_x.arch, b.d_y.arch);
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(bundle(5), bundle(5));
        assert_ne!(bundle(5), bundle(6));
    }

    #[test]
    fn init_statistics() {
        let b = bundle(1);
        let (name, w) = &b.t_x.params()[0];
        assert_eq!(name, "stem.weight");
        let n = w.numel() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.005 && (std - 0.02).abs() < 0.004, "{mean} {std}");
        assert!(b.t_x.params()[1].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_names_unique_and_valid() {
        let b = bundle(2);
        for id in NetId::ALL {
            b.net(id).validate().unwrap();
        }
    }

    #[test]
    fn attention_is_unit_range_and_same_size() {
        let b = bundle(3);
        let a = attention_forward(&b, NetId::AX, &image(1)).unwrap();
        assert_eq!(a.shape(), &[1, 32, 32]);
        assert!(a.min_value() >= 0.0 && a.max_value() <= 1.0);
    }

    #[test]
    fn flipped_input_runs() {
        let b = bundle(3);
        let x = image(2);
        let flipped = Tensor::from_fn([3, 32, 32], |i| {
            let (c, r, col) = (i / 1024, (i / 32) % 32, i % 32);
            x.data()[c * 1024 + r * 32 + (31 - col)]
        });
        attention_forward(&b, NetId::AX, &flipped).unwrap();
    }

    #[test]
    fn transform_preserves_shape_and_range() {
        let b = bundle(4);
        let t = transform_forward(&b, NetId::TX, &image(3)).unwrap();
        assert_eq!(t.shape(), &[3, 32, 32]);
        assert!(t.min_value() >= -1.0 && t.max_value() <= 1.0);
        assert_eq!(t, transform_forward(&b, NetId::TX, &image(3)).unwrap());
    }

    #[test]
    fn zeroed_head_gives_zero_image() {
        let mut b = bundle(4);
        let n = b.t_x.params().len();
        for (i, p) in b.t_x.params_mut().enumerate() {
            if i >= n - 2 {
                p.data_mut().fill(0.0);
            }
        }
        let t = transform_forward(&b, NetId::TX, &image(5)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_scores_four_by_four_patches() {
        let b = bundle(6);
        let d = discriminator_forward(&b, NetId::DY, &image(4)).unwrap();
        assert_eq!(d.shape(), &[1, 4, 4]);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let b = bundle(6);
        let bad = Tensor::zeros([4, 32, 32]);
        assert!(attention_forward(&b, NetId::AX, &bad).is_err());
        assert!(transform_forward(&b, NetId::AX, &image(1)).is_err());
    }

    #[test]
    fn compose_degenerate_maps() {
        let x = image(7);
        let t = image(8);
        let zeros = Tensor::zeros([1, 32, 32]);
        let ones = Tensor::full([1, 32, 32], 1.0);
        assert_eq!(compose(&x, &zeros, &t).unwrap(), x);
        assert_eq!(compose(&x, &ones, &t).unwrap(), t);
    }

    #[test]
    fn compose_convex_midpoint() {
        let x = Tensor::full([3, 2, 2], 0.2f32);
        let t = Tensor::full([3, 2, 2], 0.8f32);
        let a = Tensor::full([1, 2, 2], 0.5f32);
        let out = compose(&x, &a, &t).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn compose_rejects_out_of_range_attention() {
        let x = Tensor::zeros([3, 2, 2]);
        let a = Tensor::full([1, 2, 2], 1.5f32);
        assert!(compose(&x, &a, &x).is_err());
    }

    #[test]
    fn forced_zero_attention_returns_input() {
        let b = bundle(9);
        let x = image(9);
        let out = b.translate(Direction::XtoY, &x, Some(ForcedAttention::Zero)).unwrap();
        assert_eq!(out.output, x);
        let out = b.translate(Direction::YtoX, &x, Some(ForcedAttention::One)).unwrap();
        assert_eq!(out.output, out.transformed);
    }

    #[test]
    fn mapping_output_in_range_and_deterministic() {
        let b = bundle(10);
        let x = image(10);
        let g = map_g(&b, &x).unwrap();
        assert!(g.output.min_value() >= -1.0 && g.output.max_value() <= 1.0);
        assert_eq!(g, map_g(&b, &x).unwrap());
        assert_eq!(map_f(&b, &x).unwrap().output.shape(), &[3, 32, 32]);
    }
}
