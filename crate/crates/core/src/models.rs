//! Small convolutional networks: the demosaicker, the task networks, the
//! feature transforms, and toy versions of each for exact gradient oracles.
//!
//! Tensors are NCHW. Every network returns its prediction together with a
//! three-level feature pyramid ordered coarse to fine.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{Array, PadMode};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::optics::{self, StokesMaps, StokesTensors, CHANNELS, COLORS};
use crate::params::{ParamSet, Role};

pub const TASK_INPUT_CHANNELS: usize = 20;
/// Kernel of the linear skip path of the residual demosaicker. It spans one
/// 4x4 CPFA period in each direction from the centre.
pub const SKIP_KERNEL: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.1;
/// Added under the square root when normalizing predicted normals.
pub const NORMAL_EPS: f64 = 1e-12;
/// Regularizer in the differentiable AoP encoding `(S1, S2) / sqrt(S1^2 + S2^2 + d)`.
pub const AOP_ENCODING_EPS: f64 = 1e-6;
/// Lower bound on a feature-transform vector norm before division.
pub const FT_NORM_FLOOR: f64 = 1e-12;

pub struct Forward {
    pub out: Tensor,
    pub pyramid: Vec<Tensor>,
}

pub trait Demosaic {
    fn init(&self, seed: u64) -> Result<ParamSet>;
    /// `[N, 12, h, w] -> [N, 12, 2h, 2w]`.
    fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Forward>;
    fn pyramid_channels(&self) -> [usize; 3];
}

pub trait TaskNet {
    fn init(&self, seed: u64) -> Result<ParamSet>;
    /// `[N, 20, h, w] -> [N, 3, h, w]`.
    fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Forward>;
    fn pyramid_channels(&self) -> [usize; 3];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// Per-pixel normalization of a 3-channel output to unit length.
    UnitNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub kernel: usize,
    #[serde(default = "default_circular")]
    pub padding: PadMode,
}

fn default_circular() -> PadMode {
    PadMode::Circular
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { base_channels: 8, depth: 2, kernel: 3, padding: PadMode::Circular }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth < 2 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "network needs base_channels > 0, depth >= 2 and an odd kernel, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// U-Net with average-pool downsampling, nearest upsampling followed by a
/// conv, and concatenated skips. Optionally adds a 2x super-resolution stage.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub in_channels: usize,
    pub out_channels: usize,
    pub cfg: NetConfig,
    pub super_res: bool,
    /// Adds the bilinear 2x upsampling of the input to the output.
    pub residual: bool,
    pub head: Head,
}

fn conv_shapes(unet: &UNet) -> Vec<(String, usize, usize)> {
    let b = unet.cfg.base_channels;
    let d = unet.cfg.depth;
    let ch = |i: usize| b << i;
    let mut v = Vec::new();
    let mut prev = unet.in_channels;
    for i in 0..d {
        v.push((format!("enc{i}.c1"), prev, ch(i)));
        v.push((format!("enc{i}.c2"), ch(i), ch(i)));
        prev = ch(i);
    }
    v.push(("bott.c1".into(), ch(d - 1), ch(d)));
    v.push(("bott.c2".into(), ch(d), ch(d)));
    for i in (0..d).rev() {
        v.push((format!("up{i}"), ch(i + 1), ch(i)));
        v.push((format!("dec{i}.c1"), 2 * ch(i), ch(i)));
        v.push((format!("dec{i}.c2"), ch(i), ch(i)));
    }
    if unet.super_res {
        v.push(("sup.up".into(), b, b));
        v.push(("sup.c1".into(), b, b));
    }
    v.push(("head".into(), b, unet.out_channels));
    v
}

/// Uniform `+-sqrt(1 / fan_in)` initialization, drawn in declaration order.
fn init_convs(role: Role, layers: &[(String, usize, usize)], k: usize, bias: bool, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new(role);
    for (name, ci, co) in layers {
        let bound = (1.0 / (ci * k * k) as f64).sqrt();
        let w = Array::from_fn(&[*co, *ci, k, k], |_| rng.random_range(-bound..bound));
        p.insert(&format!("{name}.w"), w)?;
        if bias {
            p.insert(&format!("{name}.b"), Array::from_fn(&[*co], |_| rng.random_range(-bound..bound)))?;
        }
    }
    Ok(p)
}

fn conv(p: &ParamSet, name: &str, x: &Tensor, mode: PadMode) -> Result<Tensor> {
    let w = p.get(&format!("{name}.w"))?;
    let y = x.conv2d(w, mode)?;
    let b = p.get(&format!("{name}.b"))?;
    let co = b.shape()[0];
    y.add(&b.reshape(&[1, co, 1, 1])?)
}

fn conv_act(p: &ParamSet, name: &str, x: &Tensor, mode: PadMode) -> Result<Tensor> {
    Ok(conv(p, name, x, mode)?.leaky_relu(LEAKY_SLOPE))
}

/// Scales each 3-vector of a `[N, 3, H, W]` tensor to unit length.
pub fn normalize_vectors(v: &Tensor) -> Result<Tensor> {
    let n = v.square().sum_axis(1)?.add_scalar(NORMAL_EPS).sqrt();
    v.div(&n)
}

impl UNet {
    pub fn demosaicker(cfg: NetConfig, residual: bool) -> Self {
        Self { in_channels: CHANNELS, out_channels: CHANNELS, cfg, super_res: true, residual, head: Head::Linear }
    }

    pub fn task(cfg: NetConfig, head: Head) -> Self {
        Self { in_channels: TASK_INPUT_CHANNELS, out_channels: 3, cfg, super_res: false, residual: false, head }
    }

    /// Parameter count: every conv layer with `ci` inputs and `co` outputs
    /// contributes `co * ci * k^2 + co`.
    pub fn param_count(&self) -> usize {
        let k2 = self.cfg.kernel * self.cfg.kernel;
        let skip = if self.residual { CHANNELS * CHANNELS * SKIP_KERNEL * SKIP_KERNEL + CHANNELS } else { 0 };
        conv_shapes(self).iter().map(|(_, ci, co)| co * ci * k2 + co).sum::<usize>() + skip
    }

    fn run(&self, p: &ParamSet, x: &Tensor) -> Result<Forward> {
        self.cfg.validate()?;
        let s = x.shape();
        let d = self.cfg.depth;
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Invalid(format!("network expects [N, {}, H, W], got {s:?}", self.in_channels)));
        }
        if s[2] % (1 << d) != 0 || s[3] % (1 << d) != 0 {
            return Err(Error::Invalid(format!("spatial size {}x{} not divisible by 2^{d}", s[2], s[3])));
        }
        let m = self.cfg.padding;
        let mut skips = Vec::with_capacity(d);
        let mut h = x.clone();
        for i in 0..d {
            h = conv_act(p, &format!("enc{i}.c1"), &h, m)?;
            h = conv_act(p, &format!("enc{i}.c2"), &h, m)?;
            skips.push(h.clone());
            h = h.avgpool2()?;
        }
        h = conv_act(p, "bott.c1", &h, m)?;
        h = conv_act(p, "bott.c2", &h, m)?;
        let mut levels = vec![h.clone()];
        for i in (0..d).rev() {
            let u = conv_act(p, &format!("up{i}"), &h.upsample2()?, m)?;
            let c = Tensor::concat(&[&u, &skips[i]], 1)?;
            h = conv_act(p, &format!("dec{i}.c1"), &c, m)?;
            h = conv_act(p, &format!("dec{i}.c2"), &h, m)?;
            levels.push(h.clone());
        }
        if self.super_res {
            h = conv_act(p, "sup.up", &h.upsample2()?, m)?;
            h = conv_act(p, "sup.c1", &h, m)?;
            levels.push(h.clone());
        }
        let mut out = conv(p, "head", &h, m)?;
        if self.residual {
            let skip = conv(p, "skip", &x.upsample2()?, m)?;
            out = out.add(&skip)?.add(&optics::bilinear_up2_tensor(x)?)?;
        }
        if self.head == Head::UnitNormal {
            out = normalize_vectors(&out)?;
        }
        let pyramid = levels.split_off(levels.len() - 3);
        Ok(Forward { out, pyramid })
    }

    fn channels(&self) -> [usize; 3] {
        let b = self.cfg.base_channels;
        if self.super_res {
            [2 * b, b, b]
        } else {
            [4 * b, 2 * b, b]
        }
    }
}

impl Demosaic for UNet {
    /// With the bilinear residual on, the head and the linear skip path start
    /// at zero so the untrained network reproduces the bilinear baseline
    /// exactly.
    fn init(&self, seed: u64) -> Result<ParamSet> {
        let mut p = init_convs(Role::Demosaicker, &conv_shapes(self), self.cfg.kernel, true, seed)?;
        if self.residual {
            for name in ["head.w", "head.b"] {
                let shape = p.get(name)?.shape().to_vec();
                p.replace_value(name, Array::zeros(&shape))?;
            }
            p.insert("skip.w", Array::zeros(&[CHANNELS, CHANNELS, SKIP_KERNEL, SKIP_KERNEL]))?;
            p.insert("skip.b", Array::zeros(&[CHANNELS]))?;
        }
        Ok(p)
    }
    fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Forward> {
        self.run(p, x)
    }
    fn pyramid_channels(&self) -> [usize; 3] {
        self.channels()
    }
}

impl TaskNet for UNet {
    fn init(&self, seed: u64) -> Result<ParamSet> {
        init_convs(Role::Task, &conv_shapes(self), self.cfg.kernel, true, seed)
    }
    fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Forward> {
        self.run(p, x)
    }
    fn pyramid_channels(&self) -> [usize; 3] {
        self.channels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Tanh,
}

/// Per pyramid level: bias-free conv, activation, global mean, unit-norm
/// projection. The bias-free positively homogeneous block makes the output
/// direction invariant to positive rescaling of non-negative features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTransform {
    pub in_channels: [usize; 3],
    pub width: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub padding: PadMode,
}

impl FeatureTransform {
    pub fn new(in_channels: [usize; 3]) -> Self {
        Self { in_channels, width: 16, kernel: 3, activation: Activation::LeakyRelu, padding: PadMode::Circular }
    }

    pub fn init(&self, role: Role, seed: u64) -> Result<ParamSet> {
        let layers: Vec<_> =
            self.in_channels.iter().enumerate().map(|(j, &c)| (format!("level{j}"), c, self.width)).collect();
        init_convs(role, &layers, self.kernel, false, seed)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels.iter().map(|c| c * self.width * self.kernel * self.kernel).sum()
    }

    /// Pre-normalization vector of one level, `[N, width]`.
    pub fn raw_level(&self, p: &ParamSet, j: usize, f: &Tensor) -> Result<Tensor> {
        let w = p.get(&format!("level{j}.w"))?;
        let h = f.conv2d(w, self.padding)?;
        let h = match self.activation {
            Activation::LeakyRelu => h.leaky_relu(LEAKY_SLOPE),
            Activation::Tanh => h.tanh(),
        };
        h.global_mean()
    }

    /// Three unit (or zero) vectors, each `[N, width]`.
    pub fn forward(&self, p: &ParamSet, pyramid: &[Tensor]) -> Result<Vec<Tensor>> {
        if pyramid.len() != 3 {
            return Err(Error::Invalid(format!("feature pyramid must have 3 levels, got {}", pyramid.len())));
        }
        pyramid.iter().enumerate().map(|(j, f)| unit_rows(&self.raw_level(p, j, f)?)).collect()
    }
}

/// Divides each row of `[N, C]` by `max(|row|, floor)`; zero rows stay zero.
pub fn unit_rows(v: &Tensor) -> Result<Tensor> {
    // The tiny constant keeps the square root differentiable at zero without
    // changing any representable non-zero norm.
    let n = v.square().sum_axis(1)?.add_scalar(1e-300).sqrt().clamp(FT_NORM_FLOOR, f64::INFINITY);
    v.div(&n)
}

/// Differentiable task input from a stack batch `[N, 12, H, W]`:
/// `[S0 x3, S1 x3, S2 x3, DoLP x3, cos 2AoP x3, sin 2AoP x3, x, y]`.
pub fn feature_pack_tensor(x: &Tensor) -> Result<Tensor> {
    let st = StokesTensors::new(x)?;
    let dolp = st.dolp()?;
    let r = st.s1.square().add(&st.s2.square())?.add_scalar(AOP_ENCODING_EPS).sqrt();
    let c2 = st.s1.div(&r)?;
    let s2 = st.s2.div(&r)?;
    let s = x.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let coords = Tensor::constant(coordinate_channels(n, h, w));
    Tensor::concat(&[&st.s0, &st.s1, &st.s2, &dolp, &c2, &s2, &coords], 1)
}

fn coordinate_channels(n: usize, h: usize, w: usize) -> Array {
    let hw = h * w;
    let sx = 1.0 / (w.max(2) - 1) as f64;
    let sy = 1.0 / (h.max(2) - 1) as f64;
    Array::from_fn(&[n, 2, h, w], |i| {
        let k = i % hw;
        if (i / hw) % 2 == 0 {
            (k % w) as f64 * sx
        } else {
            (k / w) as f64 * sy
        }
    })
}

/// Task input from exact Stokes maps, `[20, H, W]`, AoP encoded as
/// `(cos 2 AoP, sin 2 AoP)`.
pub fn feature_pack(s: &StokesMaps, h: usize, w: usize) -> Result<Array> {
    if s.s0.shape() != [COLORS, h, w] {
        return Err(Error::shape("feature_pack", s.s0.shape(), &[COLORS, h, w]));
    }
    let cos2 = s.aop.map(|a| (2.0 * a).cos());
    let sin2 = s.aop.map(|a| (2.0 * a).sin());
    let coords = coordinate_channels(1, h, w).reshaped(&[2, h, w])?;
    Array::concat(&[&s.s0, &s.s1, &s.s2, &s.dolp, &cos2, &sin2, &coords], 0)
}

/// Two-parameter-per-channel demosaicker `up(x) * g + b` with pyramid levels
/// `tanh` of pooled and full-resolution channel groups. 24 parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyDemosaicker;

impl Demosaic for ToyDemosaicker {
    fn init(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new(Role::Demosaicker);
        p.insert("gain", Array::from_fn(&[1, CHANNELS, 1, 1], |_| rng.random_range(0.5..1.5)))?;
        p.insert("bias", Array::from_fn(&[1, CHANNELS, 1, 1], |_| rng.random_range(-0.2..0.2)))?;
        Ok(p)
    }

    fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Forward> {
        let out = x.upsample2()?.mul(p.get("gain")?)?.add(p.get("bias")?)?;
        let pyramid = vec![
            out.slice(1, 0, 4)?.avgpool2()?.tanh(),
            out.slice(1, 4, 4)?.tanh(),
            out.slice(1, 8, 4)?.sin(),
        ];
        Ok(Forward { out, pyramid })
    }

    fn pyramid_channels(&self) -> [usize; 3] {
        [4, 4, 4]
    }
}

/// 1x1 conv from the first four task-input channels to three outputs.
/// 15 parameters.
#[derive(Clone, Copy, Debug)]
pub struct ToyTask {
    pub head: Head,
}

impl TaskNet for ToyTask {
    fn init(&self, seed: u64) -> Result<ParamSet> {
        init_convs(Role::Task, &[("c".into(), 4, 3)], 1, true, seed)
    }

    fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Forward> {
        let h = conv(p, "c", &x.slice(1, 0, 4)?, PadMode::Zero)?;
        let out = match self.head {
            Head::Linear => h.clone(),
            Head::UnitNormal => normalize_vectors(&h)?,
        };
        let pyramid = vec![h.avgpool2()?.tanh(), h.tanh(), h.sin()];
        Ok(Forward { out, pyramid })
    }

    fn pyramid_channels(&self) -> [usize; 3] {
        [3, 3, 3]
    }
}

/// Parameter-free bilinear 2x upsampling: linear and equivariant to
/// circular shifts by even offsets.
#[derive(Clone, Copy, Debug, Default)]
pub struct BilinearDemosaicker;

impl Demosaic for BilinearDemosaicker {
    fn init(&self, _seed: u64) -> Result<ParamSet> {
        Ok(ParamSet::new(Role::Demosaicker))
    }

    fn forward(&self, _p: &ParamSet, x: &Tensor) -> Result<Forward> {
        let out = crate::optics::bilinear_up2_tensor(x)?;
        let pyramid = vec![out.slice(1, 0, 4)?.avgpool2()?, out.slice(1, 4, 4)?, out.slice(1, 8, 4)?];
        Ok(Forward { out, pyramid })
    }

    fn pyramid_channels(&self) -> [usize; 3] {
        [4, 4, 4]
    }
}

/// Smooth 1x1 feature transform for the toy networks.
pub fn toy_feature_transform(in_channels: [usize; 3]) -> FeatureTransform {
    FeatureTransform { in_channels, width: 2, kernel: 1, activation: Activation::Tanh, padding: PadMode::Zero }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::constant(Array::from_fn(shape, |_| rng.random_range(0.0..1.0)))
    }

    #[test]
    fn demosaicker_doubles_resolution_and_taps_three_levels() {
        let net = UNet::demosaicker(NetConfig::default(), false);
        let p = Demosaic::init(&net, 1).unwrap();
        let f = Demosaic::forward(&net, &p, &input(&[1, 12, 32, 32], 2)).unwrap();
        assert_eq!(f.out.shape(), &[1, 12, 64, 64]);
        let shapes: Vec<_> = f.pyramid.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 16, 16, 16], vec![1, 8, 32, 32], vec![1, 8, 64, 64]]);
    }

    #[test]
    fn param_count_matches_layer_sum() {
        let b = 8;
        let c = |ci: usize, co: usize| co * ci * 9 + co;
        let expected = c(12, b) + c(b, b) + c(b, 2 * b) + c(2 * b, 2 * b) + c(2 * b, 4 * b) + c(4 * b, 4 * b)
            + c(4 * b, 2 * b) + c(4 * b, 2 * b) + c(2 * b, 2 * b)
            + c(2 * b, b) + c(2 * b, b) + c(b, b)
            + c(b, b) + c(b, b)
            + c(b, 12);
        let net = UNet::demosaicker(NetConfig::default(), false);
        assert_eq!(net.param_count(), expected);
        assert_eq!(Demosaic::init(&net, 0).unwrap().num_scalars(), expected);
        let res = UNet::demosaicker(NetConfig::default(), true);
        let with_skip = expected + 12 * 12 * 25 + 12;
        assert_eq!(res.param_count(), with_skip);
        assert_eq!(Demosaic::init(&res, 0).unwrap().num_scalars(), with_skip);
    }

    #[test]
    fn residual_demosaicker_starts_at_bilinear() {
        let net = UNet::demosaicker(NetConfig::default(), true);
        let p = Demosaic::init(&net, 3).unwrap();
        let x = input(&[1, 12, 8, 8], 4);
        let out = Demosaic::forward(&net, &p, &x).unwrap().out;
        assert_eq!(out.value().data(), optics::bilinear_up2_tensor(&x).unwrap().value().data());
    }

    #[test]
    fn zero_head_gives_bias_map() {
        let net = UNet::demosaicker(NetConfig::default(), false);
        let mut p = Demosaic::init(&net, 3).unwrap();
        p.replace_value("head.w", Array::zeros(&[12, 8, 3, 3])).unwrap();
        let bias = p.get("head.b").unwrap().value().clone();
        let out = Demosaic::forward(&net, &p, &input(&[1, 12, 8, 8], 4)).unwrap().out;
        for c in 0..12 {
            let plane = &out.value().data()[c * 256..(c + 1) * 256];
            assert!(plane.iter().all(|v| *v == bias.data()[c]));
        }
    }

    #[test]
    fn sfp_head_is_unit_norm() {
        let net = UNet::task(NetConfig::default(), Head::UnitNormal);
        let p = TaskNet::init(&net, 5).unwrap();
        let out = TaskNet::forward(&net, &p, &input(&[2, 20, 16, 16], 6)).unwrap().out;
        let d = out.value().data();
        for n in 0..2 {
            for k in 0..256 {
                let s: f64 = (0..3).map(|c| d[(n * 3 + c) * 256 + k].powi(2)).sum();
                assert!((s.sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn feature_transform_zero_input_gives_zero_vectors() {
        let ft = FeatureTransform::new([16, 8, 8]);
        let p = ft.init(Role::Ft1, 0).unwrap();
        let pyr = vec![
            Tensor::constant(Array::zeros(&[1, 16, 4, 4])),
            Tensor::constant(Array::zeros(&[1, 8, 8, 8])),
            Tensor::constant(Array::zeros(&[1, 8, 16, 16])),
        ];
        let v = ft.forward(&p, &pyr).unwrap();
        assert!(v.iter().all(|t| t.shape() == [1, 16] && t.value().data().iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn feature_pack_layout() {
        let h = 4;
        let w = 8;
        let aop = Array::from_fn(&[3, h, w], |i| i as f64 * 0.1 - 1.0);
        let maps = |a: Array| StokesMaps {
            s0: Array::full(&[3, h, w], 1.0),
            s1: Array::zeros(&[3, h, w]),
            s2: Array::zeros(&[3, h, w]),
            dolp: Array::zeros(&[3, h, w]),
            aop: a,
        };
        let a = feature_pack(&maps(aop.clone()), h, w).unwrap();
        let b = feature_pack(&maps(aop.map(|v| v + std::f64::consts::PI)), h, w).unwrap();
        assert_eq!(a.shape(), &[20, h, w]);
        let hw = h * w;
        assert_eq!([a.data()[18 * hw], a.data()[19 * hw]], [0.0, 0.0]);
        assert_eq!([a.data()[19 * hw - 1], a.data()[20 * hw - 1]], [1.0, 1.0]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_nets_are_small() {
        let d = ToyDemosaicker.init(0).unwrap().num_scalars();
        let t = ToyTask { head: Head::UnitNormal }.init(0).unwrap().num_scalars();
        let f1 = toy_feature_transform([4, 4, 4]).param_count();
        let f2 = toy_feature_transform([3, 3, 3]).param_count();
        assert!(d <= 50 && t <= 50 && f1 <= 50 && f2 <= 50, "{d} {t} {f1} {f2}");
    }
}
