//! Self-check suites: optics identities, finite-difference gradient checks,
//! the second-order meta gradient against two independent routes, and the
//! equivariance loss.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::array::{Array, PadMode};
use crate::autodiff::{self, check_gradients, Tensor};
use crate::error::{Error, Result};
use crate::losses::{self, DemosaicWeights};
use crate::models::{self, BilinearDemosaicker, Demosaic, FeatureTransform, Head, NetConfig, TaskNet, ToyDemosaicker, ToyTask, UNet};
use crate::optics::{self, Pattern, PatternTransform, PolStack, StokesTensors};
use crate::params::{Grads, ParamSet, Role};
use crate::synth::Task;
use crate::trainer::{self, Batch, NetRefs, Params};

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-5;
pub const BILEVEL_FD_TOL: f64 = 1e-4;
pub const BILEVEL_ANALYTIC_TOL: f64 = 1e-6;
pub const ROUND_TRIP_TOL: f64 = 1e-12;
pub const EIT_ZERO_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Optics,
    Autodiff,
    Bilevel,
    Eit,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Optics, Suite::Autodiff, Suite::Bilevel, Suite::Eit];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Optics => "optics",
            Suite::Autodiff => "autodiff",
            Suite::Bilevel => "bilevel",
            Suite::Eit => "eit",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}` (expected optics, autodiff, bilevel or eit)")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), passed: value <= tolerance, value, tolerance }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_value(&self) -> f64 {
        self.checks.iter().map(|c| c.value).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Layout used by the imaging operator in the optics suite; a wrong
    /// layout must make the commutation checks fail.
    pub pattern: Pattern,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, pattern: Pattern::default() }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Optics => optics_checks(opts)?,
        Suite::Autodiff => autodiff_checks(opts.seed)?,
        Suite::Bilevel => bilevel_checks(opts.seed)?,
        Suite::Eit => eit_checks(opts.seed)?,
    };
    Ok(SuiteReport { suite, checks })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Physical Stokes field `[3, H, W]` each: `S0 > 0`, `DoLP < 1`.
pub fn random_stokes(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Array, Array, Array) {
    let s0 = uniform(rng, &[3, h, w], 0.05, 1.0);
    let rho = uniform(rng, &[3, h, w], 0.0, 0.999);
    let phi = uniform(rng, &[3, h, w], -std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
    let s1 = Array::from_fn(&[3, h, w], |k| s0.data()[k] * rho.data()[k] * (2.0 * phi.data()[k]).cos());
    let s2 = Array::from_fn(&[3, h, w], |k| s0.data()[k] * rho.data()[k] * (2.0 * phi.data()[k]).sin());
    (s0, s1, s2)
}

fn max_abs_diff(a: &Array, b: &Array) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Maximum error of the two Stokes round trips over `count` fields.
pub fn stokes_round_trip_error(seed: u64, count: usize, size: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fwd, mut back) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let (s0, s1, s2) = random_stokes(&mut rng, size, size);
        let stack = optics::stack_from_stokes(&s0, &s1, &s2)?;
        let m = optics::stokes_from_stack(&stack);
        fwd = fwd.max(max_abs_diff(&m.s0, &s0)).max(max_abs_diff(&m.s1, &s1)).max(max_abs_diff(&m.s2, &s2));
        let again = optics::stack_from_stokes(&m.s0, &m.s1, &m.s2)?;
        back = back.max(max_abs_diff(again.array(), stack.array()));
    }
    Ok((fwd, back))
}

/// Number of (stack, generator) pairs where the imaging operator does not
/// commute bit-for-bit with the pattern-preserving translation.
pub fn commutation_failures(seed: u64, count: usize, size: usize, pattern: Pattern) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..count {
        let stack = PolStack::new(uniform(&mut rng, &[12, size, size], 0.0, 1.0))?;
        let base = optics::operator_a_with(&stack, pattern)?.into_array();
        for g in PatternTransform::generators() {
            let moved = PolStack::new(optics::apply_transform(stack.array(), g, false)?)?;
            let lhs = optics::operator_a_with(&moved, pattern)?.into_array();
            let rhs = optics::apply_transform(&base, g, true)?;
            let same = lhs.data().iter().zip(rhs.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                failures += 1;
            }
        }
    }
    Ok(failures)
}

fn optics_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let (fwd, back) = stokes_round_trip_error(opts.seed, 100, 64)?;
    let fails = commutation_failures(opts.seed ^ 1, 20, 64, opts.pattern)?;
    Ok(vec![
        Check::at_most("stokes_from_stack(stack_from_stokes(s)) = s", fwd, ROUND_TRIP_TOL),
        Check::at_most("stack_from_stokes(stokes_from_stack(i)) = i", back, ROUND_TRIP_TOL),
        Check::at_most("A(T_g I) = T_g/2 A(I) bitwise (failing pairs)", fails as f64, 0.0),
    ])
}

type ScalarFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Weighted sum `sum(y * r)` so every output element gets a distinct weight.
fn probe(y: Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    Ok(y.mul_const(&r)?.sum())
}

fn op(f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static) -> ScalarFn {
    Box::new(move |x| probe(f(x)?, 99))
}

/// One finite-difference check.
pub struct GradCase {
    pub name: String,
    pub f: ScalarFn,
    pub inputs: Vec<Array>,
    pub step: f64,
}

/// Named first-order gradient cases: every differentiable op and every
/// loss, plus both U-Nets end to end.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize], lo: f64, hi: f64| uniform(&mut rng, shape, lo, hi);
    let mut cases: Vec<GradCase> = Vec::new();
    let a = u(&[2, 3], -1.0, 1.0);
    let b = u(&[2, 3], -1.0, 1.0);
    let pos = u(&[2, 3], 0.2, 2.0);
    let away = Array::from_fn(&[2, 3], |k| if k % 2 == 0 { 0.3 + 0.1 * k as f64 } else { -0.4 - 0.1 * k as f64 });
    let unit = u(&[2, 3], -0.9, 0.9);
    let row = u(&[1, 3], -1.0, 1.0);
    let m = u(&[3, 4], -1.0, 1.0);
    let img = u(&[2, 3, 6, 6], -1.0, 1.0);
    let wk = u(&[4, 3, 3, 3], -0.5, 0.5);
    let mut push = |name: &str, f: ScalarFn, inputs: Vec<Array>| {
        cases.push(GradCase { name: name.to_string(), f, inputs, step: FD_STEP })
    };
    push("add", op(|x| x[0].add(&x[1])), vec![a.clone(), b.clone()]);
    push("add_broadcast", op(|x| x[0].add(&x[1])), vec![a.clone(), row.clone()]);
    push("sub", op(|x| x[0].sub(&x[1])), vec![a.clone(), b.clone()]);
    push("mul", op(|x| x[0].mul(&x[1])), vec![a.clone(), b.clone()]);
    push("div", op(|x| x[0].div(&x[1])), vec![a.clone(), pos.clone()]);
    push("atan2", op(|x| x[0].atan2(&x[1])), vec![a.clone(), pos.clone()]);
    let c = b.clone();
    push("mul_const", op(move |x| x[0].mul_const(&c)), vec![a.clone()]);
    push("neg", op(|x| Ok(x[0].neg())), vec![a.clone()]);
    push("scale", op(|x| Ok(x[0].scale(-2.5))), vec![a.clone()]);
    push("add_scalar", op(|x| Ok(x[0].add_scalar(0.7))), vec![a.clone()]);
    push("relu", op(|x| Ok(x[0].relu())), vec![away.clone()]);
    push("leaky_relu", op(|x| Ok(x[0].leaky_relu(0.1))), vec![away.clone()]);
    push("sigmoid", op(|x| Ok(x[0].sigmoid())), vec![a.clone()]);
    push("tanh", op(|x| Ok(x[0].tanh())), vec![a.clone()]);
    push("exp", op(|x| Ok(x[0].exp())), vec![a.clone()]);
    push("ln", op(|x| Ok(x[0].ln())), vec![pos.clone()]);
    push("sqrt", op(|x| Ok(x[0].sqrt())), vec![pos.clone()]);
    push("square", op(|x| Ok(x[0].square())), vec![a.clone()]);
    push("abs", op(|x| Ok(x[0].abs())), vec![away.clone()]);
    push("sin", op(|x| Ok(x[0].sin())), vec![a.clone()]);
    push("cos", op(|x| Ok(x[0].cos())), vec![a.clone()]);
    push("acos_clamped", op(|x| Ok(x[0].acos_clamped(losses::ACOS_LO, losses::ACOS_HI))), vec![unit.clone()]);
    push("clamp", op(|x| Ok(x[0].clamp(-0.35, 0.35))), vec![away.clone()]);
    push("sum", Box::new(|x| Ok(x[0].square().sum())), vec![a.clone()]);
    push("mean", Box::new(|x| Ok(x[0].square().mean())), vec![a.clone()]);
    push("sum_axis", op(|x| x[0].sum_axis(1)), vec![a.clone()]);
    push("mean_axis", op(|x| x[0].mean_axis(0)), vec![a.clone()]);
    push("broadcast_to", op(|x| x[0].broadcast_to(&[4, 3])), vec![row.clone()]);
    push("sum_to", op(|x| x[0].sum_to(&[1, 3])), vec![a.clone()]);
    push("reshape", op(|x| x[0].reshape(&[3, 2])), vec![a.clone()]);
    push("matmul", op(|x| x[0].matmul(&x[1])), vec![a.clone(), m.reshaped(&[3, 4]).unwrap()]);
    push("transpose", op(|x| x[0].transpose()), vec![a.clone()]);
    push("conv2d_zero", op(|x| x[0].conv2d(&x[1], PadMode::Zero)), vec![img.clone(), wk.clone()]);
    push("conv2d_circular", op(|x| x[0].conv2d(&x[1], PadMode::Circular)), vec![img.clone(), wk.clone()]);
    push("concat", op(|x| Tensor::concat(&[&x[0], &x[1]], 1)), vec![a.clone(), b.clone()]);
    push("stack", op(|x| Tensor::stack(&[&x[0], &x[1]], 0)), vec![a.clone(), b.clone()]);
    push("slice", op(|x| x[0].slice(1, 1, 2)), vec![a.clone()]);
    push("pad_zero", op(|x| x[0].pad([1, 2, 0, 1], PadMode::Zero)), vec![img.clone()]);
    push("pad_circular", op(|x| x[0].pad([1, 2, 0, 1], PadMode::Circular)), vec![img.clone()]);
    push("shift", op(|x| x[0].shift(2, -1)), vec![img.clone()]);
    push("avgpool2", op(|x| x[0].avgpool2()), vec![img.clone()]);
    push("upsample2", op(|x| x[0].upsample2()), vec![img.clone()]);
    push("global_mean", op(|x| x[0].global_mean()), vec![img.clone()]);
    push("bilinear_up2", op(|x| optics::bilinear_up2_tensor(&x[0])), vec![img.clone()]);

    let stack = u(&[2, 12, 8, 8], 0.05, 1.0);
    let stack2 = u(&[2, 12, 8, 8], 0.05, 1.0);
    push("stokes_dolp", op(|x| StokesTensors::new(&x[0])?.dolp()), vec![stack.clone()]);
    push("stokes_aop", op(|x| StokesTensors::new(&x[0])?.aop()), vec![stack.clone()]);
    push("wrapped_aop_diff", op(|x| optics::wrapped_aop_diff_tensor(&x[0], &x[1])), vec![a.clone(), b.clone()]);
    push("feature_pack", op(|x| models::feature_pack_tensor(&x[0])), vec![stack.clone()]);
    push("normalize_vectors", op(|x| models::normalize_vectors(&x[0])), vec![u(&[2, 3, 4, 4], -1.0, 1.0)]);
    push("l1", Box::new(|x| losses::l1(&x[0], &x[1])), vec![stack.clone(), stack2.clone()]);
    push("l1_grad", Box::new(|x| losses::l1_grad(&x[0], &x[1])), vec![stack.clone(), stack2.clone()]);
    push("total_variation", Box::new(|x| losses::total_variation(&x[0])), vec![img.clone()]);
    push(
        "loss_d",
        Box::new(|x| losses::loss_d(&x[0], &x[1], &DemosaicWeights::default())),
        vec![stack.clone(), stack2.clone()],
    );
    let normals = |v: Array| models::normalize_vectors(&Tensor::constant(v)).unwrap().value().clone();
    let n1 = normals(u(&[2, 3, 8, 8], -1.0, 1.0));
    let n2 = normals(u(&[2, 3, 8, 8], -1.0, 1.0));
    let mask = Array::from_fn(&[2, 1, 8, 8], |k| if k % 3 == 0 { 0.0 } else { 1.0 });
    push(
        "loss_t_sfp",
        Box::new(move |x| losses::loss_t_sfp(&models::normalize_vectors(&x[0])?, &Tensor::constant(n2.clone()), &mask)),
        vec![n1],
    );
    push("loss_t_dfp", Box::new(|x| losses::loss_t_dfp(&x[0], &x[1])), vec![u(&[2, 3, 8, 8], 0.0, 1.0), u(&[2, 3, 8, 8], 0.0, 1.0)]);
    let ft = models::toy_feature_transform([3, 3, 3]);
    let ftw = ft.init(Role::Ft1, seed).unwrap().arrays();
    let mut ft_leaky = FeatureTransform::new([3, 3, 3]);
    ft_leaky.width = ft.width;
    let ftl = ft_leaky.init(Role::Ft2, seed).unwrap().arrays();
    let pyr = vec![u(&[2, 3, 4, 4], 0.1, 1.0), u(&[2, 3, 4, 4], -1.0, 1.0), u(&[2, 3, 4, 4], -1.0, 1.0)];
    let pyr2 = vec![u(&[2, 3, 4, 4], -1.0, 1.0), u(&[2, 3, 4, 4], -1.0, 1.0), u(&[2, 3, 4, 4], -1.0, 1.0)];
    let mut inputs = pyr.clone();
    inputs.extend(pyr2.clone());
    inputs.extend(ftw.values().cloned());
    inputs.extend(ftl.values().cloned());
    let names_a: Vec<String> = ftw.keys().cloned().collect();
    let names_b: Vec<String> = ftl.keys().cloned().collect();
    push(
        "loss_fa",
        Box::new(move |x| {
            let pa = ParamSet::from_tensors(Role::Ft1, names_a.iter().cloned().zip(x[6..9].iter().cloned()).collect());
            let pb = ParamSet::from_tensors(Role::Ft2, names_b.iter().cloned().zip(x[9..12].iter().cloned()).collect());
            losses::loss_fa(&ft.forward(&pa, &x[0..3])?, &ft_leaky.forward(&pb, &x[3..6])?)
        }),
        inputs,
    );
    // Whole networks take one flat input (image, then parameters) so the
    // error is measured over the full gradient; deep layers alone have
    // gradients near the finite-difference noise floor.
    let d = UNet::demosaicker(NetConfig { base_channels: 2, depth: 2, kernel: 3, padding: PadMode::Circular }, true);
    let dp = Demosaic::init(&d, seed).unwrap().arrays();
    let x = u(&[1, 12, 8, 8], 0.0, 1.0);
    let flat = flatten(&x, &dp);
    push(
        "unet_demosaicker",
        op(move |v| {
            let (x, p) = unflatten(&v[0], &[1, 12, 8, 8], &dp, Role::Demosaicker)?;
            Ok(Demosaic::forward(&d, &p, &x)?.out)
        }),
        vec![flat],
    );
    let t = UNet::task(NetConfig { base_channels: 2, depth: 2, kernel: 3, padding: PadMode::Zero }, Head::UnitNormal);
    let tp = TaskNet::init(&t, seed).unwrap().arrays();
    let x = u(&[1, 20, 16, 16], -1.0, 1.0);
    let flat = flatten(&x, &tp);
    push(
        "unet_task",
        op(move |v| {
            let (x, p) = unflatten(&v[0], &[1, 20, 16, 16], &tp, Role::Task)?;
            Ok(TaskNet::forward(&t, &p, &x)?.out)
        }),
        vec![flat],
    );
    let toy = ToyDemosaicker;
    let names: Vec<String> = toy.init(seed).unwrap().arrays().keys().cloned().collect();
    let tv = toy.init(seed).unwrap().arrays();
    let g = PatternTransform::translate(4, 0).unwrap();
    push(
        "loss_eit",
        Box::new(move |x| {
            let p = ParamSet::from_tensors(Role::Demosaicker, names.iter().cloned().zip(x[1..].iter().cloned()).collect());
            losses::loss_eit(&toy, &p, &x[0], g, &DemosaicWeights::default())
        }),
        std::iter::once(u(&[1, 12, 8, 8], 0.05, 1.0)).chain(tv.values().cloned()).collect(),
    );
    cases
}

/// Wraps `f` into `x -> sum_i <df/dx_i, r_i>`, whose gradient is a
/// Hessian-vector product computed by double backward.
pub fn directional_gradient(f: ScalarFn, seed: u64) -> ScalarFn {
    Box::new(move |x: &[Tensor]| {
        let x: Vec<Tensor> =
            x.iter().map(|t| if t.is_tracked() { t.clone() } else { Tensor::leaf(t.value().clone()) }).collect();
        let y = f(&x)?;
        let refs: Vec<&Tensor> = x.iter().collect();
        let g = autodiff::grad(&y, &refs, true)?;
        let mut total = Tensor::scalar(0.0);
        for (k, gi) in g.iter().enumerate() {
            total = total.add(&probe(gi.clone(), seed + k as u64)?)?;
        }
        Ok(total)
    })
}

/// Second-order cases: ops and losses that sit inside the inner update.
pub fn second_order_cases(seed: u64) -> Vec<GradCase> {
    const SMOOTH: [&str; 30] = [
        "add", "add_broadcast", "sub", "mul", "div", "atan2", "mul_const", "neg", "scale", "add_scalar", "sigmoid",
        "tanh", "exp", "ln", "sqrt", "square", "sin", "cos", "acos_clamped", "sum_axis", "matmul", "conv2d_zero",
        "conv2d_circular", "avgpool2", "upsample2", "global_mean", "stokes_dolp", "feature_pack", "normalize_vectors",
        "loss_fa",
    ];
    gradient_cases(seed)
        .into_iter()
        .filter(|c| SMOOTH.contains(&c.name.as_str()))
        .map(|c| GradCase { name: format!("{} (second order)", c.name), f: directional_gradient(c.f, seed + 1000), ..c })
        .collect()
}

fn flatten(x: &Array, p: &IndexMap<String, Array>) -> Array {
    let mut v = x.data().to_vec();
    for a in p.values() {
        v.extend_from_slice(a.data());
    }
    let n = v.len();
    Array::new(vec![n], v).expect("flat length")
}

/// Splits a flat tensor into an image of shape `xs` and parameters shaped like `like`.
fn unflatten(v: &Tensor, xs: &[usize], like: &IndexMap<String, Array>, role: Role) -> Result<(Tensor, ParamSet)> {
    let nx: usize = xs.iter().product();
    let x = v.slice(0, 0, nx)?.reshape(xs)?;
    let mut off = nx;
    let mut params = IndexMap::new();
    for (k, a) in like {
        params.insert(k.clone(), v.slice(0, off, a.len())?.reshape(a.shape())?);
        off += a.len();
    }
    Ok((x, ParamSet::from_tensors(role, params)))
}

fn autodiff_checks(seed: u64) -> Result<Vec<Check>> {
    gradient_cases(seed)
        .into_iter()
        .chain(second_order_cases(seed))
        .map(|c| Ok(Check::at_most(c.name, check_gradients(c.f, &c.inputs, c.step)?, FIRST_ORDER_TOL)))
        .collect()
}

/// Small networks and batches for the second-order checks.
pub struct ToySetup {
    pub d: ToyDemosaicker,
    pub t: ToyTask,
    pub ft1: FeatureTransform,
    pub ft2: FeatureTransform,
    pub params: Params,
    pub mtr: Batch,
    pub mts: Batch,
    pub lr_d: f64,
    pub lr_t: f64,
    pub weights: DemosaicWeights,
}

fn toy_batch(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Batch {
    let input = uniform(rng, &[n, 12, h, h], 0.05, 1.0);
    let reference = uniform(rng, &[n, 12, 2 * h, 2 * h], 0.05, 1.0);
    let raw = uniform(rng, &[n, 3, 2 * h, 2 * h], -1.0, 1.0);
    let target = trainer::renormalize(&raw).expect("renormalize");
    let mask = Array::from_fn(&[n, 1, 2 * h, 2 * h], |k| if k % 5 == 0 { 0.0 } else { 1.0 });
    Batch { input, reference, target, mask: Some(mask) }
}

impl ToySetup {
    pub fn new(seed: u64) -> Result<Self> {
        let d = ToyDemosaicker;
        let t = ToyTask { head: Head::UnitNormal };
        let ft1 = models::toy_feature_transform(Demosaic::pyramid_channels(&d));
        let ft2 = models::toy_feature_transform(TaskNet::pyramid_channels(&t));
        let params = Params {
            d: d.init(seed)?,
            t: TaskNet::init(&t, seed + 1)?,
            ft1: ft1.init(Role::Ft1, seed + 2)?,
            ft2: ft2.init(Role::Ft2, seed + 3)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
        let mtr = toy_batch(&mut rng, 2, 4);
        let mts = toy_batch(&mut rng, 2, 4);
        Ok(Self { d, t, ft1, ft2, params, mtr, mts, lr_d: 0.5, lr_t: 0.5, weights: DemosaicWeights::default() })
    }

    pub fn refs(&self) -> NetRefs<'_> {
        NetRefs { task: Task::Sfp, d: &self.d, t: &self.t, ft1: &self.ft1, ft2: &self.ft2 }
    }

    pub fn num_toy_params(&self) -> usize {
        self.params.d.num_scalars() + self.params.t.num_scalars()
    }
}

fn flat_grads(p: &ParamSet, g: &Grads) -> Vec<f64> {
    p.names().flat_map(|n| g[n].value().data().to_vec()).collect()
}

/// Meta gradient w.r.t. `(theta_1, theta_2)` by reverse mode through the
/// functional inner step.
pub fn bilevel_autodiff(s: &ToySetup) -> Result<Vec<f64>> {
    let g = trainer::meta_gradient(s.refs(), &s.params, &s.mtr, &s.mts, s.lr_d, s.lr_t, &s.weights)?;
    let mut v = flat_grads(&s.params.ft1, &g.ft1);
    v.extend(flat_grads(&s.params.ft2, &g.ft2));
    Ok(v)
}

/// Outer loss after a plain (first-order) inner step, as a function of the
/// transform parameters only.
fn composed_outer(s: &ToySetup, ft1: &ParamSet, ft2: &ParamSet) -> Result<f64> {
    let p = Params { d: s.params.d.fresh(), t: s.params.t.fresh(), ft1: ft1.clone(), ft2: ft2.clone() };
    let (d1, t1, _) = trainer::inner_update(s.refs(), &p, &s.mtr, s.lr_d, s.lr_t, false)?;
    Ok(trainer::outer_loss(s.refs(), &d1, &t1, &s.mts, &s.weights)?.0.item())
}

/// Central differences of the composed inner+outer map.
pub fn bilevel_fd(s: &ToySetup, h: f64) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for which in 0..2 {
        let set = if which == 0 { &s.params.ft1 } else { &s.params.ft2 };
        let base = set.flat();
        for (k, &v) in base.iter().enumerate() {
            let eval = |x: f64| -> Result<f64> {
                let moved = set.with_flat_value(k, x)?;
                if which == 0 {
                    composed_outer(s, &moved, &s.params.ft2)
                } else {
                    composed_outer(s, &s.params.ft1, &moved)
                }
            };
            out.push((eval(v + h)? - eval(v - h)?) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Scalar `k` of the flattened gradient set, still on the tape.
fn flat_element(p: &ParamSet, g: &Grads, mut k: usize) -> Result<Tensor> {
    for name in p.names() {
        let t = &g[name];
        if k < t.value().len() {
            let mut onehot = Array::zeros(t.shape());
            onehot.data_mut()[k] = 1.0;
            return Ok(t.mul_const(&onehot)?.sum());
        }
        k -= t.value().len();
    }
    Err(Error::Internal("flat gradient index out of range".into()))
}

/// Explicit assembly from mixed second derivatives:
/// `dL/dtheta_n = -lr_d * v^T H_dn - lr_t * u^T H_tn`, with
/// `v = dL_d/dtheta_d'`, `u = dL_t/dtheta_t'` and
/// `H_xn[i][j] = d^2 L_fa / (d theta_x[i] d theta_n[j])`.
pub fn bilevel_analytic(s: &ToySetup) -> Result<Vec<f64>> {
    let p = s.params.fresh();
    let l_fa = trainer::inner_loss(s.refs(), &p, &s.mtr)?;
    let g_d = p.d.grad(&l_fa, true)?;
    let g_t = p.t.grad(&l_fa, true)?;
    let probe_d = p.d.sgd_step(&g_d, s.lr_d, false)?;
    let probe_t = p.t.sgd_step(&g_t, s.lr_t, false)?;
    let (_, l_d, l_t) = trainer::outer_loss(s.refs(), &probe_d, &probe_t, &s.mts, &s.weights)?;
    let v = flat_grads(&probe_d, &probe_d.grad(&l_d, false)?);
    let u = flat_grads(&probe_t, &probe_t.grad(&l_t, false)?);
    let targets: Vec<&Tensor> = p.ft1.iter().chain(p.ft2.iter()).map(|(_, t)| t).collect();
    let n = p.ft1.num_scalars() + p.ft2.num_scalars();
    let mut out = vec![0.0; n];
    for (set, grads, coeff, lr) in [(&p.d, &g_d, &v, s.lr_d), (&p.t, &g_t, &u, s.lr_t)] {
        for (i, &c) in coeff.iter().enumerate() {
            let gi = flat_element(set, grads, i)?;
            if !gi.is_tracked() {
                continue;
            }
            let row: Vec<f64> = autodiff::grad(&gi, &targets, true)?.iter().flat_map(|t| t.value().data().to_vec()).collect();
            for (o, h) in out.iter_mut().zip(&row) {
                *o -= lr * c * h;
            }
        }
    }
    Ok(out)
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let n = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    n(&d) / n(a).max(n(b)).max(1e-300)
}

fn bilevel_checks(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for k in 0..3 {
        let s = ToySetup::new(seed.wrapping_add(10 * k))?;
        let ad = bilevel_autodiff(&s)?;
        let fd = bilevel_fd(&s, FD_STEP)?;
        let an = bilevel_analytic(&s)?;
        checks.push(Check::at_most(format!("outer gradient vs finite differences (case {k})"), relative_error(&ad, &fd), BILEVEL_FD_TOL));
        checks.push(Check::at_most(
            format!("outer gradient vs mixed-Hessian assembly (case {k})"),
            relative_error(&ad, &an),
            BILEVEL_ANALYTIC_TOL,
        ));
    }
    Ok(checks)
}

/// Largest equivariance loss of the bilinear demosaicker over every group
/// element, and the smallest one of a random U-Net over the generators.
pub fn eit_extremes(seed: u64, size: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::constant(uniform(&mut rng, &[1, 12, size / 2, size / 2], 0.0, 1.0));
    let w = DemosaicWeights::default();
    let lin = BilinearDemosaicker;
    let lp = lin.init(0)?;
    let mut worst: f64 = 0.0;
    for g in PatternTransform::elements(size, size) {
        worst = worst.max(losses::loss_eit(&lin, &lp, &z, g, &w)?.item());
    }
    let net = UNet::demosaicker(NetConfig::default(), false);
    let np = Demosaic::init(&net, seed)?;
    let mut least = f64::INFINITY;
    for g in PatternTransform::generators() {
        least = least.min(losses::loss_eit(&net, &np, &z, g, &w)?.item());
    }
    Ok((worst, least))
}

fn eit_checks(seed: u64) -> Result<Vec<Check>> {
    let (worst, least) = eit_extremes(seed, 32)?;
    Ok(vec![
        Check::at_most("bilinear demosaicker: max loss_eit over the group", worst, EIT_ZERO_TOL),
        Check { name: "random U-Net: min loss_eit over generators > 0".into(), passed: least > 0.0, value: least, tolerance: 0.0 },
    ])
}

/// Named tolerances, for reports.
pub fn tolerances() -> IndexMap<&'static str, f64> {
    IndexMap::from([
        ("fd_step", FD_STEP),
        ("first_order", FIRST_ORDER_TOL),
        ("bilevel_fd", BILEVEL_FD_TOL),
        ("bilevel_analytic", BILEVEL_ANALYTIC_TOL),
        ("round_trip", ROUND_TRIP_TOL),
        ("eit_zero", EIT_ZERO_TOL),
    ])
}
