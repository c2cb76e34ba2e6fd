//! Polarization algebra and the CPFA imaging operator.
//!
//! A stack is stored channel-major as `[12, H, W]` (or `[N, 12, H, W]` for a
//! batch) with channel `4 * color + angle`, colors `(R, G, B)` and angles
//! `(0, 45, 90, 135)` degrees.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, RngExt};

use crate::array::Array;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const COLORS: usize = 3;
pub const ANGLES: usize = 4;
pub const CHANNELS: usize = COLORS * ANGLES;
pub const ANGLES_DEG: [f64; ANGLES] = [0.0, 45.0, 90.0, 135.0];

/// S0 below this has DoLP defined as 0.
pub const EPS_S0: f64 = 1e-8;

pub fn channel(color: usize, angle: usize) -> usize {
    color * ANGLES + angle
}

/// Color-polarization image, `[12, H, W]`, finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct PolStack(Array);

impl PolStack {
    pub fn new(a: Array) -> Result<Self> {
        let s = a.shape();
        if s.len() != 3 || s[0] != CHANNELS {
            return Err(Error::Invalid(format!("stack must be [12, H, W], got {s:?}")));
        }
        if let Some(i) = a.data().iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("stack value {} at flat index {i} is negative or non-finite", a.data()[i])));
        }
        Ok(Self(a))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn get(&self, color: usize, angle: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.0.data()[(channel(color, angle) * h + y) * w + x]
    }

    pub fn array(&self) -> &Array {
        &self.0
    }

    pub fn into_array(self) -> Array {
        self.0
    }
}

/// Per-pixel Stokes features, each `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StokesMaps {
    pub s0: Array,
    pub s1: Array,
    pub s2: Array,
    pub dolp: Array,
    /// Radians in `[-pi/2, pi/2)`.
    pub aop: Array,
}

/// AoP from `(S1, S2)`, wrapped into `[-pi/2, pi/2)`.
pub fn aop(s1: f64, s2: f64) -> f64 {
    let a = 0.5 * s2.atan2(s1);
    if a >= FRAC_PI_2 {
        a - PI
    } else {
        a
    }
}

pub fn dolp(s0: f64, s1: f64, s2: f64) -> f64 {
    if s0 <= EPS_S0 {
        0.0
    } else {
        s1.hypot(s2) / s0
    }
}

/// Stokes vector of one pixel from its four polarizer intensities.
pub fn stokes_pixel(i: [f64; ANGLES]) -> [f64; 3] {
    [(i[0] + i[1] + i[2] + i[3]) / 2.0, i[0] - i[2], i[1] - i[3]]
}

/// Malus-law intensities `(S0 + S1 cos 2t + S2 sin 2t) / 2` at the four angles.
/// The cosines and sines of `2t` are exact (0, +-1), so no trig is evaluated.
pub fn malus_pixel(s: [f64; 3]) -> [f64; ANGLES] {
    [(s[0] + s[1]) / 2.0, (s[0] + s[2]) / 2.0, (s[0] - s[1]) / 2.0, (s[0] - s[2]) / 2.0]
}

pub fn stokes_from_stack(p: &PolStack) -> StokesMaps {
    let (h, w) = (p.height(), p.width());
    let hw = h * w;
    let d = p.array().data();
    let mut maps = [(); 5].map(|_| vec![0.0; COLORS * hw]);
    for c in 0..COLORS {
        for k in 0..hw {
            let i = [0, 1, 2, 3].map(|a| d[channel(c, a) * hw + k]);
            let [s0, s1, s2] = stokes_pixel(i);
            let o = c * hw + k;
            maps[0][o] = s0;
            maps[1][o] = s1;
            maps[2][o] = s2;
            maps[3][o] = dolp(s0, s1, s2);
            maps[4][o] = aop(s1, s2);
        }
    }
    let shape = vec![COLORS, h, w];
    let [s0, s1, s2, dl, ao] = maps.map(|m| Array::new(shape.clone(), m).expect("stokes map shape"));
    StokesMaps { s0, s1, s2, dolp: dl, aop: ao }
}

/// Inverse of [`stokes_from_stack`] for physical Stokes fields (`[3, H, W]` each).
pub fn stack_from_stokes(s0: &Array, s1: &Array, s2: &Array) -> Result<PolStack> {
    let s = s0.shape();
    if s.len() != 3 || s[0] != COLORS {
        return Err(Error::Invalid(format!("Stokes maps must be [3, H, W], got {s:?}")));
    }
    if s1.shape() != s || s2.shape() != s {
        return Err(Error::shape("stack_from_stokes", s1.shape(), s2.shape()));
    }
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let mut out = vec![0.0; CHANNELS * hw];
    for c in 0..COLORS {
        for k in 0..hw {
            let o = c * hw + k;
            let v = [s0.data()[o], s1.data()[o], s2.data()[o]];
            // One ulp of slack so that fields built with DoLP = 1 are accepted.
            if !(v[0] >= 0.0) || v[1] * v[1] + v[2] * v[2] > v[0] * v[0] * (1.0 + 4.0 * f64::EPSILON) {
                return Err(Error::NonPhysicalStokes { index: vec![c, k / w, k % w] });
            }
            for (a, i) in malus_pixel(v).into_iter().enumerate() {
                out[channel(c, a) * hw + k] = i.max(0.0);
            }
        }
    }
    PolStack::new(Array::new(vec![CHANNELS, h, w], out)?)
}

/// Wrapped AoP distance `min_k |a - b + k pi|`, in `[0, pi/2]`.
pub fn wrapped_aop_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// CPFA layout: Bayer color constant over square blocks of `color_block`
/// pixels (RGGB over block indices), polarizer angles over 2x2 blocks laid
/// out as `[[90, 45], [135, 0]]`. The sensor uses `color_block = 2`; other
/// values exist to test that the pipeline notices a wrong layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pattern {
    color_block: usize,
}

impl Default for Pattern {
    fn default() -> Self {
        Self { color_block: 2 }
    }
}

/// Angle index at within-block position `(y % 2, x % 2)`.
const ANGLE_LAYOUT: [[usize; 2]; 2] = [[2, 1], [3, 0]];

impl Pattern {
    /// Deliberately wrong layout (colors over 4x4 blocks, period 8).
    pub fn mutated() -> Self {
        Self { color_block: 4 }
    }

    pub fn period(&self) -> usize {
        2 * self.color_block
    }

    pub fn color_at(&self, y: usize, x: usize) -> usize {
        rggb((y / self.color_block) % 2, (x / self.color_block) % 2)
    }

    pub fn angle_at(&self, y: usize, x: usize) -> usize {
        ANGLE_LAYOUT[y % 2][x % 2]
    }

    /// Color of pixel `(i, j)` of a regrouped single-angle view.
    pub fn view_color_at(&self, i: usize, j: usize) -> usize {
        let s = self.color_block / 2;
        rggb((i / s) % 2, (j / s) % 2)
    }

    /// Offset of angle `a` within each 2x2 block.
    pub fn angle_offset(&self, a: usize) -> (usize, usize) {
        for (dy, row) in ANGLE_LAYOUT.iter().enumerate() {
            for (dx, &k) in row.iter().enumerate() {
                if k == a {
                    return (dy, dx);
                }
            }
        }
        unreachable!("angle index {a} out of range")
    }
}

fn rggb(by: usize, bx: usize) -> usize {
    match (by, bx) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

fn check_dims(h: usize, w: usize, period: usize, op: &str) -> Result<()> {
    if h % period != 0 || w % period != 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("{op}: size {h}x{w} must be a positive multiple of {period}")));
    }
    Ok(())
}

/// Lossless restriction of a stack to the single sample each pixel sees. `[H, W]`.
pub fn cpfa_mosaic(p: &PolStack, pattern: Pattern) -> Result<Array> {
    let (h, w) = (p.height(), p.width());
    check_dims(h, w, pattern.period(), "cpfa_mosaic")?;
    Ok(Array::from_fn(&[h, w], |k| {
        let (y, x) = (k / w, k % w);
        p.get(pattern.color_at(y, x), pattern.angle_at(y, x), y, x)
    }))
}

/// Four `[H/2, W/2]` single-angle Bayer mosaics, stacked as `[4, H/2, W/2]`.
pub fn regroup_dofp(raw: &Array, pattern: Pattern) -> Result<Array> {
    let s = raw.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("raw mosaic must be [H, W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    check_dims(h, w, 2, "regroup_dofp")?;
    let (hh, wh) = (h / 2, w / 2);
    let mut out = vec![0.0; ANGLES * hh * wh];
    for a in 0..ANGLES {
        let (dy, dx) = pattern.angle_offset(a);
        for i in 0..hh {
            for j in 0..wh {
                out[(a * hh + i) * wh + j] = raw.data()[(2 * i + dy) * w + 2 * j + dx];
            }
        }
    }
    Array::new(vec![ANGLES, hh, wh], out)
}

/// Inverse of [`regroup_dofp`].
pub fn interleave_dofp(views: &Array, pattern: Pattern) -> Result<Array> {
    let s = views.shape();
    if s.len() != 3 || s[0] != ANGLES {
        return Err(Error::Invalid(format!("views must be [4, h, w], got {s:?}")));
    }
    let (hh, wh) = (s[1], s[2]);
    let (h, w) = (2 * hh, 2 * wh);
    let mut out = vec![0.0; h * w];
    for a in 0..ANGLES {
        let (dy, dx) = pattern.angle_offset(a);
        for i in 0..hh {
            for j in 0..wh {
                out[(2 * i + dy) * w + 2 * j + dx] = views.data()[(a * hh + i) * wh + j];
            }
        }
    }
    Array::new(vec![h, w], out)
}

const K_GREEN: [[f64; 3]; 3] = [[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]];
const K_RED_BLUE: [[f64; 3]; 3] = [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];

/// Bilinear demosaicking of one Bayer view `[h, w]` into `[3, h, w]`, with
/// circular boundary. Implemented as normalized convolution, which reduces to
/// the classical bilinear kernels (all normalizers equal 1) on the sensor
/// layout and stays defined on other layouts.
pub fn bayer_bilinear(view: &Array, pattern: Pattern) -> Result<Array> {
    let s = view.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("Bayer view must be [h, w], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    check_dims(h, w, pattern.period() / 2, "bayer_bilinear")?;
    let v = view.data();
    let mut out = vec![0.0; COLORS * h * w];
    for c in 0..COLORS {
        let k = if c == 1 { &K_GREEN } else { &K_RED_BLUE };
        for y in 0..h {
            for x in 0..w {
                let (mut num, mut den) = (0.0, 0.0);
                for (ky, row) in k.iter().enumerate() {
                    let yy = (y + h + ky - 1) % h;
                    for (kx, &kw) in row.iter().enumerate() {
                        let xx = (x + w + kx - 1) % w;
                        if kw != 0.0 && pattern.view_color_at(yy, xx) == c {
                            num += kw * v[yy * w + xx];
                            den += kw;
                        }
                    }
                }
                if den == 0.0 {
                    return Err(Error::Invalid(format!("bayer_bilinear: no color {c} samples around ({y}, {x})")));
                }
                out[(c * h + y) * w + x] = num / den;
            }
        }
    }
    Array::new(vec![COLORS, h, w], out)
}

/// Imaging operator: mosaic, regroup, then per-view Bayer interpolation.
/// `[12, H, W] -> [12, H/2, W/2]`.
pub fn operator_a(p: &PolStack) -> Result<PolStack> {
    operator_a_with(p, Pattern::default())
}

pub fn operator_a_with(p: &PolStack, pattern: Pattern) -> Result<PolStack> {
    raw_to_stack(&cpfa_mosaic(p, pattern)?, pattern)
}

/// Second half of the imaging operator: regroup a raw `[H, W]` CPFA frame
/// into angle views and interpolate each view's Bayer mosaic.
pub fn raw_to_stack(raw: &Array, pattern: Pattern) -> Result<PolStack> {
    let views = regroup_dofp(raw, pattern)?;
    let (hh, wh) = (views.shape()[1], views.shape()[2]);
    let mut out = vec![0.0; CHANNELS * hh * wh];
    for a in 0..ANGLES {
        let rgb = bayer_bilinear(&views.slice(0, a, 1)?.reshaped(&[hh, wh])?, pattern)?;
        for c in 0..COLORS {
            let dst = channel(c, a) * hh * wh;
            out[dst..dst + hh * wh].copy_from_slice(&rgb.data()[c * hh * wh..(c + 1) * hh * wh]);
        }
    }
    PolStack::new(Array::new(vec![CHANNELS, hh, wh], out)?)
}

/// Applies [`operator_a`] to every element of a `[N, 12, H, W]` batch.
pub fn operator_a_batch(batch: &Array) -> Result<Array> {
    map_batch(batch, |p| operator_a(&p).map(PolStack::into_array))
}

pub(crate) fn map_batch(batch: &Array, f: impl Fn(PolStack) -> Result<Array>) -> Result<Array> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != CHANNELS {
        return Err(Error::Invalid(format!("stack batch must be [N, 12, H, W], got {s:?}")));
    }
    let parts = (0..s[0])
        .map(|n| {
            let item = batch.slice(0, n, 1)?.reshaped(&s[1..])?;
            let out = f(PolStack::new(item)?)?;
            let mut shape = vec![1];
            shape.extend_from_slice(out.shape());
            out.reshaped(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Array> = parts.iter().collect();
    Array::concat(&refs, 0)
}

/// Circular translation by a multiple of the 4-pixel CPFA super-period.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatternTransform {
    dy: isize,
    dx: isize,
}

impl PatternTransform {
    pub fn translate(dy: isize, dx: isize) -> Result<Self> {
        if dy % 4 != 0 || dx % 4 != 0 {
            return Err(Error::Invalid(format!("translation ({dy}, {dx}) does not preserve the 4-pixel CPFA period")));
        }
        Ok(Self { dy, dx })
    }

    pub fn identity() -> Self {
        Self { dy: 0, dx: 0 }
    }

    pub fn offset(&self) -> (isize, isize) {
        (self.dy, self.dx)
    }

    /// Offset acting on half-resolution images.
    pub fn half_offset(&self) -> (isize, isize) {
        (self.dy / 2, self.dx / 2)
    }

    pub fn compose(&self, o: &Self) -> Self {
        Self { dy: self.dy + o.dy, dx: self.dx + o.dx }
    }

    pub fn inverse(&self) -> Self {
        Self { dy: -self.dy, dx: -self.dx }
    }

    /// Same group element on an `h x w` torus.
    pub fn equivalent_on(&self, o: &Self, h: usize, w: usize) -> bool {
        (self.dy - o.dy).rem_euclid(h as isize) == 0 && (self.dx - o.dx).rem_euclid(w as isize) == 0
    }

    /// The two generators of the translation group.
    pub fn generators() -> [Self; 2] {
        [Self { dy: 4, dx: 0 }, Self { dy: 0, dx: 4 }]
    }

    /// Every distinct element on an `h x w` (full-resolution) torus.
    pub fn elements(h: usize, w: usize) -> Vec<Self> {
        let mut out = Vec::with_capacity((h / 4) * (w / 4));
        for a in 0..h / 4 {
            for b in 0..w / 4 {
                out.push(Self { dy: 4 * a as isize, dx: 4 * b as isize });
            }
        }
        out
    }

    /// Uniform non-identity element on an `h x w` full-resolution torus.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Self {
        let n = (h / 4) * (w / 4);
        if n <= 1 {
            return Self::identity();
        }
        let k = rng.random_range(1..n);
        Self { dy: 4 * (k / (w / 4)) as isize, dx: 4 * (k % (w / 4)) as isize }
    }
}

/// Applies `t` to the trailing two axes; `half_res` halves the offset.
pub fn apply_transform(x: &Array, t: PatternTransform, half_res: bool) -> Result<Array> {
    let (dy, dx) = if half_res { t.half_offset() } else { t.offset() };
    x.shift(dy, dx)
}

pub fn apply_transform_tensor(x: &Tensor, t: PatternTransform, half_res: bool) -> Result<Tensor> {
    let (dy, dx) = if half_res { t.half_offset() } else { t.offset() };
    x.shift(dy, dx)
}

/// Differentiable Stokes features of a stack batch `[N, 12, H, W]`.
pub struct StokesTensors {
    pub s0: Tensor,
    pub s1: Tensor,
    pub s2: Tensor,
}

/// Lower bound on S0 in the differentiable DoLP.
pub const DOLP_S0_FLOOR: f64 = 1e-3;
/// Added under the square root of the differentiable DoLP.
pub const DOLP_SQRT_EPS: f64 = 1e-12;

impl StokesTensors {
    pub fn new(x: &Tensor) -> Result<Self> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != CHANNELS {
            return Err(Error::Invalid(format!("stack batch must be [N, 12, H, W], got {s:?}")));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let v = x.reshape(&[n, COLORS, ANGLES, h, w])?;
        let i = (0..ANGLES)
            .map(|a| v.slice(2, a, 1)?.reshape(&[n, COLORS, h, w]))
            .collect::<Result<Vec<_>>>()?;
        let s0 = i[0].add(&i[1])?.add(&i[2])?.add(&i[3])?.scale(0.5);
        let s1 = i[0].sub(&i[2])?;
        let s2 = i[1].sub(&i[3])?;
        Ok(Self { s0, s1, s2 })
    }

    /// `sqrt(S1^2 + S2^2 + eps) / max(S0, floor)`: smooth everywhere.
    pub fn dolp(&self) -> Result<Tensor> {
        let m = self.s1.square().add(&self.s2.square())?.add_scalar(DOLP_SQRT_EPS).sqrt();
        m.div(&self.s0.clamp(DOLP_S0_FLOOR, f64::INFINITY))
    }

    pub fn aop(&self) -> Result<Tensor> {
        Ok(self.s2.atan2(&self.s1)?.scale(0.5))
    }
}

/// Differentiable wrapped AoP distance: `|atan2(sin 2d, cos 2d)| / 2`.
pub fn wrapped_aop_diff_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d2 = a.sub(b)?.scale(2.0);
    Ok(d2.sin().atan2(&d2.cos())?.abs().scale(0.5))
}

/// Bilinear 2x upsampling with circular boundary: nearest upsampling followed
/// by a `[1/4, 1/2, 1/4]` filter along each axis. Output samples sit halfway
/// between input samples, like the resolution ladder of the pipeline.
pub fn bilinear_up2(x: &Array) -> Result<Array> {
    let up = x.upsample2()?;
    smooth_121(&up)
}

/// Differentiable [`bilinear_up2`]; bitwise equal to it on the same values.
pub fn bilinear_up2_tensor(x: &Tensor) -> Result<Tensor> {
    let t = x.upsample2()?;
    let t = t.scale(0.5).add(&t.shift(0, 1)?.scale(0.25))?.add(&t.shift(0, -1)?.scale(0.25))?;
    t.scale(0.5).add(&t.shift(1, 0)?.scale(0.25))?.add(&t.shift(-1, 0)?.scale(0.25))
}

fn smooth_121(x: &Array) -> Result<Array> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::Invalid(format!("bilinear_up2 needs rank >= 2, got {:?}", x.shape())));
    }
    let a = x.shift(0, 1)?;
    let b = x.shift(0, -1)?;
    let t = x.zip(&a, "smooth", |c, l| 0.5 * c + 0.25 * l)?.zip(&b, "smooth", |c, r| c + 0.25 * r)?;
    let a = t.shift(1, 0)?;
    let b = t.shift(-1, 0)?;
    t.zip(&a, "smooth", |c, u| 0.5 * c + 0.25 * u)?.zip(&b, "smooth", |c, d| c + 0.25 * d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn stokes_examples() {
        assert_eq!(stokes_pixel([1.0, 0.5, 0.0, 0.5]), [1.0, 1.0, 0.0]);
        assert_eq!(aop(1.0, 0.0), 0.0);
        assert_eq!(dolp(1.0, 1.0, 0.0), 1.0);
        let c = 0.3;
        let s = stokes_pixel([c; 4]);
        assert_eq!(s, [2.0 * c, 0.0, 0.0]);
        assert_eq!(dolp(s[0], s[1], s[2]), 0.0);
    }

    #[test]
    fn malus_synthesis_then_inversion() {
        // Intensities synthesized with explicit trig, independent of malus_pixel.
        let s = [1.0, 0.5, 0.5];
        let i = ANGLES_DEG.map(|t: f64| {
            let t = t.to_radians();
            (s[0] + s[1] * (2.0 * t).cos() + s[2] * (2.0 * t).sin()) / 2.0
        });
        let back = stokes_pixel(i);
        for k in 0..3 {
            assert!(close(back[k], s[k], 1e-15));
        }
        assert!(close(dolp(back[0], back[1], back[2]), 0.5f64.sqrt(), 1e-15));
        assert!(close(aop(back[1], back[2]), PI / 8.0, 1e-15));
    }

    #[test]
    fn malus_examples() {
        assert_eq!(malus_pixel([1.0, 0.0, 0.0]), [0.5; 4]);
        assert_eq!(malus_pixel([1.0, 1.0, 0.0]), [1.0, 0.5, 0.0, 0.5]);
        let i = malus_pixel([2.0, 0.6, -0.8]);
        for (a, b) in i.iter().zip([1.3, 0.6, 0.7, 1.4]) {
            assert!(close(*a, b, 1e-15));
        }
    }

    #[test]
    fn nonphysical_stokes_reports_first_pixel() {
        let s0 = Array::full(&[3, 2, 2], 1.0);
        let mut s1 = Array::zeros(&[3, 2, 2]);
        s1.data_mut()[5] = 1.5;
        let err = stack_from_stokes(&s0, &s1, &Array::zeros(&[3, 2, 2])).unwrap_err();
        assert!(matches!(err, Error::NonPhysicalStokes { ref index } if index == &vec![1, 0, 1]), "{err}");
    }

    #[test]
    fn aop_range_is_half_open() {
        assert_eq!(aop(-1.0, 0.0), -FRAC_PI_2);
        assert!(aop(-1.0, -1e-300) >= -FRAC_PI_2);
    }

    #[test]
    fn wrapped_diff_examples() {
        assert_eq!(wrapped_aop_diff(0.1, 0.1), 0.0);
        assert!(close(wrapped_aop_diff(FRAC_PI_2 - 0.01, -FRAC_PI_2 + 0.01), 0.02, 1e-12));
        assert!(close(wrapped_aop_diff(0.0, PI / 4.0), PI / 4.0, 1e-15));
    }

    #[test]
    fn pattern_is_rggb_over_blocks_with_expected_angles() {
        let p = Pattern::default();
        assert_eq!([p.color_at(0, 0), p.color_at(0, 2), p.color_at(2, 0), p.color_at(2, 2)], [0, 1, 1, 2]);
        assert_eq!(p.color_at(1, 1), 0);
        assert_eq!([p.angle_at(0, 0), p.angle_at(0, 1), p.angle_at(1, 0), p.angle_at(1, 1)], [2, 1, 3, 0]);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(p.color_at(y, x), p.color_at(y + 4, x));
                assert_eq!(p.angle_at(y, x), p.angle_at(y, x + 4));
            }
        }
    }

    #[test]
    fn transform_rejects_off_period_offsets() {
        assert!(PatternTransform::translate(2, 0).is_err());
        let t = PatternTransform::translate(4, -8).unwrap();
        assert_eq!(t.compose(&t.inverse()), PatternTransform::identity());
    }

    #[test]
    fn bilinear_up_preserves_constants() {
        let x = Array::full(&[2, 4, 4], 0.7);
        let y = bilinear_up2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8]);
        assert!(y.data().iter().all(|v| close(*v, 0.7, 1e-15)));
    }
}
