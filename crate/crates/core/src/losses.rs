//! Training objectives. All inputs are NCHW tensors; every loss is a
//! mean-reduced scalar.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::Demosaic;
use crate::optics::{self, PatternTransform, StokesTensors};
use crate::params::ParamSet;

/// Lower end of the clamp at which the arccos derivative is evaluated.
pub const ACOS_LO: f64 = -1.0 + 1e-7;
/// Upper end of the clamp at which the arccos derivative is evaluated.
pub const ACOS_HI: f64 = 1.0 - 1e-7;
pub const TV_WEIGHT: f64 = 0.1;
pub const PHASE_WEIGHT: f64 = 0.01;

/// Weights of the terms of the demosaicking loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemosaicWeights {
    pub image: f64,
    pub image_grad: f64,
    pub stokes: f64,
    pub stokes_grad: f64,
    pub dolp: f64,
    pub dolp_grad: f64,
    pub aop: f64,
}

impl Default for DemosaicWeights {
    fn default() -> Self {
        Self { image: 1.0, image_grad: 1.0, stokes: 1.0, stokes_grad: 1.0, dolp: 1.0, dolp_grad: 1.0, aop: 1.0 }
    }
}

impl DemosaicWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.image, self.image_grad, self.stokes, self.stokes_grad, self.dolp, self.dolp_grad, self.aop];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("demosaicking loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("l1", a, b)?;
    Ok(a.sub(b)?.abs().mean())
}

/// Forward differences along the two trailing axes; `None` for an axis of size 1.
fn diffs(a: &Tensor) -> Result<[Option<Tensor>; 2]> {
    let r = a.shape().len();
    let mut out = [None, None];
    for (k, axis) in [r - 1, r - 2].into_iter().enumerate() {
        let n = a.shape()[axis];
        if n > 1 {
            out[k] = Some(a.slice(axis, 1, n - 1)?.sub(&a.slice(axis, 0, n - 1)?)?);
        }
    }
    Ok(out)
}

/// `mean |dx a - dx b| + mean |dy a - dy b|`.
pub fn l1_grad(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("l1_grad", a, b)?;
    l1_of_diffs(&a.sub(b)?)
}

fn l1_of_diffs(d: &Tensor) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for g in diffs(d)?.into_iter().flatten() {
        total = total.add(&g.abs().mean())?;
    }
    Ok(total)
}

/// Anisotropic total variation: `mean |dx a| + mean |dy a|`.
pub fn total_variation(a: &Tensor) -> Result<Tensor> {
    l1_of_diffs(a)
}

/// Demosaicking loss between two stack batches `[N, 12, H, W]`.
pub fn loss_d(pred: &Tensor, reference: &Tensor, w: &DemosaicWeights) -> Result<Tensor> {
    check_same("loss_d", pred, reference)?;
    let sp = StokesTensors::new(pred)?;
    let sr = StokesTensors::new(reference)?;
    let mut terms: Vec<Tensor> = Vec::with_capacity(7);
    let mut push = |weight: f64, t: Result<Tensor>| -> Result<()> {
        if weight != 0.0 {
            terms.push(t?.scale(weight));
        }
        Ok(())
    };
    push(w.image, l1(pred, reference))?;
    push(w.image_grad, l1_grad(pred, reference))?;
    let stokes = [(&sp.s0, &sr.s0), (&sp.s1, &sr.s1), (&sp.s2, &sr.s2)];
    for (a, b) in stokes {
        push(w.stokes, l1(a, b))?;
    }
    for (a, b) in stokes {
        push(w.stokes_grad, l1_grad(a, b))?;
    }
    let (dp, dr) = (sp.dolp()?, sr.dolp()?);
    push(w.dolp, l1(&dp, &dr))?;
    push(w.dolp_grad, l1_grad(&dp, &dr))?;
    push(w.aop, Ok(optics::wrapped_aop_diff_tensor(&sp.aop()?, &sr.aop()?)?.mean()))?;
    let mut total = Tensor::scalar(0.0);
    for t in &terms {
        total = total.add(t)?;
    }
    Ok(total)
}

/// Per-pixel cosine `[N, 1, H, W]` between two normal maps `[N, 3, H, W]`.
pub fn cosine_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("cosine", a, b)?;
    a.mul(b)?.sum_axis(1)
}

/// Masked mean of `(1 - cos) + arccos(clamp(cos))`; `mask` is `[N, 1, H, W]`.
pub fn loss_t_sfp(pred: &Tensor, gt: &Tensor, mask: &Array) -> Result<Tensor> {
    let c = cosine_map(pred, gt)?;
    if mask.shape() != c.shape() {
        return Err(Error::shape("loss_t_sfp mask", mask.shape(), c.shape()));
    }
    let count = mask.sum();
    if count <= 0.0 {
        return Err(Error::Invalid("loss_t_sfp: empty mask".into()));
    }
    let per_pixel = c.neg().add_scalar(1.0).add(&c.acos_clamped(ACOS_LO, ACOS_HI))?;
    Ok(per_pixel.mul_const(mask)?.sum().scale(1.0 / count))
}

/// `n x n` matrices `cos(2 pi k m / n)` and `sin(2 pi k m / n)`.
fn dft_matrices(n: usize) -> (Array, Array) {
    let angle = |i: usize| {
        let (k, m) = (i / n, i % n);
        2.0 * PI * ((k * m) % n) as f64 / n as f64
    };
    (Array::from_fn(&[n, n], |i| angle(i).cos()), Array::from_fn(&[n, n], |i| angle(i).sin()))
}

/// 2-D DFT of `[N, C, H, W]` as `(re, im)`, both laid out `[N*C*W, H]`
/// (transposed). Uses the symmetry of the DFT matrices.
fn dft2(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = x.shape().to_vec();
    let (b, h, w) = (s[0] * s[1], s[2], s[3]);
    let (cw, sw) = dft_matrices(w);
    let (ch, sh) = dft_matrices(h);
    let (cw, sw, ch, sh) = (Tensor::constant(cw), Tensor::constant(sw), Tensor::constant(ch), Tensor::constant(sh));
    let rows = x.reshape(&[b * h, w])?;
    let t = |m: &Tensor| -> Result<Tensor> { rows.matmul(m)?.reshape(&[b, h, w])?.transpose()?.reshape(&[b * w, h]) };
    let (a, bb) = (t(&cw)?, t(&sw)?);
    let re = a.matmul(&ch)?.sub(&bb.matmul(&sh)?)?;
    let im = a.matmul(&sh)?.add(&bb.matmul(&ch)?)?.neg();
    Ok((re, im))
}

/// Mean wrapped Fourier-phase difference in `[0, pi]`. Bins where either
/// spectrum is numerically zero carry no phase and contribute 0.
pub fn phase_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same("phase_loss", pred, gt)?;
    let s = pred.shape();
    let hw = (s[2] * s[3]) as f64;
    let (pr, pi) = dft2(pred)?;
    let (gr, gi) = dft2(gt)?;
    let tau2 = (1e-9 * hw).powi(2);
    let mag2 = |r: &Tensor, i: &Tensor| r.value().zip(i.value(), "phase", |a, b| a * a + b * b);
    let mask = mag2(&pr, &pi)?.zip(&mag2(&gr, &gi)?, "phase", |a, b| if a > tau2 && b > tau2 { 1.0 } else { 0.0 })?;
    // angle(P * conj(G))
    let re = pr.mul(&gr)?.add(&pi.mul(&gi)?)?;
    let im = pi.mul(&gr)?.sub(&pr.mul(&gi)?)?;
    // Masked bins are replaced by (1, 0) so that atan2 sees a safe argument.
    let keep = Tensor::constant(mask.clone());
    let re = re.mul(&keep)?.add(&Tensor::constant(mask.map(|m| 1.0 - m)))?;
    let im = im.mul(&keep)?;
    Ok(im.atan2(&re)?.abs().mean())
}

/// Reflection-removal loss: pixel l1, total variation, Fourier phase.
pub fn loss_t_dfp(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same("loss_t_dfp", pred, gt)?;
    l1(pred, gt)?
        .add(&total_variation(pred)?.scale(TV_WEIGHT))?
        .add(&phase_loss(pred, gt)?.scale(PHASE_WEIGHT))
}

/// `3 - sum_j mean_n <v_dj, v_tj>` over three levels of `[N, width]` vectors.
pub fn loss_fa(vd: &[Tensor], vt: &[Tensor]) -> Result<Tensor> {
    if vd.len() != 3 || vt.len() != 3 {
        return Err(Error::Invalid(format!("loss_fa needs 3 levels, got {} and {}", vd.len(), vt.len())));
    }
    let mut total = Tensor::scalar(3.0);
    for (a, b) in vd.iter().zip(vt) {
        check_same("loss_fa", a, b)?;
        total = total.sub(&a.mul(b)?.sum_axis(1)?.mean())?;
    }
    Ok(total)
}

/// Equivariance loss: `loss_d(D(T_half z), T D(z))`.
pub fn loss_eit(
    net: &dyn Demosaic,
    p: &ParamSet,
    z: &Tensor,
    t: PatternTransform,
    w: &DemosaicWeights,
) -> Result<Tensor> {
    let moved = net.forward(p, &optics::apply_transform_tensor(z, t, true)?)?.out;
    let base = net.forward(p, z)?.out;
    loss_d(&moved, &optics::apply_transform_tensor(&base, t, false)?, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(shape: &[usize], v: f64) -> Tensor {
        Tensor::constant(Array::full(shape, v))
    }

    #[test]
    fn loss_d_zero_on_identical() {
        let a = Tensor::constant(Array::from_fn(&[1, 12, 4, 4], |i| (i as f64 * 0.37).sin().abs()));
        assert_eq!(loss_d(&a, &a, &DemosaicWeights::default()).unwrap().item(), 0.0);
    }

    #[test]
    fn loss_t_sfp_extremes() {
        let up = Array::from_fn(&[1, 3, 2, 2], |i| if i / 4 == 2 { 1.0 } else { 0.0 });
        let mask = Array::full(&[1, 1, 2, 2], 1.0);
        let a = Tensor::constant(up.clone());
        assert_eq!(loss_t_sfp(&a, &a, &mask).unwrap().item(), 0.0);
        let b = Tensor::constant(up.map(|v| -v));
        let l = loss_t_sfp(&a, &b, &mask).unwrap().item();
        assert!((l - (2.0 + PI)).abs() < 1e-15, "{l}");
        assert!(loss_t_sfp(&a, &b, &Array::zeros(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn tv_of_unit_step() {
        let a = Tensor::constant(Array::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        assert_eq!(total_variation(&a).unwrap().item(), 1.0);
    }

    #[test]
    fn dfp_constant_images() {
        let l = loss_t_dfp(&c(&[1, 3, 8, 8], 0.5), &c(&[1, 3, 8, 8], 0.3)).unwrap().item();
        assert!((l - 0.2).abs() < 1e-12, "{l}");
        assert_eq!(loss_t_dfp(&c(&[1, 3, 8, 8], 0.5), &c(&[1, 3, 8, 8], 0.5)).unwrap().item(), 0.0);
    }

    #[test]
    fn loss_fa_extremes() {
        let e = Tensor::constant(Array::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let f = Tensor::constant(Array::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let v = vec![e.clone(), e.clone(), e.clone()];
        assert_eq!(loss_fa(&v, &v).unwrap().item(), 0.0);
        let n = vec![e.neg(), e.neg(), e.neg()];
        assert_eq!(loss_fa(&v, &n).unwrap().item(), 6.0);
        let o = vec![f.clone(), f.clone(), f];
        assert_eq!(loss_fa(&v, &o).unwrap().item(), 3.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        assert!(l1(&c(&[1, 3, 2, 2], 0.0), &c(&[1, 3, 2, 4], 0.0)).is_err());
    }
}
