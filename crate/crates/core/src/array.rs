//! Dense row-major `f64` arrays and the raw numeric kernels behind every
//! differentiable op. Nothing in here knows about gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Boundary handling for convolutions, padding and shifts on the two
/// trailing (spatial) axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Circular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Numpy-style broadcast of two shapes (right aligned).
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "array",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel(shape);
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip(&self, other: &Array, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self { shape: self.shape.clone(), data });
        }
        if other.len() == 1 && other.rank() <= self.rank() {
            let b = other.data[0];
            return Ok(Self { shape: self.shape.clone(), data: self.data.iter().map(|&a| f(a, b)).collect() });
        }
        if self.len() == 1 && self.rank() <= other.rank() {
            let a = self.data[0];
            return Ok(Self { shape: other.shape.clone(), data: other.data.iter().map(|&b| f(a, b)).collect() });
        }
        let out_shape = broadcast_shapes(op, &self.shape, &other.shape)?;
        if out_shape == self.shape {
            let ib = broadcast_index(&other.shape, &out_shape);
            let data = self.data.iter().zip(&ib).map(|(&a, &j)| f(a, other.data[j])).collect();
            return Ok(Self { shape: out_shape, data });
        }
        if out_shape == other.shape {
            let ia = broadcast_index(&self.shape, &out_shape);
            let data = ia.iter().zip(&other.data).map(|(&i, &b)| f(self.data[i], b)).collect();
            return Ok(Self { shape: out_shape, data });
        }
        let ia = broadcast_index(&self.shape, &out_shape);
        let ib = broadcast_index(&other.shape, &out_shape);
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(self.data[i], other.data[j])).collect();
        Ok(Self { shape: out_shape, data })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = broadcast_shapes("broadcast_to", &self.shape, shape)?;
        if out != shape {
            return Err(Error::shape("broadcast_to", &self.shape, shape));
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let idx = broadcast_index(&self.shape, shape);
        Ok(Self { shape: shape.to_vec(), data: idx.iter().map(|&i| self.data[i]).collect() })
    }

    /// Sum-reduce a broadcast result back to `shape` (adjoint of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let out = broadcast_shapes("sum_to", shape, &self.shape)?;
        if out != self.shape {
            return Err(Error::shape("sum_to", &self.shape, shape));
        }
        let idx = broadcast_index(shape, &self.shape);
        let mut acc = vec![0.0; numel(shape)];
        for (k, &i) in idx.iter().enumerate() {
            acc[i] += self.data[k];
        }
        Ok(Self { shape: shape.to_vec(), data: acc })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Shape { op: "sum_axis", detail: format!("axis {axis} for shape {:?}", self.shape) });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &self.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Self { shape, data: out })
    }

    pub fn matmul(&self, other: &Array) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, 0.0);
        Ok(Self { shape: vec![m, n], data: out })
    }

    /// Swap the two trailing axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Shape { op: "transpose", detail: format!("rank {r} < 2") });
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.len() / (h * w).max(1);
        let mut out = vec![0.0; self.len()];
        for b in 0..batch {
            let src = &self.data[b * h * w..(b + 1) * h * w];
            let dst = &mut out[b * h * w..(b + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[x * h + y] = src[y * w + x];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Self { shape, data: out })
    }

    pub fn concat(parts: &[&Array], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(Error::Shape { op: "concat", detail: "no inputs".into() })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Shape { op: "concat", detail: format!("axis {axis} for rank {rank}") });
        }
        for p in parts {
            let ok = p.rank() == rank && (0..rank).all(|i| i == axis || p.shape[i] == first.shape[i]);
            if !ok {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("axis {axis} range {start}..{} of shape {:?}", start + len, self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Adjoint of `slice`: place `self` into zeros of length `full` along `axis`.
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Result<Self> {
        let len = self.shape[axis];
        if start + len > full {
            return Err(Error::Shape { op: "embed", detail: format!("{start}+{len} > {full}") });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            data[(o * full + start) * inner..(o * full + start + len) * inner]
                .copy_from_slice(&self.data[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = full;
        Ok(Self { shape, data })
    }

    fn spatial(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Shape { op, detail: format!("needs rank >= 2, got {:?}", self.shape) });
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        Ok((self.len() / (h * w).max(1), h, w))
    }

    /// Pad the trailing two axes by `(top, bottom, left, right)`.
    pub fn pad(&self, amounts: [usize; 4], mode: PadMode) -> Result<Self> {
        let (b, h, w) = self.spatial("pad")?;
        let [t, bo, l, ri] = amounts;
        if mode == PadMode::Circular && (t > h || bo > h || l > w || ri > w) {
            return Err(Error::Shape { op: "pad", detail: format!("circular pad {amounts:?} exceeds {h}x{w}") });
        }
        let (hp, wp) = (h + t + bo, w + l + ri);
        let mut data = vec![0.0; b * hp * wp];
        for bi in 0..b {
            let src = &self.data[bi * h * w..(bi + 1) * h * w];
            let dst = &mut data[bi * hp * wp..(bi + 1) * hp * wp];
            for y in 0..hp {
                let sy = y as isize - t as isize;
                let sy = match mode {
                    PadMode::Zero if sy < 0 || sy >= h as isize => continue,
                    PadMode::Zero => sy as usize,
                    PadMode::Circular => wrap(sy, h),
                };
                for x in 0..wp {
                    let sx = x as isize - l as isize;
                    let sx = match mode {
                        PadMode::Zero if sx < 0 || sx >= w as isize => continue,
                        PadMode::Zero => sx as usize,
                        PadMode::Circular => wrap(sx, w),
                    };
                    dst[y * wp + x] = src[sy * w + sx];
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = hp;
        shape[r - 1] = wp;
        Ok(Self { shape, data })
    }

    /// Adjoint of `pad`: crop (zero mode) or fold wrapped borders back (circular).
    pub fn unpad(&self, amounts: [usize; 4], mode: PadMode) -> Result<Self> {
        let (b, hp, wp) = self.spatial("unpad")?;
        let [t, bo, l, ri] = amounts;
        if hp < t + bo || wp < l + ri {
            return Err(Error::Shape { op: "unpad", detail: format!("{amounts:?} exceeds {hp}x{wp}") });
        }
        let (h, w) = (hp - t - bo, wp - l - ri);
        let mut data = vec![0.0; b * h * w];
        for bi in 0..b {
            let src = &self.data[bi * hp * wp..(bi + 1) * hp * wp];
            let dst = &mut data[bi * h * w..(bi + 1) * h * w];
            for y in 0..hp {
                let sy = y as isize - t as isize;
                let dy = match mode {
                    PadMode::Zero if sy < 0 || sy >= h as isize => continue,
                    PadMode::Zero => sy as usize,
                    PadMode::Circular => wrap(sy, h),
                };
                for x in 0..wp {
                    let sx = x as isize - l as isize;
                    let dx = match mode {
                        PadMode::Zero if sx < 0 || sx >= w as isize => continue,
                        PadMode::Zero => sx as usize,
                        PadMode::Circular => wrap(sx, w),
                    };
                    dst[dy * w + dx] += src[y * wp + x];
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = h;
        shape[r - 1] = w;
        Ok(Self { shape, data })
    }

    /// Circular shift of the trailing two axes: `out[y, x] = in[y - dy, x - dx]`.
    pub fn shift(&self, dy: isize, dx: isize) -> Result<Self> {
        let (b, h, w) = self.spatial("shift")?;
        let mut data = vec![0.0; self.len()];
        for bi in 0..b {
            let src = &self.data[bi * h * w..(bi + 1) * h * w];
            let dst = &mut data[bi * h * w..(bi + 1) * h * w];
            for y in 0..h {
                let sy = wrap(y as isize - dy, h);
                for x in 0..w {
                    dst[y * w + x] = src[sy * w + wrap(x as isize - dx, w)];
                }
            }
        }
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn avgpool2(&self) -> Result<Self> {
        let (b, h, w) = self.spatial("avgpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape { op: "avgpool2x2", detail: format!("odd spatial size {h}x{w}") });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut data = vec![0.0; b * ho * wo];
        for bi in 0..b {
            let src = &self.data[bi * h * w..(bi + 1) * h * w];
            for y in 0..ho {
                for x in 0..wo {
                    let s = src[2 * y * w + 2 * x]
                        + src[2 * y * w + 2 * x + 1]
                        + src[(2 * y + 1) * w + 2 * x]
                        + src[(2 * y + 1) * w + 2 * x + 1];
                    data[bi * ho * wo + y * wo + x] = 0.25 * s;
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Ok(Self { shape, data })
    }

    /// Nearest-neighbour 2x upsampling of the trailing two axes.
    pub fn upsample2(&self) -> Result<Self> {
        let (b, h, w) = self.spatial("upsample2x")?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut data = vec![0.0; b * ho * wo];
        for bi in 0..b {
            let src = &self.data[bi * h * w..(bi + 1) * h * w];
            let dst = &mut data[bi * ho * wo..(bi + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    dst[y * wo + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Ok(Self { shape, data })
    }

    /// `[co, ci, k, k] -> [ci, co, k, k]` with both spatial axes reversed.
    /// Turns a convolution weight into the weight of its adjoint.
    pub fn flip_transpose(&self) -> Result<Self> {
        if self.rank() != 4 || self.shape[2] != self.shape[3] {
            return Err(Error::Shape { op: "flip_transpose", detail: format!("weight shape {:?}", self.shape) });
        }
        let (co, ci, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut data = vec![0.0; self.len()];
        for o in 0..co {
            for i in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        data[((i * co + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            self.data[((o * ci + i) * k + ky) * k + kx];
                    }
                }
            }
        }
        Ok(Self { shape: vec![ci, co, k, k], data })
    }

    /// Stride-1 "same" 2-D convolution (cross-correlation).
    /// `self: [n, ci, h, w]`, `weight: [co, ci, k, k]`, `k` odd.
    pub fn conv2d(&self, weight: &Array, mode: PadMode) -> Result<Self> {
        let (n, ci, h, w) = conv_dims(self, weight)?;
        let (co, k) = (weight.shape[0], weight.shape[2]);
        let kk = ci * k * k;
        let mut out = vec![0.0; n * co * h * w];
        let run = |(x, o): (&[f64], &mut [f64])| {
            let cols = im2col(x, ci, h, w, k, mode);
            gemm(co, kk, h * w, &weight.data, (kk, 1), &cols, (h * w, 1), o, 0.0);
        };
        let work = self.data.chunks(ci * h * w).zip(out.chunks_mut(co * h * w));
        if n > 1 && co * kk * h * w > 1 << 16 {
            work.collect::<Vec<_>>().into_par_iter().for_each(run);
        } else {
            work.for_each(run);
        }
        Ok(Self { shape: vec![n, co, h, w], data: out })
    }

    /// Weight gradient of `conv2d`: `dW[o,i,ky,kx] = sum g[n,o,p] * x_pad[n,i,p+d]`.
    pub fn conv2d_weight_grad(&self, grad_out: &Array, k: usize, mode: PadMode) -> Result<Self> {
        if self.rank() != 4 || grad_out.rank() != 4 || self.shape[0] != grad_out.shape[0] || self.shape[2..] != grad_out.shape[2..] {
            return Err(Error::shape("conv2d_weight_grad", &self.shape, &grad_out.shape));
        }
        if k % 2 == 0 {
            return Err(Error::Shape { op: "conv2d_weight_grad", detail: format!("even kernel {k}") });
        }
        let (n, ci, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let co = grad_out.shape[1];
        let kk = ci * k * k;
        let per_image = |b: usize| {
            let cols = im2col(&self.data[b * ci * h * w..(b + 1) * ci * h * w], ci, h, w, k, mode);
            let g = &grad_out.data[b * co * h * w..(b + 1) * co * h * w];
            let mut acc = vec![0.0; co * kk];
            // acc[co, kk] = g[co, hw] * cols[kk, hw]^T
            gemm(co, h * w, kk, g, (h * w, 1), &cols, (1, h * w), &mut acc, 0.0);
            acc
        };
        // Per-image partials reduced in a fixed order so results do not depend
        // on the thread count.
        let partials: Vec<Vec<f64>> = if n > 1 && co * kk * h * w > 1 << 16 {
            (0..n).into_par_iter().map(per_image).collect()
        } else {
            (0..n).map(per_image).collect()
        };
        let mut data = vec![0.0; co * kk];
        for p in partials {
            for (d, s) in data.iter_mut().zip(p) {
                *d += s;
            }
        }
        Ok(Self { shape: vec![co, ci, k, k], data })
    }
}

fn conv_dims(x: &Array, weight: &Array) -> Result<(usize, usize, usize, usize)> {
    let ok = x.rank() == 4
        && weight.rank() == 4
        && weight.shape[1] == x.shape[1]
        && weight.shape[2] == weight.shape[3]
        && weight.shape[2] % 2 == 1;
    if !ok {
        return Err(Error::shape("conv2d", &x.shape, &weight.shape));
    }
    Ok((x.shape[0], x.shape[1], x.shape[2], x.shape[3]))
}

/// `cols[(c*k + ky)*k + kx, y*w + x] = x[c, y + ky - k/2, x + kx - k/2]`.
fn im2col(x: &[f64], ci: usize, h: usize, w: usize, k: usize, mode: PadMode) -> Vec<f64> {
    let c = k / 2;
    let (hp, wp) = (h + 2 * c, w + 2 * c);
    let hw = h * w;
    let mut cols = Vec::with_capacity(ci * k * k * hw);
    let mut padded = vec![0.0; hp * wp];
    for ch in 0..ci {
        pad_plane(&x[ch * hw..(ch + 1) * hw], h, w, c, mode, &mut padded);
        for ky in 0..k {
            for kx in 0..k {
                for y in 0..h {
                    let s = (y + ky) * wp + kx;
                    cols.extend_from_slice(&padded[s..s + w]);
                }
            }
        }
    }
    cols
}

/// Writes `src` (`h x w`) padded by `c` on every side into `dst`.
fn pad_plane(src: &[f64], h: usize, w: usize, c: usize, mode: PadMode, dst: &mut [f64]) {
    let wp = w + 2 * c;
    for yp in 0..h + 2 * c {
        let row = &mut dst[yp * wp..(yp + 1) * wp];
        let sy = yp as isize - c as isize;
        let sy = match mode {
            PadMode::Zero if sy < 0 || sy >= h as isize => {
                row.fill(0.0);
                continue;
            }
            PadMode::Zero => sy as usize,
            PadMode::Circular => wrap(sy, h),
        };
        let s = &src[sy * w..(sy + 1) * w];
        row[c..c + w].copy_from_slice(s);
        for j in 0..c {
            let (l, r) = (j as isize - c as isize, (w + j) as isize);
            row[j] = match mode {
                PadMode::Zero => 0.0,
                PadMode::Circular => s[wrap(l, w)],
            };
            row[c + w + j] = match mode {
                PadMode::Zero => 0.0,
                PadMode::Circular => s[wrap(r, w)],
            };
        }
    }
}

/// `c[m,n] = beta*c + a[m,k] * b[k,n]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slices are sized by the callers for the given dimensions and
    // strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// For every element of `out_shape`, the flat index into an array of
/// `in_shape` that broadcasts to it.
fn broadcast_index(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[i + offset] = in_strides[i];
        }
    }
    let total = numel(out_shape);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += eff[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}
