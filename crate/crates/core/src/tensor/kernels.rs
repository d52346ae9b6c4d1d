//! Raw numeric kernels behind the graph ops.

use super::Real;
use crate::error::{Error, Result};

/// Geometry of a 2-d convolution over an NCHW input and an OIHW kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let mismatch = || Error::Shape {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: k.to_vec(),
        };
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] || stride == 0 {
            return Err(mismatch());
        }
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch());
        }
        Ok(ConvGeom {
            n: x[0],
            cin: x[1],
            h,
            w,
            cout: k[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    /// Output positions `[lo, hi)` along one axis that read kernel offset
    /// `k` from inside an input of extent `inp`.
    fn tap_range(&self, k: usize, out: usize, inp: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let last = inp as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out as isize) };
        (lo.max(0) as usize, hi.max(lo).max(0) as usize)
    }

    /// Calls `f(ky, kx, ys, xs)` for every kernel tap that touches the input,
    /// with the output rows and columns it contributes to.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, (usize, usize), (usize, usize))) {
        for ky in 0..self.kh {
            let ys = self.tap_range(ky, self.oh, self.h);
            if ys.0 == ys.1 {
                continue;
            }
            for kx in 0..self.kw {
                let xs = self.tap_range(kx, self.ow, self.w);
                if xs.0 < xs.1 {
                    f(ky, kx, ys, xs);
                }
            }
        }
    }

    /// Input values read by one tap as a `cin x (n * rows * cols)` matrix.
    fn gather_input<T: Real>(&self, x: &[T], ky: usize, kx: usize, ys: (usize, usize), xs: (usize, usize), out: &mut Vec<T>) {
        out.clear();
        let hw = self.h * self.w;
        for c in 0..self.cin {
            for n in 0..self.n {
                let base = (n * self.cin + c) * hw;
                for oy in ys.0..ys.1 {
                    let iy = oy * self.stride + ky - self.pad;
                    let row = base + iy * self.w;
                    if self.stride == 1 {
                        out.extend_from_slice(&x[row + xs.0 + kx - self.pad..row + xs.1 + kx - self.pad]);
                    } else {
                        out.extend((xs.0..xs.1).map(|ox| x[row + ox * self.stride + kx - self.pad]));
                    }
                }
            }
        }
    }

    /// Adds a `cin x (n * rows * cols)` matrix back onto the input taps.
    fn scatter_input<T: Real>(&self, m: &[T], ky: usize, kx: usize, ys: (usize, usize), xs: (usize, usize), dx: &mut [T]) {
        let hw = self.h * self.w;
        let mut it = m.iter();
        for c in 0..self.cin {
            for n in 0..self.n {
                let base = (n * self.cin + c) * hw;
                for oy in ys.0..ys.1 {
                    let row = base + (oy * self.stride + ky - self.pad) * self.w;
                    for ox in xs.0..xs.1 {
                        let i = row + ox * self.stride + kx - self.pad;
                        dx[i] = dx[i] + *it.next().expect("sized");
                    }
                }
            }
        }
    }

    /// Output-gradient entries of one tap's positions, `cout x (n * rows * cols)`.
    fn gather_output<T: Real>(&self, y: &[T], ys: (usize, usize), xs: (usize, usize), out: &mut Vec<T>) {
        out.clear();
        let p = self.positions();
        for o in 0..self.cout {
            for n in 0..self.n {
                let base = (n * self.cout + o) * p;
                for oy in ys.0..ys.1 {
                    out.extend_from_slice(&y[base + oy * self.ow + xs.0..base + oy * self.ow + xs.1]);
                }
            }
        }
    }

    fn scatter_output<T: Real>(&self, m: &[T], ys: (usize, usize), xs: (usize, usize), y: &mut [T]) {
        let p = self.positions();
        let width = xs.1 - xs.0;
        let mut at = 0;
        for o in 0..self.cout {
            for n in 0..self.n {
                let base = (n * self.cout + o) * p;
                for oy in ys.0..ys.1 {
                    let dst = &mut y[base + oy * self.ow + xs.0..][..width];
                    for (d, &v) in dst.iter_mut().zip(&m[at..at + width]) {
                        *d = *d + v;
                    }
                    at += width;
                }
            }
        }
    }

    /// `cout x cin` slice of the kernel at one tap.
    fn kernel_tap<T: Real>(&self, k: &[T], ky: usize, kx: usize, out: &mut Vec<T>) {
        out.clear();
        let taps = self.kh * self.kw;
        let t = ky * self.kw + kx;
        for o in 0..self.cout {
            for c in 0..self.cin {
                out.push(k[(o * self.cin + c) * taps + t]);
            }
        }
    }

    /// Multiply-adds per sample and channel pair when going tap by tap.
    fn tap_work(&self) -> usize {
        let mut work = 0;
        self.for_each_tap(|_, _, ys, xs| work += (ys.1 - ys.0) * (xs.1 - xs.0));
        work
    }

    /// Small maps are cheaper as one product with the unrolled
    /// `[cout*oh*ow, cin*h*w]` operator than as many tiny per-tap products.
    fn prefers_dense(&self) -> bool {
        let full = self.positions() * self.h * self.w;
        full * self.cout * self.cin <= DENSE_LIMIT && full <= 3 * self.tap_work()
    }

    /// Calls `f(row, col, kernel_index)` for every nonzero of the unrolled
    /// operator.
    fn for_each_dense(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (hw, p, taps) = (self.h * self.w, self.positions(), self.kh * self.kw);
        self.for_each_tap(|ky, kx, ys, xs| {
            let t = ky * self.kw + kx;
            for oy in ys.0..ys.1 {
                let iy = oy * self.stride + ky - self.pad;
                for ox in xs.0..xs.1 {
                    let (po, pi) = (oy * self.ow + ox, iy * self.w + ox * self.stride + kx - self.pad);
                    for o in 0..self.cout {
                        for c in 0..self.cin {
                            f(o * p + po, c * hw + pi, (o * self.cin + c) * taps + t);
                        }
                    }
                }
            }
        });
    }

    fn dense_operator<T: Real>(&self, k: &[T]) -> Vec<T> {
        let cols = self.cin * self.h * self.w;
        let mut op = vec![T::zero(); self.cout * self.positions() * cols];
        self.for_each_dense(|r, c, i| op[r * cols + c] = k[i]);
        op
    }
}

const DENSE_LIMIT: usize = 1 << 22;

/// Convolution as matrix products. Padding is never materialised.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    conv_forward_with(x, k, g, g.prefers_dense())
}

fn conv_forward_with<T: Real>(x: &[T], k: &[T], g: &ConvGeom, dense: bool) -> Vec<T> {
    if dense {
        let op = g.dense_operator(k);
        let (rows, cols) = (g.cout * g.positions(), g.cin * g.h * g.w);
        let mut out = vec![T::zero(); g.n * rows];
        T::gemm(g.n, cols, rows, x, false, &op, true, T::zero(), &mut out);
        return out;
    }
    let mut out = vec![T::zero(); g.n * g.cout * g.positions()];
    let (mut xt, mut kt) = (Vec::new(), Vec::new());
    let mut yt = Vec::new();
    g.for_each_tap(|ky, kx, ys, xs| {
        let cols = g.n * (ys.1 - ys.0) * (xs.1 - xs.0);
        g.gather_input(x, ky, kx, ys, xs, &mut xt);
        g.kernel_tap(k, ky, kx, &mut kt);
        yt.clear();
        yt.resize(g.cout * cols, T::zero());
        T::gemm(g.cout, g.cin, cols, &kt, false, &xt, false, T::zero(), &mut yt);
        g.scatter_output(&yt, ys, xs, &mut out);
    });
    out
}

/// Returns `(dx, dk)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    conv_backward_with(x, k, dy, g, need_dx, need_dk, g.prefers_dense())
}

fn conv_backward_with<T: Real>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
    dense: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let taps = g.kh * g.kw;
    let mut dk = need_dk.then(|| vec![T::zero(); k.len()]);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    if dense {
        let (rows, cols) = (g.cout * g.positions(), g.cin * g.h * g.w);
        if let Some(dx) = dx.as_mut() {
            let op = g.dense_operator(k);
            T::gemm(g.n, rows, cols, dy, false, &op, false, T::zero(), dx);
        }
        if let Some(dk) = dk.as_mut() {
            let mut dop = vec![T::zero(); rows * cols];
            T::gemm(rows, g.n, cols, dy, true, x, false, T::zero(), &mut dop);
            g.for_each_dense(|r, c, i| dk[i] = dk[i] + dop[r * cols + c]);
        }
        return (dx, dk);
    }
    let (mut xt, mut kt, mut dyt, mut m) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    g.for_each_tap(|ky, kx, ys, xs| {
        let cols = g.n * (ys.1 - ys.0) * (xs.1 - xs.0);
        g.gather_output(dy, ys, xs, &mut dyt);
        if let Some(dk) = dk.as_mut() {
            g.gather_input(x, ky, kx, ys, xs, &mut xt);
            m.clear();
            m.resize(g.cout * g.cin, T::zero());
            T::gemm(g.cout, cols, g.cin, &dyt, false, &xt, true, T::zero(), &mut m);
            let t = ky * g.kw + kx;
            for o in 0..g.cout {
                for c in 0..g.cin {
                    dk[(o * g.cin + c) * taps + t] = m[o * g.cin + c];
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            g.kernel_tap(k, ky, kx, &mut kt);
            m.clear();
            m.resize(g.cin * cols, T::zero());
            T::gemm(g.cin, g.cout, cols, &kt, true, &dyt, false, T::zero(), &mut m);
            g.scatter_input(&m, ky, kx, ys, xs, dx);
        }
    });
    (dx, dk)
}

/// Output shape of an equal-rank broadcast, or `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    contiguous_strides(shape)
        .into_iter()
        .zip(shape.iter().zip(out))
        .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Visits every output element of a broadcast as `f(out, a_off, b_off)`.
///
/// Adjacent dimensions that are laid out contiguously for both operands are
/// merged so the innermost loop is as long as possible.
pub(crate) fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(out.len());
    for i in 0..out.len() {
        if out[i] == 1 {
            continue;
        }
        if let Some(last) = dims.last_mut() {
            if last.1 == sa[i] * out[i] && last.2 == sb[i] * out[i] {
                last.0 *= out[i];
                last.1 = sa[i];
                last.2 = sb[i];
                continue;
            }
        }
        dims.push((out[i], sa[i], sb[i]));
    }
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let Some(&(inner, ia, ib)) = dims.last() else {
        f(0, 0, 0);
        return;
    };
    let outer = &dims[..dims.len() - 1];
    let mut counter = vec![0usize; outer.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // Advance the odometer over the outer dims.
        let mut d = outer.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            oa += outer[d].1;
            ob += outer[d].2;
            if counter[d] < outer[d].0 {
                break;
            }
            oa -= outer[d].1 * outer[d].0;
            ob -= outer[d].2 * outer[d].0;
            counter[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
