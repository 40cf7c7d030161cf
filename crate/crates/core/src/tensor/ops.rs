use std::sync::atomic::{AtomicBool, Ordering};

use super::tape::{GradFn, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;
const DROPOUT_STREAM: u64 = 0xD0;

static CONV_BACKWARD_FAULT: AtomicBool = AtomicBool::new(false);

/// Perturbs the weight gradient of every subsequent conv2d backward.
/// Only meant for exercising the gradient checker.
#[doc(hidden)]
pub fn set_conv_backward_fault(enabled: bool) {
    CONV_BACKWARD_FAULT.store(enabled, Ordering::SeqCst);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        BatchNormState {
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

struct Closure<F> {
    name: &'static str,
    f: F,
}

impl<T, F> GradFn<T> for Closure<F>
where
    T: Scalar,
    F: Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>
        + Send
        + Sync,
{
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        (self.f)(grad, inputs, output, wants)
    }
}

fn grad_fn<T, F>(name: &'static str, f: F) -> Box<dyn GradFn<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>
        + Send
        + Sync
        + 'static,
{
    Box::new(Closure { name, f })
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn l(&self) -> usize {
        self.ho * self.wo
    }
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (len + 2 * pad).checked_sub(k)?;
    (span % stride == 0).then_some(span / stride + 1)
}

/// Lays patches out as a `[K, N*L]` matrix: row `(ci, ky, kx)`, column `(n, oy, ox)`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (l, nl) = (g.l(), g.n * g.l());
    let mut cols = vec![T::zero(); g.k() * nl];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * nl..(row + 1) * nl];
                for n in 0..g.n {
                    let src = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst = &mut dst_row[n * l + oy * g.wo..][..g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (l, nl) = (g.l(), g.n * g.l());
    let mut x = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * nl..(row + 1) * nl];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        let src = &src_row[n * l + oy * g.wo..][..g.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = &mut dst_row[ix as usize];
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, l, nl) = (g.k(), g.l(), g.n * g.l());
    let cols = im2col(x, g);
    let mut out_mat = vec![T::zero(); g.cout * nl];
    // SAFETY: row-major [cout,k] x [k,nl] -> [cout,nl], all buffers sized above.
    unsafe {
        T::gemm(
            g.cout,
            k,
            nl,
            w.as_ptr(),
            k as isize,
            1,
            cols.as_ptr(),
            nl as isize,
            1,
            T::zero(),
            out_mat.as_mut_ptr(),
            nl as isize,
            1,
        );
    }
    let mut out = vec![T::zero(); g.n * g.cout * l];
    for co in 0..g.cout {
        let src = &out_mat[co * nl..(co + 1) * nl];
        let bias = b.map_or(T::zero(), |b| b[co]);
        for n in 0..g.n {
            let dst = &mut out[(n * g.cout + co) * l..][..l];
            for (d, &s) in dst.iter_mut().zip(&src[n * l..(n + 1) * l]) {
                *d = s + bias;
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (k, l, nl) = (g.k(), g.l(), g.n * g.l());
    let mut gmat = vec![T::zero(); g.cout * nl];
    let mut db = vec![T::zero(); g.cout];
    for co in 0..g.cout {
        let dst = &mut gmat[co * nl..(co + 1) * nl];
        let mut acc = 0.0f64;
        for n in 0..g.n {
            let src = &gout[(n * g.cout + co) * l..][..l];
            dst[n * l..(n + 1) * l].copy_from_slice(src);
            acc += src.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        db[co] = T::lift(acc);
    }

    let mut dw = vec![T::zero(); g.cout * k];
    if want_w {
        let cols = im2col(x, g);
        // SAFETY: [cout,nl] x [nl,k] (cols viewed transposed) -> [cout,k].
        unsafe {
            T::gemm(
                g.cout,
                nl,
                k,
                gmat.as_ptr(),
                nl as isize,
                1,
                cols.as_ptr(),
                1,
                nl as isize,
                T::zero(),
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        if CONV_BACKWARD_FAULT.load(Ordering::Relaxed) {
            for v in dw.iter_mut() {
                *v = *v * T::lift(1.05) + T::lift(1e-3);
            }
        }
    }

    let dx = want_x.then(|| {
        let mut dcols = vec![T::zero(); k * nl];
        // SAFETY: [k,cout] (w viewed transposed) x [cout,nl] -> [k,nl].
        unsafe {
            T::gemm(
                k,
                g.cout,
                nl,
                w.as_ptr(),
                1,
                k as isize,
                gmat.as_ptr(),
                nl as isize,
                1,
                T::zero(),
                dcols.as_mut_ptr(),
                nl as isize,
                1,
            );
        }
        col2im(&dcols, g)
    });
    (dx, dw, db)
}

impl<T: Scalar> Tape<T> {
    /// Elementwise sum. `b` may also be a per-channel bias (`[C]` or `[1,C,1,1]`)
    /// broadcast over a rank-4 `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
            let out = ta.with_data(data);
            return self.push(
                out,
                &[a, b],
                grad_fn("add", |g, _, _, _| Ok(vec![Some(g.clone()), Some(g.clone())])),
            );
        }
        let [n, c, h, w] = ta.dims4().map_err(|_| mismatch("add", ta.shape(), tb.shape()))?;
        let bias_shape = tb.shape() == [c] || tb.shape() == [1, c, 1, 1];
        if !bias_shape {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let hw = h * w;
        let mut data = ta.data().to_vec();
        for (i, chunk) in data.chunks_mut(hw).enumerate() {
            let bv = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
        let out = ta.with_data(data);
        let bshape = tb.shape().to_vec();
        self.push(
            out,
            &[a, b],
            grad_fn("add", move |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, wants: &[bool]| {
                let gb = wants[1].then(|| {
                    let mut acc = vec![0.0f64; c];
                    for (i, chunk) in g.data().chunks(hw).enumerate() {
                        acc[i % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    Tensor::raw(bshape.clone(), acc.into_iter().map(T::lift).collect())
                });
                debug_assert_eq!(g.len(), n * c * hw);
                Ok(vec![Some(g.clone()), gb])
            }),
        )
    }

    /// Elementwise product. `b` may also be `[N,1,H,W]`, broadcast over the
    /// channels of a rank-4 `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
            let out = ta.with_data(data);
            return self.push(
                out,
                &[a, b],
                grad_fn("mul", |g, inputs, _, wants| {
                    let prod = |o: &Tensor<T>| {
                        g.with_data(g.data().iter().zip(o.data()).map(|(&x, &y)| x * y).collect())
                    };
                    Ok(vec![
                        wants[0].then(|| prod(inputs[1])),
                        wants[1].then(|| prod(inputs[0])),
                    ])
                }),
            );
        }
        let [n, c, h, w] = ta.dims4().map_err(|_| mismatch("mul", ta.shape(), tb.shape()))?;
        if tb.shape() != [n, 1, h, w] {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let hw = h * w;
        let mut data = ta.data().to_vec();
        for (i, chunk) in data.chunks_mut(hw).enumerate() {
            let gate = &tb.data()[(i / c) * hw..][..hw];
            chunk.iter_mut().zip(gate).for_each(|(v, &s)| *v = *v * s);
        }
        let out = ta.with_data(data);
        self.push(
            out,
            &[a, b],
            grad_fn("mul", move |g, inputs, _, wants| {
                let (ta, tb) = (inputs[0], inputs[1]);
                let ga = wants[0].then(|| {
                    let mut d = g.data().to_vec();
                    for (i, chunk) in d.chunks_mut(hw).enumerate() {
                        let gate = &tb.data()[(i / c) * hw..][..hw];
                        chunk.iter_mut().zip(gate).for_each(|(v, &s)| *v = *v * s);
                    }
                    g.with_data(d)
                });
                let gb = wants[1].then(|| {
                    let mut d = vec![T::zero(); n * hw];
                    for (i, (gc, xc)) in g.data().chunks(hw).zip(ta.data().chunks(hw)).enumerate() {
                        let dst = &mut d[(i / c) * hw..][..hw];
                        for ((o, &gv), &xv) in dst.iter_mut().zip(gc).zip(xc) {
                            *o = *o + gv * xv;
                        }
                    }
                    tb.with_data(d)
                });
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(
            out,
            &[a],
            grad_fn("mul_scalar", move |g, _, _, _| Ok(vec![Some(g.map(|v| v * s))])),
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = T::lift(self.value(a).sum_f64());
        self.push(
            Tensor::raw(vec![1], vec![total]),
            &[a],
            grad_fn("sum", |g, inputs, _, _| {
                Ok(vec![Some(Tensor::raw(
                    inputs[0].shape().to_vec(),
                    vec![g.data()[0]; inputs[0].len()],
                ))])
            }),
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = ta.dims4()?;
        let sb = tb.dims4()?;
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(mismatch("concat_channels", ta.shape(), tb.shape()));
        }
        let [n, ca, h, w] = sa;
        let cb = sb[1];
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&tb.data()[i * lb..(i + 1) * lb]);
        }
        let out = Tensor::raw(vec![n, ca + cb, h, w], data);
        self.push(
            out,
            &[a, b],
            grad_fn("concat_channels", move |g, _, _, wants| {
                let split = |off: usize, len: usize, c: usize| {
                    let mut d = Vec::with_capacity(n * len);
                    for i in 0..n {
                        d.extend_from_slice(&g.data()[i * (la + lb) + off..][..len]);
                    }
                    Tensor::raw(vec![n, c, h, w], d)
                };
                Ok(vec![
                    wants[0].then(|| split(0, la, ca)),
                    wants[1].then(|| split(la, lb, cb)),
                ])
            }),
        )
    }

    /// 2-D cross-correlation with zero padding and an optional per-channel
    /// bias. Output extent `(H + 2·padding − kh) / stride + 1` must divide
    /// exactly.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let tb = b.map(|b| self.value(b));
        let [n, cin, h, wd] = tx.dims4()?;
        let [cout, wcin, kh, kw] = tw.dims4()?;
        if wcin != cin {
            return Err(mismatch("conv2d", tx.shape(), tw.shape()));
        }
        if let Some(tb) = tb {
            if tb.shape() != [cout] {
                return Err(mismatch("conv2d", tw.shape(), tb.shape()));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be ≥ 1"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: tw.shape().to_vec(),
                reason: "conv2d kernels must have odd extents".into(),
            });
        }
        let (Some(ho), Some(wo)) = (
            out_extent(h, kh, stride, padding),
            out_extent(wd, kw, stride, padding),
        ) else {
            return Err(Error::InvalidShape {
                shape: tx.shape().to_vec(),
                reason: format!(
                    "conv2d output extent not exact for kernel {kh}x{kw}, stride {stride}, padding {padding}"
                ),
            });
        };
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let out = conv_forward(tx.data(), tw.data(), tb.map(|t| t.data()), &geom);
        let out = Tensor::raw(vec![n, cout, ho, wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            out,
            &inputs,
            grad_fn("conv2d", move |g, inputs, _, wants| {
                let (dx, dw, db) = conv_backward(
                    inputs[0].data(),
                    inputs[1].data(),
                    g.data(),
                    &geom,
                    wants[0],
                    wants[1],
                );
                let mut out = vec![
                    dx.map(|d| inputs[0].with_data(d)),
                    wants[1].then(|| inputs[1].with_data(dw)),
                ];
                if inputs.len() == 3 {
                    out.push(wants[2].then(|| inputs[2].with_data(db)));
                }
                Ok(out)
            }),
        )
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            out,
            &[x],
            grad_fn("relu", |g, inputs, _, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(inputs[0].data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                Ok(vec![Some(g.with_data(d))])
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(
            out,
            &[x],
            grad_fn("sigmoid", |g, _, y, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                Ok(vec![Some(g.with_data(d))])
            }),
        )
    }

    /// Softmax over the channel axis, independently per (batch, row, col).
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = tx.dims4()?;
        let hw = h * w;
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        let mut buf = vec![0.0f64; c];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut max = f64::NEG_INFINITY;
                for (k, slot) in buf.iter_mut().enumerate() {
                    *slot = src[base + k * hw + p].as_f64();
                    max = max.max(*slot);
                }
                let mut total = 0.0;
                for slot in buf.iter_mut() {
                    *slot = (*slot - max).exp();
                    total += *slot;
                }
                for (k, slot) in buf.iter().enumerate() {
                    out[base + k * hw + p] = T::lift(slot / total);
                }
            }
        }
        let out = tx.with_data(out);
        self.push(
            out,
            &[x],
            grad_fn("softmax_channel", move |g: &Tensor<T>, _: &[&Tensor<T>], y: &Tensor<T>, _: &[bool]| {
                let (gd, yd) = (g.data(), y.data());
                let mut d = vec![T::zero(); gd.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let dot: f64 = (0..c)
                            .map(|k| gd[base + k * hw + p].as_f64() * yd[base + k * hw + p].as_f64())
                            .sum();
                        for k in 0..c {
                            let i = base + k * hw + p;
                            d[i] = T::lift(yd[i].as_f64() * (gd[i].as_f64() - dot));
                        }
                    }
                }
                Ok(vec![Some(g.with_data(d))])
            }),
        )
    }

    /// 2×2 max pooling with stride 2. The gradient goes to the first maximal
    /// cell of each window in row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = tx.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: tx.shape().to_vec(),
                reason: "maxpool2d needs even height and width".into(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = tx.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::raw(vec![n, c, ho, wo], out);
        self.push(
            out,
            &[x],
            grad_fn("maxpool2d", move |g, inputs, _, _| {
                let mut d = vec![T::zero(); inputs[0].len()];
                for (&gv, &i) in g.data().iter().zip(&argmax) {
                    d[i as usize] = d[i as usize] + gv;
                }
                Ok(vec![Some(inputs[0].with_data(d))])
            }),
        )
    }

    /// Nearest-neighbour ×2 upsampling; backward sums each 2×2 block.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = tx.dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let src = tx.data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let s = &src[plane * h * w..][..h * w];
            let d = &mut out[plane * ho * wo..][..ho * wo];
            for y in 0..ho {
                for xo in 0..wo {
                    d[y * wo + xo] = s[(y / 2) * w + xo / 2];
                }
            }
        }
        let out = Tensor::raw(vec![n, c, ho, wo], out);
        self.push(
            out,
            &[x],
            grad_fn("upsample_nearest2", move |g, inputs, _, _| {
                let mut d = vec![T::zero(); inputs[0].len()];
                let gd = g.data();
                for plane in 0..n * c {
                    let s = &gd[plane * ho * wo..][..ho * wo];
                    let dst = &mut d[plane * h * w..][..h * w];
                    for y in 0..ho {
                        for xo in 0..wo {
                            let o = &mut dst[(y / 2) * w + xo / 2];
                            *o = *o + s[y * wo + xo];
                        }
                    }
                }
                Ok(vec![Some(inputs[0].with_data(d))])
            }),
        )
    }

    /// Per-channel batch normalization over (batch, height, width).
    ///
    /// Train mode normalizes with biased batch statistics and folds the
    /// unbiased batch variance into the running estimate with momentum 0.1.
    /// Eval mode uses the running statistics.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = tx.dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" { "batchnorm2d" } else { "batchnorm2d(beta)" },
                    left: tx.shape().to_vec(),
                    right: self.value(v).shape().to_vec(),
                });
            }
        }
        if state.running_mean.shape() != [c] || state.running_var.shape() != [c] {
            return Err(mismatch(
                "batchnorm2d",
                tx.shape(),
                state.running_mean.shape(),
            ));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let src = tx.data();
        let gm = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();

        let (mean, invstd): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += src[(b * c + ch) * hw..][..hw]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for b in 0..n {
                        ss += src[(b * c + ch) * hw..][..hw]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let rm = state.running_mean.data_mut();
                for ch in 0..c {
                    rm[ch] = T::lift(
                        (1.0 - BATCHNORM_MOMENTUM) * rm[ch].as_f64() + BATCHNORM_MOMENTUM * mean[ch],
                    );
                }
                let rv = state.running_var.data_mut();
                for ch in 0..c {
                    rv[ch] = T::lift(
                        (1.0 - BATCHNORM_MOMENTUM) * rv[ch].as_f64()
                            + BATCHNORM_MOMENTUM * var[ch] * unbias,
                    );
                }
                let invstd = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
                (mean, invstd)
            }
            Mode::Eval => (
                state.running_mean.data().iter().map(|v| v.as_f64()).collect(),
                state
                    .running_var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v.as_f64() + BATCHNORM_EPS).sqrt())
                    .collect(),
            ),
        };

        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let (mu, is) = (mean[ch], invstd[ch]);
                let (gv, bv) = (gm[ch].as_f64(), bt[ch].as_f64());
                for (o, &v) in out[off..off + hw].iter_mut().zip(&src[off..off + hw]) {
                    *o = T::lift(gv * (v.as_f64() - mu) * is + bv);
                }
            }
        }
        let out = tx.with_data(out);
        self.push(
            out,
            &[x, gamma, beta],
            grad_fn("batchnorm2d", move |g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, wants: &[bool]| {
                let (xd, gd) = (inputs[0].data(), g.data());
                let gamma = inputs[1].data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for (&gv, &xv) in gd[off..off + hw].iter().zip(&xd[off..off + hw]) {
                            let xhat = (xv.as_f64() - mean[ch]) * invstd[ch];
                            sum_g[ch] += gv.as_f64();
                            sum_gx[ch] += gv.as_f64() * xhat;
                        }
                    }
                }
                let dx = wants[0].then(|| {
                    let mut d = vec![T::zero(); xd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let scale = gamma[ch].as_f64() * invstd[ch];
                            for i in off..off + hw {
                                let gv = gd[i].as_f64();
                                d[i] = T::lift(match mode {
                                    Mode::Train => {
                                        let xhat = (xd[i].as_f64() - mean[ch]) * invstd[ch];
                                        scale / m * (m * gv - sum_g[ch] - xhat * sum_gx[ch])
                                    }
                                    Mode::Eval => scale * gv,
                                });
                            }
                        }
                    }
                    inputs[0].with_data(d)
                });
                let to_t = |v: &[f64]| v.iter().map(|&x| T::lift(x)).collect::<Vec<T>>();
                Ok(vec![
                    dx,
                    wants[1].then(|| inputs[1].with_data(to_t(&sum_gx))),
                    wants[2].then(|| inputs[2].with_data(to_t(&sum_g))),
                ])
            }),
        )
    }

    /// Inverted dropout. The mask is a pure function of `seed`; eval mode and
    /// `p == 0` return `x` untouched.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let rng = CounterRng::new(seed, DROPOUT_STREAM);
        let scale = T::lift(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(x).len() as u64)
            .map(|i| if rng.uniform_at(i) < p { T::zero() } else { scale })
            .collect();
        let tx = self.value(x);
        let out = tx.with_data(tx.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect());
        self.push(
            out,
            &[x],
            grad_fn("dropout", move |g, _, _, _| {
                Ok(vec![Some(g.with_data(
                    g.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect(),
                ))])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&shape, data).unwrap()
    }

    /// Direct-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let [n, cin, h, wd] = x.dims4().unwrap();
        let [cout, _, kh, kw] = w.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_counts_neighbours() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t4([1, 1, 3, 3], vec![1.0; 9]));
        let w = tape.constant(t4([1, 1, 3, 3], vec![1.0; 9]));
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::<f32>::randn(&[2, 1, 4, 5], 3, 1.0).unwrap();
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn conv_matches_direct_loops_with_stride() {
        let x = Tensor::<f64>::randn(&[2, 3, 7, 7], 1, 1.0).unwrap();
        let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 2, 1.0).unwrap();
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let expect = naive_conv(&x, &w, &b, 2, 1);
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let bv = tape.constant(Tensor::from_vec(&[4], b).unwrap());
        let y = tape.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
        for (a, e) in tape.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_inexact_extent_and_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 6, 6]).unwrap());
        let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        assert!(tape.conv2d(x, w, Some(b), 2, 0).is_err());
        let w3 = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        let err = tape.conv2d(x, w3, Some(b), 1, 1).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1, 3, 2, 2]).unwrap());
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 2, 2]") && msg.contains("[1, 3, 2, 2]"), "{msg}");
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::<f32>::randn(&[2, 3, 2, 2], 9, 1.0).unwrap();
        let x = tape.constant(xv.clone());
        let z = tape.constant(Tensor::zeros_like(&xv));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn concat_extents_add() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[1, 3, 2, 2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1, 4, 2, 2]).unwrap());
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 7, 2, 2]);
        let c = tape.constant(Tensor::zeros(&[1, 4, 2, 3]).unwrap());
        assert!(tape.concat_channels(a, c).is_err());
    }

    #[test]
    fn activations_basic_values() {
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::zeros(&[1, 5, 2, 2]).unwrap());
        let s = tape.softmax_channel(z).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        let sg = tape.sigmoid(z).unwrap();
        assert!(tape.value(sg).data().iter().all(|&v| v == 0.5));
        let big = tape.constant(Tensor::from_vec(&[3], vec![-100.0, 0.0, 100.0]).unwrap());
        let sb = tape.sigmoid(big).unwrap();
        let v = tape.value(sb).data();
        assert!(v[0] >= 0.0 && v[2] <= 1.0 && v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::randn(&[2, 5, 3, 3], 4, 3.0).unwrap());
        let s = tape.softmax_channel(x).unwrap();
        let d = tape.value(s).data();
        for b in 0..2 {
            for p in 0..9 {
                let total: f32 = (0..5).map(|k| d[b * 45 + k * 9 + p]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn maxpool_block_and_odd_rejection() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 2]).unwrap());
        assert!(tape.maxpool2d(odd).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first_cell() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t4([1, 1, 2, 2], vec![1.0, 3.0, 3.0, 3.0]), true);
        let y = tape.maxpool2d(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::<f32>::randn(&[2, 3, 3, 5], 8, 1.0).unwrap();
        let x = tape.constant(xv.clone());
        let u = tape.upsample_nearest2(x).unwrap();
        assert_eq!(tape.shape(u), &[2, 3, 6, 10]);
        let p = tape.maxpool2d(u).unwrap();
        assert_eq!(tape.value(p), &xv);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::<f32>::randn(&[4, 3, 5, 5], 2, 3.0).unwrap().map(|v| v + 2.0));
        let g = tape.constant(Tensor::full(&[3], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]).unwrap());
        let mut st = BatchNormState::new(3).unwrap();
        let y = tape.batchnorm2d(x, g, b, &mut st, Mode::Train).unwrap();
        let d = tape.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| d[(n * 3 + ch) * 25..][..25].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        // running stats moved toward the batch statistics
        assert!(st.running_mean.data().iter().all(|&m| m > 0.05));
    }

    #[test]
    fn batchnorm_eval_with_identity_stats() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::<f32>::randn(&[2, 2, 3, 3], 5, 1.0).unwrap();
        let x = tape.constant(xv.clone());
        let g = tape.constant(Tensor::full(&[2], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        let mut st = BatchNormState::new(2).unwrap();
        let y = tape.batchnorm2d(x, g, b, &mut st, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BATCHNORM_EPS).sqrt();
        for (o, i) in tape.value(y).data().iter().zip(xv.data()) {
            assert!((*o as f64 - *i as f64 * scale).abs() < 1e-6);
        }
        assert_eq!(st, BatchNormState::new(2).unwrap());
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::<f32>::randn(&[1000], 1, 1.0).unwrap();
        let x = tape.constant(xv.clone());
        let e = tape.dropout(x, 0.3, 5, Mode::Eval).unwrap();
        assert_eq!(tape.value(e), &xv);
        let z = tape.dropout(x, 0.0, 5, Mode::Train).unwrap();
        assert_eq!(tape.value(z), &xv);
        assert!(tape.dropout(x, 1.0, 5, Mode::Train).is_err());
    }

    #[test]
    fn dropout_rate_and_scaling() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[100_000], 1.0).unwrap());
        let y = tape.dropout(x, 0.3, 11, Mode::Train).unwrap();
        let d = tape.value(y).data();
        let zeros = d.iter().filter(|&&v| v == 0.0).count() as f64 / d.len() as f64;
        assert!((zeros - 0.3).abs() < 0.01, "zero fraction {zeros}");
        let kept = 1.0f32 / 0.7;
        assert!(d.iter().all(|&v| v == 0.0 || v == kept));
        let y2 = tape.dropout(x, 0.3, 11, Mode::Train).unwrap();
        assert_eq!(tape.value(y), tape.value(y2));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::<f64>::randn(&[2, 3, 4], 1, 1.0).unwrap();
        let x = tape.leaf(xv.clone(), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.mul_scalar(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        for (a, b) in g.get(x).unwrap().data().iter().zip(xv.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3]).unwrap(), true);
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y).is_err(), "non-scalar loss");
        let s = tape.sum(y).unwrap();
        let mut tape2 = Tape::<f32>::new();
        std::mem::swap(&mut tape, &mut tape2);
        tape2.backward(s).unwrap();
        assert!(tape2.backward(s).is_err(), "second backward");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 2.0).unwrap(), true);
        let c = tape.constant(Tensor::full(&[2], 3.0).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn fan_out_gradients_add() {
        let xv = Tensor::<f64>::randn(&[1, 2, 2, 2], 3, 1.0).unwrap();
        let branch = |use_a: bool, use_b: bool| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(xv.clone(), true);
            let mut terms = Vec::new();
            if use_a {
                let s = tape.sigmoid(x).unwrap();
                terms.push(tape.sum(s).unwrap());
            }
            if use_b {
                let r = tape.mul(x, x).unwrap();
                terms.push(tape.sum(r).unwrap());
            }
            let loss = if terms.len() == 2 {
                tape.add(terms[0], terms[1]).unwrap()
            } else {
                terms[0]
            };
            tape.backward(loss).unwrap().take(x).unwrap()
        };
        let both = branch(true, true);
        let a = branch(true, false);
        let b = branch(false, true);
        for i in 0..both.len() {
            assert!((both.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2], f32::MAX).unwrap());
        let err = tape.mul_scalar(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul_scalar" }));
    }
}
