//! Forward and backward kernels. Reductions accumulate in f64 and round
//! once on store, so results do not depend on loop blocking.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    /// Output keeps the input spatial size (stride 1 only for convolutions).
    Same,
    /// The same number of padded cells on both sides of both axes.
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    /// Wrap the row (θ) axis around instead of zero padding it.
    pub circular_rows: bool,
}

impl Conv2dSpec {
    pub fn same(dilation: usize) -> Self {
        Conv2dSpec { stride: 1, dilation, padding: Padding::Same, circular_rows: false }
    }

    pub fn valid() -> Self {
        Conv2dSpec { stride: 1, dilation: 1, padding: Padding::Valid, circular_rows: false }
    }

    pub fn circular(mut self, on: bool) -> Self {
        self.circular_rows = on;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub circular_rows: bool,
}

impl PoolSpec {
    pub fn same(kernel: usize) -> Self {
        PoolSpec { kernel, stride: 1, padding: Padding::Same, circular_rows: false }
    }

    pub fn valid(kernel: usize, stride: usize) -> Self {
        PoolSpec { kernel, stride, padding: Padding::Valid, circular_rows: false }
    }

    pub fn circular(mut self, on: bool) -> Self {
        self.circular_rows = on;
        self
    }
}

/// One spatial axis of a windowed operator.
#[derive(Clone, Copy, Debug)]
struct Axis {
    len: usize,
    out: usize,
    before: isize,
    stride: usize,
    step: usize,
    taps: usize,
    circular: bool,
}

impl Axis {
    fn conv(len: usize, taps: usize, stride: usize, dilation: usize, padding: Padding, circular: bool) -> Result<Self> {
        let extent = (taps - 1) * dilation + 1;
        let (before, after) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((extent - 1) / 2, extent - 1 - (extent - 1) / 2),
            Padding::Explicit(p) => (p, p),
        };
        let padded = len + before + after;
        if padded < extent {
            return dim_err(format!("window extent {extent} exceeds padded length {padded}"));
        }
        Ok(Axis { len, out: (padded - extent) / stride + 1, before: before as isize, stride, step: dilation, taps, circular })
    }

    fn pool(len: usize, k: usize, stride: usize, padding: Padding, circular: bool) -> Result<Self> {
        let (before, after) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let out = len.div_ceil(stride);
                let total = ((out - 1) * stride + k).saturating_sub(len);
                (total / 2, total - total / 2)
            }
            Padding::Explicit(p) => (p, p),
        };
        let padded = len + before + after;
        if k > padded {
            return dim_err(format!("pool kernel {k} larger than padded extent {padded}"));
        }
        Ok(Axis { len, out: (padded - k) / stride + 1, before: before as isize, stride, step: 1, taps: k, circular })
    }

    /// Source index for output `o`, tap `t`; `None` when it falls in zero padding.
    #[inline]
    fn source(&self, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride + t * self.step) as isize - self.before;
        if self.circular {
            Some(i.rem_euclid(self.len as isize) as usize)
        } else if i < 0 || i >= self.len as isize {
            None
        } else {
            Some(i as usize)
        }
    }

    /// Output range `[lo, hi)` whose tap `t` stays inside `[0, len)`, plus the
    /// source offset such that `src = o * stride + offset`.
    #[inline]
    fn valid_range(&self, t: usize) -> (usize, usize, isize) {
        let offset = (t * self.step) as isize - self.before;
        let s = self.stride as isize;
        // o*s + offset >= 0  and  o*s + offset <= len - 1
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let hi_num = self.len as isize - 1 - offset;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(self.out as isize) };
        let lo = lo.min(hi);
        (lo as usize, hi as usize, offset)
    }
}

pub(crate) struct ConvGeometry {
    rows: Axis,
    cols: Axis,
    n: usize,
    cin: usize,
    cout: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: &Tensor, kernel: &Tensor, spec: &Conv2dSpec) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, kcin, kh, kw) = kernel.dims4()?;
        if kcin != cin {
            return dim_err(format!("conv2d: input has {cin} channels, kernel expects {kcin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Parameter(format!("conv2d kernel {kh}x{kw} must have odd sides")));
        }
        if spec.dilation == 0 || spec.stride == 0 {
            return Err(Error::Parameter("conv2d stride and dilation must be >= 1".into()));
        }
        if spec.padding == Padding::Same && spec.stride != 1 {
            return Err(Error::Parameter("same padding requires stride 1".into()));
        }
        let rows = Axis::conv(h, kh, spec.stride, spec.dilation, spec.padding, spec.circular_rows)?;
        let cols = Axis::conv(w, kw, spec.stride, spec.dilation, spec.padding, false)?;
        Ok(ConvGeometry { rows, cols, n, cin, cout })
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.rows.out, self.cols.out]
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return dim_err(format!("conv2d bias {:?} != [{}]", b.shape(), g.cout));
        }
    }
    let (h, w) = (g.rows.len, g.cols.len);
    let (ho, wo) = (g.rows.out, g.cols.out);
    let (kh, kw) = (g.rows.taps, g.cols.taps);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0f32; g.n * g.cout * ho * wo];
    let mut acc = vec![0.0f64; ho * wo];
    let s = g.cols.stride;
    for n in 0..g.n {
        for co in 0..g.cout {
            let b0 = bias.map_or(0.0, |b| b.data()[co] as f64);
            acc.iter_mut().for_each(|a| *a = b0);
            for ci in 0..g.cin {
                let plane = &x[(n * g.cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = k[((co * g.cin + ci) * kh + ky) * kw + kx] as f64;
                        let (lo, hi, off) = g.cols.valid_range(kx);
                        for oy in 0..ho {
                            let Some(iy) = g.rows.source(oy, ky) else { continue };
                            let row = &plane[iy * w..(iy + 1) * w];
                            let dst = &mut acc[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let src = &row[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                for (d, &v) in dst[lo..hi].iter_mut().zip(src) {
                                    *d += wv * v as f64;
                                }
                            } else {
                                for ox in lo..hi {
                                    dst[ox] += wv * row[(ox as isize * s as isize + off) as usize] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(n * g.cout + co) * ho * wo..][..ho * wo];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
    }
    Ok(Tensor::from_parts(g.output_shape(), out))
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor, spec: &Conv2dSpec, want: [bool; 3]) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, kernel, spec)?;
    let (h, w) = (g.rows.len, g.cols.len);
    let (ho, wo) = (g.rows.out, g.cols.out);
    let (kh, kw) = (g.rows.taps, g.cols.taps);
    let s = g.cols.stride as isize;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();

    let grad_input = want[0].then(|| {
        let mut gin = vec![0.0f32; x.len()];
        let mut acc = vec![0.0f64; h * w];
        for n in 0..g.n {
            for ci in 0..g.cin {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for co in 0..g.cout {
                    let gplane = &go[(n * g.cout + co) * ho * wo..][..ho * wo];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = k[((co * g.cin + ci) * kh + ky) * kw + kx] as f64;
                            let (lo, hi, off) = g.cols.valid_range(kx);
                            for oy in 0..ho {
                                let Some(iy) = g.rows.source(oy, ky) else { continue };
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                let dst = &mut acc[iy * w..(iy + 1) * w];
                                for ox in lo..hi {
                                    dst[(ox as isize * s + off) as usize] += wv * grow[ox] as f64;
                                }
                            }
                        }
                    }
                }
                let dst = &mut gin[(n * g.cin + ci) * h * w..][..h * w];
                for (d, a) in dst.iter_mut().zip(&acc) {
                    *d = *a as f32;
                }
            }
        }
        Tensor::from_parts(input.shape().to_vec(), gin)
    });

    let grad_kernel = want[1].then(|| {
        let mut gk = vec![0.0f32; k.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (lo, hi, off) = g.cols.valid_range(kx);
                        let mut acc = 0.0f64;
                        for n in 0..g.n {
                            let plane = &x[(n * g.cin + ci) * h * w..][..h * w];
                            let gplane = &go[(n * g.cout + co) * ho * wo..][..ho * wo];
                            for oy in 0..ho {
                                let Some(iy) = g.rows.source(oy, ky) else { continue };
                                let row = &plane[iy * w..(iy + 1) * w];
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                for ox in lo..hi {
                                    acc += grow[ox] as f64 * row[(ox as isize * s + off) as usize] as f64;
                                }
                            }
                        }
                        gk[((co * g.cin + ci) * kh + ky) * kw + kx] = acc as f32;
                    }
                }
            }
        }
        Tensor::from_parts(kernel.shape().to_vec(), gk)
    });

    let grad_bias = want[2].then(|| {
        let gb = (0..g.cout)
            .map(|co| {
                (0..g.n).map(|n| go[(n * g.cout + co) * ho * wo..][..ho * wo].iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() as f32
            })
            .collect();
        Tensor::from_parts(vec![g.cout], gb)
    });

    Ok(ConvGrads { input: grad_input, kernel: grad_kernel, bias: grad_bias })
}

/// Max pooling; returns the pooled tensor and, per output cell, the flat
/// index of the selected input element within its (n, c) plane.
pub(crate) fn maxpool2d_forward(input: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = input.dims4()?;
    if spec.kernel == 0 || spec.stride == 0 {
        return Err(Error::Parameter("pool kernel and stride must be >= 1".into()));
    }
    let rows = Axis::pool(h, spec.kernel, spec.stride, spec.padding, spec.circular_rows)?;
    let cols = Axis::pool(w, spec.kernel, spec.stride, spec.padding, false)?;
    let (ho, wo) = (rows.out, cols.out);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let plane = &x[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = u32::MAX;
                for ky in 0..spec.kernel {
                    let Some(iy) = rows.source(oy, ky) else { continue };
                    for kx in 0..spec.kernel {
                        let Some(ix) = cols.source(ox, kx) else { continue };
                        let v = plane[iy * w + ix];
                        if v > best || best_i == u32::MAX {
                            best = v;
                            best_i = (iy * w + ix) as u32;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), arg))
}

/// Routes each output gradient to the argmax element recorded in forward.
pub(crate) fn scatter_argmax(input_shape: &[usize], plane_len: usize, out_per_plane: usize, argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let numel: usize = input_shape.iter().product();
    let mut acc = vec![0.0f64; numel];
    for (o, (&a, &g)) in argmax.iter().zip(grad_out.data()).enumerate() {
        let p = o / out_per_plane;
        acc[p * plane_len + a as usize] += g as f64;
    }
    Tensor::from_parts(input_shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

pub(crate) fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let data = input.data().chunks_exact(hw).map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32).collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub(crate) fn global_max_pool(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = input.dims4()?;
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for p in input.data().chunks_exact(h * w) {
        let (mut bi, mut bv) = (0usize, p[0]);
        for (i, &v) in p.iter().enumerate().skip(1) {
            if v > bv {
                bv = v;
                bi = i;
            }
        }
        out.push(bv);
        arg.push(bi as u32);
    }
    Ok((Tensor::from_parts(vec![n, c], out), arg))
}

/// Mean over the channel axis: `[N,C,H,W] -> [N,1,H,W]`.
pub(crate) fn channel_mean(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0f32; n * hw];
    for b in 0..n {
        for i in 0..hw {
            let s: f64 = (0..c).map(|ch| x[(b * c + ch) * hw + i] as f64).sum();
            out[b * hw + i] = (s / c as f64) as f32;
        }
    }
    Ok(Tensor::from_parts(vec![n, 1, h, w], out))
}

/// Max over the channel axis with the winning channel per position.
pub(crate) fn channel_max(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0f32; n * hw];
    let mut arg = vec![0u32; n * hw];
    for b in 0..n {
        for i in 0..hw {
            let (mut bc, mut bv) = (0usize, x[b * c * hw + i]);
            for ch in 1..c {
                let v = x[(b * c + ch) * hw + i];
                if v > bv {
                    bv = v;
                    bc = ch;
                }
            }
            out[b * hw + i] = bv;
            arg[b * hw + i] = bc as u32;
        }
    }
    Ok((Tensor::from_parts(vec![n, 1, h, w], out), arg))
}

pub(crate) fn linear_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, f) = input.dims2()?;
    let (o, wf) = weight.dims2()?;
    if wf != f {
        return dim_err(format!("linear: input features {f} vs weight {wf}"));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return dim_err(format!("linear bias {:?} != [{o}]", b.shape()));
        }
    }
    let (x, wt) = (input.data(), weight.data());
    let mut out = Vec::with_capacity(n * o);
    for r in 0..n {
        let xr = &x[r * f..(r + 1) * f];
        for j in 0..o {
            let wr = &wt[j * f..(j + 1) * f];
            let dot: f64 = xr.iter().zip(wr).map(|(&a, &b)| a as f64 * b as f64).sum();
            out.push((dot + bias.map_or(0.0, |b| b.data()[j] as f64)) as f32);
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

/// Row-wise softmax computed in f64.
pub(crate) fn softmax_rows(logits: &Tensor) -> Result<Vec<f64>> {
    let (n, k) = logits.dims2()?;
    let mut p = Vec::with_capacity(n * k);
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        p.extend(e.into_iter().map(|v| v / z));
    }
    debug_assert_eq!(p.len(), n * k);
    Ok(p)
}

/// Sums rows of `[N, F]` gradients into `[F]` (bias gradients).
pub(crate) fn sum_rows(t: &Tensor, cols: usize) -> Tensor {
    let mut acc = vec![0.0f64; cols];
    for row in t.data().chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Tensor::from_parts(vec![cols], acc.into_iter().map(|v| v as f32).collect())
}
