//! Straight-loop f64 re-implementation of the network forward pass. Serves
//! as the finite-difference oracle for the full model: in double precision
//! a step of 1e-6 almost never crosses a ReLU or max-selection kink.

use polarnet::grid::{region_gate_map, GridSpec, PriorMatrix};
use polarnet::net::{projection_name, BasicBlock, PolarNetModel};
use polarnet::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct T64 {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl T64 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        T64 { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        let shape = match s.len() {
            4 => [s[0], s[1], s[2], s[3]],
            2 => [s[0], s[1], 1, 1],
            1 => [s[0], 1, 1, 1],
            _ => panic!("unsupported rank"),
        };
        T64 { shape, data: t.data().iter().map(|&v| v as f64).collect() }
    }

    fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = self.shape;
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> T64 {
        T64 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Flat f64 copy of every parameter, indexed like the model's store.
pub fn params64(model: &PolarNetModel) -> Vec<Vec<f64>> {
    model.params.tensors().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect()
}

struct Net<'a> {
    model: &'a PolarNetModel,
    p: &'a [Vec<f64>],
}

enum Pad {
    Same,
    Explicit(usize),
}

impl Net<'_> {
    fn param(&self, id: polarnet::net::ParamId) -> (&[usize], &[f64]) {
        (self.model.params.get(id).shape(), &self.p[id.index()])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&self, x: &T64, w: polarnet::net::ParamId, b: Option<polarnet::net::ParamId>, stride: usize, dil: usize, pad: Pad) -> T64 {
        let circular = self.model.config.circular_theta;
        let (ws, wd) = self.param(w);
        let (o, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let [n, c, h, wi] = x.shape;
        assert_eq!(c, ci);
        let before = |k: usize| match pad {
            Pad::Same => ((k - 1) * dil) / 2,
            Pad::Explicit(p) => p,
        };
        let total = |k: usize| match pad {
            Pad::Same => (k - 1) * dil,
            Pad::Explicit(p) => 2 * p,
        };
        let (bh, bw) = (before(kh) as isize, before(kw) as isize);
        let oh = (h + total(kh) - ((kh - 1) * dil + 1)) / stride + 1;
        let ow = (wi + total(kw) - ((kw - 1) * dil + 1)) / stride + 1;
        let mut out = T64::zeros([n, o, oh, ow]);
        let bias = b.map(|b| self.p[b.index()].clone());
        for b_ in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.as_ref().map_or(0.0, |v| v[oc]);
                        for ic in 0..c {
                            for ty in 0..kh {
                                let mut iy = (y * stride + ty * dil) as isize - bh;
                                if iy < 0 || iy >= h as isize {
                                    if !circular {
                                        continue;
                                    }
                                    iy = iy.rem_euclid(h as isize);
                                }
                                for tx in 0..kw {
                                    let ix = (xx * stride + tx * dil) as isize - bw;
                                    if ix < 0 || ix >= wi as isize {
                                        continue;
                                    }
                                    acc += wd[((oc * ci + ic) * kh + ty) * kw + tx] * x.at(b_, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.data[((b_ * o + oc) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    /// Stride-1 same max pool; rows wrap when circular, columns pad with -inf.
    fn maxpool_same(&self, x: &T64, k: usize) -> T64 {
        let circular = self.model.config.circular_theta;
        let [n, c, h, w] = x.shape;
        let before = ((k - 1) / 2) as isize;
        let mut out = T64::zeros(x.shape);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let mut m = f64::NEG_INFINITY;
                        for ty in 0..k {
                            let mut iy = y as isize + ty as isize - before;
                            if iy < 0 || iy >= h as isize {
                                if !circular {
                                    continue;
                                }
                                iy = iy.rem_euclid(h as isize);
                            }
                            for tx in 0..k {
                                let ix = xx as isize + tx as isize - before;
                                if ix >= 0 && ix < w as isize {
                                    m = m.max(x.at(b, ch, iy as usize, ix as usize));
                                }
                            }
                        }
                        out.data[((b * c + ch) * h + y) * w + xx] = m;
                    }
                }
            }
        }
        out
    }

    fn leaky(&self, x: &T64) -> T64 {
        let s = self.model.config.leaky_slope as f64;
        x.map(|v| if v > 0.0 { v } else { s * v })
    }

    fn scalar(&self, id: polarnet::net::ParamId) -> f64 {
        self.p[id.index()][0]
    }

    fn mkac(&self, b: usize, x: &T64) -> T64 {
        let pf = &self.model.branches[b].pfem;
        let mut acc: Option<T64> = None;
        for (i, &(_, d)) in self.model.config.mkac_kernels.iter().enumerate() {
            let s = self.scalar(pf.mkac_w[i]);
            let h = self.conv(x, pf.mkac[i], None, 1, d, Pad::Same).map(|v| v * s);
            acc = Some(match acc {
                Some(mut a) => {
                    a.data.iter_mut().zip(&h.data).for_each(|(a, b)| *a += b);
                    a
                }
                None => h,
            });
        }
        self.leaky(&acc.unwrap())
    }

    fn mkpm(&self, b: usize, x: &T64) -> T64 {
        let pf = &self.model.branches[b].pfem;
        let mut acc = x.clone();
        for (i, &k) in self.model.config.mkpm_kernels.iter().enumerate() {
            let s = self.scalar(pf.mkpm_w[i]);
            let m = self.maxpool_same(x, k);
            acc.data.iter_mut().zip(&m.data).for_each(|(a, v)| *a += v * s);
        }
        self.leaky(&acc)
    }

    fn mlp(&self, b: usize, v: &[f64]) -> Vec<f64> {
        let cb = &self.model.branches[b].pfem.cbam;
        let lin = |w: polarnet::net::ParamId, bias: polarnet::net::ParamId, x: &[f64]| -> Vec<f64> {
            let (ws, wd) = self.param(w);
            let bd = &self.p[bias.index()];
            (0..ws[0]).map(|o| bd[o] + (0..ws[1]).map(|i| wd[o * ws[1] + i] * x[i]).sum::<f64>()).collect()
        };
        let z: Vec<f64> = lin(cb.w1, cb.b1, v).into_iter().map(|v| v.max(0.0)).collect();
        lin(cb.w2, cb.b2, &z)
    }

    fn cbam(&self, b: usize, x: &T64) -> T64 {
        let cb = &self.model.branches[b].pfem.cbam;
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let mut x1 = x.clone();
        for s in 0..n {
            let avg: Vec<f64> = (0..c).map(|ch| x.data[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
            let max: Vec<f64> = (0..c)
                .map(|ch| x.data[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let (a, m) = (self.mlp(b, &avg), self.mlp(b, &max));
            for ch in 0..c {
                let gate = 1.0 / (1.0 + (-(a[ch] + m[ch])).exp());
                x1.data[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter_mut().for_each(|v| *v *= gate);
            }
        }
        let mut pair = T64::zeros([n, 2, h, w]);
        for s in 0..n {
            for i in 0..hw {
                let vals = (0..c).map(|ch| x1.data[(s * c + ch) * hw + i]);
                pair.data[(s * 2) * hw + i] = vals.clone().sum::<f64>() / c as f64;
                pair.data[(s * 2 + 1) * hw + i] = vals.fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let sp = self.conv(&pair, cb.spatial, None, 1, 1, Pad::Same).map(|v| 1.0 / (1.0 + (-v).exp()));
        for s in 0..n {
            for ch in 0..c {
                for i in 0..hw {
                    x1.data[(s * c + ch) * hw + i] *= sp.data[s * hw + i];
                }
            }
        }
        x1
    }

    fn block(&self, blk: &BasicBlock, x: &T64) -> T64 {
        let y = self.conv(x, blk.conv1.0, Some(blk.conv1.1), blk.stride, 1, Pad::Explicit(1)).map(|v| v.max(0.0));
        let mut y = self.conv(&y, blk.conv2.0, Some(blk.conv2.1), 1, 1, Pad::Same);
        let skip = match blk.shortcut {
            Some((w, b)) => self.conv(x, w, Some(b), blk.stride, 1, Pad::Explicit(0)),
            None => x.clone(),
        };
        y.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a = (*a + b).max(0.0));
        y
    }
}

fn concat(maps: &[T64]) -> T64 {
    let [n, _, h, w] = maps[0].shape;
    let c: usize = maps.iter().map(|m| m.shape[1]).sum();
    let mut out = T64::zeros([n, c, h, w]);
    let hw = h * w;
    for s in 0..n {
        let mut off = 0;
        for m in maps {
            let mc = m.shape[1];
            out.data[(s * c + off) * hw..(s * c + off + mc) * hw].copy_from_slice(&m.data[s * mc * hw..(s + 1) * mc * hw]);
            off += mc;
        }
    }
    out
}

/// Logits `[N][classes]`.
pub fn logits(model: &PolarNetModel, p: &[Vec<f64>], inputs: &[Tensor], prior: Option<&PriorMatrix>) -> Vec<Vec<f64>> {
    let net = Net { model, p };
    let mut maps = Vec::new();
    for (b, t) in inputs.iter().enumerate() {
        let x = T64::from_tensor(t);
        let f = concat(&[net.mkac(b, &x), net.mkpm(b, &x)]);
        let mut y = net.cbam(b, &f);
        for blk in &model.branches[b].trunk {
            y = net.block(blk, &y);
        }
        if let Some(pr) = prior {
            let [_, _, h, w] = y.shape;
            let gate = region_gate_map(&GridSpec::etdrs(), &pr.weights(&projection_name(&model.config, b)), h, w).unwrap();
            let hw = h * w;
            for (i, v) in y.data.iter_mut().enumerate() {
                *v *= gate[i % hw] as f64;
            }
        }
        maps.push(y);
    }
    let mut z = concat(&maps);
    for blk in &model.fusion {
        z = net.block(blk, &z);
    }
    let [n, c, h, w] = z.shape;
    let hw = h * w;
    let (ws, wd) = net.param(model.head.0);
    let bd = &p[model.head.1.index()];
    (0..n)
        .map(|s| {
            let pooled: Vec<f64> =
                (0..c).map(|ch| z.data[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
            (0..ws[0]).map(|o| bd[o] + (0..c).map(|i| wd[o * c + i] * pooled[i]).sum::<f64>()).collect()
        })
        .collect()
}

/// Class-weighted mean cross-entropy, normalised by the total weight.
pub fn cross_entropy(logits: &[Vec<f64>], targets: &[usize], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        num += weights[t] * (lse - row[t]);
        den += weights[t];
    }
    num / den
}
