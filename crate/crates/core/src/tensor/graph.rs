use super::ops::{self, Conv2dSpec, PoolSpec};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    GlobalMaxPool { input: Var, argmax: Vec<u32> },
    ChannelMean(Var),
    ChannelMax { input: Var, argmax: Vec<u32> },
    LeakyRelu { input: Var, slope: f32 },
    Relu(Var),
    Sigmoid(Var),
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MulScalar { input: Var, scalar: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    RepeatSpatial { input: Var },
    RepeatChannels { input: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Pick { input: Var, column: usize },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order, which is a topological order by
/// construction: a node can only reference nodes that already exist.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf (a parameter or an input whose gradient is wanted).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the right shape.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    /// Drops accumulated gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return dim_err(format!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), &spec)?;
        let mut ins = vec![input, kernel];
        ins.extend(bias);
        self.push_op("conv2d", out, Op::Conv2d { input, kernel, bias, spec }, &ins)
    }

    pub fn maxpool2d(&mut self, input: Var, spec: PoolSpec) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(input), &spec)?;
        self.push_op("maxpool2d", out, Op::MaxPool2d { input, argmax }, &[input])
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        self.push_op("global_avg_pool", out, Op::GlobalAvgPool(input), &[input])
    }

    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::global_max_pool(self.value(input))?;
        self.push_op("global_max_pool", out, Op::GlobalMaxPool { input, argmax }, &[input])
    }

    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let out = ops::channel_mean(self.value(input))?;
        self.push_op("channel_mean", out, Op::ChannelMean(input), &[input])
    }

    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::channel_max(self.value(input))?;
        self.push_op("channel_max", out, Op::ChannelMax { input, argmax }, &[input])
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Parameter(format!("leaky_relu slope {slope} not in (0,1)")));
        }
        let out = self.value(input).map(|v| if v < 0.0 { v * slope } else { v })?;
        self.push_op("leaky_relu", out, Op::LeakyRelu { input, slope }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| v.max(0.0))?;
        self.push_op("relu", out, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(sigmoid)?;
        self.push_op("sigmoid", out, Op::Sigmoid(input), &[input])
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        self.push_op("linear", out, Op::Linear { input, weight, bias }, &ins)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push_op("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push_op("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&mut self, input: Var, s: f32) -> Result<Var> {
        let out = self.value(input).map(|v| v * s)?;
        self.push_op("scale", out, Op::Scale(input, s), &[input])
    }

    /// Multiplication by a one-element tensor node (e.g. a learnable weight).
    pub fn mul_scalar(&mut self, input: Var, scalar: Var) -> Result<Var> {
        if !self.value(scalar).is_scalar() {
            return dim_err(format!("mul_scalar: {:?} is not a scalar", self.value(scalar).shape()));
        }
        let s = self.value(scalar).item();
        let out = self.value(input).map(|v| v * s)?;
        self.push_op("mul_scalar", out, Op::MulScalar { input, scalar }, &[input, scalar])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return dim_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        self.push_op("concat", out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Explicit expansion `[N,C] -> [N,C,H,W]`.
    pub fn repeat_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.value(input).dims2()?;
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c * hw);
        for &v in self.value(input).data() {
            data.extend(std::iter::repeat_n(v, hw));
        }
        let out = Tensor::from_parts(vec![n, c, h, w], data);
        self.push_op("repeat_spatial", out, Op::RepeatSpatial { input }, &[input])
    }

    /// Explicit expansion `[N,1,H,W] -> [N,C,H,W]`.
    pub fn repeat_channels(&mut self, input: Var, c: usize) -> Result<Var> {
        let (n, one, h, w) = self.value(input).dims4()?;
        if one != 1 {
            return dim_err(format!("repeat_channels expects one channel, got {one}"));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(n * c * hw);
        for b in 0..n {
            for _ in 0..c {
                data.extend_from_slice(&x[b * hw..(b + 1) * hw]);
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, w], data);
        self.push_op("repeat_channels", out, Op::RepeatChannels { input }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        self.push_op("reshape", out, Op::Reshape(input), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        self.push_op("sum", Tensor::scalar(s as f32), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        self.push_op("mean", Tensor::scalar(s as f32), Op::Mean(input), &[input])
    }

    /// Column `column` of a `[N, K]` tensor, as `[N]`.
    pub fn pick(&mut self, input: Var, column: usize) -> Result<Var> {
        let (n, k) = self.value(input).dims2()?;
        if column >= k {
            return dim_err(format!("pick: column {column} out of range for {k}"));
        }
        let data = (0..n).map(|r| self.value(input).data()[r * k + column]).collect();
        self.push_op("pick", Tensor::from_parts(vec![n], data), Op::Pick { input, column }, &[input])
    }

    /// Weighted mean cross-entropy of `[N,K]` logits against class indices.
    /// `class_weights` scales each sample's term by the weight of its class
    /// and normalises by the total weight.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: Option<&[f32]>) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if targets.len() != n {
            return dim_err(format!("{} targets for {n} rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return dim_err(format!("target class {bad} out of range for {k} classes"));
        }
        let weights: Vec<f64> = match class_weights {
            Some(w) if w.len() != k => return dim_err(format!("{} class weights for {k} classes", w.len())),
            Some(w) => targets.iter().map(|&t| w[t] as f64).collect(),
            None => vec![1.0; n],
        };
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Parameter("class weights sum to zero".into()));
        }
        let probs = ops::softmax_rows(self.value(logits))?;
        let loss: f64 = targets.iter().enumerate().map(|(i, &t)| -weights[i] * probs[i * k + t].max(1e-300).ln()).sum::<f64>() / total;
        let weights = weights.into_iter().map(|w| w / total).collect();
        self.push_op(
            "softmax_cross_entropy",
            Tensor::scalar(loss as f32),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), weights, probs },
            &[logits],
        )
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Gradients from multiple consumers of a node are summed. A second call
    /// without [`Graph::reset_grads`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already ran; call reset_grads first".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Autodiff(format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Autodiff("loss is detached from every tracked tensor".into()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.node_backward(idx, &g)?;
            self.grads[idx] = Some(g);
            for (v, gv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(gv.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f32>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let zip_map = |v: Var, f: &dyn Fn(f32, f32) -> f32| like(v, val(v).data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect());
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, spec } => {
                let want = [rg(*input), rg(*kernel), bias.is_some_and(rg)];
                let grads = ops::conv2d_backward(val(*input), val(*kernel), g, spec, want)?;
                out.extend(grads.input.map(|t| (*input, t)));
                out.extend(grads.kernel.map(|t| (*kernel, t)));
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    out.push((*b, t));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let (_, _, h, w) = val(*input).dims4()?;
                let (_, _, ho, wo) = node.value.dims4()?;
                out.push((*input, ops::scatter_argmax(val(*input).shape(), h * w, ho * wo, argmax, g)));
            }
            Op::GlobalAvgPool(input) => {
                let (_, _, h, w) = val(*input).dims4()?;
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n((gv as f64 * inv) as f32, hw)).collect();
                out.push((*input, like(*input, data)));
            }
            Op::GlobalMaxPool { input, argmax } => {
                let (_, _, h, w) = val(*input).dims4()?;
                out.push((*input, ops::scatter_argmax(val(*input).shape(), h * w, 1, argmax, g)));
            }
            Op::ChannelMean(input) => {
                let (n, c, h, w) = val(*input).dims4()?;
                let hw = h * w;
                let mut data = vec![0.0f32; n * c * hw];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..hw {
                            data[(b * c + ch) * hw + i] = (g.data()[b * hw + i] as f64 / c as f64) as f32;
                        }
                    }
                }
                out.push((*input, like(*input, data)));
            }
            Op::ChannelMax { input, argmax } => {
                let (n, c, h, w) = val(*input).dims4()?;
                let hw = h * w;
                let mut data = vec![0.0f32; n * c * hw];
                for b in 0..n {
                    for i in 0..hw {
                        let ch = argmax[b * hw + i] as usize;
                        data[(b * c + ch) * hw + i] = g.data()[b * hw + i];
                    }
                }
                out.push((*input, like(*input, data)));
            }
            Op::LeakyRelu { input, slope } => {
                let s = *slope;
                out.push((*input, zip_map(*input, &|x, gy| if x < 0.0 { gy * s } else { gy })));
            }
            Op::Relu(input) => {
                out.push((*input, zip_map(*input, &|x, gy| if x > 0.0 { gy } else { 0.0 })));
            }
            Op::Sigmoid(input) => {
                let y = &node.value;
                let data = y.data().iter().zip(g.data()).map(|(&s, &gy)| gy * s * (1.0 - s)).collect();
                out.push((*input, like(*input, data)));
            }
            Op::Linear { input, weight, bias } => {
                let (n, f) = val(*input).dims2()?;
                let (o, _) = val(*weight).dims2()?;
                let (x, w, gd) = (val(*input).data(), val(*weight).data(), g.data());
                if rg(*input) {
                    let mut gx = vec![0.0f32; n * f];
                    for r in 0..n {
                        for c in 0..f {
                            let s: f64 = (0..o).map(|j| gd[r * o + j] as f64 * w[j * f + c] as f64).sum();
                            gx[r * f + c] = s as f32;
                        }
                    }
                    out.push((*input, like(*input, gx)));
                }
                if rg(*weight) {
                    let mut gw = vec![0.0f32; o * f];
                    for j in 0..o {
                        for c in 0..f {
                            let s: f64 = (0..n).map(|r| gd[r * o + j] as f64 * x[r * f + c] as f64).sum();
                            gw[j * f + c] = s as f32;
                        }
                    }
                    out.push((*weight, like(*weight, gw)));
                }
                if let Some(b) = bias.filter(|&b| rg(b)) {
                    out.push((b, ops::sum_rows(g, o)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, like(*a, val(*b).data().iter().zip(g.data()).map(|(y, gy)| y * gy).collect())));
                }
                if rg(*b) {
                    out.push((*b, like(*b, val(*a).data().iter().zip(g.data()).map(|(x, gy)| x * gy).collect())));
                }
            }
            Op::Scale(input, s) => {
                out.push((*input, like(*input, g.data().iter().map(|v| v * s).collect())));
            }
            Op::MulScalar { input, scalar } => {
                let s = val(*scalar).item();
                if rg(*input) {
                    out.push((*input, like(*input, g.data().iter().map(|v| v * s).collect())));
                }
                if rg(*scalar) {
                    let d: f64 = val(*input).data().iter().zip(g.data()).map(|(&x, &gy)| x as f64 * gy as f64).sum();
                    out.push((*scalar, Tensor::scalar(d as f32)));
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis];
                    if rg(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        out.push((v, like(v, data)));
                    }
                    offset += len;
                }
            }
            Op::RepeatSpatial { input } => {
                let (_, _, h, w) = node.value.dims4()?;
                let data = g.data().chunks_exact(h * w).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
                out.push((*input, like(*input, data)));
            }
            Op::RepeatChannels { input } => {
                let (n, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut data = vec![0.0f32; n * hw];
                for b in 0..n {
                    for i in 0..hw {
                        let s: f64 = (0..c).map(|ch| g.data()[(b * c + ch) * hw + i] as f64).sum();
                        data[b * hw + i] = s as f32;
                    }
                }
                out.push((*input, like(*input, data)));
            }
            Op::Reshape(input) => {
                out.push((*input, like(*input, g.data().to_vec())));
            }
            Op::Sum(input) => {
                out.push((*input, Tensor::full(val(*input).shape(), g.item())));
            }
            Op::Mean(input) => {
                let n = val(*input).numel();
                out.push((*input, Tensor::full(val(*input).shape(), (g.item() as f64 / n as f64) as f32)));
            }
            Op::Pick { input, column } => {
                let (n, k) = val(*input).dims2()?;
                let mut data = vec![0.0f32; n * k];
                for r in 0..n {
                    data[r * k + column] = g.data()[r];
                }
                out.push((*input, like(*input, data)));
            }
            Op::SoftmaxCrossEntropy { logits, targets, weights, probs } => {
                let (_, k) = val(*logits).dims2()?;
                let gl = g.item() as f64;
                let mut data = Vec::with_capacity(probs.len());
                for (i, &t) in targets.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        data.push((gl * weights[i] * (probs[i * k + c] - onehot)) as f32);
                    }
                }
                out.push((*logits, like(*logits, data)));
            }
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
