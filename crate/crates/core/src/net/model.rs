use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::grid::{region_gate_map, GridSpec, PriorMatrix, PROJECTIONS};
use crate::tensor::{io, ops, Conv2dSpec, Graph, Padding, PoolSpec, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return dim_err(format!("parameter {}: shape {:?} vs {:?}", self.names[id.0], t.shape(), self.tensors[id.0].shape()));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Cbam {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub spatial: ParamId,
}

#[derive(Clone, Debug)]
pub struct Pfem {
    pub mkac: Vec<ParamId>,
    pub mkac_w: Vec<ParamId>,
    pub mkpm_w: Vec<ParamId>,
    pub cbam: Cbam,
}

#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub shortcut: Option<(ParamId, ParamId)>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub pfem: Pfem,
    pub trunk: Vec<BasicBlock>,
}

/// Multi-branch network: per-projection PFEM and residual trunk, channel
/// concatenation, shared fusion trunk, global average pool, linear head.
#[derive(Clone, Debug)]
pub struct PolarNetModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub branches: Vec<Branch>,
    pub fusion: Vec<BasicBlock>,
    pub head: (ParamId, ParamId),
}

/// Everything recorded by one forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub param_vars: Vec<Var>,
    pub inputs: Vec<Var>,
    pub pfem: Vec<Var>,
    /// Branch outputs after prior gating (the tensors that get concatenated).
    pub branch_maps: Vec<Var>,
    /// Activations of the last fusion block, before pooling.
    pub fusion: Var,
    pub pooled: Var,
    pub logits: Var,
}

pub fn projection_name(config: &ModelConfig, branch: usize) -> String {
    if config.branches == PROJECTIONS.len() {
        PROJECTIONS[branch].to_string()
    } else {
        format!("branch{branch}")
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn he(&mut self, name: String, shape: &[usize], gain: f32) -> ParamId {
        let fan_in: usize = shape[1..].iter().product();
        let std = gain * (2.0 / fan_in as f32).sqrt();
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape, v))
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, stride: usize) -> BasicBlock {
        let conv1 = (self.he(format!("{prefix}.conv1.w"), &[cout, cin, 3, 3], 1.0), self.fill(format!("{prefix}.conv1.b"), &[cout], 0.0));
        let conv2 = (self.he(format!("{prefix}.conv2.w"), &[cout, cout, 3, 3], 0.5), self.fill(format!("{prefix}.conv2.b"), &[cout], 0.0));
        let shortcut = (stride != 1 || cin != cout)
            .then(|| (self.he(format!("{prefix}.short.w"), &[cout, cin, 1, 1], 1.0), self.fill(format!("{prefix}.short.b"), &[cout], 0.0)));
        BasicBlock { conv1, conv2, shortcut, stride }
    }
}

impl PolarNetModel {
    /// Seeded He-normal initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let c = &config;
        let mut branches = Vec::new();
        for b in 0..c.branches {
            let p = format!("b{b}");
            let n_ac = c.mkac_kernels.len();
            let mkac = c
                .mkac_kernels
                .iter()
                .enumerate()
                .map(|(i, &(k, _))| init.he(format!("{p}.mkac{i}.w"), &[c.pfem_channels, c.in_channels, k, k], 1.0))
                .collect();
            let mkac_w = (0..n_ac).map(|i| init.fill(format!("{p}.mkac{i}.scale"), &[1], 1.0 / n_ac as f32)).collect();
            let n_pm = c.mkpm_kernels.len();
            let mkpm_w = (0..n_pm).map(|i| init.fill(format!("{p}.mkpm{i}.scale"), &[1], 1.0 / n_pm as f32)).collect();
            let ch = c.pfem_out_channels();
            let hidden = (ch / c.cbam_reduction).max(1);
            let cbam = Cbam {
                w1: init.he(format!("{p}.cbam.fc1.w"), &[hidden, ch], 1.0),
                b1: init.fill(format!("{p}.cbam.fc1.b"), &[hidden], 0.0),
                w2: init.he(format!("{p}.cbam.fc2.w"), &[ch, hidden], 1.0),
                b2: init.fill(format!("{p}.cbam.fc2.b"), &[ch], 0.0),
                spatial: init.he(format!("{p}.cbam.spatial.w"), &[1, 2, c.cbam_kernel, c.cbam_kernel], 1.0),
            };
            let mut cin = ch;
            let mut trunk = Vec::new();
            for (i, (&cout, stride)) in c.trunk_channels.iter().zip(c.trunk_strides()).enumerate() {
                trunk.push(init.block(&format!("{p}.trunk{i}"), cin, cout, stride));
                cin = cout;
            }
            branches.push(Branch { pfem: Pfem { mkac, mkac_w, mkpm_w, cbam }, trunk });
        }
        let mut cin = c.branches * c.trunk_channels.last().unwrap();
        let mut fusion = Vec::new();
        for (i, (&cout, stride)) in c.fused_channels.iter().zip(c.fusion_strides()).enumerate() {
            fusion.push(init.block(&format!("fusion{i}"), cin, cout, stride));
            cin = cout;
        }
        let head = (init.he("head.w".into(), &[c.classes, cin], 0.5), init.fill("head.b".into(), &[c.classes], 0.0));
        Ok(PolarNetModel { config, params: store, branches, fusion, head })
    }

    /// Registers every parameter as a tracked node of `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.param(t.clone())).collect()
    }

    fn conv(&self, g: &mut Graph, p: &[Var], x: Var, w: ParamId, b: Option<ParamId>, spec: Conv2dSpec) -> Result<Var> {
        g.conv2d(x, p[w.0], b.map(|b| p[b.0]), spec.circular(self.config.circular_theta))
    }

    /// LeakyReLU(Σ_n H_n(x)·W_n) with bias-free atrous convolutions.
    pub fn mkac(&self, g: &mut Graph, p: &[Var], branch: usize, x: Var) -> Result<Var> {
        let pf = &self.branches[branch].pfem;
        let mut acc: Option<Var> = None;
        for (i, &(_, d)) in self.config.mkac_kernels.iter().enumerate() {
            let h = self.conv(g, p, x, pf.mkac[i], None, Conv2dSpec::same(d))?;
            let h = g.mul_scalar(h, p[pf.mkac_w[i].0])?;
            acc = Some(match acc {
                Some(a) => g.add(a, h)?,
                None => h,
            });
        }
        g.leaky_relu(acc.expect("at least one kernel"), self.config.leaky_slope)
    }

    /// LeakyReLU(x + Σ_n G_n(x)·W_n) with stride-1 same max pools.
    pub fn mkpm(&self, g: &mut Graph, p: &[Var], branch: usize, x: Var) -> Result<Var> {
        let pf = &self.branches[branch].pfem;
        let mut acc = x;
        for (i, &k) in self.config.mkpm_kernels.iter().enumerate() {
            let m = g.maxpool2d(x, PoolSpec::same(k).circular(self.config.circular_theta))?;
            let m = g.mul_scalar(m, p[pf.mkpm_w[i].0])?;
            acc = g.add(acc, m)?;
        }
        g.leaky_relu(acc, self.config.leaky_slope)
    }

    /// Channel attention followed by spatial attention.
    pub fn cbam(&self, g: &mut Graph, p: &[Var], branch: usize, x: Var) -> Result<Var> {
        let cb = &self.branches[branch].pfem.cbam;
        let (_, c, h, w) = g.value(x).dims4()?;
        let avg = g.global_avg_pool(x)?;
        let max = g.global_max_pool(x)?;
        let mlp = |g: &mut Graph, v: Var| -> Result<Var> {
            let z = g.linear(v, p[cb.w1.0], Some(p[cb.b1.0]))?;
            let z = g.relu(z)?;
            g.linear(z, p[cb.w2.0], Some(p[cb.b2.0]))
        };
        let a = mlp(g, avg)?;
        let m = mlp(g, max)?;
        let s = g.add(a, m)?;
        let gate = g.sigmoid(s)?;
        let gate = g.repeat_spatial(gate, h, w)?;
        let x1 = g.mul(x, gate)?;
        let cm = g.channel_mean(x1)?;
        let cx = g.channel_max(x1)?;
        let pair = g.concat(&[cm, cx], 1)?;
        let sp = self.conv(g, p, pair, cb.spatial, None, Conv2dSpec::same(1))?;
        let sp = g.sigmoid(sp)?;
        let sp = g.repeat_channels(sp, c)?;
        g.mul(x1, sp)
    }

    pub fn pfem(&self, g: &mut Graph, p: &[Var], branch: usize, x: Var) -> Result<Var> {
        let a = self.mkac(g, p, branch, x)?;
        let m = self.mkpm(g, p, branch, x)?;
        let cat = g.concat(&[a, m], 1)?;
        self.cbam(g, p, branch, cat)
    }

    pub fn block(&self, g: &mut Graph, p: &[Var], blk: &BasicBlock, x: Var) -> Result<Var> {
        let spec = Conv2dSpec { stride: blk.stride, dilation: 1, padding: Padding::Explicit(1), circular_rows: false };
        let y = self.conv(g, p, x, blk.conv1.0, Some(blk.conv1.1), spec)?;
        let y = g.relu(y)?;
        let y = self.conv(g, p, y, blk.conv2.0, Some(blk.conv2.1), Conv2dSpec::same(1))?;
        let skip = match blk.shortcut {
            Some((w, b)) => {
                let spec = Conv2dSpec { stride: blk.stride, ..Conv2dSpec::valid() };
                self.conv(g, p, x, w, Some(b), spec)?
            }
            None => x,
        };
        let y = g.add(y, skip)?;
        g.relu(y)
    }

    /// Gate applied to branch `b`'s final map for `prior`.
    pub fn prior_gate(&self, prior: &PriorMatrix, branch: usize, shape: &[usize]) -> Result<Tensor> {
        let (n, c, h, w) = match shape {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return dim_err(format!("prior gate needs a rank-4 shape, got {shape:?}")),
        };
        let weights = prior.weights(&projection_name(&self.config, branch));
        let plane = region_gate_map(&GridSpec::etdrs(), &weights, h, w)?;
        let mut data = Vec::with_capacity(n * c * h * w);
        for _ in 0..n * c {
            data.extend_from_slice(&plane);
        }
        Tensor::new(vec![n, c, h, w], data)
    }

    /// Full forward pass. `inputs` holds one `[N, C_in, Θ, r]` tensor per
    /// branch in SVC, DVC, CC order. Inputs become tracked nodes when
    /// `track_inputs` is set so that their gradients can be read back.
    pub fn forward_graph(&self, inputs: &[Tensor], prior: Option<&PriorMatrix>, track_inputs: bool) -> Result<ForwardPass> {
        let cfg = &self.config;
        if inputs.len() != cfg.branches {
            return Err(Error::Dimension(format!("expected {} branch inputs, got {}", cfg.branches, inputs.len())));
        }
        let batch = inputs[0].shape()[0];
        for t in inputs {
            let (n, c, h, w) = t.dims4()?;
            if n != batch || c != cfg.in_channels || (h, w) != cfg.input_size {
                return dim_err(format!(
                    "branch input {:?} does not match [{batch}, {}, {}, {}]",
                    t.shape(),
                    cfg.in_channels,
                    cfg.input_size.0,
                    cfg.input_size.1
                ));
            }
        }
        if let Some(pr) = prior {
            pr.validate()?;
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let xs: Vec<Var> = inputs.iter().map(|t| if track_inputs { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
        let mut pfem = Vec::new();
        let mut maps = Vec::new();
        for (b, &x) in xs.iter().enumerate() {
            let f = self.pfem(&mut g, &p, b, x)?;
            pfem.push(f);
            let mut y = f;
            for blk in &self.branches[b].trunk {
                y = self.block(&mut g, &p, blk, y)?;
            }
            if let Some(pr) = prior {
                let gate = self.prior_gate(pr, b, g.value(y).shape())?;
                let gate = g.constant(gate);
                y = g.mul(y, gate)?;
            }
            maps.push(y);
        }
        let mut z = g.concat(&maps, 1)?;
        for blk in &self.fusion {
            z = self.block(&mut g, &p, blk, z)?;
        }
        let pooled = g.global_avg_pool(z)?;
        let logits = g.linear(pooled, p[self.head.0 .0], Some(p[self.head.1 .0]))?;
        Ok(ForwardPass { graph: g, param_vars: p, inputs: xs, pfem, branch_maps: maps, fusion: z, pooled, logits })
    }

    pub fn logits(&self, inputs: &[Tensor], prior: Option<&PriorMatrix>) -> Result<Tensor> {
        let fp = self.forward_graph(inputs, prior, false)?;
        Ok(fp.graph.value(fp.logits).clone())
    }

    /// Softmax class probabilities, `[N, classes]`.
    pub fn predict(&self, inputs: &[Tensor], prior: Option<&PriorMatrix>) -> Result<Tensor> {
        softmax(&self.logits(inputs, prior)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = Manifest { format: MANIFEST_FORMAT.into(), config: self.config.clone(), names: self.params.names().to_vec() };
        let records: Vec<(String, &Tensor)> = self.params.names().iter().cloned().zip(self.params.tensors()).collect();
        io::write_checkpoint(w, &manifest, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: std::io::BufRead>(r: &mut R) -> Result<Self> {
        let (manifest, records): (Manifest, _) = io::read_checkpoint(r)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Data(format!("unknown checkpoint format '{}'", manifest.format)));
        }
        let mut model = PolarNetModel::new(manifest.config, 0)?;
        if manifest.names != model.params.names() || records.len() != model.params.len() {
            return Err(Error::Data("checkpoint parameters do not match its config".into()));
        }
        for (i, (name, t)) in records.into_iter().enumerate() {
            if name != model.params.names()[i] {
                return Err(Error::Data(format!("record {i} is '{name}', expected '{}'", model.params.names()[i])));
            }
            model.params.set(ParamId(i), t).map_err(|e| Error::Data(e.to_string()))?;
        }
        Ok(model)
    }
}

const MANIFEST_FORMAT: &str = "polarnet-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    names: Vec<String>,
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let probs = ops::softmax_rows(logits)?;
    Tensor::new(logits.shape().to_vec(), probs.into_iter().map(|p| p as f32).collect())
}
