//! Grad-CAM over cached activations, region importance matrices and
//! Cartesian heatmap rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{batch_inputs, Sample};
use crate::error::{dim_err, Error, Result};
use crate::grid::{build_grid, etdrs_matrix, region_pool, GridSpec, PriorMatrix, RegionMask};
use crate::net::{projection_name, PolarNetModel};
use crate::polar::{self, PolarImage};
use crate::tensor::{Graph, Tensor, Var};

/// `ReLU(Σ_k α_k A^k)` per sample, with `α_k` the spatial mean of the
/// gradient of `score` with respect to `A^k`. `activations` is
/// `[N, K, H, W]`; the result is `[N, H, W]`. Backward must already have run
/// from the score.
pub fn cam_from_gradients(activations: &Tensor, grads: &Tensor) -> Result<Tensor> {
    let (n, k, h, w) = activations.dims4()?;
    if grads.shape() != activations.shape() {
        return dim_err(format!("gradient {:?} vs activations {:?}", grads.shape(), activations.shape()));
    }
    let hw = h * w;
    let (a, g) = (activations.data(), grads.data());
    let mut out = vec![0.0f32; n * hw];
    for b in 0..n {
        let mut acc = vec![0.0f64; hw];
        for ch in 0..k {
            let base = (b * k + ch) * hw;
            let alpha = g[base..base + hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            for (dst, &av) in acc.iter_mut().zip(&a[base..base + hw]) {
                *dst += alpha * av as f64;
            }
        }
        for (o, v) in out[b * hw..(b + 1) * hw].iter_mut().zip(acc) {
            *o = v.max(0.0) as f32;
        }
    }
    Tensor::new(vec![n, h, w], out)
}

/// Channel weights `α_k` for every sample, `[N, K]`.
pub fn cam_weights(grads: &Tensor) -> Result<Tensor> {
    let (n, k, h, w) = grads.dims4()?;
    let hw = h * w;
    let data = grads.data().chunks(hw).map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32).collect();
    Tensor::new(vec![n, k], data)
}

/// Which logit each sample's CAM explains. Serialised as the class index
/// or the string `"predicted"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// The arg-max class of each sample.
    Predicted,
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(Target::Predicted),
            _ => s
                .parse()
                .map(Target::Class)
                .map_err(|_| Error::Parameter(format!("target must be a class index or 'predicted', got '{s}'"))),
        }
    }
}

impl Serialize for Target {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Target::Class(c) => s.serialize_u64(*c as u64),
            Target::Predicted => s.serialize_str("predicted"),
        }
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|c| Target::Class(c as usize))
                .ok_or_else(|| serde::de::Error::custom("class must be a non-negative integer")),
            serde_json::Value::String(s) if s == "predicted" => Ok(Target::Predicted),
            other => Err(serde::de::Error::custom(format!("invalid target {other}"))),
        }
    }
}

/// Class explained for each row of `[N, K]` logits.
pub fn target_classes(logits: &Tensor, target: Target) -> Result<Vec<usize>> {
    let (n, k) = logits.dims2()?;
    match target {
        Target::Class(c) if c >= k => Err(Error::Parameter(format!("class {c} out of range for {k} classes"))),
        Target::Class(c) => Ok(vec![c; n]),
        Target::Predicted => {
            Ok(logits.data().chunks(k).map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })).collect())
        }
    }
}

/// Runs backward from `Σ_n y^{c_n}_n` and returns the CAM of each listed
/// activation node. Samples never interact, so each sample's CAM only sees
/// the gradient of its own score.
pub fn grad_cam(graph: &mut Graph, logits: Var, classes: &[usize], activations: &[Var]) -> Result<Vec<Tensor>> {
    let (n, k) = graph.value(logits).dims2()?;
    if classes.len() != n {
        return dim_err(format!("{} target classes for {n} samples", classes.len()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::Parameter(format!("class {c} out of range for {k} classes")));
    }
    let mut onehot = vec![0.0f32; n * k];
    for (i, &c) in classes.iter().enumerate() {
        onehot[i * k + c] = 1.0;
    }
    let mask = graph.constant(Tensor::new(vec![n, k], onehot)?);
    let picked = graph.mul(logits, mask)?;
    let score = graph.sum(picked)?;
    graph.reset_grads();
    graph.backward(score)?;
    activations.iter().map(|&a| cam_from_gradients(graph.value(a), &graph.grad_or_zeros(a))).collect()
}

/// CAMs of one batch: the fusion activations and each branch's final
/// (post-prior) map. Branch gradients only carry the part of the score that
/// flows through that branch's channels of the concatenation.
pub struct CamSet {
    pub fusion: Tensor,
    pub branches: Vec<Tensor>,
    pub classes: Vec<usize>,
}

pub fn model_cams(model: &PolarNetModel, inputs: &[Tensor], target: Target, prior: Option<&PriorMatrix>) -> Result<CamSet> {
    let mut fp = model.forward_graph(inputs, prior, false)?;
    let classes = target_classes(fp.graph.value(fp.logits), target)?;
    let mut nodes = vec![fp.fusion];
    nodes.extend(&fp.branch_maps);
    let mut cams = grad_cam(&mut fp.graph, fp.logits, &classes, &nodes)?;
    let fusion = cams.remove(0);
    Ok(CamSet { fusion, branches: cams, classes })
}

pub type Matrix = [[f32; 2]; 4];

/// Per-region mean of a single `[H, W]` polar map on the ETDRS grid: the
/// quadrant × (inner, external) matrix and the centre disk.
pub fn region_importance(cam: &Tensor, spec: &GridSpec) -> Result<(Matrix, f32)> {
    let means = region_pool(cam, spec, 0.0)?;
    let (m, c) = etdrs_matrix(spec, &means)?;
    Ok((m.map(|row| row.map(|v| v as f32)), c as f32))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Raw,
    UnitMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    #[serde(rename = "class")]
    pub target: Target,
    pub grid: String,
    pub normalization: Normalization,
    /// Rows T, S, N, I; columns inner, external.
    pub projections: BTreeMap<String, Matrix>,
    /// Centre disk of the fusion-level CAM.
    pub center: f32,
    pub centers: BTreeMap<String, f32>,
    /// Matrix of the fusion-level CAM.
    pub global: Matrix,
}

impl ImportanceMatrix {
    /// The largest cell over all projections as (projection, quadrant, ring).
    pub fn argmax(&self) -> Option<(String, usize, usize)> {
        let mut best: Option<(f32, (String, usize, usize))> = None;
        for (name, m) in &self.projections {
            for (q, row) in m.iter().enumerate() {
                for (r, &v) in row.iter().enumerate() {
                    if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                        best = Some((v, (name.clone(), q, r)));
                    }
                }
            }
        }
        best.map(|(_, k)| k)
    }

    /// Scales every entry by the overall maximum (left as is when all zero).
    pub fn unit_max(&self) -> ImportanceMatrix {
        let all = self
            .projections
            .values()
            .chain(std::iter::once(&self.global))
            .flat_map(|m| m.iter().flatten().copied())
            .chain(self.centers.values().copied())
            .chain(std::iter::once(self.center));
        let max = all.fold(0.0f32, f32::max);
        let mut out = self.clone();
        out.normalization = Normalization::UnitMax;
        if max > 0.0 {
            let s = |v: f32| v / max;
            for m in out.projections.values_mut() {
                *m = m.map(|r| r.map(s));
            }
            out.global = out.global.map(|r| r.map(s));
            out.center = s(out.center);
            for c in out.centers.values_mut() {
                *c = s(*c);
            }
        }
        out
    }
}

/// Matrices of sample `b` of a CAM batch.
pub fn sample_importance(model: &PolarNetModel, cams: &CamSet, b: usize, target: Target) -> Result<ImportanceMatrix> {
    let spec = GridSpec::etdrs();
    let (global, center) = region_importance(&cams.fusion.index_first(b)?, &spec)?;
    let mut projections = BTreeMap::new();
    let mut centers = BTreeMap::new();
    for (i, cam) in cams.branches.iter().enumerate() {
        let (m, c) = region_importance(&cam.index_first(b)?, &spec)?;
        let name = projection_name(&model.config, i);
        projections.insert(name.clone(), m);
        centers.insert(name, c);
    }
    Ok(ImportanceMatrix { target, grid: spec.kind.name().into(), normalization: Normalization::Raw, projections, center, centers, global })
}

/// Elementwise mean of per-sample matrices.
pub fn aggregate(items: &[ImportanceMatrix]) -> Result<ImportanceMatrix> {
    let first = items.first().ok_or_else(|| Error::Data("nothing to aggregate".into()))?;
    let n = items.len() as f64;
    let mean_m = |get: &dyn Fn(&ImportanceMatrix) -> Matrix| -> Matrix {
        let mut acc = [[0.0f64; 2]; 4];
        for it in items {
            let m = get(it);
            for q in 0..4 {
                for r in 0..2 {
                    acc[q][r] += m[q][r] as f64;
                }
            }
        }
        acc.map(|row| row.map(|v| (v / n) as f32))
    };
    let mean_s = |get: &dyn Fn(&ImportanceMatrix) -> f32| (items.iter().map(|i| get(i) as f64).sum::<f64>() / n) as f32;
    let mut projections = BTreeMap::new();
    let mut centers = BTreeMap::new();
    for name in first.projections.keys() {
        if items.iter().any(|i| !i.projections.contains_key(name)) {
            return Err(Error::Data(format!("projection {name} missing from some matrices")));
        }
        projections.insert(name.clone(), mean_m(&|i| i.projections[name]));
        centers.insert(name.clone(), mean_s(&|i| i.centers.get(name).copied().unwrap_or(0.0)));
    }
    Ok(ImportanceMatrix {
        target: first.target,
        grid: first.grid.clone(),
        normalization: first.normalization,
        projections,
        center: mean_s(&|i| i.center),
        centers,
        global: mean_m(&|i| i.global),
    })
}

/// Per-sample and aggregated importance over a set of samples.
pub fn explain_samples(
    model: &PolarNetModel,
    samples: &[Sample],
    idx: &[usize],
    target: Target,
    prior: Option<&PriorMatrix>,
    batch: usize,
) -> Result<(Vec<ImportanceMatrix>, ImportanceMatrix)> {
    let mut per = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        let items: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let inputs = batch_inputs(&items, &vec![0; items.len()])?;
        let cams = model_cams(model, &inputs, target, prior)?;
        for b in 0..items.len() {
            per.push(sample_importance(model, &cams, b, target)?);
        }
    }
    let agg = aggregate(&per)?;
    Ok((per, agg))
}

/// `t ∈ [0, 1]` to blue-to-red.
pub fn colormap(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Cartesian rendering of importance values. `values` keeps the raw value
/// painted at each pixel so regions can be read back exactly.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub valid: Vec<bool>,
    pub values: Vec<f32>,
}

impl Heatmap {
    fn from_values(width: usize, height: usize, values: Vec<Option<f32>>, scale: f32) -> Heatmap {
        let mut rgb = Vec::with_capacity(3 * values.len());
        for v in &values {
            match v {
                Some(v) => rgb.extend(colormap(if scale > 0.0 { v / scale } else { 0.0 })),
                None => rgb.extend([0, 0, 0]),
            }
        }
        Heatmap {
            width,
            height,
            rgb,
            valid: values.iter().map(Option::is_some).collect(),
            values: values.into_iter().map(|v| v.unwrap_or(0.0)).collect(),
        }
    }

    pub fn mask_bytes(&self) -> Vec<u8> {
        self.valid.iter().map(|&v| if v { 255 } else { 0 }).collect()
    }
}

/// Square canvas of side `size` with the grid disk inscribed.
pub fn canvas_mask(size: usize) -> Result<RegionMask> {
    let half = size as f64 / 2.0;
    build_grid(&GridSpec::etdrs(), half, (half, half), size, size)
}

/// Paints each ETDRS region with its matrix value. `scale` maps values to
/// colours (`t = v / scale`); pass the unit-max scale for display.
pub fn matrix_to_cartesian(matrix: &Matrix, center: f32, size: usize, scale: f32) -> Result<Heatmap> {
    let mask = canvas_mask(size)?;
    let regions = mask.spec.regions();
    let values = mask
        .label_map
        .iter()
        .map(|l| {
            l.map(|i| {
                let r = &regions[i as usize];
                match r.sector {
                    None => center,
                    Some(q) => matrix[q][r.ring - 1],
                }
            })
        })
        .collect();
    Ok(Heatmap::from_values(size, size, values, scale))
}

/// Per-region means of a matrix-mode heatmap, read back through the grid.
pub fn recover_matrix(heatmap: &Heatmap) -> Result<(Matrix, f32)> {
    let mask = canvas_mask(heatmap.width)?;
    let regions = mask.spec.regions();
    let mut sums = vec![0.0f64; regions.len()];
    let mut counts = vec![0usize; regions.len()];
    for (l, &v) in mask.label_map.iter().zip(&heatmap.values) {
        if let Some(i) = l {
            sums[*i as usize] += v as f64;
            counts[*i as usize] += 1;
        }
    }
    let mut m = [[0.0f32; 2]; 4];
    let mut center = 0.0;
    for (i, r) in regions.iter().enumerate() {
        if counts[i] == 0 {
            return Err(Error::Parameter(format!("region {} has no pixels", r.name)));
        }
        let v = (sums[i] / counts[i] as f64) as f32;
        match r.sector {
            None => center = v,
            Some(q) => m[q][r.ring - 1] = v,
        }
    }
    Ok((m, center))
}

/// Inverse-maps a dense `[H, W]` polar CAM onto the square canvas.
pub fn cam_to_cartesian(cam: &Tensor, size: usize, scale: f32) -> Result<Heatmap> {
    let (h, w) = match cam.shape() {
        [h, w] => (*h, *w),
        s => return dim_err(format!("CAM must be 2-D, got {s:?}")),
    };
    let half = size as f64 / 2.0;
    let p = PolarImage {
        theta_samples: h,
        r_samples: w,
        radius: half,
        origin: (half, half),
        start_angle: 0.0,
        channels: 1,
        pixels: cam.data().to_vec(),
    };
    let rec = polar::from_polar(&p, size, size)?;
    let values = rec.image.pixels.iter().zip(&rec.valid).map(|(&v, &ok)| ok.then_some(v)).collect();
    Ok(Heatmap::from_values(size, size, values, scale))
}
