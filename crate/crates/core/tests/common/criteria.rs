//! The seven acceptance checks. Each returns a verdict with a one-line
//! summary of what was measured.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use polarnet::data::{self, metrics, InputSpec, SynthConfig};
use polarnet::explain::{self, Target};
use polarnet::grid::{polar_region_rects, rasterize_rects, GridSpec, PriorMatrix, PROJECTIONS};
use polarnet::net::{cross_validate, ModelConfig, PolarNetModel, TrainConfig};
use polarnet::polar::{self, Augmentation, PolarParams};
use polarnet::tensor::{Conv2dSpec, Graph, PoolSpec, Tensor, Var};
use rand::Rng;

use super::*;

pub struct Verdict {
    pub ok: bool,
    pub detail: String,
}

struct Checks {
    ok: bool,
    notes: Vec<String>,
}

impl Checks {
    fn new() -> Self {
        Checks { ok: true, notes: Vec::new() }
    }

    fn check(&mut self, ok: bool, note: String) {
        if !ok {
            self.ok = false;
            self.notes.push(format!("FAILED {note}"));
        } else {
            self.notes.push(note);
        }
    }

    fn finish(self, started: Instant, budget_s: f64) -> Verdict {
        let secs = started.elapsed().as_secs_f64();
        let in_time = secs < budget_s;
        let mut notes = self.notes;
        notes.push(format!("{secs:.1}s of {budget_s:.0}s{}", if in_time { "" } else { " EXCEEDED" }));
        Verdict { ok: self.ok && in_time, detail: notes.join("; ") }
    }
}

fn to_polar(img: &polar::CartesianImage, theta: usize, r: usize) -> polar::PolarImage {
    polar::to_polar(img, &PolarParams::new(theta, r)).unwrap()
}

pub fn geometry() -> Verdict {
    let t0 = Instant::now();
    let mut c = Checks::new();

    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (u, v) = (r.random_range(-500.0..500.0), r.random_range(-500.0..500.0));
        let (t, rad) = polar::cart_to_polar(u, v);
        let (u2, v2) = polar::polar_to_cart(t, rad);
        worst = worst.max((u - u2).abs()).max((v - v2).abs());
    }
    c.check(worst <= 1e-5, format!("coordinate round trip max error {worst:.1e}"));

    let center = (127.3, 130.6);
    let rad = 127.3f64.min(256.0 - 130.6);
    let grad = polar::CartesianImage::from_fn(256, 256, center, |x, y| {
        let (u, v) = polar::pixel_offset(center, x, y);
        (u.hypot(v) / rad).min(1.0) as f32
    })
    .unwrap();
    let p = to_polar(&grad, 512, 256);
    let mut spread = 0.0f64;
    for j in 0..p.r_samples {
        let col: Vec<f32> = (0..p.theta_samples).map(|i| p.get(i, j, 0)).collect();
        let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        spread = spread.max((hi - lo) as f64);
    }
    let step = std::f64::consts::SQRT_2 / rad;
    c.check(spread <= step + 1e-6, format!("radial column spread {spread:.4} within NN step {step:.4}"));

    let img = vessel_image(5, 256);
    let base = to_polar(&img, 512, 128);
    let mut rotated = img.clone();
    let mut rot_ok = true;
    for k in 1..4 {
        rotated = rotate_quarter(&rotated);
        let pr = to_polar(&rotated, 512, 128);
        rot_ok &= pr.pixels == roll_rows(&base.pixels, 512, 128, k * 128);
    }
    let jit = polar::augment_polar(
        &img,
        &Augmentation { start_angle_jitter: TAU * 37.0 / 512.0, ..Augmentation::default() },
        &PolarParams::new(512, 128),
    )
    .unwrap();
    let jit_ok = jit.pixels == roll_rows(&base.pixels, 512, 128, 512 - 37);
    c.check(rot_ok && jit_ok, format!("quarter-turn rotation and start-angle shift are exact row shifts: {}", rot_ok && jit_ok));

    let field = SmoothField::new(3, 512.0, 4.0);
    let smooth = field.image(512, 512, (256.0, 256.0));
    let p = to_polar(&smooth, 512, 512);
    let back = polar::from_polar(&p, 512, 512).unwrap();
    let (mut err, mut n) = (0.0f64, 0usize);
    for (i, &ok) in back.valid.iter().enumerate() {
        if ok {
            err += (back.image.pixels[i] - smooth.pixels[i]).abs() as f64;
            n += 1;
        }
    }
    let mae = err / n as f64;
    c.check(mae < 0.02, format!("inverse round trip MAE {mae:.4} at 512"));

    let mae = sector_convolution_mae(&field, &smooth, 5);
    c.check(mae < 0.03, format!("sector convolution MAE {mae:.4} at Θ=512"));
    c.finish(t0, 30.0)
}

/// Mean gap between a 1×K θ-average in polar space and the average of the
/// continuous image over the corresponding arc.
pub fn sector_convolution_mae(field: &SmoothField, img: &polar::CartesianImage, k: usize) -> f64 {
    let p = to_polar(img, 512, 256);
    let mut g = Graph::new();
    let x = g.constant(p.to_tensor().reshape(&[1, 1, 512, 256]).unwrap());
    let w = g.constant(Tensor::full(&[1, 1, k, 1], 1.0 / k as f32));
    let y = g.conv2d(x, w, None, Conv2dSpec::same(1).circular(true)).unwrap();
    let conv = g.value(y).data().to_vec();
    let dtheta = TAU / 512.0;
    let samples = 64;
    let mut err = 0.0;
    for i in 0..512 {
        let th = p.row_angle(i);
        for j in 0..256 {
            let r = p.col_radius(j);
            let mut acc = 0.0;
            for s in 0..samples {
                let a = th + k as f64 * dtheta * ((s as f64 + 0.5) / samples as f64 - 0.5);
                let (u, v) = polar::polar_to_cart(a, r);
                acc += field.at(img.center.0 + u, img.center.1 - v);
            }
            err += (conv[i * 256 + j] as f64 - acc / samples as f64).abs();
        }
    }
    err / (512.0 * 256.0)
}

pub fn op_cases() -> Vec<FdCase<'static>> {
    let mut r = rng(21);
    let mut t = |shape: &[usize]| Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
    let spec_s2 = Conv2dSpec { stride: 2, dilation: 1, padding: polarnet::tensor::Padding::Explicit(1), circular_rows: true };
    let spec_1x1 = Conv2dSpec { stride: 2, ..Conv2dSpec::valid() };
    let pool_s2 = PoolSpec::valid(2, 2);
    type B = Box<dyn Fn(&mut Graph, &[Var]) -> polarnet::Result<Var>>;
    let case = |name: &'static str, inputs: Vec<Tensor>, build: B| FdCase { name, inputs, build };
    vec![
        case(
            "conv2d same",
            vec![t(&[2, 3, 6, 6]), t(&[4, 3, 3, 3]), t(&[4])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::same(1))),
        ),
        case(
            "conv2d dilated circular",
            vec![t(&[1, 2, 7, 5]), t(&[3, 2, 3, 3])],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, Conv2dSpec::same(2).circular(true))),
        ),
        case(
            "conv2d strided",
            vec![t(&[1, 2, 8, 6]), t(&[2, 2, 3, 3]), t(&[2])],
            Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec_s2)),
        ),
        case(
            "conv2d 1x1 stride 2",
            vec![t(&[2, 3, 6, 6]), t(&[2, 3, 1, 1]), t(&[2])],
            Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec_1x1)),
        ),
        case("maxpool same circular", vec![t(&[1, 2, 6, 5])], Box::new(|g, v| g.maxpool2d(v[0], PoolSpec::same(3).circular(true)))),
        case("maxpool same even", vec![t(&[1, 2, 6, 5])], Box::new(|g, v| g.maxpool2d(v[0], PoolSpec::same(2)))),
        case("maxpool valid", vec![t(&[2, 2, 6, 6])], Box::new(move |g, v| g.maxpool2d(v[0], pool_s2))),
        case("global_avg_pool", vec![t(&[2, 3, 4, 5])], Box::new(|g, v| g.global_avg_pool(v[0]))),
        case("global_max_pool", vec![t(&[2, 3, 4, 5])], Box::new(|g, v| g.global_max_pool(v[0]))),
        case("channel_mean", vec![t(&[2, 3, 4, 5])], Box::new(|g, v| g.channel_mean(v[0]))),
        case("channel_max", vec![t(&[2, 3, 4, 5])], Box::new(|g, v| g.channel_max(v[0]))),
        case("leaky_relu", vec![t(&[3, 7])], Box::new(|g, v| g.leaky_relu(v[0], 0.01))),
        case("relu", vec![t(&[3, 7])], Box::new(|g, v| g.relu(v[0]))),
        case("sigmoid", vec![t(&[3, 7])], Box::new(|g, v| g.sigmoid(v[0]))),
        case("linear", vec![t(&[3, 5]), t(&[4, 5]), t(&[4])], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
        case("add", vec![t(&[2, 3, 2, 2]), t(&[2, 3, 2, 2])], Box::new(|g, v| g.add(v[0], v[1]))),
        case("mul", vec![t(&[2, 3, 2, 2]), t(&[2, 3, 2, 2])], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("mul self", vec![t(&[4, 3])], Box::new(|g, v| g.mul(v[0], v[0]))),
        case("scale", vec![t(&[4, 3])], Box::new(|g, v| g.scale(v[0], -1.7))),
        case("mul_scalar", vec![t(&[2, 3, 2, 2]), t(&[1])], Box::new(|g, v| g.mul_scalar(v[0], v[1]))),
        case("concat", vec![t(&[2, 2, 3, 3]), t(&[2, 3, 3, 3])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        case("repeat_spatial", vec![t(&[2, 3])], Box::new(|g, v| g.repeat_spatial(v[0], 3, 2))),
        case("repeat_channels", vec![t(&[2, 1, 3, 3])], Box::new(|g, v| g.repeat_channels(v[0], 4))),
        case("reshape", vec![t(&[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        case("sum", vec![t(&[3, 4])], Box::new(|g, v| g.sum(v[0]))),
        case("mean", vec![t(&[3, 4])], Box::new(|g, v| g.mean(v[0]))),
        case("pick", vec![t(&[3, 4])], Box::new(|g, v| g.pick(v[0], 2))),
        case("cross entropy", vec![t(&[4, 3])], Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2], None))),
        case(
            "weighted cross entropy",
            vec![t(&[4, 2])],
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 1, 1, 1], Some(&[2.0, 0.6667]))),
        ),
        case(
            "composite",
            vec![t(&[1, 2, 6, 6]), t(&[3, 2, 3, 3])],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], None, Conv2dSpec::same(1))?;
                let y = g.sigmoid(y)?;
                let z = g.mul(y, y)?;
                g.global_avg_pool(z)
            }),
        ),
    ]
}

pub fn prior_pattern() -> PriorMatrix {
    let mut pr = PriorMatrix::neutral();
    pr.projections.insert("DVC".into(), [[2.0, 1.5], [1.5, 1.0], [2.0, 1.0], [1.5, 1.5]]);
    pr.projections.insert("CC".into(), [[1.0, 2.0], [1.0, 1.5], [1.5, 1.0], [2.0, 1.0]]);
    pr
}

pub fn model_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    let (h, w) = cfg.input_size;
    (0..cfg.branches).map(|_| Tensor::rand_uniform(&[batch, cfg.in_channels, h, w], 0.0, 1.0, &mut r)).collect()
}

/// Full-model gradient check. The analytic side is the library's f32
/// backward pass; the numeric side differentiates the independent f64
/// re-implementation in `reference`, whose logits must agree first. Up to
/// `per_tensor` entries of every parameter tensor are checked.
pub fn model_fd(per_tensor: usize) -> (FdReport, f64) {
    let cfg = ModelConfig::miniature(16);
    let model = PolarNetModel::new(cfg.clone(), 3).unwrap();
    let inputs = model_inputs(&cfg, 2, 4);
    let prior = prior_pattern();
    let targets = [0usize, 1];
    let weights = [0.8f32, 1.25];
    let weights64 = [0.8f64, 1.25];
    let mut fp = model.forward_graph(&inputs, Some(&prior), false).unwrap();
    let loss = fp.graph.softmax_cross_entropy(fp.logits, &targets, Some(&weights)).unwrap();
    fp.graph.backward(loss).unwrap();

    let base = reference::params64(&model);
    let lib_logits = fp.graph.value(fp.logits).data().to_vec();
    let ref_logits: Vec<f64> = reference::logits(&model, &base, &inputs, Some(&prior)).into_iter().flatten().collect();
    let logit_err = lib_logits.iter().zip(&ref_logits).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);

    let loss_at = |p: &[Vec<f64>]| reference::cross_entropy(&reference::logits(&model, p, &inputs, Some(&prior)), &targets, &weights64);
    let f0 = loss_at(&base);
    let mut report = FdReport::default();
    let mut pick = rng(99);
    for (k, name) in model.params.names().iter().enumerate() {
        let n = base[k].len();
        let grad = fp.graph.grad_or_zeros(fp.param_vars[k]);
        let entries: Vec<usize> =
            if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| pick.random_range(0..n)).collect() };
        for i in entries {
            let step = |d: f64| {
                let mut p = base.clone();
                p[k][i] += d;
                (d, loss_at(&p))
            };
            judge(&mut report, format!("{name}[{i}]"), grad.data()[i] as f64, fd_estimate_steps(&step, f0, 1e-6));
        }
    }
    (report, logit_err)
}

pub fn autodiff() -> Verdict {
    let t0 = Instant::now();
    let mut c = Checks::new();
    let mut ops = FdReport::default();
    let cases = op_cases();
    let n_ops = cases.len();
    for (i, case) in cases.iter().enumerate() {
        ops.merge(fd_check(case, 1e-2, 64, 100 + i as u64));
    }
    c.check(
        ops.failures.is_empty() && ops.skip_ratio() < 0.05,
        format!(
            "{n_ops} op graphs, {} entries checked ({} one-sided), {} kink-skipped, worst rel {:.1e}{}",
            ops.checked,
            ops.one_sided,
            ops.skipped,
            ops.worst,
            ops.failures.first().map(|f| format!(" ({f})")).unwrap_or_default()
        ),
    );
    let (full, logit_err) = model_fd(6);
    c.check(logit_err < 1e-4, format!("f64 reference logits within {logit_err:.1e} of the library"));
    c.check(
        full.failures.is_empty() && full.skip_ratio() < 0.05,
        format!(
            "16x16 miniature model: {} parameter entries checked ({} one-sided), {} kink-skipped, worst rel {:.1e}{}",
            full.checked,
            full.one_sided,
            full.skipped,
            full.worst,
            full.failures.first().map(|f| format!(" ({f})")).unwrap_or_default()
        ),
    );
    c.finish(t0, 120.0)
}

pub fn architecture() -> Verdict {
    let t0 = Instant::now();
    let mut c = Checks::new();
    let cfg = ModelConfig::miniature(32);
    let model = PolarNetModel::new(cfg.clone(), 8).unwrap();
    let inputs = model_inputs(&cfg, 3, 9);

    let plain = model.logits(&inputs, None).unwrap();
    let mut ones = PriorMatrix::neutral();
    for p in PROJECTIONS {
        ones.projections.insert(p.into(), [[1.0; 2]; 4]);
    }
    let gated = model.logits(&inputs, Some(&ones)).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    c.check(bits(&plain) == bits(&gated), "all-ones prior is bit-neutral".into());

    let zeros: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let fp = model.forward_graph(&zeros, None, false).unwrap();
    let zero_pfem = fp.pfem.iter().all(|&v| fp.graph.value(v).data().iter().all(|&x| x == 0.0));
    c.check(zero_pfem, "zero input gives zero PFEM output".into());

    let q = cfg.shift_quantum();
    let mut drift = 0.0f32;
    for k in 1..cfg.input_size.0 / q {
        let shifted: Vec<Tensor> = inputs.iter().map(|t| t.roll_rows((k * q) as isize).unwrap()).collect();
        drift = drift.max(model.logits(&shifted, None).unwrap().max_abs_diff(&plain).unwrap());
    }
    c.check(drift <= 1e-4, format!("row shifts by multiples of {q}: max logit drift {drift:.1e}"));

    let mut m0 = model.clone();
    for b in 0..cfg.branches {
        for id in m0.branches[b].pfem.mkpm_w.clone() {
            m0.params.set(id, Tensor::zeros(&[1])).unwrap();
        }
    }
    let mut g = Graph::new();
    let p = m0.bind(&mut g);
    let x = g.constant(inputs[0].clone());
    let y = m0.mkpm(&mut g, &p, 0, x).unwrap();
    let same = bits(g.value(y)) == bits(&inputs[0]);
    c.check(same, "MKPM with zero weights is the identity on non-negative input".into());
    c.finish(t0, 60.0)
}

/// Grad-CAM channel weights against per-activation finite differences on a
/// small non-linear head over a 4×4 map.
pub fn alpha_fd() -> (bool, f64) {
    let mut r = rng(31);
    let a = Tensor::rand_uniform(&[1, 4, 4, 4], 0.0, 1.0, &mut r);
    let k = Tensor::rand_uniform(&[3, 4, 3, 3], -0.5, 0.5, &mut r);
    let w = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut r);
    let head = |g: &mut Graph, av: Var| -> Var {
        let kv = g.constant(k.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(av, kv, None, Conv2dSpec::same(1)).unwrap();
        let y = g.sigmoid(y).unwrap();
        let y = g.global_avg_pool(y).unwrap();
        g.linear(y, wv, None).unwrap()
    };
    let class = 1;
    let mut g = Graph::new();
    let av = g.param(a.clone());
    let logits = head(&mut g, av);
    explain::grad_cam(&mut g, logits, &[class], &[av]).unwrap();
    let alpha = explain::cam_weights(g.grad(av).unwrap()).unwrap();
    let score = |t: &Tensor| {
        let mut g = Graph::new();
        let av = g.constant(t.clone());
        let l = head(&mut g, av);
        g.value(l).data()[class] as f64
    };
    let eps = 1e-2f32;
    let mut worst = 0.0f64;
    let mut ok = true;
    for ch in 0..4 {
        let mut acc = 0.0;
        for i in 0..16 {
            let idx = ch * 16 + i;
            let x = a.data()[idx];
            let bump = |v: f32| {
                let mut d = a.data().to_vec();
                d[idx] = v;
                Tensor::new(a.shape().to_vec(), d).unwrap()
            };
            acc += (score(&bump(x + eps)) - score(&bump(x - eps))) / ((x + eps) as f64 - (x - eps) as f64);
        }
        let num = acc / 16.0;
        let an = alpha.data()[ch] as f64;
        let rel = (an - num).abs() / num.abs().max(1e-9);
        worst = worst.max(rel);
        ok &= rel <= 1e-3;
    }
    (ok, worst)
}

pub fn gradcam() -> Verdict {
    let t0 = Instant::now();
    let mut c = Checks::new();
    let (ok, worst) = alpha_fd();
    c.check(ok, format!("channel weights vs finite differences on 4x4 maps: worst rel {worst:.1e}"));

    let cfg = ModelConfig::miniature(32);
    let model = PolarNetModel::new(cfg.clone(), 12).unwrap();
    let inputs = model_inputs(&cfg, 4, 13);
    let mut nonneg = true;
    for target in [Target::Predicted, Target::Class(0), Target::Class(1)] {
        let cams = explain::model_cams(&model, &inputs, target, Some(&prior_pattern())).unwrap();
        nonneg &= std::iter::once(&cams.fusion).chain(&cams.branches).all(|t| t.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
    c.check(nonneg, "CAMs are finite and non-negative".into());

    let spec = GridSpec::etdrs();
    let (h, w) = (24, 24);
    let labels = rasterize_rects(&polar_region_rects(&spec, h, w, 0.0).unwrap(), h, w);
    let regions = spec.regions();
    let mut single = true;
    for (ri, reg) in regions.iter().enumerate() {
        let map = Tensor::from_fn(&[h, w], |i| if labels[i] == Some(ri) { 1.0 } else { 0.0 });
        let (m, center) = explain::region_importance(&map, &spec).unwrap();
        let mut want = [[0.0f32; 2]; 4];
        let mut want_c = 0.0;
        match reg.sector {
            Some(q) => want[q][reg.ring - 1] = 1.0,
            None => want_c = 1.0,
        }
        single &= m == want && center == want_c;
    }
    c.check(single, format!("indicator maps give single-cell matrices for all {} regions", regions.len()));

    let mut r = rng(41);
    let mut exact = true;
    for _ in 0..20 {
        let m: explain::Matrix = std::array::from_fn(|_| std::array::from_fn(|_| r.random_range(0.0f32..3.0)));
        let center = r.random_range(0.0f32..3.0);
        let hm = explain::matrix_to_cartesian(&m, center, 256, 3.0).unwrap();
        exact &= explain::recover_matrix(&hm).unwrap() == (m, center);
    }
    c.check(exact, "matrix to heatmap to matrix is exact".into());
    c.finish(t0, 60.0)
}

/// The scaled synthetic study: 40 cases, 40 controls, a vessel-density
/// drop in the DVC inner ring, five folds on a miniature network.
pub fn end_to_end() -> Verdict {
    let t0 = Instant::now();
    let mut c = Checks::new();
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { seed: 1, ..SynthConfig::default() };
    data::synth_generate(&synth, dir.path()).unwrap();
    let subjects = data::load_dataset(dir.path()).unwrap();
    let input = InputSpec { theta: 32, r: 32, oversample: 4 };
    let samples = data::prepare_samples(&subjects, &input).unwrap();
    let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
    let cfg =
        TrainConfig { lr: 1e-3, batch_size: 8, epochs: 15, seed: 1, model: ModelConfig::miniature(32), input, ..TrainConfig::default() };
    let folds = cross_validate(&cfg, &samples, &labels, None, 1).unwrap();
    let mut aurocs = Vec::new();
    let mut hits = 0;
    let mut cells = Vec::new();
    for (model, rep) in &folds {
        aurocs.push(rep.metrics.map_or(f64::NAN, |m| m.auroc));
        let (_, agg) = explain::explain_samples(model, &samples, &rep.test_samples, Target::Predicted, None, 16).unwrap();
        let (proj, q, ring) = agg.argmax().unwrap();
        if proj == "DVC" && ring == 0 {
            hits += 1;
        }
        cells.push(format!("{proj}/{}{}", ["T", "S", "N", "I"][q], ["I", "E"][ring]));
    }
    let mean = aurocs.iter().sum::<f64>() / aurocs.len() as f64;
    c.check(mean >= 0.90, format!("mean test AUROC {mean:.3} over folds {aurocs:.3?}"));
    c.check(hits >= 4, format!("argmax in a DVC inner-ring cell in {hits}/5 folds {cells:?}"));
    c.check(cfg.epochs <= 20, format!("{} epochs", cfg.epochs));
    c.finish(t0, 1200.0)
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counted
/// half, computed by enumeration.
pub fn pairwise_auc(y: &[usize], s: &[f64]) -> f64 {
    let (mut num, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for (i, &yi) in y.iter().enumerate() {
        if yi == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        for (j, &yj) in y.iter().enumerate() {
            if yi == 1 && yj == 0 {
                num += if s[i] > s[j] {
                    2
                } else if s[i] == s[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    num as f64 / (2 * pos * neg) as f64
}

/// Fixed vectors with accuracy and kappa worked out by hand from their
/// confusion matrices.
pub fn hand_cases() -> Vec<(Vec<usize>, Vec<f64>, f64, f64)> {
    vec![
        // TP 2, FN 1, FP 1, TN 2: p_o 2/3, p_e 1/2.
        (vec![1, 1, 0, 0, 1, 0], vec![0.9, 0.4, 0.6, 0.2, 0.7, 0.1], 2.0 / 3.0, 1.0 / 3.0),
        // TP 3, FN 1, FP 1, TN 5: p_o 0.8, p_e 0.52.
        (vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0], vec![0.8, 0.7, 0.3, 0.6, 0.55, 0.2, 0.1, 0.4, 0.3, 0.05], 0.8, 7.0 / 12.0),
        // Everything predicted positive (0.5 counts as positive): kappa 0.
        (vec![0, 1, 0, 1, 1], vec![0.6, 0.7, 0.5, 0.9, 0.51], 0.6, 0.0),
    ]
}

pub fn metrics_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut c = Checks::new();
    let mut r = rng(51);
    let y: Vec<usize> = (0..200).map(|_| usize::from(r.random_bool(0.45))).collect();
    let s: Vec<f64> = y
        .iter()
        .map(|&l| {
            let v: f64 = r.random_range(0.0..1.0) * 0.7 + if l == 1 { 0.3 } else { 0.0 };
            (v * 16.0).floor() / 16.0
        })
        .collect();
    let got = metrics::auroc(&y, &s).unwrap();
    let want = pairwise_auc(&y, &s);
    c.check(got == want, format!("AUROC {got} vs all-pairs {want} on 200 tied samples"));
    for (i, (y, s, acc, kappa)) in hand_cases().into_iter().enumerate() {
        let m = metrics::metrics(&y, &s).unwrap();
        c.check(
            (m.acc - acc).abs() < 1e-12 && (m.kappa - kappa).abs() < 1e-12,
            format!("vector {}: ACC {:.4} kappa {:.4}", i + 1, m.acc, m.kappa),
        );
    }
    c.finish(t0, 60.0)
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_polarnet")
}

fn run_cli(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(bin()).args(args).current_dir(cwd).output().unwrap()
}

/// Every regular file under `root` except run manifests, relative paths sorted.
pub fn artifacts(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.file_name().unwrap().to_string_lossy().ends_with("run.json") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub const SMALL_SYNTH: &str = r#"{"n_case": 6, "n_control": 6, "size": 64, "faz_radius": 5, "center_jitter": 2, "chunk_len": 4}"#;
pub const SMALL_TRAIN: &str = r#"{"lr": 0.001, "batch_size": 4, "epochs": 2, "folds": 3,
  "input": {"theta": 16, "r": 16, "oversample": 2},
  "model": {"input_size": [16, 16], "pfem_channels": 4, "trunk_channels": [8, 8], "fused_channels": [16],
            "mkac_kernels": [[3, 1], [3, 2]], "mkpm_kernels": [2, 3]}}"#;

/// synth, train and explain in `dir`; returns the failing step, if any.
pub fn pipeline(dir: &Path, jobs: &str) -> Result<(), String> {
    std::fs::write(dir.join("synth.json"), SMALL_SYNTH).unwrap();
    std::fs::write(dir.join("train.json"), SMALL_TRAIN).unwrap();
    let steps: [&[&str]; 3] = [
        &["synth", "--config", "synth.json", "--out", "ds", "--seed", "7"],
        &["train", "--data", "ds", "--config", "train.json", "--out", "run", "--seed", "3", "--jobs", jobs],
        &["explain", "--data", "ds", "--run", "run", "--out", "ex", "--size", "64"],
    ];
    for s in steps {
        let o = run_cli(s, dir);
        if !o.status.success() {
            return Err(format!("{} failed: {}", s[0], String::from_utf8_lossy(&o.stderr)));
        }
    }
    Ok(())
}

pub fn determinism() -> Verdict {
    let t0 = Instant::now();
    let mut c = Checks::new();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path(), "1");
    let rb = pipeline(b.path(), "2");
    match (ra, rb) {
        (Ok(()), Ok(())) => {
            for step in ["ds", "run", "ex"] {
                let (x, y) = (artifacts(&a.path().join(step)), artifacts(&b.path().join(step)));
                let same = !x.is_empty() && x == y;
                c.check(same, format!("{step}: {} files byte-identical", x.len()));
            }
        }
        (ea, eb) => c.check(false, format!("{:?} {:?}", ea.err(), eb.err())),
    }
    c.finish(t0, 300.0)
}
