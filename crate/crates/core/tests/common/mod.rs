#![allow(dead_code)]

pub mod criteria;
pub mod reference;

use polarnet::polar::CartesianImage;
use polarnet::tensor::{Graph, Tensor, Var};
use polarnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Band-limited test function on continuous image coordinates, range
/// within `[0.05, 0.95]`.
#[derive(Clone, Debug)]
pub struct SmoothField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl SmoothField {
    pub fn new(seed: u64, size: f64, max_cycles: f64) -> Self {
        let mut r = rng(seed);
        let waves = (0..6)
            .map(|_| {
                let fx = r.random_range(-max_cycles..max_cycles) / size;
                let fy = r.random_range(-max_cycles..max_cycles) / size;
                (fx, fy, r.random_range(0.0..std::f64::consts::TAU), 0.075)
            })
            .collect();
        SmoothField { waves }
    }

    pub fn at(&self, x: f64, y: f64) -> f64 {
        0.5 + self.waves.iter().map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).cos()).sum::<f64>()
    }

    /// Rasterised at pixel centres.
    pub fn image(&self, w: usize, h: usize, center: (f64, f64)) -> CartesianImage {
        CartesianImage::from_fn(w, h, center, |x, y| self.at(x as f64 + 0.5, y as f64 + 0.5) as f32).unwrap()
    }
}

/// Random-walk line drawing on a dark background.
pub fn vessel_image(seed: u64, size: usize) -> CartesianImage {
    let mut r = rng(seed);
    let mut px = vec![0.05f32; size * size];
    for _ in 0..40 {
        let (mut x, mut y) = (r.random_range(0.0..size as f64), r.random_range(0.0..size as f64));
        let mut dir: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let level = r.random_range(0.4f32..1.0);
        for _ in 0..3 * size {
            dir += r.random_range(-0.3..0.3);
            x += dir.cos();
            y += dir.sin();
            if x < 0.0 || y < 0.0 || x >= size as f64 || y >= size as f64 {
                break;
            }
            let i = y as usize * size + x as usize;
            px[i] = px[i].max(level);
        }
    }
    let c = size as f64 / 2.0;
    CartesianImage::from_fn(size, size, (c, c), |x, y| px[y * size + x]).unwrap()
}

/// Rotates the pixel grid a quarter turn counter-clockwise about its centre
/// (v pointing up).
pub fn rotate_quarter(img: &CartesianImage) -> CartesianImage {
    let n = img.width;
    assert_eq!(n, img.height);
    CartesianImage::from_fn(n, n, img.center, |x, y| img.get(n - 1 - y, x, 0)).unwrap()
}

pub fn roll_rows(data: &[f32], rows: usize, cols: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        let dst = (i + k) % rows;
        out[dst * cols..(dst + 1) * cols].copy_from_slice(&data[i * cols..(i + 1) * cols]);
    }
    out
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Checked against a one-sided slope next to a kink.
    pub one_sided: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
    pub worst: f64,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.one_sided += other.one_sided;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
        self.worst = self.worst.max(other.worst);
    }

    pub fn skip_ratio(&self) -> f64 {
        self.skipped as f64 / (self.checked + self.skipped).max(1) as f64
    }
}

pub const REL_TOL: f64 = 1e-2;
pub const ABS_TOL: f64 = 1e-4;

/// Agreement with the relative-or-absolute rule; returns the relative error.
pub fn close(analytic: f64, numeric: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let rel = diff / analytic.abs().max(numeric.abs()).max(1e-12);
    (diff <= ABS_TOL || rel <= REL_TOL, if analytic.abs().max(numeric.abs()) < 10.0 * ABS_TOL { 0.0 } else { rel })
}

/// Builds an op graph over tracked inputs. The scalar objective is
/// `Σ out ⊙ P` for a fixed seeded projection `P`, evaluated in f64 for the
/// numeric side.
pub struct FdCase<'a> {
    pub name: &'a str,
    pub inputs: Vec<Tensor>,
    pub build: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a>,
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn objective(case: &FdCase, inputs: &[Tensor], proj: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    g.value(out).data().iter().zip(proj.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn with_entry(t: &Tensor, i: usize, v: f32) -> Tensor {
    let mut d = t.data().to_vec();
    d[i] = v;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

/// Finite-difference view of one entry. One-sided differences at `eps`
/// and `eps/2` reveal whether a kink (ReLU, max selection) lies left or
/// right of the point.
pub enum FdEstimate {
    Smooth(f64),
    /// Only these one-sided slopes are free of kinks; the analytic value
    /// must match one of them.
    OneSided(Vec<f64>),
    Kinked,
}

pub fn fd_estimate(f: &dyn Fn(&Tensor) -> f64, t: &Tensor, i: usize, eps: f32) -> FdEstimate {
    let x = t.data()[i];
    let step = |d: f64| {
        let v = x + d as f32;
        (v as f64 - x as f64, f(&with_entry(t, i, v)))
    };
    fd_estimate_steps(&step, f(t), eps as f64)
}

/// Same protocol over an arbitrary scalar direction. `step(d)` returns the
/// step actually taken and the objective there.
pub fn fd_estimate_steps(step: &dyn Fn(f64) -> (f64, f64), f0: f64, eps: f64) -> FdEstimate {
    let slope = |d: f64| {
        let (h, v) = step(d);
        (v - f0) / h
    };
    let (l1, l2, r1, r2) = (slope(-eps), slope(-eps / 2.0), slope(eps), slope(eps / 2.0));
    let (c1, c2) = ((l1 + r1) / 2.0, (l2 + r2) / 2.0);
    if close(c1, c2).0 && close(l1, r1).0 {
        return FdEstimate::Smooth(c1);
    }
    // Richardson extrapolation of each kink-free side removes its O(eps) term.
    let sides: Vec<f64> = [(l1, l2), (r1, r2)].iter().filter(|(a, b)| close(*a, *b).0).map(|(a, b)| 2.0 * b - a).collect();
    if sides.is_empty() {
        FdEstimate::Kinked
    } else {
        FdEstimate::OneSided(sides)
    }
}

/// Folds one entry into `report`.
pub fn judge(report: &mut FdReport, label: String, analytic: f64, est: FdEstimate) {
    let candidates = match est {
        FdEstimate::Kinked => {
            report.skipped += 1;
            return;
        }
        FdEstimate::Smooth(c) => vec![c],
        FdEstimate::OneSided(v) => {
            report.one_sided += 1;
            v
        }
    };
    report.checked += 1;
    let best = candidates.iter().map(|&n| (close(analytic, n), n)).min_by(|a, b| a.0 .1.total_cmp(&b.0 .1)).unwrap();
    let ((ok, rel), num) = best;
    report.worst = report.worst.max(rel);
    if !ok {
        report.failures.push(format!("{label}: analytic {analytic:.6e} numeric {num:.6e}"));
    }
}

pub fn fd_check(case: &FdCase, eps: f32, max_entries: usize, seed: u64) -> FdReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let proj = projection(g.value(out).shape(), seed);
    let pv = g.constant(proj.clone());
    let prod = g.mul(out, pv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut report = FdReport::default();
    let mut pick = rng(seed ^ 0x5eed);
    for (k, t) in case.inputs.iter().enumerate() {
        let grad = g.grad_or_zeros(vars[k]);
        let entries: Vec<usize> = if t.numel() <= max_entries {
            (0..t.numel()).collect()
        } else {
            (0..max_entries).map(|_| pick.random_range(0..t.numel())).collect()
        };
        for i in entries {
            let f = |tt: &Tensor| {
                let mut ins = case.inputs.clone();
                ins[k] = tt.clone();
                objective(case, &ins, &proj)
            };
            judge(&mut report, format!("{} input {k}[{i}]", case.name), grad.data()[i] as f64, fd_estimate(&f, t, i, eps));
        }
    }
    report
}
