//! Seeded OCTA-like projections built from branching random-walk vessel
//! trees, with optional regional density loss for case subjects.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{EyeMeta, GroundTruth, SubjectEntry};
use super::pnm;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, PROJECTIONS};
use crate::polar::{self, CartesianImage, Laterality};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselParams {
    pub branches: (usize, usize),
    pub width: (f64, f64),
    /// Per-step multiplicative width decay.
    pub falloff: f64,
    pub branch_prob: f64,
    pub turn_std: f64,
    pub brightness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub projection: String,
    /// ETDRS region names; `inner_ring` and `outer_ring` expand to the
    /// four quadrant cells of that ring.
    pub regions: Vec<String>,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_case: usize,
    pub n_control: usize,
    pub size: usize,
    pub center_jitter: f64,
    pub faz_radius: f64,
    pub noise_std: f64,
    /// Steps per vessel segment that survives or drops as a unit.
    pub chunk_len: usize,
    pub projections: Vec<VesselParams>,
    pub effects: Vec<Effect>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let vp = |b: (usize, usize), w: (f64, f64), falloff: f64, brightness: f64| VesselParams {
            branches: b,
            width: w,
            falloff,
            branch_prob: 0.02,
            turn_std: 0.12,
            brightness,
        };
        SynthConfig {
            n_case: 40,
            n_control: 40,
            size: 256,
            center_jitter: 5.0,
            faz_radius: 16.0,
            noise_std: 0.03,
            chunk_len: 10,
            projections: vec![
                vp((24, 30), (2.0, 3.0), 0.996, 0.9),
                vp((32, 40), (1.2, 2.0), 0.997, 0.8),
                vp((34, 40), (1.0, 1.5), 0.998, 0.6),
            ],
            effects: vec![Effect { projection: "DVC".into(), regions: vec!["inner_ring".into()], multiplier: 0.5 }],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 32 {
            return bad(format!("image size {} too small", self.size));
        }
        if self.projections.len() != PROJECTIONS.len() {
            return bad(format!("need {} projection parameter sets", PROJECTIONS.len()));
        }
        for p in &self.projections {
            if p.branches.0 == 0 || p.branches.0 > p.branches.1 || !(p.width.0 > 0.0 && p.width.0 <= p.width.1) {
                return bad("vessel branch and width ranges must be positive and ordered".into());
            }
        }
        if !(self.center_jitter >= 0.0 && self.center_jitter < self.size as f64 / 4.0) {
            return bad(format!("centre jitter {} out of range", self.center_jitter));
        }
        for e in &self.effects {
            if !PROJECTIONS.contains(&e.projection.as_str()) {
                return bad(format!("unknown projection '{}'", e.projection));
            }
            if !(e.multiplier > 0.0 && e.multiplier <= 1.0) {
                return bad(format!("density multiplier {} outside (0,1]", e.multiplier));
            }
            region_indices(&e.regions)?;
        }
        Ok(())
    }
}

/// ETDRS region indices named by an effect.
pub fn region_indices(names: &[String]) -> Result<Vec<usize>> {
    let g = GridSpec::etdrs();
    let mut out = Vec::new();
    for n in names {
        let expanded: Vec<String> = match n.as_str() {
            "inner_ring" => ["TI", "SI", "NI", "II"].map(String::from).to_vec(),
            "outer_ring" => ["TE", "SE", "NE", "IE"].map(String::from).to_vec(),
            _ => vec![n.clone()],
        };
        for e in expanded {
            let idx = g.region_index(&e).ok_or_else(|| Error::Config(format!("unknown region '{e}'")))?;
            if !out.contains(&idx) {
                out.push(idx);
            }
        }
    }
    Ok(out)
}

struct Walker {
    x: f64,
    y: f64,
    heading: f64,
    width: f64,
    steps: usize,
}

/// Renders one projection in the normalised (OD) frame.
fn render(cfg: &SynthConfig, vp: &VesselParams, center: (f64, f64), effect: Option<(&[usize], f64)>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.size;
    let mut canvas = vec![0.0f32; n * n];
    let grid = GridSpec::etdrs();
    let radius = center.0.min(n as f64 - center.0).min(center.1).min(n as f64 - center.1);
    let count = rng.random_range(vp.branches.0..=vp.branches.1);
    let turn = Normal::new(0.0, vp.turn_std).expect("finite std");
    let mut stack: Vec<Walker> = Vec::new();
    for _ in 0..count {
        let a = rng.random_range(0.0..TAU);
        let start = cfg.faz_radius * rng.random_range(1.0..1.3);
        stack.push(Walker {
            x: center.0 + start * a.cos(),
            y: center.1 - start * a.sin(),
            heading: a + rng.random_range(-0.3..0.3),
            width: rng.random_range(vp.width.0..=vp.width.1),
            steps: 0,
        });
    }
    let max_steps = 2 * n;
    let mut spawned = 0usize;
    while let Some(mut w) = stack.pop() {
        let mut keep_chunk = true;
        let mut chunk = usize::MAX;
        while w.steps < max_steps {
            if w.x < -4.0 || w.y < -4.0 || w.x > n as f64 + 4.0 || w.y > n as f64 + 4.0 {
                break;
            }
            let (u, v) = (w.x - center.0, center.1 - w.y);
            let (theta, r) = polar::cart_to_polar(u, v);
            if r < cfg.faz_radius {
                // Vessels never enter the avascular zone; steer outward.
                w.heading = theta;
            }
            if w.steps / cfg.chunk_len != chunk {
                chunk = w.steps / cfg.chunk_len;
                keep_chunk = match effect {
                    Some((_, m)) => rng.random::<f64>() < m,
                    None => true,
                };
            }
            let in_effect = effect.is_some_and(|(regions, _)| grid.locate(theta, r / radius).is_some_and(|idx| regions.contains(&idx)));
            if keep_chunk || !in_effect {
                stamp(&mut canvas, n, w.x, w.y, w.width, vp.brightness);
            }
            w.heading += turn.sample(rng);
            w.x += w.heading.cos();
            w.y -= w.heading.sin();
            w.width = (w.width * vp.falloff).max(0.7);
            w.steps += 1;
            if spawned < 4 * count && rng.random::<f64>() < vp.branch_prob {
                spawned += 1;
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                stack.push(Walker {
                    x: w.x,
                    y: w.y,
                    heading: w.heading + side * rng.random_range(0.4..0.9),
                    width: (w.width * 0.8).max(0.7),
                    steps: w.steps,
                });
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_std as f32).expect("finite std");
        for v in &mut canvas {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    canvas
}

/// Max-blends a Gaussian cross-section of the given full width.
fn stamp(canvas: &mut [f32], n: usize, cx: f64, cy: f64, width: f64, peak: f64) {
    let sigma = width / 2.0;
    let reach = (3.0 * sigma).ceil() as isize;
    let (ix, iy) = (cx.floor() as isize, cy.floor() as isize);
    for y in iy - reach..=iy + reach {
        for x in ix - reach..=ix + reach {
            if x < 0 || y < 0 || x >= n as isize || y >= n as isize {
                continue;
            }
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let v = (peak * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()) as f32;
            let p = &mut canvas[y as usize * n + x as usize];
            if v > *p {
                *p = v;
            }
        }
    }
}

/// One generated eye: three projections as they would be stored on disk.
pub struct SyntheticEye {
    pub laterality: Laterality,
    pub images: Vec<CartesianImage>,
}

/// Subject `index` with its own random stream, so subjects can be
/// generated in any order or in parallel.
pub fn generate_subject(cfg: &SynthConfig, index: usize, case: bool) -> Result<SyntheticEye> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let half = cfg.size as f64 / 2.0;
    let j = cfg.center_jitter;
    let center = (half + rng.random_range(-j..=j), half + rng.random_range(-j..=j));
    let laterality = if rng.random::<bool>() { Laterality::Od } else { Laterality::Os };
    let mut images = Vec::new();
    for (p, vp) in PROJECTIONS.iter().zip(&cfg.projections) {
        let mut regions = Vec::new();
        let mut mult = 1.0;
        if case {
            for e in cfg.effects.iter().filter(|e| e.projection == *p) {
                regions.extend(region_indices(&e.regions)?);
                mult = e.multiplier;
            }
        }
        let effect = (!regions.is_empty() && mult < 1.0).then_some((regions.as_slice(), mult));
        let px = render(cfg, vp, center, effect, &mut rng);
        let img = CartesianImage::new(cfg.size, cfg.size, 1, px, center, Laterality::Od)?;
        images.push(match laterality {
            Laterality::Os => {
                let mut m = img.mirror_horizontal();
                m.laterality = Laterality::Os;
                m
            }
            _ => img,
        });
    }
    Ok(SyntheticEye { laterality, images })
}

pub fn subject_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Writes the dataset tree plus `groundtruth.json` under `root`.
pub fn synth_generate(cfg: &SynthConfig, root: &Path) -> Result<GroundTruth> {
    cfg.validate()?;
    std::fs::create_dir_all(root)?;
    let mut subjects = Vec::new();
    let total = cfg.n_case + cfg.n_control;
    for i in 0..total {
        // Cases and controls interleave so any prefix stays roughly balanced.
        let case = if cfg.n_case == cfg.n_control { i % 2 == 1 } else { i >= cfg.n_control };
        let eye = generate_subject(cfg, i, case)?;
        let id = subject_id(i);
        let lat = eye.laterality.to_string();
        let dir = root.join(&id).join(&lat);
        std::fs::create_dir_all(&dir)?;
        for (p, img) in PROJECTIONS.iter().zip(&eye.images) {
            pnm::write_pgm_f32(&dir.join(format!("{p}.pgm")), img.width, img.height, &img.pixels)?;
        }
        let meta = EyeMeta {
            label: if case { "case".into() } else { "control".into() },
            laterality: lat,
            center: [eye.images[0].center.0, eye.images[0].center.1],
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        subjects.push(SubjectEntry { id, label: meta.label });
    }
    let gt = GroundTruth { config: cfg.clone(), subjects };
    std::fs::write(root.join("groundtruth.json"), serde_json::to_string_pretty(&gt)? + "\n")?;
    Ok(gt)
}
