//! On-disk layout `<root>/<subject>/<eye>/{SVC,DVC,CC}.pgm` with a
//! `meta.json` per eye, and conversion to network-ready polar tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pnm;
use super::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::grid::PROJECTIONS;
use crate::polar::{self, CartesianImage, Laterality, PolarParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeMeta {
    pub label: String,
    pub laterality: String,
    pub center: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub subjects: Vec<SubjectEntry>,
}

pub fn parse_label(s: &str) -> Result<usize> {
    match s {
        "control" => Ok(0),
        "case" => Ok(1),
        other => Err(Error::Data(format!("unknown label '{other}'"))),
    }
}

#[derive(Clone, Debug)]
pub struct Eye {
    pub laterality: Laterality,
    /// One image per projection, SVC, DVC, CC order.
    pub images: Vec<CartesianImage>,
}

#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub label: usize,
    pub eyes: Vec<Eye>,
}

fn sorted_dirs(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = std::fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_eye(dir: &Path) -> Result<(EyeMeta, Eye)> {
    let meta: EyeMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("meta.json").display())))?;
    let laterality: Laterality = meta.laterality.parse().map_err(|e: Error| Error::Data(e.to_string()))?;
    let mut images = Vec::new();
    for p in PROJECTIONS {
        let g = pnm::read_pgm(&dir.join(format!("{p}.pgm")))?;
        let img = CartesianImage::new(g.width, g.height, 1, g.pixels, (meta.center[0], meta.center[1]), laterality)
            .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        images.push(img);
    }
    Ok((meta, Eye { laterality, images }))
}

/// Reads every subject under `root`, sorted by directory name.
pub fn load_dataset(root: &Path) -> Result<Vec<Subject>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut subjects = Vec::new();
    for sdir in sorted_dirs(root)? {
        let id = sdir.file_name().unwrap().to_string_lossy().into_owned();
        let mut eyes = Vec::new();
        let mut label = None;
        for edir in sorted_dirs(&sdir)? {
            let (meta, eye) = load_eye(&edir)?;
            let l = parse_label(&meta.label)?;
            if label.is_some_and(|prev| prev != l) {
                return Err(Error::Data(format!("subject {id} has eyes with different labels")));
            }
            label = Some(l);
            eyes.push(eye);
        }
        let label = label.ok_or_else(|| Error::Data(format!("subject {id} has no eyes")))?;
        subjects.push(Subject { id, label, eyes });
    }
    if subjects.is_empty() {
        return Err(Error::Data(format!("no subjects under {}", root.display())));
    }
    Ok(subjects)
}

/// How Cartesian projections become network input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub theta: usize,
    pub r: usize,
    /// The transform samples `oversample` times finer on each axis and
    /// box-averages back down.
    pub oversample: usize,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec { theta: 224, r: 224, oversample: 1 }
    }
}

/// Laterality-normalised, FAZ-centred polar tensor `[1, Θ, r]`.
pub fn polar_input(img: &CartesianImage, spec: &InputSpec) -> Result<Tensor> {
    let f = spec.oversample.max(1);
    let (norm, _) = polar::normalize_laterality(img);
    let p = polar::to_polar(&norm, &PolarParams::new(spec.theta * f, spec.r * f))?;
    let full = p.to_tensor();
    let src = full.data();
    let wf = spec.r * f;
    let mut out = vec![0.0f32; spec.theta * spec.r];
    let norm_f = 1.0 / (f * f) as f64;
    for i in 0..spec.theta {
        for j in 0..spec.r {
            let mut s = 0.0f64;
            for di in 0..f {
                let row = &src[(i * f + di) * wf + j * f..(i * f + di) * wf + (j + 1) * f];
                s += row.iter().map(|&v| v as f64).sum::<f64>();
            }
            out[i * spec.r + j] = (s * norm_f) as f32;
        }
    }
    Tensor::new(vec![1, spec.theta, spec.r], out)
}

/// One eye ready for the network.
#[derive(Clone, Debug)]
pub struct Sample {
    pub subject: usize,
    pub label: usize,
    /// `[1, Θ, r]` per projection.
    pub inputs: Vec<Tensor>,
}

pub fn prepare_samples(subjects: &[Subject], spec: &InputSpec) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (si, s) in subjects.iter().enumerate() {
        for eye in &s.eyes {
            let inputs = eye.images.iter().map(|img| polar_input(img, spec)).collect::<Result<Vec<_>>>()?;
            out.push(Sample { subject: si, label: s.label, inputs });
        }
    }
    Ok(out)
}

/// Stacks the chosen samples into one `[B, 1, Θ, r]` tensor per branch,
/// rolling each sample's rows by its shift.
pub fn batch_inputs(samples: &[&Sample], shifts: &[isize]) -> Result<Vec<Tensor>> {
    let branches = samples.first().map_or(0, |s| s.inputs.len());
    let mut out = Vec::with_capacity(branches);
    for b in 0..branches {
        let items = samples
            .iter()
            .zip(shifts)
            .map(|(s, &k)| if k == 0 { Ok(s.inputs[b].clone()) } else { s.inputs[b].roll_rows(k) })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = items.iter().collect();
        out.push(Tensor::stack(&refs)?);
    }
    Ok(out)
}
