//! ETDRS, inner-external and hemispheric grids in Cartesian and polar space,
//! per-region pooling and the clinical prior matrix.
//!
//! A grid is a set of concentric rings (fractions of the transform radius R)
//! and angular sectors. Rings from `split_from_ring` outwards are divided
//! into sectors; inner rings are whole disks/annuli. Each sector starts at
//! its own angle and ends where the next one (counter-clockwise) begins, so
//! a pixel lying exactly on a sector line belongs to the later sector.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::polar::{self, normalize_angle};
use crate::tensor::Tensor;

const SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    #[serde(rename = "ETDRS")]
    Etdrs,
    #[serde(rename = "IE")]
    Ie,
    #[serde(rename = "Hemispheric")]
    Hemispheric,
}

impl std::str::FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "etdrs" => Ok(GridKind::Etdrs),
            "ie" => Ok(GridKind::Ie),
            "hemispheric" | "hemi" => Ok(GridKind::Hemispheric),
            _ => Err(Error::Parameter(format!("unknown grid kind '{s}'"))),
        }
    }
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Etdrs => "ETDRS",
            GridKind::Ie => "IE",
            GridKind::Hemispheric => "Hemispheric",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub name: String,
    /// Counter-clockwise start angle in radians (normalised convention).
    pub start: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub kind: GridKind,
    pub radii_fractions: Vec<f64>,
    pub sectors: Vec<Sector>,
    pub split_from_ring: usize,
}

impl GridSpec {
    /// Centre disk plus four quadrants (T, S, N, I) on two rings; quadrant
    /// lines at 45°, 135°, 225°, 315°.
    pub fn etdrs() -> Self {
        let quad = |name: &str, start: f64| Sector { name: name.into(), start: normalize_angle(start) };
        GridSpec {
            kind: GridKind::Etdrs,
            radii_fractions: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
            sectors: vec![quad("T", -FRAC_PI_4), quad("S", FRAC_PI_4), quad("N", 3.0 * FRAC_PI_4), quad("I", 5.0 * FRAC_PI_4)],
            split_from_ring: 1,
        }
    }

    /// Inner disk and external ring, no angular split.
    pub fn ie() -> Self {
        GridSpec { kind: GridKind::Ie, radii_fractions: vec![0.5, 1.0], sectors: Vec::new(), split_from_ring: 2 }
    }

    /// Superior and inferior halves of the full disk.
    pub fn hemispheric() -> Self {
        GridSpec {
            kind: GridKind::Hemispheric,
            radii_fractions: vec![1.0],
            sectors: vec![Sector { name: "S".into(), start: 0.0 }, Sector { name: "I".into(), start: PI }],
            split_from_ring: 0,
        }
    }

    pub fn for_kind(kind: GridKind) -> Self {
        match kind {
            GridKind::Etdrs => GridSpec::etdrs(),
            GridKind::Ie => GridSpec::ie(),
            GridKind::Hemispheric => GridSpec::hemispheric(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.radii_fractions;
        if f.is_empty() {
            return Err(Error::Parameter("grid needs at least one radius".into()));
        }
        if f.iter().any(|&r| !(r > 0.0 && r <= 1.0)) || f.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!("radii fractions {f:?} must increase strictly within (0,1]")));
        }
        if *f.last().unwrap() != 1.0 {
            return Err(Error::Parameter("last radius fraction must be 1".into()));
        }
        if self.split_from_ring < f.len() && self.sectors.is_empty() {
            return Err(Error::Parameter("split rings need at least one sector".into()));
        }
        let mut starts: Vec<f64> = self.sectors.iter().map(|s| normalize_angle(s.start)).collect();
        starts.sort_by(f64::total_cmp);
        if starts.windows(2).any(|w| w[1] - w[0] < SNAP) {
            return Err(Error::Parameter("sector start angles must be distinct".into()));
        }
        Ok(())
    }

    fn rings(&self) -> usize {
        self.radii_fractions.len()
    }

    fn ring_bounds(&self, ring: usize) -> (f64, f64) {
        let lo = if ring == 0 { 0.0 } else { self.radii_fractions[ring - 1] };
        (lo, self.radii_fractions[ring])
    }

    /// Regions in output order: unsplit rings first come as one region each,
    /// split rings contribute one region per sector in list order.
    pub fn regions(&self) -> Vec<RegionDef> {
        let mut out = Vec::new();
        for ring in 0..self.rings() {
            if ring < self.split_from_ring || self.sectors.is_empty() {
                out.push(RegionDef { ring, sector: None, name: self.ring_name(ring) });
            } else {
                for (k, s) in self.sectors.iter().enumerate() {
                    out.push(RegionDef { ring, sector: Some(k), name: self.sector_ring_name(&s.name, ring) });
                }
            }
        }
        out
    }

    fn ring_name(&self, ring: usize) -> String {
        match (self.kind, ring) {
            (GridKind::Etdrs, 0) => "C".into(),
            (GridKind::Ie, 0) => "inner".into(),
            (GridKind::Ie, 1) => "external".into(),
            _ => format!("ring{ring}"),
        }
    }

    fn sector_ring_name(&self, sector: &str, ring: usize) -> String {
        match self.kind {
            GridKind::Etdrs if self.rings() == 3 => format!("{sector}{}", if ring == 1 { "I" } else { "E" }),
            GridKind::Hemispheric if self.rings() == 1 => sector.to_string(),
            _ => format!("{sector}{ring}"),
        }
    }

    /// `[start, end)` angles of sector `k`; a lone sector covers the circle.
    fn sector_span(&self, k: usize) -> (f64, f64) {
        let start = normalize_angle(self.sectors[k].start);
        if self.sectors.len() == 1 {
            return (start, start + TAU);
        }
        let next = self
            .sectors
            .iter()
            .map(|s| normalize_angle(s.start))
            .filter(|&a| a != start)
            .map(|a| if a > start { a } else { a + TAU })
            .fold(f64::INFINITY, f64::min);
        (start, next)
    }

    fn sector_of(&self, theta: f64) -> usize {
        let mut theta = normalize_angle(theta);
        for s in &self.sectors {
            let b = normalize_angle(s.start);
            let d = (theta - b).abs();
            if d < SNAP || (TAU - d) < SNAP {
                theta = b;
            }
        }
        (0..self.sectors.len())
            .find(|&k| {
                let (a, b) = self.sector_span(k);
                let t = if theta < a { theta + TAU } else { theta };
                t >= a && t < b
            })
            .unwrap_or(0)
    }

    /// Region index of a point given its angle and radius as a fraction of R.
    pub fn locate(&self, theta: f64, radius_fraction: f64) -> Option<usize> {
        if !(radius_fraction < 1.0) {
            return None;
        }
        let ring = self.radii_fractions.iter().position(|&f| radius_fraction < f)?;
        let regions = self.regions();
        let sector = (ring >= self.split_from_ring && !self.sectors.is_empty()).then(|| self.sector_of(theta));
        regions.iter().position(|r| r.ring == ring && r.sector == sector)
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions().iter().position(|r| r.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionDef {
    pub ring: usize,
    pub sector: Option<usize>,
    pub name: String,
}

/// Per-pixel region labels of a grid drawn on a Cartesian canvas.
#[derive(Clone, Debug)]
pub struct RegionMask {
    pub spec: GridSpec,
    pub width: usize,
    pub height: usize,
    pub origin: (f64, f64),
    pub radius: f64,
    /// Region index per pixel, `None` outside the disk.
    pub label_map: Vec<Option<u16>>,
    pub names: Vec<String>,
}

impl RegionMask {
    pub fn label(&self, x: usize, y: usize) -> Option<usize> {
        self.label_map[y * self.width + x].map(usize::from)
    }

    pub fn count(&self, region: usize) -> usize {
        self.label_map.iter().filter(|l| **l == Some(region as u16)).count()
    }

    /// Gray levels spread evenly over the regions; 0 outside the disk.
    pub fn to_indexed_gray(&self) -> Vec<u8> {
        let n = self.names.len().max(1) as f64;
        self.label_map.iter().map(|l| l.map_or(0, |i| (255.0 * (i as f64 + 1.0) / n).round() as u8)).collect()
    }
}

pub fn build_grid(spec: &GridSpec, radius: f64, origin: (f64, f64), width: usize, height: usize) -> Result<RegionMask> {
    spec.validate()?;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Parameter(format!("grid radius {radius} must be positive")));
    }
    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = polar::pixel_offset(origin, x, y);
            let (theta, r) = polar::cart_to_polar(u, v);
            labels.push(spec.locate(theta, r / radius).map(|i| i as u16));
        }
    }
    Ok(RegionMask {
        spec: spec.clone(),
        width,
        height,
        origin,
        radius,
        label_map: labels,
        names: spec.regions().into_iter().map(|r| r.name).collect(),
    })
}

/// Axis-aligned rectangle in continuous polar index space: row cell `i`
/// spans `[i, i+1)`, column cell `j` spans `[j, j+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarRect {
    pub region: usize,
    pub rows: (f64, f64),
    pub cols: (f64, f64),
    /// Set on the second half of a region split by the θ wrap-around.
    pub wrapped: bool,
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-7 {
        r
    } else {
        x
    }
}

pub fn polar_region_rects(spec: &GridSpec, theta_samples: usize, r_samples: usize, start_angle: f64) -> Result<Vec<PolarRect>> {
    spec.validate()?;
    let th = theta_samples as f64;
    let mut rects = Vec::new();
    for (idx, region) in spec.regions().iter().enumerate() {
        let (f0, f1) = spec.ring_bounds(region.ring);
        let cols = (snap(f0 * r_samples as f64), snap(f1 * r_samples as f64));
        let (a, len) = match region.sector {
            None => (0.0, th),
            Some(k) => {
                let (s, e) = spec.sector_span(k);
                let a = snap(normalize_angle(s - start_angle) * th / TAU) % th;
                (a, snap((e - s) * th / TAU))
            }
        };
        let end = a + len;
        if end <= th + 1e-9 {
            rects.push(PolarRect { region: idx, rows: (a, end.min(th)), cols, wrapped: false });
        } else {
            rects.push(PolarRect { region: idx, rows: (a, th), cols, wrapped: false });
            rects.push(PolarRect { region: idx, rows: (0.0, end - th), cols, wrapped: true });
        }
    }
    Ok(rects)
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Region of every polar cell by centre containment (`None` never occurs for
/// complete grids but is kept for partial specs).
pub fn rasterize_rects(rects: &[PolarRect], theta_samples: usize, r_samples: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; theta_samples * r_samples];
    for i in 0..theta_samples {
        let rc = i as f64 + 0.5;
        for j in 0..r_samples {
            let cc = j as f64 + 0.5;
            out[i * r_samples + j] =
                rects.iter().find(|r| rc >= r.rows.0 && rc < r.rows.1 && cc >= r.cols.0 && cc < r.cols.1).map(|r| r.region);
        }
    }
    out
}

/// Per-region means of a polar map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMeans {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl RegionMeans {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Area-weighted mean of `map` (`[H, W]`, rows = θ, cols = r) over each
/// region's polar rectangles.
pub fn region_pool(map: &Tensor, spec: &GridSpec, start_angle: f64) -> Result<RegionMeans> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        [1, h, w] | [1, 1, h, w] => (*h, *w),
        s => return dim_err(format!("region_pool expects a 2-D map, got {s:?}")),
    };
    let rects = polar_region_rects(spec, h, w, start_angle)?;
    let regions = spec.regions();
    let mut sums = vec![0.0f64; regions.len()];
    let mut weights = vec![0.0f64; regions.len()];
    let th = h as f64;
    let data = map.data();
    for rect in &rects {
        let row_w: Vec<f64> = (0..h)
            .map(|i| {
                let cell = (i as f64, i as f64 + 1.0);
                overlap(rect.rows, cell) + overlap(rect.rows, (cell.0 + th, cell.1 + th))
            })
            .collect();
        let col_w: Vec<f64> = (0..w).map(|j| overlap(rect.cols, (j as f64, j as f64 + 1.0))).collect();
        for (i, &rw) in row_w.iter().enumerate().filter(|(_, &x)| x > 0.0) {
            for (j, &cw) in col_w.iter().enumerate().filter(|(_, &x)| x > 0.0) {
                sums[rect.region] += rw * cw * data[i * w + j] as f64;
                weights[rect.region] += rw * cw;
            }
        }
    }
    if let Some(empty) = weights.iter().position(|&wt| wt <= 0.0) {
        return Err(Error::Parameter(format!("region {} is empty at {h}x{w}", regions[empty].name)));
    }
    Ok(RegionMeans {
        names: regions.into_iter().map(|r| r.name).collect(),
        values: sums.iter().zip(&weights).map(|(s, w)| s / w).collect(),
    })
}

/// The 4×2 quadrant × (inner, external) layout of an ETDRS result, rows in
/// sector list order, plus the centre disk value.
pub fn etdrs_matrix(spec: &GridSpec, means: &RegionMeans) -> Result<([[f64; 2]; 4], f64)> {
    if spec.rings() != 3 || spec.sectors.len() != 4 || spec.split_from_ring != 1 {
        return Err(Error::Parameter("4x2 layout needs a three-ring, four-sector grid".into()));
    }
    let regions = spec.regions();
    let mut m = [[0.0; 2]; 4];
    let mut center = 0.0;
    for (r, v) in regions.iter().zip(&means.values) {
        match r.sector {
            None => center = *v,
            Some(k) => m[k][r.ring - 1] = *v,
        }
    }
    Ok((m, center))
}

/// Multiplicative gate for a `[H, W]` polar map: each cell takes the weight
/// of the quadrant/ring containing its centre; the centre disk stays 1.
pub fn region_gate_map(spec: &GridSpec, weights: &[[f32; 2]; 4], h: usize, w: usize) -> Result<Vec<f32>> {
    if spec.rings() != 3 || spec.sectors.len() != 4 || spec.split_from_ring != 1 {
        return Err(Error::Parameter("prior gating needs a three-ring, four-sector grid".into()));
    }
    let rects = polar_region_rects(spec, h, w, 0.0)?;
    let regions = spec.regions();
    Ok(rasterize_rects(&rects, h, w)
        .into_iter()
        .map(|r| match r.map(|i| &regions[i]) {
            Some(RegionDef { sector: Some(k), ring, .. }) => weights[*k][ring - 1],
            _ => 1.0,
        })
        .collect())
}

pub const PROJECTIONS: [&str; 3] = ["SVC", "DVC", "CC"];

/// Per-projection 4×2 clinical weights (rows T, S, N, I; columns inner,
/// external). Projections absent from the file weigh 1 everywhere.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorMatrix {
    pub projections: BTreeMap<String, [[f32; 2]; 4]>,
}

impl PriorMatrix {
    pub fn neutral() -> Self {
        PriorMatrix::default()
    }

    pub fn weights(&self, projection: &str) -> [[f32; 2]; 4] {
        self.projections.get(projection).copied().unwrap_or([[1.0; 2]; 4])
    }

    pub fn is_neutral(&self) -> bool {
        self.projections.values().all(|m| m.iter().flatten().all(|&v| v == 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in &self.projections {
            if let Some(bad) = m.iter().flatten().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Config(format!("prior weight {bad} for {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Parses `{"SVC": [[..],[..],[..],[..]], ...}` with shape checking.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<Vec<f64>>> = serde_json::from_str(text).map_err(|e| Error::Config(format!("prior file: {e}")))?;
        let mut projections = BTreeMap::new();
        for (name, rows) in raw {
            if rows.len() != 4 || rows.iter().any(|r| r.len() != 2) {
                return Err(Error::Config(format!(
                    "prior for {name} must be 4x2, got {}x{}",
                    rows.len(),
                    rows.first().map_or(0, Vec::len)
                )));
            }
            let mut m = [[0.0f32; 2]; 4];
            for (i, r) in rows.iter().enumerate() {
                m[i] = [r[0] as f32, r[1] as f32];
            }
            projections.insert(name, m);
        }
        let prior = PriorMatrix { projections };
        prior.validate()?;
        Ok(prior)
    }
}

pub fn load_prior(path: &Path) -> Result<PriorMatrix> {
    let text = std::fs::read_to_string(path)?;
    PriorMatrix::from_json(&text)
}
