use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Every parameter shape is a function of
/// this struct alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub branches: usize,
    /// Polar input size as (θ rows, r columns).
    pub input_size: (usize, usize),
    pub in_channels: usize,
    /// Atrous convolution (kernel, dilation) pairs.
    pub mkac_kernels: Vec<(usize, usize)>,
    /// Max-pool kernel sizes, stride 1, same padding.
    pub mkpm_kernels: Vec<usize>,
    pub pfem_channels: usize,
    pub trunk_channels: Vec<usize>,
    pub fused_channels: Vec<usize>,
    pub classes: usize,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub circular_theta: bool,
    pub leaky_slope: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            branches: 3,
            input_size: (224, 224),
            in_channels: 1,
            mkac_kernels: vec![(3, 1), (3, 2), (3, 4)],
            mkpm_kernels: vec![2, 3, 5],
            pfem_channels: 16,
            trunk_channels: vec![32, 32, 64, 64],
            fused_channels: vec![128],
            classes: 2,
            cbam_reduction: 4,
            cbam_kernel: 7,
            circular_theta: true,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    /// Same topology at a size that trains in seconds per epoch.
    pub fn miniature(side: usize) -> Self {
        ModelConfig {
            input_size: (side, side),
            pfem_channels: 4,
            trunk_channels: vec![8, 8, 16, 16],
            fused_channels: vec![32],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.branches == 0 || self.classes < 2 || self.in_channels == 0 || self.pfem_channels == 0 {
            return bad("branches, in_channels and pfem_channels must be positive and classes >= 2".into());
        }
        if self.mkac_kernels.is_empty() || self.mkpm_kernels.is_empty() {
            return bad("need at least one MKAC and one MKPM kernel".into());
        }
        if let Some(&(k, d)) = self.mkac_kernels.iter().find(|(k, d)| k % 2 == 0 || *d == 0) {
            return bad(format!("MKAC kernel ({k},{d}) must be odd with dilation >= 1"));
        }
        if self.mkpm_kernels.contains(&0) {
            return bad("MKPM kernels must be >= 1".into());
        }
        if self.cbam_kernel % 2 == 0 || self.cbam_reduction == 0 {
            return bad("CBAM spatial kernel must be odd and reduction positive".into());
        }
        if self.trunk_channels.is_empty() || self.fused_channels.is_empty() {
            return bad("trunk and fusion need at least one block".into());
        }
        if self.trunk_channels.contains(&0) || self.fused_channels.contains(&0) {
            return bad("block channel counts must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside (0,1)", self.leaky_slope));
        }
        let (h, w) = self.input_size;
        let f = 1 << self.downsamplings();
        if h < f || w < f {
            return bad(format!("input {h}x{w} too small for total stride {f}"));
        }
        Ok(())
    }

    pub fn pfem_out_channels(&self) -> usize {
        self.pfem_channels + self.in_channels
    }

    /// Per-branch trunk strides: 2 whenever the channel count changes.
    pub fn trunk_strides(&self) -> Vec<usize> {
        strides(self.pfem_out_channels(), &self.trunk_channels)
    }

    pub fn fusion_strides(&self) -> Vec<usize> {
        strides(self.branches * self.trunk_channels.last().unwrap(), &self.fused_channels)
    }

    pub fn downsamplings(&self) -> usize {
        self.trunk_strides().iter().chain(&self.fusion_strides()).filter(|&&s| s == 2).count()
    }

    pub fn branch_downsamplings(&self) -> usize {
        self.trunk_strides().iter().filter(|&&s| s == 2).count()
    }

    /// Spatial size after `n` stride-2 stages.
    pub fn reduced(&self, n: usize) -> (usize, usize) {
        let mut s = self.input_size;
        for _ in 0..n {
            s = (s.0.div_ceil(2), s.1.div_ceil(2));
        }
        s
    }

    pub fn fusion_map_size(&self) -> (usize, usize) {
        self.reduced(self.downsamplings())
    }

    pub fn branch_map_size(&self) -> (usize, usize) {
        self.reduced(self.branch_downsamplings())
    }

    /// Row shift granularity that commutes with every downsampling.
    pub fn shift_quantum(&self) -> usize {
        1 << self.downsamplings()
    }
}

fn strides(mut prev: usize, channels: &[usize]) -> Vec<usize> {
    channels
        .iter()
        .map(|&c| {
            let s = if c != prev { 2 } else { 1 };
            prev = c;
            s
        })
        .collect()
}
