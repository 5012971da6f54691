use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a domain adapter acts inside the update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    /// On the MLP output, before the fire-masked residual add.
    #[default]
    Update,
    /// On the full state after the residual add.
    PostState,
}

/// Shape of the multi-level NCA backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub channels: usize,
    pub hidden: usize,
    pub levels: usize,
    /// Perception kernel side per level, coarsest first.
    pub kernels: Vec<usize>,
    /// Rollout length per level, coarsest first.
    pub steps: Vec<usize>,
    /// Resolution ratio between consecutive levels.
    pub coarse_factor: usize,
    pub fire_rate: f64,
    pub spatial_rank: usize,
    /// Bottleneck width of the domain adapters.
    #[serde(default = "default_adapter_width")]
    pub adapter_width: usize,
    #[serde(default)]
    pub adapter_placement: AdapterPlacement,
}

fn default_adapter_width() -> usize {
    6
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::default_2d()
    }
}

impl ArchConfig {
    /// Two planar levels: 7×7 perception on the coarse grid, 3×3 on the fine
    /// one.
    pub fn default_2d() -> Self {
        Self {
            channels: 16,
            hidden: 68,
            levels: 2,
            kernels: vec![7, 3],
            steps: vec![10, 10],
            coarse_factor: 4,
            fire_rate: 0.5,
            spatial_rank: 2,
            adapter_width: default_adapter_width(),
            adapter_placement: AdapterPlacement::Update,
        }
    }

    /// The volumetric variant; same widths with cubic kernels.
    pub fn default_3d() -> Self {
        Self {
            spatial_rank: 3,
            ..Self::default_2d()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.levels == 0 {
            return bad("at least one level is required".into());
        }
        if self.kernels.len() != self.levels || self.steps.len() != self.levels {
            return bad(format!(
                "{} levels but {} kernel sizes and {} step counts",
                self.levels,
                self.kernels.len(),
                self.steps.len()
            ));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return bad(format!("kernel size {k} is not odd"));
        }
        if self.steps.contains(&0) {
            return bad("every level needs at least one step".into());
        }
        if self.channels < 2 || self.hidden == 0 || self.adapter_width == 0 {
            return bad(format!(
                "need channels >= 2, hidden >= 1, adapter width >= 1 (got {}, {}, {})",
                self.channels, self.hidden, self.adapter_width
            ));
        }
        if self.coarse_factor == 0 {
            return bad("coarse factor must be >= 1".into());
        }
        if !(self.fire_rate > 0.0 && self.fire_rate <= 1.0) {
            return bad(format!("fire rate {} outside (0, 1]", self.fire_rate));
        }
        if !(1..=3).contains(&self.spatial_rank) {
            return bad(format!("spatial rank {} not in 1..=3", self.spatial_rank));
        }
        Ok(())
    }

    /// Kernel taps `k^d` at `level`.
    pub fn taps(&self, level: usize) -> usize {
        self.kernels[level].pow(self.spatial_rank as u32)
    }

    /// Down-sampling factor of `level` relative to the input image.
    pub fn level_scale(&self, level: usize) -> usize {
        self.coarse_factor.pow((self.levels - 1 - level) as u32)
    }

    /// Perception parameters (depthwise kernel and bias) of `level`.
    pub fn perception_params(&self, level: usize) -> usize {
        self.channels * (self.taps(level) + 1)
    }

    /// Update-MLP parameters of one level: `2C·H + H·C`.
    pub fn mlp_params(&self) -> usize {
        3 * self.channels * self.hidden
    }

    pub fn level_params(&self, level: usize) -> usize {
        self.perception_params(level) + self.mlp_params()
    }

    pub fn backbone_params(&self) -> usize {
        (0..self.levels).map(|l| self.level_params(l)).sum()
    }

    /// Adapter parameters of one domain across all levels.
    pub fn adapter_params(&self) -> usize {
        self.levels * 2 * self.channels * self.adapter_width
    }

    /// Perceptive radius of `steps` updates at `level`, in that level's cells.
    pub fn perceptive_range(&self, level: usize, steps: usize) -> usize {
        steps * (self.kernels[level] - 1) / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volumetric_counts() {
        let a = ArchConfig::default_3d();
        assert_eq!(a.level_params(0), 8_768);
        assert_eq!(a.level_params(1), 3_712);
        assert_eq!(a.backbone_params(), 12_480);
        assert_eq!(a.perception_params(0) + a.perception_params(1), 5_952);
        assert_eq!(a.adapter_params(), 384);
    }

    #[test]
    fn planar_counts() {
        let a = ArchConfig::default_2d();
        assert_eq!(a.level_params(0), 16 * 50 + 3_264);
        assert_eq!(a.level_params(1), 16 * 10 + 3_264);
        assert_eq!(a.backbone_params(), 7_488);
    }

    #[test]
    fn scales_coarsest_first() {
        let a = ArchConfig {
            levels: 3,
            kernels: vec![3, 3, 3],
            steps: vec![1, 1, 1],
            ..ArchConfig::default_2d()
        };
        assert_eq!((a.level_scale(0), a.level_scale(1), a.level_scale(2)), (16, 4, 1));
    }

    #[test]
    fn validation() {
        assert!(ArchConfig::default_2d().validate().is_ok());
        for bad in [
            ArchConfig { kernels: vec![4, 3], ..ArchConfig::default_2d() },
            ArchConfig { fire_rate: 0.0, ..ArchConfig::default_2d() },
            ArchConfig { levels: 0, kernels: vec![], steps: vec![], ..ArchConfig::default_2d() },
            ArchConfig { steps: vec![10], ..ArchConfig::default_2d() },
            ArchConfig { spatial_rank: 4, ..ArchConfig::default_2d() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let a = ArchConfig::default_3d();
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ArchConfig>(&s).unwrap(), a);
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<ArchConfig>(v).is_err());
    }
}
