use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the DEM reaches the UNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McaMode {
    /// SE fusion of encoder features at all three resolutions.
    Full,
    /// SE fusion at the half-resolution (16²) level only.
    Single16,
    /// No feature injection; the raw DEM is concatenated to the input.
    None,
}

impl McaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "single" | "single16" | "single_16" => Ok(Self::Single16),
            "none" | "non" => Ok(Self::None),
            _ => Err(Error::Unknown { kind: "MCA mode", name: s.into() }),
        }
    }

    /// Level indices (0 = full resolution) that receive SE fusion.
    pub fn injected_levels(self) -> &'static [usize] {
        match self {
            Self::Full => &[0, 1, 2],
            Self::Single16 => &[1],
            Self::None => &[],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Single16 => "single16",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizePreset {
    S,
    M,
    L,
}

impl SizePreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(Self::S),
            "M" => Ok(Self::M),
            "L" => Ok(Self::L),
            _ => Err(Error::Unknown { kind: "size preset", name: s.into() }),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::S => "S",
            Self::M => "M",
            Self::L => "L",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Input edge length; the three levels run at `r`, `r/2`, `r/4`.
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Resolutions (not indices) with pixel-wise self-attention.
    pub attention_levels: Vec<usize>,
    pub se_reduction: usize,
    pub mca_mode: McaMode,
    pub text_dim: usize,
    pub size_preset: SizePreset,
    pub heads: usize,
    pub norm_groups: usize,
    /// Channel counts of the DEM feature pyramid.
    pub dem_channels: [usize; 3],
    pub zero_init_output: bool,
}

impl UNetConfig {
    pub fn preset(size: SizePreset, mode: McaMode, text_dim: usize, dem_channels: [usize; 3]) -> Self {
        let (base, attn, heads) = match size {
            SizePreset::S => (8, vec![8], 1),
            SizePreset::M => (12, vec![8], 4),
            SizePreset::L => (16, vec![16, 8], 4),
        };
        Self {
            resolution: 32,
            base_channels: base,
            channel_mults: vec![1, 2, 4],
            attention_levels: attn,
            se_reduction: 4,
            mca_mode: mode,
            text_dim,
            size_preset: size,
            heads,
            norm_groups: 4,
            dem_channels,
            zero_init_output: true,
        }
    }

    pub fn level_channels(&self) -> [usize; 3] {
        [
            self.base_channels * self.channel_mults[0],
            self.base_channels * self.channel_mults[1],
            self.base_channels * self.channel_mults[2],
        ]
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.resolution >> level
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&self.level_resolution(level))
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn input_channels(&self) -> usize {
        if self.mca_mode == McaMode::None {
            4
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mults.len() != 3 {
            return bad(format!("channel_mults must have 3 entries, got {}", self.channel_mults.len()));
        }
        if self.resolution < 4 || self.resolution % 4 != 0 {
            return bad(format!("resolution {} must be a multiple of 4", self.resolution));
        }
        let levels: Vec<usize> = (0..3).map(|l| self.level_resolution(l)).collect();
        if let Some(a) = self.attention_levels.iter().find(|a| !levels.contains(a)) {
            return bad(format!("attention level {a} not among {levels:?}"));
        }
        if self.base_channels == 0 || self.text_dim == 0 || self.se_reduction == 0 {
            return bad("base_channels, text_dim and se_reduction must be positive".into());
        }
        for c in self.level_channels() {
            if c % self.norm_groups != 0 {
                return bad(format!("{c} channels not divisible by {} norm groups", self.norm_groups));
            }
            if c % self.heads != 0 {
                return bad(format!("{c} channels not divisible by {} heads", self.heads));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for s in [SizePreset::S, SizePreset::M, SizePreset::L] {
            for m in [McaMode::Full, McaMode::Single16, McaMode::None] {
                UNetConfig::preset(s, m, 32, [16, 32, 64]).validate().unwrap();
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = UNetConfig::preset(SizePreset::S, McaMode::Full, 32, [16, 32, 64]);
        c.attention_levels = vec![12];
        assert!(c.validate().is_err());
        let mut c = UNetConfig::preset(SizePreset::S, McaMode::Full, 32, [16, 32, 64]);
        c.channel_mults = vec![1, 2];
        assert!(c.validate().is_err());
        assert!(McaMode::parse("bogus").is_err());
        assert_eq!(McaMode::parse("Single").unwrap(), McaMode::Single16);
    }
}
