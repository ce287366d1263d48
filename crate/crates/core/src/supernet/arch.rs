//! Architecture and configuration-space descriptions.

use crate::error::{Error, Result};

/// One conv/BN/ReLU block of the switchable classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockSpec {
    /// Output channels at width 1.0.
    pub base_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Static architecture: a stack of conv blocks, global average pooling and a
/// linear classifier head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub num_classes: usize,
}

impl ArchSpec {
    /// Default three-block classifier: 32 -> 64 -> 128 channels at width
    /// 1.0, strides 1, 2, 2, all 3x3 same-padded kernels.
    pub fn desk3(num_classes: usize) -> ArchSpec {
        ArchSpec {
            in_channels: 3,
            blocks: vec![
                ConvBlockSpec {
                    base_out: 32,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                ConvBlockSpec {
                    base_out: 64,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
                ConvBlockSpec {
                    base_out: 128,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            ],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("input channel count must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("architecture needs at least one conv block"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.base_out == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::invalid(format!(
                    "block {i}: channels, kernel and stride must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Output channels of the last block at width 1.0.
    pub fn last_base_out(&self) -> usize {
        self.blocks.last().map(|b| b.base_out).unwrap_or(0)
    }

    /// Input channels of block `i` at width 1.0. The image channels feeding
    /// block 0 are never width-scaled.
    pub fn base_in(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.blocks[i - 1].base_out
        }
    }
}

/// Channel count of a width-scaled layer: round to nearest, floor of one.
pub fn channels_at(base: usize, width: f64) -> usize {
    ((base as f64 * width).round() as usize).max(1)
}

/// One deployable configuration of the switchable network.
#[derive(Debug, Clone, Copy)]
pub struct SubnetConfig {
    pub width: f64,
    pub resolution: u32,
    pub bits: u32,
}

impl PartialEq for SubnetConfig {
    fn eq(&self, other: &Self) -> bool {
        self.width.to_bits() == other.width.to_bits()
            && self.resolution == other.resolution
            && self.bits == other.bits
    }
}

impl Eq for SubnetConfig {}

impl std::hash::Hash for SubnetConfig {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.width.to_bits().hash(state);
        self.resolution.hash(state);
        self.bits.hash(state);
    }
}

impl std::fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "w{:.2}-r{}-q{}", self.width, self.resolution, self.bits)
    }
}

/// The switchable dimensions: widths, resolutions and bit-widths, each listed
/// in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSpace {
    pub widths: Vec<f64>,
    pub resolutions: Vec<u32>,
    pub bits: Vec<u32>,
}

impl ConfigSpace {
    /// Desk-scale default grid.
    pub fn desk() -> ConfigSpace {
        ConfigSpace {
            widths: vec![1.0, 0.75, 0.5],
            resolutions: vec![32, 24, 16],
            bits: vec![8, 6, 4],
        }
    }

    /// Full-scale grid used by the published configuration tables.
    pub fn full_scale() -> ConfigSpace {
        ConfigSpace {
            widths: vec![1.00, 0.86, 0.73, 0.60],
            resolutions: vec![224, 192, 160, 128],
            bits: vec![8, 6, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.resolutions.is_empty() || self.bits.is_empty() {
            return Err(Error::invalid("configuration space axes must be non-empty"));
        }
        if self.widths[0] != 1.0 {
            return Err(Error::invalid(format!(
                "widths must start at 1.0, got {:?}",
                self.widths
            )));
        }
        for w in &self.widths {
            if !(*w > 0.0 && *w <= 1.0) {
                return Err(Error::invalid(format!("width {w} outside (0, 1]")));
            }
        }
        for pair in self.widths.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::invalid("widths must be strictly descending"));
            }
        }
        for pair in self.resolutions.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::invalid("resolutions must be strictly descending"));
            }
        }
        if self.resolutions.contains(&0) {
            return Err(Error::invalid("resolutions must be positive"));
        }
        for pair in self.bits.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::invalid("bit-widths must be strictly descending"));
            }
        }
        for &b in &self.bits {
            if !(2..=32).contains(&b) {
                return Err(Error::invalid(format!(
                    "bit-width {b} outside supported range [2, 32]"
                )));
            }
        }
        Ok(())
    }

    /// Smallest deployable configuration: minimum along every axis.
    pub fn smallest(&self) -> SubnetConfig {
        SubnetConfig {
            width: *self.widths.last().unwrap(),
            resolution: *self.resolutions.last().unwrap(),
            bits: *self.bits.last().unwrap(),
        }
    }

    /// The full network: maximum along every axis.
    pub fn largest(&self) -> SubnetConfig {
        SubnetConfig {
            width: self.widths[0],
            resolution: self.resolutions[0],
            bits: self.bits[0],
        }
    }

    pub fn contains(&self, c: &SubnetConfig) -> bool {
        self.widths.iter().any(|w| w.to_bits() == c.width.to_bits())
            && self.resolutions.contains(&c.resolution)
            && self.bits.contains(&c.bits)
    }

    /// Every configuration in the grid, in (width, resolution, bits)
    /// lexicographic order over the stored (descending) axes.
    pub fn configs(&self) -> Vec<SubnetConfig> {
        let mut out =
            Vec::with_capacity(self.widths.len() * self.resolutions.len() * self.bits.len());
        for &w in &self.widths {
            for &r in &self.resolutions {
                for &q in &self.bits {
                    out.push(SubnetConfig {
                        width: w,
                        resolution: r,
                        bits: q,
                    });
                }
            }
        }
        out
    }

    pub fn width_index(&self, width: f64) -> Result<usize> {
        self.widths
            .iter()
            .position(|w| w.to_bits() == width.to_bits())
            .ok_or_else(|| Error::invalid(format!("width {width} not in configuration space")))
    }

    pub fn bits_index(&self, bits: u32) -> Result<usize> {
        self.bits
            .iter()
            .position(|&b| b == bits)
            .ok_or_else(|| Error::invalid(format!("bit-width {bits} not in configuration space")))
    }

    pub fn resolution_index(&self, r: u32) -> Result<usize> {
        self.resolutions
            .iter()
            .position(|&x| x == r)
            .ok_or_else(|| Error::invalid(format!("resolution {r} not in configuration space")))
    }

    /// Validate that a configuration belongs to this space.
    pub fn check(&self, c: &SubnetConfig) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "configuration {c} not in the configuration space"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channels_rounding_rule() {
        assert_eq!(channels_at(64, 1.0), 64);
        assert_eq!(channels_at(64, 0.73), 47);
        assert_eq!(channels_at(64, 0.75), 48);
        assert_eq!(channels_at(1, 0.5), 1);
        assert_eq!(channels_at(3, 0.1), 1);
    }

    #[test]
    fn desk_space_is_valid_and_sized() {
        let s = ConfigSpace::desk();
        s.validate().unwrap();
        assert_eq!(s.configs().len(), 27);
        assert_eq!(
            s.smallest(),
            SubnetConfig {
                width: 0.5,
                resolution: 16,
                bits: 4
            }
        );
        assert_eq!(
            s.largest(),
            SubnetConfig {
                width: 1.0,
                resolution: 32,
                bits: 8
            }
        );
    }

    #[test]
    fn full_scale_space_has_48_configs() {
        let s = ConfigSpace::full_scale();
        s.validate().unwrap();
        assert_eq!(s.configs().len(), 48);
    }

    #[test]
    fn space_validation_rejects_bad_axes() {
        let mut s = ConfigSpace::desk();
        s.widths = vec![0.75, 0.5];
        assert!(s.validate().is_err(), "widths must include 1.0");
        let mut s = ConfigSpace::desk();
        s.widths = vec![1.0, 0.5, 0.75];
        assert!(s.validate().is_err(), "widths must descend");
        let mut s = ConfigSpace::desk();
        s.bits = vec![8, 8, 4];
        assert!(s.validate().is_err(), "duplicate bits rejected");
        let mut s = ConfigSpace::desk();
        s.bits = vec![33, 8];
        assert!(s.validate().is_err(), "bit range enforced");
        let mut s = ConfigSpace::desk();
        s.resolutions = vec![];
        assert!(s.validate().is_err(), "empty axis rejected");
    }

    #[test]
    fn desk_arch_shape() {
        let a = ArchSpec::desk3(4);
        a.validate().unwrap();
        assert_eq!(a.blocks.len(), 3);
        assert_eq!(a.base_in(0), 3);
        assert_eq!(a.base_in(1), 32);
        assert_eq!(a.base_in(2), 64);
        assert_eq!(a.last_base_out(), 128);
        assert!(ArchSpec::desk3(1).validate().is_err());
    }

    #[test]
    fn config_identity_uses_exact_width_bits() {
        let a = SubnetConfig {
            width: 0.75,
            resolution: 32,
            bits: 8,
        };
        let b = SubnetConfig {
            width: 0.75,
            resolution: 32,
            bits: 8,
        };
        assert_eq!(a, b);
        let c = SubnetConfig {
            width: 0.7500001,
            ..a
        };
        assert_ne!(a, c);
    }
}
