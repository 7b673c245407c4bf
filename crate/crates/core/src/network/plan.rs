//! Allocation-free structural description of a network, shared by the
//! builder and the cost model.

use super::config::{DropBlockConfig, NetworkConfig};
use crate::error::{Error, Result};
use crate::splat::SplatConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct StemSpec {
    pub in_channels: usize,
    pub width: usize,
    pub deep: bool,
}

impl StemSpec {
    pub fn out_channels(&self) -> usize {
        2 * self.width
    }
}

/// What sits between the residual input and the final 1×1 expansion.
#[derive(Debug, Clone, PartialEq)]
pub enum Interior {
    /// Split-Attention unit (its 1×1 conv is the block's reduction conv).
    Splat(SplatConfig),
    /// 1×1 reduce, then a 3×3 grouped conv carrying the stride.
    Residual { width: usize, groups: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// 2×2 average pool then stride-1 conv, instead of a strided conv.
    pub avg_down: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckSpec {
    pub path: String,
    pub in_channels: usize,
    pub planes: usize,
    pub stride: usize,
    pub group_width: usize,
    pub interior: Interior,
    pub shortcut: Option<ShortcutSpec>,
    pub dropblock: Option<DropBlockConfig>,
}

impl BottleneckSpec {
    pub fn out_channels(&self) -> usize {
        4 * self.planes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPlan {
    pub stem: StemSpec,
    pub blocks: Vec<BottleneckSpec>,
    pub features: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
}

impl NetworkConfig {
    pub fn plan(&self) -> Result<NetworkPlan> {
        self.validate()?;
        let stem = StemSpec {
            in_channels: self.input_channels,
            width: self.stem_width,
            deep: self.deep_stem,
        };
        let mut blocks = Vec::new();
        let mut in_channels = stem.out_channels();
        for (stage, &count) in self.stage_blocks.iter().enumerate() {
            let planes = self.stage_planes(stage);
            let width = self.group_width(planes);
            for b in 0..count {
                let path = format!("stage{}.block{b}", stage + 1);
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                let out = 4 * planes;
                let interior = if self.radix == 0 {
                    if width % self.cardinality != 0 {
                        return Err(Error::Config(format!(
                            "{path}.conv2: width {width} not divisible by cardinality {}",
                            self.cardinality
                        )));
                    }
                    Interior::Residual {
                        width,
                        groups: self.cardinality,
                    }
                } else {
                    let cfg = SplatConfig::new(in_channels, width, self.radix, self.cardinality)
                        .with_transform_width(width)
                        .with_stride(stride)
                        .with_fast(self.fast)
                        .with_attention_bn(self.attention_bn);
                    cfg.validate().map_err(|e| match e {
                        Error::Config(m) => Error::Config(format!("{path}.splat: {m}")),
                        other => other,
                    })?;
                    Interior::Splat(cfg)
                };
                let shortcut = (stride != 1 || in_channels != out).then_some(ShortcutSpec {
                    in_channels,
                    out_channels: out,
                    stride,
                    avg_down: self.avg_down,
                });
                let dropblock = (stage >= 2 && self.dropblock.drop_prob > 0.0).then_some(self.dropblock);
                blocks.push(BottleneckSpec {
                    path,
                    in_channels,
                    planes,
                    stride,
                    group_width: width,
                    interior,
                    shortcut,
                    dropblock,
                });
                in_channels = out;
            }
        }
        Ok(NetworkPlan {
            stem,
            blocks,
            features: in_channels,
            dropout_p: self.dropout_p,
            num_classes: self.num_classes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnest50_plan_shape() {
        let p = NetworkConfig::resnest(50).unwrap().plan().unwrap();
        assert_eq!(p.blocks.len(), 16);
        assert_eq!(p.features, 2048);
        assert_eq!(p.stem.out_channels(), 64);
        let b = &p.blocks[3];
        assert_eq!(b.path, "stage2.block0");
        assert_eq!((b.in_channels, b.planes, b.stride, b.group_width), (256, 128, 2, 128));
        assert!(b.shortcut.is_some());
        assert!(p.blocks[4].shortcut.is_none());
        // stage1 block0 changes width but keeps resolution
        assert_eq!(p.blocks[0].shortcut.as_ref().unwrap().stride, 1);
    }

    #[test]
    fn divisibility_errors_name_the_path() {
        let cfg = NetworkConfig::resnest(50).unwrap().with_variant(4, 3, 10);
        let e = cfg.plan().unwrap_err().to_string();
        assert!(e.contains("stage1.block0.splat"), "{e}");
    }
}
