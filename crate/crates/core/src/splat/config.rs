use crate::error::{Error, Result};

/// Geometry of one Split-Attention unit.
///
/// `transform_width` is the output width of the 1×1 convolution that feeds the
/// grouped 3×3 convolution (input width of that 3×3). A standalone unit uses
/// `C·R`; network bottlenecks use `C`, matching the reference cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplatConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub radix: usize,
    pub cardinality: usize,
    pub transform_width: usize,
    pub attention_inner: usize,
    /// BN + ReLU between the two attention FCs (ReLU alone when false).
    pub attention_bn: bool,
    /// When false the unit only sums splits: no pooling statistics, no gate.
    pub attention: bool,
    pub stride: usize,
    /// Downsample before the 3×3 convolution instead of after the attention.
    pub fast: bool,
}

/// `max(32·K, C·R/4)` rounded up to a multiple of `K`.
pub fn default_attention_inner(channels: usize, radix: usize, cardinality: usize) -> usize {
    let k = cardinality.max(1);
    let w = (32 * k).max(channels * radix / 4);
    w.div_ceil(k) * k
}

impl SplatConfig {
    pub fn new(in_channels: usize, channels: usize, radix: usize, cardinality: usize) -> Self {
        SplatConfig {
            in_channels,
            channels,
            radix,
            cardinality,
            transform_width: channels * radix,
            attention_inner: default_attention_inner(channels, radix, cardinality),
            attention_bn: true,
            attention: true,
            stride: 1,
            fast: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_fast(mut self, fast: bool) -> Self {
        self.fast = fast;
        self
    }

    pub fn with_transform_width(mut self, width: usize) -> Self {
        self.transform_width = width;
        self
    }

    pub fn with_attention_inner(mut self, inner: usize) -> Self {
        self.attention_inner = inner;
        self
    }

    pub fn with_attention_bn(mut self, on: bool) -> Self {
        self.attention_bn = on;
        self
    }

    pub fn with_attention(mut self, on: bool) -> Self {
        self.attention = on;
        self
    }

    /// Total feature groups `G = K·R`.
    pub fn groups(&self) -> usize {
        self.radix * self.cardinality
    }

    /// Channels per cardinal group, `C/K`.
    pub fn group_width(&self) -> usize {
        self.channels / self.cardinality
    }

    /// Width of the split-transform output `U`.
    pub fn split_channels(&self) -> usize {
        self.channels * self.radix
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("splat: {m}")));
        if self.in_channels == 0 || self.channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.radix == 0 {
            return fail("radix must be at least 1".into());
        }
        if self.cardinality == 0 {
            return fail("cardinality must be at least 1".into());
        }
        if self.stride == 0 {
            return fail("stride must be at least 1".into());
        }
        if self.channels % self.cardinality != 0 {
            return fail(format!(
                "channels {} not divisible by cardinality {}",
                self.channels, self.cardinality
            ));
        }
        if self.transform_width == 0 || self.transform_width % self.groups() != 0 {
            return fail(format!(
                "transform_width {} not divisible by groups {}",
                self.transform_width,
                self.groups()
            ));
        }
        if self.attention && (self.attention_inner == 0 || self.attention_inner % self.cardinality != 0) {
            return fail(format!(
                "attention_inner {} not divisible by cardinality {}",
                self.attention_inner, self.cardinality
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_width_rule() {
        assert_eq!(default_attention_inner(64, 2, 1), 32);
        assert_eq!(default_attention_inner(512, 2, 1), 256);
        assert_eq!(default_attention_inner(8, 4, 4), 128);
        // 14·8 channels at radix 2: max(256, 56) = 256
        assert_eq!(default_attention_inner(112, 2, 8), 256);
        assert_eq!(default_attention_inner(100, 3, 7) % 7, 0);
    }

    #[test]
    fn validation_names_the_problem() {
        let e = SplatConfig::new(4, 6, 2, 4).validate().unwrap_err();
        assert!(e.to_string().contains("cardinality 4"), "{e}");
        let e = SplatConfig::new(4, 8, 2, 2)
            .with_transform_width(6)
            .validate()
            .unwrap_err();
        assert!(e.to_string().contains("transform_width"), "{e}");
        assert!(SplatConfig::new(4, 8, 0, 1).validate().is_err());
        assert!(SplatConfig::new(4, 32, 4, 4).validate().is_ok());
    }
}
