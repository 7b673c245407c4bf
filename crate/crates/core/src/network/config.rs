use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One `key = value` line of a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses the plain-text config grammar: one `key = value` per line, `#`
/// starts a comment, blank lines ignored, keys may not repeat.
pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut out: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected key = value, got {body:?}"),
        })?;
        let key = k.trim().to_string();
        let value = v.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty key".into(),
            });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Parse {
                line,
                msg: format!("key {key} already set on line {}", prev.line),
            });
        }
        out.push(KvEntry { line, key, value });
    }
    Ok(out)
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

/// Stage block counts of the standard depths.
pub fn stage_blocks_for_depth(depth: usize) -> Option<[usize; 4]> {
    match depth {
        50 => Some([3, 4, 6, 3]),
        101 => Some([3, 4, 23, 3]),
        200 => Some([3, 24, 36, 3]),
        269 => Some([3, 30, 48, 8]),
        _ => None,
    }
}

/// Depth implied by a stage layout: three layers per bottleneck, the stem
/// counted as one, and the classifier.
pub fn depth_of(stage_blocks: &[usize; 4]) -> usize {
    3 * stage_blocks.iter().sum::<usize>() + 2
}

/// Parses `RsKxDd` (e.g. `2s1x64d`) into `(radix, cardinality, base_width)`.
pub fn parse_variant(s: &str) -> Result<(usize, usize, usize)> {
    let bad = || Error::Config(format!("variant {s:?} is not of the form <R>s<K>x<D>d"));
    let rest = s.trim().strip_suffix('d').ok_or_else(bad)?;
    let (r, rest) = rest.split_once('s').ok_or_else(bad)?;
    let (k, d) = rest.split_once('x').ok_or_else(bad)?;
    let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
    Ok((num(r)?, num(k)?, num(d)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropBlockConfig {
    pub block_size: usize,
    pub drop_prob: f64,
}

impl Default for DropBlockConfig {
    fn default() -> Self {
        DropBlockConfig {
            block_size: 3,
            drop_prob: 0.0,
        }
    }
}

/// Full network hyper-parameters. Radix 0 selects the plain ResNet-D
/// bottleneck interior.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub depth: usize,
    pub stage_blocks: [usize; 4],
    pub stem_width: usize,
    /// Three 3×3 convolutions instead of one 7×7.
    pub deep_stem: bool,
    pub radix: usize,
    pub cardinality: usize,
    pub base_width: usize,
    /// Width unit of the first stage; later stages double it.
    pub base_planes: usize,
    pub fast: bool,
    pub avg_down: bool,
    pub attention_bn: bool,
    pub dropout_p: f64,
    pub dropblock: DropBlockConfig,
    pub num_classes: usize,
    pub input_channels: usize,
}

/// Smallest spatial input the stride chain accepts.
pub const MIN_INPUT: usize = 32;

pub const NETWORK_KEYS: &[&str] = &[
    "depth",
    "variant",
    "radix",
    "cardinality",
    "base_width",
    "fast",
    "avg_down",
    "deep_stem",
    "stem_width",
    "stage_blocks",
    "base_planes",
    "attention_bn",
    "dropout",
    "dropblock_prob",
    "dropblock_size",
    "classes",
    "input_channels",
];

impl NetworkConfig {
    /// ResNeSt (2s1x64d) at a standard depth.
    pub fn resnest(depth: usize) -> Result<Self> {
        let stage_blocks = stage_blocks_for_depth(depth)
            .ok_or_else(|| Error::Config(format!("unknown depth {depth} (known: 50, 101, 200, 269)")))?;
        Ok(NetworkConfig {
            depth,
            stage_blocks,
            stem_width: if depth == 50 { 32 } else { 64 },
            deep_stem: true,
            radix: 2,
            cardinality: 1,
            base_width: 64,
            base_planes: 64,
            fast: false,
            avg_down: true,
            attention_bn: true,
            dropout_p: if depth > 200 { 0.2 } else { 0.0 },
            dropblock: DropBlockConfig::default(),
            num_classes: 1000,
            input_channels: 3,
        })
    }

    /// ResNet-D: deep stem and average-pooled shortcut, plain bottlenecks.
    pub fn resnet_d(depth: usize) -> Result<Self> {
        Ok(NetworkConfig {
            radix: 0,
            ..Self::resnest(depth)?
        })
    }

    /// The original ResNet with a 7×7 stem, strided 1×1 shortcuts and the
    /// stride on the 3×3 convolution.
    pub fn resnet_classic(depth: usize) -> Result<Self> {
        Ok(NetworkConfig {
            radix: 0,
            deep_stem: false,
            avg_down: false,
            stem_width: 32,
            ..Self::resnest(depth)?
        })
    }

    /// Four single-block stages with width unit 16 and two classes.
    pub fn micro(radix: usize) -> Self {
        NetworkConfig {
            depth: depth_of(&[1, 1, 1, 1]),
            stage_blocks: [1, 1, 1, 1],
            stem_width: 8,
            deep_stem: true,
            radix,
            cardinality: 1,
            base_width: 64,
            base_planes: 16,
            fast: true,
            avg_down: true,
            attention_bn: true,
            dropout_p: 0.0,
            dropblock: DropBlockConfig::default(),
            num_classes: 2,
            input_channels: 3,
        }
    }

    pub fn with_variant(mut self, radix: usize, cardinality: usize, base_width: usize) -> Self {
        self.radix = radix;
        self.cardinality = cardinality;
        self.base_width = base_width;
        self
    }

    pub fn with_fast(mut self, fast: bool) -> Self {
        self.fast = fast;
        self
    }

    /// Bottleneck interior width of a stage with the given planes.
    pub fn group_width(&self, planes: usize) -> usize {
        planes * self.base_width / 64 * self.cardinality
    }

    pub fn stage_planes(&self, stage: usize) -> usize {
        self.base_planes << stage
    }

    pub fn stem_out(&self) -> usize {
        2 * self.stem_width
    }

    pub fn features(&self) -> usize {
        4 * self.stage_planes(3)
    }

    /// `RsKxDd` name.
    pub fn variant_name(&self) -> String {
        format!("{}s{}x{}d", self.radix, self.cardinality, self.base_width)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stage_blocks.contains(&0) {
            return fail(format!("stage_blocks {:?} must all be positive", self.stage_blocks));
        }
        if self.depth != depth_of(&self.stage_blocks) {
            return fail(format!(
                "depth {} inconsistent with stage_blocks {:?} (3·{} + 2 = {})",
                self.depth,
                self.stage_blocks,
                self.stage_blocks.iter().sum::<usize>(),
                depth_of(&self.stage_blocks)
            ));
        }
        for (name, v) in [
            ("stem_width", self.stem_width),
            ("cardinality", self.cardinality),
            ("base_width", self.base_width),
            ("base_planes", self.base_planes),
            ("classes", self.num_classes),
            ("input_channels", self.input_channels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.group_width(self.base_planes) == 0 {
            return fail(format!(
                "base_width {} too small: planes {} give zero channels per group",
                self.base_width, self.base_planes
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout_p));
        }
        if !(0.0..1.0).contains(&self.dropblock.drop_prob) {
            return fail(format!(
                "dropblock_prob {} must lie in [0, 1)",
                self.dropblock.drop_prob
            ));
        }
        if self.dropblock.block_size % 2 == 0 {
            return fail(format!("dropblock_size {} must be odd", self.dropblock.block_size));
        }
        Ok(())
    }

    /// Applies one key. Returns `Ok(false)` for keys this config does not own.
    /// `depth` is not handled here; see [`NetworkConfig::from_entries`].
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "variant" => {
                let (r, k, d) = parse_variant(value)?;
                self.radix = r;
                self.cardinality = k;
                self.base_width = d;
            }
            "radix" => self.radix = parse_value(key, value)?,
            "cardinality" => self.cardinality = parse_value(key, value)?,
            "base_width" => self.base_width = parse_value(key, value)?,
            "fast" => self.fast = parse_bool(key, value)?,
            "avg_down" => self.avg_down = parse_bool(key, value)?,
            "deep_stem" => self.deep_stem = parse_bool(key, value)?,
            "stem_width" => self.stem_width = parse_value(key, value)?,
            "base_planes" => self.base_planes = parse_value(key, value)?,
            "attention_bn" => self.attention_bn = parse_bool(key, value)?,
            "dropout" => self.dropout_p = parse_value(key, value)?,
            "dropblock_prob" => self.dropblock.drop_prob = parse_value(key, value)?,
            "dropblock_size" => self.dropblock.block_size = parse_value(key, value)?,
            "classes" => self.num_classes = parse_value(key, value)?,
            "input_channels" => self.input_channels = parse_value(key, value)?,
            "stage_blocks" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse_value(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.stage_blocks = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("stage_blocks needs four counts, got {value:?}")))?;
                self.depth = depth_of(&self.stage_blocks);
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds a config from `key = value` entries: `depth` (default 50)
    /// selects the ResNeSt defaults, then the remaining keys override them in
    /// file order. Keys outside `extra_keys` and [`NETWORK_KEYS`] are errors.
    pub fn from_entries(entries: &[KvEntry], extra_keys: &[&str]) -> Result<Self> {
        let depth = match entries.iter().find(|e| e.key == "depth") {
            Some(e) => parse_value(&e.key, &e.value)?,
            None => 50,
        };
        let mut cfg = Self::resnest(depth)?;
        for e in entries {
            if e.key == "depth" {
                continue;
            }
            if !cfg.apply(&e.key, &e.value)? && !extra_keys.contains(&e.key.as_str()) {
                return Err(Error::Config(format!("unknown key {:?} on line {}", e.key, e.line)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_entries(&parse_kv(text)?, &[])
    }

    /// `key = value` lines that reproduce this config through [`Self::from_kv`].
    pub fn to_kv(&self) -> String {
        let b = &self.stage_blocks;
        format!(
            "stage_blocks = {},{},{},{}\nradix = {}\ncardinality = {}\nbase_width = {}\nfast = {}\n\
             avg_down = {}\ndeep_stem = {}\nstem_width = {}\nbase_planes = {}\nattention_bn = {}\n\
             dropout = {}\ndropblock_prob = {}\ndropblock_size = {}\nclasses = {}\ninput_channels = {}\n",
            b[0],
            b[1],
            b[2],
            b[3],
            self.radix,
            self.cardinality,
            self.base_width,
            self.fast,
            self.avg_down,
            self.deep_stem,
            self.stem_width,
            self.base_planes,
            self.attention_bn,
            self.dropout_p,
            self.dropblock.drop_prob,
            self.dropblock.block_size,
            self.num_classes,
            self.input_channels
        )
    }
}

impl fmt::Display for NetworkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "depth {} {} stages {:?} stem {}{} {}{}",
            self.depth,
            self.variant_name(),
            self.stage_blocks,
            if self.deep_stem { "deep " } else { "7x7 " },
            self.stem_width,
            if self.fast { "fast" } else { "slow" },
            if self.avg_down { " avg_down" } else { "" },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_parse() {
        assert_eq!(parse_variant("2s1x64d").unwrap(), (2, 1, 64));
        assert_eq!(parse_variant("2s8x14d").unwrap(), (2, 8, 14));
        assert_eq!(parse_variant("0s1x64d").unwrap(), (0, 1, 64));
        assert!(parse_variant("2x1s64d").is_err());
        assert!(parse_variant("2s1x64").is_err());
    }

    #[test]
    fn depth_identity_holds_for_known_layouts() {
        for d in [50, 101, 200, 269] {
            assert_eq!(depth_of(&stage_blocks_for_depth(d).unwrap()), d);
        }
    }

    #[test]
    fn kv_roundtrip_and_errors() {
        let cfg = NetworkConfig::from_kv("# test\ndepth = 101\nvariant = 2s8x14d\nfast = true\n").unwrap();
        assert_eq!(cfg.stage_blocks, [3, 4, 23, 3]);
        assert_eq!((cfg.radix, cfg.cardinality, cfg.base_width), (2, 8, 14));
        assert_eq!(cfg.stem_width, 64);
        assert_eq!(NetworkConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);

        let e = NetworkConfig::from_kv("depht = 50").unwrap_err();
        assert!(e.to_string().contains("depht"), "{e}");
        assert!(matches!(parse_kv("a = 1\na = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_kv("novalue"), Err(Error::Parse { line: 1, .. })));
        assert!(NetworkConfig::from_kv("depth = 77").is_err());
        assert!(NetworkConfig::from_kv("fast = maybe").is_err());
    }

    #[test]
    fn deep_variants_get_dropout() {
        assert_eq!(NetworkConfig::resnest(269).unwrap().dropout_p, 0.2);
        assert_eq!(NetworkConfig::resnest(200).unwrap().dropout_p, 0.0);
    }
}
