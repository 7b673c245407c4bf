//! Static parameter and multiply-accumulate accounting.
//!
//! One FLOP is one multiply-accumulate. Convolutions and fully connected
//! layers go into the MAC total; normalisation and pooling work is kept in a
//! separate column and excluded from it.

use std::fmt;

use crate::error::{Error, Result};
use crate::network::{BottleneckSpec, Interior, NetworkPlan, ShortcutSpec, StemSpec};
use crate::ops::conv_out_len;
use crate::splat::SplatConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Dense,
    Norm,
    AvgPool,
    MaxPool,
    GlobalPool,
}

impl LayerKind {
    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Dense => "fc",
            LayerKind::Norm => "bn",
            LayerKind::AvgPool => "avgpool",
            LayerKind::MaxPool => "maxpool",
            LayerKind::GlobalPool => "gap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub path: String,
    pub kind: LayerKind,
    /// Per-sample output extents `[C, H, W]` (`H = W = 1` for vectors).
    pub out_shape: [usize; 3],
    pub params: u64,
    pub macs: u64,
    /// Normalisation and pooling work, not part of `macs`.
    pub other: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub config: String,
    pub input_hw: (usize, usize),
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_other(&self) -> u64 {
        self.rows.iter().map(|r| r.other).sum()
    }

    /// MACs of convolution rows only.
    pub fn conv_macs(&self) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.kind == LayerKind::Conv)
            .map(|r| r.macs)
            .sum()
    }

    /// Rows whose path starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.path.starts_with(prefix))
            .fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
    }

    /// `path<TAB>params<TAB>macs` per row, then a `total` line.
    pub fn machine_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{}\n", r.path, r.params, r.macs));
        }
        s.push_str(&format!("total\t{}\t{}\n", self.total_params(), self.total_macs()));
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "config: {}", self.config)?;
        writeln!(f, "input: {}x{}", self.input_hw.0, self.input_hw.1)?;
        let width = self.rows.iter().map(|r| r.path.len()).max().unwrap_or(4).max(5);
        writeln!(
            f,
            "{:<width$}  {:<7}  {:>14}  {:>10}  {:>14}  {:>12}",
            "layer", "kind", "output", "params", "macs", "other"
        )?;
        for r in &self.rows {
            let shape = format!("{}x{}x{}", r.out_shape[0], r.out_shape[1], r.out_shape[2]);
            writeln!(
                f,
                "{:<width$}  {:<7}  {:>14}  {:>10}  {:>14}  {:>12}",
                r.path,
                r.kind.label(),
                shape,
                r.params,
                r.macs,
                r.other
            )?;
        }
        writeln!(
            f,
            "total: params {} ({:.3}M)  macs {} ({:.3}G)  other {}",
            self.total_params(),
            self.total_params() as f64 / 1e6,
            self.total_macs(),
            self.total_macs() as f64 / 1e9,
            self.total_other()
        )
    }
}

/// MACs of one convolution: output positions · Cout · (Cin/g) · kh · kw.
pub fn conv_macs(cin: usize, cout: usize, kernel: usize, groups: usize, out_hw: (usize, usize)) -> u64 {
    (out_hw.0 * out_hw.1 * cout * (cin / groups) * kernel * kernel) as u64
}

/// Running shape cursor that appends rows as layers are described.
struct Walker {
    rows: Vec<CostRow>,
}

impl Walker {
    fn conv(
        &mut self,
        path: String,
        input: [usize; 3],
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<[usize; 3]> {
        let [cin, h, w] = input;
        let pad = kernel / 2;
        let oh = conv_out_len(h, kernel, stride, pad).ok_or_else(|| too_small(&path, h))?;
        let ow = conv_out_len(w, kernel, stride, pad).ok_or_else(|| too_small(&path, w))?;
        self.rows.push(CostRow {
            params: (cout * (cin / groups) * kernel * kernel) as u64,
            macs: conv_macs(cin, cout, kernel, groups, (oh, ow)),
            other: 0,
            kind: LayerKind::Conv,
            out_shape: [cout, oh, ow],
            path,
        });
        Ok([cout, oh, ow])
    }

    fn bn(&mut self, path: String, shape: [usize; 3]) -> [usize; 3] {
        self.rows.push(CostRow {
            params: 2 * shape[0] as u64,
            macs: 0,
            other: (shape[0] * shape[1] * shape[2]) as u64,
            kind: LayerKind::Norm,
            out_shape: shape,
            path,
        });
        shape
    }

    fn pool(
        &mut self,
        path: String,
        kind: LayerKind,
        input: [usize; 3],
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        let oh = conv_out_len(h, kernel, stride, pad).ok_or_else(|| too_small(&path, h))?;
        let ow = conv_out_len(w, kernel, stride, pad).ok_or_else(|| too_small(&path, w))?;
        self.rows.push(CostRow {
            params: 0,
            macs: 0,
            other: (c * oh * ow * kernel * kernel) as u64,
            kind,
            out_shape: [c, oh, ow],
            path,
        });
        Ok([c, oh, ow])
    }

    fn dense(&mut self, path: String, fin: usize, fout: usize, groups: usize, bias: bool) {
        let weights = (fout * (fin / groups)) as u64;
        self.rows.push(CostRow {
            params: weights + if bias { fout as u64 } else { 0 },
            macs: weights,
            other: 0,
            kind: LayerKind::Dense,
            out_shape: [fout, 1, 1],
            path,
        });
    }

    fn global_pool(&mut self, path: String, input: [usize; 3]) -> [usize; 3] {
        self.rows.push(CostRow {
            params: 0,
            macs: 0,
            other: (input[0] * input[1] * input[2]) as u64,
            kind: LayerKind::GlobalPool,
            out_shape: [input[0], 1, 1],
            path,
        });
        [input[0], 1, 1]
    }

    fn stem(&mut self, spec: &StemSpec, input: [usize; 3]) -> Result<[usize; 3]> {
        let w = spec.width;
        let mut s = input;
        if spec.deep {
            for (i, (cout, stride)) in [(w, 2), (w, 1), (2 * w, 1)].into_iter().enumerate() {
                s = self.conv(format!("stem.conv{}", i + 1), s, cout, 3, stride, 1)?;
                s = self.bn(format!("stem.bn{}", i + 1), s);
            }
        } else {
            s = self.conv("stem.conv1".into(), s, 2 * w, 7, 2, 1)?;
            s = self.bn("stem.bn1".into(), s);
        }
        self.pool("stem.maxpool".into(), LayerKind::MaxPool, s, 3, 2, 1)
    }

    fn splat(&mut self, name: &str, cfg: &SplatConfig, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut s = self.conv(format!("{name}.conv1"), input, cfg.transform_width, 1, 1, 1)?;
        s = self.bn(format!("{name}.bn1"), s);
        let pool = |w: &mut Walker, s| w.pool(format!("{name}.avgpool"), LayerKind::AvgPool, s, 3, cfg.stride, 1);
        if cfg.stride > 1 && cfg.fast {
            s = pool(self, s)?;
        }
        s = self.conv(format!("{name}.conv2"), s, cfg.split_channels(), 3, 1, cfg.groups())?;
        s = self.bn(format!("{name}.bn2"), s);
        let fused = [cfg.channels, s[1], s[2]];
        if cfg.attention {
            self.global_pool(format!("{name}.gap"), fused);
            let k = cfg.cardinality;
            self.dense(
                format!("{name}.fc1"),
                cfg.channels,
                cfg.attention_inner,
                k,
                !cfg.attention_bn,
            );
            if cfg.attention_bn {
                self.bn(format!("{name}.bn_fc"), [cfg.attention_inner, 1, 1]);
            }
            self.dense(
                format!("{name}.fc2"),
                cfg.attention_inner,
                cfg.split_channels(),
                k,
                true,
            );
        }
        let mut v = fused;
        if cfg.stride > 1 && !cfg.fast {
            v = pool(self, v)?;
        }
        Ok(v)
    }

    fn shortcut(&mut self, path: &str, spec: &ShortcutSpec, input: [usize; 3]) -> Result<[usize; 3]> {
        let name = format!("{path}.downsample");
        let mut s = input;
        let stride = if spec.avg_down && spec.stride > 1 {
            s = self.pool(
                format!("{name}.avgpool"),
                LayerKind::AvgPool,
                s,
                spec.stride,
                spec.stride,
                0,
            )?;
            1
        } else {
            spec.stride
        };
        s = self.conv(format!("{name}.conv"), s, spec.out_channels, 1, stride, 1)?;
        Ok(self.bn(format!("{name}.bn"), s))
    }

    fn bottleneck(&mut self, spec: &BottleneckSpec, input: [usize; 3]) -> Result<[usize; 3]> {
        let path = &spec.path;
        let mut s = match &spec.interior {
            Interior::Splat(cfg) => self.splat(&format!("{path}.splat"), cfg, input)?,
            Interior::Residual { width, groups } => {
                let s = self.conv(format!("{path}.conv1"), input, *width, 1, 1, 1)?;
                let s = self.bn(format!("{path}.bn1"), s);
                let s = self.conv(format!("{path}.conv2"), s, *width, 3, spec.stride, *groups)?;
                self.bn(format!("{path}.bn2"), s)
            }
        };
        s = self.conv(format!("{path}.conv3"), s, spec.out_channels(), 1, 1, 1)?;
        s = self.bn(format!("{path}.bn3"), s);
        let short = match &spec.shortcut {
            Some(sc) => self.shortcut(path, sc, input)?,
            None => input,
        };
        if short != s {
            return Err(Error::Config(format!(
                "{path}: residual {s:?} does not match shortcut {short:?}"
            )));
        }
        Ok(s)
    }
}

fn too_small(path: &str, len: usize) -> Error {
    Error::Config(format!("{path}: spatial extent {len} too small for the window"))
}

/// Layer-by-layer cost of `plan` for one `h`×`w` input image.
pub fn count_flops(plan: &NetworkPlan, input_hw: (usize, usize)) -> Result<CostReport> {
    let mut w = Walker { rows: Vec::new() };
    let mut s = w.stem(&plan.stem, [plan.stem.in_channels, input_hw.0, input_hw.1])?;
    for b in &plan.blocks {
        s = w.bottleneck(b, s)?;
    }
    w.global_pool("gap".into(), s);
    w.dense("fc".into(), plan.features, plan.num_classes, 1, true);
    Ok(CostReport {
        config: describe(plan),
        input_hw,
        rows: w.rows,
    })
}

/// Same walk at the conventional 224×224 size; parameter totals do not
/// depend on the input size.
pub fn count_params(plan: &NetworkPlan) -> Result<CostReport> {
    count_flops(plan, (224, 224))
}

/// Cost of a single bottleneck at the given input extents.
pub fn block_cost(spec: &BottleneckSpec, input_hw: (usize, usize)) -> Result<CostReport> {
    let mut w = Walker { rows: Vec::new() };
    w.bottleneck(spec, [spec.in_channels, input_hw.0, input_hw.1])?;
    Ok(CostReport {
        config: spec.path.clone(),
        input_hw,
        rows: w.rows,
    })
}

fn describe(plan: &NetworkPlan) -> String {
    let interior = match plan.blocks.first().map(|b| &b.interior) {
        Some(Interior::Splat(c)) => format!(
            "{}s{}x radix-major{}",
            c.radix,
            c.cardinality,
            if c.fast { " fast" } else { "" }
        ),
        Some(Interior::Residual { groups, .. }) => format!("residual {groups}x"),
        None => "no blocks".into(),
    };
    format!(
        "blocks {} stem {}{} {} classes {}",
        plan.blocks.len(),
        plan.stem.width,
        if plan.stem.deep { " deep" } else { "" },
        interior,
        plan.num_classes
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParityReport {
    pub splat_params: u64,
    pub residual_params: u64,
    pub splat_macs: u64,
    pub residual_macs: u64,
}

impl ParityReport {
    pub fn param_ratio(&self) -> f64 {
        self.splat_params as f64 / self.residual_params as f64
    }

    pub fn mac_ratio(&self) -> f64 {
        self.splat_macs as f64 / self.residual_macs as f64
    }
}

impl fmt::Display for ParityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "params {} / {} = {:.4}, macs {} / {} = {:.4}",
            self.splat_params,
            self.residual_params,
            self.param_ratio(),
            self.splat_macs,
            self.residual_macs,
            self.mac_ratio()
        )
    }
}

/// Identity-shortcut bottleneck at `planes` with the given interior.
pub fn parity_block(in_channels: usize, planes: usize, interior: Interior) -> BottleneckSpec {
    let width = match &interior {
        Interior::Splat(c) => c.channels,
        Interior::Residual { width, .. } => *width,
    };
    BottleneckSpec {
        path: "block".into(),
        in_channels,
        planes,
        stride: 1,
        group_width: width,
        interior,
        shortcut: (in_channels != 4 * planes).then_some(ShortcutSpec {
            in_channels,
            out_channels: 4 * planes,
            stride: 1,
            avg_down: false,
        }),
        dropblock: None,
    }
}

/// Splat bottleneck cost over a standard bottleneck of the same width and
/// cardinality (`cfg_splat.channels`, `cfg_splat.cardinality`).
pub fn block_cost_parity(cfg_splat: &SplatConfig, planes: usize, input_hw: (usize, usize)) -> Result<ParityReport> {
    cfg_splat.validate()?;
    let splat = parity_block(cfg_splat.in_channels, planes, Interior::Splat(*cfg_splat));
    let residual = parity_block(
        cfg_splat.in_channels,
        planes,
        Interior::Residual {
            width: cfg_splat.channels,
            groups: cfg_splat.cardinality,
        },
    );
    let a = block_cost(&splat, input_hw)?;
    let b = block_cost(&residual, input_hw)?;
    Ok(ParityReport {
        splat_params: a.total_params(),
        residual_params: b.total_params(),
        splat_macs: a.total_macs(),
        residual_macs: b.total_macs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Network, NetworkConfig};
    use crate::nn::Module;
    use crate::rng::RngState;

    #[test]
    fn pointwise_conv_params() {
        let mut w = Walker { rows: Vec::new() };
        w.conv("c".into(), [4, 5, 5], 8, 1, 1, 1).unwrap();
        assert_eq!(w.rows[0].params, 32);
        assert_eq!(w.rows[0].macs, 32 * 25);
    }

    #[test]
    fn three_by_three_at_56() {
        assert_eq!(conv_macs(64, 64, 3, 1, (56, 56)), 115_605_504);
    }

    #[test]
    fn matches_built_network_for_every_micro_variant() {
        for r in [0, 1, 2] {
            let cfg = NetworkConfig::micro(r);
            let net = Network::<f64>::new(&cfg, &mut RngState::new(1)).unwrap();
            let report = count_params(&net.plan).unwrap();
            assert_eq!(report.total_params(), net.param_count() as u64, "radix {r}");
            let mut per_name = std::collections::BTreeMap::new();
            net.visit_params(&mut |p| {
                let layer = p.name.rsplit_once('.').unwrap().0.to_string();
                *per_name.entry(layer).or_insert(0u64) += p.numel() as u64;
            });
            for row in report.rows.iter().filter(|r| r.params > 0) {
                assert_eq!(per_name.get(&row.path), Some(&row.params), "{}", row.path);
            }
        }
    }

    #[test]
    fn totals_are_row_sums_and_conv_macs_scale_with_area() {
        let plan = NetworkConfig::resnest(50).unwrap().plan().unwrap();
        let small = count_flops(&plan, (64, 64)).unwrap();
        let big = count_flops(&plan, (128, 128)).unwrap();
        assert_eq!(small.total_params(), big.total_params());
        assert_eq!(4 * small.conv_macs(), big.conv_macs());
        let text = small.machine_lines();
        let last = text.lines().last().unwrap();
        assert_eq!(last, format!("total\t{}\t{}", small.total_params(), small.total_macs()));
    }

    #[test]
    fn disabled_attention_at_radix_one_is_exact_parity() {
        let cfg = SplatConfig::new(256, 64, 1, 1)
            .with_transform_width(64)
            .with_attention(false);
        let p = block_cost_parity(&cfg, 64, (56, 56)).unwrap();
        assert_eq!(p.param_ratio(), 1.0);
        assert_eq!(p.mac_ratio(), 1.0);
    }

    #[test]
    fn doubling_width_doubles_grouped_conv_macs() {
        let a = NetworkConfig::resnest(50)
            .unwrap()
            .with_variant(2, 1, 32)
            .plan()
            .unwrap();
        let b = NetworkConfig::resnest(50)
            .unwrap()
            .with_variant(2, 1, 64)
            .plan()
            .unwrap();
        let conv2 = |p: &NetworkPlan| -> u64 {
            count_flops(p, (224, 224))
                .unwrap()
                .rows
                .iter()
                .filter(|r| r.path.ends_with("splat.conv2"))
                .map(|r| r.macs)
                .sum()
        };
        // Fixed group count: doubling the width doubles both fan-in and fan-out.
        assert_eq!(conv2(&b), 4 * conv2(&a));
        // Doubling the cardinality doubles the width and the group count.
        let c = NetworkConfig::resnest(50)
            .unwrap()
            .with_variant(2, 2, 32)
            .plan()
            .unwrap();
        assert_eq!(conv2(&c), 2 * conv2(&a));
    }
}
