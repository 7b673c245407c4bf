//! Published 50-layer reference costs and matching against a configuration.

use std::fmt;

use super::cost::CostReport;
use crate::error::Result;
use crate::network::NetworkConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct KnownVariant {
    pub name: &'static str,
    pub config: NetworkConfig,
    pub params_m: f64,
    pub gmacs: f64,
    /// Relative tolerance on parameters.
    pub param_tol: f64,
    /// Relative tolerance on MACs.
    pub mac_tol: f64,
}

/// Reference rows at 224×224 with 1000 classes.
pub fn known_variants() -> Result<Vec<KnownVariant>> {
    Ok(vec![
        KnownVariant {
            name: "ResNet-50",
            config: NetworkConfig::resnet_classic(50)?,
            params_m: 25.5,
            gmacs: 4.14,
            param_tol: 0.01,
            mac_tol: 0.03,
        },
        KnownVariant {
            name: "ResNeXt-50 32x4d",
            config: NetworkConfig::resnet_classic(50)?.with_variant(0, 32, 4),
            params_m: 25.0,
            gmacs: 4.24,
            param_tol: 0.01,
            mac_tol: 0.03,
        },
        KnownVariant {
            name: "ResNetD-50",
            config: NetworkConfig::resnet_d(50)?,
            params_m: 25.6,
            gmacs: 4.34,
            param_tol: 0.01,
            mac_tol: 0.03,
        },
        KnownVariant {
            name: "ResNeSt-50-fast 2s8x14d",
            config: NetworkConfig::resnest(50)?.with_variant(2, 8, 14).with_fast(true),
            params_m: 27.5,
            gmacs: 4.34,
            param_tol: 0.02,
            mac_tol: 0.03,
        },
    ])
}

/// Fields that change the cost; regularisers do not.
fn structure(c: &NetworkConfig) -> impl PartialEq + '_ {
    (
        (
            &c.stage_blocks,
            c.stem_width,
            c.deep_stem,
            c.radix,
            c.cardinality,
            c.base_width,
        ),
        (c.base_planes, c.fast || c.radix == 0, c.avg_down, c.attention_bn),
        (c.num_classes, c.input_channels),
    )
}

pub fn match_known(cfg: &NetworkConfig) -> Result<Option<KnownVariant>> {
    Ok(known_variants()?
        .into_iter()
        .find(|k| structure(&k.config) == structure(cfg)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub name: &'static str,
    pub params_m: f64,
    pub expected_params_m: f64,
    pub gmacs: f64,
    pub expected_gmacs: f64,
    pub params_ok: bool,
    pub macs_ok: bool,
}

impl Comparison {
    pub fn matched(&self) -> bool {
        self.params_ok && self.macs_ok
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: params {:.2}M (table {:.1}M, {:+.2}%)  GMACs {:.3} (table {:.2}, {:+.2}%)  {}",
            self.name,
            self.params_m,
            self.expected_params_m,
            100.0 * (self.params_m / self.expected_params_m - 1.0),
            self.gmacs,
            self.expected_gmacs,
            100.0 * (self.gmacs / self.expected_gmacs - 1.0),
            if self.matched() { "MATCH" } else { "MISMATCH" }
        )
    }
}

/// Only meaningful for a 224×224 report.
pub fn compare(known: &KnownVariant, report: &CostReport) -> Comparison {
    let params_m = report.total_params() as f64 / 1e6;
    let gmacs = report.total_macs() as f64 / 1e9;
    Comparison {
        name: known.name,
        params_m,
        expected_params_m: known.params_m,
        gmacs,
        expected_gmacs: known.gmacs,
        params_ok: (params_m / known.params_m - 1.0).abs() <= known.param_tol,
        macs_ok: (gmacs / known.gmacs - 1.0).abs() <= known.mac_tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_themselves_and_regularisers_are_ignored() {
        for k in known_variants().unwrap() {
            let mut c = k.config.clone();
            c.dropout_p = 0.3;
            assert_eq!(match_known(&c).unwrap().unwrap().name, k.name);
        }
        let odd = NetworkConfig::resnest(50).unwrap().with_variant(2, 2, 40);
        assert!(match_known(&odd).unwrap().is_none());
    }
}
