//! Parameter accounting for a configuration.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{init_parameters, AblationCase, ModelConfig};
use crate::error::Result;

/// Target size of the full network.
pub const REFERENCE_TOTAL: usize = 2_500_000;

/// Choices that change the count and are not pinned by the architecture
/// description, with the resolution taken here.
pub const AMBIGUITIES: [(&str, &str); 8] = [
    (
        "feature-catcher input width",
        "key, value and query read the flattened channel-by-frequency bottleneck frame (C*F inputs)",
    ),
    ("attention width", "attention_dim = 64"),
    ("feature-catcher output", "one linear map from attention_dim back to C*F per catcher"),
    ("mask generator", "two C-to-C convolutions with a 3x7 kernel and bias"),
    ("interactive scorer", "unidirectional GRU with input size 1 and hidden size 1 per branch"),
    ("decoder gating", "1x1 gate convolution to the skip width plus a 1x1 fusion convolution, each after BN and PReLU"),
    ("bias and normalisation terms", "every convolution and linear map has a bias; BN affine terms count, running statistics do not"),
    ("Case 5 substitute", "two plain attention blocks of the same shape as a feature catcher, no mask convolutions"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub breakdown: BTreeMap<String, usize>,
    pub per_case: Vec<(AblationCase, usize)>,
}

impl ParamReport {
    pub fn case_ratio(&self, case: AblationCase) -> Option<f64> {
        let of = |c| self.per_case.iter().find(|(k, _)| *k == c).map(|(_, n)| *n as f64);
        Some(of(case)? / of(AblationCase::Case1)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total {} ({:.3} of {})", self.total, self.total as f64 / REFERENCE_TOTAL as f64, REFERENCE_TOTAL);
        for (block, n) in &self.breakdown {
            let _ = writeln!(s, "  {block:<10} {n:>9}");
        }
        for (case, n) in &self.per_case {
            let _ = writeln!(s, "{case}: {n} ({:.3} of Case 1)", self.case_ratio(*case).unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, "resolved ambiguities:");
        for (what, how) in AMBIGUITIES {
            let _ = writeln!(s, "  - {what}: {how}");
        }
        s
    }
}

/// Counts for `cfg` as given and for `cfg` under every ablation case.
pub fn param_report(cfg: &ModelConfig) -> Result<ParamReport> {
    let store = init_parameters(cfg)?;
    let per_case = AblationCase::ALL
        .iter()
        .map(|&c| Ok((c, init_parameters(&cfg.clone().with_case(c))?.param_count())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamReport {
        total: store.param_count(),
        breakdown: store.breakdown(),
        per_case,
    })
}
