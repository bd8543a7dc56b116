//! Static screening for code that reaches outside the sandbox.
//!
//! Code that loads external files or touches the network is rejected
//! before execution. The screen is a configurable pattern table per
//! dialect; matching is plain substring search over the code text.

use serde::{Deserialize, Serialize};

use crate::modelgate::{CodeSample, Dialect};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrecheckResult {
    Pass,
    Forbidden(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PrecheckConfig {
    pub tikz_patterns: Vec<String>,
    pub plot_patterns: Vec<String>,
}

impl Default for PrecheckConfig {
    fn default() -> Self {
        PrecheckConfig {
            tikz_patterns: [
                "\\input",
                "\\include",
                "\\openin",
                "\\read",
                "\\write18",
                "\\immediate\\write",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            plot_patterns: [
                "open(",
                ".load(",
                "loadtxt",
                "genfromtxt",
                "read_csv",
                "read_table",
                "imread",
                "Image.open",
                "urllib",
                "urlopen",
                "requests.",
                "http://",
                "https://",
                "socket",
                "subprocess",
                "os.system",
                "__import__",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

/// Decide, without executing anything, whether the code may run. Total:
/// every sample gets either Pass or Forbidden with the matched patterns.
pub fn static_precheck(code: &CodeSample, cfg: &PrecheckConfig) -> PrecheckResult {
    let patterns = match code.dialect {
        Dialect::Tikz => &cfg.tikz_patterns,
        Dialect::PlotScript => &cfg.plot_patterns,
    };
    let matched: Vec<&str> = patterns
        .iter()
        .filter(|p| code.text.contains(p.as_str()))
        .map(String::as_str)
        .collect();
    if matched.is_empty() {
        PrecheckResult::Pass
    } else {
        PrecheckResult::Forbidden(format!("forbidden access: {}", matched.join(", ")))
    }
}
