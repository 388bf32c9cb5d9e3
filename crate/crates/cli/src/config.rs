use std::path::Path;

use anyhow::{Context, Result};
use kgenv_core::credit::CreditConfig;
use kgenv_core::eval::EvalConfig;
use kgenv_core::reward::RewardConfig;
use serde::Deserialize;

/// Layout of the `--config` TOML file. Every section and key is optional.
///
/// ```toml
/// [reward]
/// w_fmt = 0.5
/// w_F1 = 1.0
///
/// [credit]
/// lambda = 1.0
/// mode = "turnwise"
///
/// [eval]
/// n = 3
/// max_turns = 5
/// format = "flat"
/// ```
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub reward: Option<RewardConfig>,
    pub credit: Option<CreditConfig>,
    pub eval: Option<EvalConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `[eval]` with `[reward]` folded in.
    pub fn eval(&self) -> EvalConfig {
        let mut cfg = self.eval.unwrap_or_default();
        if let Some(r) = self.reward {
            cfg.reward = r;
        }
        cfg
    }

    pub fn credit(&self) -> CreditConfig {
        self.credit.unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_merge() {
        let cfg: FileConfig = toml::from_str("[reward]\nw_ret = 0.0\n[eval]\nn = 3\n[credit]\nmode = \"trajectory\"\n").unwrap();
        let eval = cfg.eval();
        assert_eq!(eval.n, 3);
        assert_eq!(eval.max_turns, 5);
        assert_eq!(eval.reward.w_ret, 0.0);
        assert_eq!(eval.reward.w_fmt, 0.5);
        assert_eq!(cfg.credit().mode, kgenv_core::credit::CreditMode::Trajectory);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("[reward]\nw_typo = 1.0\n").is_err());
        assert!(toml::from_str::<FileConfig>("[other]\n").is_err());
    }
}
