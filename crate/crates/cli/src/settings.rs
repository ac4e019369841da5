//! TOML settings files and compact strategy specs.
//!
//! Every key is optional; command-line flags win over the file, and the
//! file wins over built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskdecode::backend::PlantedModelParams;
use maskdecode::{ConfidenceMetric, DecodeConfig, Strategy, TokenId};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub strategy: Option<String>,
    pub tau: Option<f64>,
    pub beam: Option<usize>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub metric: Option<String>,
    pub max_length: Option<usize>,
    pub topk: Option<usize>,
    pub seed: Option<u64>,
    pub prompt: Option<Vec<TokenId>>,
    pub prompt_len: Option<usize>,
    pub trace_out: Option<PathBuf>,

    pub backend: Option<String>,
    pub worker_cmd: Option<String>,
    pub worker_timeout: Option<f64>,

    pub instances: Option<usize>,
    pub first_seed: Option<u64>,
    pub length: Option<usize>,
    /// Bench configs as compact specs, e.g. `"soar:tau=0.9,K=2"`.
    pub configs: Option<Vec<String>>,
    pub arness_k: Option<usize>,
    pub histogram_bins: Option<usize>,
    pub trace_dir: Option<PathBuf>,
    pub report_out: Option<PathBuf>,

    /// Planted-model parameters; missing keys keep their defaults.
    pub planted: Option<PlantedModelParams>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Parses `name[:key=value,...]`, e.g. `pbs:n=2,K=3` or `greedy:k=4`.
///
/// Keys: `k` (greedy positions per step), `n`, `tau`, `K` (beam), `metric`,
/// `topk`.
pub fn parse_spec(spec: &str) -> Result<DecodeConfig> {
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut config = DecodeConfig::new(name.trim().parse::<Strategy>()?);
    for pair in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("expected key=value in {spec:?}, got {pair:?}"))?;
        let value = value.trim();
        let bad = || format!("bad value for {key} in {spec:?}");
        match key.trim() {
            "k" => config.k_per_step = value.parse().with_context(bad)?,
            "n" => config.n_parallel = value.parse().with_context(bad)?,
            "tau" => config.tau = value.parse().with_context(bad)?,
            "K" | "beam" => config.beam = value.parse().with_context(bad)?,
            "metric" => config.metric = value.parse::<ConfidenceMetric>()?,
            "topk" => config.topk = value.parse().with_context(bad)?,
            other => bail!("unknown key {other:?} in {spec:?}"),
        }
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs() {
        assert_eq!(parse_spec("greedy").unwrap(), DecodeConfig::greedy(1));
        assert_eq!(parse_spec("greedy:k=3").unwrap(), DecodeConfig::greedy(3));
        assert_eq!(parse_spec("pbs:n=2, K=3").unwrap(), DecodeConfig::pbs(2, 3));
        assert_eq!(
            parse_spec("soar:tau=0.9,K=2").unwrap(),
            DecodeConfig::soar(0.9, 2)
        );
        let c = parse_spec("adaptive:tau=0.7,metric=margin").unwrap();
        assert_eq!(
            c,
            DecodeConfig::adaptive_parallel(0.7).with_metric(ConfidenceMetric::Margin)
        );
        assert!(parse_spec("beam").is_err());
        assert!(parse_spec("pbs:K").is_err());
        assert!(parse_spec("pbs:K=0").is_err());
        assert!(parse_spec("pbs:width=3").is_err());
    }

    #[test]
    fn settings_files() {
        let s: Settings = toml::from_str(
            r#"
            strategy = "pbs"
            beam = 3
            configs = ["greedy", "soar:tau=0.8,K=2"]
            [planted]
            alpha = 0.3
            "#,
        )
        .unwrap();
        assert_eq!(s.beam, Some(3));
        let planted = s.planted.unwrap();
        assert_eq!(planted.alpha, 0.3);
        assert_eq!(planted.vocab_size, PlantedModelParams::default().vocab_size);
        assert!(toml::from_str::<Settings>("bogus = 1").is_err());
    }
}
