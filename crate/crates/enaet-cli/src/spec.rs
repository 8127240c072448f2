//! Experiment resolution: defaults, then the config file, then command-line
//! flags, then ablation switches; fanned out over a seed list.

use std::fmt;
use std::path::Path;

use enaet::trainer::TrainConfig;

/// Errors that should read as "you called this wrong" and exit with the
/// usage status rather than the runtime one.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Ablation {
    pub no_aet: bool,
    pub no_cl: bool,
    /// Canonical family index; every other family is fully disabled.
    pub only_family: Option<usize>,
    pub ssl_only: bool,
}

/// A resolved run request: the post-precedence base config, the ablation to
/// apply on top, and the seeds to repeat it over.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: TrainConfig,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    /// The exact config a given seed's run uses; this is what lands in the
    /// run directory as `config.toml`.
    pub fn effective_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = apply_ablation(self.base.clone(), &self.ablation);
        cfg.seed = seed;
        cfg
    }
}

pub fn apply_ablation(mut cfg: TrainConfig, ab: &Ablation) -> TrainConfig {
    if ab.ssl_only {
        cfg.lambda_k = [0.0; 5];
        cfg.gamma = 0.0;
        cfg.families_enabled = [false; 5];
    }
    if ab.no_aet {
        cfg.lambda_k = [0.0; 5];
    }
    if ab.no_cl {
        cfg.gamma = 0.0;
    }
    if let Some(f) = ab.only_family {
        for k in 0..5 {
            if k != f {
                cfg.lambda_k[k] = 0.0;
                cfg.families_enabled[k] = false;
            }
        }
        cfg.families_enabled[f] = true;
    }
    cfg
}

/// Precedence: defaults, overwritten by the config file if given,
/// overwritten by any explicitly passed flags.
pub fn resolve_config(
    config_path: Option<&Path>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
) -> anyhow::Result<TrainConfig> {
    let mut cfg = match config_path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--seeds 5` runs five seeds counting up from the config's base seed;
/// `--seeds 3,7,19` runs exactly those. Absent, the base seed runs alone.
pub fn parse_seeds(arg: Option<&str>, base_seed: u64) -> Result<Vec<u64>, UsageError> {
    let Some(arg) = arg else {
        return Ok(vec![base_seed]);
    };
    let arg = arg.trim();
    if arg.is_empty() {
        return Err(UsageError("--seeds must not be empty".into()));
    }
    let parse = |tok: &str| {
        tok.trim()
            .parse::<u64>()
            .map_err(|_| UsageError(format!("--seeds: {tok:?} is not a nonnegative integer")))
    };
    if arg.contains(',') {
        let seeds: Vec<u64> = arg
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(parse)
            .collect::<Result<_, _>>()?;
        if seeds.is_empty() {
            return Err(UsageError("--seeds list is empty".into()));
        }
        return Ok(seeds);
    }
    let n = parse(arg)?;
    if n == 0 {
        return Err(UsageError("--seeds count must be at least 1".into()));
    }
    Ok((0..n).map(|i| base_seed + i).collect())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_argument_forms() {
        assert_eq!(parse_seeds(None, 7).unwrap(), vec![7]);
        assert_eq!(parse_seeds(Some("3"), 10).unwrap(), vec![10, 11, 12]);
        assert_eq!(parse_seeds(Some("3,7,19"), 0).unwrap(), vec![3, 7, 19]);
        assert_eq!(parse_seeds(Some("5,"), 0).unwrap(), vec![5]);
        assert!(parse_seeds(Some("0"), 0).is_err());
        assert!(parse_seeds(Some("x"), 0).is_err());
        assert!(parse_seeds(Some("1,-2"), 0).is_err());
    }

    #[test]
    fn ablations_zero_the_right_weights() {
        let base = TrainConfig::default();

        let ssl = apply_ablation(base.clone(), &Ablation { ssl_only: true, ..Default::default() });
        assert_eq!(ssl.lambda_k, [0.0; 5]);
        assert_eq!(ssl.gamma, 0.0);
        assert_eq!(ssl.families_enabled, [false; 5]);
        assert_eq!(ssl.lambda_u_max, base.lambda_u_max);

        let no_aet = apply_ablation(base.clone(), &Ablation { no_aet: true, ..Default::default() });
        assert_eq!(no_aet.lambda_k, [0.0; 5]);
        assert_eq!(no_aet.gamma, base.gamma, "consistency survives removing the regression");
        assert_eq!(no_aet.families_enabled, [true; 5]);

        let no_cl = apply_ablation(base.clone(), &Ablation { no_cl: true, ..Default::default() });
        assert_eq!(no_cl.gamma, 0.0);
        assert_eq!(no_cl.lambda_k, base.lambda_k);

        let only = apply_ablation(
            base.clone(),
            &Ablation { only_family: Some(2), ..Default::default() },
        );
        assert_eq!(only.lambda_k, [0.0, 0.0, base.lambda_k[2], 0.0, 0.0]);
        assert_eq!(only.families_enabled, [false, false, true, false, false]);
        assert_eq!(only.gamma, base.gamma);
    }

    #[test]
    fn effective_config_sets_the_seed() {
        let spec = ExperimentSpec {
            name: "t".into(),
            base: TrainConfig::default(),
            ablation: Ablation { no_cl: true, ..Default::default() },
            seeds: vec![4, 5],
        };
        let cfg = spec.effective_config(5);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.gamma, 0.0);
    }

    #[test]
    fn mean_std_handles_small_samples() {
        let (m, s) = mean_std(&[2.0]);
        assert_eq!((m, s), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12);
        assert!((s - (2.0f64).sqrt()).abs() < 1e-12);
    }
}
