use std::fmt;
use std::path::{Path, PathBuf};

use lmt_core::cohort::CohortConfig;
use lmt_core::mixing::ALPHA_GRID;
use lmt_core::training::{GradingMethod, LmtConfig};

use crate::CliError;

/// What a run trains and how it is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RunMethod {
    /// Encoder + propagator + `h3`, scored by next-visit AUC.
    TimeAware,
    /// Encoder + `h1`, scored by test kappa.
    Grading(GradingMethod),
}

impl RunMethod {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s.trim() {
            "time-aware" | "time_aware" => Ok(RunMethod::TimeAware),
            other => GradingMethod::parse(other)
                .map(RunMethod::Grading)
                .map_err(|_| CliError::Usage(format!("unknown method '{other}' (time-aware, baseline, mm, lmm)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RunMethod::TimeAware => "time-aware",
            RunMethod::Grading(g) => g.name(),
        }
    }
}

impl fmt::Display for RunMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything one subcommand needs, resolved from file and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub method: RunMethod,
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    pub out_dir: PathBuf,
    pub cohort_seed: u64,
    /// Read the cohort from here instead of generating it.
    pub cohort_file: Option<PathBuf>,
    /// Record measured wall-clock seconds in results; off keeps results reproducible byte for byte.
    pub timing: bool,
    pub cohort: CohortConfig,
    /// Template for every run; `seed` and (in sweeps) `alpha` are overridden per run.
    pub lmt: LmtConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: RunMethod::TimeAware,
            seeds: vec![1, 2, 3],
            alphas: ALPHA_GRID.to_vec(),
            out_dir: PathBuf::from("lmt-out"),
            cohort_seed: 1,
            cohort_file: None,
            timing: false,
            cohort: CohortConfig::default(),
            lmt: LmtConfig::default(),
        }
    }
}

const OWN_KEYS: [&str; 7] = ["method", "seeds", "alphas", "out_dir", "cohort_seed", "cohort_file", "timing"];

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::Usage(format!("invalid entry '{s}' in {key}"))))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every accepted key, in the order used by [`ExperimentConfig::to_text`].
    pub fn keys() -> Vec<String> {
        let mut k: Vec<String> = OWN_KEYS.iter().map(|s| s.to_string()).collect();
        k.extend(CohortConfig::KEYS.iter().map(|s| format!("cohort.{s}")));
        k.extend(LmtConfig::KEYS.iter().filter(|&&s| s != "seed").map(|s| s.to_string()));
        k
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let usage = |e: lmt_core::Error| CliError::Usage(format!("{key}: {e}"));
        match key {
            "method" => self.method = RunMethod::parse(v)?,
            "seeds" => self.seeds = list(key, v)?,
            // A single seed is shorthand for a one-element seed list.
            "seed" => self.seeds = list(key, v)?,
            "alphas" => self.alphas = list(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "cohort_seed" => {
                self.cohort_seed = v
                    .parse()
                    .map_err(|_| CliError::Usage(format!("invalid value '{v}' for cohort_seed")))?
            }
            "cohort_file" => self.cohort_file = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "timing" => {
                self.timing = match v {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(CliError::Usage(format!("invalid value '{v}' for timing"))),
                }
            }
            _ => {
                let known = match key.strip_prefix("cohort.") {
                    Some(k) => self.cohort.set(k, v).map_err(usage)?,
                    None => self.lmt.set(key, v).map_err(usage)?,
                };
                if !known {
                    return Err(CliError::Usage(format!("unknown config key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// Apply `key=value` lines; `#` starts a comment. Later lines win.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.lmt.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.cohort_file.is_none() {
            self.cohort.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(CliError::Usage(format!("alpha {a} must be positive")));
        }
        Ok(())
    }

    /// Full resolved configuration, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("method", self.method.name().to_string());
        push("seeds", join(&self.seeds));
        push("alphas", join(&self.alphas));
        push("out_dir", self.out_dir.display().to_string());
        push("cohort_seed", self.cohort_seed.to_string());
        push(
            "cohort_file",
            self.cohort_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        push("timing", self.timing.to_string());
        for (k, v) in self.cohort.to_pairs() {
            push(&format!("cohort.{k}"), v);
        }
        for (k, v) in self.lmt.to_pairs() {
            if k != "seed" {
                push(k, v);
            }
        }
        out
    }

    /// The per-run training configuration.
    pub fn run_config(&self, seed: u64, alpha: Option<f64>) -> LmtConfig {
        let mut c = self.lmt.clone();
        c.seed = seed;
        if let Some(a) = alpha {
            c.alpha = a;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("method = lmm\nseeds=4,5 # two seeds\n\ncohort.n_patients=50\nepochs=3\nencoder_widths=8,8,4,4\n")
            .unwrap();
        assert_eq!(c.method, RunMethod::Grading(GradingMethod::Lmm));
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.cohort.n_patients, 50);
        assert_eq!(c.lmt.epochs, 3);
        let mut d = ExperimentConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        let keys: Vec<String> = c.to_text().lines().map(|l| l.split('=').next().unwrap().to_string()).collect();
        assert_eq!(keys, ExperimentConfig::keys());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let mut c = ExperimentConfig::default();
        assert!(matches!(c.set("bogus", "1"), Err(CliError::Usage(m)) if m.contains("bogus")));
        assert!(matches!(c.set("cohort.bogus", "1"), Err(CliError::Usage(_))));
        assert!(matches!(c.set("epochs", "many"), Err(CliError::Usage(_))));
        assert!(matches!(c.apply_text("epochs 3"), Err(CliError::Usage(_))));
        assert!(matches!(c.set("method", "magic"), Err(CliError::Usage(_))));
    }

    #[test]
    fn last_writer_wins_and_empty_seed_list() {
        let c = ExperimentConfig::resolve(None, &["epochs=2".into(), "epochs=5".into(), "seeds=".into()]).unwrap();
        assert_eq!(c.lmt.epochs, 5);
        assert!(c.seeds.is_empty());
        assert_eq!(c.run_config(9, Some(0.2)).seed, 9);
        assert_eq!(c.run_config(9, Some(0.2)).alpha, 0.2);
    }

    #[test]
    fn invalid_combination_rejected() {
        let r = ExperimentConfig::resolve(None, &["model=tlstm".into(), "setup=s3".into()]);
        assert!(matches!(r, Err(CliError::Usage(_))));
    }
}
