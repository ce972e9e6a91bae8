//! Pipeline configuration: a plain-text file of `key = value` lines with
//! `#` comments. Unknown keys are rejected, and the fully resolved
//! configuration can be written back in the same syntax.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use ffrmil_core::{Precision, TrainConfig};

use crate::error::{invalid, Result};
use crate::mil::Mode;
use crate::model::CaeTrainConfig;
use crate::synth::CohortConfig;

/// Iteration count of the full-length schedule.
pub const PAPER_SCALE_ITERATIONS: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub out: PathBuf,
    pub cohort: CohortConfig,
    pub pretrain_patients: usize,
    pub pretrain_patches: usize,
    pub pretrain_batch: usize,
    pub pretrain_learning_rate: f64,
    pub vcae_iterations: usize,
    pub seq_iterations: usize,
    pub myo_iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub dropout: f64,
    pub iterations: usize,
    pub checkpoint_interval: usize,
    pub paper_scale: bool,
    pub precision: Precision,
    pub folds: usize,
    pub mode: Mode,
    pub eval_checkpoints: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            out: PathBuf::from("out"),
            cohort: CohortConfig::default(),
            pretrain_patients: 40,
            pretrain_patches: 10_000,
            pretrain_batch: 16,
            pretrain_learning_rate: 1e-3,
            vcae_iterations: 1500,
            seq_iterations: 1500,
            myo_iterations: 1500,
            learning_rate: t.learning_rate,
            l2: t.l2,
            dropout: t.dropout,
            iterations: t.iterations,
            checkpoint_interval: t.checkpoint_interval,
            paper_scale: false,
            precision: Precision::F32,
            folds: 5,
            mode: Mode::Combined,
            eval_checkpoints: 10,
        }
    }
}

pub fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

pub fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got `{s}`")),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("config key `{key}`: cannot parse `{value}`")))
}

impl PipelineConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.cohort;
        match key {
            "out" => self.out = PathBuf::from(value),
            "seed" => c.seed = parse(key, value)?,
            "patients" => c.patients = parse(key, value)?,
            "arteries_mean" => c.arteries_mean = parse(key, value)?,
            "arteries_sd" => c.arteries_sd = parse(key, value)?,
            "ffr_mean" => c.ffr_mean = parse(key, value)?,
            "ffr_sd" => c.ffr_sd = parse(key, value)?,
            "noise" => c.noise = parse(key, value)?,
            "coupling" => c.coupling = parse(key, value)?,
            "heterogeneity" => c.heterogeneity = parse(key, value)?,
            "myo_noise" => c.myo_noise = parse(key, value)?,
            "min_length" => c.min_length = parse(key, value)?,
            "max_length" => c.max_length = parse(key, value)?,
            "secondary_lesion_rate" => c.secondary_lesion_rate = parse(key, value)?,
            "pretrain_patients" => self.pretrain_patients = parse(key, value)?,
            "pretrain_patches" => self.pretrain_patches = parse(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, value)?,
            "pretrain_learning_rate" => self.pretrain_learning_rate = parse(key, value)?,
            "vcae_iterations" => self.vcae_iterations = parse(key, value)?,
            "seq_iterations" => self.seq_iterations = parse(key, value)?,
            "myo_iterations" => self.myo_iterations = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "paper_scale" => self.paper_scale = parse(key, value)?,
            "precision" => {
                self.precision = parse_precision(value).map_err(|e| invalid(format!("config key `precision`: {e}")))?
            }
            "folds" => self.folds = parse(key, value)?,
            "mode" => self.mode = value.parse().map_err(|e| invalid(format!("config key `mode`: {e}")))?,
            "eval_checkpoints" => self.eval_checkpoints = parse(key, value)?,
            _ => return Err(invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults, then validates.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every key with its resolved value, reparseable by [`parse_str`](Self::parse_str).
    pub fn to_text(&self) -> String {
        let c = &self.cohort;
        let mut s = String::from("# resolved configuration\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("out", self.out.display().to_string());
        put("seed", c.seed.to_string());
        put("patients", c.patients.to_string());
        put("arteries_mean", c.arteries_mean.to_string());
        put("arteries_sd", c.arteries_sd.to_string());
        put("ffr_mean", c.ffr_mean.to_string());
        put("ffr_sd", c.ffr_sd.to_string());
        put("noise", c.noise.to_string());
        put("coupling", c.coupling.to_string());
        put("heterogeneity", c.heterogeneity.to_string());
        put("myo_noise", c.myo_noise.to_string());
        put("min_length", c.min_length.to_string());
        put("max_length", c.max_length.to_string());
        put("secondary_lesion_rate", c.secondary_lesion_rate.to_string());
        put("pretrain_patients", self.pretrain_patients.to_string());
        put("pretrain_patches", self.pretrain_patches.to_string());
        put("pretrain_batch", self.pretrain_batch.to_string());
        put("pretrain_learning_rate", self.pretrain_learning_rate.to_string());
        put("vcae_iterations", self.vcae_iterations.to_string());
        put("seq_iterations", self.seq_iterations.to_string());
        put("myo_iterations", self.myo_iterations.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("l2", self.l2.to_string());
        put("dropout", self.dropout.to_string());
        put("iterations", self.iterations.to_string());
        put("checkpoint_interval", self.checkpoint_interval.to_string());
        put("paper_scale", self.paper_scale.to_string());
        put("precision", precision_name(self.precision).to_string());
        put("folds", self.folds.to_string());
        put("mode", self.mode.to_string());
        put("eval_checkpoints", self.eval_checkpoints.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.train_config(0).validate().map_err(|e| invalid(e.to_string()))?;
        let positive = [
            ("pretrain_patients", self.pretrain_patients),
            ("pretrain_patches", self.pretrain_patches),
            ("pretrain_batch", self.pretrain_batch),
            ("vcae_iterations", self.vcae_iterations),
            ("seq_iterations", self.seq_iterations),
            ("myo_iterations", self.myo_iterations),
            ("eval_checkpoints", self.eval_checkpoints),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(format!("config key `{k}` must be positive")));
            }
        }
        if !(self.pretrain_learning_rate > 0.0) {
            return Err(invalid("config key `pretrain_learning_rate` must be positive"));
        }
        if self.folds < 2 {
            return Err(invalid(format!("config key `folds` must be at least 2, got {}", self.folds)));
        }
        let t = self.train_config(0);
        if self.eval_checkpoints > t.checkpoint_count() {
            return Err(invalid(format!(
                "config key `eval_checkpoints` ({}) exceeds the {} checkpoints the schedule writes",
                self.eval_checkpoints,
                t.checkpoint_count()
            )));
        }
        Ok(())
    }

    pub fn effective_iterations(&self) -> usize {
        if self.paper_scale {
            PAPER_SCALE_ITERATIONS
        } else {
            self.iterations
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            l2: self.l2,
            dropout: self.dropout,
            learning_rate: self.learning_rate,
            iterations: self.effective_iterations(),
            checkpoint_interval: self.checkpoint_interval,
            precision: self.precision,
            seed,
        }
    }

    pub fn cae_config(&self, iterations: usize, seed: u64) -> CaeTrainConfig {
        CaeTrainConfig {
            iterations,
            batch: self.pretrain_batch,
            learning_rate: self.pretrain_learning_rate,
            l2: 0.0,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_reparses_equal() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_str("noise = 12.5\nmode = myo # comment\nprecision=f64\npaper_scale = true").unwrap();
        let back = PipelineConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_named() {
        let err = PipelineConfig::parse_str("nosie = 3").unwrap_err().to_string();
        assert!(err.contains("nosie"), "{err}");
    }

    #[test]
    fn bad_value_names_key() {
        let err = PipelineConfig::parse_str("folds = many").unwrap_err().to_string();
        assert!(err.contains("folds"), "{err}");
    }

    #[test]
    fn paper_scale_schedule() {
        let cfg = PipelineConfig {
            paper_scale: true,
            ..Default::default()
        };
        assert_eq!(cfg.train_config(0).checkpoint_count(), 200);
        assert_eq!(PipelineConfig::default().train_config(0).checkpoint_count(), 20);
    }
}
