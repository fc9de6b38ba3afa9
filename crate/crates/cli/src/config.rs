//! Run configuration: one JSON document with optional sections per
//! subcommand. Unknown keys are rejected; parse errors report the full key
//! path.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use markovgen_core::bench::Variant;
use markovgen_core::datagen::{CorpusKind, CorpusSpec};
use markovgen_core::teacher::TeacherConfig;
use markovgen_core::train::TrainConfig;
use markovgen_core::types::DecodeSchedule;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub corpus: Option<CorpusSection>,
    #[serde(default)]
    pub teacher: Option<TeacherSection>,
    #[serde(default)]
    pub mrf: Option<MrfSection>,
    #[serde(default)]
    pub schedule: Option<ScheduleSection>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
}

impl RunConfig {
    /// Parse with full key paths on error (for example
    /// `corpus.parts[0].count: missing field`).
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut deserializer = serde_json::Deserializer::from_str(&raw);
        let config: RunConfig = serde_path_to_error::deserialize(&mut deserializer)
            .map_err(|e| anyhow::anyhow!("config key `{}`: {}", e.path(), e.inner()))?;
        Ok(config)
    }

    pub fn corpus(&self) -> anyhow::Result<&CorpusSection> {
        self.corpus
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("config is missing the required `corpus` section"))
    }

    pub fn schedule_section(&self) -> anyhow::Result<&ScheduleSection> {
        self.schedule
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("config is missing the required `schedule` section"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    #[serde(default = "one")]
    pub condition_count: usize,
    #[serde(default)]
    pub noise_rate: f64,
    pub parts: Vec<CorpusPart>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPart {
    #[serde(flatten)]
    pub kind: CorpusKind,
    #[serde(default)]
    pub condition: u16,
    pub count: usize,
}

impl CorpusSection {
    /// One spec per part; part seeds derive from the run seed and part index.
    pub fn to_specs(&self, seed: u64) -> Vec<CorpusSpec> {
        self.parts
            .iter()
            .enumerate()
            .map(|(index, part)| CorpusSpec {
                kind: part.kind.clone(),
                height: self.height,
                width: self.width,
                vocab_size: self.vocab_size,
                condition: part.condition,
                condition_count: self.condition_count,
                count: part.count,
                noise_rate: self.noise_rate,
                seed: seed.wrapping_add(1000 * index as u64),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub window_radius: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub max_targets_per_example: usize,
    pub holdout_fraction: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let d = TeacherConfig::default();
        TeacherSection {
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            window_radius: d.window_radius,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            steps: d.steps,
            max_targets_per_example: d.max_targets_per_example,
            holdout_fraction: d.holdout_fraction,
        }
    }
}

impl TeacherSection {
    pub fn to_config(&self, condition_count: usize, seed: u64) -> TeacherConfig {
        TeacherConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            window_radius: self.window_radius,
            condition_count,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.steps,
            max_targets_per_example: self.max_targets_per_example,
            holdout_fraction: self.holdout_fraction,
            seed,
            ..TeacherConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MrfSection {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub num_iterations_mf: usize,
    pub mask_fraction: f64,
    pub unary_strength_kappa: f64,
    pub pretrain_steps: usize,
    pub distill_steps: usize,
    /// Decodes generated as distillation examples.
    pub distill_decodes: usize,
    /// Sampling temperature for the decode prefix of distillation traces.
    pub distill_temperature: f64,
}

impl Default for MrfSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        MrfSection {
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_epsilon: d.adam_epsilon,
            batch_size: d.batch_size,
            num_iterations_mf: d.num_iterations_mf,
            mask_fraction: d.mask_fraction,
            unary_strength_kappa: d.unary_strength_kappa,
            pretrain_steps: 800,
            distill_steps: 1200,
            distill_decodes: 400,
            distill_temperature: 1.0,
        }
    }
}

impl MrfSection {
    pub fn to_train_config(&self, steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            batch_size: self.batch_size,
            num_iterations_mf: self.num_iterations_mf,
            mask_fraction: self.mask_fraction,
            unary_strength_kappa: self.unary_strength_kappa,
            steps,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub total_steps: usize,
    pub cut_step: usize,
    /// Explicit per-step commit counts; cosine spacing when omitted.
    #[serde(default)]
    pub commits_per_step: Option<Vec<usize>>,
}

impl ScheduleSection {
    pub fn to_schedule(&self, n: usize) -> anyhow::Result<DecodeSchedule> {
        let schedule = match &self.commits_per_step {
            Some(commits) => {
                if commits.len() != self.total_steps {
                    bail!(
                        "schedule.commits_per_step has {} entries, total_steps is {}",
                        commits.len(),
                        self.total_steps
                    );
                }
                DecodeSchedule::new(commits.clone(), self.cut_step, n)?
            }
            None => DecodeSchedule::cosine(n, self.total_steps, self.cut_step)?,
        };
        Ok(schedule)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub repetitions: usize,
    pub decodes: usize,
    pub temperature: f64,
    pub variants: Vec<Variant>,
    pub parallel: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            repetitions: 3,
            decodes: 10,
            temperature: 1.0,
            variants: vec![Variant::Full, Variant::EarlyExit, Variant::Markovgen],
            parallel: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"corpus": {"height": 4, "width": 4, "vocab_size": 8, "parts": [{"kind": "blobs", "count": 2, "bogus": 1}]}}"#,
        )
        .unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("corpus.parts[0]"), "error was: {err}");
    }

    #[test]
    fn missing_required_key_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"corpus": {"height": 4, "width": 4, "parts": []}}"#,
        )
        .unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("vocab_size"), "error was: {err}");
    }

    #[test]
    fn defaults_fill_optional_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"seed": 3}"#).unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seed, 3);
        assert!(config.corpus.is_none());
    }
}
