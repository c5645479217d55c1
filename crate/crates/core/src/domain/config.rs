//! Run-shaping knobs: population sizes, batch sizes, operation mix, and
//! sampling settings, with validation that reports every violation at once.

use serde::{Deserialize, Serialize};

/// Everything that shapes a synthesis run. Serializes losslessly so run
/// manifests can snapshot the exact configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Number of colonies evolved concurrently per generation.
    pub n_colonies: u32,
    /// Accepted-sample target per colony; a colony stops growing once its
    /// pool reaches this size. Seeds do not count toward it.
    pub max_population: u32,
    /// Number of generations; each generation's merged output seeds the next.
    pub n_generations: u32,
    /// Instructions selected per mutation step.
    pub mutation_batch: u32,
    /// Instructions selected per crossover step, split into few-shot groups.
    pub crossover_batch: u32,
    /// Probability that a step mutates; otherwise it crosses over.
    pub mutation_probability: f64,
    /// Few-shot examples per crossover call.
    pub crossover_shots: u32,
    /// Cap on new instructions parsed out of one crossover call.
    pub crossover_max_outputs: u32,
    pub instructor_temperature: f64,
    pub coder_temperature: f64,
    pub judge_temperature: f64,
    /// Nucleus-sampling mass, shared by all roles.
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub rng_seed: u64,
    /// Language tag for generated solutions; must have a registered syntax
    /// validator.
    pub target_code_language: String,
    /// Instructions shorter than this after trimming are discarded.
    pub min_instruction_chars: usize,
    /// Instructions longer than this are discarded.
    pub max_instruction_chars: usize,
    /// Ceiling on raw candidate texts a colony may produce before giving up
    /// on reaching `max_population`. `None` means 50 × max_population.
    pub attempt_budget: Option<u64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n_colonies: 20,
            max_population: 250,
            n_generations: 1,
            mutation_batch: 100,
            crossover_batch: 10,
            mutation_probability: 0.5,
            crossover_shots: 3,
            crossover_max_outputs: 20,
            instructor_temperature: 1.2,
            coder_temperature: 1.0,
            judge_temperature: 1.0,
            top_p: 0.95,
            max_new_tokens: 1024,
            rng_seed: 42,
            target_code_language: "python".to_string(),
            min_instruction_chars: 10,
            max_instruction_chars: 4096,
            attempt_budget: None,
        }
    }
}

impl GenerationConfig {
    /// Raw-candidate budget per colony, applying the 50 × P_max default.
    pub fn effective_attempt_budget(&self) -> u64 {
        self.attempt_budget
            .unwrap_or(50 * u64::from(self.max_population))
    }

    /// Checks every field constraint and reports all violations together.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut violations = Vec::new();
        let positive = [
            (self.n_colonies, "n_colonies"),
            (self.max_population, "max_population"),
            (self.n_generations, "n_generations"),
            (self.mutation_batch, "mutation_batch"),
            (self.crossover_batch, "crossover_batch"),
            (self.crossover_shots, "crossover_shots"),
            (self.crossover_max_outputs, "crossover_max_outputs"),
            (self.max_new_tokens, "max_new_tokens"),
        ];
        for (value, name) in positive {
            if value < 1 {
                violations.push(format!("{name} must be ≥ 1, got {value}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mutation_probability) {
            violations.push(format!(
                "mutation_probability out of [0,1]: {}",
                self.mutation_probability
            ));
        }
        if self.crossover_batch < self.crossover_shots {
            violations.push(format!(
                "crossover_batch ({}) must be ≥ crossover_shots ({})",
                self.crossover_batch, self.crossover_shots
            ));
        }
        let temperatures = [
            (self.instructor_temperature, "instructor_temperature"),
            (self.coder_temperature, "coder_temperature"),
            (self.judge_temperature, "judge_temperature"),
        ];
        for (value, name) in temperatures {
            if !(value.is_finite() && value > 0.0) {
                violations.push(format!("{name} must be a positive real, got {value}"));
            }
        }
        if !(self.top_p.is_finite() && self.top_p > 0.0 && self.top_p <= 1.0) {
            violations.push(format!("top_p out of (0,1]: {}", self.top_p));
        }
        if self.min_instruction_chars < 1 {
            violations.push("min_instruction_chars must be ≥ 1".to_string());
        }
        if self.min_instruction_chars > self.max_instruction_chars {
            violations.push(format!(
                "min_instruction_chars ({}) exceeds max_instruction_chars ({})",
                self.min_instruction_chars, self.max_instruction_chars
            ));
        }
        if self.target_code_language.trim().is_empty() {
            violations.push("target_code_language must be non-empty".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations })
        }
    }
}

/// Returns the config unchanged iff every constraint holds.
pub fn validate_config(config: GenerationConfig) -> Result<GenerationConfig, ConfigError> {
    config.validate()?;
    Ok(config)
}

/// All constraint violations found in one validation pass.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid config: {}", violations.join("; "))]
pub struct ConfigError {
    pub violations: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_settings_are_the_defaults() {
        let cfg = GenerationConfig::default();
        assert_eq!(cfg.n_colonies, 20);
        assert_eq!(cfg.mutation_batch, 100);
        assert_eq!(cfg.crossover_batch, 10);
        assert_eq!(cfg.mutation_probability, 0.5);
        assert_eq!(cfg.crossover_shots, 3);
        assert_eq!(cfg.crossover_max_outputs, 20);
        assert_eq!(cfg.instructor_temperature, 1.2);
        assert_eq!(cfg.coder_temperature, 1.0);
        assert_eq!(cfg.judge_temperature, 1.0);
        assert_eq!(cfg.max_new_tokens, 1024);
        assert_eq!(cfg.target_code_language, "python");
    }

    #[test]
    fn paper_scale_settings_validate() {
        let cfg = GenerationConfig {
            mutation_probability: 0.5,
            mutation_batch: 100,
            crossover_batch: 10,
            n_colonies: 20,
            ..GenerationConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        let cfg = GenerationConfig {
            mutation_probability: 1.3,
            ..GenerationConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.violations.iter().any(|v| v.contains("mutation_probability")));
    }

    #[test]
    fn crossover_batch_must_cover_shots() {
        let cfg = GenerationConfig {
            crossover_batch: 2,
            crossover_shots: 3,
            ..GenerationConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.violations.iter().any(|v| v.contains("crossover_batch")));
    }

    #[test]
    fn all_violations_reported_together() {
        let cfg = GenerationConfig {
            n_colonies: 0,
            mutation_probability: -0.1,
            top_p: 0.0,
            min_instruction_chars: 100,
            max_instruction_chars: 10,
            ..GenerationConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.violations.len() >= 4, "got: {:?}", err.violations);
    }

    #[test]
    fn attempt_budget_defaults_to_fifty_times_population() {
        let cfg = GenerationConfig {
            max_population: 250,
            attempt_budget: None,
            ..GenerationConfig::default()
        };
        assert_eq!(cfg.effective_attempt_budget(), 12_500);
        let cfg = GenerationConfig {
            attempt_budget: Some(7),
            ..cfg
        };
        assert_eq!(cfg.effective_attempt_budget(), 7);
    }

    #[test]
    fn config_round_trips_through_json_and_toml() {
        let cfg = GenerationConfig {
            mutation_probability: 0.37,
            instructor_temperature: 1.17,
            rng_seed: u64::MAX,
            attempt_budget: Some(123),
            ..GenerationConfig::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<GenerationConfig>(&json).unwrap(), cfg);
        // TOML integers are signed 64-bit, so the seed must fit in i64 there.
        let cfg = GenerationConfig {
            rng_seed: 1 << 62,
            ..cfg
        };
        let toml_text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<GenerationConfig>(&toml_text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: GenerationConfig = toml::from_str("n_colonies = 4\nrng_seed = 9").unwrap();
        assert_eq!(cfg.n_colonies, 4);
        assert_eq!(cfg.rng_seed, 9);
        assert_eq!(cfg.mutation_batch, 100);
    }
}
