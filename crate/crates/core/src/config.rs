//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored; a `#` after a value
//! starts a comment. Unknown keys and unparsable values are errors naming the
//! key. [`RunConfig::to_canonical`] writes every key in sorted order.

use crate::data::SyntheticSpec;
use crate::discriminator::{CriticMode, FakeTerms, PenaltyNorm, VanillaGeneratorLoss};
use crate::encoders::ModelDims;
use crate::model::{ModelOptions, Variant};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown config key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("invalid config field {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Train,
    Eval,
    Generate,
    SynthData,
    Gradcheck,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Generate => "generate",
            Mode::SynthData => "synth-data",
            Mode::Gradcheck => "gradcheck",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Mode::Train, Mode::Eval, Mode::Generate, Mode::SynthData, Mode::Gradcheck]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| "expected train, eval, generate, synth-data or gradcheck".to_string())
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub seed: u64,
    pub embed: usize,
    pub hidden: usize,
    pub filters: usize,
    pub proj: usize,
    /// Cap on non-reserved vocabulary words.
    pub vocab_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs trained on likelihood alone before the critic is used.
    pub warmup_epochs: usize,
    pub critic_iters: usize,
    /// Gradient-penalty weight; only PAAG uses it.
    pub lambda: f64,
    /// Weight of the adversarial term in the generator objective.
    pub lambda_adv: f64,
    pub beam: usize,
    pub max_len: usize,
    pub attend_review_words: bool,
    pub per_step_critic: bool,
    pub penalty_norm: PenaltyNorm,
    pub critic_fake_terms: FakeTerms,
    pub vanilla_generator_loss: VanillaGeneratorLoss,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Fraction of generated examples written to the training split by
    /// `synth-data`.
    pub synth_train_fraction: f64,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Train,
            variant: Variant::Paag,
            seed: 1,
            embed: 32,
            hidden: 32,
            filters: 16,
            proj: 32,
            vocab_size: 200,
            batch_size: 16,
            learning_rate: 0.1,
            epochs: 30,
            warmup_epochs: 10,
            critic_iters: 1,
            lambda: 10.0,
            lambda_adv: 0.1,
            beam: 4,
            max_len: 20,
            attend_review_words: false,
            per_step_critic: false,
            penalty_norm: PenaltyNorm::Sequence,
            critic_fake_terms: FakeTerms::Mean,
            vanilla_generator_loss: VanillaGeneratorLoss::Minimax,
            train_path: None,
            test_path: None,
            checkpoint: None,
            output_dir: PathBuf::from("paag-out"),
            synth_train_fraction: 0.9,
            synth: SyntheticSpec::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_penalty(key: &str, v: &str) -> Result<PenaltyNorm, ConfigError> {
    match v {
        "per_step" => Ok(PenaltyNorm::PerStep),
        "sequence" => Ok(PenaltyNorm::Sequence),
        _ => Err(ConfigError::InvalidValue { key: key.into(), value: v.into(), reason: "expected per_step or sequence".into() }),
    }
}

fn penalty_name(p: PenaltyNorm) -> &'static str {
    match p {
        PenaltyNorm::PerStep => "per_step",
        PenaltyNorm::Sequence => "sequence",
    }
}

fn parse_fakes(key: &str, v: &str) -> Result<FakeTerms, ConfigError> {
    match v {
        "mean" => Ok(FakeTerms::Mean),
        "sum" => Ok(FakeTerms::Sum),
        _ => Err(ConfigError::InvalidValue { key: key.into(), value: v.into(), reason: "expected mean or sum".into() }),
    }
}

fn fakes_name(f: FakeTerms) -> &'static str {
    match f {
        FakeTerms::Mean => "mean",
        FakeTerms::Sum => "sum",
    }
}

fn parse_vanilla(key: &str, v: &str) -> Result<VanillaGeneratorLoss, ConfigError> {
    match v {
        "minimax" => Ok(VanillaGeneratorLoss::Minimax),
        "non_saturating" => Ok(VanillaGeneratorLoss::NonSaturating),
        _ => Err(ConfigError::InvalidValue { key: key.into(), value: v.into(), reason: "expected minimax or non_saturating".into() }),
    }
}

fn vanilla_name(v: VanillaGeneratorLoss) -> &'static str {
    match v {
        VanillaGeneratorLoss::Minimax => "minimax",
        VanillaGeneratorLoss::NonSaturating => "non_saturating",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| ConfigError::Syntax { line, text: raw.to_string() })?;
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.to_string() });
            }
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line, key },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "mode" => self.mode = parse_value(key, v)?,
            "variant" => self.variant = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "embed" => self.embed = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "filters" => self.filters = parse_value(key, v)?,
            "proj" => self.proj = parse_value(key, v)?,
            "vocab_size" => self.vocab_size = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, v)?,
            "critic_iters" => self.critic_iters = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "lambda_adv" => self.lambda_adv = parse_value(key, v)?,
            "beam" => self.beam = parse_value(key, v)?,
            "max_len" => self.max_len = parse_value(key, v)?,
            "attend_review_words" => self.attend_review_words = parse_value(key, v)?,
            "per_step_critic" => self.per_step_critic = parse_value(key, v)?,
            "penalty_norm" => self.penalty_norm = parse_penalty(key, v)?,
            "critic_fake_terms" => self.critic_fake_terms = parse_fakes(key, v)?,
            "vanilla_generator_loss" => self.vanilla_generator_loss = parse_vanilla(key, v)?,
            "train_path" => self.train_path = path(v),
            "test_path" => self.test_path = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "synth.train_fraction" => self.synth_train_fraction = parse_value(key, v)?,
            "synth.vocab_size" => self.synth.vocab_size = parse_value(key, v)?,
            "synth.num_products" => self.synth.num_products = parse_value(key, v)?,
            "synth.attributes_per_product" => self.synth.attributes_per_product = parse_value(key, v)?,
            "synth.reviews_per_product" => self.synth.reviews_per_product = parse_value(key, v)?,
            "synth.question_templates" => self.synth.question_templates = parse_value(key, v)?,
            "synth.noise_rate" => self.synth.noise_rate = parse_value(key, v)?,
            "synth.review_fact_rate" => self.synth.review_fact_rate = parse_value(key, v)?,
            _ => return Err(ConfigError::UnknownKey { line: 0, key: key.to_string() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("filters", self.filters),
            ("proj", self.proj),
            ("batch_size", self.batch_size),
            ("critic_iters", self.critic_iters),
            ("beam", self.beam),
            ("max_len", self.max_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid { key, reason: "must be positive".into() });
            }
        }
        if self.vocab_size < 4 {
            return Err(ConfigError::Invalid { key: "vocab_size", reason: "must be at least 4".into() });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ConfigError::Invalid { key: "learning_rate", reason: "must be a positive number".into() });
        }
        for (key, v) in [("lambda", self.lambda), ("lambda_adv", self.lambda_adv)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::Invalid { key, reason: "must be a non-negative number".into() });
            }
        }
        if self.warmup_epochs > self.epochs {
            return Err(ConfigError::Invalid { key: "warmup_epochs", reason: format!("exceeds epochs ({})", self.epochs) });
        }
        if !(0.0..=1.0).contains(&self.synth_train_fraction) {
            return Err(ConfigError::Invalid { key: "synth.train_fraction", reason: "must lie in [0, 1]".into() });
        }
        self.synth
            .validate()
            .map_err(|e| ConfigError::Invalid { key: "synth", reason: e.to_string() })
    }

    /// Every key in sorted order, one `key = value` per line. Unset paths
    /// are written with an empty value.
    pub fn to_canonical(&self) -> String {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut entries: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("variant", self.variant.to_string()),
            ("seed", self.seed.to_string()),
            ("embed", self.embed.to_string()),
            ("hidden", self.hidden.to_string()),
            ("filters", self.filters.to_string()),
            ("proj", self.proj.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("critic_iters", self.critic_iters.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lambda_adv", self.lambda_adv.to_string()),
            ("beam", self.beam.to_string()),
            ("max_len", self.max_len.to_string()),
            ("attend_review_words", self.attend_review_words.to_string()),
            ("per_step_critic", self.per_step_critic.to_string()),
            ("penalty_norm", penalty_name(self.penalty_norm).to_string()),
            ("critic_fake_terms", fakes_name(self.critic_fake_terms).to_string()),
            ("vanilla_generator_loss", vanilla_name(self.vanilla_generator_loss).to_string()),
            ("train_path", p(&self.train_path)),
            ("test_path", p(&self.test_path)),
            ("checkpoint", p(&self.checkpoint)),
            ("output_dir", self.output_dir.display().to_string()),
            ("synth.train_fraction", self.synth_train_fraction.to_string()),
            ("synth.vocab_size", self.synth.vocab_size.to_string()),
            ("synth.num_products", self.synth.num_products.to_string()),
            ("synth.attributes_per_product", self.synth.attributes_per_product.to_string()),
            ("synth.reviews_per_product", self.synth.reviews_per_product.to_string()),
            ("synth.question_templates", self.synth.question_templates.to_string()),
            ("synth.noise_rate", self.synth.noise_rate.to_string()),
            ("synth.review_fact_rate", self.synth.review_fact_rate.to_string()),
        ];
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims { vocab, embed: self.embed, hidden: self.hidden, filters: self.filters, proj: self.proj }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            variant: self.variant,
            attend_review_words: self.attend_review_words,
            critic_mode: if self.per_step_critic { CriticMode::PerStep } else { CriticMode::Sequence },
            penalty_norm: self.penalty_norm,
            fake_terms: self.critic_fake_terms,
            vanilla_loss: self.vanilla_generator_loss,
        }
    }

    /// Gradient-penalty weight actually applied: zero unless the variant
    /// carries the penalty.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.has_penalty() {
            self.lambda
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_values() {
        let c = RunConfig::parse("# desk run\nvariant = RAGFWD  # ablation\n\nhidden=16\nper_step_critic = true\ntrain_path = data/train.jsonl\n").unwrap();
        assert_eq!(c.variant, Variant::Ragfwd);
        assert_eq!(c.hidden, 16);
        assert!(c.per_step_critic);
        assert_eq!(c.train_path, Some(PathBuf::from("data/train.jsonl")));
        assert_eq!(c.effective_lambda(), 0.0);
        assert_eq!(c.model_options().critic_mode, CriticMode::PerStep);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("seed = 3\nhiden = 16\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { line: 2, key: "hiden".into() });
        assert!(e.to_string().contains("hiden"));
    }

    #[test]
    fn invalid_values_are_named() {
        let e = RunConfig::parse("batch_size = many").unwrap_err();
        assert!(matches!(e, ConfigError::InvalidValue { ref key, .. } if key == "batch_size"));
        let e = RunConfig::parse("variant = GAN").unwrap_err();
        assert!(e.to_string().contains("variant"));
        let e = RunConfig::parse("beam = 0").unwrap_err();
        assert_eq!(e, ConfigError::Invalid { key: "beam", reason: "must be positive".into() });
        assert!(matches!(RunConfig::parse("just text"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
    }

    #[test]
    fn canonical_form_is_sorted_and_complete() {
        let text = RunConfig::default().to_canonical();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys.len(), 34);
    }

    #[test]
    fn only_paag_applies_the_penalty() {
        for v in Variant::ALL {
            let c = RunConfig { variant: v, ..RunConfig::default() };
            assert_eq!(c.effective_lambda() > 0.0, v == Variant::Paag);
        }
    }

    proptest! {
        #[test]
        fn config_roundtrips(
            seed in any::<u64>(),
            hidden in 1usize..300,
            lr in 1e-4f64..1.0,
            lambda in 0.0f64..50.0,
            variant in 0usize..4,
            words in any::<bool>(),
            noise in 0.0f64..1.0,
            out in "[a-z/]{1,12}",
        ) {
            let c = RunConfig {
                seed,
                hidden,
                learning_rate: lr,
                lambda,
                variant: Variant::ALL[variant],
                attend_review_words: words,
                penalty_norm: if words { PenaltyNorm::Sequence } else { PenaltyNorm::PerStep },
                output_dir: PathBuf::from(out),
                train_path: words.then(|| PathBuf::from("t.jsonl")),
                synth: SyntheticSpec { noise_rate: noise, ..SyntheticSpec::default() },
                ..RunConfig::default()
            };
            let text = c.to_canonical();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_canonical(), text);
        }

        #[test]
        fn canonical_form_is_a_fixed_point(order in Just(()).prop_perturb(|_, mut rng| rng.next_u64())) {
            // the same settings written in a shuffled order with comments
            let mut lines: Vec<String> = "variant = RAGFD\nseed = 9\nbeam = 2\nmax_len = 12\nsynth.noise_rate = 0.3"
                .lines().map(|l| format!("{l}   # note")).collect();
            let k = (order % lines.len() as u64) as usize;
            lines.rotate_left(k);
            let c = RunConfig::parse(&lines.join("\n")).unwrap();
            let canon = c.to_canonical();
            prop_assert_eq!(RunConfig::parse(&canon).unwrap().to_canonical(), canon);
        }
    }
}
