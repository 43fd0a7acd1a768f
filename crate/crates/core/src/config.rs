//! Flat `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment. Unknown or repeated keys are
//! errors. [`RunConfig::to_text`] writes every key and parses back to the
//! same configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::agent::ActionMode;
use crate::dataset::FilterConfig;
use crate::error::{GazeError, Result};
use crate::gail::PpoConfig;
use crate::metrics::{AucConfig, AucVariant};
use crate::retina::FoveationConfig;
use crate::search_env::EnvConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    pub fdm_sigma_deg: f64,
    pub auc: AucConfig,
    pub permutations: usize,
    pub action_mode: ActionMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            fdm_sigma_deg: 1.0,
            auc: AucConfig::default(),
            permutations: crate::metrics::DEFAULT_PERMUTATIONS,
            action_mode: ActionMode::Sample,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    pub filter: FilterConfig,
    pub synth: SynthConfig,
    pub metrics: MetricConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| GazeError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_mode(value: &str) -> Result<ActionMode> {
    match value {
        "sample" => Ok(ActionMode::Sample),
        "greedy" => Ok(ActionMode::Greedy),
        _ => Err(GazeError::Config(format!("action_mode: {value:?} is not sample or greedy"))),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let p = &mut self.ppo;
        let f = &mut self.env.foveation;
        let s = &mut self.synth;
        let m = &mut self.metrics;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "clip" => p.clip = parse(key, v)?,
            "epochs" => p.epochs = parse(key, v)?,
            "minibatch" => p.minibatch = parse(key, v)?,
            "lr_policy" => p.lr_policy = parse(key, v)?,
            "lr_value" => p.lr_value = parse(key, v)?,
            "lr_disc" => p.lr_disc = parse(key, v)?,
            "gamma" => p.gamma = parse(key, v)?,
            "lambda" => p.lambda = parse(key, v)?,
            "entropy_coef" => p.entropy_coef = parse(key, v)?,
            "value_coef" => p.value_coef = parse(key, v)?,
            "episodes_per_iter" => p.episodes_per_iter = parse(key, v)?,
            "iterations" => p.iterations = parse(key, v)?,
            "disc_epochs" => p.disc_epochs = parse(key, v)?,
            "reward" => p.reward = v.parse()?,
            "fovea_radius" => f.fovea_radius = parse(key, v)?,
            "deg_per_px" => {
                f.deg_per_px = parse(key, v)?;
                self.filter.deg_per_px = f.deg_per_px;
            }
            "blur_levels" => f.levels = parse(key, v)?,
            "e2_deg" => f.e2_deg = parse(key, v)?,
            "blend" => f.blend = parse(key, v)?,
            "feature_channels" => self.env.feature_channels = parse(key, v)?,
            "inhibition_of_return" => self.env.inhibition_of_return = parse(key, v)?,
            "fixation_margin_deg" => self.filter.margin_deg = parse(key, v)?,
            "synth_train" => s.n_train = parse(key, v)?,
            "synth_test" => s.n_test = parse(key, v)?,
            "synth_test_subjects" => s.test_subjects = parse(key, v)?,
            "synth_train_subjects" => s.train_subjects = parse(key, v)?,
            "synth_distractors" => s.scene.distractors = parse(key, v)?,
            "oracle_noise_px" => s.oracle.noise_sigma = parse(key, v)?,
            "oracle_distractor_prob" => s.oracle.distractor_prob = parse(key, v)?,
            "oracle_hover_px" => s.oracle.hover_sigma = parse(key, v)?,
            "fdm_sigma_deg" => m.fdm_sigma_deg = parse(key, v)?,
            "auc_variant" => m.auc.variant = v.parse()?,
            "auc_negatives" => m.auc.negatives = parse(key, v)?,
            "shuffle_permutations" => m.permutations = parse(key, v)?,
            "action_mode" => m.action_mode = parse_mode(v)?,
            _ => return Err(GazeError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.ppo;
        let f = &self.env.foveation;
        let s = &self.synth;
        let m = &self.metrics;
        vec![
            ("seed", self.seed.to_string()),
            ("clip", p.clip.to_string()),
            ("epochs", p.epochs.to_string()),
            ("minibatch", p.minibatch.to_string()),
            ("lr_policy", p.lr_policy.to_string()),
            ("lr_value", p.lr_value.to_string()),
            ("lr_disc", p.lr_disc.to_string()),
            ("gamma", p.gamma.to_string()),
            ("lambda", p.lambda.to_string()),
            ("entropy_coef", p.entropy_coef.to_string()),
            ("value_coef", p.value_coef.to_string()),
            ("episodes_per_iter", p.episodes_per_iter.to_string()),
            ("iterations", p.iterations.to_string()),
            ("disc_epochs", p.disc_epochs.to_string()),
            ("reward", p.reward.name().to_string()),
            ("fovea_radius", f.fovea_radius.to_string()),
            ("deg_per_px", f.deg_per_px.to_string()),
            ("blur_levels", f.levels.to_string()),
            ("e2_deg", f.e2_deg.to_string()),
            ("blend", f.blend.to_string()),
            ("feature_channels", self.env.feature_channels.to_string()),
            ("inhibition_of_return", self.env.inhibition_of_return.to_string()),
            ("fixation_margin_deg", self.filter.margin_deg.to_string()),
            ("synth_train", s.n_train.to_string()),
            ("synth_test", s.n_test.to_string()),
            ("synth_test_subjects", s.test_subjects.to_string()),
            ("synth_train_subjects", s.train_subjects.to_string()),
            ("synth_distractors", s.scene.distractors.to_string()),
            ("oracle_noise_px", s.oracle.noise_sigma.to_string()),
            ("oracle_distractor_prob", s.oracle.distractor_prob.to_string()),
            ("oracle_hover_px", s.oracle.hover_sigma.to_string()),
            ("fdm_sigma_deg", m.fdm_sigma_deg.to_string()),
            (
                "auc_variant",
                match m.auc.variant {
                    AucVariant::Uniform => "uniform",
                    AucVariant::Judd => "judd",
                }
                .to_string(),
            ),
            ("auc_negatives", m.auc.negatives.to_string()),
            ("shuffle_permutations", m.permutations.to_string()),
            (
                "action_mode",
                match m.action_mode {
                    ActionMode::Sample => "sample",
                    ActionMode::Greedy => "greedy",
                }
                .to_string(),
            ),
        ]
    }

    /// Applies the settings of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| GazeError::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(GazeError::Config(format!("line {}: {key:?} set twice", n + 1)));
            }
            self.set(key, value).map_err(|e| GazeError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.env.foveation.validate()?;
        self.synth.oracle.validate()?;
        if self.env.feature_channels == 0 {
            return Err(GazeError::Config("feature_channels must be >= 1".into()));
        }
        if !(self.metrics.fdm_sigma_deg > 0.0) {
            return Err(GazeError::Config("fdm_sigma_deg must be > 0".into()));
        }
        Ok(())
    }

    /// Scale assumed for data without their own degrees-per-pixel.
    pub fn foveation(&self) -> &FoveationConfig {
        &self.env.foveation
    }
}
