//! Experiment configuration and its flat `key = value` file format.
//!
//! Blank lines and text after `#` are ignored. Unknown or repeated keys are
//! errors. `dims` takes `D,d`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Framework,
    Crp,
    Cetf,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::Framework, Self::Crp, Self::Cetf, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Framework => "framework",
            Self::Crp => "crp",
            Self::Cetf => "cetf",
            Self::Full => "full",
        }
    }

    /// Zeroes the loss weights this arm switches off.
    pub fn apply(self, loss: &mut LossConfig) {
        match self {
            Self::Framework => {
                loss.lambda1 = 0.0;
                loss.lambda2 = 0.0;
            }
            Self::Crp => loss.lambda1 = 0.0,
            Self::Cetf => loss.lambda2 = 0.0,
            Self::Full => {}
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation arm {s:?}")))
    }
}

/// Shape and noise of the synthetic task stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub k_tasks: usize,
    pub cats_per_task: usize,
    pub shots: usize,
    pub test_per_cat: usize,
    pub tokens: usize,
    pub frames: usize,
    pub width: usize,
    pub token_noise: f64,
    pub frame_noise: f64,
    pub instance_noise: f64,
    /// Size of the per-modality perturbation of the shared latent map.
    pub modality_gap: f64,
    /// Angular spread of categories around their task's center; 0 puts
    /// all categories of a task on one direction, large values make them
    /// independent.
    pub task_spread: f64,
    /// Size of the per-task perturbation of the video map.
    pub domain_shift: f64,
    /// Rank of the subspace instance offsets live in, shared by all
    /// categories; 0 draws isotropic offsets.
    pub instance_rank: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            k_tasks: 5,
            cats_per_task: 4,
            shots: 16,
            test_per_cat: 8,
            tokens: 8,
            frames: 4,
            width: 32,
            token_noise: 0.3,
            frame_noise: 0.3,
            instance_noise: 1.0,
            modality_gap: 0.5,
            task_spread: 1.0,
            domain_shift: 1.0,
            instance_rank: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_base: f64,
    pub lr_incr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 32,
            lr_base: 1e-2,
            lr_incr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let stream = StreamConfig::default();
        let encoder = EncoderConfig {
            width: stream.width,
            max_tokens: stream.tokens,
            max_frames: stream.frames,
            proto_dim: 32,
            head_hidden: 128,
            base_scale: 0.3,
            ..EncoderConfig::default()
        };
        Self {
            stream,
            encoder,
            loss: LossConfig {
                tau2: 0.3,
                ..LossConfig::default()
            },
            train: TrainConfig::default(),
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("bad value {value:?} for {key}"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("duplicate key {key}")));
            }
            cfg.set(key, value)?;
        }
        cfg.encoder.width = cfg.stream.width;
        cfg.encoder.max_tokens = cfg.stream.tokens;
        cfg.encoder.max_frames = cfg.stream.frames;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.stream;
        let e = &mut self.encoder;
        let l = &mut self.loss;
        let t = &mut self.train;
        match key {
            "k_tasks" => s.k_tasks = parse_value(key, v)?,
            "cats_per_task" => s.cats_per_task = parse_value(key, v)?,
            "shots" => s.shots = parse_value(key, v)?,
            "test_per_cat" => s.test_per_cat = parse_value(key, v)?,
            "tokens" => s.tokens = parse_value(key, v)?,
            "frames" => s.frames = parse_value(key, v)?,
            "token_noise" => s.token_noise = parse_value(key, v)?,
            "frame_noise" => s.frame_noise = parse_value(key, v)?,
            "instance_noise" => s.instance_noise = parse_value(key, v)?,
            "modality_gap" => s.modality_gap = parse_value(key, v)?,
            "task_spread" => s.task_spread = parse_value(key, v)?,
            "domain_shift" => s.domain_shift = parse_value(key, v)?,
            "instance_rank" => s.instance_rank = parse_value(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "batch" => t.batch = parse_value(key, v)?,
            "lr_base" => t.lr_base = parse_value(key, v)?,
            "lr_incr" => t.lr_incr = parse_value(key, v)?,
            "lambda1" => l.lambda1 = parse_value(key, v)?,
            "lambda2" => l.lambda2 = parse_value(key, v)?,
            "tau" => l.tau = parse_value(key, v)?,
            "tau2" => l.tau2 = parse_value(key, v)?,
            "sigma" => l.sigma = parse_value(key, v)?,
            "pseudo_per_cat" => l.pseudo_per_category = parse_value(key, v)?,
            "crp_symmetric" => l.crp_symmetric = parse_bool(key, v)?,
            "experts" => e.experts = parse_value(key, v)?,
            "k_e" => e.active_experts = parse_value(key, v)?,
            "expert_rank" => e.expert_rank = parse_value(key, v)?,
            "lora_rank" => e.lora_rank = parse_value(key, v)?,
            "layers" => e.layers = parse_value(key, v)?,
            "head_hidden" => e.head_hidden = parse_value(key, v)?,
            "base_scale" => e.base_scale = parse_value(key, v)?,
            "dims" => {
                let (big, small) = v
                    .split_once(',')
                    .ok_or_else(|| Error::InvalidConfig(format!("dims must be D,d, got {v:?}")))?;
                s.width = parse_value(key, big.trim())?;
                e.proto_dim = parse_value(key, small.trim())?;
            }
            "seed" => self.seed = parse_value(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stream;
        if s.k_tasks == 0 || s.cats_per_task == 0 || s.shots == 0 || s.test_per_cat == 0 {
            return Err(Error::InvalidConfig("task and sample counts must be >= 1".into()));
        }
        if s.tokens == 0 || s.frames == 0 || s.width == 0 {
            return Err(Error::InvalidConfig("tokens, frames and width must be >= 1".into()));
        }
        for (name, x) in [
            ("token_noise", s.token_noise),
            ("frame_noise", s.frame_noise),
            ("instance_noise", s.instance_noise),
            ("modality_gap", s.modality_gap),
            ("task_spread", s.task_spread),
            ("domain_shift", s.domain_shift),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        if !(t.lr_base >= 0.0 && t.lr_incr >= 0.0) {
            return Err(Error::InvalidConfig("learning rates must be >= 0".into()));
        }
        let categories = s.k_tasks * s.cats_per_task;
        if categories < 2 {
            return Err(Error::DegenerateCategoryCount(categories));
        }
        if self.encoder.proto_dim < categories {
            return Err(Error::DimensionTooSmall {
                dim: self.encoder.proto_dim,
                categories,
            });
        }
        self.encoder.validate()?;
        self.loss.validate()
    }

    pub fn categories(&self) -> usize {
        self.stream.k_tasks * self.stream.cats_per_task
    }

    /// Loss weights after the ablation arm is applied.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss.clone();
        self.ablation.apply(&mut l);
        l
    }

    /// Canonical `key = value` listing with the ablation applied to the
    /// loss weights. Parsing it back yields the effective configuration.
    pub fn echo(&self) -> String {
        let s = &self.stream;
        let e = &self.encoder;
        let l = self.effective_loss();
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("k_tasks", s.k_tasks.to_string());
        kv("cats_per_task", s.cats_per_task.to_string());
        kv("shots", s.shots.to_string());
        kv("test_per_cat", s.test_per_cat.to_string());
        kv("tokens", s.tokens.to_string());
        kv("frames", s.frames.to_string());
        kv("token_noise", s.token_noise.to_string());
        kv("frame_noise", s.frame_noise.to_string());
        kv("instance_noise", s.instance_noise.to_string());
        kv("modality_gap", s.modality_gap.to_string());
        kv("task_spread", s.task_spread.to_string());
        kv("domain_shift", s.domain_shift.to_string());
        kv("instance_rank", s.instance_rank.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch", t.batch.to_string());
        kv("lr_base", t.lr_base.to_string());
        kv("lr_incr", t.lr_incr.to_string());
        kv("lambda1", l.lambda1.to_string());
        kv("lambda2", l.lambda2.to_string());
        kv("tau", l.tau.to_string());
        kv("tau2", l.tau2.to_string());
        kv("sigma", l.sigma.to_string());
        kv("pseudo_per_cat", l.pseudo_per_category.to_string());
        kv("crp_symmetric", l.crp_symmetric.to_string());
        kv("experts", e.experts.to_string());
        kv("k_e", e.active_experts.to_string());
        kv("expert_rank", e.expert_rank.to_string());
        kv("lora_rank", e.lora_rank.to_string());
        kv("layers", e.layers.to_string());
        kv("head_hidden", e.head_hidden.to_string());
        kv("base_scale", e.base_scale.to_string());
        kv("dims", format!("{},{}", s.width, e.proto_dim));
        kv("seed", self.seed.to_string());
        kv("ablation", self.ablation.name().to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.categories(), 20);
        assert_eq!(ExperimentConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn parse_keys_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# desk run\nk_tasks = 2\ncats_per_task=3 # trailing\n\ndims = 24, 8\nlambda2 = 2.5\nablation = crp\ncrp_symmetric = false\n",
        )
        .unwrap();
        assert_eq!(cfg.stream.k_tasks, 2);
        assert_eq!(cfg.stream.cats_per_task, 3);
        assert_eq!((cfg.stream.width, cfg.encoder.width, cfg.encoder.proto_dim), (24, 24, 8));
        assert_eq!(cfg.loss.lambda2, 2.5);
        assert_eq!(cfg.ablation, Ablation::Crp);
        assert!(!cfg.loss.crp_symmetric);
        assert_eq!(cfg.effective_loss().lambda1, 0.0);
        assert_eq!(cfg.effective_loss().lambda2, 2.5);
    }

    #[test]
    fn parse_errors() {
        for bad in [
            "colour = red",
            "k_tasks = two",
            "k_tasks = 2\nk_tasks = 3",
            "just words",
            "dims = 32",
            "ablation = everything",
            "k_e = 9",
            "tau = 0",
            "dims = 32,4",
        ] {
            assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn echo_round_trips_effective_config() {
        let mut cfg = ExperimentConfig::parse("ablation = framework\nseed = 7").unwrap();
        let echoed = ExperimentConfig::parse(&cfg.echo()).unwrap();
        assert!(cfg.echo().contains("lambda1 = 0\n"));
        assert!(cfg.echo().contains("lambda2 = 0\n"));
        cfg.ablation.apply(&mut cfg.loss);
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn ablation_arms() {
        let base = LossConfig::default();
        let arm = |a: Ablation| {
            let mut l = base.clone();
            a.apply(&mut l);
            (l.lambda1, l.lambda2)
        };
        assert_eq!(arm(Ablation::Framework), (0.0, 0.0));
        assert_eq!(arm(Ablation::Crp), (0.0, base.lambda2));
        assert_eq!(arm(Ablation::Cetf), (base.lambda1, 0.0));
        assert_eq!(arm(Ablation::Full), (base.lambda1, base.lambda2));
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }
}
