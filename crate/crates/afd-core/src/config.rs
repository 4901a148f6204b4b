//! Run configuration: every hyperparameter, protocol setting, and ablation
//! flag in one serializable struct with working defaults, so an empty config
//! file is runnable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    DomainIncremental,
    TimeIncremental,
    PermutationSuite,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    /// Number of tasks K.
    pub tasks: usize,
    /// Explicit task order (permutation of 0..K); identity when absent.
    pub order: Option<Vec<usize>>,
    /// Reuse task 0's domain parameters for every task (no distribution
    /// shift); used as a stationarity control.
    pub stationary: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::DomainIncremental,
            tasks: 6,
            order: None,
            stationary: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// Frames per clip T.
    pub frames: usize,
    /// Raw frame feature width d_v.
    pub feature_dim: usize,
    /// Ground-truth affordance clusters.
    pub clusters: usize,
    /// Additive Gaussian noise scale on rendered frames.
    pub noise: f64,
    /// Domain rotation angle increment per task (radians).
    pub rotation_step: f64,
    /// Anisotropic per-dimension scale jitter amplitude per task domain.
    pub scale_jitter: f64,
    /// Markov self-transition probability of the latent cluster chain.
    pub markov_stay: f64,
    /// Weak-label spans emitted per sample.
    pub weak_spans: usize,
    /// Fixed probe clips used for representation diagnostics.
    pub probe_clips: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            train_per_task: 256,
            test_per_task: 128,
            frames: 8,
            feature_dim: 32,
            clusters: 8,
            noise: 0.05,
            rotation_step: 0.35,
            scale_jitter: 0.5,
            markov_stay: 0.6,
            weak_spans: 2,
            probe_clips: 256,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Affordance vocabulary size |V_A|.
    pub vocab_a: usize,
    /// Affordance token width d_a.
    pub token_dim: usize,
    /// Frame-encoder output width d_z.
    pub latent_dim: usize,
    /// Frame-encoder hidden width.
    pub encoder_hidden: usize,
    /// Scheduler hidden width d_model (= query embedding width d_q).
    pub model_dim: usize,
    /// Affordance softmax temperature tau.
    pub temperature: f64,
    /// Sparse mixture support size L.
    pub top_l: usize,
    /// Hashed query vocabulary size.
    pub llm_vocab: usize,
    /// Routed layers in the scheduler stack.
    pub layers: usize,
    /// LoRA experts per layer m.
    pub experts: usize,
    pub rank_init: usize,
    pub rank_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_a: 64,
            token_dim: 16,
            latent_dim: 16,
            encoder_hidden: 64,
            model_dim: 32,
            temperature: 0.07,
            top_l: 8,
            llm_vocab: 512,
            layers: 6,
            experts: 4,
            rank_init: 8,
            rank_max: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps_per_task: usize,
    pub batch: usize,
    pub replay_batch: usize,
    /// SGD learning rate eta.
    pub lr: f64,
    /// Gradient clipping threshold (global norm, per parameter group).
    pub clip: f64,
    pub lambda_aff: f64,
    pub lambda_rep: f64,
    /// Weak-alignment vs teacher-consistency blend in the stability loss.
    pub beta: f64,
    /// Span-head tIoU penalty weight lambda_u.
    pub span_weight: f64,
    /// Distillation temperature T_kd.
    pub kd_temperature: f64,
    /// Teacher confidence mask rho.
    pub confidence: f64,
    /// Mid-task evaluation cadence (steps).
    pub eval_every: usize,
    /// Conflict measurement / growth cadence (steps).
    pub conflict_every: usize,
    pub ema_decay: f64,
    /// Numerical stabilizer in the conflict cosine.
    pub conflict_epsilon: f64,
    /// Tikhonov ridge for projections when seeding new adapter columns.
    pub ridge: f64,
    /// Conflict threshold tau_c.
    pub grow_threshold: f64,
    /// Growth gain gamma.
    pub grow_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_per_task: 2000,
            batch: 4,
            replay_batch: 2,
            lr: 0.05,
            clip: 1.0,
            lambda_aff: 0.5,
            lambda_rep: 0.5,
            beta: 0.5,
            span_weight: 1.0,
            kd_temperature: 2.0,
            confidence: 0.6,
            eval_every: 500,
            conflict_every: 100,
            ema_decay: 0.9,
            conflict_epsilon: 1e-8,
            ridge: 1e-6,
            grow_threshold: 0.2,
            grow_gain: 6.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Question memory budget B_Q.
    pub question_budget: usize,
    /// Prototype memory budget B_A.
    pub prototype_budget: usize,
    pub hash_bits: u32,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            question_budget: 8000,
            prototype_budget: 1000,
            hash_bits: 32,
        }
    }
}

/// Single-factor ablation switches that have no plain hyperparameter home.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Feed encoder output straight to the projections (no vocabulary, no
    /// sparse mixture, no embedding table).
    pub bypass_tokens: bool,
    /// Replace the learned router with a uniform mixture.
    pub uniform_router: bool,
    /// Freeze adapter ranks at initialization (no growth).
    pub fixed_rank: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub protocol: ProtocolConfig,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub memory: MemoryConfig,
    pub ablation: AblationConfig,
    pub seed: u64,
    /// Seed set for multi-seed suites (ablate, orders).
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolConfig::default(),
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            memory: MemoryConfig::default(),
            ablation: AblationConfig::default(),
            seed: 42,
            seeds: vec![1, 2, 3],
        }
    }
}

macro_rules! check {
    ($cond:expr, $field:literal, $msg:expr) => {
        if !$cond {
            return Err(Error::Config(format!("{}: {}", $field, $msg)));
        }
    };
}

impl RunConfig {
    /// Validates every module precondition before a run starts. Errors name
    /// the offending field.
    pub fn validate(&self) -> Result<()> {
        check!(self.protocol.tasks >= 1, "protocol.tasks", "must be >= 1");
        if let Some(order) = &self.protocol.order {
            let mut seen = vec![false; self.protocol.tasks];
            check!(
                order.len() == self.protocol.tasks,
                "protocol.order",
                "must be a permutation of 0..tasks"
            );
            for &t in order {
                check!(
                    t < self.protocol.tasks && !seen[t],
                    "protocol.order",
                    "must be a permutation of 0..tasks"
                );
                seen[t] = true;
            }
        }
        check!(
            self.stream.train_per_task >= 16,
            "stream.train_per_task",
            "must be >= 16"
        );
        check!(self.stream.test_per_task >= 1, "stream.test_per_task", "must be >= 1");
        check!(self.stream.frames >= 2, "stream.frames", "must be >= 2");
        check!(self.stream.clusters >= 2, "stream.clusters", "must be >= 2");
        check!(
            self.stream.clusters <= self.model.vocab_a,
            "stream.clusters",
            "must not exceed model.vocab_a"
        );
        check!(
            self.stream.clusters <= self.stream.feature_dim,
            "stream.clusters",
            "must not exceed stream.feature_dim"
        );
        check!(self.stream.noise >= 0.0, "stream.noise", "must be non-negative");
        check!(
            (0.0..1.0).contains(&self.stream.markov_stay) || self.stream.markov_stay == 1.0,
            "stream.markov_stay",
            "must lie in [0, 1]"
        );
        check!(self.stream.probe_clips >= 2, "stream.probe_clips", "must be >= 2");

        check!(self.model.temperature > 0.0, "model.temperature", "must be positive");
        check!(self.model.top_l >= 1, "model.top_l", "must be >= 1");
        check!(
            self.model.top_l <= self.model.vocab_a,
            "model.top_l",
            "must not exceed model.vocab_a"
        );
        check!(self.model.layers >= 1, "model.layers", "must be >= 1");
        check!(self.model.experts >= 1, "model.experts", "must be >= 1");
        check!(self.model.rank_init >= 1, "model.rank_init", "must be >= 1");
        check!(
            self.model.rank_init <= self.model.rank_max,
            "model.rank_init",
            "must not exceed model.rank_max"
        );
        check!(self.model.llm_vocab >= 2, "model.llm_vocab", "must be >= 2");
        if self.ablation.bypass_tokens {
            check!(
                self.model.latent_dim == self.model.token_dim,
                "ablation.bypass_tokens",
                "requires model.latent_dim == model.token_dim"
            );
        }

        check!(self.train.steps_per_task >= 1, "train.steps_per_task", "must be >= 1");
        check!(self.train.batch >= 1, "train.batch", "must be >= 1");
        check!(self.train.lr >= 0.0, "train.lr", "must be non-negative");
        check!(self.train.clip > 0.0, "train.clip", "must be positive");
        check!(self.train.lambda_aff >= 0.0, "train.lambda_aff", "must be non-negative");
        check!(self.train.lambda_rep >= 0.0, "train.lambda_rep", "must be non-negative");
        check!(
            (0.0..=1.0).contains(&self.train.beta),
            "train.beta",
            "must lie in [0, 1]"
        );
        check!(self.train.span_weight >= 0.0, "train.span_weight", "must be non-negative");
        check!(
            self.train.kd_temperature > 0.0,
            "train.kd_temperature",
            "must be positive"
        );
        check!(
            self.train.confidence > 0.0 && self.train.confidence < 1.0,
            "train.confidence",
            "must lie in (0, 1)"
        );
        check!(self.train.eval_every >= 1, "train.eval_every", "must be >= 1");
        check!(self.train.conflict_every >= 1, "train.conflict_every", "must be >= 1");
        check!(
            self.train.ema_decay > 0.0 && self.train.ema_decay < 1.0,
            "train.ema_decay",
            "must lie in (0, 1)"
        );
        check!(
            self.train.conflict_epsilon > 0.0,
            "train.conflict_epsilon",
            "must be positive"
        );
        check!(self.train.ridge >= 0.0, "train.ridge", "must be non-negative");
        check!(
            (0.0..1.0).contains(&self.train.grow_threshold),
            "train.grow_threshold",
            "must lie in [0, 1)"
        );
        check!(self.train.grow_gain > 0.0, "train.grow_gain", "must be positive");

        check!(
            self.memory.question_budget >= 1,
            "memory.question_budget",
            "must be >= 1"
        );
        check!(
            self.memory.prototype_budget >= self.stream.clusters,
            "memory.prototype_budget",
            "must be >= stream.clusters"
        );
        check!(
            self.memory.hash_bits >= 1 && self.memory.hash_bits <= 64,
            "memory.hash_bits",
            "must lie in [1, 64]"
        );
        check!(!self.seeds.is_empty(), "seeds", "must not be empty");
        Ok(())
    }

    /// Applies a `key=value` override. Accepts dotted paths
    /// (`train.lambda_rep`) and unambiguous bare names (`lambda_rep`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let bare = key.rsplit('.').next().unwrap_or(key);
        match bare {
            "kind" => {
                self.protocol.kind = match value {
                    "domain-incremental" => ProtocolKind::DomainIncremental,
                    "time-incremental" => ProtocolKind::TimeIncremental,
                    "permutation-suite" => ProtocolKind::PermutationSuite,
                    other => {
                        return Err(Error::Config(format!(
                            "protocol.kind: unknown protocol {other:?}"
                        )))
                    }
                }
            }
            "tasks" => self.protocol.tasks = parse(key, value)?,
            "order" => {
                let order: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                self.protocol.order =
                    Some(order.map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))?);
            }
            "stationary" => self.protocol.stationary = parse(key, value)?,
            "train_per_task" => self.stream.train_per_task = parse(key, value)?,
            "test_per_task" => self.stream.test_per_task = parse(key, value)?,
            "frames" => self.stream.frames = parse(key, value)?,
            "feature_dim" => self.stream.feature_dim = parse(key, value)?,
            "clusters" => self.stream.clusters = parse(key, value)?,
            "noise" => self.stream.noise = parse(key, value)?,
            "rotation_step" => self.stream.rotation_step = parse(key, value)?,
            "scale_jitter" => self.stream.scale_jitter = parse(key, value)?,
            "markov_stay" => self.stream.markov_stay = parse(key, value)?,
            "weak_spans" => self.stream.weak_spans = parse(key, value)?,
            "probe_clips" => self.stream.probe_clips = parse(key, value)?,
            "vocab_a" => self.model.vocab_a = parse(key, value)?,
            "token_dim" => self.model.token_dim = parse(key, value)?,
            "latent_dim" => self.model.latent_dim = parse(key, value)?,
            "encoder_hidden" => self.model.encoder_hidden = parse(key, value)?,
            "model_dim" => self.model.model_dim = parse(key, value)?,
            "temperature" => self.model.temperature = parse(key, value)?,
            "top_l" => self.model.top_l = parse(key, value)?,
            "llm_vocab" => self.model.llm_vocab = parse(key, value)?,
            "layers" => self.model.layers = parse(key, value)?,
            "experts" => self.model.experts = parse(key, value)?,
            "rank_init" => self.model.rank_init = parse(key, value)?,
            "rank_max" => self.model.rank_max = parse(key, value)?,
            "steps_per_task" => self.train.steps_per_task = parse(key, value)?,
            "batch" => self.train.batch = parse(key, value)?,
            "replay_batch" => self.train.replay_batch = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "clip" => self.train.clip = parse(key, value)?,
            "lambda_aff" => self.train.lambda_aff = parse(key, value)?,
            "lambda_rep" => self.train.lambda_rep = parse(key, value)?,
            "beta" => self.train.beta = parse(key, value)?,
            "span_weight" => self.train.span_weight = parse(key, value)?,
            "kd_temperature" => self.train.kd_temperature = parse(key, value)?,
            "confidence" => self.train.confidence = parse(key, value)?,
            "eval_every" => self.train.eval_every = parse(key, value)?,
            "conflict_every" => self.train.conflict_every = parse(key, value)?,
            "ema_decay" => self.train.ema_decay = parse(key, value)?,
            "conflict_epsilon" => self.train.conflict_epsilon = parse(key, value)?,
            "ridge" => self.train.ridge = parse(key, value)?,
            "grow_threshold" => self.train.grow_threshold = parse(key, value)?,
            "grow_gain" => self.train.grow_gain = parse(key, value)?,
            "question_budget" => self.memory.question_budget = parse(key, value)?,
            "prototype_budget" => self.memory.prototype_budget = parse(key, value)?,
            "hash_bits" => self.memory.hash_bits = parse(key, value)?,
            "bypass_tokens" => self.ablation.bypass_tokens = parse(key, value)?,
            "uniform_router" => self.ablation.uniform_router = parse(key, value)?,
            "fixed_rank" => self.ablation.fixed_rank = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "seeds" => {
                let seeds: std::result::Result<Vec<u64>, _> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                self.seeds =
                    seeds.map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))?;
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// The eight single-factor variants plus the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Frames bypass the vocabulary and embedding table.
    BypassTokens,
    /// Uniform adapter mixing instead of the learned router.
    NoRouter,
    /// Ranks frozen at initialization.
    FixedRank,
    /// Question-only replay disabled (lambda_rep = 0).
    NoReplay,
    /// Weak-alignment term removed (beta = 0, teacher consistency only).
    NoWeakAlign,
    /// Teacher-consistency term removed (beta = 1, weak alignment only).
    NoTeacherKl,
    /// Hard sparsity: top-L = 1.
    TopOne,
    /// Reduced memory budgets (2000 / 256).
    SmallMemory,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::BypassTokens,
        Variant::NoRouter,
        Variant::FixedRank,
        Variant::NoReplay,
        Variant::NoWeakAlign,
        Variant::NoTeacherKl,
        Variant::TopOne,
        Variant::SmallMemory,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::BypassTokens => "bypass_tokens",
            Variant::NoRouter => "no_router",
            Variant::FixedRank => "fixed_rank",
            Variant::NoReplay => "no_replay",
            Variant::NoWeakAlign => "no_weak_align",
            Variant::NoTeacherKl => "no_teacher_kl",
            Variant::TopOne => "top_one",
            Variant::SmallMemory => "small_memory",
        }
    }

    /// Returns the base config with exactly this one factor changed.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::BypassTokens => cfg.ablation.bypass_tokens = true,
            Variant::NoRouter => cfg.ablation.uniform_router = true,
            Variant::FixedRank => cfg.ablation.fixed_rank = true,
            Variant::NoReplay => cfg.train.lambda_rep = 0.0,
            Variant::NoWeakAlign => cfg.train.beta = 0.0,
            Variant::NoTeacherKl => cfg.train.beta = 1.0,
            Variant::TopOne => cfg.model.top_l = 1,
            Variant::SmallMemory => {
                cfg.memory.question_budget = 2000;
                cfg.memory.prototype_budget = 256;
            }
        }
        cfg
    }
}
