use crate::correlation::CorrMode;
use crate::error::{Error, Result};
use crate::kv::{self, KvFile};
use crate::losses::{
    LossWeights, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_PAIR_CAP, DEFAULT_TAU_NEG,
};
use crate::synthdata::SpecSampler;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "RBO_SEED";

/// Total stride of the backbone.
pub const STRIDE: usize = 8;

/// Which optional objectives are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossFlags {
    pub rank_cls: bool,
    pub rank_iou: bool,
    pub rank_iou_ori: bool,
    pub two_stage_ce: bool,
}

impl LossFlags {
    pub fn validate(&self) -> Result<()> {
        if self.rank_iou && self.rank_iou_ori {
            return Err(Error::config(
                "rank_iou_ori",
                "cannot be combined with rank_iou; pick one IoU ranking variant",
            ));
        }
        Ok(())
    }
}

/// Everything a training run depends on. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub template_size: usize,
    pub search_size: usize,
    pub mode: CorrMode,
    pub hidden: usize,
    pub flags: LossFlags,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau_neg: f64,
    /// Sharpness of the coupled pairwise IoU baseline.
    pub alpha_ori: f64,
    pub weights: LossWeights,
    pub pair_cap: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Largest global gradient norm per step; 0 disables clipping.
    pub clip_norm: f64,
    /// L2 penalty coefficient added to every gradient.
    pub weight_decay: f64,
    pub batch: usize,
    pub iterations: usize,
    /// Iterations trained with the ranking terms switched off.
    pub warmup: usize,
    /// Largest search-centre offset in search-crop pixels.
    pub jitter: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub similarity_min: f64,
    pub similarity_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            template_size: 64,
            search_size: 128,
            mode: CorrMode::DepthWise,
            hidden: 32,
            flags: LossFlags::default(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            tau_neg: DEFAULT_TAU_NEG,
            alpha_ori: 4.0,
            weights: LossWeights::default(),
            pair_cap: DEFAULT_PAIR_CAP,
            lr: 0.01,
            momentum: 0.9,
            clip_norm: 1.0,
            weight_decay: 0.0,
            batch: 8,
            iterations: 1600,
            warmup: 0,
            jitter: 24.0,
            distractors_min: 1,
            distractors_max: 3,
            similarity_min: 0.6,
            similarity_max: 0.9,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "template_size",
    "search_size",
    "mode",
    "hidden",
    "rank_cls",
    "rank_iou",
    "rank_iou_ori",
    "two_stage_ce",
    "alpha",
    "beta",
    "gamma",
    "tau_neg",
    "alpha_ori",
    "w_base",
    "w_rank_cls",
    "w_rank_iou",
    "pair_cap",
    "lr",
    "momentum",
    "clip_norm",
    "weight_decay",
    "batch",
    "iterations",
    "warmup",
    "jitter",
    "distractors_min",
    "distractors_max",
    "similarity_min",
    "similarity_max",
];

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let d = Self::default();
        let mode = match kv.get_str("mode") {
            None => d.mode,
            Some(s) => CorrMode::parse(s)
                .ok_or_else(|| Error::config("mode", format!("expected `dw` or `pw`, got `{s}`")))?,
        };
        let cfg = Self {
            seed: kv.get("seed", d.seed)?,
            template_size: kv.get("template_size", d.template_size)?,
            search_size: kv.get("search_size", d.search_size)?,
            mode,
            hidden: kv.get("hidden", d.hidden)?,
            flags: LossFlags {
                rank_cls: kv.get_bool("rank_cls", false)?,
                rank_iou: kv.get_bool("rank_iou", false)?,
                rank_iou_ori: kv.get_bool("rank_iou_ori", false)?,
                two_stage_ce: kv.get_bool("two_stage_ce", false)?,
            },
            alpha: kv.get("alpha", d.alpha)?,
            beta: kv.get("beta", d.beta)?,
            gamma: kv.get("gamma", d.gamma)?,
            tau_neg: kv.get("tau_neg", d.tau_neg)?,
            alpha_ori: kv.get("alpha_ori", d.alpha_ori)?,
            weights: LossWeights {
                base: kv.get("w_base", d.weights.base)?,
                rank_cls: kv.get("w_rank_cls", d.weights.rank_cls)?,
                rank_iou: kv.get("w_rank_iou", d.weights.rank_iou)?,
            },
            pair_cap: kv.get("pair_cap", d.pair_cap)?,
            lr: kv.get("lr", d.lr)?,
            momentum: kv.get("momentum", d.momentum)?,
            clip_norm: kv.get("clip_norm", d.clip_norm)?,
            weight_decay: kv.get("weight_decay", d.weight_decay)?,
            batch: kv.get("batch", d.batch)?,
            iterations: kv.get("iterations", d.iterations)?,
            warmup: kv.get("warmup", d.warmup)?,
            jitter: kv.get("jitter", d.jitter)?,
            distractors_min: kv.get("distractors_min", d.distractors_min)?,
            distractors_max: kv.get("distractors_max", d.distractors_max)?,
            similarity_min: kv.get("similarity_min", d.similarity_min)?,
            similarity_max: kv.get("similarity_max", d.similarity_max)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    /// Replaces the seed with `RBO_SEED` when that variable is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|e| Error::config(SEED_ENV, format!("cannot parse `{raw}`: {e}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        for (field, size) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if size == 0 || size % STRIDE != 0 {
                return Err(Error::config(field, format!("must be a positive multiple of {STRIDE}")));
            }
        }
        if self.search_size < self.template_size {
            return Err(Error::config("search_size", "must be at least template_size"));
        }
        for (f, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("alpha_ori", self.alpha_ori),
            ("lr", self.lr),
        ] {
            positive(f, v)?;
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.tau_neg) {
            return Err(Error::config("tau_neg", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        for (f, v) in [
            ("w_base", self.weights.base),
            ("w_rank_cls", self.weights.rank_cls),
            ("w_rank_iou", self.weights.rank_iou),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(f, "must be non-negative"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("clip_norm", "must be non-negative"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.pair_cap < 2 {
            return Err(Error::config("pair_cap", "must be at least 2"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("jitter", "must be non-negative"));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::config("distractors_min", "exceeds distractors_max"));
        }
        let sim_ok = (0.0..=1.0).contains(&self.similarity_min)
            && (0.0..=1.0).contains(&self.similarity_max)
            && self.similarity_min <= self.similarity_max;
        if !sim_ok {
            return Err(Error::config("similarity_min", "similarity range must be ordered within [0, 1]"));
        }
        Ok(())
    }

    /// Training-stream scene sampler implied by the config.
    pub fn sampler(&self) -> SpecSampler {
        SpecSampler {
            distractors: (self.distractors_min, self.distractors_max),
            similarity: (self.similarity_min, self.similarity_max),
            ..SpecSampler::default()
        }
    }

    /// Canonical `key = value` echo of every field.
    pub fn to_kv(&self) -> String {
        let f = &self.flags;
        kv::render([
            ("seed", self.seed.to_string()),
            ("template_size", self.template_size.to_string()),
            ("search_size", self.search_size.to_string()),
            ("mode", self.mode.name().to_string()),
            ("hidden", self.hidden.to_string()),
            ("rank_cls", f.rank_cls.to_string()),
            ("rank_iou", f.rank_iou.to_string()),
            ("rank_iou_ori", f.rank_iou_ori.to_string()),
            ("two_stage_ce", f.two_stage_ce.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("tau_neg", self.tau_neg.to_string()),
            ("alpha_ori", self.alpha_ori.to_string()),
            ("w_base", self.weights.base.to_string()),
            ("w_rank_cls", self.weights.rank_cls.to_string()),
            ("w_rank_iou", self.weights.rank_iou.to_string()),
            ("pair_cap", self.pair_cap.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch", self.batch.to_string()),
            ("iterations", self.iterations.to_string()),
            ("warmup", self.warmup.to_string()),
            ("jitter", self.jitter.to_string()),
            ("distractors_min", self.distractors_min.to_string()),
            ("distractors_max", self.distractors_max.to_string()),
            ("similarity_min", self.similarity_min.to_string()),
            ("similarity_max", self.similarity_max.to_string()),
        ])
    }
}
