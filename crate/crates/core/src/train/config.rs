//! Run configuration and its digests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::DecoderKind;
use crate::prompter::{Design, FramePrompterConfig};
use crate::qformer::QFormerConfig;
use crate::surrogate::VqaLoss;
use crate::synth::DatasetSpec;

use super::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Student,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Student => "student",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Stage::Teacher),
            "student" => Ok(Stage::Student),
            other => Err(Error::config("stage", format!("expected teacher or student, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl StageConfig {
    fn validate(&self, stage: &str) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config(format!("{stage}.steps"), "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{stage}.batch_size"), "must be >= 1"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > o.lr {
            return Err(Error::config(format!("{stage}.optimizer.lr"), "need 0 <= lr_min <= lr and lr > 0"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config(format!("{stage}.optimizer.beta1/beta2"), "must lie in [0, 1)"));
        }
        if o.weight_decay < 0.0 || !(o.eps > 0.0) || self.grad_clip < 0.0 {
            return Err(Error::config(format!("{stage}.optimizer"), "weight_decay, grad_clip >= 0 and eps > 0"));
        }
        Ok(())
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.01,
                ..Default::default()
            },
            lr_min: 1e-4,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub qformer: QFormerConfig,
    pub vocab: usize,
    pub max_text_len: usize,
    pub decoder: DecoderKind,
    pub loss: VqaLoss,
    /// Seed of the fixed visual encoder projection.
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            qformer: QFormerConfig::default(),
            vocab: 64,
            max_text_len: 8,
            decoder: DecoderKind::FcLn,
            loss: VqaLoss::CrossEntropy,
            encoder_seed: 11,
        }
    }
}

/// Frame-prompter settings that are not implied by the data or model widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    /// Frames the student reads (`S`).
    pub segments: usize,
    pub design: Design,
    pub embed_hidden: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub straight_through: bool,
    pub keep_bias: f64,
    /// Multiplier on the stage learning rate for the prompter's parameters.
    pub lr_scale: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        let p = FramePrompterConfig::default();
        Self {
            segments: p.segments,
            design: p.design,
            embed_hidden: p.embed_hidden,
            tau_start: p.tau_start,
            tau_end: p.tau_end,
            straight_through: p.straight_through,
            keep_bias: p.keep_bias,
            lr_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Added to `seed` for everything the student stage draws, so several
    /// student runs can share one teacher.
    pub student_seed_offset: u64,
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub selector: SelectorConfig,
    pub teacher: StageConfig,
    pub student: StageConfig,
    pub lambda_distill: f64,
    /// Without the prompter the student reads `S` uniformly spaced frames.
    pub use_prompter: bool,
    /// Train the answer head and text encoder in the student stage too.
    pub unfreeze_head_in_student: bool,
    /// Validation pass every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Intermediate checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Check frozen parameters after every student step.
    pub audit_frozen: bool,
    /// Include wall-clock time in metrics rows. Off by default so metrics
    /// files are reproducible byte for byte.
    pub record_wallclock: bool,
    pub output_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            student_seed_offset: 0,
            data: DatasetSpec::default(),
            model: ModelConfig::default(),
            selector: SelectorConfig::default(),
            teacher: StageConfig {
                steps: 800,
                ..Default::default()
            },
            student: StageConfig::default(),
            lambda_distill: 1.0,
            use_prompter: true,
            unfreeze_head_in_student: false,
            eval_every: 0,
            checkpoint_every: 0,
            audit_frozen: true,
            record_wallclock: false,
            output_dir: "runs/default".to_string(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.qformer.validate()?;
        self.prompter_config().validate()?;
        self.teacher.validate("teacher")?;
        self.student.validate("student")?;
        if !(self.selector.lr_scale > 0.0) {
            return Err(Error::config("selector.lr_scale", "must be > 0"));
        }
        if !(self.lambda_distill >= 0.0) {
            return Err(Error::config("lambda_distill", "must be >= 0"));
        }
        if self.model.vocab < self.data.vocab_size() {
            return Err(Error::config(
                "model.vocab",
                format!("must be >= {} for this dataset", self.data.vocab_size()),
            ));
        }
        if self.model.max_text_len < self.data.question_len().max(self.data.choice_len()) {
            return Err(Error::config("model.max_text_len", "shorter than the generated token rows"));
        }
        if self.model.channels == 0 {
            return Err(Error::config("model.channels", "must be >= 1"));
        }
        Ok(())
    }

    pub fn prompter_config(&self) -> FramePrompterConfig {
        let s = &self.selector;
        FramePrompterConfig {
            frames: self.data.frames,
            segments: s.segments,
            patches: self.data.patches,
            channels: self.model.channels,
            d_model: self.model.qformer.d_model,
            embed_hidden: s.embed_hidden,
            num_heads: self.model.qformer.num_heads,
            design: s.design,
            tau_start: s.tau_start,
            tau_end: s.tau_end,
            straight_through: s.straight_through,
            keep_bias: s.keep_bias,
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Teacher => &self.teacher,
            Stage::Student => &self.student,
        }
    }

    pub fn optimizer_for(&self, stage: Stage) -> &AdamWConfig {
        &self.stage(stage).optimizer
    }

    pub fn student_seed(&self) -> u64 {
        self.seed.wrapping_add(self.student_seed_offset)
    }

    /// Identity of everything the teacher stage depends on. The distillation
    /// decoder is student-only and excluded.
    pub fn teacher_digest(&self) -> String {
        let mut model = self.model.clone();
        model.decoder = DecoderKind::default();
        let key = serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "model": model,
            "teacher": self.teacher,
        });
        sha256_hex(key.to_string().as_bytes())
    }

    /// Identity of the whole run, ignoring where outputs go and whether
    /// wall-clock time is logged.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        c.record_wallclock = false;
        c.eval_every = 0;
        c.checkpoint_every = 0;
        sha256_hex(serde_json::to_string(&c).expect("config serialises").as_bytes())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
