//! The optimisation loop shared by both stages.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::prompter::tau_schedule;
use crate::qformer::index_overlap;
use crate::surrogate::vqa_loss;

use super::checkpoint::{Checkpoint, RngState};
use super::config::{Stage, TrainConfig};
use super::eval::{evaluate, EvalMode, EvalOutcome};
use super::metrics::MetricsRow;
use super::model::{batch_accuracy, keyframe_recall, Model, Prepared, GROUPS};
use super::optim::{clip_global_norm, cosine_lr, AdamW};

/// Random stream for one optimisation step: batch draw and Gumbel noise.
/// Depends only on the stage seed and the step index, so a resumed run
/// replays exactly.
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> ChaCha8Rng {
    let tag = match stage {
        Stage::Teacher => 0x7465_6163_6865_7200,
        Stage::Student => 0x7374_7564_656e_7400,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(step as u64);
    rng
}

/// Parameter groups a checkpoint of `stage` carries.
pub fn stored_groups(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Teacher => &["text", "head", "teacher"],
        Stage::Student => &GROUPS,
    }
}

/// Rebuilds the model a checkpoint was taken from.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(&ck.config)?;
    model.load_groups(stored_groups(ck.stage), &ck.tensors)?;
    Ok(model)
}

pub struct Trainer<'a> {
    pub model: Model,
    pub stage: Stage,
    pub opt: AdamW,
    /// Completed optimisation steps.
    pub step: usize,
    pub data: &'a Prepared,
    pub exec: Execution,
    /// Selections of a reference run, compared against in evaluation rows.
    pub reference: Option<Vec<Vec<usize>>>,
    frozen: BTreeMap<String, Tensor>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn teacher(cfg: &TrainConfig, data: &'a Prepared, exec: Execution) -> Result<Self> {
        Self::with_model(Model::new(cfg)?, Stage::Teacher, data, exec)
    }

    /// Starts the student stage from a finished teacher checkpoint.
    pub fn student(cfg: &TrainConfig, teacher: &Checkpoint, data: &'a Prepared, exec: Execution) -> Result<Self> {
        if teacher.stage != Stage::Teacher {
            return Err(Error::Checkpoint(format!(
                "expected a teacher checkpoint, got stage {}",
                teacher.stage.name()
            )));
        }
        if !teacher.is_complete() {
            return Err(Error::Checkpoint(format!(
                "teacher checkpoint is at step {} of {}",
                teacher.step, teacher.total_steps
            )));
        }
        if teacher.teacher_digest != cfg.teacher_digest() {
            return Err(Error::Checkpoint(
                "config digest mismatch: teacher checkpoint was trained with a different teacher config".into(),
            ));
        }
        let mut model = Model::new(cfg)?;
        model.load_groups(stored_groups(Stage::Teacher), &teacher.tensors)?;
        Self::with_model(model, Stage::Student, data, exec)
    }

    /// Continues a run from a mid-run checkpoint of the same config.
    pub fn resume(cfg: &TrainConfig, ck: &Checkpoint, data: &'a Prepared, exec: Execution) -> Result<Self> {
        if ck.config_digest != cfg.digest() {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch on resume: checkpoint {} vs config {}",
                ck.config_digest,
                cfg.digest()
            )));
        }
        let mut model = Model::new(cfg)?;
        model.load_groups(stored_groups(ck.stage), &ck.tensors)?;
        let mut t = Self::with_model(model, ck.stage, data, exec)?;
        t.opt = ck.optimizer.clone();
        t.step = ck.step;
        Ok(t)
    }

    fn with_model(model: Model, stage: Stage, data: &'a Prepared, exec: Execution) -> Result<Self> {
        let cfg = &model.cfg;
        if data.data.spec != cfg.data {
            return Err(Error::config(
                "data",
                format!(
                    "dataset does not match the config (T={} vs T={})",
                    data.data.spec.frames, cfg.data.frames
                ),
            ));
        }
        let opt = AdamW::new(cfg.optimizer_for(stage).clone());
        let trainable = model.trainable_groups(stage);
        let frozen_groups: Vec<&str> = GROUPS.iter().copied().filter(|g| !trainable.contains(g)).collect();
        let mut frozen = model.group_tensors(&frozen_groups);
        frozen.insert(super::model::ENCODER_NAME.into(), model.encoder.projection.clone());
        Ok(Self {
            model,
            stage,
            opt,
            step: 0,
            data,
            exec,
            reference: None,
            frozen,
            started: Instant::now(),
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.model.cfg
    }

    pub fn total_steps(&self) -> usize {
        self.cfg().stage(self.stage).steps
    }

    pub fn seed(&self) -> u64 {
        match self.stage {
            Stage::Teacher => self.cfg().seed,
            Stage::Student => self.cfg().student_seed(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// One optimisation step; returns its training row.
    pub fn step_once(&mut self) -> Result<MetricsRow> {
        let step = self.step;
        let total = self.total_steps();
        let sc = self.cfg().stage(self.stage).clone();
        let lr = cosine_lr(step, total, sc.optimizer.lr, sc.lr_min)?;
        let mut rng = step_rng(self.seed(), self.stage, step);
        let n = self.data.data.train.len();
        let idx = rand::seq::index::sample(&mut rng, n, sc.batch_size.min(n)).into_vec();
        let batch = self.data.train_batch(&idx)?;

        let mut g = Graph::new();
        self.model.bind(&mut g, self.stage);
        let (total_loss, vqa, distill, logits, recall, tau) = match self.stage {
            Stage::Teacher => {
                let logits = self.model.teacher_logits(&mut g, &batch)?;
                let vqa = vqa_loss(&mut g, logits, &batch.answers, self.cfg().model.loss)?;
                (vqa, vqa, None, logits, None, None)
            }
            Stage::Student => {
                let s = &self.cfg().selector;
                let tau = tau_schedule(step, total, s.tau_start, s.tau_end)?;
                let (t, vqa, distill, out) = self.model.student_loss(&mut g, &batch, tau, &mut rng)?;
                let recall = self.cfg().use_prompter.then(|| keyframe_recall(&out.selected, &batch.keyframes));
                (t, vqa, distill, out.logits, recall, Some(tau))
            }
        };
        let loss_total = g.value(total_loss).item();
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let loss_vqa = g.value(vqa).item();
        let loss_distill = distill.map(|d| g.value(d).item());
        let accuracy = batch_accuracy(g.value(logits), &batch.answers);
        g.backward(total_loss)?;

        if self.cfg().audit_frozen {
            if let Some(name) = self.model.frozen_gradient_violations(&g, self.stage).into_iter().next() {
                return Err(Error::FrozenGradient { name });
            }
        }
        let mut grads = self.model.trainable_grads(&g, self.stage);
        drop(g);
        for (name, t) in &grads {
            if !t.is_finite() {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        let grad_norm = clip_global_norm(&mut grads, sc.grad_clip);
        let clipped = grad_norm > sc.grad_clip;
        if clipped {
            log::debug!("step {step}: gradient norm {grad_norm:.4} clipped to {}", sc.grad_clip);
        }
        self.opt.begin_step();
        for group in self.model.trainable_groups(self.stage) {
            self.update_group(group, &grads, lr)?;
        }
        if self.cfg().audit_frozen {
            self.audit_frozen_values()?;
        }
        self.step += 1;
        Ok(MetricsRow {
            step,
            split: "train".into(),
            loss_vqa: Some(loss_vqa),
            loss_distill,
            loss_total: Some(loss_total),
            accuracy,
            keyframe_recall: recall,
            selection_overlap: None,
            tau,
            lr: Some(lr),
            grad_norm: Some(grad_norm),
            clipped: Some(clipped),
            wallclock_ms: self.wallclock(),
        })
    }

    fn wallclock(&self) -> Option<f64> {
        self.cfg()
            .record_wallclock
            .then(|| self.started.elapsed().as_secs_f64() * 1e3)
    }

    fn update_group(&mut self, group: &str, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.opt;
        match group {
            "text" => o.update(&mut m.text, "text", grads, lr),
            "head" => o.update(&mut m.head, "head", grads, lr),
            "teacher" => o.update(&mut m.teacher, "teacher", grads, lr),
            "student" => o.update(&mut m.student, "student", grads, lr),
            "prompter" => o.update(&mut m.prompter, "prompter", grads, lr * m.cfg.selector.lr_scale),
            "decoder" => o.update(&mut m.decoder, "decoder", grads, lr),
            other => unreachable!("unknown group {other}"),
        }
    }

    /// Frozen parameters must be bit-identical to their values at stage start.
    pub fn audit_frozen_values(&self) -> Result<()> {
        let current = self.model.named_tensors();
        for (name, before) in &self.frozen {
            if current.get(name) != Some(before) {
                return Err(Error::FrozenGradient { name: name.clone() });
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, mode: EvalMode) -> Result<EvalOutcome> {
        evaluate(&self.model, self.stage, self.data, mode, self.exec)
    }

    /// Validation row at the current step.
    pub fn eval_row(&self) -> Result<(MetricsRow, EvalOutcome)> {
        let out = self.evaluate(EvalMode::Hard)?;
        let mut row = MetricsRow::eval(self.step, out.accuracy, out.keyframe_recall);
        if let (Some(reference), Some(sel)) = (&self.reference, &out.selections) {
            row.selection_overlap = Some(index_overlap(sel, reference)?);
        }
        row.wallclock_ms = self.wallclock();
        Ok((row, out))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = self.cfg();
        let tensors = match self.stage {
            Stage::Teacher => {
                let mut t = self.model.group_tensors(stored_groups(Stage::Teacher));
                t.insert(super::model::ENCODER_NAME.into(), self.model.encoder.projection.clone());
                t
            }
            Stage::Student => self.model.named_tensors(),
        };
        Checkpoint {
            stage: self.stage,
            step: self.step,
            total_steps: self.total_steps(),
            config_digest: cfg.digest(),
            teacher_digest: cfg.teacher_digest(),
            config: cfg.clone(),
            rng: RngState {
                seed: self.seed(),
                next_step: self.step,
            },
            tensors,
            optimizer: self.opt.clone(),
        }
    }

    /// Runs to the end of the stage. Every training row, the periodic and
    /// final evaluation rows, and periodic checkpoints go to the callbacks.
    pub fn run(
        &mut self,
        mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<EvalOutcome> {
        let (eval_every, ckpt_every) = (self.cfg().eval_every, self.cfg().checkpoint_every);
        while !self.is_done() {
            let row = self.step_once()?;
            on_row(&row)?;
            if eval_every > 0 && self.step % eval_every == 0 && !self.is_done() {
                on_row(&self.eval_row()?.0)?;
            }
            if ckpt_every > 0 && self.step % ckpt_every == 0 && !self.is_done() {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        let (row, out) = self.eval_row()?;
        on_row(&row)?;
        on_checkpoint(&self.checkpoint())?;
        Ok(out)
    }
}
