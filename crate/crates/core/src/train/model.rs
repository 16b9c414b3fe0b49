//! The full pipeline: frozen visual encoder, text encoder, answer head,
//! teacher and student fusion modules, frame prompter and distillation
//! decoder, with the forward passes of both training stages.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::params::{Module, Param};
use crate::prompter::{fusion_for, mask_frame_tokens, FramePrompter, Fusion, SelectMode};
use crate::qformer::{DistillDecoder, QFormer};
use crate::surrogate::{vqa_loss, AnswerHead, TextEncoder, VisualEncoder};
use crate::synth::{uniform_indices, Dataset, SynthSample};

use super::config::{Stage, TrainConfig};

/// Named parameter groups, in checkpoint order.
pub const GROUPS: [&str; 6] = ["text", "head", "teacher", "student", "prompter", "decoder"];
pub const ENCODER_NAME: &str = "visual_encoder.projection";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Trainable,
    Frozen,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub encoder: VisualEncoder,
    pub text: TextEncoder,
    pub head: AnswerHead,
    pub teacher: QFormer,
    pub student: QFormer,
    pub prompter: FramePrompter,
    pub decoder: DistillDecoder,
}

/// Inputs of one batch with features already through the frozen encoder.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T, N, C]`.
    pub features: Tensor,
    pub questions: Vec<Vec<usize>>,
    pub choices: Vec<Vec<Vec<usize>>>,
    pub answers: Vec<usize>,
    pub keyframes: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(samples: &[&SynthSample], features: &[&Tensor]) -> Result<Self> {
        let first = features.first().ok_or(Error::EmptyDimension { op: "batch" })?;
        let mut shape = vec![features.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.numel() * features.len());
        for f in features {
            if f.shape() != first.shape() {
                return Err(Error::shape("batch", f.shape(), first.shape()));
            }
            data.extend_from_slice(f.data());
        }
        Ok(Self {
            features: Tensor::new(shape, data)?,
            questions: samples.iter().map(|s| s.question_tokens.clone()).collect(),
            choices: samples.iter().map(|s| s.choice_tokens.clone()).collect(),
            answers: samples.iter().map(|s| s.answer_idx).collect(),
            keyframes: samples.iter().map(|s| s.keyframes.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// Dataset plus encoder features for both splits.
pub struct Prepared {
    pub data: Dataset,
    pub train_features: Vec<Tensor>,
    pub val_features: Vec<Tensor>,
}

impl Prepared {
    pub fn new(data: Dataset, encoder: &VisualEncoder, exec: Execution) -> Result<Self> {
        let encode = |samples: &[SynthSample]| -> Result<Vec<Tensor>> {
            exec.map(samples, |s| encoder.encode(&s.raw_video)).into_iter().collect()
        };
        let train_features = encode(&data.train)?;
        let val_features = encode(&data.val)?;
        Ok(Self {
            data,
            train_features,
            val_features,
        })
    }

    pub fn train_batch(&self, idx: &[usize]) -> Result<Batch> {
        let s: Vec<&SynthSample> = idx.iter().map(|&i| &self.data.train[i]).collect();
        let f: Vec<&Tensor> = idx.iter().map(|&i| &self.train_features[i]).collect();
        Batch::new(&s, &f)
    }

    pub fn val_batch(&self, range: std::ops::Range<usize>) -> Result<Batch> {
        let s: Vec<&SynthSample> = self.data.val[range.clone()].iter().collect();
        let f: Vec<&Tensor> = self.val_features[range].iter().collect();
        Batch::new(&s, &f)
    }
}

/// Student forward results.
pub struct StudentOut {
    pub logits: Var,
    /// Student fusion output before the guide term is added.
    pub x_student: Var,
    pub selected: Vec<Vec<usize>>,
}

fn group_seed(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let d = m.qformer.d_model;
        let mut trng = group_seed(cfg.seed, 1);
        let text = TextEncoder::new(m.vocab, m.max_text_len, d, &mut trng);
        let head = AnswerHead::new(d, &mut trng);
        let teacher = QFormer::new(&m.qformer, m.channels, cfg.data.frames, &mut trng)?;
        let mut srng = group_seed(cfg.student_seed(), 2);
        let pcfg = cfg.prompter_config();
        let budget = if cfg.use_prompter && pcfg.design == crate::prompter::Design::Segmented {
            pcfg.segments
        } else if cfg.use_prompter {
            cfg.data.frames
        } else {
            pcfg.segments
        };
        let student = QFormer::new(&m.qformer, m.channels, budget, &mut srng)?;
        let prompter = FramePrompter::new(pcfg, &mut srng)?;
        let decoder = DistillDecoder::new(m.decoder, d, d, &mut srng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder: VisualEncoder::new(cfg.data.raw_dim, m.channels, m.encoder_seed),
            text,
            head,
            teacher,
            student,
            prompter,
            decoder,
        })
    }

    /// Visits one named group.
    pub fn visit_group(&mut self, group: &str, f: &mut dyn FnMut(String, &mut Param)) {
        match group {
            "text" => self.text.visit_mut("text", f),
            "head" => self.head.visit_mut("head", f),
            "teacher" => self.teacher.visit_mut("teacher", f),
            "student" => self.student.visit_mut("student", f),
            "prompter" => self.prompter.visit_mut("prompter", f),
            "decoder" => self.decoder.visit_mut("decoder", f),
            other => unreachable!("unknown group {other}"),
        }
    }

    /// Groups trained in `stage`; every other group (and the visual encoder)
    /// is frozen.
    pub fn trainable_groups(&self, stage: Stage) -> Vec<&'static str> {
        match stage {
            Stage::Teacher => vec!["text", "head", "teacher"],
            Stage::Student => {
                let mut g = vec!["student", "prompter", "decoder"];
                if self.cfg.unfreeze_head_in_student {
                    g.extend(["text", "head"]);
                }
                g
            }
        }
    }

    /// Every named parameter with its role in `stage`.
    pub fn registry(&self, stage: Stage) -> BTreeMap<String, Role> {
        let trainable = self.trainable_groups(stage);
        let mut out = BTreeMap::from([(ENCODER_NAME.to_string(), Role::Frozen)]);
        let mut m = self.clone();
        for group in GROUPS {
            let role = if trainable.contains(&group) { Role::Trainable } else { Role::Frozen };
            m.visit_group(group, &mut |name, _| {
                out.insert(name, role);
            });
        }
        out
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::from([(ENCODER_NAME.to_string(), self.encoder.projection.clone())]);
        let mut m = self.clone();
        for group in GROUPS {
            m.visit_group(group, &mut |name, p| {
                out.insert(name, p.value.clone());
            });
        }
        out
    }

    pub fn group_tensors(&self, groups: &[&str]) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        let mut m = self.clone();
        for group in groups {
            m.visit_group(group, &mut |name, p| {
                out.insert(name, p.value.clone());
            });
        }
        out
    }

    /// Overwrites the listed groups from `map`.
    pub fn load_groups(&mut self, groups: &[&str], map: &BTreeMap<String, Tensor>) -> Result<()> {
        for group in groups {
            let mut failure = None;
            self.visit_group(group, &mut |name, p| match map.get(&name) {
                Some(t) if t.shape() == p.shape() => p.value = t.clone(),
                Some(t) => {
                    failure.get_or_insert(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        t.shape(),
                        p.shape()
                    )));
                }
                None => {
                    failure.get_or_insert(Error::Checkpoint(format!("missing tensor {name}")));
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
        }
        if let Some(t) = map.get(ENCODER_NAME) {
            if *t != self.encoder.projection {
                return Err(Error::Checkpoint("visual encoder projection differs from encoder_seed".into()));
            }
        }
        Ok(())
    }

    /// Records every parameter as a leaf; only `stage`'s trainable groups
    /// track gradients.
    pub fn bind(&mut self, g: &mut Graph, stage: Stage) {
        let trainable = self.trainable_groups(stage);
        for group in GROUPS {
            let t = trainable.contains(&group);
            self.visit_group(group, &mut |_, p| {
                p.bind(g, t);
            });
        }
    }

    /// Records every parameter as a constant, for evaluation.
    pub fn bind_frozen(&mut self, g: &mut Graph) {
        for group in GROUPS {
            self.visit_group(group, &mut |_, p| {
                p.bind(g, false);
            });
        }
    }

    /// Gradients of `stage`'s trainable parameters.
    pub fn trainable_grads(&mut self, g: &Graph, stage: Stage) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for group in self.trainable_groups(stage) {
            self.visit_group(group, &mut |name, p| {
                out.insert(name, g.grad_tensor(p.var()));
            });
        }
        out
    }

    /// Names of frozen parameters whose graph gradient is present and nonzero.
    pub fn frozen_gradient_violations(&mut self, g: &Graph, stage: Stage) -> Vec<String> {
        let trainable = self.trainable_groups(stage);
        let mut bad = Vec::new();
        for group in GROUPS.iter().filter(|gr| !trainable.contains(gr)) {
            self.visit_group(group, &mut |name, p| {
                if g.grad(p.var()).is_some_and(|gr| gr.iter().any(|&v| v != 0.0)) {
                    bad.push(name);
                }
            });
        }
        bad
    }

    /// Teacher fusion over all frames: `X'_teacher [B, Lq, d]`.
    pub fn teacher_fuse(&self, g: &mut Graph, features: Var, text: Var) -> Result<Var> {
        let tokens = self.teacher.project(g, features)?;
        self.teacher.forward_frames(g, tokens, None, text)
    }

    /// Teacher answer logits `[B, A]`.
    pub fn teacher_logits(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let features = g.constant(batch.features.clone());
        let text = self.text.encode_text(g, &batch.questions)?;
        let x = self.teacher_fuse(g, features, text)?;
        let choices = self.text.encode_choices(g, &batch.choices)?;
        self.head.score_answers(g, x, choices)
    }

    /// Student pipeline. With the prompter, the selection masks or gathers
    /// frames for the student fusion and the guide attention, whose output
    /// is added to the student's before scoring. Without it, the student
    /// reads `S` uniformly spaced frames.
    pub fn student_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<StudentOut> {
        let features = g.constant(batch.features.clone());
        let text = self.text.encode_text(g, &batch.questions)?;
        let choices = self.text.encode_choices(g, &batch.choices)?;
        let (x_student, fused, selected) = if self.cfg.use_prompter {
            let sel = self.prompter.select(g, features, mode, rng)?;
            match fusion_for(mode, self.prompter.cfg.design) {
                Fusion::Gather => {
                    let picked = g.gather(features, &sel.mask.selected_indices)?;
                    let tokens = self.student.project(g, picked)?;
                    let x = self.student.forward_frames(g, tokens, None, text)?;
                    let s = g.shape(tokens).to_vec();
                    let keys = g.reshape(tokens, &[s[0], s[1] * s[2], s[3]])?;
                    let guide = self.prompter.guide.cross_attention(g, text, keys, None)?;
                    (x, g.add(x, guide)?, sel.mask.selected_indices)
                }
                Fusion::Masked => {
                    let tokens = self.student.project(g, features)?;
                    let x = self.student.forward_frames(g, tokens, Some(sel.weights), text)?;
                    let (keys, mask) = mask_frame_tokens(g, tokens, &sel, Fusion::Masked)?;
                    let guide = self.prompter.guide.cross_attention(g, text, keys, mask)?;
                    (x, g.add(x, guide)?, sel.mask.selected_indices)
                }
            }
        } else {
            let idx = vec![uniform_indices(self.cfg.data.frames, self.cfg.selector.segments); batch.len()];
            let picked = g.gather(features, &idx)?;
            let tokens = self.student.project(g, picked)?;
            let x = self.student.forward_frames(g, tokens, None, text)?;
            (x, x, idx)
        };
        let logits = self.head.score_answers(g, fused, choices)?;
        Ok(StudentOut {
            logits,
            x_student,
            selected,
        })
    }

    /// Student pipeline with the fusion forced onto `frames` uniformly spaced
    /// frames (selection still runs), for latency measurements.
    pub fn student_forced_frames(&self, g: &mut Graph, batch: &Batch, frames: usize) -> Result<Var> {
        let features = g.constant(batch.features.clone());
        let text = self.text.encode_text(g, &batch.questions)?;
        let choices = self.text.encode_choices(g, &batch.choices)?;
        let idx = if self.cfg.use_prompter {
            let sel = self.prompter.select_with_noise(
                g,
                features,
                SelectMode::Infer,
                &Tensor::zeros(&self.prompter.noise_shape(batch.len())),
            )?;
            if sel.mask.selected_indices[0].len() == frames {
                sel.mask.selected_indices
            } else {
                vec![uniform_indices(self.cfg.data.frames, frames); batch.len()]
            }
        } else {
            vec![uniform_indices(self.cfg.data.frames, frames); batch.len()]
        };
        let picked = g.gather(features, &idx)?;
        let tokens = self.student.project(g, picked)?;
        // The budget is deliberately exceeded here, so skip the frame check.
        let s = g.shape(tokens).to_vec();
        let keys = g.reshape(tokens, &[s[0], s[1] * s[2], s[3]])?;
        let x = self.student.forward_tokens(g, keys, None, text)?;
        let fused = if self.cfg.use_prompter {
            let guide = self.prompter.guide.cross_attention(g, text, keys, None)?;
            g.add(x, guide)?
        } else {
            x
        };
        self.head.score_answers(g, fused, choices)
    }

    /// Full student-stage objective. Returns `(total, vqa, distill)`; the
    /// distillation term is skipped when `lambda_distill` is zero.
    pub fn student_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &Batch,
        tau: f64,
        rng: &mut R,
    ) -> Result<(Var, Var, Option<Var>, StudentOut)> {
        let out = self.student_forward(g, batch, SelectMode::Train { tau }, rng)?;
        let vqa = vqa_loss(g, out.logits, &batch.answers, self.cfg.model.loss)?;
        let lambda = self.cfg.lambda_distill;
        if lambda == 0.0 {
            return Ok((vqa, vqa, None, out));
        }
        let features = g.constant(batch.features.clone());
        let text = self.text.encode_text(g, &batch.questions)?;
        let target = self.teacher_fuse(g, features, text)?;
        let distill = self.decoder.distill_loss(g, out.x_student, target)?;
        let weighted = g.scale(distill, lambda)?;
        let total = g.add(vqa, weighted)?;
        Ok((total, vqa, Some(distill), out))
    }
}

/// `|selected ∩ keyframes| / |keyframes|` averaged over rows.
pub fn keyframe_recall(selected: &[Vec<usize>], keyframes: &[Vec<usize>]) -> f64 {
    let total: f64 = selected
        .iter()
        .zip(keyframes)
        .map(|(s, k)| k.iter().filter(|f| s.contains(f)).count() as f64 / k.len().max(1) as f64)
        .sum();
    total / selected.len().max(1) as f64
}

/// Fraction of rows whose argmax logit is the answer.
pub fn batch_accuracy(logits: &Tensor, answers: &[usize]) -> f64 {
    let a = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(a)
        .zip(answers)
        .filter(|(row, &ans)| crate::prompter::argmax(row) == ans)
        .count();
    correct as f64 / answers.len().max(1) as f64
}
