//! Validation-split evaluation, sharded across threads with a fixed
//! reduction order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::prompter::SelectMode;

use super::config::Stage;
use super::model::{batch_accuracy, keyframe_recall, Model, Prepared};

/// Validation samples per shard.
pub const SHARD: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    /// Noiseless argmax selection with a hard gather.
    Hard,
    /// Noiseless relaxed weights at `tau` over all frames.
    SoftTau(f64),
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(EvalMode::Hard),
            "soft-tau" => Ok(EvalMode::SoftTau(0.01)),
            other => Err(Error::config("mode", format!("expected hard or soft-tau, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// `None` for the teacher, which reads every frame.
    pub keyframe_recall: Option<f64>,
    /// Per-sample selected frame indices (student only).
    pub selections: Option<Vec<Vec<usize>>>,
    pub predictions: Vec<usize>,
}

struct Shard {
    correct: usize,
    recall_sum: f64,
    predictions: Vec<usize>,
    selections: Vec<Vec<usize>>,
}

/// Evaluates `stage`'s pipeline on the validation split.
pub fn evaluate(model: &Model, stage: Stage, data: &Prepared, mode: EvalMode, exec: Execution) -> Result<EvalOutcome> {
    let n = data.data.val.len();
    if n == 0 {
        return Err(Error::EmptyDimension { op: "evaluate" });
    }
    let shards = n.div_ceil(SHARD);
    let results: Vec<Result<Shard>> = exec.map_range(shards, |i| {
        let range = i * SHARD..((i + 1) * SHARD).min(n);
        let batch = data.val_batch(range)?;
        let mut m = model.clone();
        let mut g = Graph::new();
        m.bind_frozen(&mut g);
        let (logits, selected) = match stage {
            Stage::Teacher => (m.teacher_logits(&mut g, &batch)?, None),
            Stage::Student => {
                let select = match mode {
                    EvalMode::Hard => SelectMode::Infer,
                    EvalMode::SoftTau(tau) => SelectMode::SoftTau { tau },
                };
                // Inference modes draw no noise; the stream is only a formality.
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let out = m.student_forward(&mut g, &batch, select, &mut rng)?;
                (out.logits, Some(out.selected))
            }
        };
        let lv = g.value(logits);
        let a = lv.shape()[1];
        let predictions: Vec<usize> = lv.data().chunks(a).map(crate::prompter::argmax).collect();
        let correct = predictions.iter().zip(&batch.answers).filter(|(p, a)| p == a).count();
        debug_assert_eq!(correct as f64, (batch_accuracy(lv, &batch.answers) * batch.len() as f64).round());
        let (recall_sum, selections) = match selected {
            Some(sel) => (keyframe_recall(&sel, &batch.keyframes) * batch.len() as f64, sel),
            None => (0.0, Vec::new()),
        };
        Ok(Shard {
            correct,
            recall_sum,
            predictions,
            selections,
        })
    });
    let mut correct = 0;
    let mut recall_sum = 0.0;
    let mut predictions = Vec::with_capacity(n);
    let mut selections = Vec::with_capacity(n);
    for r in results {
        let s = r?;
        correct += s.correct;
        recall_sum += s.recall_sum;
        predictions.extend(s.predictions);
        selections.extend(s.selections);
    }
    let student = stage == Stage::Student;
    Ok(EvalOutcome {
        accuracy: correct as f64 / n as f64,
        keyframe_recall: student.then(|| recall_sum / n as f64),
        selections: student.then_some(selections),
        predictions,
    })
}
