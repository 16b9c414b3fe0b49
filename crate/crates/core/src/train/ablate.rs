//! Matched ablation sets: every arm shares the teacher checkpoint and the
//! student seeds, so per-seed differences are paired.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DecoderKind;
use crate::par::Execution;
use crate::prompter::Design;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::Prepared;
use super::stage::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Components,
    Decoder,
    Design,
    Lambda,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::Decoder => "decoder",
            Axis::Design => "design",
            Axis::Lambda => "lambda",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Axis::Components),
            "decoder" => Ok(Axis::Decoder),
            "design" => Ok(Axis::Design),
            "lambda" => Ok(Axis::Lambda),
            other => Err(Error::config(
                "axis",
                format!("expected components, decoder, design or lambda, got {other:?}"),
            )),
        }
    }
}

pub const BASE: &str = "base";
pub const DISTILLER: &str = "base+QFormer-Distiller";
pub const PROMPTER: &str = "base+Frame-Prompter";
pub const FULL: &str = "base+QFormer-Distiller+Frame-Prompter";

#[derive(Clone, Debug)]
pub struct Arm {
    pub label: String,
    pub cfg: TrainConfig,
}

/// The arms of `axis`, derived from `base`. The first arm is the reference
/// for paired deltas.
pub fn arms(base: &TrainConfig, axis: Axis) -> Vec<Arm> {
    let arm = |label: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Arm {
            label: label.to_string(),
            cfg,
        }
    };
    match axis {
        Axis::Components => vec![
            arm(BASE, &|c| {
                c.use_prompter = false;
                c.lambda_distill = 0.0;
            }),
            arm(DISTILLER, &|c| {
                c.use_prompter = false;
                c.lambda_distill = base.lambda_distill.max(f64::MIN_POSITIVE);
            }),
            arm(PROMPTER, &|c| {
                c.use_prompter = true;
                c.lambda_distill = 0.0;
            }),
            arm(FULL, &|c| {
                c.use_prompter = true;
                c.lambda_distill = base.lambda_distill.max(f64::MIN_POSITIVE);
            }),
        ],
        Axis::Decoder => DecoderKind::ALL
            .iter()
            .map(|&k| arm(k.label(), &|c| c.model.decoder = k))
            .collect(),
        Axis::Design => vec![
            arm("segmented", &|c| c.selector.design = Design::Segmented),
            arm("free-form", &|c| c.selector.design = Design::FreeForm),
        ],
        Axis::Lambda => [0.0, 0.1, 1.0, 10.0]
            .iter()
            .map(|&l| arm(&format!("lambda={l}"), &|c| c.lambda_distill = l))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub accuracy: f64,
    pub keyframe_recall: Option<f64>,
    /// Accuracy minus the reference arm's at the same seed.
    pub delta_accuracy: f64,
    #[serde(skip)]
    pub selections: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub axis: Axis,
    pub teacher_digest: String,
    pub teacher_accuracy: Option<f64>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ArmResult>,
}

impl AblationTable {
    pub fn arm_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.arm) {
                out.push(r.arm.clone());
            }
        }
        out
    }

    pub fn result(&self, arm: &str, seed: u64) -> Option<&ArmResult> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    pub fn mean_accuracy(&self, arm: &str) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.arm == arm).map(|r| r.accuracy).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_recall(&self, arm: &str) -> Option<f64> {
        let v: Option<Vec<f64>> = self.rows.iter().filter(|r| r.arm == arm).map(|r| r.keyframe_recall).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// One row per (arm, seed); the teacher identity is repeated in every
    /// row so the file stands alone.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            axis: &'a str,
            teacher_digest: &'a str,
            arm: &'a str,
            seed: u64,
            accuracy: f64,
            keyframe_recall: Option<f64>,
            delta_accuracy: f64,
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(Line {
                axis: self.axis.name(),
                teacher_digest: &self.teacher_digest,
                arm: &r.arm,
                seed: r.seed,
                accuracy: r.accuracy,
                keyframe_recall: r.keyframe_recall,
                delta_accuracy: r.delta_accuracy,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let labels = self.arm_labels();
        let width = labels.iter().map(String::len).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "axis: {}", self.axis.name());
        let _ = writeln!(s, "shared teacher: {}", self.teacher_digest);
        if let Some(a) = self.teacher_accuracy {
            let _ = writeln!(s, "teacher val accuracy: {a:.4}");
        }
        let _ = write!(s, "{:<width$}", "arm");
        for seed in &self.seeds {
            let _ = write!(s, "  acc@s{seed:<3}");
        }
        let _ = writeln!(s, "  mean acc  mean recall  mean delta");
        let reference = labels.first().cloned().unwrap_or_default();
        for label in &labels {
            let _ = write!(s, "{label:<width$}");
            for &seed in &self.seeds {
                match self.result(label, seed) {
                    Some(r) => {
                        let _ = write!(s, "  {:>8.4}", r.accuracy);
                    }
                    None => {
                        let _ = write!(s, "  {:>8}", "-");
                    }
                }
            }
            let recall = self
                .mean_recall(label)
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "n/a".into());
            let delta = self.mean_accuracy(label) - self.mean_accuracy(&reference);
            let _ = writeln!(s, "  {:>8.4}  {:>11}  {:>+10.4}", self.mean_accuracy(label), recall, delta);
        }
        let _ = writeln!(s, "deltas are paired by seed against {reference}");
        s
    }
}

/// Trains every arm of `axis` for every seed from the shared teacher.
/// `seed` sets `student_seed_offset`, so the teacher is untouched.
pub fn run_ablation(
    base: &TrainConfig,
    axis: Axis,
    seeds: &[u64],
    data: &Prepared,
    teacher: &Checkpoint,
    teacher_accuracy: Option<f64>,
    exec: Execution,
    mut progress: impl FnMut(&ArmResult),
) -> Result<AblationTable> {
    let arms = arms(base, axis);
    let mut rows: Vec<ArmResult> = Vec::new();
    for &seed in seeds {
        let mut reference = None;
        for arm in &arms {
            let mut cfg = arm.cfg.clone();
            cfg.student_seed_offset = seed;
            cfg.eval_every = 0;
            cfg.checkpoint_every = 0;
            let mut trainer = Trainer::student(&cfg, teacher, data, exec)?;
            let out = trainer.run(|_| Ok(()), |_| Ok(()))?;
            let reference_acc = *reference.get_or_insert(out.accuracy);
            let r = ArmResult {
                arm: arm.label.clone(),
                seed,
                accuracy: out.accuracy,
                keyframe_recall: if cfg.use_prompter { out.keyframe_recall } else { None },
                delta_accuracy: out.accuracy - reference_acc,
                selections: out.selections,
            };
            progress(&r);
            rows.push(r);
        }
    }
    Ok(AblationTable {
        axis,
        teacher_digest: teacher.teacher_digest.clone(),
        teacher_accuracy,
        seeds: seeds.to_vec(),
        rows,
    })
}
