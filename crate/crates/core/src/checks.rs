//! Finite-difference verification suites shared by the `gradcheck` command
//! and the acceptance run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheck, GradCheckReport, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{DecoderKind, Linear};
use crate::params::Module;
use crate::prompter::{fusion_for, sample_gumbel, Design, FramePrompter, FramePrompterConfig, SelectMode};
use crate::qformer::{QFormer, QFormerConfig};
use crate::synth::{generate, DatasetSpec};
use crate::train::{Model, Prepared, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Prompter,
    QFormer,
    End2End,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "prompter" => Ok(Scope::Prompter),
            "qformer" => Ok(Scope::QFormer),
            "end2end" => Ok(Scope::End2End),
            other => Err(Error::config(
                "scope",
                format!("expected ops, prompter, qformer or end2end, got {other:?}"),
            )),
        }
    }
}

/// Worst result of one check over its random instances.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub instances: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    fn absorb(&mut self, report: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(report.max_rel_err);
        self.instances += 1;
    }

    fn new(name: impl Into<String>, tol: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_err: 0.0,
            tol,
            instances: 0,
        }
    }
}

/// Tolerance for single primitives.
pub const OP_TOL: f64 = 1e-5;
/// Tolerance for composed paths.
pub const COMPOSED_TOL: f64 = 1e-4;

pub fn run_scope(scope: Scope, instances: usize) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Ops => ops_suite(instances),
        Scope::Prompter => prompter_suite(instances, 0.5),
        Scope::QFormer => qformer_suite(instances),
        Scope::End2End => end2end_suite(instances),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

type Case = (&'static str, Vec<usize>, Vec<f64>, Box<dyn Fn(&mut Graph, Var, &Tensor) -> Result<Var>>);

/// Probes each output with a fixed random weighting so the check sees every
/// output coordinate.
fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let n = g.value(y).numel();
    let flat = g.reshape(y, &[n])?;
    let wv = g.constant(Tensor::new(vec![n], w.data()[..n].to_vec())?);
    let p = g.mul(flat, wv)?;
    g.sum(p)
}

/// Every differentiable primitive except `detach` and `straight_through`,
/// whose gradients deliberately differ from the forward function's.
fn cases() -> Vec<Case> {
    let mut other = rng(99);
    let b34 = Tensor::randn(&[3, 4], 1.0, &mut other);
    let b243 = Tensor::randn(&[2, 4, 3], 1.0, &mut other);
    let c4 = Tensor::randn(&[4], 1.0, &mut other);
    let mask = Tensor::from_fn(&[2, 3], |i| [1.0, 0.4, 0.0, 0.2, 1.0, 0.7][i]);
    let mse_target = Tensor::randn(&[2, 3], 1.0, &mut other);
    let ln_gain = Tensor::randn(&[5], 1.0, &mut other);
    let ln_bias = Tensor::randn(&[5], 1.0, &mut other);
    let ln_input = Tensor::randn(&[2, 5], 1.0, &mut other);
    let bias2 = ln_bias.clone();
    vec![
        ("add_scale", vec![2, 3], vec![], Box::new(|g, x, w| {
            let h = g.scale(x, 0.5)?;
            let y = g.add(x, h)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, w)
        })),
        ("layer_norm", vec![2, 5], vec![], Box::new(move |g, x, w| {
            let (gn, bs) = (g.constant(ln_gain.clone()), g.constant(ln_bias.clone()));
            let y = g.layer_norm(x, gn, bs, 1e-5)?;
            weighted_sum(g, y, w)
        })),
        ("layer_norm_gain", vec![5], vec![], Box::new(move |g, x, w| {
            let (xs, bs) = (g.constant(ln_input.clone()), g.constant(bias2.clone()));
            let y = g.layer_norm(xs, x, bs, 1e-5)?;
                        weighted_sum(g, y, w)
        })),
        ("matmul", vec![2, 3], vec![], Box::new(move |g, x, w| {
            let b = g.constant(b34.clone());
            let y = g.matmul(x, b)?;
            weighted_sum(g, y, w)
        })),
        ("bmm", vec![2, 3, 4], vec![], Box::new(move |g, x, w| {
            let b = g.constant(b243.clone());
            let y = g.bmm(x, b, false)?;
            weighted_sum(g, y, w)
        })),
        ("bmm_rhs_transposed", vec![2, 3, 4], vec![], Box::new(|g, x, w| {
            let y = g.bmm(x, x, true)?;
            weighted_sum(g, y, w)
        })),
        ("add_broadcast", vec![2, 4], vec![], Box::new(move |g, x, w| {
            let c = g.constant(c4.clone());
            let y = g.add_broadcast(x, c)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, w)
        })),
        ("mul_sub", vec![6], vec![], Box::new(|g, x, w| {
            let y = g.mul(x, x)?;
            let y = g.sub(y, x)?;
            weighted_sum(g, y, w)
        })),
        ("softmax_axis0", vec![3, 2], vec![], Box::new(|g, x, w| {
            let y = g.softmax(x, 0)?;
            weighted_sum(g, y, w)
        })),
        ("log_softmax", vec![2, 4], vec![], Box::new(|g, x, w| {
            let y = g.log_softmax(x, 1)?;
            weighted_sum(g, y, w)
        })),
        ("masked_softmax_logits", vec![2, 2, 3], vec![], Box::new(move |g, x, w| {
            let m = g.constant(mask.clone());
            let y = g.masked_softmax(x, m)?;
            weighted_sum(g, y, w)
        })),
        ("masked_softmax_mask", vec![2, 3], vec![], Box::new(|g, x, w| {
            // Positive weights, logits fixed.
            let pos = g.mul(x, x)?;
            let logits = g.constant(Tensor::from_fn(&[2, 2, 3], |i| (i as f64 * 0.37).sin()));
            let y = g.masked_softmax(logits, pos)?;
            weighted_sum(g, y, w)
        })),
        ("relu", vec![8], vec![0.0], Box::new(|g, x, w| {
            let y = g.relu(x)?;
            weighted_sum(g, y, w)
        })),
        ("gelu", vec![8], vec![], Box::new(|g, x, w| {
            let y = g.gelu(x)?;
            weighted_sum(g, y, w)
        })),
        ("mean_axis", vec![2, 3, 2], vec![], Box::new(|g, x, w| {
            let y = g.mean_axis(x, 1)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, w)
        })),
        ("concat_slice", vec![2, 3], vec![], Box::new(|g, x, w| {
            let c = g.concat(&[x, x], 1)?;
            let s = g.slice(c, 1, 2, 3)?;
            let y = g.mul(s, s)?;
            weighted_sum(g, y, w)
        })),
        ("expand_gather_repeat", vec![3, 2], vec![], Box::new(|g, x, w| {
            let e = g.expand_batch(x, 2)?;
            let picked = g.gather(e, &[vec![0, 2], vec![1, 1]])?;
            let r = g.repeat_interleave(picked, 2)?;
            let y = g.mul(r, r)?;
            weighted_sum(g, y, w)
        })),
        ("embedding", vec![4, 2], vec![], Box::new(|g, x, w| {
            let y = g.embedding(x, &[3, 0, 3], &[3])?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, w)
        })),
        ("cross_entropy", vec![2, 4], vec![], Box::new(|g, x, _| g.cross_entropy(x, &[1, 3]))),
        ("mse", vec![2, 3], vec![], Box::new(move |g, x, _| {
            let t = g.constant(mse_target.clone());
            g.mse(x, t)
        })),
        ("mean", vec![5], vec![], Box::new(|g, x, _| {
            let y = g.mul(x, x)?;
            g.mean(y)
        })),
    ]
}

/// Each primitive at `instances` random points, tolerance [`OP_TOL`].
pub fn ops_suite(instances: usize) -> Result<Vec<CheckResult>> {
    let mut r = rng(2024);
    let mut out = Vec::new();
    for (name, shape, kinks, f) in cases() {
        let mut res = CheckResult::new(name, OP_TOL);
        for _ in 0..instances {
            let x = Tensor::randn(&shape, 1.0, &mut r);
            let w = Tensor::randn(&[64], 1.0, &mut r);
            let report = grad_check(|g, v| f(g, v, &w), &x, &GradCheck::default().kinks(&kinks))?;
            res.absorb(&report);
        }
        out.push(res);
    }
    Ok(out)
}

/// Checks `f` against perturbations of one named parameter of `module`.
fn check_param<M: Module>(
    module: &M,
    name: &str,
    tol: f64,
    f: &dyn Fn(&mut Graph, &M) -> Result<Var>,
) -> Result<GradCheckReport> {
    let value = module
        .named_tensors("")
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::config("gradcheck", format!("no parameter named {name}")))?;
    grad_check(
        |g, v| {
            let mut m = module.clone();
            m.bind(g, false);
            m.visit_mut("", &mut |n, p| {
                if n == name {
                    p.rebind(v);
                }
            });
            f(g, &m)
        },
        &value,
        &GradCheck::with_tol(tol),
    )
}

fn small_prompter_cfg(design: Design) -> FramePrompterConfig {
    FramePrompterConfig {
        frames: 8,
        segments: 4,
        patches: 2,
        channels: 3,
        d_model: 6,
        embed_hidden: 5,
        design,
        straight_through: false,
        ..Default::default()
    }
}

/// The relaxed selection path at temperature `tau`: pool, embed, segment
/// logits, Gumbel-softmax weights with fixed noise, masked text-guided
/// fusion. Checked against the input features and the selector weights,
/// for both designs.
pub fn prompter_suite(instances: usize, tau: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for design in [Design::Segmented, Design::FreeForm] {
        let label = match design {
            Design::Segmented => "segmented",
            Design::FreeForm => "free_form",
        };
        let mut wrt_features = CheckResult::new(format!("prompter_{label}_features"), COMPOSED_TOL);
        let mut wrt_params: Vec<CheckResult> = ["select_head.weight", "embed.0.weight", "guide.wq"]
            .iter()
            .map(|n| CheckResult::new(format!("prompter_{label}_{n}"), COMPOSED_TOL))
            .collect();
        for i in 0..instances {
            let mut r = rng(500 + i as u64);
            let cfg = small_prompter_cfg(design);
            let mut fp = FramePrompter::new(cfg.clone(), &mut r)?;
            // A nonzero guide output projection so the fusion path carries signal.
            fp.guide.wo.value = Tensor::randn(fp.guide.wo.shape(), 0.5, &mut r);
            let proj = Linear::new(cfg.channels, cfg.d_model, true, &mut r);
            let feats = Tensor::randn(&[2, cfg.frames, cfg.patches, cfg.channels], 1.0, &mut r);
            let text = Tensor::randn(&[2, 3, cfg.d_model], 1.0, &mut r);
            let noise = sample_gumbel(&fp.noise_shape(2), &mut r);
            let probe = Tensor::randn(&[2, 3, cfg.d_model], 1.0, &mut r);
            let mode = SelectMode::Train { tau };
            let fuse = |g: &mut Graph, fp: &FramePrompter, proj: &Linear, x: Var| -> Result<Var> {
                let sel = fp.select_with_noise(g, x, mode, &noise)?;
                let tokens = proj.forward(g, x)?;
                let t = g.constant(text.clone());
                let fused = fp.apply_mask_and_fuse(g, tokens, &sel, t, fusion_for(mode, cfg.design))?;
                let p = g.constant(probe.clone());
                let prod = g.mul(fused, p)?;
                g.sum(prod)
            };
            let report = grad_check(
                |g, x| {
                    let (mut fp, mut proj) = (fp.clone(), proj.clone());
                    fp.bind(g, false);
                    proj.bind(g, false);
                    fuse(g, &fp, &proj, x)
                },
                &feats,
                &GradCheck::with_tol(COMPOSED_TOL),
            )?;
            wrt_features.absorb(&report);
            for res in wrt_params.iter_mut() {
                let name = res.name.trim_start_matches(&format!("prompter_{label}_")).to_string();
                let report = check_param(&fp, &name, COMPOSED_TOL, &|g, fp| {
                    let mut proj = proj.clone();
                    proj.bind(g, false);
                    let x = g.constant(feats.clone());
                    fuse(g, fp, &proj, x)
                })?;
                res.absorb(&report);
            }
        }
        out.push(wrt_features);
        out.extend(wrt_params);
    }
    Ok(out)
}

/// Q-Former fusion with a soft per-frame mask, checked against the query
/// tokens, attention weights, visual projection and the mask itself.
pub fn qformer_suite(instances: usize) -> Result<Vec<CheckResult>> {
    let names = ["queries", "self_attn.0.wq", "self_attn.0.wk", "cross_attn.wv", "visual_proj.weight", "self_norm.0.gain"];
    let mut results: Vec<CheckResult> = names.iter().map(|n| CheckResult::new(format!("qformer_{n}"), COMPOSED_TOL)).collect();
    let mut wrt_mask = CheckResult::new("qformer_frame_weights", COMPOSED_TOL);
    for i in 0..instances {
        let mut r = rng(700 + i as u64);
        let cfg = QFormerConfig {
            d_model: 6,
            num_queries: 3,
            num_heads: 2,
            depth: 2,
        };
        let qf = QFormer::new(&cfg, 3, 4, &mut r)?;
        let feats = Tensor::randn(&[2, 4, 2, 3], 1.0, &mut r);
        let text = Tensor::randn(&[2, 3, 6], 1.0, &mut r);
        let weights = Tensor::from_fn(&[2, 4], |j| 0.2 + 0.6 * ((j * 7 + i) % 5) as f64 / 4.0);
        let probe = Tensor::randn(&[2, 3, 6], 1.0, &mut r);
        let run = |g: &mut Graph, qf: &QFormer, w: Var| -> Result<Var> {
            let f = g.constant(feats.clone());
            let tok = qf.project(g, f)?;
            let t = g.constant(text.clone());
            let out = qf.forward_frames(g, tok, Some(w), t)?;
            let p = g.constant(probe.clone());
            let prod = g.mul(out, p)?;
            g.sum(prod)
        };
        for (res, name) in results.iter_mut().zip(names) {
            let report = check_param(&qf, name, COMPOSED_TOL, &|g, qf| {
                let w = g.constant(weights.clone());
                run(g, qf, w)
            })?;
            res.absorb(&report);
        }
        let report = grad_check(
            |g, w| {
                let mut qf = qf.clone();
                qf.bind(g, false);
                run(g, &qf, w)
            },
            &weights,
            &GradCheck::with_tol(COMPOSED_TOL),
        )?;
        wrt_mask.absorb(&report);
    }
    results.push(wrt_mask);
    Ok(results)
}

/// A tiny configuration sharing the default's structure.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data = DatasetSpec {
        num_train: 4,
        num_val: 2,
        frames: 8,
        patches: 2,
        raw_dim: 6,
        keyframes: 4,
        ..DatasetSpec::default()
    };
    cfg.model.channels = 4;
    cfg.model.qformer = QFormerConfig {
        d_model: 6,
        num_queries: 2,
        num_heads: 1,
        depth: 1,
    };
    cfg.model.decoder = DecoderKind::FcLnGeluFc;
    cfg.selector.segments = 4;
    cfg.selector.embed_hidden = 5;
    cfg.selector.straight_through = false;
    cfg
}

/// Full student-stage loss (VQA plus distillation) on a 2-sample batch along
/// the relaxed selection path, checked against one parameter of each
/// trainable group.
pub fn end2end_suite(instances: usize) -> Result<Vec<CheckResult>> {
    let names = [
        ("prompter", "prompter.select_head.weight"),
        ("prompter", "prompter.embed.3.weight"),
        ("prompter", "prompter.guide.wv"),
        ("student", "student.queries"),
        ("student", "student.visual_proj.weight"),
        ("decoder", "decoder.3.weight"),
    ];
    let mut results: Vec<CheckResult> = names.iter().map(|(_, n)| CheckResult::new(format!("end2end_{n}"), COMPOSED_TOL)).collect();
    let cfg = tiny_config();
    let data = generate(&cfg.data, crate::par::Execution::Sequential)?;
    for i in 0..instances {
        let mut c = cfg.clone();
        c.seed = 900 + i as u64;
        let mut model = Model::new(&c)?;
        let mut r = rng(950 + i as u64);
        model.prompter.guide.wo.value = Tensor::randn(model.prompter.guide.wo.shape(), 0.5, &mut r);
        let prepared = Prepared::new(data.clone(), &model.encoder, crate::par::Execution::Sequential)?;
        let batch = prepared.train_batch(&[i % 4, (i + 1) % 4])?;
        for (res, (group, name)) in results.iter_mut().zip(names) {
            let value = model.named_tensors()[name].clone();
            let report = grad_check(
                |g, v| {
                    let mut m = model.clone();
                    m.bind_frozen(g);
                    m.visit_group(group, &mut |n, p| {
                        if n == name {
                            p.rebind(v);
                        }
                    });
                    let mut noise_rng = rng(17);
                    Ok(m.student_loss(g, &batch, 0.5, &mut noise_rng)?.0)
                },
                &value,
                &GradCheck::with_tol(COMPOSED_TOL),
            )?;
            res.absorb(&report);
        }
    }
    Ok(results)
}
