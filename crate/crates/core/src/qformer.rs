//! Query transformer fusion and feature distillation.
//!
//! `X' = CrossAttn(text, SelfAttn([q; V])[..Q])`: learnable queries are
//! prepended to the projected visual tokens, only the query rows of the
//! self-attention are kept, and text tokens read them through a second
//! attention block. A teacher instance sees every frame, a student instance a
//! selected subset; a decoder maps student outputs onto the teacher's.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, DecoderKind, LayerNorm, Linear, Mlp};
use crate::params::{join, Module, Param};
use crate::prompter::SelectionMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QFormerConfig {
    pub d_model: usize,
    pub num_queries: usize,
    pub num_heads: usize,
    pub depth: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_queries: 8,
            num_heads: 1,
            depth: 1,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::config("num_queries", "must be >= 1"));
        }
        if self.depth == 0 {
            return Err(Error::config("depth", "must be >= 1"));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::config("num_heads", "must divide d_model"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct QFormer {
    /// Per-patch map from encoder channels to the model width.
    pub visual_proj: Linear,
    pub queries: Param,
    /// One self-attention block per layer, each followed by a residual
    /// connection and LayerNorm. Later layers re-read the same visual tokens
    /// with the updated queries.
    pub self_attn: Vec<Attention>,
    pub self_norm: Vec<LayerNorm>,
    pub cross_attn: Attention,
    /// Keeps the fused output at unit scale for the answer head and the
    /// distillation target.
    pub out_norm: LayerNorm,
    /// Maximum number of frames this instance may read.
    pub frame_budget: usize,
}

impl QFormer {
    pub fn new<R: Rng + ?Sized>(cfg: &QFormerConfig, channels: usize, frame_budget: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let visual_proj = Linear::new(channels, d, true, rng);
        let queries = Param::new(Tensor::randn(&[cfg.num_queries, d], 1.0, rng));
        let self_attn = (0..cfg.depth)
            .map(|_| Attention::new(d, cfg.num_heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let cross_attn = Attention::new(d, cfg.num_heads, rng)?;
        Ok(Self {
            visual_proj,
            queries,
            self_norm: (0..cfg.depth).map(|_| LayerNorm::new(d)).collect(),
            self_attn,
            cross_attn,
            out_norm: LayerNorm::new(d),
            frame_budget,
        })
    }

    pub fn d_model(&self) -> usize {
        self.queries.shape()[1]
    }

    pub fn num_queries(&self) -> usize {
        self.queries.shape()[0]
    }

    /// Encoder features `[B, F, N, C]` → tokens `[B, F, N, d]`.
    pub fn project(&self, g: &mut Graph, features: Var) -> Result<Var> {
        self.visual_proj.forward(g, features)
    }

    /// Fusion over flat visual tokens `[B, Lv, d]` with an optional per-token
    /// weight `[B, Lv]`; returns one vector per text token `[B, Lq, d]`.
    pub fn forward_tokens(&self, g: &mut Graph, visual: Var, visual_mask: Option<Var>, text: Var) -> Result<Var> {
        let (vs, ts) = (g.shape(visual).to_vec(), g.shape(text).to_vec());
        let d = self.d_model();
        if vs.len() != 3 || ts.len() != 3 || vs[2] != d || ts[2] != d || vs[0] != ts[0] {
            return Err(Error::shape("qformer_forward", &vs, &ts));
        }
        let b = vs[0];
        let q0 = g.expand_batch(self.queries.var(), b)?;
        let mask = match visual_mask {
            Some(m) => {
                let ones = g.constant(Tensor::ones(&[b, self.num_queries()]));
                Some(g.concat(&[ones, m], 1)?)
            }
            None => None,
        };
        let mut q = q0;
        for (attn, norm) in self.self_attn.iter().zip(&self.self_norm) {
            let seq = g.concat(&[q, visual], 1)?;
            let h = attn.cross_attention(g, q, seq, mask)?;
            let r = g.add(q, h)?;
            q = norm.forward(g, r)?;
        }
        let out = self.cross_attn.cross_attention(g, text, q, None)?;
        self.out_norm.forward(g, out)
    }

    /// Fusion over frame tokens `[B, F, N, d]`. Frames whose weight exceeds
    /// one half (all `F` frames when unweighted) count against the budget.
    pub fn forward_frames(&self, g: &mut Graph, tokens: Var, frame_weights: Option<Var>, text: Var) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("qformer_forward", &shape, &[0, 0, 0, self.d_model()]));
        }
        let (b, f, n, d) = (shape[0], shape[1], shape[2], shape[3]);
        let frames = match frame_weights {
            Some(w) => {
                let vals = g.value(w);
                if vals.shape() != [b, f] {
                    return Err(Error::shape("qformer_forward mask", vals.shape(), &[b, f]));
                }
                vals.data().chunks(f).map(|row| row.iter().filter(|&&v| v > 0.5).count()).max().unwrap_or(0)
            }
            None => f,
        };
        if frames > self.frame_budget {
            return Err(Error::FrameBudget {
                frames,
                budget: self.frame_budget,
            });
        }
        let flat = g.reshape(tokens, &[b, f * n, d])?;
        let mask = match frame_weights {
            Some(w) => Some(g.repeat_interleave(w, n)?),
            None => None,
        };
        self.forward_tokens(g, flat, mask, text)
    }
}

impl Module for QFormer {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.visual_proj.visit_mut(&join(prefix, "visual_proj"), f);
        f(join(prefix, "queries"), &mut self.queries);
        for (i, (a, n)) in self.self_attn.iter_mut().zip(&mut self.self_norm).enumerate() {
            a.visit_mut(&join(prefix, &format!("self_attn.{i}")), f);
            n.visit_mut(&join(prefix, &format!("self_norm.{i}")), f);
        }
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.out_norm.visit_mut(&join(prefix, "out_norm"), f);
    }
}

/// Decoder mapping student fusion outputs into the teacher's feature space.
#[derive(Clone, Debug)]
pub struct DistillDecoder {
    pub kind: DecoderKind,
    pub mlp: Mlp,
}

impl DistillDecoder {
    pub fn new<R: Rng + ?Sized>(kind: DecoderKind, d_student: usize, d_teacher: usize, rng: &mut R) -> Self {
        Self {
            kind,
            mlp: kind.build(d_student, d_teacher, rng),
        }
    }

    pub fn decode(&self, g: &mut Graph, x_student: Var) -> Result<Var> {
        self.mlp.forward(g, x_student)
    }

    /// `MSE(D(x_student), x_teacher)`; the teacher side carries no gradient.
    pub fn distill_loss(&self, g: &mut Graph, x_student: Var, x_teacher: Var) -> Result<Var> {
        let decoded = self.decode(g, x_student)?;
        let target = g.detach(x_teacher);
        if g.shape(decoded) != g.shape(target) {
            return Err(Error::shape("distill_loss", g.shape(decoded), g.shape(target)));
        }
        g.mse(decoded, target)
    }
}

impl Module for DistillDecoder {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.mlp.visit_mut(prefix, f);
    }
}

/// Mean over batch rows of `|a ∩ b| / |a|`. Not symmetric: the denominator
/// is always `a`'s selection size.
pub fn selection_overlap(a: &SelectionMask, b: &SelectionMask) -> Result<f64> {
    if a.frames() != b.frames() {
        return Err(Error::shape("selection_overlap", a.hard.shape(), b.hard.shape()));
    }
    index_overlap(&a.selected_indices, &b.selected_indices)
}

pub fn index_overlap(a: &[Vec<usize>], b: &[Vec<usize>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("selection_overlap", &[a.len()], &[b.len()]));
    }
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        if ra.is_empty() {
            return Err(Error::EmptyDimension { op: "selection_overlap" });
        }
        let common = ra.iter().filter(|t| rb.contains(t)).count();
        total += common as f64 / ra.len() as f64;
    }
    Ok(total / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheck};
    use crate::nn::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg(d: usize, q: usize) -> QFormerConfig {
        QFormerConfig {
            d_model: d,
            num_queries: q,
            num_heads: 1,
            depth: 1,
        }
    }

    fn run(qf: &QFormer, visual: &Tensor, text: &Tensor) -> Tensor {
        let mut qf = qf.clone();
        let mut g = Graph::new();
        qf.bind(&mut g, false);
        let (v, t) = (g.constant(visual.clone()), g.constant(text.clone()));
        let out = qf.forward_tokens(&mut g, v, None, t).unwrap();
        g.value(out).clone()
    }

    fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
        let (di, dout) = (w.shape()[0], w.shape()[1]);
        (0..dout).map(|j| (0..di).map(|i| x[i] * w.data()[i * dout + j]).sum()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn layer_norm(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + crate::nn::LN_EPS).sqrt()).collect()
    }

    #[test]
    fn single_query_single_token_matches_hand_composition() {
        let d = 3;
        let qf = QFormer::new(&cfg(d, 1), 2, 1, &mut rng(1)).unwrap();
        let mut r = rng(2);
        let v = Tensor::randn(&[1, 1, d], 1.0, &mut r);
        let t = Tensor::randn(&[1, 1, d], 1.0, &mut r);
        let got = run(&qf, &v, &t);

        let sa = &qf.self_attn[0];
        let q = qf.queries.value.data();
        let keys = [q, v.data()];
        let qq = matvec(q, &sa.wq.value);
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| dot(&qq, &matvec(k, &sa.wk.value)) / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut mixed = vec![0.0; d];
        for (k, s) in keys.iter().zip(&scores) {
            for (m, v) in mixed.iter_mut().zip(matvec(k, &sa.wv.value)) {
                *m += s.exp() / z * v;
            }
        }
        let h = matvec(&mixed, &sa.wo.value);
        let q1 = layer_norm(&q.iter().zip(&h).map(|(a, b)| a + b).collect::<Vec<_>>());
        // A single key: the cross-attention weight is 1.
        let ca = &qf.cross_attn;
        let expected = layer_norm(&matvec(&matvec(&q1, &ca.wv.value), &ca.wo.value));
        for (a, b) in got.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn visual_token_order_does_not_matter() {
        let qf = QFormer::new(&cfg(4, 3), 2, 8, &mut rng(3)).unwrap();
        let mut r = rng(4);
        let v = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let t = Tensor::randn(&[2, 2, 4], 1.0, &mut r);
        let perm = [4usize, 2, 0, 1, 3];
        let vp = Tensor::from_fn(&[2, 5, 4], |i| {
            let (b, l, c) = (i / 20, (i / 4) % 5, i % 4);
            v.data()[b * 20 + perm[l] * 4 + c]
        });
        assert!(run(&qf, &v, &t).max_abs_diff(&run(&qf, &vp, &t)) < 1e-12);
    }

    #[test]
    fn query_token_gradient_matches_finite_differences() {
        let qf = QFormer::new(&cfg(4, 2), 3, 2, &mut rng(5)).unwrap();
        let mut r = rng(6);
        let feats = Tensor::randn(&[1, 2, 2, 3], 1.0, &mut r);
        let text = Tensor::randn(&[1, 2, 4], 1.0, &mut r);
        // LayerNorm output has a fixed norm, so probe with a random projection.
        let probe = Tensor::randn(&[1, 2, 4], 1.0, &mut r);
        let report = grad_check(
            |g, q| {
                let mut qf = qf.clone();
                qf.bind(g, false);
                qf.queries = Param::new(g.value(q).clone());
                let proj_tokens = {
                    let f = g.constant(feats.clone());
                    qf.project(g, f)?
                };
                let flat = g.reshape(proj_tokens, &[1, 4, 4])?;
                let qb = g.expand_batch(q, 1)?;
                let seq = g.concat(&[qb, flat], 1)?;
                let h = qf.self_attn[0].cross_attention(g, qb, seq, None)?;
                let r = g.add(qb, h)?;
                let q1 = qf.self_norm[0].forward(g, r)?;
                let t = g.constant(text.clone());
                let out = qf.cross_attn.cross_attention(g, t, q1, None)?;
                let out = qf.out_norm.forward(g, out)?;
                let p = g.constant(probe.clone());
                let weighted = g.mul(out, p)?;
                g.sum(weighted)
            },
            &qf.queries.value,
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        // The hand-wired graph above is the same computation as forward_frames.
        let mut qf2 = qf.clone();
        let mut g = Graph::new();
        qf2.bind(&mut g, true);
        let f = g.constant(feats.clone());
        let tok = qf2.project(&mut g, f).unwrap();
        let t = g.constant(text.clone());
        let out = qf2.forward_frames(&mut g, tok, None, t).unwrap();
        let p = g.constant(probe.clone());
        let weighted = g.mul(out, p).unwrap();
        let loss = g.sum(weighted).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad_tensor(qf2.queries.var());
        for (a, b) in grad.data().iter().zip(&report.analytic) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shape_is_independent_of_budget() {
        let mut r = rng(7);
        let text = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        for frames in [1, 4, 8] {
            let mut qf = QFormer::new(&cfg(4, 2), 3, 8, &mut rng(8)).unwrap();
            let mut g = Graph::new();
            qf.bind(&mut g, false);
            let f = g.constant(Tensor::randn(&[2, frames, 2, 3], 1.0, &mut r));
            let tok = qf.project(&mut g, f).unwrap();
            let t = g.constant(text.clone());
            let out = qf.forward_frames(&mut g, tok, None, t).unwrap();
            assert_eq!(g.shape(out), &[2, 3, 4]);
        }
    }

    #[test]
    fn over_budget_input_is_rejected() {
        let mut qf = QFormer::new(&cfg(4, 2), 3, 2, &mut rng(9)).unwrap();
        let mut g = Graph::new();
        qf.bind(&mut g, false);
        let f = g.constant(Tensor::zeros(&[1, 3, 2, 3]));
        let tok = qf.project(&mut g, f).unwrap();
        let t = g.constant(Tensor::zeros(&[1, 1, 4]));
        let err = qf.forward_frames(&mut g, tok, None, t).unwrap_err();
        assert!(matches!(err, Error::FrameBudget { frames: 3, budget: 2 }));
        // Masking down to two active frames fits.
        let w = g.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap());
        assert!(qf.forward_frames(&mut g, tok, Some(w), t).is_ok());
    }

    #[test]
    fn teacher_and_student_instances_agree_on_shared_parameters() {
        let teacher = QFormer::new(&cfg(4, 2), 3, 8, &mut rng(10)).unwrap();
        let mut student = QFormer::new(&cfg(4, 2), 3, 2, &mut rng(11)).unwrap();
        student.load("", &teacher.named_tensors("").into_iter().collect()).unwrap();
        let mut r = rng(12);
        let v = Tensor::randn(&[1, 4, 4], 1.0, &mut r);
        let t = Tensor::randn(&[1, 2, 4], 1.0, &mut r);
        assert_eq!(run(&teacher, &v, &t), run(&student, &v, &t));
    }

    #[test]
    fn decoder_variants_and_identity() {
        let mut r = rng(13);
        for kind in DecoderKind::ALL {
            let dec = DistillDecoder::new(kind, 4, 4, &mut r);
            let mut g = Graph::new();
            let mut dec2 = dec.clone();
            dec2.bind(&mut g, false);
            let x = g.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut r));
            let y = dec2.decode(&mut g, x).unwrap();
            assert_eq!(g.shape(y), &[2, 3, 4]);
        }
        // Identity FC with unit LN gain reduces to LN(x).
        let mut dec = DistillDecoder {
            kind: DecoderKind::FcLn,
            mlp: Mlp::new(vec![
                Layer::Fc(Linear::from_weight(Tensor::eye(4), Some(Tensor::zeros(&[4])))),
                Layer::Norm(LayerNorm::new(4)),
            ])
            .unwrap(),
        };
        let mut g = Graph::new();
        dec.bind(&mut g, false);
        let xt = Tensor::randn(&[3, 4], 1.0, &mut r);
        let x = g.constant(xt);
        let y = dec.decode(&mut g, x).unwrap();
        let (gain, bias) = (g.constant(Tensor::ones(&[4])), g.constant(Tensor::zeros(&[4])));
        let ln = g.layer_norm(x, gain, bias, crate::nn::LN_EPS).unwrap();
        assert_eq!(g.value(y), g.value(ln));
    }

    #[test]
    fn distill_loss_zero_for_matching_outputs_and_teacher_isolated() {
        let mut dec = DistillDecoder {
            kind: DecoderKind::Fc,
            mlp: Mlp::new(vec![Layer::Fc(Linear::from_weight(Tensor::eye(3), None))]).unwrap(),
        };
        let mut r = rng(14);
        let xt = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
        let mut g = Graph::new();
        dec.bind(&mut g, true);
        let s = g.leaf(xt.clone().with_grad());
        let t = g.leaf(xt.clone().with_grad());
        let loss = dec.distill_loss(&mut g, s, t).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);

        let mut teacher = QFormer::new(&cfg(3, 2), 2, 4, &mut rng(15)).unwrap();
        let mut student = QFormer::new(&cfg(3, 2), 2, 4, &mut rng(16)).unwrap();
        let mut dec = DistillDecoder::new(DecoderKind::FcLn, 3, 3, &mut r);
        let mut g = Graph::new();
        teacher.bind(&mut g, true);
        student.bind(&mut g, true);
        dec.bind(&mut g, true);
        let f = g.constant(Tensor::randn(&[1, 2, 2, 2], 1.0, &mut r));
        let text = g.constant(Tensor::randn(&[1, 2, 3], 1.0, &mut r));
        let tt = teacher.project(&mut g, f).unwrap();
        let st = student.project(&mut g, f).unwrap();
        let xt = teacher.forward_frames(&mut g, tt, None, text).unwrap();
        let xs = student.forward_frames(&mut g, st, None, text).unwrap();
        let loss = dec.distill_loss(&mut g, xs, xt).unwrap();
        assert!(g.value(loss).item() > 0.0);
        g.backward(loss).unwrap();
        for (name, grad) in teacher.grads(&g, "teacher") {
            assert!(grad.data().iter().all(|&v| v == 0.0), "{name}");
        }
        let student_grads = student.grads(&g, "student");
        assert!(student_grads.values().any(|t| t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn distill_loss_decreases_fitting_fixed_target() {
        let mut r = rng(17);
        let mut student = QFormer::new(&cfg(8, 2), 3, 4, &mut r).unwrap();
        let mut dec = DistillDecoder::new(DecoderKind::FcLn, 8, 8, &mut r);
        let feats = Tensor::randn(&[2, 2, 2, 3], 1.0, &mut r);
        let text = Tensor::randn(&[2, 2, 8], 1.0, &mut r);
        let target = Tensor::randn(&[2, 2, 8], 1.0, &mut r);
        let lr = 0.005;
        let mut losses = Vec::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            student.bind(&mut g, true);
            dec.bind(&mut g, true);
            let f = g.constant(feats.clone());
            let t = g.constant(text.clone());
            let y = g.constant(target.clone());
            let tok = student.project(&mut g, f).unwrap();
            let xs = student.forward_frames(&mut g, tok, None, t).unwrap();
            let loss = dec.distill_loss(&mut g, xs, y).unwrap();
            losses.push(g.value(loss).item());
            g.backward(loss).unwrap();
            let mut descend = |_: String, p: &mut Param| {
                let grad = g.grad_tensor(p.var());
                for (w, d) in p.value.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * d;
                }
            };
            student.visit_mut("student", &mut descend);
            dec.visit_mut("decoder", &mut descend);
        }
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!(losses[199] < 0.5 * losses[0]);
    }

    #[test]
    fn overlap_examples() {
        let a = SelectionMask::from_indices(&[vec![0, 3, 5, 7]], 12).unwrap();
        let b = SelectionMask::from_indices(&[vec![0, 1, 2, 3, 4, 5, 6, 7]], 12).unwrap();
        let c = SelectionMask::from_indices(&[vec![8, 9, 10, 11]], 12).unwrap();
        assert_eq!(selection_overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(selection_overlap(&a, &c).unwrap(), 0.0);
        assert_eq!(selection_overlap(&a, &b).unwrap(), 1.0);
        assert_eq!(selection_overlap(&b, &a).unwrap(), 0.5);
        let empty = SelectionMask::from_indices(&[vec![]], 12).unwrap();
        assert!(selection_overlap(&empty, &a).is_err());
    }
}
