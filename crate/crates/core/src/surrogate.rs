//! Small stand-ins for the frozen pre-trained endpoints: a fixed linear
//! visual encoder, a token embedder, and a bilinear answer scorer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{join, Module, Param};

/// Fixed per-patch projection from raw frame data to encoder channels.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    pub projection: Tensor,
}

impl VisualEncoder {
    pub fn new(raw_dim: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            projection: Tensor::randn(&[raw_dim, channels], 1.0 / (raw_dim as f64).sqrt(), &mut rng),
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.projection.shape()[1]
    }

    /// `raw[..., raw_dim]` → `[..., C]`. Never part of a gradient path.
    pub fn encode(&self, raw: &Tensor) -> Result<Tensor> {
        let shape = raw.shape();
        let r = self.raw_dim();
        if shape.last() != Some(&r) {
            return Err(Error::shape("encode_video", shape, self.projection.shape()));
        }
        let c = self.channels();
        let p = self.projection.data();
        let mut out = Vec::with_capacity(raw.numel() / r * c);
        for row in raw.data().chunks(r) {
            for j in 0..c {
                out.push(row.iter().enumerate().map(|(i, x)| x * p[i * c + j]).sum());
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = c;
        Tensor::new(out_shape, out)
    }
}

/// Token embedding plus learned absolute positions.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: Param,
    pub positional: Param,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(vocab: usize, max_len: usize, d_model: usize, rng: &mut R) -> Self {
        Self {
            embedding: Param::new(Tensor::randn(&[vocab, d_model], 1.0, rng)),
            positional: Param::new(Tensor::randn(&[max_len, d_model], 0.5, rng)),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn max_len(&self) -> usize {
        self.positional.shape()[0]
    }

    /// Equal-length token rows → `[B, L, d]`.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[Vec<usize>]) -> Result<Var> {
        let b = tokens.len();
        let l = tokens.first().map_or(0, Vec::len);
        if b == 0 || l == 0 || tokens.iter().any(|t| t.len() != l) {
            return Err(Error::shape("encode_text", &[b, l], &[b, l]));
        }
        if l > self.max_len() {
            return Err(Error::shape("encode_text", &[l], &[self.max_len()]));
        }
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let emb = g.embedding(self.embedding.var(), &ids, &[b, l])?;
        let pos = g.slice(self.positional.var(), 0, 0, l)?;
        g.add_broadcast(emb, pos)
    }

    /// Each choice is the mean of its encoded tokens: `[B, A, d]`.
    pub fn encode_choices(&self, g: &mut Graph, choices: &[Vec<Vec<usize>>]) -> Result<Var> {
        let b = choices.len();
        let a = choices.first().map_or(0, Vec::len);
        if choices.iter().any(|c| c.len() != a) {
            return Err(Error::shape("encode_choices", &[b, a], &[b]));
        }
        let rows: Vec<Vec<usize>> = choices.iter().flatten().cloned().collect();
        let enc = self.encode_text(g, &rows)?;
        let pooled = g.mean_axis(enc, 1)?;
        let d = self.embedding.shape()[1];
        g.reshape(pooled, &[b, a, d])
    }
}

impl Module for TextEncoder {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "embedding"), &mut self.embedding);
        f(join(prefix, "positional"), &mut self.positional);
    }
}

/// Scores the mean fused vector against each answer choice through a
/// bilinear form.
#[derive(Clone, Debug)]
pub struct AnswerHead {
    pub score: Param,
}

impl AnswerHead {
    pub fn new<R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> Self {
        Self {
            score: Param::new(Tensor::randn(&[d_model, d_model], 1.0 / d_model as f64, rng)),
        }
    }

    /// `logit[b, a] = mean_l(x[b, l])ᵀ · S · choice[b, a]`.
    pub fn score_answers(&self, g: &mut Graph, fused: Var, choices: Var) -> Result<Var> {
        let (fs, cs) = (g.shape(fused).to_vec(), g.shape(choices).to_vec());
        if fs.len() != 3 || cs.len() != 3 || fs[0] != cs[0] || fs[2] != cs[2] {
            return Err(Error::shape("score_answers", &fs, &cs));
        }
        if cs[1] < 2 {
            return Err(Error::config("choices", format!("need at least 2, got {}", cs[1])));
        }
        let (b, d, a) = (fs[0], fs[2], cs[1]);
        let pooled = g.mean_axis(fused, 1)?;
        let projected = g.matmul(pooled, self.score.var())?;
        let projected = g.reshape(projected, &[b, 1, d])?;
        let logits = g.bmm(projected, choices, true)?;
        g.reshape(logits, &[b, a])
    }
}

impl Module for AnswerHead {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "score"), &mut self.score);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaLoss {
    #[default]
    CrossEntropy,
    /// Squared error between `softmax(logits)` and the one-hot answer.
    MseOneHot,
}

pub fn vqa_loss(g: &mut Graph, logits: Var, answers: &[usize], kind: VqaLoss) -> Result<Var> {
    match kind {
        VqaLoss::CrossEntropy => g.cross_entropy(logits, answers),
        VqaLoss::MseOneHot => {
            let shape = g.shape(logits).to_vec();
            if shape.len() != 2 || shape[0] != answers.len() {
                return Err(Error::shape("vqa_loss", &shape, &[answers.len()]));
            }
            let k = shape[1];
            if let Some(&index) = answers.iter().find(|&&a| a >= k) {
                return Err(Error::TargetOutOfRange { index, classes: k });
            }
            let target = Tensor::from_fn(&shape, |i| if answers[i / k] == i % k { 1.0 } else { 0.0 });
            let p = g.softmax(logits, 1)?;
            let t = g.constant(target);
            g.mse(p, t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheck};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn visual_encoder_is_linear_and_deterministic() {
        let enc = VisualEncoder::new(16, 8, 7);
        assert_eq!(enc, VisualEncoder::new(16, 8, 7));
        let zero = enc.encode(&Tensor::zeros(&[2, 3, 4, 16])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero.shape(), &[2, 3, 4, 8]);

        let mut r = rng(1);
        let x = Tensor::randn(&[5, 16], 1.0, &mut r);
        let y = Tensor::randn(&[5, 16], 1.0, &mut r);
        let (a, b) = (1.7, -0.3);
        let mix = Tensor::from_fn(&[5, 16], |i| a * x.data()[i] + b * y.data()[i]);
        let (ex, ey, em) = (enc.encode(&x).unwrap(), enc.encode(&y).unwrap(), enc.encode(&mix).unwrap());
        for i in 0..em.numel() {
            assert!((em.data()[i] - (a * ex.data()[i] + b * ey.data()[i])).abs() < 1e-12);
        }
        assert!(!enc.projection.requires_grad);
        assert!(enc.encode(&Tensor::zeros(&[2, 15])).is_err());
    }

    #[test]
    fn text_encoding_lookup_and_positions() {
        let mut enc = TextEncoder::new(10, 4, 3, &mut rng(2));
        enc.positional.value = Tensor::zeros(&[4, 3]);
        let mut g = Graph::new();
        enc.bind(&mut g, false);
        let out = enc.encode_text(&mut g, &[vec![7]]).unwrap();
        assert_eq!(g.value(out).data(), &enc.embedding.value.data()[21..24]);

        let mut enc = TextEncoder::new(10, 4, 3, &mut rng(3));
        let mut g = Graph::new();
        enc.bind(&mut g, false);
        let out = enc.encode_text(&mut g, &[vec![5, 5]]).unwrap();
        let v = g.value(out).data();
        assert_ne!(&v[..3], &v[3..]);
        assert!(matches!(
            enc.encode_text(&mut g, &[vec![10]]),
            Err(Error::OutOfVocabulary { id: 10, vocab: 10 })
        ));
    }

    #[test]
    fn identical_choices_score_identically() {
        let mut r = rng(4);
        let mut head = AnswerHead::new(4, &mut r);
        let mut g = Graph::new();
        head.bind(&mut g, false);
        let x = g.constant(Tensor::randn(&[1, 3, 4], 1.0, &mut r));
        let c = Tensor::randn(&[4], 1.0, &mut r);
        let choices = g.constant(Tensor::from_fn(&[1, 3, 4], |i| c.data()[i % 4]));
        let logits = head.score_answers(&mut g, x, choices).unwrap();
        let l = g.value(logits).data();
        assert!(l.iter().all(|&v| v == l[0]));
    }

    #[test]
    fn identity_score_picks_aligned_choice() {
        let mut head = AnswerHead { score: Param::new(Tensor::eye(4)) };
        let mut g = Graph::new();
        head.bind(&mut g, false);
        let e = |k: usize| (0..4).map(move |i| if i == k { 1.0 } else { 0.0 });
        let x = g.constant(Tensor::new(vec![1, 1, 4], e(2).collect()).unwrap());
        let choices = g.constant(Tensor::new(vec![1, 4, 4], (0..4).flat_map(e).collect()).unwrap());
        let logits = head.score_answers(&mut g, x, choices).unwrap();
        assert_eq!(crate::prompter::argmax(g.value(logits).data()), 2);
        let one = g.constant(Tensor::zeros(&[1, 1, 4]));
        assert!(head.score_answers(&mut g, x, one).is_err());
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let mut r = rng(5);
        let head = AnswerHead::new(3, &mut r);
        let x = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
        let c = Tensor::randn(&[2, 4, 3], 1.0, &mut r);
        let report = grad_check(
            |g, s| {
                let xv = g.constant(x.clone());
                let cv = g.constant(c.clone());
                let pooled = g.mean_axis(xv, 1)?;
                let proj = g.matmul(pooled, s)?;
                let proj = g.reshape(proj, &[2, 1, 3])?;
                let logits = g.bmm(proj, cv, true)?;
                let logits = g.reshape(logits, &[2, 4])?;
                g.cross_entropy(logits, &[1, 3])
            },
            &head.score.value,
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        let mut h = head.clone();
        let mut g = Graph::new();
        h.bind(&mut g, true);
        let (xv, cv) = (g.constant(x), g.constant(c));
        let logits = h.score_answers(&mut g, xv, cv).unwrap();
        let loss = vqa_loss(&mut g, logits, &[1, 3], VqaLoss::CrossEntropy).unwrap();
        g.backward(loss).unwrap();
        for (a, b) in g.grad_tensor(h.score.var()).data().iter().zip(&report.analytic) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn choice_permutation_permutes_logits() {
        let mut r = rng(6);
        let mut head = AnswerHead::new(3, &mut r);
        let x = Tensor::randn(&[1, 2, 3], 1.0, &mut r);
        let c = Tensor::randn(&[1, 4, 3], 1.0, &mut r);
        let perm = [2usize, 0, 3, 1];
        let cp = Tensor::from_fn(&[1, 4, 3], |i| c.data()[perm[i / 3] * 3 + i % 3]);
        let mut g = Graph::new();
        head.bind(&mut g, false);
        let xv = g.constant(x);
        let (a, b) = (g.constant(c), g.constant(cp));
        let la = head.score_answers(&mut g, xv, a).unwrap();
        let lb = head.score_answers(&mut g, xv, b).unwrap();
        let (la, lb) = (g.value(la).data().to_vec(), g.value(lb).data().to_vec());
        for k in 0..4 {
            assert!((lb[k] - la[perm[k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn vqa_loss_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[1, 5]));
        let l = vqa_loss(&mut g, uniform, &[2], VqaLoss::CrossEntropy).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
        let sharp = g.constant(Tensor::new(vec![1, 3], vec![0.0, 40.0, 0.0]).unwrap());
        let l = vqa_loss(&mut g, sharp, &[1], VqaLoss::CrossEntropy).unwrap();
        assert!(g.value(l).item() < 1e-12);
        let m = vqa_loss(&mut g, sharp, &[1], VqaLoss::MseOneHot).unwrap();
        assert!(g.value(m).item() < 1e-12);

        let mut r = rng(7);
        let logits = Tensor::randn(&[3, 4], 1.0, &mut r);
        let mut g = Graph::new();
        let v = g.constant(logits);
        let a = vqa_loss(&mut g, v, &[0, 3, 1], VqaLoss::CrossEntropy).unwrap();
        let b = g.cross_entropy(v, &[0, 3, 1]).unwrap();
        assert_eq!(g.value(a).item().to_bits(), g.value(b).item().to_bits());
    }
}
