//! Text-guided differentiable frame selection.
//!
//! Frames are mean-pooled over channels, embedded per frame, scored, and
//! sampled with the Gumbel-max trick (hard) or its temperature relaxation
//! (soft). The chosen frames are then read by text queries through a
//! cross-attention block whose output is the fused sequence handed to the
//! answer head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Layer, LayerNorm, Linear, Mlp};
use crate::params::{join, Module, Param};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// One frame from each of `S` contiguous segments.
    #[default]
    Segmented,
    /// Independent keep/drop decision per frame.
    FreeForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FramePrompterConfig {
    pub frames: usize,
    pub segments: usize,
    pub patches: usize,
    pub channels: usize,
    pub d_model: usize,
    pub embed_hidden: usize,
    pub num_heads: usize,
    pub design: Design,
    pub tau_start: f64,
    pub tau_end: f64,
    pub straight_through: bool,
    /// Initial bias on the keep logit in the free-form design.
    pub keep_bias: f64,
}

impl Default for FramePrompterConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            segments: 4,
            patches: 4,
            channels: 8,
            d_model: 64,
            embed_hidden: 32,
            num_heads: 1,
            design: Design::Segmented,
            tau_start: 1.0,
            tau_end: 0.01,
            straight_through: true,
            keep_bias: 2.0,
        }
    }
}

impl FramePrompterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.segments > self.frames {
            return Err(Error::config("segments", "must satisfy 1 <= S <= T"));
        }
        if self.design == Design::Segmented && self.frames % self.segments != 0 {
            return Err(Error::config(
                "segments",
                format!("T ({}) must be divisible by S ({})", self.frames, self.segments),
            ));
        }
        if self.patches == 0 || self.channels == 0 || self.d_model == 0 || self.embed_hidden < 2 {
            return Err(Error::config("prompter", "widths must be positive (embed_hidden >= 2)"));
        }
        if !(self.tau_end > 0.0) {
            return Err(Error::config("tau_end", "must be > 0"));
        }
        if self.tau_start < self.tau_end {
            return Err(Error::config("tau_start", "must be >= tau_end"));
        }
        Ok(())
    }

    pub fn segment_len(&self) -> usize {
        self.frames / self.segments
    }
}

/// `τ = τ_start·(τ_end/τ_start)^(step/total)`.
pub fn tau_schedule(step: usize, total: usize, tau_start: f64, tau_end: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("total_steps", "must be >= 1"));
    }
    if step > total {
        return Err(Error::config("step", format!("{step} exceeds total {total}")));
    }
    if step == 0 {
        return Ok(tau_start);
    }
    if step == total {
        return Ok(tau_end);
    }
    let ratio = tau_end / tau_start;
    if 2 * step == total {
        return Ok(tau_start * ratio.sqrt());
    }
    Ok(tau_start * ratio.powf(step as f64 / total as f64))
}

/// Standard Gumbel(0, 1) draws `-ln(-ln u)`, `u` uniform on the open interval.
pub fn sample_gumbel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break -(-u.ln()).ln();
        }
    })
}

fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame selection as values: what was picked, hard and relaxed.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    /// `[B, T]` in {0, 1}.
    pub hard: Tensor,
    /// `[B, T]` relaxed weights (equal to `hard` at inference).
    pub soft: Tensor,
    /// `[B, S, T/S]` one-hot rows for the segmented design.
    pub per_segment: Option<Tensor>,
    /// Selected frame indices per batch row, increasing.
    pub selected_indices: Vec<Vec<usize>>,
}

impl SelectionMask {
    pub fn batch(&self) -> usize {
        self.hard.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.hard.shape()[1]
    }

    fn from_hard(hard: Tensor, soft: Tensor, per_segment: Option<Tensor>) -> Self {
        let t = hard.shape()[1];
        let selected_indices = hard
            .data()
            .chunks(t)
            .map(|row| (0..t).filter(|&i| row[i] > 0.5).collect())
            .collect();
        Self {
            hard,
            soft,
            per_segment,
            selected_indices,
        }
    }

    /// Mask built from explicit index lists (e.g. uniform sampling).
    pub fn from_indices(indices: &[Vec<usize>], frames: usize) -> Result<Self> {
        let mut hard = Tensor::zeros(&[indices.len(), frames]);
        for (b, row) in indices.iter().enumerate() {
            for &t in row {
                if t >= frames {
                    return Err(Error::shape("selection", &[t], &[frames]));
                }
                hard.data_mut()[b * frames + t] = 1.0;
            }
        }
        Ok(Self::from_hard(hard.clone(), hard, None))
    }
}

/// Per-segment Gumbel-max over `logits[B, S, T/S]`. `noise` of the same shape
/// replaces the random draw; zero noise gives the plain argmax.
pub fn gumbel_select_with_noise(logits: &Tensor, noise: &Tensor) -> Result<SelectionMask> {
    let shape = logits.shape();
    if shape.len() != 3 || noise.shape() != shape {
        return Err(Error::shape("gumbel_sample_hard", shape, noise.shape()));
    }
    let (b, s, l) = (shape[0], shape[1], shape[2]);
    let logp = log_softmax_rows(logits.data(), l);
    let mut per_segment = Tensor::zeros(shape);
    for (row, chunk) in logp.chunks(l).enumerate() {
        let perturbed: Vec<f64> = chunk.iter().zip(&noise.data()[row * l..][..l]).map(|(a, g)| a + g).collect();
        per_segment.data_mut()[row * l + argmax(&perturbed)] = 1.0;
    }
    let hard = per_segment.clone().reshape(&[b, s * l])?;
    Ok(SelectionMask::from_hard(hard.clone(), hard, Some(per_segment)))
}

/// Per-frame keep/drop Gumbel-max over `logits[B, T, 2]` (class 0 keeps).
pub fn keep_select_with_noise(logits: &Tensor, noise: &Tensor) -> Result<SelectionMask> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[2] != 2 || noise.shape() != shape {
        return Err(Error::shape("free_form_mask", shape, noise.shape()));
    }
    let (b, t) = (shape[0], shape[1]);
    let logp = log_softmax_rows(logits.data(), 2);
    let hard = Tensor::from_fn(&[b, t], |i| {
        let keep = logp[2 * i] + noise.data()[2 * i];
        let drop = logp[2 * i + 1] + noise.data()[2 * i + 1];
        if keep >= drop { 1.0 } else { 0.0 }
    });
    Ok(SelectionMask::from_hard(hard.clone(), hard, None))
}

pub fn gumbel_sample_hard<R: Rng + ?Sized>(logits: &Tensor, rng: &mut R) -> Result<SelectionMask> {
    let noise = sample_gumbel(logits.shape(), rng);
    gumbel_select_with_noise(logits, &noise)
}

/// `softmax((log_softmax(logits) + noise) / τ)` along the last axis, recorded
/// on the graph.
pub fn relaxed_weights(g: &mut Graph, logits: Var, noise: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config("tau", format!("must be > 0, got {tau}")));
    }
    let axis = g.shape(logits).len() - 1;
    let logp = g.log_softmax(logits, axis)?;
    let n = g.constant(noise.clone());
    let perturbed = g.add(logp, n)?;
    let scaled = g.scale(perturbed, 1.0 / tau)?;
    g.softmax(scaled, axis)
}

/// A selection plus the graph variable `[B, T]` that carries it into
/// attention: hard forward with soft gradient when straight-through, the
/// relaxed weights otherwise, a constant at inference.
#[derive(Debug)]
pub struct Selection {
    pub mask: SelectionMask,
    pub weights: Var,
}

/// Relaxed per-segment sample. With `straight_through` the forward value of
/// `weights` is bitwise the hard one-hot of [`gumbel_select_with_noise`].
pub fn gumbel_sample_soft(
    g: &mut Graph,
    logits: Var,
    noise: &Tensor,
    tau: f64,
    straight_through: bool,
) -> Result<Selection> {
    let hard = gumbel_select_with_noise(g.value(logits), noise)?;
    let soft = relaxed_weights(g, logits, noise, tau)?;
    let shape = g.shape(logits).to_vec();
    let flat = [shape[0], shape[1] * shape[2]];
    let soft_flat = g.reshape(soft, &flat)?;
    let weights = if straight_through {
        g.straight_through(hard.hard.clone(), soft_flat)?
    } else {
        soft_flat
    };
    let mask = SelectionMask {
        soft: g.value(soft_flat).clone(),
        ..hard
    };
    Ok(Selection { mask, weights })
}

/// How selected frames reach the guide attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Gather the selected frames' tokens; the key set shrinks.
    Gather,
    /// Keep all frames and weight keys by the mask.
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectMode {
    /// Relaxed Gumbel sample at temperature `tau` (straight-through per config).
    Train { tau: f64 },
    /// Noiseless argmax, hard gather.
    Infer,
    /// Noiseless relaxed weights at `tau`, all frames kept.
    SoftTau { tau: f64 },
}

#[derive(Clone, Debug)]
pub struct FramePrompter {
    pub cfg: FramePrompterConfig,
    pub embed: Mlp,
    pub select_head: Linear,
    pub guide: Attention,
}

impl FramePrompter {
    pub fn new<R: Rng + ?Sized>(cfg: FramePrompterConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.patches;
        let embed = Mlp::new(vec![
            Layer::Fc(Linear::new(n, cfg.embed_hidden, true, rng)),
            Layer::Norm(LayerNorm::new(cfg.embed_hidden)),
            Layer::Relu,
            Layer::Fc(Linear::new(cfg.embed_hidden, n, true, rng)),
        ])?;
        let select_head = match cfg.design {
            Design::Segmented => {
                let l = cfg.segment_len();
                Linear::new(l * n, l, true, rng)
            }
            Design::FreeForm => {
                let mut head = Linear::new(n, 2, true, rng);
                if let Some(b) = &mut head.bias {
                    b.value.data_mut()[0] = cfg.keep_bias;
                }
                head
            }
        };
        let mut guide = Attention::new(cfg.d_model, cfg.num_heads, rng)?;
        // The guide output is added to the fused sequence; start it silent.
        guide.wo = Param::new(Tensor::zeros(&[cfg.d_model, cfg.d_model]));
        Ok(Self {
            cfg,
            embed,
            select_head,
            guide,
        })
    }

    /// `[B, T, N, C]` → mean over channels → per-frame embedding `[B, T, N]`.
    pub fn pool_and_embed(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = &self.cfg;
        if shape.len() != 4 || shape[1] != c.frames || shape[2] != c.patches || shape[3] != c.channels {
            return Err(Error::shape(
                "pool_and_embed",
                &shape,
                &[shape.first().copied().unwrap_or(0), c.frames, c.patches, c.channels],
            ));
        }
        let pooled = g.mean_axis(x, 3)?;
        self.embed.forward(g, pooled)
    }

    /// Contiguous chunks of `T/S` frames flattened and scored: `[B, S, T/S]`.
    pub fn segment_logits(&self, g: &mut Graph, embedded: Var) -> Result<Var> {
        let shape = g.shape(embedded).to_vec();
        let c = &self.cfg;
        if c.frames % c.segments != 0 {
            return Err(Error::config("segments", "T must be divisible by S"));
        }
        if shape.len() != 3 || shape[1] != c.frames || shape[2] != c.patches {
            return Err(Error::shape("segment_logits", &shape, &[c.frames, c.patches]));
        }
        let l = c.segment_len();
        let flat = g.reshape(embedded, &[shape[0], c.segments, l * c.patches])?;
        self.select_head.forward(g, flat)
    }

    /// Keep/drop logits `[B, T, 2]` (class 0 keeps the frame).
    pub fn keep_logits(&self, g: &mut Graph, embedded: Var) -> Result<Var> {
        self.select_head.forward(g, embedded)
    }

    /// Shape of the Gumbel noise consumed by one selection over `batch` rows.
    pub fn noise_shape(&self, batch: usize) -> Vec<usize> {
        match self.cfg.design {
            Design::Segmented => vec![batch, self.cfg.segments, self.cfg.segment_len()],
            Design::FreeForm => vec![batch, self.cfg.frames, 2],
        }
    }

    /// Per-frame binary keep/drop relaxation over `[B, T, 2]` keep logits.
    pub fn free_form_mask(
        &self,
        g: &mut Graph,
        embedded: Var,
        noise: &Tensor,
        tau: f64,
        straight_through: bool,
    ) -> Result<Selection> {
        let logits = self.keep_logits(g, embedded)?;
        let shape = g.shape(logits).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let hard = keep_select_with_noise(g.value(logits), noise)?.hard;
        let soft = relaxed_weights(g, logits, noise, tau)?;
        let keep = g.slice(soft, 2, 0, 1)?;
        let keep = g.reshape(keep, &[b, t])?;
        let weights = if straight_through {
            g.straight_through(hard.clone(), keep)?
        } else {
            keep
        };
        let soft_vals = g.value(keep).clone();
        Ok(Selection {
            mask: SelectionMask::from_hard(hard, soft_vals, None),
            weights,
        })
    }

    fn noiseless_soft(&self, g: &mut Graph, logits: Var, tau: f64) -> Result<Var> {
        let zero = Tensor::zeros(g.shape(logits));
        relaxed_weights(g, logits, &zero, tau)
    }

    /// Selection for `features[B, T, N, C]` with explicit Gumbel noise (only
    /// read in training mode).
    pub fn select_with_noise(
        &self,
        g: &mut Graph,
        features: Var,
        mode: SelectMode,
        noise: &Tensor,
    ) -> Result<Selection> {
        let embedded = self.pool_and_embed(g, features)?;
        let b = g.shape(embedded)[0];
        let st = self.cfg.straight_through;
        match (self.cfg.design, mode) {
            (Design::Segmented, SelectMode::Train { tau }) => {
                let logits = self.segment_logits(g, embedded)?;
                gumbel_sample_soft(g, logits, noise, tau, st)
            }
            (Design::FreeForm, SelectMode::Train { tau }) => self.free_form_mask(g, embedded, noise, tau, st),
            (design, SelectMode::Infer) => {
                let zero = Tensor::zeros(&self.noise_shape(b));
                let mask = match design {
                    Design::Segmented => {
                        let logits = self.segment_logits(g, embedded)?;
                        gumbel_select_with_noise(g.value(logits), &zero)?
                    }
                    Design::FreeForm => {
                        let logits = self.keep_logits(g, embedded)?;
                        keep_select_with_noise(g.value(logits), &zero)?
                    }
                };
                let weights = g.constant(mask.hard.clone());
                Ok(Selection { mask, weights })
            }
            (design, SelectMode::SoftTau { tau }) => {
                let (logits, weights) = match design {
                    Design::Segmented => {
                        let logits = self.segment_logits(g, embedded)?;
                        let soft = self.noiseless_soft(g, logits, tau)?;
                        (logits, g.reshape(soft, &[b, self.cfg.frames])?)
                    }
                    Design::FreeForm => {
                        let logits = self.keep_logits(g, embedded)?;
                        let soft = self.noiseless_soft(g, logits, tau)?;
                        let keep = g.slice(soft, 2, 0, 1)?;
                        (logits, g.reshape(keep, &[b, self.cfg.frames])?)
                    }
                };
                let zero = Tensor::zeros(&self.noise_shape(b));
                let hard = match design {
                    Design::Segmented => gumbel_select_with_noise(g.value(logits), &zero)?.hard,
                    Design::FreeForm => keep_select_with_noise(g.value(logits), &zero)?.hard,
                };
                let soft = g.value(weights).clone();
                Ok(Selection {
                    mask: SelectionMask::from_hard(hard, soft, None),
                    weights,
                })
            }
        }
    }

    pub fn select<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        features: Var,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<Selection> {
        let b = g.shape(features)[0];
        let noise = match mode {
            SelectMode::Train { .. } => sample_gumbel(&self.noise_shape(b), rng),
            _ => Tensor::zeros(&self.noise_shape(b)),
        };
        self.select_with_noise(g, features, mode, &noise)
    }

    /// `X_LLM = CrossAttn(text, X·M)` over frame tokens `[B, T, N, d]`.
    pub fn apply_mask_and_fuse(
        &self,
        g: &mut Graph,
        tokens: Var,
        selection: &Selection,
        text: Var,
        fusion: Fusion,
    ) -> Result<Var> {
        let (keys, mask) = mask_frame_tokens(g, tokens, selection, fusion)?;
        self.guide.cross_attention(g, text, keys, mask)
    }

    /// Selection followed by fusion; inference gathers, the other modes mask.
    pub fn select_frames<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        features: Var,
        tokens: Var,
        text: Var,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<(Var, Selection)> {
        let selection = self.select(g, features, mode, rng)?;
        let fusion = fusion_for(mode, self.cfg.design);
        let fused = self.apply_mask_and_fuse(g, tokens, &selection, text, fusion)?;
        Ok((fused, selection))
    }
}

/// Gathering needs equal-size selections, which only the segmented design
/// guarantees; free-form inference masks instead (exact key removal).
pub fn fusion_for(mode: SelectMode, design: Design) -> Fusion {
    match (mode, design) {
        (SelectMode::Infer, Design::Segmented) => Fusion::Gather,
        _ => Fusion::Masked,
    }
}

/// Flattens frame tokens `[B, T, N, d]` to keys `[B, L, d]` honouring the
/// selection: gathered frames (no mask) or all frames with a per-key weight.
pub fn mask_frame_tokens(
    g: &mut Graph,
    tokens: Var,
    selection: &Selection,
    fusion: Fusion,
) -> Result<(Var, Option<Var>)> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 4 || selection.mask.frames() != shape[1] || selection.mask.batch() != shape[0] {
        return Err(Error::shape("apply_mask_and_fuse", &shape, selection.mask.hard.shape()));
    }
    let (b, t, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    match fusion {
        Fusion::Gather => {
            let idx = &selection.mask.selected_indices;
            if idx.iter().any(Vec::is_empty) {
                return Err(Error::NoAttendableKeys);
            }
            let picked = g.gather(tokens, idx)?;
            let s = idx[0].len();
            Ok((g.reshape(picked, &[b, s * n, d])?, None))
        }
        Fusion::Masked => {
            let keys = g.reshape(tokens, &[b, t * n, d])?;
            let mask = g.repeat_interleave(selection.weights, n)?;
            Ok((keys, Some(mask)))
        }
    }
}

impl Module for FramePrompter {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.select_head.visit_mut(&join(prefix, "select_head"), f);
        self.guide.visit_mut(&join(prefix, "guide"), f);
    }
}
