//! Attention and MLP building blocks.
//!
//! Linear maps use the row-vector convention `y = x·W (+ b)` with `W` stored
//! as `[d_in, d_out]`. Attention has no biases and no residual path; callers
//! inject positional information additively before calling in.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{join, Module, Param};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Tensor::randn(&[d_in, d_out], std, rng).into(),
            bias: bias.then(|| Tensor::zeros(&[d_out]).into()),
        }
    }

    pub fn from_weight(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: weight.into(),
            bias: bias.map(Param::new),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies the map to the last axis of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let d_in = *shape.last().unwrap_or(&0);
        if d_in != self.d_in() {
            return Err(Error::shape("linear", &shape, self.weight.shape()));
        }
        let rows = shape.iter().rev().skip(1).product::<usize>();
        let flat = g.reshape(x, &[rows, d_in])?;
        let y = g.matmul(flat, self.weight.var())?;
        let y = match &self.bias {
            Some(b) => g.add_broadcast(y, b.var())?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out();
        g.reshape(y, &out_shape)
    }
}

impl Module for Linear {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]).into(),
            bias: Tensor::zeros(&[d]).into(),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain.var(), self.bias.var(), LN_EPS)
    }
}

impl Module for LayerNorm {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Fc(Linear),
    Norm(LayerNorm),
    Relu,
    Gelu,
}

/// Ordered stack of FC layers, norms and activations.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            let (d_in, d_out) = match layer {
                Layer::Fc(l) => (Some(l.d_in()), Some(l.d_out())),
                Layer::Norm(n) => (Some(n.gain.shape()[0]), Some(n.gain.shape()[0])),
                Layer::Relu | Layer::Gelu => (None, None),
            };
            if let (Some(w), Some(d)) = (width, d_in) {
                if w != d {
                    return Err(Error::config(
                        format!("mlp layer {i}"),
                        format!("expects width {d}, previous layer produces {w}"),
                    ));
                }
            }
            width = d_out.or(width);
        }
        Ok(Self { layers })
    }

    pub fn d_in(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Fc(fc) => Some(fc.d_in()),
            Layer::Norm(n) => Some(n.gain.shape()[0]),
            _ => None,
        })
    }

    pub fn d_out(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Fc(fc) => Some(fc.d_out()),
            Layer::Norm(n) => Some(n.gain.shape()[0]),
            _ => None,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if let Some(d) = self.d_in() {
            let got = g.shape(x).last().copied().unwrap_or(0);
            if got != d {
                return Err(Error::shape("mlp", g.shape(x), &[d]));
            }
        }
        self.layers.iter().try_fold(x, |h, layer| match layer {
            Layer::Fc(l) => l.forward(g, h),
            Layer::Norm(n) => n.forward(g, h),
            Layer::Relu => g.relu(h),
            Layer::Gelu => g.gelu(h),
        })
    }
}

impl Module for Mlp {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &i.to_string());
            match layer {
                Layer::Fc(l) => l.visit_mut(&p, f),
                Layer::Norm(n) => n.visit_mut(&p, f),
                Layer::Relu | Layer::Gelu => {}
            }
        }
    }
}

/// Decoder stacks compared in the decoder ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Fc,
    #[default]
    FcLn,
    FcLnGeluFc,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::Fc, DecoderKind::FcLn, DecoderKind::FcLnGeluFc];

    pub fn label(self) -> &'static str {
        match self {
            DecoderKind::Fc => "FC",
            DecoderKind::FcLn => "FC+LN",
            DecoderKind::FcLnGeluFc => "FC+LN+GELU+FC",
        }
    }

    pub fn build<R: Rng + ?Sized>(self, d_in: usize, d_out: usize, rng: &mut R) -> Mlp {
        let layers = match self {
            DecoderKind::Fc => vec![Layer::Fc(Linear::new(d_in, d_out, true, rng))],
            DecoderKind::FcLn => vec![
                Layer::Fc(Linear::new(d_in, d_out, true, rng)),
                Layer::Norm(LayerNorm::new(d_out)),
            ],
            DecoderKind::FcLnGeluFc => vec![
                Layer::Fc(Linear::new(d_in, d_out, true, rng)),
                Layer::Norm(LayerNorm::new(d_out)),
                Layer::Gelu,
                Layer::Fc(Linear::new(d_out, d_out, true, rng)),
            ],
        };
        Mlp::new(layers).expect("decoder layers compose")
    }
}

/// Multi-head scaled dot-product attention projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub num_heads: usize,
}

/// Attention output plus the per-head weight matrices `[b, Lq, Lk]`.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(d_model: usize, num_heads: usize, rng: &mut R) -> Result<Self> {
        if num_heads == 0 || d_model % num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("must divide d_model ({d_model}), got {num_heads}"),
            ));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let mut w = || Param::new(Tensor::randn(&[d_model, d_model], std, rng));
        Ok(Self {
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
            num_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    fn project(&self, g: &mut Graph, x: Var, w: &Param) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let d = self.d_model();
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::shape("attention", &shape, &[d]));
        }
        let flat = g.reshape(x, &[shape[0] * shape[1], d])?;
        let y = g.matmul(flat, w.var())?;
        g.reshape(y, &shape)
    }

    /// `softmax(Q·Kᵀ/√d_head + ln(mask))·V` per head, heads concatenated and
    /// mapped through `Wo`. `key_mask` is `[b, Lk]` with entries in `[0, 1]`.
    pub fn attend(
        &self,
        g: &mut Graph,
        queries: Var,
        keys_values: Var,
        key_mask: Option<Var>,
    ) -> Result<Attended> {
        let (qs, ks) = (g.shape(queries).to_vec(), g.shape(keys_values).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(Error::shape("cross_attention", &qs, &ks));
        }
        if let Some(m) = key_mask {
            if g.shape(m) != [ks[0], ks[1]] {
                return Err(Error::shape("cross_attention mask", g.shape(m), &ks[..2]));
            }
        }
        let q = self.project(g, queries, &self.wq)?;
        let k = self.project(g, keys_values, &self.wk)?;
        let v = self.project(g, keys_values, &self.wv)?;
        let d_head = self.d_model() / self.num_heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (qh, kh, vh) = if self.num_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 2, h * d_head, d_head)?,
                    g.slice(k, 2, h * d_head, d_head)?,
                    g.slice(v, 2, h * d_head, d_head)?,
                )
            };
            let scores = g.bmm(qh, kh, true)?;
            let scores = g.scale(scores, scale)?;
            let w = match key_mask {
                Some(m) => g.masked_softmax(scores, m)?,
                None => g.softmax(scores, 2)?,
            };
            heads.push(g.bmm(w, vh, false)?);
            weights.push(w);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, 2)?
        };
        let output = self.project(g, merged, &self.wo)?;
        Ok(Attended { output, weights })
    }

    pub fn cross_attention(
        &self,
        g: &mut Graph,
        queries: Var,
        keys_values: Var,
        key_mask: Option<Var>,
    ) -> Result<Var> {
        Ok(self.attend(g, queries, keys_values, key_mask)?.output)
    }

    pub fn self_attention(&self, g: &mut Graph, tokens: Var, key_mask: Option<Var>) -> Result<Var> {
        self.cross_attention(g, tokens, tokens, key_mask)
    }
}

impl Module for Attention {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "wq"), &mut self.wq);
        f(join(prefix, "wk"), &mut self.wk);
        f(join(prefix, "wv"), &mut self.wv);
        f(join(prefix, "wo"), &mut self.wo);
    }
}
