//! Spatial pooling of a branch feature map: attention pooling with a GAP
//! summary token, or plain GAP.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Var};
use crate::error::{Error, Result};
use crate::nn::{zeros, Bound, Linear, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Attention,
    Gap,
}

impl PoolingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolingKind::Attention => "attention",
            PoolingKind::Gap => "gap",
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(PoolingKind::Attention),
            "gap" => Ok(PoolingKind::Gap),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Per-channel spatial mean of N×C×H×W, giving N×C.
pub fn gap_pool(f: &Var) -> Var {
    let (n, c) = (f.shape()[0], f.shape()[1]);
    let hw = f.shape()[2] * f.shape()[3];
    ag::reshape(&ag::mean_axis(&ag::reshape(f, &[n, c, hw]), 2), &[n, c])
}

/// Token sequence [f_GAP; f_1 .. f_HW], N×(HW+1)×C, before position embeddings.
pub fn tokens(f: &Var) -> Var {
    let (n, c) = (f.shape()[0], f.shape()[1]);
    let hw = f.shape()[2] * f.shape()[3];
    let spatial = ag::permute(&ag::reshape(f, &[n, c, hw]), &[0, 2, 1]);
    let gap = ag::reshape(&gap_pool(f), &[n, 1, c]);
    ag::concat(&[gap, spatial], 1)
}

/// One self-attention layer over [GAP token; spatial tokens] + PE, read out
/// at the GAP token.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    /// (HW+1)×C.
    pub pos: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub n_tokens: usize,
}

impl AttentionPool {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        grid: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide {channels} channels"
            )));
        }
        let n_tokens = grid * grid + 1;
        let mut lin =
            |s: &str| Linear::new(store, rng, &format!("{name}.{s}"), channels, channels, true);
        let (query, key, value, out) = (lin("query"), lin("key"), lin("value"), lin("out"));
        let pos = store.add(
            format!("{name}.pos"),
            zeros(&[n_tokens, channels]),
            true,
            false,
        );
        Ok(AttentionPool {
            query,
            key,
            value,
            out,
            pos,
            channels,
            heads,
            n_tokens,
        })
    }

    /// N×C×H×W → N×C.
    pub fn forward(&self, p: &Bound, f: &Var) -> Result<Var> {
        let c = self.channels;
        let t = self.n_tokens;
        if f.shape()[1] != c || f.shape()[2] * f.shape()[3] + 1 != t {
            return Err(Error::Shape(format!(
                "attention pool expects N×{c}×H×W with H·W = {}, got {:?}",
                t - 1,
                f.shape()
            )));
        }
        let x = ag::add(&tokens(f), p.var(self.pos));
        self.attend(p, &x)
    }

    /// Attention readout at token 0 for N×T×C tokens (position embeddings
    /// already added).
    pub fn attend(&self, p: &Bound, x: &Var) -> Result<Var> {
        let (n, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.heads;
        let dh = c / h;
        let flat = ag::reshape(x, &[n * t, c]);
        let heads_of = |v: &Var, len: usize| {
            // N×len×C → (N·h)×len×dh
            ag::reshape(
                &ag::permute(&ag::reshape(v, &[n, len, h, dh]), &[0, 2, 1, 3]),
                &[n * h, len, dh],
            )
        };
        let x0 = ag::reshape(&ag::slice(x, 1, 0, 1), &[n, c]);
        let q = heads_of(&self.query.forward(p, &x0), 1);
        let k = heads_of(&ag::reshape(&self.key.forward(p, &flat), &[n, t, c]), t);
        let v = heads_of(&ag::reshape(&self.value.forward(p, &flat), &[n, t, c]), t);
        let scores = ag::scale(
            &ag::bmm(&q, &ag::permute(&k, &[0, 2, 1])),
            1.0 / (dh as f64).sqrt(),
        );
        let attn = ag::softmax(&scores, 2);
        let ctx = ag::reshape(&ag::bmm(&attn, &v), &[n, c]);
        Ok(self.out.forward(p, &ctx))
    }
}

/// Pooling of one branch.
#[derive(Clone, Debug)]
pub enum Pooling {
    Attention(AttentionPool),
    Gap,
}

impl Pooling {
    pub fn new(
        kind: PoolingKind,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        grid: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(match kind {
            PoolingKind::Attention => {
                Pooling::Attention(AttentionPool::new(store, rng, name, channels, grid, heads)?)
            }
            PoolingKind::Gap => Pooling::Gap,
        })
    }

    pub fn forward(&self, p: &Bound, f: &Var) -> Result<Var> {
        match self {
            Pooling::Attention(ap) => ap.forward(p, f),
            Pooling::Gap => Ok(gap_pool(f)),
        }
    }
}
