//! Parameterized building blocks shared by all three model kinds.

use std::rc::Rc;

use rand::Rng;

use crate::error::{EalmError, Result};
use crate::numerics::{AttnMask, Graph, ParamId, ParamStore, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| EalmError::format(format!("missing parameter {name:?}")))
}

fn expect_shape(store: &ParamStore, id: ParamId, shape: &[usize]) -> Result<()> {
    let got = store.get(id).shape();
    if got != shape {
        return Err(EalmError::format(format!(
            "parameter {:?} has shape {got:?}, expected {shape:?}",
            store.name(id)
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[d_in, d_out], INIT_STD, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b }
    }

    pub fn bind(store: &ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = lookup(store, &format!("{name}.w"))?;
        expect_shape(store, w, &[d_in, d_out])?;
        let b = if bias {
            let b = lookup(store, &format!("{name}.b"))?;
            expect_shape(store, b, &[d_out])?;
            Some(b)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn bind(store: &ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = lookup(store, &format!("{name}.gain"))?;
        let bias = lookup(store, &format!("{name}.bias"))?;
        expect_shape(store, gain, &[d])?;
        expect_shape(store, bias, &[d])?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockDims {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Relative-position classes; zero disables the attention bias.
    pub rel_classes: usize,
}

/// Pre-norm transformer decoder block.
#[derive(Debug, Clone)]
pub struct Block {
    dims: BlockDims,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    rel_bias: Option<ParamId>,
}

impl Block {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: BlockDims, rng: &mut R) -> Self {
        let d = dims.d_model;
        Block {
            dims,
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), d),
            q: Linear::init(store, &format!("{name}.attn.q"), d, d, true, rng),
            k: Linear::init(store, &format!("{name}.attn.k"), d, d, true, rng),
            v: Linear::init(store, &format!("{name}.attn.v"), d, d, true, rng),
            o: Linear::init(store, &format!("{name}.attn.o"), d, d, true, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), d),
            ff1: Linear::init(store, &format!("{name}.ff1"), d, dims.d_ff, true, rng),
            ff2: Linear::init(store, &format!("{name}.ff2"), dims.d_ff, d, true, rng),
            rel_bias: (dims.rel_classes > 0).then(|| {
                store.add(
                    format!("{name}.attn.rel_bias"),
                    Tensor::zeros(&[dims.heads, dims.rel_classes]),
                )
            }),
        }
    }

    pub fn bind(store: &ParamStore, name: &str, dims: BlockDims) -> Result<Self> {
        let d = dims.d_model;
        let rel_bias = if dims.rel_classes > 0 {
            let id = lookup(store, &format!("{name}.attn.rel_bias"))?;
            expect_shape(store, id, &[dims.heads, dims.rel_classes])?;
            Some(id)
        } else {
            None
        };
        Ok(Block {
            dims,
            ln1: LayerNorm::bind(store, &format!("{name}.ln1"), d)?,
            q: Linear::bind(store, &format!("{name}.attn.q"), d, d, true)?,
            k: Linear::bind(store, &format!("{name}.attn.k"), d, d, true)?,
            v: Linear::bind(store, &format!("{name}.attn.v"), d, d, true)?,
            o: Linear::bind(store, &format!("{name}.attn.o"), d, d, true)?,
            ln2: LayerNorm::bind(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::bind(store, &format!("{name}.ff1"), d, dims.d_ff, true)?,
            ff2: Linear::bind(store, &format!("{name}.ff2"), dims.d_ff, d, true)?,
            rel_bias,
        })
    }

    /// Output projection of the feed-forward path; zeroing it and the
    /// attention output makes the block an identity map.
    pub fn residual_outputs(&self) -> [&Linear; 2] {
        [&self.o, &self.ff2]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &Rc<AttnMask>, dropout: f64) -> Var {
        let h = self.ln1.forward(g, store, x);
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, h);
        let v = self.v.forward(g, store, h);
        let bias = self.rel_bias.map(|b| g.param(store, b));
        let a = g.attention(q, k, v, bias, Rc::clone(mask), self.dims.heads);
        let a = self.o.forward(g, store, a);
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, store, x);
        let f = self.ff1.forward(g, store, h);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, store, f);
        let f = g.dropout(f, dropout);
        g.add(x, f)
    }
}

/// Two-layer scorer `Linear(d_in → hidden) → GELU → Linear(hidden → 1)`.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub hidden: Linear,
    pub out: Linear,
}

impl Scorer {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        Scorer {
            hidden: Linear::init(store, &format!("{name}.hidden"), d_in, hidden, true, rng),
            out: Linear::init(store, &format!("{name}.out"), hidden, 1, true, rng),
        }
    }

    pub fn bind(store: &ParamStore, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Scorer {
            hidden: Linear::bind(store, &format!("{name}.hidden"), d_in, hidden, true)?,
            out: Linear::bind(store, &format!("{name}.out"), hidden, 1, true)?,
        })
    }

    /// `[n, d_in] → [n, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Var {
        let h = self.hidden.forward(g, store, x);
        let h = g.gelu(h);
        let h = g.dropout(h, dropout);
        self.out.forward(g, store, h)
    }
}
