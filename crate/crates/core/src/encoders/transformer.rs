//! Pre-LN transformer blocks shared by the image and text encoders.

use rand::Rng;

use crate::numerics::{truncated_normal, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

/// Scaled dot-product attention split over `heads` column groups.
///
/// `q` is `n x d`, `k` and `v` are `m x d`. Keys with `keep[j] == false`
/// receive zero weight. Returns the concatenated head outputs (`n x d`) and
/// the head-averaged attention weights (`n x m`). Each head scales its
/// scores by `1 / sqrt(d / heads)`.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    keep: Option<&[bool]>,
) -> (Var, Tensor) {
    let (n, d) = g.dims(q);
    let (m, _) = g.dims(k);
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut avg = vec![0.0; n * m];
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let scores = g.matmul_bt(qh, kh);
        let scores = g.scale(scores, scale);
        let attn = match keep {
            Some(keep) => g.masked_softmax_rows(scores, keep),
            None => g.softmax_rows(scores),
        };
        avg.iter_mut()
            .zip(g.value(attn).data())
            .for_each(|(a, w)| *a += w / heads as f64);
        outs.push(g.matmul(attn, vh));
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    (out, Tensor::matrix(n, m, avg))
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    /// Bias-free key projection.
    pub k: ParamId,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R, std: f64) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng, std),
            k: store.add(format!("{name}.k.weight"), truncated_normal(rng, &[d, d], std)),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng, std),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng, std),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, keep: Option<&[bool]>) -> Var {
        let q = self.q.forward(g, store, x);
        let wk = g.param(store, self.k);
        let k = g.matmul(x, wk);
        let v = self.v.forward(g, store, x);
        let (heads, _) = multi_head_attention(g, q, k, v, self.heads, keep);
        self.o.forward(g, store, heads)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, out: usize, rng: &mut R, std: f64) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng, std),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, rng, std),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut R,
        std: f64,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, heads, rng, std),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, mlp_hidden, d, rng, std),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, keep: Option<&[bool]>) -> Var {
        let h = self.ln1.forward(g, store, x);
        let h = self.attn.forward(g, store, h, keep);
        let x = g.add(x, h);
        let h = self.ln2.forward(g, store, x);
        let h = self.mlp.forward(g, store, h);
        g.add(x, h)
    }
}
