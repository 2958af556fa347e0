//! Knowledge retrieval module: stacked cross-attention between two token
//! sequences, the pooled alignment score, and attention-map extraction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::multi_head_attention;
use crate::error::{Error, Result};
use crate::numerics::{truncated_normal, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KrmConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
}

impl Default for KrmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d: 32,
            heads: 4,
        }
    }
}

impl KrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidArgument("KRM needs at least one layer".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "KRM width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// One cross-attention layer: bias-free `W_q`, `W_k`, `W_v`, then
/// `LN(query + attention)`.
#[derive(Debug, Clone)]
pub struct KrmLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Krm {
    pub config: KrmConfig,
    pub layers: Vec<KrmLayer>,
}

#[derive(Debug, Clone)]
pub struct KrmOutput {
    /// Enriched query sequence, `N x d`.
    pub out: Var,
    /// Head-averaged attention weights (`N x M`) for each layer.
    pub attn: Vec<Tensor>,
    /// Attention output before the residual and normalization, per layer.
    pub attended: Vec<Var>,
}

impl KrmOutput {
    pub fn last_attention(&self) -> &Tensor {
        self.attn.last().expect("KRM has at least one layer")
    }
}

impl Krm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: KrmConfig, rng: &mut R, std: f64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                KrmLayer {
                    w_q: store.add(format!("{p}.w_q"), truncated_normal(rng, &[d, d], std)),
                    w_k: store.add(format!("{p}.w_k"), truncated_normal(rng, &[d, d], std)),
                    w_v: store.add(format!("{p}.w_v"), truncated_normal(rng, &[d, d], std)),
                    ln: LayerNorm::new(store, &format!("{p}.ln"), d),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Queries from `query` (`N x d`) attend over `kv` (`M x d`). Keys with
    /// `kv_keep[j] == false` are ignored.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, query: Var, kv: Var, kv_keep: Option<&[bool]>) -> KrmOutput {
        let d = self.config.d;
        assert_eq!(g.dims(query).1, d, "KRM query width");
        assert_eq!(g.dims(kv).1, d, "KRM key/value width");
        let mut x = query;
        let mut attn = Vec::with_capacity(self.layers.len());
        let mut attended = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let wq = g.param(store, layer.w_q);
            let wk = g.param(store, layer.w_k);
            let wv = g.param(store, layer.w_v);
            let q = g.matmul(x, wq);
            let k = g.matmul(kv, wk);
            let v = g.matmul(kv, wv);
            let (a, weights) = multi_head_attention(g, q, k, v, self.config.heads, kv_keep);
            attn.push(weights);
            attended.push(a);
            let r = g.add(x, a);
            x = layer.ln.forward(g, store, r);
        }
        KrmOutput { out: x, attn, attended }
    }
}

/// Free-function form of [`Krm::attend`].
pub fn krm_attend(g: &mut Graph, store: &ParamStore, krm: &Krm, query: Var, kv: Var, kv_keep: Option<&[bool]>) -> KrmOutput {
    krm.attend(g, store, query, kv, kv_keep)
}

/// Mean over rows followed by a `d -> 1` linear map. Returns a `1 x 1` node.
pub fn alignment_score(g: &mut Graph, store: &ParamStore, head: &Linear, enriched: Var) -> Var {
    let pooled = g.mean_rows(enriched);
    head.forward(g, store, pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Average of the query rows.
    Mean,
    /// Element-wise maximum over query rows, renormalized.
    Max,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Max => "max",
        }
    }
}

/// Distribution over image patches laid out on a `grid.0 x grid.1` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub weights: Vec<f64>,
    pub grid: (usize, usize),
}

impl AttentionMap {
    pub fn new(weights: Vec<f64>, grid: (usize, usize)) -> Result<Self> {
        if grid.0 * grid.1 != weights.len() {
            return Err(Error::Shape(format!(
                "{} weights do not fill a {}x{} grid",
                weights.len(),
                grid.0,
                grid.1
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("attention weights must be finite and nonnegative".into()));
        }
        Ok(Self { weights, grid })
    }

    /// Linear index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

/// Reduces last-layer attention (`N x P`) to a patch map.
pub fn extract_attention_map(attn: &Tensor, grid: (usize, usize), reduce: Reduction) -> Result<AttentionMap> {
    let (n, p) = (attn.rows(), attn.cols());
    if n == 0 {
        return Err(Error::Empty("attention has no query rows".into()));
    }
    let mut w = vec![0.0; p];
    match reduce {
        Reduction::Mean => {
            for r in 0..n {
                w.iter_mut().zip(attn.row(r)).for_each(|(a, b)| *a += b);
            }
            w.iter_mut().for_each(|a| *a /= n as f64);
        }
        Reduction::Max => {
            for r in 0..n {
                w.iter_mut().zip(attn.row(r)).for_each(|(a, b)| *a = a.max(*b));
            }
        }
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("attention map has zero mass".into()));
    }
    w.iter_mut().for_each(|a| *a /= total);
    AttentionMap::new(w, grid)
}

/// Exported map record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub image_id: String,
    pub entity: String,
    pub grid: (usize, usize),
    pub weights: Vec<f64>,
    pub reduction: Reduction,
    /// Which KRM layer the map came from.
    pub layer: String,
}

impl MapRecord {
    pub fn new(image_id: &str, entity: &str, map: &AttentionMap, reduction: Reduction) -> Self {
        Self {
            image_id: image_id.into(),
            entity: entity.into(),
            grid: map.grid,
            weights: map.weights.clone(),
            reduction,
            layer: "last".into(),
        }
    }

    pub fn map(&self) -> Result<AttentionMap> {
        AttentionMap::new(self.weights.clone(), self.grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, layers: usize) -> (ParamStore, Krm, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = KrmConfig { layers, d: 8, heads: 2 };
        let krm = Krm::new(&mut store, "krm", cfg, &mut rng, 0.5).unwrap();
        (store, krm, rng)
    }

    #[test]
    fn zero_query_projection_gives_uniform_attention() {
        let (mut store, krm, mut rng) = setup(0, 1);
        store.get_mut(krm.layers[0].w_q).data_mut().fill(0.0);
        let mut g = Graph::new();
        let q = g.constant(truncated_normal(&mut rng, &[3, 8], 1.0));
        let kv = g.constant(truncated_normal(&mut rng, &[5, 8], 1.0));
        let out = krm.attend(&mut g, &store, q, kv, None);
        assert!(out.attn[0].data().iter().all(|a| (a - 0.2).abs() < 1e-15));
        let wv = g.param(&store, krm.layers[0].w_v);
        let v = g.matmul(kv, wv);
        let mean = g.mean_rows(v);
        for r in 0..3 {
            for (a, b) in g.value(out.attended[0]).row(r).iter().zip(g.value(mean).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_copies_value_row() {
        let (store, krm, mut rng) = setup(1, 2);
        let mut g = Graph::new();
        let q = g.constant(truncated_normal(&mut rng, &[4, 8], 1.0));
        let kv = g.constant(truncated_normal(&mut rng, &[1, 8], 1.0));
        let out = krm.attend(&mut g, &store, q, kv, None);
        let wv = g.param(&store, krm.layers[0].w_v);
        let v = g.matmul(kv, wv);
        for r in 0..4 {
            assert_eq!(g.value(out.attended[0]).row(r), g.value(v).row(0));
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        for seed in 0..5 {
            let (store, krm, mut rng) = setup(seed, 2);
            let mut g = Graph::new();
            let q = g.constant(truncated_normal(&mut rng, &[3, 8], 1.0));
            let kv = g.constant(truncated_normal(&mut rng, &[6, 8], 1.0));
            let out = krm.attend(&mut g, &store, q, kv, None);
            assert_eq!(out.attn.len(), 2);
            for a in &out.attn {
                for r in 0..3 {
                    assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(a.row(r).iter().all(|x| *x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn key_permutation_permutes_attention() {
        let (store, krm, mut rng) = setup(2, 2);
        let qt = truncated_normal(&mut rng, &[3, 8], 1.0);
        let kvt = truncated_normal(&mut rng, &[4, 8], 1.0);
        let perm = [2, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| kvt.row(i).to_vec()).collect();
        let kvp = Tensor::from_rows(&rows);
        let run = |kv: &Tensor| {
            let mut g = Graph::new();
            let q = g.constant(qt.clone());
            let kv = g.constant(kv.clone());
            let o = krm.attend(&mut g, &store, q, kv, None);
            (g.value(o.out).clone(), o.last_attention().clone())
        };
        let (out_a, attn_a) = run(&kvt);
        let (out_b, attn_b) = run(&kvp);
        assert!(out_a.max_abs_diff(&out_b) < 1e-12);
        for r in 0..3 {
            for (j, &src) in perm.iter().enumerate() {
                assert!((attn_b.get(r, j) - attn_a.get(r, src)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let (store, krm, mut rng) = setup(4, 1);
        let mut g = Graph::new();
        let q = g.constant(truncated_normal(&mut rng, &[2, 8], 1.0));
        let kv = g.constant(truncated_normal(&mut rng, &[3, 8], 1.0));
        let out = krm.attend(&mut g, &store, q, kv, Some(&[true, false, true]));
        assert!(out.attn[0].get(0, 1) == 0.0 && out.attn[0].get(1, 1) == 0.0);
    }

    #[test]
    fn alignment_score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let head = Linear::new(&mut store, "head", 8, 1, &mut rng, 0.5);
        store.get_mut(head.bias).data_mut()[0] = 0.25;
        let x = truncated_normal(&mut rng, &[5, 8], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = alignment_score(&mut g, &store, &head, xv);
        let w = store.get(head.weight).data();
        let mut oracle = 0.25;
        for c in 0..8 {
            let mean = (0..5).map(|r| x.get(r, c)).sum::<f64>() / 5.0;
            oracle += mean * w[c];
        }
        assert!((g.scalar(s) - oracle).abs() < 1e-12);

        // row permutation invariance
        let rows: Vec<Vec<f64>> = [4, 2, 0, 1, 3].iter().map(|&i| x.row(i).to_vec()).collect();
        let xp = g.constant(Tensor::from_rows(&rows));
        let sp = alignment_score(&mut g, &store, &head, xp);
        assert!((g.scalar(s) - g.scalar(sp)).abs() < 1e-12);

        // single row: no pooling effect
        let one = g.constant(Tensor::from_rows(&[x.row(0).to_vec()]));
        let s1 = alignment_score(&mut g, &store, &head, one);
        let direct = 0.25 + x.row(0).iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        assert!((g.scalar(s1) - direct).abs() < 1e-12);

        store.get_mut(head.weight).data_mut().fill(0.0);
        store.get_mut(head.bias).data_mut().fill(0.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let s = alignment_score(&mut g, &store, &head, xv);
        assert_eq!(g.scalar(s), 0.0);
    }

    #[test]
    fn map_reduction_examples() {
        let one = Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        let m = extract_attention_map(&one, (2, 2), Reduction::Mean).unwrap();
        assert_eq!(m.weights, vec![0.1, 0.2, 0.3, 0.4]);
        let two = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.2, 0.1]);
        let m = extract_attention_map(&two, (2, 2), Reduction::Mean).unwrap();
        for w in &m.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
        assert!(extract_attention_map(&two, (3, 3), Reduction::Mean).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let raw = truncated_normal(&mut rng, &[3, 6], 1.0);
            let mut g = Graph::new();
            let x = g.constant(raw);
            let sm = g.softmax_rows(x);
            let m = extract_attention_map(g.value(sm), (2, 3), Reduction::Max).unwrap();
            assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
