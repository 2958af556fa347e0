//! Dense `f64` tensors, a reverse-mode tape, and gradient verification.

mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{
    finite_difference_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck,
};
pub use graph::{sigmoid, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use layers::{LayerNorm, Linear};
pub use params::{truncated_normal, Grads, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Cosine similarity `a·b / (‖a‖‖b‖)`. Zero-norm inputs are rejected.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise softmax of a matrix (max-subtracted).
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let c = m.cols();
    let mut data = m.data().to_vec();
    if c > 0 {
        for row in data.chunks_mut(c) {
            graph::softmax_in_place(row);
        }
    }
    Tensor::matrix(m.rows(), c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = [0.3, -2.0, 5.5];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm(_))
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 2f64.ln(), 0.0, f64::NEG_INFINITY]));
        for j in 0..3 {
            assert!((s.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.get(1, 2), 0.0);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..5,
            vals in prop::collection::vec(-30.0f64..30.0, 40),
            shift in -100.0f64..100.0,
        ) {
            let cols = 8;
            let m = Tensor::matrix(rows, cols, vals[..rows * cols].to_vec());
            let s = softmax_rows(&m);
            for r in 0..rows {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row(r).iter().all(|v| *v >= 0.0));
            }
            let shifted = Tensor::matrix(rows, cols, m.data().iter().map(|v| v + shift).collect());
            prop_assert!(softmax_rows(&shifted).max_abs_diff(&s) < 1e-12);
        }

        #[test]
        fn cosine_sign_scaling(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            alpha in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
            beta in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let base = cosine_similarity(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * beta).collect();
            let scaled = cosine_similarity(&sa, &sb).unwrap();
            prop_assert!((scaled - (alpha * beta).signum() * base).abs() < 1e-12);
            prop_assert!((cosine_similarity(&b, &a).unwrap() - base).abs() < 1e-15);
        }
    }

    /// Every primitive's VJP against central differences on random inputs.
    #[test]
    fn primitive_ops_pass_gradcheck() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamStore::new();
            let a = ps.add("a", truncated_normal(&mut rng, &[3, 4], 0.8));
            let b = ps.add("b", truncated_normal(&mut rng, &[4, 5], 0.8));
            let c = ps.add("c", truncated_normal(&mut rng, &[4, 5], 0.8));
            let bias = ps.add("bias", truncated_normal(&mut rng, &[1, 5], 0.8));
            let gamma = ps.add("gamma", truncated_normal(&mut rng, &[1, 5], 0.8));
            let beta = ps.add("beta", truncated_normal(&mut rng, &[1, 5], 0.8));
            let s = ps.add("s", Tensor::scalar(0.7));
            let table = ps.add("table", truncated_normal(&mut rng, &[6, 5], 0.8));
            let targets = Tensor::matrix(1, 4, vec![1.0, 0.0, 1.0, 0.0]);
            let report = finite_difference_check(&mut ps, GradCheckConfig::default(), |g, p| {
                let a = g.param(p, a);
                let b = g.param(p, b);
                let c = g.param(p, c);
                let x = g.matmul(a, b);
                let bias = g.param(p, bias);
                let x = g.add_row(x, bias);
                let gamma = g.param(p, gamma);
                let beta = g.param(p, beta);
                let x = g.layer_norm(x, gamma, beta);
                let x = g.gelu(x);
                let s = g.param(p, s);
                let inv = g.recip(s);
                let x = g.mul_scalar(x, inv);
                let emb = g.param(p, table);
                let e = g.embedding(emb, &[2, 0, 2]);
                let x = g.mul(x, e);
                let att = g.matmul_bt(x, c);
                let att = g.masked_softmax_rows(att, &[true, false, true, true]);
                let y = g.matmul(att, c);
                let top = g.slice_rows(y, 0, 2);
                let left = g.slice_cols(y, 0, 2);
                let right = g.slice_cols(y, 2, 3);
                let cat = g.concat_cols(&[right, left]);
                let stack = g.concat_rows(&[top, cat]);
                let n = g.l2_normalize_rows(stack);
                let pooled = g.mean_rows(n);
                let e0 = g.element(pooled, 1);
                let ce = g.cross_entropy(stack, &[0, 3, 1, 4, 2]);
                let logits = g.slice_cols(y, 0, 4);
                let logits = g.row(logits, 1);
                let mask = [true, true, false, true];
                let bce = g.bce_with_logits(logits, targets.data(), &mask);
                let sm = g.softmax_rows(y);
                let sm_mean = g.mean(sm);
                let l = g.add(ce, bce);
                let l = g.add(l, e0);
                let l = g.sub(l, sm_mean);
                g.scale(l, 1.3)
            })
            .unwrap();
            assert!(report.pass, "seed {seed}: {:?}", report.worst());
        }
    }

    /// Two-layer network with softmax cross-entropy, dims <= 8.
    #[test]
    fn two_layer_network_gradcheck() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamStore::new();
            let l1 = Linear::new(&mut ps, "l1", 6, 8, &mut rng, 0.5);
            let l2 = Linear::new(&mut ps, "l2", 8, 4, &mut rng, 0.5);
            let x = truncated_normal(&mut rng, &[5, 6], 1.0);
            let report = finite_difference_check(&mut ps, GradCheckConfig::default(), |g, p| {
                let x = g.constant(x.clone());
                let h = l1.forward(g, p, x);
                let h = g.gelu(h);
                let o = l2.forward(g, p, h);
                g.cross_entropy(o, &[0, 1, 2, 3, 1])
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {:?}", report.worst());
        }
    }
}
