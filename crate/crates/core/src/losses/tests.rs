use super::*;
use crate::encoders::Aggregate;
use crate::fusion::KrmConfig;
use crate::numerics::{sigmoid, truncated_normal};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[t] - lse
}

fn itc_value(v: &Tensor, t: &Tensor, tau: f64, symmetric: bool) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(v.clone());
    let t = g.constant(t.clone());
    let tau = g.constant(Tensor::scalar(tau));
    let l = itc_loss(&mut g, v, t, tau, symmetric).unwrap();
    g.scalar(l)
}

#[test]
fn itc_uniform_point_is_ln_b() {
    for b in [2usize, 3, 4, 7] {
        let v = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0]; b]);
        let t = Tensor::from_rows(&vec![vec![1.0, 0.5, -0.2]; b]);
        let l = itc_value(&v, &t, 0.07, false);
        assert!((l - (b as f64).ln()).abs() < 1e-10, "B={b}: {l}");
    }
}

#[test]
fn itc_single_sample_is_zero() {
    let v = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]);
    let t = Tensor::matrix(1, 3, vec![-1.0, 0.0, 1.0]);
    assert_eq!(itc_value(&v, &t, 0.07, false), 0.0);
}

#[test]
fn itc_matches_direct_cross_entropy_and_is_scale_invariant() {
    let mut r = rng(11);
    for _ in 0..5 {
        let v = truncated_normal(&mut r, &[4, 8], 1.0);
        let t = truncated_normal(&mut r, &[4, 8], 1.0);
        let tau = 0.2;
        let mut oracle = 0.0;
        let mut oracle_t = 0.0;
        for i in 0..4 {
            let row: Vec<f64> = (0..4).map(|j| cosine_similarity(v.row(i), t.row(j)).unwrap() / tau).collect();
            oracle -= log_softmax_at(&row, i);
            let col: Vec<f64> = (0..4).map(|j| cosine_similarity(t.row(i), v.row(j)).unwrap() / tau).collect();
            oracle_t -= log_softmax_at(&col, i);
        }
        oracle /= 4.0;
        oracle_t /= 4.0;
        let got = itc_value(&v, &t, tau, false);
        assert!((got - oracle).abs() < 1e-12);
        let sym = itc_value(&v, &t, tau, true);
        assert!((sym - 0.5 * (oracle + oracle_t)).abs() < 1e-12);
        let scaled_v = Tensor::matrix(4, 8, v.data().iter().map(|x| x * 3.7).collect());
        let scaled_t = Tensor::matrix(4, 8, t.data().iter().map(|x| x * 0.2).collect());
        assert!((itc_value(&scaled_v, &scaled_t, tau, false) - got).abs() < 1e-12);
        assert!(got >= 0.0);
    }
}

#[test]
fn itc_rejects_bad_temperature() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let tau = g.constant(Tensor::scalar(0.0));
    assert!(itc_loss(&mut g, v, v, tau, false).is_err());
}

#[test]
fn mining_examples() {
    let two = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.3, 0.9]);
    assert_eq!(mine_hard_negative(0, &two).unwrap(), 1);
    assert_eq!(mine_hard_negative(1, &two).unwrap(), 0);
    let three = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0]);
    assert_eq!(mine_hard_negative(0, &three).unwrap(), 1);
    let tie = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.5, 0.5, 0.5, 0.5]);
    assert_eq!(mine_hard_negative(0, &tie).unwrap(), 1);
    let dup = Tensor::matrix(3, 2, vec![0.5, 0.5, 1.0, 0.0, 0.5, 0.5]);
    assert_eq!(mine_hard_negative(1, &dup).unwrap(), 0);
    assert!(mine_hard_negative(0, &Tensor::matrix(1, 2, vec![1.0, 0.0])).is_err());
}

fn contrast_value(s_pos: f64, s_neg: f64) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(Tensor::scalar(s_pos));
    let n = g.constant(Tensor::scalar(s_neg));
    let l = pairwise_contrast(&mut g, &[p], &[n]);
    g.scalar(l)
}

#[test]
fn two_way_contrast_closed_forms() {
    assert!((contrast_value(0.37, 0.37) - LN2).abs() < 1e-15);
    assert!(contrast_value(20.0, 0.0) < 1e-8);
    let pts: Vec<f64> = [-1.0, 0.0, 1.5].iter().map(|&s| contrast_value(s, 0.2)).collect();
    assert!(pts[0] > pts[1] && pts[1] > pts[2]);
}

struct Fixture {
    store: ParamStore,
    krm: Krm,
    head: Linear,
    g: Graph,
    batch: BatchViews,
}

fn fixture(seed: u64, b: usize, k_flags: Vec<bool>) -> Fixture {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let krm = Krm::new(&mut store, "krm", KrmConfig { layers: 2, d: 4, heads: 2 }, &mut r, 0.5).unwrap();
    let head = Linear::new(&mut store, "head", 4, 1, &mut r, 0.5);
    let mut g = Graph::new();
    let views = (0..b)
        .map(|_| {
            let v = g.constant(truncated_normal(&mut r, &[3, 4], 1.0));
            let v_cls = g.constant(truncated_normal(&mut r, &[1, 4], 1.0));
            let t = g.constant(truncated_normal(&mut r, &[4, 4], 1.0));
            let t_cls = g.slice_rows(t, 0, 1);
            let td = g.constant(truncated_normal(&mut r, &[4, 4], 1.0));
            let td_cls = g.slice_rows(td, 0, 1);
            EncodedViews {
                v,
                v_cls,
                t_e: TextEncoding {
                    t,
                    t_cls,
                    keep: vec![true, true, true, false],
                },
                t_d: Aggregate {
                    t_d: td,
                    t_d_cls: td_cls,
                    keep: vec![true; 4],
                    empty: false,
                },
            }
        })
        .collect();
    Fixture {
        store,
        krm,
        head,
        g,
        batch: BatchViews {
            views,
            labels: vec![],
            label_mask: vec![],
            k_flags,
        },
    }
}

fn score_oracle(f: &Fixture, img: usize, kv: Var, keep: &[bool]) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(f.g.value(f.batch.views[img].v).clone());
    let kv = g.constant(f.g.value(kv).clone());
    let out = f.krm.attend(&mut g, &f.store, v, kv, Some(keep));
    let enriched = g.value(out.out);
    let w = f.store.get(f.head.weight).data();
    let bias = f.store.get(f.head.bias).data()[0];
    let rows = enriched.rows();
    bias + (0..enriched.cols())
        .map(|c| (0..rows).map(|r| enriched.get(r, c)).sum::<f64>() / rows as f64 * w[c])
        .sum::<f64>()
}

#[test]
fn tnc_matches_scalar_recomputation() {
    for (seed, b) in [(0u64, 2usize), (1, 3), (2, 4)] {
        let mut f = fixture(seed, b, vec![true; b]);
        let out = tnc_loss(&mut f.g, &f.store, &f.krm, &f.head, &f.batch).unwrap();
        let got = f.g.scalar(out.loss);
        let t_cls = Tensor::from_rows(&(0..b).map(|i| f.g.value(f.batch.views[i].t_e.t_cls).row(0).to_vec()).collect::<Vec<_>>());
        let v_cls = Tensor::from_rows(&(0..b).map(|i| f.g.value(f.batch.views[i].v_cls).row(0).to_vec()).collect::<Vec<_>>());
        let keep = f.batch.views[0].t_e.keep.clone();
        let mut total = 0.0;
        for i in 0..b {
            let jt = mine_hard_negative(i, &t_cls).unwrap();
            let jv = mine_hard_negative(i, &v_cls).unwrap();
            let pos = score_oracle(&f, i, f.batch.views[i].t_e.t, &keep);
            let neg_t = score_oracle(&f, i, f.batch.views[jt].t_e.t, &keep);
            let neg_v = score_oracle(&f, jv, f.batch.views[i].t_e.t, &keep);
            total += -(pos - (pos.exp() + neg_t.exp()).ln());
            total += -(pos - (pos.exp() + neg_v.exp()).ln());
        }
        let oracle = total / (2 * b) as f64;
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        if b == 2 {
            assert_eq!(out.text_negatives, vec![1, 0]);
            assert_eq!(out.image_negatives, vec![1, 0]);
        }
    }
}

#[test]
fn pta_matches_softmax_oracle() {
    let mut f = fixture(7, 3, vec![true, true, true]);
    let out = pta_loss(&mut f.g, &f.store, &f.krm, &f.head, &f.batch);
    let keep = vec![true; 4];
    let mut oracle = 0.0;
    for i in 0..3 {
        let row: Vec<f64> = (0..3).map(|j| score_oracle(&f, i, f.batch.views[j].t_d.t_d, &keep)).collect();
        oracle -= log_softmax_at(&row, i);
    }
    oracle /= 3.0;
    assert!((f.g.scalar(out.loss) - oracle).abs() < 1e-10);
    assert_eq!(out.skipped, 0);
}

#[test]
fn pta_excludes_samples_without_descriptions() {
    let mut f = fixture(8, 3, vec![false, false, false]);
    let out = pta_loss(&mut f.g, &f.store, &f.krm, &f.head, &f.batch);
    assert_eq!(f.g.scalar(out.loss), 0.0);
    assert_eq!(out.skipped, 3);

    let mut f = fixture(9, 3, vec![true, false, true]);
    let out = pta_loss(&mut f.g, &f.store, &f.krm, &f.head, &f.batch);
    assert_eq!(out.included, vec![0, 2]);
    let keep = vec![true; 4];
    let mut oracle = 0.0;
    for (a, &i) in [0usize, 2].iter().enumerate() {
        let row: Vec<f64> = [0usize, 2].iter().map(|&j| score_oracle(&f, i, f.batch.views[j].t_d.t_d, &keep)).collect();
        oracle -= log_softmax_at(&row, a);
    }
    assert!((f.g.scalar(out.loss) - oracle / 2.0).abs() < 1e-10);
}

#[test]
fn diagonal_contrast_uniform_is_ln_b() {
    for b in [2usize, 4, 5] {
        let mut g = Graph::new();
        let s = g.constant(Tensor::scalar(0.8));
        let scores = vec![vec![s; b]; b];
        let l = diagonal_contrast(&mut g, &scores);
        assert!((g.scalar(l) - (b as f64).ln()).abs() < 1e-12);
    }
}

fn bce_value(logits: &[f64], labels: &[f64], mask: &[bool]) -> (f64, bool) {
    let mut g = Graph::new();
    let z = g.constant(Tensor::row_vector(logits.to_vec()));
    let (l, skipped) = bce_loss(&mut g, z, labels, mask).unwrap();
    (g.scalar(l), skipped)
}

#[test]
fn bce_closed_forms_and_mask() {
    assert!((bce_value(&[0.0], &[1.0], &[true]).0 - LN2).abs() < 1e-15);
    assert!((bce_value(&[0.0], &[0.0], &[true]).0 - LN2).abs() < 1e-15);
    assert!(bce_value(&[20.0], &[1.0], &[true]).0 < 1e-8);
    assert_eq!(bce_value(&[1.0, 2.0], &[1.0, 0.0], &[false, false]), (0.0, true));

    let mut r = rng(5);
    let z = truncated_normal(&mut r, &[1, 12], 2.0);
    let labels: Vec<f64> = (0..12).map(|i| f64::from(i % 3 == 0)).collect();
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..12 {
        if mask[i] {
            let p = sigmoid(z.data()[i]);
            sum -= labels[i] * p.ln() + (1.0 - labels[i]) * (1.0 - p).ln();
            n += 1.0;
        }
    }
    let (got, skipped) = bce_value(z.data(), &labels, &mask);
    assert!(!skipped);
    assert!((got - sum / n).abs() < 1e-12);
}

#[test]
fn total_loss_arithmetic() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::scalar(1.0));
    let parts = LossParts { bce: one, itc: one, tnc: one, pta: one };
    let (_, b) = total_loss(&mut g, parts, 0.5).unwrap();
    assert_eq!(b.total, 3.5);
    let big = g.constant(Tensor::scalar(123.0));
    let (_, b0) = total_loss(&mut g, LossParts { pta: big, ..parts }, 0.0).unwrap();
    assert_eq!(b0.total, 3.0);
    assert!(total_loss(&mut g, parts, -1.0).is_err());
    let f = LossBreakdown::from_parts(0.1, 0.2, 0.3, 0.4, 2.0);
    assert!((f.total - (0.1 + 0.2 + 0.3 + 0.8)).abs() < 1e-12);
}
