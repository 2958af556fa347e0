//! Finite-difference checks over every module with parameters and every
//! loss, on small random instances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::{
    weighted_sum, Aggregate, Block, ImageEncoder, ImageEncoderConfig, Mlp, TextEncoder, TextEncoderConfig,
    TextEncoding, PAD,
};
use crate::error::Result;
use crate::fusion::{alignment_score, Krm, KrmConfig};
use crate::io::{generate_synthetic, SyntheticSpec};
use crate::knowledge::{DescriptionStore, Lexicon};
use crate::losses::{bce_loss, itc_loss, pta_loss, tnc_loss, BatchViews, EncodedViews};
use crate::model::{Model, ModelConfig};
use crate::numerics::{
    finite_difference_check, truncated_normal, GradCheckConfig, GradCheckReport, Graph, Linear, ParamId, ParamStore,
    Tensor, Var,
};
use crate::training::{batch_loss, derive_knowledge, prepare_dataset, TrainConfig};

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub check: GradCheckConfig,
    /// Standard deviation of the random parameters.
    pub init_std: f64,
    pub batch: usize,
    pub d: usize,
    pub heads: usize,
    pub t_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            check: GradCheckConfig::default(),
            init_std: 0.5,
            batch: 4,
            d: 8,
            heads: 2,
            t_len: 6,
            image_size: 8,
            patch_size: 4,
        }
    }
}

/// Absolute bounds for gradients that are identically zero.
pub const ZERO_ANALYTIC_TOL: f64 = 1e-10;
pub const ZERO_NUMERIC_TOL: f64 = 1e-8;

/// A parameter whose exact gradient is zero: the objective only sees it
/// through a shift shared by every contrasted score.
#[derive(Debug, Clone, Serialize)]
pub struct ZeroCheck {
    pub name: String,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub seed: u64,
    /// Relative-error check over every other parameter.
    pub report: GradCheckReport,
    pub structural_zeros: Vec<ZeroCheck>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub max_rel_error: f64,
    pub pass: bool,
    pub elapsed_ms: u128,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.pass)
    }

    /// One line per case.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let worst = c.report.worst().map_or("-", |w| w.name.as_str());
            s.push_str(&format!(
                "{} {:<22} seed {} max_rel_error {:.3e} (worst {}) zero-gradient params {}\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.case,
                c.seed,
                c.report.max_rel_error,
                worst,
                c.structural_zeros.len()
            ));
        }
        s
    }
}

/// Names of the checked cases, in run order.
pub const CASES: [&str; 13] = [
    "image_encoder",
    "text_encoder",
    "transformer_block",
    "description_aggregate",
    "krm",
    "alignment_head",
    "inference_head",
    "itc_loss",
    "itc_loss_symmetric",
    "tnc_loss",
    "pta_loss",
    "bce_loss",
    "total_loss",
];

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for &seed in &cfg.seeds {
        for case in CASES {
            cases.push(run_case(case, seed, cfg)?);
        }
    }
    let max_rel_error = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let pass = cases.iter().all(|c| c.pass);
    Ok(SuiteReport {
        cases,
        max_rel_error,
        pass,
        elapsed_ms: start.elapsed().as_millis(),
    })
}

/// Parameters of `case` with an identically zero gradient.
pub fn structural_zero_params(case: &str) -> &'static [&'static str] {
    match case {
        "tnc_loss" | "pta_loss" => &["head.bias", "krm.layers.1.ln.beta"],
        "total_loss" => &["tnc_head.bias", "pta_head.bias"],
        _ => &[],
    }
}

pub fn run_case(case: &str, seed: u64, cfg: &SuiteConfig) -> Result<CaseResult> {
    let zeros = structural_zero_params(case);
    let (report, structural_zeros) = check_case(case, seed, cfg, zeros)?;
    let pass = report.pass && structural_zeros.iter().all(|z| z.pass);
    Ok(CaseResult {
        case: case.to_string(),
        seed,
        report,
        structural_zeros,
        pass,
    })
}

type Checked = (GradCheckReport, Vec<ZeroCheck>);

/// Runs the relative-error check, then moves the parameters named in
/// `zeros` out of it and bounds their gradients absolutely instead.
fn split_check<F>(ps: &mut ParamStore, cfg: GradCheckConfig, zeros: &[&str], f: F) -> Result<Checked>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut report = finite_difference_check(ps, cfg, &f)?;
    report.params.retain(|c| !zeros.contains(&c.name.as_str()));
    report.max_rel_error = report.params.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    report.pass = report.max_rel_error < report.tolerance;
    if zeros.is_empty() {
        return Ok((report, Vec::new()));
    }

    let eval = |ps: &ParamStore| {
        let mut g = Graph::new();
        let out = f(&mut g, ps);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let out = f(&mut g, ps);
    let grads = g.backward(out).into_param_grads();
    let mut checks = Vec::with_capacity(zeros.len());
    for name in zeros {
        let id = ps
            .find(name)
            .ok_or_else(|| crate::error::Error::InvalidArgument(format!("no parameter `{name}`")))?;
        let analytic = grads.get(id).map_or(0.0, |g| g.iter().fold(0.0, |m, x| f64::max(m, x.abs())));
        let mut numeric: f64 = 0.0;
        for i in 0..ps.get(id).len() {
            let orig = ps.get(id).data()[i];
            ps.get_mut(id).data_mut()[i] = orig + cfg.eps;
            let plus = eval(ps);
            ps.get_mut(id).data_mut()[i] = orig - cfg.eps;
            let minus = eval(ps);
            ps.get_mut(id).data_mut()[i] = orig;
            numeric = numeric.max(((plus - minus) / (2.0 * cfg.eps)).abs());
        }
        checks.push(ZeroCheck {
            name: name.to_string(),
            max_abs_analytic: analytic,
            max_abs_numeric: numeric,
            pass: analytic <= ZERO_ANALYTIC_TOL && numeric <= ZERO_NUMERIC_TOL,
        });
    }
    Ok((report, checks))
}

fn check_case(case: &str, seed: u64, cfg: &SuiteConfig, zeros: &[&str]) -> Result<Checked> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let std = cfg.init_std;
    let (b, d, t) = (cfg.batch, cfg.d, cfg.t_len);
    let image_cfg = ImageEncoderConfig {
        image_size: cfg.image_size,
        patch_size: cfg.patch_size,
        depth: 1,
        d,
        heads: cfg.heads,
        mlp_ratio: 2,
    };
    let p = image_cfg.num_patches();
    let krm_cfg = KrmConfig {
        layers: 2,
        d,
        heads: cfg.heads,
    };
    let check = cfg.check;

    match case {
        "image_encoder" => {
            let enc = ImageEncoder::new(&mut ps, image_cfg, &mut rng, std)?;
            let img = uniform(&mut rng, &[cfg.image_size, cfg.image_size]);
            let r = truncated_normal(&mut rng, &[p, d], 1.0);
            let rc = truncated_normal(&mut rng, &[1, d], 1.0);
            split_check(&mut ps, check, zeros, |g, s| {
                let e = enc.forward(g, s, &img).expect("valid image");
                let a = readout(g, e.v, &r);
                let c = readout(g, e.v_cls, &rc);
                g.add(a, c)
            })
        }
        "text_encoder" => {
            let tc = TextEncoderConfig {
                vocab_size: 7,
                max_len: t,
                depth: 1,
                d,
                heads: cfg.heads,
                mlp_ratio: 2,
            };
            let enc = TextEncoder::new(&mut ps, tc, &mut rng, std)?;
            let ids = token_ids(&mut rng, t, 7);
            let r = truncated_normal(&mut rng, &[t, d], 1.0);
            split_check(&mut ps, check, zeros, |g, s| {
                let e = enc.forward(g, s, &ids).expect("valid ids");
                readout(g, e.t, &r)
            })
        }
        "transformer_block" => {
            let block = Block::new(&mut ps, "block", d, cfg.heads, 2 * d, &mut rng, std);
            let x = truncated_normal(&mut rng, &[t, d], 1.0);
            let keep: Vec<bool> = (0..t).map(|i| i < t - 2).collect();
            let r = truncated_normal(&mut rng, &[t, d], 1.0);
            split_check(&mut ps, check, zeros, |g, s| {
                let x = g.constant(x.clone());
                let y = block.forward(g, s, x, Some(&keep));
                readout(g, y, &r)
            })
        }
        "description_aggregate" => {
            let k = 3;
            let w = ps.add("w", Tensor::row_vector(vec![1.0, 0.0, -1.0]));
            let docs: Vec<ParamId> = (0..k)
                .map(|i| ps.add(format!("doc{i}"), truncated_normal(&mut rng, &[t, d], std)))
                .collect();
            let keeps: Vec<Vec<bool>> = (0..k).map(|i| (0..t).map(|j| j < 2 + i).collect()).collect();
            let r = truncated_normal(&mut rng, &[t, d], 1.0);
            let rc = truncated_normal(&mut rng, &[1, d], 1.0);
            split_check(&mut ps, check, zeros, |g, s| {
                let encs: Vec<TextEncoding> = docs.iter().zip(&keeps).map(|(&id, keep)| encoding(g, s, id, keep)).collect();
                let refs: Vec<&TextEncoding> = encs.iter().collect();
                let wv = g.param(s, w);
                let agg = weighted_sum(g, &refs, Some(wv), t, d).expect("matching shapes");
                let a = readout(g, agg.t_d, &r);
                let c = readout(g, agg.t_d_cls, &rc);
                g.add(a, c)
            })
        }
        "krm" => {
            let krm = Krm::new(&mut ps, "krm", krm_cfg, &mut rng, std)?;
            let q = truncated_normal(&mut rng, &[p, d], 1.0);
            let kv = truncated_normal(&mut rng, &[t, d], 1.0);
            let keep: Vec<bool> = (0..t).map(|i| i < t - 1).collect();
            let r = truncated_normal(&mut rng, &[p, d], 1.0);
            split_check(&mut ps, check, zeros, |g, s| {
                let q = g.constant(q.clone());
                let kv = g.constant(kv.clone());
                let out = krm.attend(g, s, q, kv, Some(&keep));
                readout(g, out.out, &r)
            })
        }
        "alignment_head" => {
            let head = Linear::new(&mut ps, "head", d, 1, &mut rng, std);
            let x = ps.add("enriched", truncated_normal(&mut rng, &[p, d], 1.0));
            split_check(&mut ps, check, zeros, |g, s| {
                let x = g.param(s, x);
                let score = alignment_score(g, s, &head, x);
                g.mul(score, score)
            })
        }
        "inference_head" => {
            let krm = Krm::new(&mut ps, "krm", krm_cfg, &mut rng, std)?;
            let mlp = Mlp::new(&mut ps, "cls_head", d, d, 1, &mut rng, std);
            let q = ps.add("query", truncated_normal(&mut rng, &[3, d], 1.0));
            let v = ps.add("patches", truncated_normal(&mut rng, &[p, d], 1.0));
            split_check(&mut ps, check, zeros, |g, s| {
                let q = g.param(s, q);
                let v = g.param(s, v);
                let out = krm.attend(g, s, q, v, None);
                let pooled = g.mean_rows(out.out);
                let logit = mlp.forward(g, s, pooled);
                g.bce_with_logits(logit, &[1.0], &[true])
            })
        }
        "itc_loss" | "itc_loss_symmetric" => {
            let symmetric = case == "itc_loss_symmetric";
            let v = ps.add("v_cls", truncated_normal(&mut rng, &[b, d], 1.0));
            let tt = ps.add("t_cls", truncated_normal(&mut rng, &[b, d], 1.0));
            let tau = ps.add("tau", Tensor::scalar(0.2));
            split_check(&mut ps, check, zeros, |g, s| {
                let v = g.param(s, v);
                let tt = g.param(s, tt);
                let tau = g.param(s, tau);
                itc_loss(g, v, tt, tau, symmetric).expect("nonzero rows")
            })
        }
        "tnc_loss" | "pta_loss" => {
            let krm = Krm::new(&mut ps, "krm", krm_cfg, &mut rng, std)?;
            let head = Linear::new(&mut ps, "head", d, 1, &mut rng, std);
            let views = ViewParams::new(&mut ps, &mut rng, b, p, t, d);
            let is_tnc = case == "tnc_loss";
            split_check(&mut ps, check, zeros, |g, s| {
                let batch = views.batch(g, s);
                if is_tnc {
                    tnc_loss(g, s, &krm, &head, &batch).expect("valid batch").loss
                } else {
                    pta_loss(g, s, &krm, &head, &batch).loss
                }
            })
        }
        "bce_loss" => {
            let m = 3;
            let z = ps.add("logits", truncated_normal(&mut rng, &[b, m], 1.5));
            let labels: Vec<f64> = (0..b * m).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let mut mask: Vec<bool> = (0..b * m).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            split_check(&mut ps, check, zeros, |g, s| {
                let z = g.param(s, z);
                bce_loss(g, z, &labels, &mask).expect("shapes match").0
            })
        }
        "total_loss" => total_case(seed, cfg, zeros),
        other => Err(crate::error::Error::InvalidArgument(format!("unknown gradient case `{other}`"))),
    }
}

/// Per-sample tensors standing in for encoder outputs.
struct ViewParams {
    v: Vec<ParamId>,
    v_cls: Vec<ParamId>,
    t: Vec<ParamId>,
    t_cls: Vec<ParamId>,
    t_d: Vec<ParamId>,
    t_d_cls: Vec<ParamId>,
    keeps: Vec<Vec<bool>>,
    k_flags: Vec<bool>,
}

impl ViewParams {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, b: usize, p: usize, t: usize, d: usize) -> Self {
        let mut add = |name: String, rows: usize| ps.add(name, truncated_normal(rng, &[rows, d], 1.0));
        let mut out = Self {
            v: Vec::new(),
            v_cls: Vec::new(),
            t: Vec::new(),
            t_cls: Vec::new(),
            t_d: Vec::new(),
            t_d_cls: Vec::new(),
            keeps: Vec::new(),
            k_flags: Vec::new(),
        };
        for i in 0..b {
            out.v.push(add(format!("v{i}"), p));
            out.v_cls.push(add(format!("v_cls{i}"), 1));
            out.t.push(add(format!("t{i}"), t));
            out.t_cls.push(add(format!("t_cls{i}"), 1));
            out.t_d.push(add(format!("t_d{i}"), t));
            out.t_d_cls.push(add(format!("t_d_cls{i}"), 1));
            out.keeps.push((0..t).map(|j| j < 2 + i % (t - 1)).collect());
            // the last sample has no descriptions
            out.k_flags.push(i + 1 < b);
        }
        out
    }

    fn batch(&self, g: &mut Graph, s: &ParamStore) -> BatchViews {
        let views = (0..self.v.len())
            .map(|i| EncodedViews {
                v: g.param(s, self.v[i]),
                v_cls: g.param(s, self.v_cls[i]),
                t_e: TextEncoding {
                    t: g.param(s, self.t[i]),
                    t_cls: g.param(s, self.t_cls[i]),
                    keep: self.keeps[i].clone(),
                },
                t_d: Aggregate {
                    t_d: g.param(s, self.t_d[i]),
                    t_d_cls: g.param(s, self.t_d_cls[i]),
                    keep: self.keeps[i].clone(),
                    empty: !self.k_flags[i],
                },
            })
            .collect();
        BatchViews {
            views,
            labels: Vec::new(),
            label_mask: Vec::new(),
            k_flags: self.k_flags.clone(),
        }
    }
}

/// Whole-model objective on a tiny synthetic batch, through every encoder,
/// the KRM, all heads and the temperature.
fn total_case(seed: u64, cfg: &SuiteConfig, zeros: &[&str]) -> Result<Checked> {
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        seed,
        image_size: cfg.image_size,
        shape_extent: 3,
        entities: defaults.entities[..3].to_vec(),
        samples: cfg.batch,
        negation_rate: 0.5,
        min_present: 1,
        max_present: 2,
    };
    let corpus = generate_synthetic(&spec)?;
    let store = DescriptionStore::new(corpus.descriptions.clone());
    let lexicon = Lexicon::new(corpus.lexicon.clone());
    let k = derive_knowledge(&corpus.samples, &lexicon, &store, 8)?;
    let data = prepare_dataset(
        &corpus.samples,
        &k.reports,
        &store,
        &k.entities,
        &k.vocab,
        cfg.t_len,
        cfg.image_size,
    )?;
    let mut mc = ModelConfig {
        init_std: cfg.init_std,
        tau_init: 0.2,
        ..ModelConfig::default()
    };
    mc.image = ImageEncoderConfig {
        image_size: cfg.image_size,
        patch_size: cfg.patch_size,
        depth: 1,
        d: cfg.d,
        heads: cfg.heads,
        mlp_ratio: 2,
    };
    mc.text.max_len = cfg.t_len;
    mc.text.depth = 1;
    mc.text.d = cfg.d;
    mc.text.heads = cfg.heads;
    mc.krm = KrmConfig {
        layers: 2,
        d: cfg.d,
        heads: cfg.heads,
    };
    let mut model = Model::new(mc, k.vocab, k.entities, seed)?;
    let tc = TrainConfig {
        batch_size: cfg.batch,
        alpha: 0.7,
        ..TrainConfig::default()
    };
    let indices: Vec<usize> = (0..cfg.batch).collect();
    let mut params = std::mem::take(&mut model.params);
    let shell = model;
    split_check(&mut params, cfg.check, zeros, |g, s| {
        let mut m = shell.clone();
        m.params = s.clone();
        batch_loss(g, &m, &data, &indices, &tc).expect("valid batch").total
    })
}

fn readout(g: &mut Graph, x: Var, r: &Tensor) -> Var {
    let r = g.constant(r.clone());
    let prod = g.mul(x, r);
    g.sum(prod)
}

fn encoding(g: &mut Graph, s: &ParamStore, id: ParamId, keep: &[bool]) -> TextEncoding {
    let t = g.param(s, id);
    let t_cls = g.row(t, 0);
    TextEncoding {
        t,
        t_cls,
        keep: keep.to_vec(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn token_ids(rng: &mut ChaCha8Rng, t: usize, vocab: usize) -> Vec<usize> {
    let content = t - 2;
    let mut ids = vec![crate::encoders::CLS];
    ids.extend((1..content).map(|_| rng.random_range(4..vocab)));
    ids.resize(t, PAD);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_for_seed_zero() {
        let cfg = SuiteConfig {
            seeds: vec![0],
            ..SuiteConfig::default()
        };
        let report = run_suite(&cfg).unwrap();
        assert!(report.pass, "{}", report.summary());
        let zeros: usize = report.cases.iter().map(|c| c.structural_zeros.len()).sum();
        assert_eq!(zeros, 6);
        assert_eq!(report.cases.len(), CASES.len());
    }

    #[test]
    fn unknown_case_is_an_error() {
        assert!(run_case("nope", 0, &SuiteConfig::default()).is_err());
    }
}
