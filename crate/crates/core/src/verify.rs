//! Built-in oracle suite behind `saln verify`.

use std::time::{Duration, Instant};

use rand::Rng as _;

use crate::diffmath::{grad_check, softmax_rows_of, Tape, Tensor, Var, DEFAULT_STEP};
use crate::encoders::{
    encode_text, lora_attention, EncoderConfig, ProjectionHead, TextEncoderState, VideoEncoderState,
};
use crate::error::Result;
use crate::etf::{build_etf, verify_etf, EtfPrototypes};
use crate::losses::{
    attention_pool_on_tape, crp_loss, crp_on_tape, etf_alignment_loss, etf_on_tape, scl_loss,
    scl_on_tape, PooledPair,
};
use crate::metrics::rank_queries;
use crate::model::ModelState;
use crate::rng;
use crate::similarity::{frame_word_sim, ModelTag, SimilarityMatrix};

/// Shapes covered by the prototype check.
pub const ETF_SHAPES: [(usize, usize); 4] = [(2, 2), (4, 8), (10, 16), (16, 64)];
pub const GRAD_TOL: f64 = 1e-4;

/// Deliberate corruption used to show that a check can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scale the first prototype column by 1.5 before the Gram check.
    ScalePrototype,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

type CheckFn = fn(Option<Fault>) -> Result<(bool, String)>;

const CHECKS: [(&str, CheckFn); 8] = [
    ("etf_gram", |f| check_etf(f)),
    ("grad_scl", |_| check_grad_scl()),
    ("grad_etf", |_| check_grad_etf()),
    ("grad_crp", |_| check_grad_crp()),
    ("loss_identities", |_| check_loss_identities()),
    ("rank_oracle", |_| check_rank_oracle()),
    ("moe_gates", |_| check_moe_gates()),
    ("lora_zero", |_| check_lora_zero()),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check whose name contains `filter`. An error inside a check
/// counts as a failure.
pub fn run_checks(filter: Option<&str>, fault: Option<Fault>) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check(fault) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                elapsed: start.elapsed(),
            }
        })
        .collect()
}

pub fn check_etf(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut passed = true;
    for &(c, d) in &ETF_SHAPES {
        for seed in 0..5 {
            let mut p = build_etf(c, d, seed)?;
            if fault == Some(Fault::ScalePrototype) {
                p.scale_column(0, 1.5);
            }
            let v = verify_etf(&p, 1e-9);
            passed &= v.passed;
            worst = worst.max(v.max_diag_deviation).max(v.max_offdiag_deviation);
        }
    }
    Ok((passed, format!("max gram deviation {worst:.3e}")))
}

fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, rng::normal_vec(r, rows * cols, std))
}

fn grad_over_seeds(mut f: impl FnMut(u64) -> Result<f64>) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        worst = worst.max(f(seed)?);
    }
    Ok((worst < GRAD_TOL, format!("max relative error {worst:.3e} over 20 seeds")))
}

pub fn check_grad_scl() -> Result<(bool, String)> {
    grad_over_seeds(|seed| {
        let mut r = rng::seeded(seed);
        let s = random_matrix(&mut r, 4, 4, 0.3);
        Ok(grad_check(|t, v| scl_on_tape(t, v[0], 0.07), &[s], DEFAULT_STEP)?.max_rel_error)
    })
}

pub fn check_grad_crp() -> Result<(bool, String)> {
    grad_over_seeds(|seed| {
        let mut r = rng::seeded(seed);
        let s = random_matrix(&mut r, 4, 4, 0.5);
        let prev = random_matrix(&mut r, 4, 4, 0.5);
        Ok(grad_check(|t, v| crp_on_tape(t, v[0], &prev, 1.0, true), &[s], DEFAULT_STEP)?.max_rel_error)
    })
}

fn head_on_tape(t: &mut Tape, x: Var, w: &[Var]) -> Var {
    let h = t.matmul(x, w[0]);
    let h = t.add_row(h, w[1]);
    let h = t.tanh(h);
    let o = t.matmul(h, w[2]);
    t.add_row(o, w[3])
}

/// Alignment loss of 4 sequences through both projection heads and
/// prototype-guided pooling. Differentiates the token inputs and all head
/// weights.
pub fn check_grad_etf() -> Result<(bool, String)> {
    let d = 16;
    grad_over_seeds(|seed| {
        let mut r = rng::seeded(seed);
        let protos: EtfPrototypes = build_etf(4, d, seed)?;
        let cats = [2, 0, 3, 1];
        let p = crate::losses::prototype_rows(&protos, &cats)?;
        let text_segs = [0..3, 3..5, 5..9, 9..10];
        let video_segs = [0..2, 2..6, 6..9, 9..12];
        let head_t = ProjectionHead::new("t", d, d, d, &mut r);
        let head_v = ProjectionHead::new("v", d, d, d, &mut r);
        let mut point = vec![random_matrix(&mut r, 10, d, 1.0), random_matrix(&mut r, 12, d, 1.0)];
        for h in [&head_t, &head_v] {
            point.extend([&h.w1, &h.b1, &h.w2, &h.b2].map(|q| q.value.clone()));
            // nonzero biases so their gradients are exercised
            let n = point.len();
            point[n - 3] = random_matrix(&mut r, 1, d, 0.1);
            point[n - 1] = random_matrix(&mut r, 1, d, 0.1);
        }
        let report = grad_check(
            |t, v| {
                let pv = t.constant(p.clone());
                let pw = head_on_tape(t, v[0], &v[2..6]);
                let pf = head_on_tape(t, v[1], &v[6..10]);
                let w = attention_pool_on_tape(t, pw, &text_segs, pv);
                let f = attention_pool_on_tape(t, pf, &video_segs, pv);
                etf_on_tape(t, w, f, pv)
            },
            &point,
            DEFAULT_STEP,
        )?;
        Ok(report.max_rel_error)
    })
}

fn sim(values: Tensor) -> SimilarityMatrix {
    SimilarityMatrix {
        values,
        tag: ModelTag::Current,
    }
}

pub fn check_loss_identities() -> Result<(bool, String)> {
    let mut r = rng::seeded(99);
    let mut crp_worst: f64 = 0.0;
    for _ in 0..100 {
        let b = r.random_range(1..=8);
        let s = sim(random_matrix(&mut r, b, b, 1.0));
        crp_worst = crp_worst.max(crp_loss(&s, &s, 1.0, true)?.abs());
    }
    let mut scl_worst: f64 = 0.0;
    for b in [2usize, 4, 8] {
        let s = sim(Tensor::matrix(b, b, vec![0.37; b * b]));
        scl_worst = scl_worst.max((scl_loss(&s, 0.07)? - (b as f64).ln()).abs());
    }
    let protos = build_etf(5, 8, 3)?;
    let batch: Vec<PooledPair> = (0..5)
        .map(|c| {
            let p = protos.prototype(c)?;
            Ok(PooledPair {
                w_bar: p.clone(),
                f_bar: p,
                category: c,
            })
        })
        .collect::<Result<_>>()?;
    let etf = etf_alignment_loss(&batch, &protos)?.abs();
    let passed = crp_worst <= 1e-12 && scl_worst <= 1e-9 && etf <= 1e-9;
    Ok((
        passed,
        format!("crp(S,S) {crp_worst:.1e}, scl-logB {scl_worst:.1e}, etf at prototypes {etf:.1e}"),
    ))
}

// Position of the truth in a full descending sort, ties by gallery index.
fn brute_rank(scores: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().position(|&j| j == truth).map_or(0, |p| p + 1)
}

pub fn check_rank_oracle() -> Result<(bool, String)> {
    let cfg = EncoderConfig {
        layers: 1,
        width: 8,
        proto_dim: 8,
        head_hidden: 8,
        ..EncoderConfig::default()
    };
    let model = ModelState::new(cfg, 17)?;
    let mut r = rng::seeded(2024);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..200 {
        let g = r.random_range(1..=64);
        let q = r.random_range(1..=6);
        let mut gallery: Vec<Tensor> = Vec::with_capacity(g);
        for _ in 0..g {
            // repeats produce exactly tied scores
            if !gallery.is_empty() && r.random_range(0..4) == 0 {
                let j = r.random_range(0..gallery.len());
                gallery.push(gallery[j].clone());
            } else {
                let m = r.random_range(1..=4);
                gallery.push(random_matrix(&mut r, m, 8, 1.0));
            }
        }
        let queries: Vec<Tensor> = (0..q)
            .map(|_| {
                let n = r.random_range(1..=8);
                random_matrix(&mut r, n, 8, 1.0)
            })
            .collect();
        let truth: Vec<usize> = (0..q).map(|_| r.random_range(0..g)).collect();
        let qr: Vec<&Tensor> = queries.iter().collect();
        let gr: Vec<&Tensor> = gallery.iter().collect();
        let got = rank_queries(&qr, &gr, &truth, &model)?;
        for (i, t) in queries.iter().enumerate() {
            let w = encode_text(t, &model.text)?;
            let scores = gallery
                .iter()
                .map(|v| frame_word_sim(&w, &crate::encoders::encode_video(v, &model.video)?))
                .collect::<Result<Vec<f64>>>()?;
            ties += scores.iter().filter(|&&s| s == scores[truth[i]]).count() - 1;
            if brute_rank(&scores, truth[i]) != got.ranks[i] {
                mismatches += 1;
            }
        }
    }
    Ok((
        mismatches == 0,
        format!("200 instances, {mismatches} mismatches, {ties} tied competitors"),
    ))
}

pub fn check_moe_gates() -> Result<(bool, String)> {
    let cfg = EncoderConfig::default();
    let text = TextEncoderState::new(&cfg, 5)?;
    let adapter = &text.layers[0].moe_q;
    let mut r = rng::seeded(6);
    let mut bad = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = rng::normal_vec(&mut r, cfg.width, 1.0);
        let g = adapter.gates(&x)?;
        let nonzero = g.iter().filter(|&&v| v != 0.0).count();
        worst = worst.max((g.iter().sum::<f64>() - 1.0).abs());
        if nonzero != cfg.active_experts {
            bad += 1;
        }
    }
    Ok((
        bad == 0 && worst < 1e-12,
        format!("1000 inputs, {bad} with wrong support, max |sum-1| {worst:.1e}"),
    ))
}

// Frozen residual attention computed without any adapter nodes.
fn frozen_attention(x: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Tensor {
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let q = x.matmul(w_q);
    let k = x.matmul(w_k);
    let v = x.matmul(w_v);
    let p = softmax_rows_of(&q.matmul(&k.transpose()).map(|s| s * scale), 1.0);
    x.zip_map(&p.matmul(&v), |a, b| a + b)
}

pub fn check_lora_zero() -> Result<(bool, String)> {
    let cfg = EncoderConfig::default();
    let mut r = rng::seeded(8);
    let mut video = VideoEncoderState::new(&cfg, 3)?;
    for layer in &mut video.layers {
        for p in [&mut layer.a_q, &mut layer.a_v] {
            p.value.data_mut().iter_mut().for_each(|x| *x = rng::normal(&mut r));
        }
        for p in [&mut layer.b_q, &mut layer.b_v] {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let x = random_matrix(&mut r, 4, cfg.width, 1.0);
    let layer = &video.layers[0];
    let video_exact =
        lora_attention(&x, layer)? == frozen_attention(&x, &layer.w_q.value, &layer.w_k.value, &layer.w_v.value);

    let mut text = TextEncoderState::new(&cfg, 4)?;
    for layer in &mut text.layers {
        for moe in [&mut layer.moe_q, &mut layer.moe_k, &mut layer.moe_v] {
            for (_, b) in &mut moe.experts {
                b.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    let tokens = random_matrix(&mut r, 5, cfg.width, 1.0);
    let mut h = tokens.clone();
    for l in &text.layers {
        h = frozen_attention(&h, &l.w_q.value, &l.w_k.value, &l.w_v.value);
    }
    let text_exact = encode_text(&tokens, &text)? == h;
    Ok((
        video_exact && text_exact,
        format!("video bit-exact {video_exact}, text bit-exact {text_exact}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_breaks_only_the_gram_check() {
        let out = run_checks(Some("etf_gram"), Some(Fault::ScalePrototype));
        assert_eq!(out.len(), 1);
        assert!(!out[0].passed);
        let out = run_checks(Some("lora"), Some(Fault::ScalePrototype));
        assert!(out[0].passed);
    }

    #[test]
    fn filter_selects_gradient_checks() {
        let names: Vec<_> = run_checks(Some("grad"), None).iter().map(|c| c.name).collect();
        assert_eq!(names, ["grad_scl", "grad_etf", "grad_crp"]);
    }

    #[test]
    fn brute_rank_tie_rule() {
        assert_eq!(brute_rank(&[0.5, 0.5, 0.5], 2), 3);
        assert_eq!(brute_rank(&[0.1, 0.7, 0.2], 0), 3);
    }
}
