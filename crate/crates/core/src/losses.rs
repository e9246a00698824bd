//! Training objectives: symmetric contrastive loss, prototype alignment with
//! attention pooling, pseudo-feature replay, relation preservation across
//! model snapshots, and their weighted sum.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::diffmath::{kl_divergence, softmax, softmax_rows_of, Tape, Tensor, Var};
use crate::encoders::Sequences;
use crate::error::{Error, Result};
use crate::etf::EtfPrototypes;
use crate::model::ModelState;
use crate::rng;
use crate::similarity::{sim_on_tape, SimilarityMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub tau2: f64,
    pub sigma: f64,
    pub pseudo_per_category: usize,
    /// Average the column-wise relation term with the row-wise one.
    pub crp_symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 10.0,
            tau: 0.07,
            tau2: 1.0,
            sigma: 0.1,
            pseudo_per_category: 2,
            crp_symmetric: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for t in [self.tau, self.tau2] {
            if !(t > 0.0) {
                return Err(Error::NonPositiveTemperature(t));
            }
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Modality-level vectors of one text-video pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledPair {
    pub w_bar: Vec<f64>,
    pub f_bar: Vec<f64>,
    pub category: usize,
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(t))
    }
}

/// Pools each segment of `projected` with softmax weights from its inner
/// products with the matching row of `prototypes`. Returns `B x d`.
pub fn attention_pool_on_tape(
    tape: &mut Tape,
    projected: Var,
    segments: &[Range<usize>],
    prototypes: Var,
) -> Var {
    let mut pooled = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let xs = tape.slice_rows(projected, seg.start, seg.len());
        let p = tape.slice_rows(prototypes, i, 1);
        let xt = tape.transpose(xs);
        let scores = tape.matmul(p, xt);
        let alpha = tape.softmax_rows(scores, 1.0);
        pooled.push(tape.matmul(alpha, xs));
    }
    tape.concat_rows(&pooled)
}

/// Prototype-guided attention pooling of one sequence of projected vectors.
pub fn attention_pool(projected: &Tensor, prototype: &[f64]) -> Result<Vec<f64>> {
    if projected.rows() == 0 || projected.is_empty() {
        return Err(Error::EmptySequence);
    }
    if projected.cols() != prototype.len() {
        return Err(Error::ShapeMismatch(format!(
            "projected width {} vs prototype {}",
            projected.cols(),
            prototype.len()
        )));
    }
    let scores: Vec<f64> = (0..projected.rows())
        .map(|r| crate::diffmath::dot(projected.row(r), prototype))
        .collect();
    let alpha = softmax(&scores, 1.0)?;
    let mut out = vec![0.0; prototype.len()];
    for (r, a) in alpha.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(projected.row(r)) {
            *o += a * x;
        }
    }
    Ok(out)
}

/// Stacked prototype rows, one per category label.
pub fn prototype_rows(prototypes: &EtfPrototypes, categories: &[usize]) -> Result<Tensor> {
    let rows = categories
        .iter()
        .map(|&c| prototypes.prototype(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::matrix(
        categories.len(),
        prototypes.dim(),
        rows.into_iter().flatten().collect(),
    ))
}

/// `mean_i (1 - <w_i/|w_i|, p_i>) + (1 - <f_i/|f_i|, p_i>)` over the rows
/// of the pooled text and video matrices and the matching prototype rows.
pub fn etf_on_tape(tape: &mut Tape, w: Var, f: Var, prototypes: Var) -> Result<Var> {
    let n = tape.value(w).rows() as f64;
    let wn = tape.normalize_rows(w)?;
    let fn_ = tape.normalize_rows(f)?;
    let both = tape.add(wn, fn_);
    let agree = tape.mul(both, prototypes);
    let total = tape.sum(agree);
    let scaled = tape.scale(total, -1.0 / n);
    Ok(tape.add_scalar(scaled, 2.0))
}

pub fn etf_alignment_loss(batch: &[PooledPair], prototypes: &EtfPrototypes) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut total = 0.0;
    for pair in batch {
        let p = prototypes.prototype(pair.category)?;
        let w = crate::diffmath::l2_normalize(&pair.w_bar)?;
        let f = crate::diffmath::l2_normalize(&pair.f_bar)?;
        total += (1.0 - crate::diffmath::dot(&w, &p)) + (1.0 - crate::diffmath::dot(&f, &p));
    }
    Ok(total / batch.len() as f64)
}

/// Noisy copies of the stored category means, `count` pairs per category,
/// in ascending category order. Noise is not renormalized here.
pub fn synth_pseudo_features(
    text_means: &BTreeMap<usize, Vec<f64>>,
    video_means: &BTreeMap<usize, Vec<f64>>,
    sigma: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<PooledPair>> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(text_means.len() * count);
    for (&c, mt) in text_means {
        let mv = video_means.get(&c).ok_or(Error::UnknownCategory(c))?;
        for _ in 0..count {
            let w_bar = mt.iter().map(|x| x + sigma * rng::normal(&mut r)).collect();
            let f_bar = mv.iter().map(|x| x + sigma * rng::normal(&mut r)).collect();
            out.push(PooledPair {
                w_bar,
                f_bar,
                category: c,
            });
        }
    }
    Ok(out)
}

/// InfoNCE over rows (text to video) and columns (video to text), averaged.
pub fn scl_on_tape(tape: &mut Tape, s: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let b = tape.value(s).rows() as f64;
    let t2v = tape.log_softmax_rows(s, tau);
    let t2v = tape.diag(t2v);
    let t2v = tape.sum(t2v);
    let st = tape.transpose(s);
    let v2t = tape.log_softmax_rows(st, tau);
    let v2t = tape.diag(v2t);
    let v2t = tape.sum(v2t);
    let both = tape.add(t2v, v2t);
    Ok(tape.scale(both, -0.5 / b))
}

fn check_square(s: &Tensor) -> Result<()> {
    if s.shape().len() != 2 || s.rows() != s.cols() {
        return Err(Error::ShapeMismatch(format!("expected a square matrix, got {:?}", s.shape())));
    }
    Ok(())
}

pub fn scl_loss(s: &SimilarityMatrix, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    check_square(&s.values)?;
    let b = s.values.rows();
    // -log softmax(v / tau)[i], via log-sum-exp
    let nll = |v: &[f64], i: usize| {
        let max = v.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let lse = v.iter().map(|x| ((x - max) / tau).exp()).sum::<f64>().ln();
        lse - (v[i] - max) / tau
    };
    let mut t2v = 0.0;
    let mut v2t = 0.0;
    for i in 0..b {
        t2v += nll(s.values.row(i), i);
        let col: Vec<f64> = (0..b).map(|j| s.values.at(j, i)).collect();
        v2t += nll(&col, i);
    }
    Ok(0.5 * (t2v + v2t) / b as f64)
}

// sum_i sum_j p_ij ln p_ij with 0 ln 0 = 0
fn neg_entropy(p: &Tensor) -> f64 {
    p.data().iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum()
}

fn row_kl_on_tape(tape: &mut Tape, s: Var, prev: &Tensor, tau2: f64) -> Var {
    let b = prev.rows() as f64;
    let p = softmax_rows_of(prev, tau2);
    let h = neg_entropy(&p);
    let p = tape.constant(p);
    let log_q = tape.log_softmax_rows(s, tau2);
    let cross = tape.mul(p, log_q);
    let cross = tape.sum(cross);
    let kl = tape.scale(cross, -1.0 / b);
    tape.add_scalar(kl, h / b)
}

/// Batch-averaged `KL(softmax(S_prev / tau2) || softmax(S / tau2))` over
/// rows, averaged with the same term over columns when `symmetric`.
/// `prev` enters as a constant.
pub fn crp_on_tape(tape: &mut Tape, s: Var, prev: &Tensor, tau2: f64, symmetric: bool) -> Result<Var> {
    check_temperature(tau2)?;
    check_square(prev)?;
    if tape.value(s).shape() != prev.shape() {
        return Err(Error::ShapeMismatch(format!(
            "similarity {:?} vs previous {:?}",
            tape.value(s).shape(),
            prev.shape()
        )));
    }
    let rows = row_kl_on_tape(tape, s, prev, tau2);
    if !symmetric {
        return Ok(rows);
    }
    let st = tape.transpose(s);
    let cols = row_kl_on_tape(tape, st, &prev.transpose(), tau2);
    let both = tape.add(rows, cols);
    Ok(tape.scale(both, 0.5))
}

pub fn crp_loss(
    curr: &SimilarityMatrix,
    prev: &SimilarityMatrix,
    tau2: f64,
    symmetric: bool,
) -> Result<f64> {
    check_temperature(tau2)?;
    check_square(&curr.values)?;
    if curr.values.shape() != prev.values.shape() {
        return Err(Error::ShapeMismatch(format!(
            "similarity {:?} vs previous {:?}",
            curr.values.shape(),
            prev.values.shape()
        )));
    }
    let b = curr.values.rows();
    let directional = |a: &Tensor, q: &Tensor| -> Result<f64> {
        let mut total = 0.0;
        for i in 0..b {
            let p = softmax(a.row(i), tau2)?;
            let q = softmax(q.row(i), tau2)?;
            total += kl_divergence(&p, &q)?;
        }
        Ok(total / b as f64)
    };
    let rows = directional(&prev.values, &curr.values)?;
    if !symmetric {
        return Ok(rows);
    }
    let cols = directional(&prev.values.transpose(), &curr.values.transpose())?;
    Ok(0.5 * (rows + cols))
}

/// One mini-batch of raw pairs with category labels.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub texts: Vec<&'a Tensor>,
    pub videos: Vec<&'a Tensor>,
    pub categories: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub scl: f64,
    pub etf: f64,
    pub crp: f64,
    pub total: f64,
}

pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Pooled projected text and video vectors for a batch, `B x d` each.
pub fn pooled_on_tape(
    tape: &mut Tape,
    state: &ModelState,
    words: Var,
    frames: Var,
    text_segs: &[Range<usize>],
    video_segs: &[Range<usize>],
    protos: Var,
) -> Result<(Var, Var)> {
    let pw = state.heads.text.forward(tape, words)?;
    let pf = state.heads.video.forward(tape, frames)?;
    let w = attention_pool_on_tape(tape, pw, text_segs, protos);
    let f = attention_pool_on_tape(tape, pf, video_segs, protos);
    Ok((w, f))
}

/// Composite objective for task `task` (1-based). From the second task on,
/// a snapshot of the previous model is required; the relation term is
/// added and the alignment term is extended with pseudo features of every
/// category whose means `state` holds.
pub fn total_loss(
    tape: &mut Tape,
    batch: &Batch,
    state: &ModelState,
    prev: Option<&ModelState>,
    prototypes: &EtfPrototypes,
    cfg: &LossConfig,
    task: usize,
    pseudo_seed: u64,
) -> Result<LossOutput> {
    cfg.validate()?;
    if batch.texts.len() != batch.videos.len() {
        return Err(Error::BatchSizeMismatch(batch.texts.len(), batch.videos.len()));
    }
    if batch.categories.len() != batch.texts.len() {
        return Err(Error::BatchSizeMismatch(batch.texts.len(), batch.categories.len()));
    }
    let prev = match (task > 1, prev) {
        (true, None) => return Err(Error::MissingSnapshot(task)),
        (true, Some(p)) => Some(p),
        (false, Some(_)) => {
            return Err(Error::InvalidConfig("previous snapshot given for the first task".into()))
        }
        (false, None) => None,
    };

    let ts = Sequences::stack(&batch.texts)?;
    let vs = Sequences::stack(&batch.videos)?;
    let words = state.text.forward(tape, &ts)?;
    let frames = state.video.forward(tape, &vs)?;
    let s = sim_on_tape(tape, words, frames, &ts.segments, &vs.segments)?;
    let scl = scl_on_tape(tape, s, cfg.tau)?;

    let protos = tape.constant(prototype_rows(prototypes, &batch.categories)?);
    let (w, f) = pooled_on_tape(tape, state, words, frames, &ts.segments, &vs.segments, protos)?;
    let etf = if task > 1 && !state.text_means.is_empty() {
        let pseudo = synth_pseudo_features(
            &state.text_means,
            &state.video_means,
            cfg.sigma,
            cfg.pseudo_per_category,
            pseudo_seed,
        )?;
        let cats: Vec<usize> = pseudo.iter().map(|p| p.category).collect();
        let d = prototypes.dim();
        let pw = tape.constant(Tensor::matrix(
            pseudo.len(),
            d,
            pseudo.iter().flat_map(|p| p.w_bar.clone()).collect(),
        ));
        let pf = tape.constant(Tensor::matrix(
            pseudo.len(),
            d,
            pseudo.iter().flat_map(|p| p.f_bar.clone()).collect(),
        ));
        let pp = tape.constant(prototype_rows(prototypes, &cats)?);
        let all_w = tape.concat_rows(&[w, pw]);
        let all_f = tape.concat_rows(&[f, pf]);
        let all_p = tape.concat_rows(&[protos, pp]);
        etf_on_tape(tape, all_w, all_f, all_p)?
    } else {
        etf_on_tape(tape, w, f, protos)?
    };

    let mut total = tape.scale(etf, cfg.lambda1);
    total = tape.add(scl, total);
    let mut crp_value = 0.0;
    if let Some(prev) = prev {
        let mut frozen = Tape::no_grad();
        let pw = prev.text.forward(&mut frozen, &ts)?;
        let pv = prev.video.forward(&mut frozen, &vs)?;
        let ps = sim_on_tape(&mut frozen, pw, pv, &ts.segments, &vs.segments)?;
        let crp = crp_on_tape(tape, s, frozen.value(ps), cfg.tau2, cfg.crp_symmetric)?;
        crp_value = tape.value(crp).item();
        let weighted = tape.scale(crp, cfg.lambda2);
        total = tape.add(total, weighted);
    }
    let breakdown = LossBreakdown {
        scl: tape.value(scl).item(),
        etf: tape.value(etf).item(),
        crp: crp_value,
        total: tape.value(total).item(),
    };
    Ok(LossOutput { total, breakdown })
}
