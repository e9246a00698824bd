//! Synthetic task streams, the continual training loop and experiment
//! orchestration.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{Ablation, ExperimentConfig, StreamConfig};
use crate::diffmath::{l2_normalize, Tape, Tensor};
use crate::encoders::Sequences;
use crate::error::{Error, Result};
use crate::etf::{build_etf, EtfPrototypes, FeatureSet, GeometryReport};
use crate::losses::{pooled_on_tape, prototype_rows, total_loss, Batch, LossBreakdown};
use crate::metrics::{bwf, rank_from_scores, MetricsReport};
use crate::model::{ModelState, Snapshot};
use crate::optim::Adam;
use crate::rng;
use crate::similarity::{cross_sim, encode_texts, encode_videos};

/// One text-video pair with its category.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    /// `N x D` raw token features.
    pub text: Tensor,
    /// `M x D` raw frame features.
    pub video: Tensor,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    /// 1-based task index.
    pub index: usize,
    pub categories: Vec<usize>,
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
    pub shots: usize,
}

impl TaskDataset {
    /// Rejects any pair outside this task's category set.
    pub fn check(&self, pair: &Pair) -> Result<()> {
        if self.categories.contains(&pair.category) {
            Ok(())
        } else {
            Err(Error::DataLeak {
                task: self.index,
                category: pair.category,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<TaskDataset>,
    pub categories: usize,
    pub seed: u64,
}

fn gaussian(r: &mut rng::Rng, n: usize, std: f64) -> Vec<f64> {
    rng::normal_vec(r, n, std)
}

fn unit(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(r, n, 1.0);
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

// I + gap * G / sqrt(D)
fn modality_map(r: &mut rng::Rng, d: usize, gap: f64) -> Tensor {
    let g = gaussian(r, d * d, gap / (d as f64).sqrt());
    Tensor::identity(d).zip_map(&Tensor::matrix(d, d, g), |a, b| a + b)
}

fn apply(map: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..map.cols())
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * map.at(i, j)).sum())
        .collect()
}

fn sequence(r: &mut rng::Rng, base: &[f64], rows: usize, noise: f64) -> Tensor {
    let d = base.len();
    let std = noise / (d as f64).sqrt();
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        data.extend(base.iter().map(|b| b + std * rng::normal(r)));
    }
    Tensor::matrix(rows, d, data)
}

/// Builds `K` tasks over disjoint category sets. Each category has a latent
/// unit direction near its task's center; each pair adds an instance offset
/// shared by both modalities, maps it through a per-modality linear map and
/// repeats it over tokens or frames with independent noise.
pub fn generate_task_stream(cfg: &StreamConfig, seed: u64) -> Result<TaskStream> {
    if cfg.k_tasks == 0 || cfg.cats_per_task == 0 || cfg.shots == 0 || cfg.test_per_cat == 0 {
        return Err(Error::InvalidConfig("task and sample counts must be >= 1".into()));
    }
    if cfg.tokens == 0 || cfg.frames == 0 || cfg.width == 0 {
        return Err(Error::InvalidConfig("tokens, frames and width must be >= 1".into()));
    }
    let d = cfg.width;
    let mut r = rng::seeded(seed);
    let t_text = modality_map(&mut r, d, cfg.modality_gap);
    let t_video = modality_map(&mut r, d, cfg.modality_gap);
    let basis: Vec<Vec<f64>> = (0..cfg.instance_rank).map(|_| unit(&mut r, d)).collect();
    let inst_dims = if basis.is_empty() { d } else { basis.len() };
    let inst_std = cfg.instance_noise / (inst_dims as f64).sqrt();
    let mut tasks = Vec::with_capacity(cfg.k_tasks);
    for k in 0..cfg.k_tasks {
        let center = unit(&mut r, d);
        let shift = modality_map(&mut r, d, cfg.domain_shift);
        let t_video_k = t_video.matmul(&shift);
        let categories: Vec<usize> = (k * cfg.cats_per_task..(k + 1) * cfg.cats_per_task).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &categories {
            let g = unit(&mut r, d);
            let u_c: Vec<f64> = center.iter().zip(&g).map(|(a, b)| a + cfg.task_spread * b).collect();
            let u_c = l2_normalize(&u_c).unwrap_or(center.clone());
            for i in 0..cfg.shots + cfg.test_per_cat {
                let mut z = u_c.clone();
                if basis.is_empty() {
                    z.iter_mut().for_each(|x| *x += inst_std * rng::normal(&mut r));
                } else {
                    for b in &basis {
                        let s = inst_std * rng::normal(&mut r);
                        z.iter_mut().zip(b).for_each(|(x, bi)| *x += s * bi);
                    }
                }
                let text = sequence(&mut r, &apply(&t_text, &z), cfg.tokens, cfg.token_noise);
                let video = sequence(&mut r, &apply(&t_video_k, &z), cfg.frames, cfg.frame_noise);
                let pair = Pair { text, video, category: c };
                if i < cfg.shots {
                    train.push(pair);
                } else {
                    test.push(pair);
                }
            }
        }
        tasks.push(TaskDataset {
            index: k + 1,
            categories,
            train,
            test,
            shots: cfg.shots,
        });
    }
    Ok(TaskStream {
        tasks,
        categories: cfg.k_tasks * cfg.cats_per_task,
        seed,
    })
}

/// Loss breakdown of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Normalized pooled projected text and video vectors for each pair.
pub fn pooled_features(
    state: &ModelState,
    prototypes: &EtfPrototypes,
    pairs: &[&Pair],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let texts: Vec<&Tensor> = chunk.iter().map(|p| &p.text).collect();
        let videos: Vec<&Tensor> = chunk.iter().map(|p| &p.video).collect();
        let cats: Vec<usize> = chunk.iter().map(|p| p.category).collect();
        let ts = Sequences::stack(&texts)?;
        let vs = Sequences::stack(&videos)?;
        let mut tape = Tape::no_grad();
        let words = state.text.forward(&mut tape, &ts)?;
        let frames = state.video.forward(&mut tape, &vs)?;
        let protos = tape.constant(prototype_rows(prototypes, &cats)?);
        let (w, f) =
            pooled_on_tape(&mut tape, state, words, frames, &ts.segments, &vs.segments, protos)?;
        let (w, f) = (tape.value(w), tape.value(f));
        for i in 0..chunk.len() {
            out.push((l2_normalize(w.row(i))?, l2_normalize(f.row(i))?));
        }
    }
    Ok(out)
}

/// Normalized average of normalized vectors.
fn unit_mean(vs: &[&Vec<f64>]) -> Result<Vec<f64>> {
    let d = vs.first().map_or(0, |v| v.len());
    let mut m = vec![0.0; d];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    l2_normalize(&m)
}

/// Trains `state` on one task and stores the task's category means.
/// `prev` must be present exactly when `task.index > 1`.
pub fn train_task(
    state: &mut ModelState,
    task: &TaskDataset,
    prev: Option<&ModelState>,
    prototypes: &EtfPrototypes,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<LogRow>> {
    if task.index > 1 && prev.is_none() {
        return Err(Error::MissingSnapshot(task.index));
    }
    for p in &task.train {
        task.check(p)?;
    }
    let loss_cfg = cfg.effective_loss();
    let frozen = state.frozen_checksum();
    let lr = if task.index == 1 {
        cfg.train.lr_base
    } else {
        cfg.train.lr_incr
    };
    let mut opt = Adam::new(lr);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.train.epochs {
        let mut r = rng::seeded(rng::derive(seed, (task.index * 10_000 + epoch) as u64));
        order.shuffle(&mut r);
        for idx in order.chunks(cfg.train.batch) {
            let pairs: Vec<&Pair> = idx.iter().map(|&i| &task.train[i]).collect();
            for p in &pairs {
                task.check(p)?;
            }
            let batch = Batch {
                texts: pairs.iter().map(|p| &p.text).collect(),
                videos: pairs.iter().map(|p| &p.video).collect(),
                categories: pairs.iter().map(|p| p.category).collect(),
            };
            let pseudo_seed = rng::derive(seed, (task.index * 1_000_000 + step) as u64);
            let mut tape = Tape::new();
            let out = total_loss(
                &mut tape, &batch, state, prev, prototypes, &loss_cfg, task.index, pseudo_seed,
            )?;
            let grads = tape.backward(out.total)?;
            opt.step(state.params_mut(), &grads);
            log.push(LogRow {
                task: task.index,
                epoch,
                step,
                loss: out.breakdown,
            });
            step += 1;
        }
    }
    if state.frozen_checksum() != frozen {
        return Err(Error::FrozenWeightsChanged(task.index));
    }
    let pairs: Vec<&Pair> = task.train.iter().collect();
    let feats = pooled_features(state, prototypes, &pairs)?;
    for &c in &task.categories {
        let (t, v): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) = pairs
            .iter()
            .zip(&feats)
            .filter(|(p, _)| p.category == c)
            .map(|(_, (t, v))| (t, v))
            .unzip();
        if t.is_empty() {
            continue;
        }
        state.text_means.insert(c, unit_mean(&t)?);
        state.video_means.insert(c, unit_mean(&v)?);
    }
    Ok(log)
}

/// Immutable copy of the model for the next task's relation term.
pub fn snapshot(state: &ModelState) -> Snapshot {
    state.snapshot()
}

/// Retrieval metrics after one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Per seen task, queries ranked against that task's test videos.
    pub per_task: Vec<MetricsReport>,
    /// All seen test queries ranked against all seen test videos.
    pub overall: MetricsReport,
    pub geometry: GeometryReport,
}

/// Evaluates on the test sets of `tasks`. Scores are computed once over
/// the union gallery; per-task rankings use that task's block.
pub fn evaluate(
    state: &ModelState,
    tasks: &[TaskDataset],
    prototypes: &EtfPrototypes,
) -> Result<Evaluation> {
    let pairs: Vec<&Pair> = tasks.iter().flat_map(|t| &t.test).collect();
    let texts: Vec<&Tensor> = pairs.iter().map(|p| &p.text).collect();
    let videos: Vec<&Tensor> = pairs.iter().map(|p| &p.video).collect();
    let words = encode_texts(&texts, state)?;
    let frames = encode_videos(&videos, state)?;
    let scores = cross_sim(&words, &frames)?;
    let truth: Vec<usize> = (0..pairs.len()).collect();
    let overall = MetricsReport::from_ranks(&rank_from_scores(&scores, &truth)?)?;
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut start = 0;
    for t in tasks {
        let n = t.test.len();
        let mut block = Vec::with_capacity(n * n);
        for q in start..start + n {
            block.extend_from_slice(&scores.row(q)[start..start + n]);
        }
        let local: Vec<usize> = (0..n).collect();
        let ranks = rank_from_scores(&Tensor::matrix(n, n, block), &local)?;
        per_task.push(MetricsReport::from_ranks(&ranks)?);
        start += n;
    }
    let geometry = geometry(state, &pairs, prototypes)?;
    Ok(Evaluation {
        per_task,
        overall,
        geometry,
    })
}

/// Geometry diagnostics of the pooled projected features of `pairs`.
pub fn geometry(state: &ModelState, pairs: &[&Pair], prototypes: &EtfPrototypes) -> Result<GeometryReport> {
    let feats = pooled_features(state, prototypes, pairs)?;
    let mut text = FeatureSet::new();
    let mut video = FeatureSet::new();
    for (p, (t, v)) in pairs.iter().zip(feats) {
        text.push(p.category, t);
        video.push(p.category, v);
    }
    GeometryReport::from_features(&text, &video)
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// `recall[k-1][i-1]`: Recall@1 on task `i` after training task `k`.
    pub recall: Vec<Vec<f64>>,
    pub evaluations: Vec<Evaluation>,
    /// Geometry of the untrained model on the first task's test pairs.
    pub initial_geometry: GeometryReport,
    pub log: Vec<LogRow>,
    pub frozen_checksum: String,
    pub model: ModelState,
    pub wall_clock: Duration,
}

impl ExperimentResult {
    /// Backward forgetting after the last task; 0 for a single task.
    pub fn bwf(&self) -> f64 {
        match self.recall.len() {
            0 | 1 => 0.0,
            k => bwf(&self.recall, k).unwrap_or(0.0),
        }
    }

    /// Recall@1 over all seen test pairs after the last task.
    pub fn final_r1(&self) -> f64 {
        self.evaluations.last().map_or(0.0, |e| e.overall.r1)
    }

    pub fn final_geometry(&self) -> Option<&GeometryReport> {
        self.evaluations.last().map(|e| &e.geometry)
    }

    /// Geometry at step 0 (before training) and after each task.
    pub fn geometry_series(&self) -> Vec<&GeometryReport> {
        std::iter::once(&self.initial_geometry)
            .chain(self.evaluations.iter().map(|e| &e.geometry))
            .collect()
    }

    pub fn run_csv(&self) -> String {
        let mut out = String::from("after_task,eval_task,r1,r5,r10,medr,meanr\n");
        let row = |out: &mut String, k: usize, i: &str, m: &MetricsReport| {
            out.push_str(&format!(
                "{k},{i},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m.r1, m.r5, m.r10, m.medr, m.meanr
            ));
        };
        for (k, e) in self.evaluations.iter().enumerate() {
            for (i, m) in e.per_task.iter().enumerate() {
                row(&mut out, k + 1, &(i + 1).to_string(), m);
            }
            row(&mut out, k + 1, "all", &e.overall);
        }
        out
    }

    pub fn geometry_csv(&self) -> String {
        let mut out = String::from("step,eta,epsilon,gamma,micd\n");
        for (k, g) in self.geometry_series().into_iter().enumerate() {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                k,
                g.eta,
                g.epsilon,
                g.gamma,
                g.micd
            ));
        }
        out
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("task,epoch,step,scl,etf,crp,total\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{:.9},{:.9},{:.9},{:.9}\n",
                r.task, r.epoch, r.step, r.loss.scl, r.loss.etf, r.loss.crp, r.loss.total
            ));
        }
        out
    }

    /// `key = value` summary: forgetting, final metrics and geometry, the
    /// effective configuration and the wall clock.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("bwf = {:.6}\n", self.bwf()));
        if self.recall.len() < 2 {
            out.push_str("bwf_note = single task, reported as 0\n");
        }
        out.push_str(&format!("final_r1 = {:.6}\n", self.final_r1()));
        if let Some(g) = self.final_geometry() {
            out.push_str(&g.to_key_values());
        }
        out.push_str(&format!("frozen_checksum = {}\n", self.frozen_checksum));
        out.push_str(&self.config.echo());
        out.push_str(&format!("wall_clock_s = {:.3}\n", self.wall_clock.as_secs_f64()));
        out
    }
}

/// Full continual run: generate the stream, then train and evaluate task by
/// task. `seed` replaces the configured seed.
pub fn run_continual(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentResult> {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.validate()?;
    let stream = generate_task_stream(&cfg.stream, rng::derive(seed, 1))?;
    let prototypes = build_etf(stream.categories, cfg.encoder.proto_dim, rng::derive(seed, 3))?;
    let mut state = ModelState::new(cfg.encoder.clone(), rng::derive(seed, 2))?;
    let frozen = state.frozen_checksum();
    let train_seed = rng::derive(seed, 4);
    let first: Vec<&Pair> = stream.tasks[0].test.iter().collect();
    let initial_geometry = geometry(&state, &first, &prototypes)?;
    let mut prev: Option<Snapshot> = None;
    let mut recall = Vec::new();
    let mut evaluations = Vec::new();
    let mut log = Vec::new();
    for (k, task) in stream.tasks.iter().enumerate() {
        log.extend(train_task(
            &mut state,
            task,
            prev.as_deref(),
            &prototypes,
            &cfg,
            train_seed,
        )?);
        let eval = evaluate(&state, &stream.tasks[..=k], &prototypes)?;
        recall.push(eval.per_task.iter().map(|m| m.r1).collect());
        log::info!(
            "seed {seed} {} task {}: r1 {:.2} micd {:.4}",
            cfg.ablation.name(),
            k + 1,
            eval.overall.r1,
            eval.geometry.micd
        );
        evaluations.push(eval);
        prev = Some(snapshot(&state));
    }
    if state.frozen_checksum() != frozen {
        return Err(Error::FrozenWeightsChanged(stream.tasks.len()));
    }
    Ok(ExperimentResult {
        config: cfg,
        seed,
        recall,
        evaluations,
        initial_geometry,
        log,
        frozen_checksum: frozen,
        model: state,
        wall_clock: start.elapsed(),
    })
}

/// All four ablation arms on the same seed, run concurrently.
pub fn run_ablations(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(Ablation, ExperimentResult)>> {
    Ablation::ALL
        .par_iter()
        .map(|&arm| {
            let mut c = cfg.clone();
            c.ablation = arm;
            run_continual(&c, seed).map(|r| (arm, r))
        })
        .collect()
}

/// Categories seen up to and including task `k` (1-based).
pub fn seen_categories(stream: &TaskStream, k: usize) -> BTreeSet<usize> {
    stream.tasks[..k]
        .iter()
        .flat_map(|t| t.categories.iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{sim_matrix, ModelTag};

    fn small(k: usize) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "k_tasks = {k}\ncats_per_task = 2\nshots = 4\ntest_per_cat = 3\nepochs = 2\nbatch = 4\nlayers = 1\ndims = 32,8\n"
        ))
        .unwrap()
    }

    fn setup(cfg: &ExperimentConfig) -> (TaskStream, EtfPrototypes, ModelState) {
        let stream = generate_task_stream(&cfg.stream, 1).unwrap();
        let protos = build_etf(stream.categories, cfg.encoder.proto_dim, 2).unwrap();
        let model = ModelState::new(cfg.encoder.clone(), 3).unwrap();
        (stream, protos, model)
    }

    #[test]
    fn single_task_holds_every_category() {
        let cfg = StreamConfig {
            k_tasks: 1,
            cats_per_task: 20,
            ..StreamConfig::default()
        };
        let s = generate_task_stream(&cfg, 0).unwrap();
        assert_eq!(s.tasks.len(), 1);
        assert_eq!(s.tasks[0].categories, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn default_stream_has_disjoint_tasks() {
        let s = generate_task_stream(&StreamConfig::default(), 5).unwrap();
        let mut all = BTreeSet::new();
        for t in &s.tasks {
            assert_eq!(t.categories.len(), 4);
            for &c in &t.categories {
                assert!(all.insert(c), "category {c} repeated");
            }
            assert_eq!(t.train.len(), 4 * 16);
            assert_eq!(t.test.len(), 4 * 8);
            assert!(t.train.iter().chain(&t.test).all(|p| t.check(p).is_ok()));
        }
        assert_eq!(all.len(), 20);
        assert_eq!(seen_categories(&s, 2).len(), 8);
    }

    #[test]
    fn zero_noise_gives_identical_samples() {
        let cfg = StreamConfig {
            token_noise: 0.0,
            frame_noise: 0.0,
            instance_noise: 0.0,
            ..StreamConfig::default()
        };
        let s = generate_task_stream(&cfg, 2).unwrap();
        let t = &s.tasks[3];
        let first = t.train.iter().find(|p| p.category == 13).unwrap();
        for p in t.train.iter().chain(&t.test).filter(|p| p.category == 13) {
            assert_eq!(p.text, first.text);
            assert_eq!(p.video, first.video);
        }
        let other = t.train.iter().find(|p| p.category == 14).unwrap();
        assert_ne!(other.text, first.text);
    }

    #[test]
    fn low_rank_instance_offsets() {
        let cfg = StreamConfig {
            token_noise: 0.0,
            frame_noise: 0.0,
            instance_rank: 2,
            ..StreamConfig::default()
        };
        let s = generate_task_stream(&cfg, 4).unwrap();
        let pairs: Vec<&Pair> = s.tasks[0].train.iter().filter(|p| p.category == 0).collect();
        // differences between instances span at most the offset subspace
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for p in &pairs[1..] {
            let mut v: Vec<f64> = p.text.row(0).iter().zip(pairs[0].text.row(0)).map(|(a, b)| a - b).collect();
            for b in &basis {
                let d = crate::diffmath::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            if let Ok(u) = l2_normalize(&v) {
                if crate::diffmath::norm(&v) > 1e-9 {
                    basis.push(u);
                }
            }
        }
        assert_eq!(basis.len(), 2);
    }

    #[test]
    fn stream_is_deterministic_and_validated() {
        let cfg = StreamConfig::default();
        assert_eq!(generate_task_stream(&cfg, 9).unwrap(), generate_task_stream(&cfg, 9).unwrap());
        assert_ne!(generate_task_stream(&cfg, 9).unwrap(), generate_task_stream(&cfg, 10).unwrap());
        let bad = StreamConfig { shots: 0, ..cfg };
        assert!(matches!(generate_task_stream(&bad, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn foreign_pair_is_a_data_leak() {
        let cfg = small(2);
        let (stream, protos, mut model) = setup(&cfg);
        let mut task = stream.tasks[0].clone();
        let foreign = stream.tasks[1].train[0].clone();
        assert_eq!(
            task.check(&foreign),
            Err(Error::DataLeak { task: 1, category: foreign.category })
        );
        task.train.push(foreign);
        let err = train_task(&mut model, &task, None, &protos, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::DataLeak { task: 1, .. }));
    }

    #[test]
    fn second_task_needs_snapshot() {
        let cfg = small(2);
        let (stream, protos, mut model) = setup(&cfg);
        assert_eq!(
            train_task(&mut model, &stream.tasks[1], None, &protos, &cfg, 0).unwrap_err(),
            Error::MissingSnapshot(2)
        );
    }

    #[test]
    fn zero_epochs_only_records_means() {
        let mut cfg = small(1);
        cfg.train.epochs = 0;
        let (stream, protos, mut model) = setup(&cfg);
        let before = model.clone();
        let log = train_task(&mut model, &stream.tasks[0], None, &protos, &cfg, 0).unwrap();
        assert!(log.is_empty());
        assert_eq!(model.params(), before.params());
        assert_eq!(model.text_means.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(model.video_means.len(), 2);
    }

    #[test]
    fn zero_weights_log_only_contrastive_loss() {
        let mut cfg = small(2);
        cfg.loss.lambda1 = 0.0;
        cfg.loss.lambda2 = 0.0;
        let (stream, protos, mut model) = setup(&cfg);
        train_task(&mut model, &stream.tasks[0], None, &protos, &cfg, 0).unwrap();
        let prev = snapshot(&model);
        let log = train_task(&mut model, &stream.tasks[1], Some(&prev), &protos, &cfg, 0).unwrap();
        assert!(!log.is_empty());
        for row in &log {
            assert_eq!(row.loss.total, row.loss.scl);
        }
    }

    #[test]
    fn snapshot_is_isolated_from_training() {
        let cfg = small(2);
        let (stream, protos, mut model) = setup(&cfg);
        train_task(&mut model, &stream.tasks[0], None, &protos, &cfg, 0).unwrap();
        let snap = snapshot(&model);
        let sum = snap.checksum();
        let t = &stream.tasks[1].test;
        let texts: Vec<&Tensor> = t.iter().map(|p| &p.text).collect();
        let videos: Vec<&Tensor> = t.iter().map(|p| &p.video).collect();
        let s_before = sim_matrix(&texts, &videos, &model, ModelTag::Current).unwrap();
        let s_snap = sim_matrix(&texts, &videos, &snap, ModelTag::Previous).unwrap();
        assert_eq!(s_before.values, s_snap.values);
        train_task(&mut model, &stream.tasks[1], Some(&snap), &protos, &cfg, 0).unwrap();
        assert_eq!(snap.checksum(), sum);
        let s_after = sim_matrix(&texts, &videos, &model, ModelTag::Current).unwrap();
        assert_ne!(s_after.values, s_snap.values);
    }

    #[test]
    fn single_task_run_reports_zero_forgetting() {
        let r = run_continual(&small(1), 4).unwrap();
        assert_eq!(r.recall.len(), 1);
        assert_eq!(r.recall[0].len(), 1);
        assert_eq!(r.bwf(), 0.0);
        assert!(r.summary().contains("bwf_note"));
        assert_eq!(r.geometry_series().len(), 2);
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = small(2);
        let a = run_continual(&cfg, 11).unwrap();
        let b = run_continual(&cfg, 11).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.run_csv(), b.run_csv());
        assert_eq!(a.geometry_csv(), b.geometry_csv());
        assert_eq!(a.log_csv(), b.log_csv());
        let c = run_continual(&cfg, 12).unwrap();
        assert_ne!(a.model.checksum(), c.model.checksum());
    }

    #[test]
    fn recall_matrix_is_lower_triangular_and_frozen_base_kept() {
        let r = run_continual(&small(3), 1).unwrap();
        for (k, row) in r.recall.iter().enumerate() {
            assert_eq!(row.len(), k + 1);
            assert!(row.iter().all(|v| (0.0..=100.0).contains(v)));
        }
        assert_eq!(r.model.frozen_checksum(), r.frozen_checksum);
        assert_eq!(r.geometry_csv().lines().count(), 1 + 4);
        assert_eq!(r.run_csv().lines().count(), 1 + (1 + 2 + 3) + 3);
    }

    #[test]
    fn zero_learning_rate_has_no_forgetting() {
        let mut cfg = small(3);
        cfg.train.lr_base = 0.0;
        cfg.train.lr_incr = 0.0;
        let r = run_continual(&cfg, 2).unwrap();
        for k in 0..3 {
            for i in 0..=k {
                assert_eq!(r.recall[k][i], r.recall[i][i]);
            }
        }
        assert_eq!(r.bwf(), 0.0);
    }

    #[test]
    fn ablation_grid_shares_the_stream() {
        let out = run_ablations(&small(2), 6).unwrap();
        let arms: Vec<Ablation> = out.iter().map(|(a, _)| *a).collect();
        assert_eq!(arms, Ablation::ALL);
        assert_eq!(out[0].1.frozen_checksum, out[3].1.frozen_checksum);
        let framework = out[0].1.config.effective_loss();
        assert_eq!((framework.lambda1, framework.lambda2), (0.0, 0.0));
        let echo = out[0].1.config.echo();
        assert!(echo.contains("lambda1 = 0\n") && echo.contains("lambda2 = 0\n"));
        assert!(out.iter().all(|(_, r)| r.recall.len() == 2));
    }
}
