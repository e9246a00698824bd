//! Acceptance criteria. Each test writes one PASS/FAIL line to stderr,
//! bypassing the test harness capture so the lines show up in plain
//! `cargo test` output.

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use structalign::config::{Ablation, ExperimentConfig};
use structalign::harness::{run_ablations, run_continual};
use structalign::verify;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(id: u32, name: &str, passed: bool, detail: String) {
    let line = format!(
        "[acceptance] criterion {id:>2} {name}: {} ({detail})\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "criterion {id} failed: {detail}");
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn check(f: fn() -> structalign::Result<(bool, String)>) -> (bool, String) {
    f().unwrap_or_else(|e| (false, format!("error: {e}")))
}

#[test]
fn c01_etf_geometry() {
    let ((ok, detail), t) = timed(|| verify::check_etf(None).unwrap_or_else(|e| (false, e.to_string())));
    let fast = t < Duration::from_secs(1);
    report(1, "ETF Gram structure", ok && fast, format!("{detail}, {:.3}s", t.as_secs_f64()));
}

#[test]
fn c02_gradient_correctness() {
    let (results, t) = timed(|| {
        [
            ("scl", check(verify::check_grad_scl)),
            ("etf", check(verify::check_grad_etf)),
            ("crp", check(verify::check_grad_crp)),
        ]
    });
    let ok = results.iter().all(|(_, (p, _))| *p) && t < Duration::from_secs(30);
    let detail: Vec<String> = results.iter().map(|(n, (_, d))| format!("{n}: {d}")).collect();
    report(2, "gradient checks", ok, format!("{}; {:.2}s", detail.join("; "), t.as_secs_f64()));
}

#[test]
fn c03_loss_identities() {
    let (ok, detail) = check(verify::check_loss_identities);
    report(3, "loss identities", ok, detail);
}

#[test]
fn c04_ranking_oracle() {
    let (ok, detail) = check(verify::check_rank_oracle);
    report(4, "ranking oracle", ok, detail);
}

#[derive(Clone, Copy, Default)]
struct ArmStats {
    r1: f64,
    bwf: f64,
    epsilon: f64,
    gamma: f64,
    micd_ok: usize,
}

struct Sweep {
    arms: Vec<(Ablation, ArmStats)>,
    elapsed: Duration,
}

impl Sweep {
    fn get(&self, arm: Ablation) -> ArmStats {
        self.arms.iter().find(|(a, _)| *a == arm).map(|(_, s)| *s).unwrap()
    }
}

// Four arms over five seeds on the default stream, shared by criteria 5-8.
fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let start = Instant::now();
        let mut arms: Vec<(Ablation, ArmStats)> =
            Ablation::ALL.iter().map(|&a| (a, ArmStats::default())).collect();
        for &seed in &SEEDS {
            for (arm, r) in run_ablations(&cfg, seed).expect("ablation run") {
                let g = r.final_geometry().expect("geometry");
                let first = r.geometry_series()[0].micd;
                let s = &mut arms.iter_mut().find(|(a, _)| *a == arm).unwrap().1;
                s.r1 += r.final_r1() / SEEDS.len() as f64;
                s.bwf += r.bwf() / SEEDS.len() as f64;
                s.epsilon += g.epsilon / SEEDS.len() as f64;
                s.gamma += g.gamma / SEEDS.len() as f64;
                if g.micd < first && g.micd > 0.01 {
                    s.micd_ok += 1;
                }
            }
        }
        Sweep {
            arms,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn c05_ablation_ordering() {
    let s = sweep();
    let (fw, crp, cetf, full) = (
        s.get(Ablation::Framework).r1,
        s.get(Ablation::Crp).r1,
        s.get(Ablation::Cetf).r1,
        s.get(Ablation::Full).r1,
    );
    let ok = full >= cetf
        && cetf >= fw
        && full >= crp
        && crp >= fw
        && full - fw >= 1.0
        && s.elapsed < Duration::from_secs(600);
    report(
        5,
        "ablation ordering of final R@1",
        ok,
        format!(
            "full {full:.2}, crp {crp:.2}, cetf {cetf:.2}, framework {fw:.2}; sweep {:.1}s",
            s.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c06_forgetting_reduction() {
    let s = sweep();
    let (fw, full) = (s.get(Ablation::Framework).bwf, s.get(Ablation::Full).bwf);
    report(6, "BWF full < framework", full < fw, format!("full {full:.3}, framework {fw:.3}"));
}

#[test]
fn c07_micd_behavior() {
    let n = sweep().get(Ablation::Full).micd_ok;
    report(
        7,
        "MICD final < first and > 0.01",
        n >= 4,
        format!("{n} of {} seeds", SEEDS.len()),
    );
}

#[test]
fn c08_geometry_trend() {
    let s = sweep();
    let (fw, full) = (s.get(Ablation::Framework), s.get(Ablation::Full));
    let ok = full.epsilon < fw.epsilon && full.gamma < fw.gamma;
    report(
        8,
        "final epsilon and gamma full < framework",
        ok,
        format!(
            "epsilon {:.4} vs {:.4}, gamma {:.4} vs {:.4}",
            full.epsilon, fw.epsilon, full.gamma, fw.gamma
        ),
    );
}

#[test]
fn c09_continual_hygiene() {
    let cfg = ExperimentConfig::default();
    let run = run_continual(&cfg, 0);
    let (isolated, frozen) = match &run {
        Ok(r) => (true, r.model.frozen_checksum() == r.frozen_checksum),
        Err(_) => (false, false),
    };
    let mut still = cfg.clone();
    still.train.lr_base = 0.0;
    still.train.lr_incr = 0.0;
    let bwf = run_continual(&still, 0).map(|r| r.bwf());
    let ok = isolated && frozen && bwf.as_ref().is_ok_and(|b| *b == 0.0);
    let err = run.err().map(|e| format!(", error {e}")).unwrap_or_default();
    report(
        9,
        "continual-learning hygiene",
        ok,
        format!("isolation held {isolated}, frozen base unchanged {frozen}, LR=0 BWF {bwf:?}{err}"),
    );
}

fn default_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.cfg")
}

#[test]
fn c10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_saln"))
            .args(["run", "--seed", "7", "--out"])
            .arg(&out)
            .arg(default_config())
            .status()
            .unwrap();
        (status.success(), out)
    };
    let (ok_a, a) = run("a");
    let (ok_b, b) = run("b");
    let mut same = Vec::new();
    for f in ["run.csv", "geometry.csv", "train_log.csv"] {
        let x = std::fs::read(a.join(f)).unwrap_or_default();
        let y = std::fs::read(b.join(f)).unwrap_or_default();
        same.push(!x.is_empty() && x == y);
    }
    let ok = ok_a && ok_b && same.iter().all(|&s| s);
    report(10, "byte-identical run CSVs", ok, format!("run/geometry/log identical {same:?}"));
}

#[test]
fn c11_moe_lora_contracts() {
    let (gates_ok, gates) = check(verify::check_moe_gates);
    let (lora_ok, lora) = check(verify::check_lora_zero);
    report(11, "MoE gating and zero LoRA", gates_ok && lora_ok, format!("{gates}; {lora}"));
}
