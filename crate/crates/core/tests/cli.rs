use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn saln(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saln")).args(args).output().unwrap()
}

fn smoke() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/smoke.cfg")
        .to_string_lossy()
        .into_owned()
}

fn run_into(out: &Path, extra: &[&str]) -> Output {
    let cfg = smoke();
    let out = out.to_string_lossy().into_owned();
    let mut args = vec!["run", cfg.as_str(), "--out", out.as_str()];
    args.extend_from_slice(extra);
    saln(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn run_writes_all_files_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    assert_eq!(code(&run_into(&out, &["--seed", "1"])), 0);
    for f in structalign::cli::RUN_FILES {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let before = fs::read(out.join("run.csv")).unwrap();
    let again = run_into(&out, &["--seed", "2"]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));
    assert_eq!(fs::read(out.join("run.csv")).unwrap(), before);
    assert_eq!(code(&run_into(&out, &["--seed", "2", "--overwrite"])), 0);
    assert_ne!(fs::read(out.join("run.csv")).unwrap(), before);
    // no staging directories left behind
    let names: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
}

#[test]
fn framework_arm_echoes_zero_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fw");
    assert_eq!(code(&run_into(&out, &["--ablation", "framework"])), 0);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("lambda1 = 0\n"));
    assert!(summary.contains("lambda2 = 0\n"));
    assert!(summary.contains("ablation = framework\n"));
}

#[test]
fn config_and_runtime_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = saln(&["run", "/nonexistent/x.cfg", "--out", "/tmp/unused"]);
    assert_eq!(code(&missing), 2);
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "k_tasks = 2\nwarp_factor = 9\n").unwrap();
    let o = saln(&["run", bad.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_factor"));
    let small_d = tmp.path().join("d.cfg");
    fs::write(&small_d, "dims = 32,4\n").unwrap();
    let o = saln(&["run", small_d.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    // output below a regular file cannot be created
    let file = tmp.path().join("file");
    fs::write(&file, "").unwrap();
    assert_eq!(code(&run_into(&file.join("sub"), &[])), 3);
    assert_eq!(code(&saln(&["run"])), 2);
}

#[test]
fn several_seeds_go_to_subdirectories() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("multi");
    let o = run_into(&out, &["--seed", "1", "--seed", "2", "--jobs", "2", "--dump-sims"]);
    assert_eq!(code(&o), 0);
    for s in ["seed_1", "seed_2"] {
        assert!(out.join(s).join("run.csv").is_file());
        assert!(out.join(s).join("sims_task2.csv").is_file());
    }
    let single = tmp.path().join("single");
    assert_eq!(code(&run_into(&single, &["--seed", "2"])), 0);
    assert_eq!(
        fs::read(single.join("run.csv")).unwrap(),
        fs::read(out.join("seed_2/run.csv")).unwrap()
    );
}

#[test]
fn verify_passes_filters_and_detects_fault() {
    let all = saln(&["verify"]);
    assert_eq!(code(&all), 0);
    let text = String::from_utf8_lossy(&all.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 8);
    let grad = saln(&["verify", "--filter", "grad"]);
    assert_eq!(code(&grad), 0);
    assert_eq!(String::from_utf8_lossy(&grad.stdout).lines().count(), 3);
    let fault = saln(&["verify", "--inject-fault"]);
    assert_eq!(code(&fault), 1);
    assert!(String::from_utf8_lossy(&fault.stdout).contains("FAIL etf_gram"));
}

fn parse_report(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn report_of_one_run_is_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    assert_eq!(code(&run_into(&out, &["--seed", "4"])), 0);
    let o = saln(&["report", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let rows = parse_report(&String::from_utf8_lossy(&o.stdout));
    assert!(rows.iter().all(|r| r[4] == "1" && r[6].parse::<f64>().unwrap() == 0.0));
    let run_csv = fs::read_to_string(out.join("run.csv")).unwrap();
    let last = run_csv.lines().last().unwrap();
    let r1: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    let agg = rows
        .iter()
        .find(|r| r[0] == "run" && r[1] == "2" && r[2] == "all" && r[3] == "r1")
        .unwrap();
    assert!((agg[5].parse::<f64>().unwrap() - r1).abs() < 1e-9);
}

#[test]
fn report_aggregates_three_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    let mut micd = Vec::new();
    for s in ["1", "2", "3"] {
        let d = tmp.path().join(s);
        assert_eq!(code(&run_into(&d, &["--seed", s])), 0);
        let g = fs::read_to_string(d.join("geometry.csv")).unwrap();
        micd.push(g.lines().last().unwrap().split(',').nth(4).unwrap().parse::<f64>().unwrap());
        dirs.push(d.to_string_lossy().into_owned());
    }
    let report = tmp.path().join("agg.csv");
    let mut args = vec!["report", "--out", report.to_str().unwrap()];
    args.extend(dirs.iter().map(String::as_str));
    assert_eq!(code(&saln(&args)), 0);
    let rows = parse_report(&fs::read_to_string(&report).unwrap());
    let row = rows.iter().find(|r| r[0] == "geometry" && r[1] == "2" && r[3] == "micd").unwrap();
    let mean = micd.iter().sum::<f64>() / 3.0;
    let std = (micd.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert_eq!(row[4], "3");
    assert!((row[5].parse::<f64>().unwrap() - mean).abs() < 1e-8);
    assert!((row[6].parse::<f64>().unwrap() - std).abs() < 1e-8);
}

#[test]
fn report_rejects_empty_or_malformed_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&saln(&["report", tmp.path().to_str().unwrap()])), 2);
    let out = tmp.path().join("r");
    assert_eq!(code(&run_into(&out, &[])), 0);
    fs::write(out.join("geometry.csv"), "step,eta\n0,abc\n").unwrap();
    assert_eq!(code(&saln(&["report", out.to_str().unwrap()])), 2);
}

#[test]
fn geometry_report_matches_final_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    assert_eq!(code(&run_into(&out, &["--seed", "5"])), 0);
    let o = saln(&["geometry-report", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let micd = |s: &str| s.lines().find(|l| l.starts_with("micd = ")).unwrap().to_string();
    assert_eq!(micd(&text), micd(&summary));
    assert!(text.contains("step,eta,epsilon,gamma,micd\n0,"));
    assert_eq!(code(&saln(&["geometry-report", tmp.path().to_str().unwrap()])), 2);
}
