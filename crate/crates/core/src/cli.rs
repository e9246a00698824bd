//! `saln` command line: run experiments, verify the oracle suite, aggregate
//! run directories and print geometry reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{Ablation, ExperimentConfig};
use crate::error::Error;
use crate::etf::build_etf;
use crate::harness::{evaluate, generate_task_stream, run_continual, ExperimentResult};
use crate::model::ModelState;
use crate::rng;
use crate::similarity::{sim_matrix, ModelTag};
use crate::verify::{run_checks, Fault};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const RUN_FILES: [&str; 7] = [
    "run.csv",
    "geometry.csv",
    "train_log.csv",
    "summary.txt",
    "config.txt",
    "manifest.txt",
    "model.saln",
];

#[derive(Parser, Debug)]
#[command(name = "saln", version, about = "Continual text-video retrieval with ETF-aligned prototypes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train and evaluate one continual run per seed.
    Run {
        config: PathBuf,
        /// Seed; repeat for several runs (each goes to OUT/seed_<s>).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's ablation arm.
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Replace an existing output directory.
        #[arg(long)]
        overwrite: bool,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write the final similarity matrix of each task's test set.
        #[arg(long)]
        dump_sims: bool,
    },
    /// Run the built-in oracle checks.
    Verify {
        /// Only checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Test hook: corrupt one prototype so the Gram check fails.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Mean and standard deviation over run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the aggregate here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final geometry of a run directory's model plus its checkpoint series.
    GeometryReport { dir: PathBuf },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("saln: {}", f.message);
            f.code
        }
    }
}

fn execute(command: Command) -> Result<i32, Failure> {
    match command {
        Command::Run {
            config,
            seeds,
            out,
            ablation,
            overwrite,
            jobs,
            dump_sims,
        } => cmd_run(&config, &seeds, &out, ablation, overwrite, jobs, dump_sims),
        Command::Verify {
            filter,
            inject_fault,
        } => Ok(cmd_verify(filter.as_deref(), inject_fault)),
        Command::Report { dirs, out } => cmd_report(&dirs, out.as_deref()),
        Command::GeometryReport { dir } => cmd_geometry_report(&dir),
    }
}

fn cmd_run(
    config: &Path,
    seeds: &[u64],
    out: &Path,
    ablation: Option<Ablation>,
    overwrite: bool,
    jobs: usize,
    dump_sims: bool,
) -> Result<i32, Failure> {
    let mut cfg = ExperimentConfig::from_file(config).map_err(Failure::config)?;
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    for &s in &seeds {
        let mut c = cfg.clone();
        c.seed = s;
        c.validate().map_err(Failure::config)?;
    }
    if jobs == 0 {
        return Err(Failure::config("--jobs must be >= 1"));
    }
    if out.exists() && !overwrite {
        return Err(Failure::config(format!(
            "{} exists; pass --overwrite to replace it",
            out.display()
        )));
    }
    let staging = staging_dir(out);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(Failure::runtime)?;
    }
    fs::create_dir_all(&staging).map_err(Failure::runtime)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(Failure::runtime)?;
    let results: Vec<Result<ExperimentResult, Error>> = pool.install(|| {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| run_continual(&cfg, s)).collect()
    });
    let written = (|| -> Result<(), Failure> {
        for (s, result) in seeds.iter().zip(results) {
            let result = result.map_err(Failure::runtime)?;
            let (dir, final_dir) = if seeds.len() == 1 {
                (staging.clone(), out.to_path_buf())
            } else {
                let sub = format!("seed_{s}");
                (staging.join(&sub), out.join(&sub))
            };
            fs::create_dir_all(&dir).map_err(Failure::runtime)?;
            write_run(&dir, &final_dir, config, &result, dump_sims).map_err(Failure::runtime)?;
            log::info!(
                "seed {s}: final r1 {:.2}, bwf {:.2}",
                result.final_r1(),
                result.bwf()
            );
        }
        Ok(())
    })();
    if let Err(f) = written {
        let _ = fs::remove_dir_all(&staging);
        return Err(f);
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(Failure::runtime)?;
    }
    fs::rename(&staging, out).map_err(Failure::runtime)?;
    Ok(EXIT_OK)
}

// Sibling of `out`, so the final rename stays on one filesystem.
fn staging_dir(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

fn write_run(
    dir: &Path,
    final_dir: &Path,
    config: &Path,
    r: &ExperimentResult,
    dump_sims: bool,
) -> crate::Result<()> {
    fs::write(dir.join("run.csv"), r.run_csv())?;
    fs::write(dir.join("geometry.csv"), r.geometry_csv())?;
    fs::write(dir.join("train_log.csv"), r.log_csv())?;
    fs::write(dir.join("summary.txt"), r.summary())?;
    fs::write(dir.join("config.txt"), r.config.echo())?;
    let manifest = format!(
        "config = {}\nout = {}\nseed = {}\nablation = {}\n",
        config.display(),
        final_dir.display(),
        r.seed,
        r.config.ablation.name()
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    let mut f = fs::File::create(dir.join("model.saln"))?;
    r.model.write_checkpoint(&mut f)?;
    f.flush()?;
    if dump_sims {
        let stream = generate_task_stream(&r.config.stream, rng::derive(r.seed, 1))?;
        for t in &stream.tasks {
            let texts: Vec<_> = t.test.iter().map(|p| &p.text).collect();
            let videos: Vec<_> = t.test.iter().map(|p| &p.video).collect();
            let s = sim_matrix(&texts, &videos, &r.model, ModelTag::Current)?;
            fs::write(dir.join(format!("sims_task{}.csv", t.index)), s.to_csv())?;
        }
    }
    Ok(())
}

pub fn cmd_verify(filter: Option<&str>, inject_fault: bool) -> i32 {
    let fault = inject_fault.then_some(Fault::ScalePrototype);
    let outcomes = run_checks(filter, fault);
    if outcomes.is_empty() {
        eprintln!("saln: no check matches {:?}", filter.unwrap_or(""));
        return EXIT_CHECK_FAILED;
    }
    let mut ok = true;
    for c in &outcomes {
        ok &= c.passed;
        println!(
            "{} {:16} {} ({:.2}s)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail,
            c.elapsed.as_secs_f64()
        );
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

/// Numeric columns of a CSV keyed by its leading `key_cols` columns.
type Table = BTreeMap<Vec<String>, Vec<f64>>;

/// Header, row keys in file order, and the rows.
type Parsed = (Vec<String>, Vec<Vec<String>>, Table);

fn read_table(path: &Path, key_cols: usize) -> Result<Parsed, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Failure::config(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    if header.len() <= key_cols {
        return Err(Failure::config(format!("{}: too few columns", path.display())));
    }
    let mut order = Vec::new();
    let mut table = Table::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Failure::config(format!("{}: row {} has {} cells", path.display(), i + 2, cells.len())));
        }
        let key: Vec<String> = cells[..key_cols].iter().map(|s| s.to_string()).collect();
        let values = cells[key_cols..]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| Failure::config(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        order.push(key.clone());
        table.insert(key, values);
    }
    Ok((header, order, table))
}

fn read_summary(path: &Path) -> Result<Table, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let mut t = Table::new();
    for key in ["bwf", "final_r1", "eta", "epsilon", "gamma", "micd"] {
        let v = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .and_then(|(_, v)| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Failure::config(format!("{}: missing {key}", path.display())))?;
        t.insert(vec![key.to_string()], vec![v]);
    }
    Ok(t)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Long-format aggregate over run directories: one row per table, key and
/// metric with the mean and population standard deviation.
pub fn aggregate(dirs: &[PathBuf]) -> Result<String, String> {
    aggregate_inner(dirs).map_err(|f| f.message)
}

fn aggregate_inner(dirs: &[PathBuf]) -> Result<String, Failure> {
    let mut out = String::from("table,step,eval_task,metric,n,mean,std\n");
    let specs: [(&str, &str, usize); 3] = [
        ("run", "run.csv", 2),
        ("geometry", "geometry.csv", 1),
        ("summary", "summary.txt", 1),
    ];
    for (table, file, key_cols) in specs {
        let mut reference: Option<(Vec<String>, Vec<Vec<String>>)> = None;
        let mut cells: BTreeMap<(Vec<String>, usize), Vec<f64>> = BTreeMap::new();
        for dir in dirs {
            if !dir.is_dir() {
                return Err(Failure::config(format!("{} is not a directory", dir.display())));
            }
            let path = dir.join(file);
            let (header, order, data) = if table == "summary" {
                let t = read_summary(&path)?;
                let order = t.keys().cloned().collect();
                (vec!["metric".into(), "value".into()], order, t)
            } else {
                read_table(&path, key_cols)?
            };
            match &reference {
                None => reference = Some((header, order)),
                Some((h, o)) if *h == header && *o == order => {}
                Some(_) => {
                    return Err(Failure::config(format!(
                        "{}: layout differs from {}",
                        path.display(),
                        dirs[0].join(file).display()
                    )))
                }
            }
            for (key, values) in data {
                for (j, v) in values.into_iter().enumerate() {
                    cells.entry((key.clone(), j)).or_default().push(v);
                }
            }
        }
        let Some((header, order)) = reference else { continue };
        for key in &order {
            for j in 0..header.len() - key_cols {
                let xs = &cells[&(key.clone(), j)];
                let (mean, std) = mean_std(xs);
                let (step, eval, metric) = match table {
                    "run" => (key[0].as_str(), key[1].as_str(), header[key_cols + j].as_str()),
                    "geometry" => (key[0].as_str(), "all", header[key_cols + j].as_str()),
                    _ => ("final", "all", key[0].as_str()),
                };
                let _ = writeln!(out, "{table},{step},{eval},{metric},{},{mean:.9},{std:.9}", xs.len());
            }
        }
    }
    Ok(out)
}

fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<i32, Failure> {
    let report = aggregate_inner(dirs)?;
    match out {
        Some(p) => fs::write(p, report).map_err(Failure::runtime)?,
        None => print!("{report}"),
    }
    Ok(EXIT_OK)
}

fn cmd_geometry_report(dir: &Path) -> Result<i32, Failure> {
    let cfg = ExperimentConfig::from_file(&dir.join("config.txt")).map_err(Failure::config)?;
    let series = fs::read_to_string(dir.join("geometry.csv"))
        .map_err(|e| Failure::config(format!("{}: {e}", dir.join("geometry.csv").display())))?;
    let file = fs::File::open(dir.join("model.saln")).map_err(Failure::config)?;
    let model = ModelState::read_checkpoint(cfg.encoder.clone(), std::io::BufReader::new(file))
        .map_err(Failure::config)?;
    let stream = generate_task_stream(&cfg.stream, rng::derive(cfg.seed, 1)).map_err(Failure::runtime)?;
    let prototypes =
        build_etf(stream.categories, cfg.encoder.proto_dim, rng::derive(cfg.seed, 3)).map_err(Failure::runtime)?;
    let eval = evaluate(&model, &stream.tasks, &prototypes).map_err(Failure::runtime)?;
    print!("{}", eval.geometry.to_key_values());
    println!();
    print!("{series}");
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_constant_is_zero() {
        assert_eq!(mean_std(&[2.5]), (2.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn staging_is_a_hidden_sibling() {
        let s = staging_dir(Path::new("/tmp/a/out"));
        assert_eq!(s.parent(), Some(Path::new("/tmp/a")));
        assert!(s.file_name().unwrap().to_string_lossy().starts_with(".out.partial-"));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_from_args(["saln", "run"]), EXIT_CONFIG);
        assert_eq!(run_from_args(["saln", "frobnicate"]), EXIT_CONFIG);
    }
}
