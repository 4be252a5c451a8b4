//! Command-line front end: simulate, fit, select, benchmark, evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical/runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cwm::{FitConfig, FitParams, ModelKind};
use crate::error::{Error, Result};
use crate::eval::{ari, misclassification_rate, select_model, SelectionResult};
use crate::io::{atomic_write, load_dataset, load_labels, save_dataset, save_model};
use crate::sim::{generate_dataset, replicate_study, scenario, FitMode, FitPlan};

const DEFAULT_SEED: u64 = 0;

#[derive(Parser)]
#[command(
    name = "mvcwm",
    version,
    about = "Matrix-variate cluster-weighted models: simulation, fitting, model selection"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a dataset from a named scenario and write it as long-format CSV
    /// (with a labels.csv sidecar).
    Simulate {
        /// Scenario name: A1, B1, A2, B2, C2 or S3-D{2,3,4}-G{2,3,4}
        scenario: String,
        /// Number of units to draw
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// RNG seed (default: MVCWM_SEED env var, else 0)
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset, selecting G over --g-range by BIC.
    Fit(FitArgs),
    /// Alias of fit; emits the same per-G selection report.
    Select(FitArgs),
    /// Reproduce a simulation study as a CSV table of replicated runs.
    Benchmark {
        /// Study name: sim1-a1, sim1-b1, sim2 or sim3
        study: String,
        /// Replicates per row (default 10)
        #[arg(long)]
        replicates: Option<usize>,
        /// Use publication-scale replicate counts (100 for sim1/sim2, 30 for sim3)
        #[arg(long)]
        full: bool,
        /// Worker threads for replicate-level parallelism (default: all cores)
        #[arg(long)]
        jobs: Option<usize>,
        /// RNG seed (default: MVCWM_SEED env var, else 0)
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path (default: <study>.csv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two label files (unit,label CSV) and print ARI and the
    /// misclassification rate.
    Evaluate {
        /// Predicted labels
        pred: PathBuf,
        /// Reference labels
        truth: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Cwm,
    Fmr,
    Mmn,
}

impl ModelArg {
    fn kind(self) -> ModelKind {
        match self {
            ModelArg::Cwm => ModelKind::MnCwm,
            ModelArg::Fmr => ModelKind::MnFmr,
            ModelArg::Mmn => ModelKind::MmnCwm,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV (long format: unit,role,row,col,value)
    data: PathBuf,
    /// Model family to fit
    #[arg(long, value_enum, default_value = "cwm")]
    model: ModelArg,
    /// Inclusive range of component counts, e.g. 1..5 or a single value
    #[arg(long, default_value = "1..5")]
    g_range: String,
    /// RNG seed (default: MVCWM_SEED env var, else 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Report path base; writes <base>.csv and <base>.json
    #[arg(long)]
    report: Option<PathBuf>,
    /// Persist the chosen model as JSON
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Relative log-likelihood convergence tolerance
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Iteration cap per fit
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
}

/// Formats a float with 6 significant digits, deterministically.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-4..=8).contains(&mag) {
        format!("{v:.5e}")
    } else {
        let prec = (5 - mag).max(0) as usize;
        format!("{v:.prec$}")
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("MVCWM_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(DEFAULT_SEED)
}

/// Parses "a..b" (inclusive) or a single integer; components must be >= 1.
fn parse_g_range(s: &str) -> Option<Vec<usize>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().ok()?;
        let b: usize = b.trim().trim_start_matches('=').parse().ok()?;
        if a == 0 || a > b {
            return None;
        }
        Some((a..=b).collect())
    } else {
        let g: usize = s.parse().ok()?;
        if g == 0 {
            return None;
        }
        Some(vec![g])
    }
}

fn cmd_simulate(name: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let spec = scenario::<f64>(name, n, seed)?;
    let data = generate_dataset(&spec);
    save_dataset(out, &data)?;
    println!(
        "wrote {} units of scenario {} (p={}, q={}, r={}) to {}",
        data.n(),
        spec.name,
        data.p(),
        data.q(),
        data.r(),
        out.display()
    );
    Ok(())
}

fn coefficient_tables<T: crate::scalar::Scalar>(params: &FitParams<T>) -> serde_json::Value {
    let mat = |m: &nalgebra::DMatrix<T>| {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)].to_f64()).collect())
            .collect();
        serde_json::json!(rows)
    };
    match params {
        FitParams::Cwm(p) => serde_json::json!(p
            .components
            .iter()
            .map(|c| serde_json::json!({"pi": c.pi.to_f64(), "bstar": mat(&c.bstar), "m": mat(&c.m)}))
            .collect::<Vec<_>>()),
        FitParams::Fmr(p) => serde_json::json!(p
            .iter()
            .map(|c| serde_json::json!({"pi": c.pi.to_f64(), "bstar": mat(&c.bstar)}))
            .collect::<Vec<_>>()),
        FitParams::Mmn(p) => serde_json::json!(p
            .components
            .iter()
            .map(|c| serde_json::json!({"pi": c.pi.to_f64(), "c": mat(&c.c)}))
            .collect::<Vec<_>>()),
    }
}

fn selection_report_csv(sel: &SelectionResult<f64>) -> String {
    let mut out =
        String::from("g,loglik,n_params,bic,spurious,reasons,converged,iterations,selected\n");
    for c in &sel.per_g {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.g,
            fmt_sig6(c.loglik),
            c.n_params,
            fmt_sig6(c.bic),
            c.spurious,
            c.reasons.join(";"),
            c.fit.converged,
            c.fit.iterations,
            (c.g == sel.best_g) as u8
        ));
    }
    out
}

fn cmd_fit(args: &FitArgs, g_range: &[usize]) -> Result<()> {
    let data = load_dataset::<f64>(&args.data)?;
    let max_g = *g_range.last().unwrap();
    if data.n() <= max_g {
        return Err(Error::DegenerateData(format!(
            "need more than {max_g} units to fit G = {max_g} components, got {}",
            data.n()
        )));
    }
    let seed = resolve_seed(args.seed);
    let config = FitConfig {
        tol: args.tol,
        max_iter: args.max_iter,
    };
    let kind = args.model.kind();
    let sel = select_model(&data, g_range, kind, &config, seed)?;
    let best = sel.best();

    let mut cluster_sizes = vec![0usize; best.g];
    for &l in &best.fit.map_labels {
        cluster_sizes[l] += 1;
    }
    let metrics = data.labels().map(|truth| {
        (
            ari(truth, &best.fit.map_labels),
            misclassification_rate(truth, &best.fit.map_labels),
        )
    });

    println!(
        "model={} best_G={} loglik={} BIC={} spurious={}{}",
        kind.as_str(),
        sel.best_g,
        fmt_sig6(best.loglik),
        fmt_sig6(best.bic),
        sel.all_spurious,
        match metrics {
            Some((a, e)) => format!(" ARI={} eta={}%", fmt_sig6(a), fmt_sig6(e)),
            None => String::new(),
        }
    );
    for c in &sel.per_g {
        println!(
            "  G={}: loglik={} params={} BIC={}{}",
            c.g,
            fmt_sig6(c.loglik),
            c.n_params,
            fmt_sig6(c.bic),
            if c.spurious {
                format!(" [spurious: {}]", c.reasons.join("; "))
            } else {
                String::new()
            }
        );
    }
    for (g, e) in &sel.failed_g {
        println!("  G={g}: failed ({e})");
    }

    if let Some(base) = &args.report {
        let csv_path = base.with_extension("csv");
        let json_path = base.with_extension("json");
        atomic_write(&csv_path, selection_report_csv(&sel).as_bytes())?;
        let report = serde_json::json!({
            "model_kind": kind.as_str(),
            "n": data.n(),
            "dims": {"p": data.p(), "q": data.q(), "r": data.r()},
            "seed": seed,
            "best_g": sel.best_g,
            "all_spurious": sel.all_spurious,
            "per_g": sel.per_g.iter().map(|c| serde_json::json!({
                "g": c.g,
                "loglik": c.loglik,
                "n_params": c.n_params,
                "bic": c.bic,
                "spurious": c.spurious,
                "reasons": c.reasons,
                "converged": c.fit.converged,
                "iterations": c.fit.iterations,
                "strategy_report": c.strategy_report.iter().map(|s| serde_json::json!({
                    "strategy": s.strategy.as_str(),
                    "attempts": s.attempts,
                    "failures": s.failures,
                    "best_loglik": s.best_loglik,
                })).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "failed_g": sel.failed_g.iter().map(|(g, e)| serde_json::json!({"g": g, "error": e})).collect::<Vec<_>>(),
            "cluster_sizes": cluster_sizes,
            "components": coefficient_tables(&best.fit.params),
            "ari": metrics.map(|(a, _)| a),
            "eta_percent": metrics.map(|(_, e)| e),
        });
        atomic_write(&json_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    if let Some(path) = &args.model_out {
        save_model(path, &best.fit, (data.p(), data.q(), data.r()))?;
    }
    Ok(())
}

struct BenchRow {
    scenario: &'static str,
    n: usize,
    model: ModelKind,
    plan: FitMode,
}

fn study_rows(study: &str) -> Option<(Vec<BenchRow>, usize)> {
    // (rows, full-scale replicate count)
    let sel = |hi: usize| FitMode::Select((1..=hi).collect());
    match study {
        "sim1-a1" | "sim1-b1" => {
            let sc: &'static str = if study == "sim1-a1" { "A1" } else { "B1" };
            Some((
                vec![
                    BenchRow {
                        scenario: sc,
                        n: 200,
                        model: ModelKind::MnCwm,
                        plan: FitMode::Direct(4),
                    },
                    BenchRow {
                        scenario: sc,
                        n: 200,
                        model: ModelKind::MnCwm,
                        plan: sel(5),
                    },
                ],
                100,
            ))
        }
        "sim2" => {
            let mut rows = Vec::new();
            for sc in ["A2", "B2", "C2"] {
                for model in [ModelKind::MnCwm, ModelKind::MnFmr] {
                    rows.push(BenchRow {
                        scenario: sc,
                        n: 200,
                        model,
                        plan: sel(3),
                    });
                }
            }
            Some((rows, 100))
        }
        "sim3" => {
            const CELLS: [&str; 9] = [
                "S3-D2-G2", "S3-D2-G3", "S3-D2-G4", "S3-D3-G2", "S3-D3-G3", "S3-D3-G4",
                "S3-D4-G2", "S3-D4-G3", "S3-D4-G4",
            ];
            let mut rows = Vec::new();
            for sc in CELLS {
                for model in [ModelKind::MnCwm, ModelKind::MmnCwm] {
                    rows.push(BenchRow {
                        scenario: sc,
                        n: 200,
                        model,
                        plan: sel(5),
                    });
                }
            }
            Some((rows, 30))
        }
        _ => None,
    }
}

fn cmd_benchmark(
    study: &str,
    replicates: Option<usize>,
    full: bool,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (rows, full_r) = study_rows(study).ok_or_else(|| Error::UnknownScenario(study.into()))?;
    let r = replicates.unwrap_or(if full { full_r } else { 10 });
    let config = FitConfig::default();
    let mut csv = String::from(
        "study,scenario,n,model,plan,replicates,failures,mean_ari,mean_eta_percent,true_g_hits,max_abs_bias,max_mse\n",
    );
    for row in &rows {
        let spec = scenario::<f64>(row.scenario, row.n, seed)?;
        let plan = FitPlan {
            kind: row.model,
            mode: row.plan.clone(),
        };
        let summary = replicate_study(&spec, r, &plan, &config, seed);
        let plan_str = match &row.plan {
            FitMode::Direct(g) => format!("direct-G{g}"),
            FitMode::Select(range) => format!(
                "select-{}..{}",
                range.first().unwrap(),
                range.last().unwrap()
            ),
        };
        let max_abs_bias = summary
            .bias
            .as_ref()
            .map(|b| b.iter().map(|m| m.amax()).fold(0.0f64, f64::max));
        let max_mse = summary
            .mse
            .as_ref()
            .map(|b| b.iter().map(|m| m.amax()).fold(0.0f64, f64::max));
        let opt = |v: Option<f64>| v.map(fmt_sig6).unwrap_or_default();
        let line = format!(
            "{study},{},{},{},{plan_str},{},{},{},{},{},{},{}\n",
            row.scenario,
            row.n,
            row.model.as_str(),
            summary.replicates,
            summary.failures,
            fmt_sig6(summary.mean_ari),
            fmt_sig6(summary.mean_eta),
            summary
                .true_g_hits
                .map(|h| h.to_string())
                .unwrap_or_default(),
            opt(max_abs_bias),
            opt(max_mse),
        );
        print!("{line}");
        csv.push_str(&line);
    }
    atomic_write(out, csv.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_evaluate(pred: &Path, truth: &Path) -> Result<()> {
    let pred = load_labels(pred)?;
    let truth = load_labels(truth)?;
    if pred.len() != truth.len() {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "label files disagree on length ({} vs {})",
                pred.len(),
                truth.len()
            ),
        });
    }
    println!("ari,eta_percent");
    println!(
        "{},{}",
        fmt_sig6(ari(&truth, &pred)),
        fmt_sig6(misclassification_rate(&truth, &pred))
    );
    Ok(())
}

/// Parses argv and runs the requested command, returning the process exit
/// code (0 success, 1 usage, 2 runtime/numerical failure).
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version as "errors" with success status
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result: Result<()> = match &cli.cmd {
        Cmd::Simulate {
            scenario: name,
            n,
            seed,
            out,
        } => cmd_simulate(name, *n, resolve_seed(*seed), out),
        Cmd::Fit(args) | Cmd::Select(args) => match parse_g_range(&args.g_range) {
            Some(range) => cmd_fit(args, &range),
            None => {
                eprintln!("error: --g-range must be a..b (inclusive, a >= 1) or a single integer");
                return 1;
            }
        },
        Cmd::Benchmark {
            study,
            replicates,
            full,
            jobs,
            seed,
            out,
        } => {
            if let Some(j) = jobs {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(*j)
                    .build_global();
            }
            let out = out
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("{study}.csv")));
            cmd_benchmark(study, *replicates, *full, resolve_seed(*seed), &out)
        }
        Cmd::Evaluate { pred, truth } => cmd_evaluate(pred, truth),
    };
    match result {
        Ok(()) => 0,
        Err(Error::UnknownScenario(s)) => {
            eprintln!("error: unknown scenario or study {s:?}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
