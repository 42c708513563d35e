use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use missforest::estimator::{self, EstimateOptions, EstimationError, MomentSpec};
use missforest::io::{self, set_text};
use missforest::sim::{self, BenchGraph, DgpId, EstimatorKind, Task};
use missforest::{identify, IdReport, MDag};

#[derive(Parser)]
#[command(name = "missforest", version, about = "Identification and estimation under graphical missing-data models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the identification forest of a graph.
    Identify {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Estimate a functional from incomplete data.
    Estimate {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// mean:X3, linreg:X3~X1+X2+X1*X2+X2^2 or cfmean:X2=1->X3|adj=X1
        #[arg(long)]
        moment: String,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Lower bound applied to fitted propensities.
        #[arg(long)]
        clamp: Option<f64>,
    },
    /// Run a Monte Carlo study on a benchmark design.
    Simulate {
        #[arg(long)]
        dgp: BenchGraph,
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        reps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, value_delimiter = ',', default_value = "tree,cc")]
        estimators: Vec<EstimatorKind>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        per_rep: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { code, error }
}

const PARSE: u8 = 2;
const NOT_IDENTIFIED: u8 = 3;
const NUMERIC: u8 = 4;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MISSFOREST_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Identify { graph, json } => run_identify(&graph, json.as_deref()),
        Command::Estimate { graph, data, moment, json, clamp } => run_estimate(&graph, &data, &moment, json.as_deref(), clamp),
        Command::Simulate { dgp, task, n, reps, seed, parallel, estimators, json, per_rep } => {
            run_simulate(DgpId::new(dgp, task), n, reps, seed, parallel, &estimators, json.as_deref(), per_rep.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn read_graph(path: &Path) -> Result<MDag, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(fail(PARSE))?;
    io::parse_graph(&text).with_context(|| format!("parsing {}", path.display())).map_err(fail(PARSE))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(fail(PARSE))
}

fn print_report(report: &IdReport) {
    let order: Vec<String> = report.order.iter().map(|i| format!("R{i}")).collect();
    println!("order: {}", order.join(" "));
    for k in 1..=report.k {
        let tree = report.tree(k).map_or("-".to_string(), |t| t.signature());
        let status = if report.is_identified(k) { "identified" } else { "not identified" };
        println!("R{k}: {status}, tree {tree}");
        if let Some(p) = report.profiles.get(&k) {
            println!("  S^x {}  S~ {}  S^r {}  S {}", set_text(&p.s_x), set_text(&p.s_pre), set_text(&p.s_r), set_text(&p.s_full));
        }
        for v in report.variants.get(&k).into_iter().flatten() {
            println!("  variant {}: S~ {}  S^r {}  S {}", v.tree.signature(), set_text(&v.profile.s_pre), set_text(&v.profile.s_r), set_text(&v.profile.s_full));
        }
    }
    println!("D: {}", set_text(&report.not_identified));
    println!("target law identified: {}", report.target_law_identified);
}

fn run_identify(graph: &Path, json: Option<&Path>) -> Result<(), Failure> {
    let g = read_graph(graph)?;
    let report = identify(&g);
    print_report(&report);
    if let Some(path) = json {
        write_text(path, &io::emit(&io::report_json(&report, &g)))?;
    }
    Ok(())
}

fn estimation_code(e: &EstimationError) -> u8 {
    match e {
        EstimationError::NotIdentifiedFunctional(_) => NOT_IDENTIFIED,
        EstimationError::InvalidMoment(_) | EstimationError::DimensionMismatch(_) | EstimationError::MissingParentValue { .. } => PARSE,
        _ => NUMERIC,
    }
}

fn run_estimate(graph: &Path, data: &Path, moment: &str, json: Option<&Path>, clamp: Option<f64>) -> Result<(), Failure> {
    let g = read_graph(graph)?;
    let moment: MomentSpec = moment.parse().map_err(|e: String| fail(PARSE)(anyhow::anyhow!("invalid moment: {e}")))?;
    moment.validate(g.k()).map_err(|e| fail(PARSE)(anyhow::anyhow!("invalid moment: {e}")))?;
    if let Some(c) = clamp {
        if !(c > 0.0 && c < 1.0) {
            return Err(fail(PARSE)(anyhow::anyhow!("clamp must lie in (0, 1), got {c}")));
        }
    }
    let data = io::load_csv(data, g.k()).with_context(|| format!("loading {}", data.display())).map_err(fail(PARSE))?;
    log::info!("{} rows, {} variables", data.n(), data.k());
    let report = identify(&g);
    let result = estimator::estimate(&g, &report, &data, &moment, &EstimateOptions { clamp }).map_err(|e| {
        let code = estimation_code(&e);
        fail(code)(anyhow::Error::new(e))
    })?;
    println!("moment: {}", result.moment);
    println!("closure: {}", set_text(&result.closure_set));
    println!("{:<14} {:>12} {:>12} {:>10} {:>10}", "parameter", "estimate", "std.err", "z", "p");
    for (j, name) in result.param_names.iter().enumerate() {
        let w = result.wald(j);
        println!("{:<14} {:>12.6} {:>12.6} {:>10.3} {:>10.4}", name, result.theta_hat[j], result.se(j), w.z, w.p_value);
    }
    println!("n = {}, effective sample size = {:.1}", result.n, result.diagnostics.effective_sample_size);
    if let Some(path) = json {
        write_text(path, &io::emit(&io::estimation_json(&result)))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_simulate(
    id: DgpId,
    n: usize,
    reps: usize,
    seed: u64,
    workers: usize,
    estimators: &[EstimatorKind],
    json: Option<&Path>,
    per_rep: Option<&Path>,
) -> Result<(), Failure> {
    if n == 0 || reps == 0 || workers == 0 {
        return Err(fail(PARSE)(anyhow::anyhow!("--n, --reps and --parallel must be positive")));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().context("starting worker pool").map_err(fail(NUMERIC))?;
    let out = pool.install(|| sim::monte_carlo(id, estimators, n, reps, seed));
    println!(
        "{:<14} {:<6} {:<10} {:>12} {:>10} {:>10} {:>10} {:>10} {:>9} {:>8}",
        "estimator", "graph", "task", "parameter", "bias", "rmse", "sd", "mean se", "cover %", "fails"
    );
    for s in &out.summaries {
        println!(
            "{:<14} {:<6} {:<10} {:>12} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9.1} {:>8}",
            s.estimator, s.graph.to_string(), s.task.to_string(), s.parameter, s.bias, s.rmse, s.empirical_sd, s.mean_se, s.coverage_pct, s.failures
        );
        if let Some(t) = s.type_i_error {
            println!("{:<14} type-I error of the null coefficient: {:.3}", "", t);
        }
    }
    if let Some(path) = json {
        write_text(path, &io::emit(&io::summaries_json(&out.summaries)))?;
    }
    if let Some(path) = per_rep {
        let file = std::fs::File::create(path).with_context(|| format!("writing {}", path.display())).map_err(fail(PARSE))?;
        io::write_records_csv(&out.records, file).map_err(|e| fail(PARSE)(e.into()))?;
    }
    Ok(())
}
