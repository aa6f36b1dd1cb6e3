//! File-based command-line front end. All heavy lifting lives in the
//! library; this binary parses arguments, reads/writes files and prints
//! short summaries.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use glmm::harness::{
    generate_dataset, grid_search, run_method_k, run_scenario, ExperimentConfig, GenerateSpec,
    GridSearchConfig, Method, MethodHyper, Scenario,
};
use glmm::io;
use glmm::sampling::Seed;
use glmm::{EdgeMask, Error, KernelSpec, Result};

/// Joint clustering of graph signals and per-cluster graph inference.
#[derive(Parser)]
#[command(name = "glmm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixture dataset (signals, labels, truth graphs).
    Generate(GenerateArgs),
    /// Fit a method to a dataset directory.
    Fit(FitArgs),
    /// Cluster new signals with a stored model.
    Predict(PredictArgs),
    /// Evaluate a stored model against a dataset's ground truth.
    Eval(EvalArgs),
    /// Run a full experiment scenario with repetitions.
    Reproduce(ReproduceArgs),
    /// Sweep solver hyperparameters over a scenario protocol.
    Gridsearch(GridsearchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Vertex count.
    #[arg(long, default_value_t = 15)]
    n: usize,
    /// Signal count.
    #[arg(long, default_value_t = 150)]
    m: usize,
    /// ER edge probability.
    #[arg(long, default_value_t = 0.7)]
    p: f64,
    /// Standard deviation of the ground-truth mean entries.
    #[arg(long, default_value_t = 0.5)]
    mean_sigma: f64,
    /// Comma-separated mixing weights, e.g. 0.5,0.5.
    #[arg(long, default_value = "0.5,0.5")]
    alpha: String,
    /// Signal model: smooth or heat.
    #[arg(long, default_value = "smooth")]
    kernel: String,
    /// Diffusion parameter (heat kernel only).
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for signals.csv, labels.csv, spec.json, graph_<k>.csv.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset directory (signals.csv plus optional labels.csv/spec.json).
    #[arg(long)]
    data: PathBuf,
    /// glmm, ghmm, gmm or kmeans_gl.
    #[arg(long)]
    method: String,
    /// Cluster count; defaults to the dataset's labels/spec.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Log-degree barrier weight of the smooth solver.
    #[arg(long)]
    beta1: Option<f64>,
    /// Frobenius weight of the smooth solver.
    #[arg(long)]
    beta2: Option<f64>,
    /// l1 weight of the heat solver.
    #[arg(long)]
    beta: Option<f64>,
    /// Model diffusion parameter for ghmm fits.
    #[arg(long)]
    fit_tau: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Pick restarts by training-label NMSE instead of the objective.
    #[arg(long, default_value_t = false)]
    select_by_labels: bool,
    /// Optional dense 0/1 CSV of allowed edges (mGLMM).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Stored model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Signals CSV to cluster.
    #[arg(long)]
    signals: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory with labels.csv (and spec.json for graph metrics).
    #[arg(long)]
    data: PathBuf,
    /// Where to write metrics.json (also printed to stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// table1, table2, tau_sweep, noisy_labels, wishart_noise, wishart_dims.
    #[arg(long)]
    scenario: Option<String>,
    /// JSON config file (overridden by the flags below).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of glmm,ghmm,gmm,kmeans_gl.
    #[arg(long)]
    methods: Option<String>,
    /// Select restarts by training-label NMSE.
    #[arg(long, default_value_t = false)]
    select_by_labels: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GridsearchArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// nmse (minimized) or f_mean (maximized).
    #[arg(long, default_value = "f_mean")]
    metric: String,
    /// Comma-separated grid, e.g. 10,30,100.
    #[arg(long)]
    beta1_grid: Option<String>,
    #[arg(long)]
    beta2_grid: Option<String>,
    #[arg(long)]
    beta_grid: Option<String>,
    #[arg(long, short)]
    output: PathBuf,
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad number {tok:?}: {e}")))
        })
        .collect()
}

/// Resolve an output path against GLMM_OUTPUT_ROOT when it is relative.
fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("GLMM_OUTPUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn kernel_from(name: &str, tau: f64) -> Result<KernelSpec> {
    match name {
        "smooth" => Ok(KernelSpec::Smooth),
        "heat" => Ok(KernelSpec::Heat { tau }),
        other => Err(Error::InvalidInput(format!(
            "unknown kernel {other:?} (expected smooth or heat)"
        ))),
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let alpha = parse_f64_list(&args.alpha)?;
    let spec = GenerateSpec {
        n: args.n,
        m: args.m,
        p: args.p,
        mean_sigma: args.mean_sigma,
        alpha,
        kernel: kernel_from(&args.kernel, args.tau)?,
    };
    let data = generate_dataset(&spec, Seed(args.seed))?;
    let out = resolve_output(&args.output);
    io::write_dataset(&data, &out)?;
    println!(
        "wrote {} signals of dimension {} to {}",
        data.m(),
        data.n(),
        out.display()
    );
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let data_dir = &args.data;
    let data = io::read_dataset(data_dir)?;
    let method = Method::from_str(&args.method)?;

    let mut hyper = MethodHyper::default();
    if let Some(b1) = args.beta1 {
        hyper.smooth.beta1 = b1;
    }
    if let Some(b2) = args.beta2 {
        hyper.smooth.beta2 = b2;
    }
    if let Some(b) = args.beta {
        hyper.heat.beta = b;
    }
    if let Some(tau) = args.fit_tau {
        hyper.fit_tau = tau;
    }
    if let Some(eps) = args.epsilon {
        hyper.epsilon = eps;
    }
    if let Some(r) = args.restarts {
        hyper.restarts = r;
    }
    if let Some(it) = args.max_iterations {
        hyper.max_iterations = it;
    }

    let k = args
        .k
        .or_else(|| data.labels.as_ref().map(|l| l.k))
        .or_else(|| data.spec.as_ref().map(|s| s.k()))
        .ok_or_else(|| {
            Error::InvalidInput("pass --k when the dataset has no labels or spec".into())
        })?;

    let mask = args
        .mask
        .as_ref()
        .map(|path| -> Result<EdgeMask> {
            let raw = io::read_matrix_csv(path)?;
            EdgeMask::from_allowed(raw.mapv(|v| v != 0.0))
        })
        .transpose()?;
    // run_method_k drives solvers through MethodHyper; an edge mask needs
    // the mixture path, so thread it via a direct fit when present
    let outcome = if let Some(mask) = mask {
        if method != Method::Glmm && method != Method::Ghmm {
            return Err(Error::InvalidInput("--mask applies to glmm/ghmm only".into()));
        }
        let kernel = if method == Method::Glmm {
            KernelSpec::Smooth
        } else {
            KernelSpec::Heat { tau: hyper.fit_tau }
        };
        let mut config = hyper.fit_config(k, kernel);
        config.mask = Some(mask);
        let model = glmm::em::fit(&data, &config, Seed(args.seed), None)?;
        let graphs = model.learned_graphs().into_iter().map(Some).collect();
        glmm::harness::MethodOutcome {
            gamma: model.gamma.clone(),
            graphs: Some(graphs),
            model_file: io::ModelFile::from_fitted(
                &model,
                &method.to_string(),
                serde_json::to_value(&hyper)?,
            ),
        }
    } else {
        let truth_edge_counts: Option<Vec<usize>> = data
            .spec
            .as_ref()
            .map(|s| s.graphs().iter().map(|g| g.edge_count()).collect());
        run_method_k(
            &data,
            k,
            method,
            &hyper,
            Seed(args.seed),
            args.select_by_labels,
            None,
            truth_edge_counts.as_deref(),
        )?
    };

    let out = resolve_output(&args.output);
    std::fs::create_dir_all(&out)?;
    io::write_model_json(&outcome.model_file, &out.join("model.json"))?;

    // EM / objective trace
    {
        let mut wtr = csv::Writer::from_path(out.join("em_trace.csv"))?;
        wtr.write_record(["iteration", "objective"])?;
        for (i, v) in outcome.model_file.objective_trace.iter().enumerate() {
            wtr.write_record([i.to_string(), format!("{v}")])?;
        }
        wtr.flush()?;
    }

    if data.labels.is_some() {
        let report = glmm::harness::evaluate_outcome(&outcome, &data)?;
        io::write_metrics_json(&report, &out.join("metrics.json"))?;
        println!(
            "{}: NMSE {:.3}%{}",
            method,
            report.clustering_nmse_percent,
            report
                .mean_f()
                .map(|f| format!(", mean F {f:.3}"))
                .unwrap_or_default()
        );
    } else {
        println!("{}: fitted {} clusters on {} signals", method, k, data.m());
    }
    io::write_responsibilities_csv(&outcome.gamma, &out.join("responsibilities.csv"))?;
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = io::read_model_json(&args.model)?;
    let signals = io::read_signals_csv(&args.signals)?;
    let gamma = model.predict(&signals)?;
    let out = resolve_output(&args.output);
    std::fs::create_dir_all(&out)?;
    io::write_responsibilities_csv(&gamma, &out.join("responsibilities.csv"))?;
    io::write_labels_csv(&gamma.hard_labels(), &out.join("predicted_labels.csv"))?;
    println!(
        "clustered {} signals into {} clusters -> {}",
        signals.nrows(),
        model.k,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = io::read_model_json(&args.model)?;
    let data = io::read_dataset(&args.data)?;
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("eval needs labels.csv in the dataset".into()))?;
    let gamma = model.predict(&data.signals)?;

    let truth_graphs = data.spec.as_ref().map(|s| s.graphs()).unwrap_or_default();
    let report = if truth_graphs.is_empty() {
        glmm::metrics::MetricReport {
            clustering_nmse_percent: glmm::metrics::clustering_nmse(&gamma, labels)?,
            per_graph_f: vec![],
            aligned_permutation: glmm::metrics::align_clusters(&gamma, labels)?,
        }
    } else {
        let learned = if model.method == "gmm" {
            let counts: Vec<usize> = truth_graphs.iter().map(|g| g.edge_count()).collect();
            model
                .gmm_precisions()?
                .iter()
                .zip(&counts)
                .map(|(p, &count)| {
                    glmm::baselines::graph_from_precision(p, count).map(Some)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            model.learned_graphs()?
        };
        glmm::metrics::evaluate(&gamma, labels, &learned, &truth_graphs)?
    };

    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = &args.output {
        io::write_metrics_json(&report, &resolve_output(path))?;
    }
    Ok(())
}

fn cmd_reproduce(args: &ReproduceArgs) -> Result<()> {
    let mut config = match (&args.config, &args.scenario) {
        (Some(path), _) => ExperimentConfig::from_json_file(path)?,
        (None, Some(name)) => ExperimentConfig::defaults(Scenario::from_str(name)?),
        (None, None) => {
            return Err(Error::InvalidInput("pass --scenario or --config".into()));
        }
    };
    if let Some(name) = &args.scenario {
        let parsed = Scenario::from_str(name)?;
        if args.config.is_some() && parsed != config.scenario {
            return Err(Error::InvalidInput(
                "--scenario disagrees with the config file".into(),
            ));
        }
    }
    if let Some(reps) = args.repetitions {
        config.repetitions = reps;
    }
    if let Some(seed) = args.seed {
        config.base_seed = seed;
    }
    if let Some(methods) = &args.methods {
        config.methods = methods
            .split(',')
            .map(|tok| Method::from_str(tok.trim()))
            .collect::<Result<_>>()?;
    }
    if args.select_by_labels {
        config.select_by_labels = true;
    }
    if let Some(out) = &args.output {
        config.output_dir = out.clone();
    }
    config.output_dir = resolve_output(&config.output_dir);

    let table = run_scenario(&config)?;
    let summary = table.summarize();
    std::fs::create_dir_all(&config.output_dir)?;
    table.write_csv(&config.output_dir.join("results.csv"))?;
    summary.write_json(&config.output_dir.join("summary.json"))?;
    std::fs::write(
        config.output_dir.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;

    for entry in &summary.entries {
        println!(
            "{} {}={} {}: mean {:.4} (std {:.4}, n={})",
            entry.method, entry.param_name, entry.param_value, entry.metric, entry.mean,
            entry.std, entry.count
        );
    }
    if !summary.failures.is_empty() {
        eprintln!("{} failed repetitions:", summary.failures.len());
        for failure in &summary.failures {
            eprintln!("  {failure}");
        }
    }
    println!("results -> {}", config.output_dir.display());
    Ok(())
}

fn cmd_gridsearch(args: &GridsearchArgs) -> Result<()> {
    let scenario = Scenario::from_str(&args.scenario)?;
    let method = Method::from_str(&args.method)?;
    let mut search = GridSearchConfig::defaults(scenario, method);
    search.repetitions = args.repetitions;
    search.base_seed = args.seed;
    search.metric = args.metric.clone();
    if let Some(grid) = &args.beta1_grid {
        search.beta1_grid = parse_f64_list(grid)?;
    }
    if let Some(grid) = &args.beta2_grid {
        search.beta2_grid = parse_f64_list(grid)?;
    }
    if let Some(grid) = &args.beta_grid {
        search.beta_grid = parse_f64_list(grid)?;
    }

    let result = grid_search(&search)?;
    let out = resolve_output(&args.output);
    std::fs::create_dir_all(&out)?;
    result.write_csv(&out.join("grid.csv"))?;
    std::fs::write(
        out.join("best.json"),
        serde_json::to_string_pretty(&result.best)?,
    )?;
    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x}"));
    println!(
        "best: beta1={} beta2={} beta={} {}={:.4} over {} values",
        fmt_opt(result.best.beta1),
        fmt_opt(result.best.beta2),
        fmt_opt(result.best.beta),
        result.best.metric,
        result.best.mean,
        result.best.count
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Reproduce(args) => cmd_reproduce(args),
        Command::Gridsearch(args) => cmd_gridsearch(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
