//! Command-line front end: simulate benchmark data, fit the estimator
//! variants, predict at arbitrary times, evaluate bias and test error,
//! export variable importance and ranking stability tables.
//!
//! Every output file starts with a `# key = value` metadata header carrying
//! the tool version, the seed and the fully resolved configuration, so any
//! run can be reproduced exactly from its outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use longrf::em::{fit, select_alpha, FittedModel, Learner, MethodSpec};
use longrf::forest::{rank_by_importance, ForestParams};
use longrf::predict::load_queries;
use longrf::rng::derive_seed2;
use longrf::sim::{
    default_eval_grid, eval_design, fit_plain_forest, prediction_error, replicate_estimates,
    rf_prediction_error, simulate_dataset, squared_bias_report, stability_sweep, structure,
    Dimension, ReplicateEstimates, Scheme, SimulationConfig,
};
use longrf::{load_dataset, KernelSpec, LongitudinalDataset, Schema};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "longrf",
    version,
    about = "Mixed-effects random forests for high-dimensional longitudinal data"
)]
struct Cli {
    /// Worker threads for tree-level parallelism (default: LONGRF_THREADS or
    /// all cores). Results are identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark dataset (CSV) with its ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Fit one estimator variant to a dataset.
    Fit(FitArgs),
    /// Predict responses for a CSV of queries.
    Predict(PredictArgs),
    /// Replicate bias and test-error tables over simulated datasets.
    Evaluate(EvaluateArgs),
    /// Export permutation variable importance of a fitted forest model.
    Importance(ImportanceArgs),
    /// Importance-ranking stability against mtry and neighborhood size.
    Stability(StabilityArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DimArg {
    Low,
    High,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    #[value(alias = "non-stochastic", alias = "non_stochastic")]
    Nonstochastic,
    Stochastic,
}

impl From<SchemeArg> for Scheme {
    fn from(v: SchemeArg) -> Scheme {
        match v {
            SchemeArg::Nonstochastic => Scheme::NonStochastic,
            SchemeArg::Stochastic => Scheme::Stochastic,
        }
    }
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Covariate dimension scenario.
    #[arg(long, value_enum, default_value = "low")]
    dim: DimArg,
    /// Outcome scheme.
    #[arg(long, value_enum, default_value = "nonstochastic")]
    scheme: SchemeArg,
    /// Full-scale high-dimensional preset (p = 8000, groups of 266).
    #[arg(long)]
    full_scale: bool,
    /// Override the number of individuals.
    #[arg(long)]
    n: Option<usize>,
    /// Override the total number of covariates.
    #[arg(long)]
    p: Option<usize>,
    /// Override the size of each temporal group.
    #[arg(long)]
    group_size: Option<usize>,
}

impl ScenarioArgs {
    fn config(&self, seed: u64) -> Result<SimulationConfig> {
        let scheme = Scheme::from(self.scheme);
        let mut config = match (self.dim, self.full_scale) {
            (DimArg::Low, false) => SimulationConfig::low_dim(scheme, seed),
            (DimArg::Low, true) => bail!("--full-scale only applies to --dim high"),
            (DimArg::High, false) => SimulationConfig::high_dim(scheme, seed),
            (DimArg::High, true) => SimulationConfig::high_dim_full(scheme, seed),
        };
        if let Some(n) = self.n {
            config.n = n;
        }
        if let Some(p) = self.p {
            config.p = p;
        }
        if let Some(g) = self.group_size {
            config.group_size = g;
        }
        config.validate()?;
        Ok(config)
    }

    fn meta(&self, config: &SimulationConfig) -> Vec<String> {
        vec![
            format!(
                "dim = {}",
                match config.dimension {
                    Dimension::Low => "low",
                    Dimension::High => "high",
                }
            ),
            format!(
                "scheme = {}",
                match config.scheme {
                    Scheme::NonStochastic => "nonstochastic",
                    Scheme::Stochastic => "stochastic",
                }
            ),
            format!("n = {}", config.n),
            format!("p = {}", config.p),
            format!("group_size = {}", config.group_size),
        ]
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Replicate index to draw (the structure is shared across replicates).
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long)]
    seed: u64,
    /// Output dataset CSV.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar (JSON).
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct MethodArgs {
    /// mert | reemtree | merf | reemforest | smert | sreemtree | smerf | sreemforest
    #[arg(long)]
    method: String,
    /// none | bm | fbm:h=<v> | ou:alpha=<v>
    #[arg(long, default_value = "none")]
    kernel: String,
    /// Trees per forest inside the fitting loop.
    #[arg(long, default_value_t = 100)]
    trees: usize,
    /// Candidate split variables per node (default: p for trees, ⌈3p/4⌉ for
    /// forests).
    #[arg(long)]
    mtry: Option<usize>,
    /// Node-size floor (default: 5 for forests, 15 for standalone trees).
    #[arg(long)]
    min_node_size: Option<usize>,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
}

impl MethodArgs {
    fn spec(&self) -> Result<MethodSpec> {
        let kernel: KernelSpec = self.kernel.parse()?;
        let mut spec = MethodSpec::from_name(&self.method, kernel)?;
        spec.learner_params.n_trees = self.trees;
        spec.learner_params.mtry = self.mtry;
        if let Some(mns) = self.min_node_size {
            spec.learner_params.min_node_size = mns;
        }
        spec.em.max_iter = self.max_iter;
        spec.em.rel_tol = self.rel_tol;
        Ok(spec)
    }

    fn meta(&self, spec: &MethodSpec) -> Vec<String> {
        vec![
            format!("method = {}", spec.name()),
            format!("kernel = {}", spec.kernel),
            format!("trees = {}", spec.learner_params.n_trees),
            format!(
                "mtry = {}",
                spec.learner_params
                    .mtry
                    .map_or("auto".to_string(), |m| m.to_string())
            ),
            format!("min_node_size = {}", spec.learner_params.min_node_size),
            format!("max_iter = {}", spec.em.max_iter),
            format!("rel_tol = {}", spec.em.rel_tol),
        ]
    }
}

#[derive(Args)]
struct FitArgs {
    /// Input dataset CSV (long format).
    #[arg(long)]
    input: PathBuf,
    /// Optional key=value schema file renaming the CSV columns.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[command(flatten)]
    method: MethodArgs,
    /// Kernel-parameter grid for likelihood selection, e.g. `0.5,1,2`.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Vec<f64>,
    #[arg(long)]
    seed: u64,
    /// Fitted model output (JSON).
    #[arg(long)]
    model_out: PathBuf,
    /// Log-likelihood trace output (CSV `iteration,loglik`).
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Fitted model (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Query CSV (`id,time,z1..zq,x1..xp`).
    #[arg(long)]
    queries: PathBuf,
    /// Output CSV (`id,time,y_hat`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Comma-separated method list; `rf` is a plain forest baseline.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Kernel for the stochastic methods.
    #[arg(long, default_value = "bm")]
    kernel: String,
    /// Simulation replicates for the bias table.
    #[arg(long, default_value_t = 20)]
    replicates: u64,
    /// Train/test splits for the error table.
    #[arg(long, default_value_t = 20)]
    splits: usize,
    /// Held-out observations per individual in each split.
    #[arg(long, default_value_t = 2)]
    holdout: usize,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long)]
    mtry: Option<usize>,
    /// Node-size floor (default: 5 for forests, 15 for standalone trees).
    #[arg(long)]
    min_node_size: Option<usize>,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
    #[arg(long)]
    seed: u64,
    /// Bias table output (`method,bias2_f,bias2_B,bias2_gamma2,bias2_sigma2`).
    #[arg(long)]
    bias_out: PathBuf,
    /// Error table output (`method,split,test_mse`).
    #[arg(long)]
    mse_out: PathBuf,
}

#[derive(Args)]
struct ImportanceArgs {
    /// Fitted model (JSON); the mean model must be a forest.
    #[arg(long)]
    model: PathBuf,
    /// The dataset the model was fit on.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output CSV (`variable,importance`, descending).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StabilityArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    method: MethodArgs,
    /// mtry values to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    mtry_grid: Vec<usize>,
    /// Neighborhood sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8")]
    eta_grid: Vec<usize>,
    /// Consecutive ranking pairs per mtry value.
    #[arg(long, default_value_t = 5)]
    pairs: usize,
    /// Restrict scoring to the top-k ranked variables.
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long)]
    seed: u64,
    /// Output CSV (`eta,mtry,mean_score`).
    #[arg(long)]
    out: PathBuf,
}

fn meta_header(command: &str, seed: u64, extra: &[String]) -> Vec<String> {
    let mut lines = vec![
        format!("longrf {VERSION}"),
        format!("command = {command}"),
        format!("seed = {seed}"),
    ];
    lines.extend(extra.iter().cloned());
    lines
}

fn open_out(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create `{}`", path.display())
    })?))
}

fn write_comments<W: Write>(w: &mut W, lines: &[String]) -> Result<()> {
    for line in lines {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}

fn read_dataset(input: &Path, schema: Option<&Path>) -> Result<LongitudinalDataset> {
    let schema = match schema {
        Some(path) => Schema::parse(
            &std::fs::read_to_string(path)
                .with_context(|| format!("cannot read `{}`", path.display()))?,
        )?,
        None => Schema::default(),
    };
    let file = File::open(input).with_context(|| format!("cannot open `{}`", input.display()))?;
    Ok(load_dataset(BufReader::new(file), &schema)?)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let config = args.scenario.config(args.seed)?;
    let sim = simulate_dataset(&config, args.replicate)?;
    let mut meta = meta_header("simulate", args.seed, &args.scenario.meta(&config));
    meta.push(format!("replicate = {}", args.replicate));
    let mut out = open_out(&args.out)?;
    sim.dataset.write_csv(&mut out, &meta)?;
    out.flush()?;
    if let Some(truth_path) = &args.truth_out {
        let mut w = open_out(truth_path)?;
        serde_json::to_writer(&mut w, &sim.truth)?;
        w.flush()?;
    }
    println!(
        "simulated {} individuals, {} observations, p = {} -> {}",
        sim.dataset.n(),
        sim.dataset.total_obs(),
        sim.dataset.p(),
        args.out.display()
    );
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let dataset = read_dataset(&args.input, args.schema.as_deref())?;
    let spec = args.method.spec()?;
    let model = if args.alpha_grid.is_empty() {
        fit(&dataset, &spec, args.seed)?
    } else {
        let (alpha, model) = select_alpha(&dataset, &spec, &args.alpha_grid, args.seed)?;
        println!("selected kernel parameter {alpha}");
        model
    };
    let mut w = open_out(&args.model_out)?;
    model.to_json(&mut w)?;
    w.flush()?;
    if let Some(trace_path) = &args.trace_out {
        let mut meta = meta_header("fit", args.seed, &args.method.meta(&model.spec));
        meta.push(format!("input = {}", args.input.display()));
        let mut w = open_out(trace_path)?;
        model.write_trace_csv(&mut w, &meta)?;
        w.flush()?;
    }
    println!(
        "fit {}: {} iterations, converged = {}, loglik = {:.4}, sigma2 = {:.4}",
        model.method_name(),
        model.iterations,
        model.converged,
        model.loglik_trace.last().copied().unwrap_or(f64::NAN),
        model.vc.sigma2
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let file =
        File::open(&args.model).with_context(|| format!("cannot open `{}`", args.model.display()))?;
    let model = FittedModel::from_json(BufReader::new(file))?;
    let queries_file = File::open(&args.queries)
        .with_context(|| format!("cannot open `{}`", args.queries.display()))?;
    let queries = load_queries(BufReader::new(queries_file), model.p, model.q)?;
    let mut w = open_out(&args.out)?;
    let meta = meta_header(
        "predict",
        model.seed,
        &[
            format!("model = {}", args.model.display()),
            format!("method = {}", model.method_name()),
        ],
    );
    write_comments(&mut w, &meta)?;
    writeln!(w, "id,time,y_hat")?;
    for query in &queries {
        let y_hat = model.predict(query)?;
        writeln!(
            w,
            "{},{},{}",
            query.individual.as_deref().unwrap_or(""),
            query.time,
            y_hat
        )?;
    }
    w.flush()?;
    println!("wrote {} predictions -> {}", queries.len(), args.out.display());
    Ok(())
}

fn build_eval_spec(args: &EvaluateArgs, name: &str) -> Result<MethodSpec> {
    let kernel: KernelSpec = if name.starts_with('s') {
        args.kernel.parse()?
    } else {
        KernelSpec::None
    };
    let mut spec = MethodSpec::from_name(name, kernel)?;
    spec.learner_params.n_trees = args.trees;
    spec.learner_params.mtry = args.mtry;
    if let Some(mns) = args.min_node_size {
        spec.learner_params.min_node_size = mns;
    }
    spec.em.max_iter = args.max_iter;
    spec.em.rel_tol = args.rel_tol;
    Ok(spec)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if args.methods.is_empty() {
        bail!("--methods needs at least one entry");
    }
    let config = args.scenario.config(args.seed)?;
    let layout = structure(&config)?;
    let eval = eval_design(&config, &layout, &default_eval_grid())?;

    let mut meta = meta_header("evaluate", args.seed, &args.scenario.meta(&config));
    meta.push(format!("methods = {}", args.methods.join(",")));
    meta.push(format!("kernel = {}", args.kernel));
    meta.push(format!("replicates = {}", args.replicates));
    meta.push(format!("splits = {}", args.splits));
    meta.push(format!("holdout = {}", args.holdout));
    meta.push(format!("trees = {}", args.trees));

    let mut bias_out = open_out(&args.bias_out)?;
    write_comments(&mut bias_out, &meta)?;
    writeln!(bias_out, "method,bias2_f,bias2_B,bias2_gamma2,bias2_sigma2")?;

    let mut mse_out = open_out(&args.mse_out)?;
    write_comments(&mut mse_out, &meta)?;
    writeln!(mse_out, "method,split,test_mse")?;

    // the error table is computed on replicate 0's dataset
    let sim0 = simulate_dataset(&config, 0)?;

    for (mi, name) in args.methods.iter().enumerate() {
        let mi = mi as u64;
        if name == "rf" {
            // plain forest baseline: bias of f only, no variance components
            let mut mean_pred = nalgebra::DVector::zeros(eval.f_true.len());
            for m in 0..args.replicates {
                let sim = simulate_dataset(&config, m)?;
                let forest = fit_plain_forest(
                    &sim.dataset,
                    &ForestParams {
                        n_trees: args.trees,
                        mtry: args.mtry.unwrap_or_else(|| (config.p).div_ceil(3)),
                        min_node_size: args.min_node_size.unwrap_or(5),
                        bootstrap: true,
                        seed: derive_seed2(args.seed, 100 + mi, m),
                    },
                )?;
                mean_pred += forest.predict_rows(&eval.x)?;
            }
            mean_pred /= args.replicates as f64;
            let bias_f = (&mean_pred - &eval.f_true).map(|d| d * d).sum()
                / eval.f_true.len() as f64;
            writeln!(bias_out, "rf,{bias_f},NaN,NaN,NaN")?;

            let report = rf_prediction_error(
                &sim0.dataset,
                &ForestParams {
                    n_trees: args.trees,
                    mtry: args.mtry.unwrap_or_else(|| (config.p).div_ceil(3)),
                    min_node_size: args.min_node_size.unwrap_or(5),
                    bootstrap: true,
                    seed: 0,
                },
                args.splits,
                args.holdout,
                derive_seed2(args.seed, 200 + mi, 0),
            )?;
            for (s, mse) in report.per_split.iter().enumerate() {
                writeln!(mse_out, "rf,{s},{mse}")?;
            }
            println!("rf: bias2_f = {bias_f:.4}, mean test mse = {:.4}", report.overall_mse);
            continue;
        }

        let spec = build_eval_spec(&args, name)?;
        let mut reps: Vec<ReplicateEstimates> = Vec::with_capacity(args.replicates as usize);
        for m in 0..args.replicates {
            let sim = simulate_dataset(&config, m)?;
            let model = fit(&sim.dataset, &spec, derive_seed2(args.seed, 100 + mi, m))?;
            reps.push(replicate_estimates(&model, &eval)?);
        }
        let report = squared_bias_report(&reps, &config, &eval)?;
        writeln!(
            bias_out,
            "{},{},{},{},{}",
            spec.name(),
            report.f,
            report.b,
            report.gamma2,
            report.sigma2
        )?;

        let error = prediction_error(
            &sim0.dataset,
            &spec,
            args.splits,
            args.holdout,
            derive_seed2(args.seed, 200 + mi, 0),
        )?;
        for (s, mse) in error.per_split.iter().enumerate() {
            writeln!(mse_out, "{},{s},{mse}", spec.name())?;
        }
        println!(
            "{}: bias2_f = {:.4}, mean test mse = {:.4}",
            spec.name(),
            report.f,
            error.overall_mse
        );
    }
    bias_out.flush()?;
    mse_out.flush()?;
    Ok(())
}

fn cmd_importance(args: ImportanceArgs) -> Result<()> {
    let file =
        File::open(&args.model).with_context(|| format!("cannot open `{}`", args.model.display()))?;
    let model = FittedModel::from_json(BufReader::new(file))?;
    let forest = model
        .mean_model
        .as_forest()
        .ok_or_else(|| anyhow!("importance needs a forest-based model"))?;
    let dataset = read_dataset(&args.input, args.schema.as_deref())?;
    let ytilde = model.debiased_responses(&dataset)?;
    let vi = forest.variable_importance(&dataset.stacked_x(), &ytilde, args.seed)?;
    let order = rank_by_importance(&vi);

    let mut w = open_out(&args.out)?;
    let meta = meta_header(
        "importance",
        args.seed,
        &[
            format!("model = {}", args.model.display()),
            format!("method = {}", model.method_name()),
            format!("input = {}", args.input.display()),
        ],
    );
    write_comments(&mut w, &meta)?;
    writeln!(w, "variable,importance")?;
    for var in order {
        writeln!(w, "x{},{}", var + 1, vi[var])?;
    }
    w.flush()?;
    println!("wrote importance of {} variables -> {}", vi.len(), args.out.display());
    Ok(())
}

fn cmd_stability(args: StabilityArgs) -> Result<()> {
    let config = args.scenario.config(args.seed)?;
    let sim = simulate_dataset(&config, 0)?;
    let spec = args.method.spec()?;
    if spec.learner != Learner::Forest {
        bail!("the stability sweep needs a forest-based method");
    }
    let cells = stability_sweep(
        &sim.dataset,
        &spec,
        &args.mtry_grid,
        &args.eta_grid,
        args.pairs,
        args.top_k,
        args.seed,
    )?;
    let mut meta = meta_header("stability", args.seed, &args.scenario.meta(&config));
    meta.extend(args.method.meta(&spec));
    meta.push(format!("pairs = {}", args.pairs));
    meta.push(format!("top_k = {}", args.top_k));
    let mut w = open_out(&args.out)?;
    write_comments(&mut w, &meta)?;
    writeln!(w, "eta,mtry,mean_score")?;
    for cell in &cells {
        writeln!(w, "{},{},{}", cell.eta, cell.mtry, cell.mean_score)?;
    }
    w.flush()?;
    println!("wrote {} stability cells -> {}", cells.len(), args.out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("LONGRF_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Importance(args) => cmd_importance(args),
        Command::Stability(args) => cmd_stability(args),
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
