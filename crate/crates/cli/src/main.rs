//! `lkfs` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lkfs::clustering::{adjusted_rand_index, kmeans, rand_index, write_assignment};
use lkfs::dataio::{
    generate_synthetic, load_labels, load_matrix, minmax_scale, save_labels, save_matrix,
    variance_filter, ExpressionMatrix, LabelVector, Orientation,
};
use lkfs::evaluation::{
    pca_2d, projection_svg, red_score, write_projection, EvaluationReport, Method, SolutionDump,
};
use lkfs::pipeline::{emit_outputs, load_inputs, run_experiment_on, select_features, RunConfig};
use lkfs::ErrorKind;

#[derive(Parser)]
#[command(name = "lkfs", version, about = "Latent kernel feature selection")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LKFS_THREADS")]
    threads: Option<usize>,
    /// Emit log lines as JSON objects.
    #[arg(long, global = true)]
    log_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-class synthetic fixture.
    Synth(SynthArgs),
    /// Min-max scale and variance-filter a matrix.
    Preprocess(PreprocessArgs),
    /// Select features with one method.
    Select(SelectArgs),
    /// k-means on a (possibly feature-restricted) matrix.
    Cluster(ClusterArgs),
    /// RED and clustering scores of a feature subset.
    Evaluate(EvaluateArgs),
    /// Full repeated-resample experiment.
    Run(RunArgs),
    /// Pretty-print a report or solution file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    informative: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Matrix output (TSV, samples as rows).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "rows")]
    orientation: Orientation,
}

impl InputArgs {
    fn load(&self) -> Result<ExpressionMatrix> {
        Ok(load_matrix(&self.input, self.orientation)?)
    }
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Fraction of highest-variance features to keep.
    #[arg(long, default_value_t = 0.5)]
    keep: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// Preprocessed matrix.
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value = "lkfs")]
    method: Method,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// RunConfig JSON supplying autoencoder, kernel and baseline settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Solution JSON; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Feature names, one per line; all features when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Assignment TSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Feature names, one per line.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Projection table coloured by the first k.
    #[arg(long)]
    projection: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    orientation: Option<Orientation>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a previous run in the output directory.
    #[arg(long)]
    force: bool,
    /// Also write SVG scatter plots.
    #[arg(long)]
    svg: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn effective_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            c.input = Some(v.clone());
        }
        if let Some(v) = &self.labels {
            c.labels = Some(v.clone());
        }
        if let Some(v) = self.orientation {
            c.orientation = v;
        }
        if let Some(v) = &self.methods {
            c.methods = v.clone();
        }
        if let Some(v) = &self.p {
            c.p_grid = v.clone();
        }
        if let Some(v) = &self.k {
            c.k_grid = v.clone();
        }
        if let Some(v) = self.reps {
            c.preprocess.repetitions = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.output = v.clone();
        }
        c.svg |= self.svg;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.log_json);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Error chain joined by ": ". Library errors already print their causes,
/// so the walk stops at the first one.
fn render(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in e.chain() {
        parts.push(cause.to_string());
        if cause.downcast_ref::<lkfs::Error>().is_some() {
            break;
        }
    }
    parts.join(": ")
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<lkfs::Error>().map(lkfs::Error::kind) {
        Some(ErrorKind::Data) => 2,
        Some(ErrorKind::Numerical) => 3,
        _ => 1,
    }
}

fn init_logging(json: bool) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if json {
        builder.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().to_string().to_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    } else {
        builder.format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()));
    }
    builder.init();
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess_cmd(a),
        Command::Select(a) => select(a),
        Command::Cluster(a) => cluster(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => run(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let (x, labels) = generate_synthetic(a.n, a.d, a.informative, a.separation, a.seed)?;
    save_matrix(&x, &a.out)?;
    if let Some(path) = &a.labels_out {
        save_labels(&labels, path)?;
    }
    log::info!("wrote {} x {} matrix to {}", a.n, a.d, a.out.display());
    Ok(())
}

fn preprocess_cmd(a: PreprocessArgs) -> Result<()> {
    let x = a.input.load()?;
    let y = variance_filter(&minmax_scale(&x), a.keep)?;
    save_matrix(&y, &a.out)?;
    log::info!("kept {} of {} features", y.n_features(), x.n_features());
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn select(a: SelectArgs) -> Result<()> {
    let x = a.input.load()?;
    let config = match &a.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    let (_, _, dump) = select_features(&x, &config, a.method, a.seed, &[a.p])?
        .pop()
        .expect("one size requested");
    write_or_print(a.out.as_deref(), &to_json(&dump)?)
}

fn read_feature_list(path: &Path, x: &ExpressionMatrix) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|name| {
            x.feature_index(name).ok_or_else(|| {
                anyhow::Error::new(lkfs::Error::invalid_data(format!(
                    "feature {name:?} from {} is not in the matrix",
                    path.display()
                )))
            })
        })
        .collect()
}

fn restrict(x: &ExpressionMatrix, features: Option<&Path>) -> Result<ExpressionMatrix> {
    match features {
        Some(path) => Ok(x.select_features(&read_feature_list(path, x)?)?),
        None => Ok(x.clone()),
    }
}

#[derive(Serialize)]
struct ClusterScore {
    k: usize,
    inertia: f64,
    rand_index: Option<f64>,
    adjusted_rand_index: Option<f64>,
}

fn score(
    x: &ExpressionMatrix,
    labels: Option<&LabelVector>,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<(ClusterScore, lkfs::clustering::ClusterAssignment)> {
    let a = kmeans(x.values().view(), k, restarts, seed)?;
    let (mut ri, mut ari) = (None, None);
    if let Some(l) = labels {
        let (positions, codes) = l.intersect(x.sample_ids());
        if positions.len() >= 2 {
            let pred: Vec<usize> = positions.iter().map(|&i| a.labels[i]).collect();
            ri = Some(rand_index(&pred, &codes)?);
            ari = Some(adjusted_rand_index(&pred, &codes)?);
        }
    }
    Ok((
        ClusterScore {
            k,
            inertia: a.inertia,
            rand_index: ri,
            adjusted_rand_index: ari,
        },
        a,
    ))
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let x = restrict(&a.input.load()?, a.features.as_deref())?;
    let labels = a.labels.as_ref().map(load_labels).transpose()?;
    let (s, assignment) = score(&x, labels.as_ref(), a.k, a.restarts, a.seed)?;
    if let Some(out) = &a.out {
        write_assignment(out, x.sample_ids(), &assignment)?;
    }
    print!("{}", to_json(&s)?);
    Ok(())
}

#[derive(Serialize)]
struct EvaluateOutput {
    p: usize,
    red: Option<f64>,
    clusters: Vec<ClusterScore>,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let full = a.input.load()?;
    let selected = read_feature_list(&a.features, &full)?;
    let x = full.select_features(&selected)?;
    let labels = a.labels.as_ref().map(load_labels).transpose()?;
    let red = if selected.len() >= 2 {
        Some(red_score(&full, &selected)?)
    } else {
        None
    };
    let mut clusters = Vec::new();
    let mut first = None;
    for &k in &a.k {
        let (s, assignment) = score(&x, labels.as_ref(), k, a.restarts, a.seed)?;
        clusters.push(s);
        first.get_or_insert(assignment);
    }
    if let (Some(path), Some(assignment)) = (&a.projection, &first) {
        let proj = pca_2d(x.values().view())?;
        let truth: Option<Vec<Option<String>>> = labels.as_ref().map(|l| {
            x.sample_ids().iter().map(|id| l.get(id).map(str::to_string)).collect()
        });
        write_projection(path, x.sample_ids(), &proj, truth.as_deref(), &assignment.labels)?;
        let svg_path = path.with_extension("svg");
        fs::write(&svg_path, projection_svg(&proj, &assignment.labels, "projection"))
            .with_context(|| format!("writing {}", svg_path.display()))?;
    }
    print!(
        "{}",
        to_json(&EvaluateOutput {
            p: selected.len(),
            red,
            clusters
        })?
    );
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let config = a.effective_config()?;
    if a.print_config {
        print!("{}", config.to_json()?);
        return Ok(());
    }
    let (x, labels) = load_inputs(&config)?;
    log::info!(
        "loaded {} samples x {} features; {} repetitions, methods {:?}",
        x.n_samples(),
        x.n_features(),
        config.preprocess.repetitions,
        config.methods
    );
    let result = run_experiment_on(&x, labels.as_ref(), &config, &|p| {
        log::info!("repetition {} method {} p={} done", p.repetition, p.method, p.p);
    })?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    let index = emit_outputs(&result, labels.as_ref(), &config.output, a.force, config.svg)?;
    log::info!("wrote {} files to {}", index.files.len() + 1, config.output.display());
    for report in &result.reports {
        eprint!("{}", summary_table(report));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn summary_table(report: &EvaluationReport) -> String {
    let mut out = format!("{} on {}\n   p   k      RED     Rand      ARI\n", report.method, report.dataset);
    for c in &report.aggregates {
        out.push_str(&format!(
            "{:>4} {:>3} {:>8} {:>8} {:>8}\n",
            c.p,
            c.k,
            fmt_opt(c.red.as_ref().map(|s| s.mean)),
            fmt_opt(c.rand_index.as_ref().map(|s| s.mean)),
            fmt_opt(c.adjusted_rand_index.as_ref().map(|s| s.mean)),
        ));
    }
    out
}

fn inspect(a: InspectArgs) -> Result<()> {
    let text = fs::read_to_string(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    if let Ok(report) = serde_json::from_str::<EvaluationReport>(&text) {
        print!("{}", summary_table(&report));
        return Ok(());
    }
    if let Ok(dump) = serde_json::from_str::<SolutionDump>(&text) {
        println!("{} selected {} features", dump.method, dump.selected.len());
        for (name, w) in dump.selected.iter().zip(&dump.weights) {
            println!("  {name:<20} {w:.6}");
        }
        if let Some(a) = dump.target_alignment {
            println!("target alignment {a:.6}");
        }
        return Ok(());
    }
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| lkfs::Error::Format {
        path: a.path.clone(),
        message: e.to_string(),
    })?;
    if value.is_null() {
        bail!("{} is empty", a.path.display());
    }
    print!("{}", to_json(&value)?);
    Ok(())
}
