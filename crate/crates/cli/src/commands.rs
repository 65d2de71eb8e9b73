use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cedar_core::concepts::{explain, match_axes, top_activating, ConceptVocabulary};
use cedar_core::eval::{evaluate, EvalConfig, SparseCoder, DEFAULT_CEDAR_EVAL_K};
use cedar_core::io::{
    generate_synthetic, load_embeddings, load_labels, save_embeddings, save_labels, DType,
    SyntheticSpec,
};
use cedar_core::metrics::{probe_train, MetricsReport, ProbeConfig, ProbeModel};
use cedar_core::sae::{
    train_sae, SaeConfig, SaeVariant, DEFAULT_EXPANSION, DEFAULT_RELU_LAMBDA,
    DEFAULT_SAE_LEARNING_RATE,
};
use cedar_core::train::{
    fit, CurriculumSchedule, TrainConfig, TrainHistory, DEFAULT_K_TARGET, DEFAULT_LEARNING_RATE,
    DEFAULT_TOTAL_STEPS,
};
use cedar_core::{CedarError, CedarModel, Matrix};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(CedarError),
    Output(String),
    /// A requested trend assertion did not hold.
    Trend(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "{m}"),
            Self::Core(e) => write!(f, "{e}"),
            Self::Output(m) => write!(f, "writing output: {m}"),
            Self::Trend(m) => write!(f, "trend check failed: {m}"),
        }
    }
}

impl From<CedarError> for CliError {
    fn from(e: CedarError) -> Self {
        Self::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(CedarError::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Output(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "cedar",
    version,
    about = "Train, evaluate and explain orthogonal sparse embedding bases"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with known sparse sources.
    Generate(GenerateArgs),
    /// Fit the rotation model on an embedding file.
    TrainCedar(TrainCedarArgs),
    /// Fit a sparse-autoencoder baseline.
    TrainSae(TrainSaeArgs),
    /// Matched-FVU metrics for one model.
    Eval(EvalArgs),
    /// Matched-FVU metrics for several models in one table.
    Compare(CompareArgs),
    /// Label axes with concepts and explain samples.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    k_true: usize,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    value_min: f64,
    #[arg(long, default_value_t = 1.5)]
    value_max: f64,
    /// Payload precision of the embedding file: f32 or f64.
    #[arg(long, default_value = "f64", value_parser = parse_dtype)]
    dtype: DType,
}

#[derive(Args, Debug)]
struct TrainCedarArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-step history as newline-delimited JSON; defaults to `<out>.log.ndjson`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOTAL_STEPS)]
    steps: usize,
    /// Curriculum length; defaults to 30% of the steps.
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_K_TARGET)]
    k_target: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainSaeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// relu, topk or batchtopk.
    #[arg(long)]
    variant: SaeVariant,
    /// Active latents; defaults to 64 for topk and 32 for batchtopk.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RELU_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = DEFAULT_EXPANSION)]
    expansion: usize,
    #[arg(long, default_value_t = DEFAULT_TOTAL_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_SAE_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct MetricArgs {
    #[arg(long)]
    data: PathBuf,
    /// Class labels for the linear probe; the probe is skipped without them.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Top-k used to form rotation-model codes before thresholding.
    #[arg(long, default_value_t = DEFAULT_CEDAR_EVAL_K)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.3,0.35")]
    fvu_targets: Vec<f64>,
    #[arg(long, default_value_t = 0.005)]
    tol: f64,
    #[arg(long, default_value_t = 10)]
    cknna_k: usize,
    /// Rows used for the quadratic-cost alignment metric; 0 disables it.
    #[arg(long, default_value_t = 1000)]
    cknna_samples: usize,
    #[arg(long, default_value_t = 200)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV report path; stdout when omitted.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    metrics: MetricArgs,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Comma-separated model files.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Fail with exit code 3 unless K falls as the target FVU rises for every
    /// model and the relu SAE uses the most features at every target.
    #[arg(long)]
    assert_trends: bool,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Concept embeddings, one row per concept.
    #[arg(long)]
    vocab: PathBuf,
    /// Concept names, one per line.
    #[arg(long)]
    names: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Explain only this row; every row otherwise.
    #[arg(long)]
    row: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_K_TARGET)]
    k: usize,
    /// `axis,count`: rank rows by their activation on one axis.
    #[arg(long, value_parser = parse_pair)]
    top_activating: Option<(usize, usize)>,
    /// JSON output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV for the top-activating ranking.
    #[arg(long)]
    top_csv: Option<PathBuf>,
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected `axis,count`")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::TrainCedar(a) => train_cedar(a),
        Command::TrainSae(a) => train_sae_cmd(a),
        Command::Eval(a) => {
            let reports = metric_rows(&[a.model], &a.metrics)?;
            finish_reports(&reports, &a.metrics)
        }
        Command::Compare(a) => compare(a),
        Command::Explain(a) => explain_cmd(a),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> CliResult {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, value)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TruthSidecar<'a> {
    spec: &'a SyntheticSpec,
    embeddings: String,
    labels: String,
    /// `D x D` rotation; row `i` is the direction of source `i`.
    q: String,
    /// `1 x D` offset.
    b0: String,
    /// `N x D` dense source codes.
    sources: String,
}

fn generate(a: GenerateArgs) -> CliResult {
    let spec = SyntheticSpec {
        dim: a.dim,
        n: a.n,
        k_true: a.k_true,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        value_range: (a.value_min, a.value_max),
    };
    let (z, truth) = generate_synthetic(&spec)?;
    let paths = [
        ".labels",
        ".q.emb",
        ".b0.emb",
        ".sources.emb",
        ".truth.json",
    ]
    .map(|s| sibling(&a.out, s));
    save_embeddings(&z, &a.out, a.dtype)?;
    save_labels(&truth.labels, &paths[0])?;
    save_embeddings(&truth.q, &paths[1], DType::F64)?;
    save_embeddings(
        &Matrix::new(1, spec.dim, truth.b0.clone())?,
        &paths[2],
        DType::F64,
    )?;
    save_embeddings(&truth.sources, &paths[3], DType::F64)?;
    let sidecar = TruthSidecar {
        spec: &spec,
        embeddings: file_name(&a.out),
        labels: file_name(&paths[0]),
        q: file_name(&paths[1]),
        b0: file_name(&paths[2]),
        sources: file_name(&paths[3]),
    };
    write_json(Some(&paths[4]), &sidecar)?;
    println!(
        "{}",
        serde_json::json!({ "rows": spec.n, "dim": spec.dim, "out": a.out })
    );
    Ok(())
}

fn save_history(history: &TrainHistory, out: &Path, log: Option<PathBuf>) -> CliResult {
    let log = log.unwrap_or_else(|| sibling(out, ".log.ndjson"));
    history.save_ndjson(log)?;
    Ok(())
}

fn train_cedar(a: TrainCedarArgs) -> CliResult {
    let z = load_embeddings(&a.data)?;
    let mut cfg = TrainConfig::with_steps(a.steps);
    if let Some(tau) = a.tau {
        cfg.tau = tau;
    }
    cfg.learning_rate = a.lr;
    cfg.batch_size = a.batch_size;
    cfg.seed = a.seed;
    cfg.validate()?;
    let sched = CurriculumSchedule::new(z.cols(), cfg.tau, a.k_target)?;
    let (model, history) = fit(&z, &cfg, &sched)?;
    model.save(&a.out)?;
    save_history(&history, &a.out, a.log)?;
    let last = history.last();
    println!(
        "{}",
        serde_json::json!({
            "model": "cedar",
            "steps": history.len(),
            "final_loss": last.map(|r| r.loss),
            "ortho_residual": model.orthogonality_residual(),
        })
    );
    Ok(())
}

fn train_sae_cmd(a: TrainSaeArgs) -> CliResult {
    let z = load_embeddings(&a.data)?;
    let mut cfg = SaeConfig::new(z.cols(), a.variant);
    if let Some(k) = a.k {
        cfg.k = k;
    }
    cfg.lambda = if a.variant == SaeVariant::Relu {
        a.lambda
    } else {
        0.0
    };
    cfg.expansion = a.expansion;
    cfg.train = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::with_steps(a.steps)
    };
    let (model, standardizer, history) = train_sae(&z, &cfg)?;
    model.save(&standardizer, &a.out)?;
    save_history(&history, &a.out, a.log)?;
    let last = history.last();
    println!(
        "{}",
        serde_json::json!({
            "model": format!("{}-sae", a.variant.name()),
            "steps": history.len(),
            "final_loss": last.map(|r| r.loss),
            "dead_latents": last.and_then(|r| r.dead_latents),
        })
    );
    Ok(())
}

fn eval_config(m: &MetricArgs) -> CliResult<EvalConfig> {
    if m.fvu_targets.is_empty() || m.fvu_targets.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(CliError::Usage(
            "--fvu-targets must be non-negative numbers".into(),
        ));
    }
    if !(m.tol > 0.0) {
        return Err(CliError::Usage("--tol must be positive".into()));
    }
    if m.cknna_k == 0 {
        return Err(CliError::Usage("--cknna-k must be >= 1".into()));
    }
    Ok(EvalConfig {
        targets: m.fvu_targets.clone(),
        tol: m.tol,
        cknna_k: m.cknna_k,
        cknna_samples: m.cknna_samples,
    })
}

/// Reports for every model and target; fails only when no target of any
/// model could be matched.
fn metric_rows(models: &[PathBuf], m: &MetricArgs) -> CliResult<Vec<MetricsReport>> {
    let cfg = eval_config(m)?;
    let z = load_embeddings(&m.data)?;
    let probe: Option<(ProbeModel, Vec<u32>)> = match &m.labels {
        Some(path) => {
            let labels = load_labels(path)?;
            let pcfg = ProbeConfig {
                epochs: m.probe_epochs,
                seed: m.seed,
                ..Default::default()
            };
            let (p, _) = probe_train(&z, &labels, &pcfg)?;
            Some((p, labels))
        }
        None => None,
    };
    let mut rows = Vec::new();
    for path in models {
        let coder = SparseCoder::load(path, m.k)?;
        let probe_ref = probe.as_ref().map(|(p, l)| (p, l.as_slice()));
        rows.extend(evaluate(&coder, &z, probe_ref, &cfg)?);
    }
    if rows.iter().all(|r| r.error.is_some()) {
        let detail = rows
            .iter()
            .filter_map(|r| r.error.clone())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(CliError::Core(CedarError::Numeric(format!(
            "no FVU target reached: {detail}"
        ))));
    }
    Ok(rows)
}

fn finish_reports(rows: &[MetricsReport], m: &MetricArgs) -> CliResult {
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: {} at target {:?}: {}",
            r.model,
            r.target_fvu,
            r.error.as_deref().unwrap_or("")
        );
    }
    let sink: Box<dyn Write> = match &m.out_csv {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(MetricsReport::CSV_HEADER)?;
    for r in rows {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    if let Some(p) = &m.out_json {
        write_json(Some(p), &rows)?;
    }
    Ok(())
}

fn check_trends(rows: &[MetricsReport]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut models: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    models.dedup();
    for name in &models {
        let mut own: Vec<&MetricsReport> = rows
            .iter()
            .filter(|r| r.model == *name && r.error.is_none())
            .collect();
        own.sort_by(|a, b| {
            a.target_fvu
                .partial_cmp(&b.target_fvu)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for w in own.windows(2) {
            if w[1].k_mean > w[0].k_mean {
                problems.push(format!(
                    "{name}: K rises from {} to {} between targets {:?} and {:?}",
                    w[0].k_mean, w[1].k_mean, w[0].target_fvu, w[1].target_fvu
                ));
            }
        }
    }
    let k_at = |model: &str, t: Option<f64>| {
        rows.iter()
            .find(|r| r.model == model && r.target_fvu == t && r.error.is_none())
            .map(|r| r.k_mean)
    };
    for relu in rows
        .iter()
        .filter(|r| r.model == "relu-sae" && r.error.is_none())
    {
        for other in ["topk-sae", "batchtopk-sae"] {
            if let Some(k) = k_at(other, relu.target_fvu) {
                if relu.k_mean <= k {
                    problems.push(format!(
                        "relu-sae K {} does not exceed {other} K {k} at target {:?}",
                        relu.k_mean, relu.target_fvu
                    ));
                }
            }
        }
    }
    problems
}

fn compare(a: CompareArgs) -> CliResult {
    if a.models.len() < 2 {
        return Err(CliError::Usage("compare needs at least two models".into()));
    }
    let rows = metric_rows(&a.models, &a.metrics)?;
    finish_reports(&rows, &a.metrics)?;
    if a.assert_trends {
        let problems = check_trends(&rows);
        if !problems.is_empty() {
            return Err(CliError::Trend(problems.join("; ")));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TopActivating {
    axis: usize,
    concept: String,
    rows: Vec<TopRow>,
}

#[derive(Serialize)]
struct TopRow {
    rank: usize,
    row_index: usize,
    activation: f64,
}

#[derive(Serialize)]
struct ExplainReport {
    axis_concepts: cedar_core::concepts::AxisConceptMap,
    explanations: Vec<cedar_core::concepts::Explanation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_activating: Option<TopActivating>,
}

fn explain_cmd(a: ExplainArgs) -> CliResult {
    let model = CedarModel::load(&a.model)?;
    let vocab = ConceptVocabulary::load(&a.vocab, &a.names)?;
    let z = load_embeddings(&a.data)?;
    if z.cols() != model.dim() {
        return Err(CedarError::Dimension(format!(
            "data of width {} for a {}-dim model",
            z.cols(),
            model.dim()
        ))
        .into());
    }
    let map = match_axes(&model, &vocab)?;
    let rows: Vec<usize> = match a.row {
        Some(i) if i >= z.rows() => {
            return Err(CedarError::Index {
                index: i,
                dim: z.rows(),
            }
            .into())
        }
        Some(i) => vec![i],
        None => (0..z.rows()).collect(),
    };
    let explanations = rows
        .iter()
        .map(|&i| explain(&model, &map, z.row(i), a.k, i))
        .collect::<Result<Vec<_>, _>>()?;
    let top = match a.top_activating {
        Some((axis, count)) => {
            let ranked = top_activating(&model, &z, axis, count)?;
            Some(TopActivating {
                axis,
                concept: map.axes[axis].name.clone(),
                rows: ranked
                    .into_iter()
                    .enumerate()
                    .map(|(rank, (row_index, activation))| TopRow {
                        rank: rank + 1,
                        row_index,
                        activation,
                    })
                    .collect(),
            })
        }
        None => None,
    };
    if let (Some(path), Some(t)) = (&a.top_csv, &top) {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rank", "row_index", "activation", "concept"])?;
        for r in &t.rows {
            w.write_record([
                r.rank.to_string(),
                r.row_index.to_string(),
                r.activation.to_string(),
                t.concept.clone(),
            ])?;
        }
        w.flush()?;
    }
    let report = ExplainReport {
        axis_concepts: map,
        explanations,
        top_activating: top,
    };
    write_json(a.out.as_deref(), &report)
}
