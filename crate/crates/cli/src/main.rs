mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmfa::dataset_io::{fmt_f64, load_dataset, write_csv, write_dataset, write_matrix_csv};
use mmfa::fisher::{bounds_csv, experiment_bounds, mse_experiment, MseExperimentConfig};
use mmfa::inference::{
    anomaly_scan, recall_at_k, roc_auc, score_dataset, PredictiveLikelihood, Scorer,
};
use mmfa::model_io::{load_model, save_model_with, trace_csv, BlobPolicy};
use mmfa::select::{select_k_with, SelectionOptions};
use mmfa::synth::{sample_dataset, GeneratorConfig};
use mmfa::{fit, Dataset, InverseGammaPrior, MmfaError, Model, ModelSpec, ScoreUpdate};
use nalgebra::DVector;

use report::{Cell, Format, Report};

/// Exit status when the iteration cap was reached before convergence.
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mmfa", version, about = "Multimodal factor analysis for mixed real-valued and categorical data")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MMFA_THREADS")]
    threads: Option<usize>,

    /// Report format.
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a dataset manifest.
    Fit(FitArgs),
    /// Evaluate a fitted model on a dataset.
    Eval(EvalArgs),
    /// Choose the number of factors by held-out BIC.
    Select(SelectArgs),
    /// Cramér–Rao bounds of an experiment configuration.
    Crlb(ConfigArgs),
    /// Score MSE per EM iteration against the Cramér–Rao bound.
    MseExperiment(ConfigArgs),
    /// Sample a synthetic dataset with its ground truth.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Inverse-gamma shape of the noise prior.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Inverse-gamma rate of the noise prior.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Ridge weight of the score update.
    #[arg(long, default_value_t = 1e-6, conflicts_with = "nonneg")]
    ridge: f64,
    /// Constrain scores to be nonnegative.
    #[arg(long)]
    nonneg: bool,
    /// Relative objective change for convergence (`inf` runs one iteration).
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn spec(&self, k: usize, data: &Dataset) -> mmfa::Result<ModelSpec<f64>> {
        let mut spec = ModelSpec::new(k, data.gaussian_features(), data.category_counts());
        spec.noise_prior = InverseGammaPrior::new(self.alpha, self.beta)?;
        spec.score_update = if self.nonneg { ScoreUpdate::NonNegative } else { ScoreUpdate::Ridge(self.ridge) };
        spec.tol = self.tol;
        spec.max_iters = self.max_iters;
        spec.seed = self.seed;
        Ok(spec)
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    manifest: PathBuf,
    /// Number of latent factors.
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    model: ModelArgs,
    /// Model file to write.
    #[arg(short, long)]
    output: PathBuf,
    /// Objective trace CSV (default: next to the model, `.trace.csv`).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Store matrices in a raw sidecar file.
    #[arg(long, value_enum, default_value = "auto")]
    blob: BlobArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BlobArg {
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Predict,
    Anomaly,
    Impute,
    Recall,
}

#[derive(Args, Debug)]
struct EvalArgs {
    model: PathBuf,
    manifest: PathBuf,
    #[arg(long, value_enum)]
    task: Task,
    /// Significance level of the anomaly rule.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Manifest whose likelihoods set the anomaly threshold (default: the evaluated data).
    #[arg(long)]
    validation: Option<PathBuf>,
    /// `instance,outlier` CSV; adds the ROC AUC to the anomaly report.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// `instance,feature,value` CSV of hidden entries; adds imputation MSE.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Recommendation list length.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Ratings at or above this count as liked.
    #[arg(long, default_value_t = 4.0)]
    like_threshold: f64,
    /// Manifest of the training ratings; its observed entries are excluded from rankings.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    manifest: PathBuf,
    /// Candidate factor counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    candidates: Vec<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON experiment configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON generator configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    output: PathBuf,
}

fn exit_code(err: &MmfaError) -> u8 {
    match err.root() {
        MmfaError::DimensionMismatch(_) => 2,
        MmfaError::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> mmfa::Result<u8> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, cli.format),
        Command::Eval(a) => cmd_eval(a, cli.format),
        Command::Select(a) => cmd_select(a, cli.format),
        Command::Crlb(a) => cmd_crlb(a),
        Command::MseExperiment(a) => cmd_mse(a),
        Command::Simulate(a) => cmd_simulate(a, cli.format),
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> mmfa::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| MmfaError::Schema(format!("{}: {e}", p.display())))
        }
    }
}

fn write_text(out: Option<&Path>, text: &str) -> mmfa::Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_fit(a: &FitArgs, format: Format) -> mmfa::Result<u8> {
    let data = load_dataset(&a.manifest)?;
    let spec = a.model.spec(a.k, &data)?;
    let model = fit(&data, &spec)?;
    let policy = match a.blob {
        BlobArg::Auto => BlobPolicy::Auto,
        BlobArg::Always => BlobPolicy::Always,
        BlobArg::Never => BlobPolicy::Never,
    };
    save_model_with(&model, &a.output, policy)?;
    let trace = a.trace.clone().unwrap_or_else(|| a.output.with_extension("trace.csv"));
    fs::write(&trace, trace_csv(&model))?;

    let mut r = Report::new("fit");
    r.meta("seed", a.model.seed)
        .meta("k", a.k)
        .meta("model", a.output.display().to_string())
        .meta("trace", trace.display().to_string())
        .columns(&["iterations", "converged", "objective"]);
    let last = model.objective_trace.last().copied().unwrap_or(f64::NAN);
    r.row(vec![model.iterations_run.into(), model.converged.into(), last.into()]);
    r.emit(format, None)?;
    if !model.converged {
        log::warn!("stopped after {} iterations without converging", model.iterations_run);
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn eval_report(model: &Model, task: &str) -> Report {
    let mut r = Report::new("eval");
    r.meta("task", task).meta("seed", model.spec.seed).meta("k", model.spec.factors);
    r
}

fn cmd_eval(a: &EvalArgs, format: Format) -> mmfa::Result<u8> {
    let model: Model = load_model(&a.model)?;
    let data = load_dataset(&a.manifest)?;
    model.spec.check_data(&data)?;
    let report = match a.task {
        Task::Predict => eval_predict(&model, &data)?,
        Task::Anomaly => eval_anomaly(&model, &data, a)?,
        Task::Impute => eval_impute(&model, &data, a)?,
        Task::Recall => eval_recall(&model, &data, a)?,
    };
    report.emit(format, a.output.as_deref())?;
    Ok(0)
}

fn eval_predict(model: &Model, data: &Dataset) -> mmfa::Result<Report> {
    let scored = score_dataset(model, data)?;
    let mut r = eval_report(model, "predict");
    let total: f64 = scored.iter().flatten().map(|s| s.log_pred).sum();
    let gaussian: f64 = scored.iter().flatten().map(|s| s.gaussian_log_pred).sum();
    let elbo: f64 = scored.iter().flatten().map(|s| s.multinomial_elbo).sum();
    let label = PredictiveLikelihood::<f64>::label_for(!data.categorical().is_empty());
    r.meta("label", label)
        .meta("total", total)
        .meta("gaussian", gaussian)
        .meta("multinomial_elbo", elbo)
        .meta("unscored", scored.iter().filter(|s| s.is_none()).count())
        .columns(&["instance", "log_pred", "gaussian", "multinomial_elbo", "iterations", "converged"]);
    for (i, s) in scored.iter().enumerate() {
        if let Some(s) = s {
            r.row(vec![
                i.into(),
                s.log_pred.into(),
                s.gaussian_log_pred.into(),
                s.multinomial_elbo.into(),
                s.iterations.into(),
                s.converged.into(),
            ]);
        }
    }
    Ok(r)
}

fn read_rows(path: &Path) -> mmfa::Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| MmfaError::Schema(format!("{}: {e}", path.display())))?;
    rdr.records()
        .map(|rec| {
            rec.map(|r| r.iter().map(str::to_string).collect())
                .map_err(|e| MmfaError::Schema(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn parse_cell<T: std::str::FromStr>(path: &Path, cell: Option<&String>) -> mmfa::Result<T> {
    cell.and_then(|c| c.parse().ok())
        .ok_or_else(|| MmfaError::Schema(format!("{}: unreadable cell {:?}", path.display(), cell)))
}

fn read_labels(path: &Path, instances: usize) -> mmfa::Result<Vec<bool>> {
    let mut labels = vec![false; instances];
    for row in read_rows(path)? {
        let i: usize = parse_cell(path, row.first())?;
        let flag: u8 = parse_cell(path, row.get(1))?;
        if i >= instances {
            return Err(MmfaError::DimensionMismatch(format!(
                "{}: instance {i} outside a dataset of {instances}",
                path.display()
            )));
        }
        labels[i] = flag != 0;
    }
    Ok(labels)
}

fn eval_anomaly(model: &Model, data: &Dataset, a: &EvalArgs) -> mmfa::Result<Report> {
    let validation = match &a.validation {
        Some(p) => {
            let v = load_dataset(p)?;
            model.spec.check_data(&v)?;
            Some(v)
        }
        None => None,
    };
    let scan = anomaly_scan(model, validation.as_ref().unwrap_or(data), data, a.delta)?;
    let mut r = eval_report(model, "anomaly");
    r.meta("delta", a.delta)
        .meta("threshold", scan.threshold)
        .meta("flagged", scan.verdicts.iter().filter(|v| v.1.is_anomalous).count());
    let labels = a.labels.as_deref().map(|p| read_labels(p, data.instances())).transpose()?;
    if let Some(labels) = &labels {
        let mut surprise = vec![0.0; data.instances()];
        for (i, v) in &scan.verdicts {
            surprise[*i] = -v.log_likelihood;
        }
        r.meta("auc", roc_auc(&surprise, labels)?);
    }
    let mut cols = vec!["rank", "instance", "log_likelihood", "anomalous"];
    if labels.is_some() {
        cols.push("label");
    }
    r.columns(&cols);
    for (rank, (i, v)) in scan.verdicts.iter().enumerate() {
        let mut row: Vec<Cell> = vec![rank.into(), (*i).into(), v.log_likelihood.into(), v.is_anomalous.into()];
        if let Some(l) = &labels {
            row.push(l[*i].into());
        }
        r.row(row);
    }
    Ok(r)
}

fn eval_impute(model: &Model, data: &Dataset, a: &EvalArgs) -> mmfa::Result<Report> {
    let block = data
        .gaussian()
        .ok_or_else(|| MmfaError::InvalidArgument("imputation needs a real-valued modality".into()))?;
    let state = model.state.gaussian.as_ref().expect("checked against the data");
    let (p, d1) = (block.instances(), block.features());
    let scorer = Scorer::new(model)?;

    let mut truth = std::collections::HashMap::new();
    if let Some(path) = &a.truth {
        for row in read_rows(path)? {
            let i: usize = parse_cell(path, row.first())?;
            let j: usize = parse_cell(path, row.get(1))?;
            let v: f64 = parse_cell(path, row.get(2))?;
            truth.insert((i, j), v);
        }
    }

    let col_means: Vec<f64> = (0..d1)
        .map(|j| {
            let obs: Vec<f64> = (0..p).filter(|&i| block.is_observed(i, j)).map(|i| block.values()[(i, j)]).collect();
            if obs.is_empty() {
                0.0
            } else {
                obs.iter().sum::<f64>() / obs.len() as f64
            }
        })
        .collect();

    let mut r = eval_report(model, "impute");
    let mut rows = Vec::new();
    let (mut se, mut se_base, mut n) = (0.0, 0.0, 0usize);
    for i in 0..p {
        if block.observed_in_row(i) == d1 {
            continue;
        }
        let c = match scorer.score(&data.instance(i)) {
            Ok(s) => s.c,
            Err(MmfaError::Undefined(_)) => DVector::zeros(model.spec.factors),
            Err(e) => return Err(e),
        };
        for j in (0..d1).filter(|&j| !block.is_observed(i, j)) {
            let pred = state.means.column(j).dot(&c);
            let mut row: Vec<Cell> = vec![i.into(), j.into(), pred.into()];
            if a.truth.is_some() {
                match truth.get(&(i, j)) {
                    Some(&v) => {
                        se += (pred - v).powi(2);
                        se_base += (col_means[j] - v).powi(2);
                        n += 1;
                        row.push(v.into());
                    }
                    None => row.push(f64::NAN.into()),
                }
            }
            rows.push(row);
        }
    }
    r.meta("entries", rows.len());
    if a.truth.is_some() {
        if n == 0 {
            return Err(MmfaError::Undefined("no hidden entry has a true value".into()));
        }
        r.meta("scored", n).meta("mse", se / n as f64).meta("baseline_mse", se_base / n as f64);
        r.columns(&["instance", "feature", "predicted", "actual"]);
    } else {
        r.columns(&["instance", "feature", "predicted"]);
    }
    for row in rows {
        r.row(row);
    }
    Ok(r)
}

fn eval_recall(model: &Model, data: &Dataset, a: &EvalArgs) -> mmfa::Result<Report> {
    let test = data
        .gaussian()
        .ok_or_else(|| MmfaError::InvalidArgument("recall needs a real-valued modality".into()))?;
    if data.instances() != model.scores().ncols() {
        return Err(MmfaError::DimensionMismatch(format!(
            "recall ranks the {} fitted instances; the test set has {}",
            model.scores().ncols(),
            data.instances()
        )));
    }
    let train = a.train.as_deref().map(load_dataset).transpose()?;
    let train_mask = match &train {
        Some(t) => {
            let g = t
                .gaussian()
                .ok_or_else(|| MmfaError::InvalidArgument("training manifest has no real-valued modality".into()))?;
            Some(g.mask().cloned().unwrap_or_else(|| mmfa::ObservationMask::all_observed(g.instances(), g.features())))
        }
        None => None,
    };
    let rep = recall_at_k(model, test, train_mask.as_ref(), a.k, a.like_threshold)?;
    let mut r = eval_report(model, "recall");
    r.meta("like_threshold", rep.like_threshold).columns(&["k", "recall", "users"]);
    r.row(vec![rep.k.into(), rep.recall.into(), rep.users.into()]);
    Ok(r)
}

fn cmd_select(a: &SelectArgs, format: Format) -> mmfa::Result<u8> {
    let data = load_dataset(&a.manifest)?;
    let template = a.model.spec(1, &data)?;
    let opts = SelectionOptions { holdout_fraction: a.holdout, split_seed: a.split_seed };
    let sel = select_k_with(&data, &a.candidates, &template, opts)?;
    let mut r = Report::new("select");
    r.meta("seed", a.model.seed)
        .meta("split_seed", a.split_seed)
        .meta("heldout", sel.heldout.len())
        .meta("best_k", sel.best_k)
        .columns(&["k", "bic", "heldout_log_likelihood", "parameters", "iterations", "converged"]);
    for row in &sel.table {
        r.row(vec![
            row.k.into(),
            row.bic.into(),
            row.heldout_log_likelihood.into(),
            row.parameters.into(),
            row.iterations.into(),
            row.converged.into(),
        ]);
    }
    r.emit(format, a.output.as_deref())?;
    Ok(0)
}

fn experiment_header(cfg: &MseExperimentConfig) -> String {
    format!(
        "# seed: {}\n# runs: {}\n# replicates: {}\n# alignment: procrustes\n",
        cfg.seed, cfg.runs, cfg.replicates
    )
}

fn cmd_crlb(a: &ConfigArgs) -> mmfa::Result<u8> {
    let cfg: MseExperimentConfig = read_json(a.config.as_deref())?;
    let bounds = experiment_bounds(&cfg)?;
    write_text(a.output.as_deref(), &(experiment_header(&cfg) + &bounds_csv(&bounds)))?;
    Ok(0)
}

fn cmd_mse(a: &ConfigArgs) -> mmfa::Result<u8> {
    let cfg: MseExperimentConfig = read_json(a.config.as_deref())?;
    let res = mse_experiment(&cfg)?;
    write_text(a.output.as_deref(), &(experiment_header(&cfg) + &res.to_csv()))?;
    Ok(0)
}

fn cmd_simulate(a: &SimulateArgs, format: Format) -> mmfa::Result<u8> {
    let cfg: GeneratorConfig = read_json(a.config.as_deref())?;
    let (data, truth) = sample_dataset(&cfg)?;
    let dir = &a.output;
    let manifest = write_dataset(dir, &data)?;
    let mut files = vec![manifest];

    let scores = dir.join("truth_scores.csv");
    write_matrix_csv(&scores, "c", &truth.scores.transpose())?;
    files.push(scores);
    if cfg.gaussian_features > 0 {
        let p = dir.join("truth_gaussian_loadings.csv");
        write_matrix_csv(&p, "u", &truth.gaussian_loadings.transpose())?;
        files.push(p);
    }
    for (m, v) in truth.categorical_loadings.iter().enumerate() {
        let p = dir.join(format!("truth_categorical{m}_loadings.csv"));
        write_matrix_csv(&p, "v", &v.transpose())?;
        files.push(p);
    }
    let meta = dir.join("truth.json");
    let doc = serde_json::json!({ "noise_variance": truth.noise_variance, "config": cfg });
    fs::write(&meta, serde_json::to_string_pretty(&doc).expect("config serializes") + "\n")?;
    files.push(meta);

    if cfg.outlier_fraction > 0.0 {
        let p = dir.join("labels.csv");
        let rows = (0..data.instances()).map(|i| {
            let flag = truth.outliers.binary_search(&i).is_ok();
            vec![i.to_string(), u8::from(flag).to_string()]
        });
        write_csv(&p, &["instance".into(), "outlier".into()], rows)?;
        files.push(p);
    }
    if let Some(g) = data.gaussian().filter(|g| g.mask().is_some()) {
        let p = dir.join("hidden.csv");
        let mut rows = Vec::new();
        for i in 0..g.instances() {
            for j in (0..g.features()).filter(|&j| !g.is_observed(i, j)) {
                rows.push(vec![i.to_string(), j.to_string(), fmt_f64(g.values()[(i, j)])]);
            }
        }
        write_csv(&p, &["instance".into(), "feature".into(), "value".into()], rows)?;
        files.push(p);
    }

    let mut r = Report::new("simulate");
    r.meta("seed", cfg.seed).meta("instances", data.instances()).columns(&["file"]);
    for f in files {
        r.row(vec![f.display().to_string().into()]);
    }
    r.emit(format, None)?;
    Ok(0)
}
