//! Command-line entry point.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, SampleRecord};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::network::{DCaps, DCapsConfig};
use crate::training::{self, CrossValidation, Dataset, GroupBy, Samples, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dcaps", version, about = "Capsule network polyp classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic polyp dataset (manifest.csv + images/).
    GenToy(GenToyArgs),
    /// Train one model on every record of an experiment.
    Train(TrainArgs),
    /// Stratified k-fold cross-validation with a pooled report.
    Crossval(CrossvalArgs),
    /// Score a manifest with a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every layer.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 100)]
    pub polyps: usize,
    /// Images per polyp (at most 5).
    #[arg(long, default_value_t = 3)]
    pub per: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 80)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by `train` and `crossval`. Flags override the config file.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML file with `experiment`, `manifest`, `[network]` and `[train]`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// 1: adenoma vs hyperplastic, 2: adenoma + serrated vs hyperplastic,
    /// 3: serrated vs hyperplastic.
    #[arg(long = "exp")]
    pub experiment: Option<u8>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train without the reconstruction decoder.
    #[arg(long)]
    pub no_recon: bool,
    #[arg(long)]
    pub augment: bool,
    #[arg(long, value_enum)]
    pub group_by: Option<GroupByArg>,
    /// Hold out one of this many group folds of the training data for
    /// validation.
    #[arg(long)]
    pub validation_folds: Option<usize>,
    /// Input height and width the images are resized to.
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum GroupByArg {
    Polyp,
    Patient,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub routing: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Routing iterations; a comma-separated list runs one
    /// cross-validation per value and writes a comparison table.
    #[arg(long, value_delimiter = ',')]
    pub routing: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "exp", default_value_t = 1)]
    pub experiment: u8,
    #[arg(long)]
    pub out: PathBuf,
    /// Also report per-image accuracy ("All Images").
    #[arg(long)]
    pub per_image: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// First seed; cases use seeds `seed..seed + seeds`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Perturb the analytic gradient of one component (negative control).
    #[arg(long, hide = true)]
    pub corrupt_op: Option<String>,
}

/// Settings of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySettings {
    pub polyps: usize,
    pub images_per_polyp: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

/// Fully resolved settings of one command, written into its output
/// directory as `run_config.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub experiment: u8,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub per_image: bool,
    pub toy: Option<ToySettings>,
    pub network: DCapsConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            experiment: 1,
            manifest: None,
            checkpoint: None,
            per_image: false,
            toy: None,
            network: DCapsConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise run config: {e}")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run_config.toml"), self.to_toml()?)?;
        Ok(())
    }

    fn resolve(command: &str, args: &RunArgs) -> Result<Self> {
        let mut rc = match &args.config {
            Some(path) => RunConfig::from_toml(&fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        rc.command = command.to_string();
        if let Some(m) = &args.manifest {
            rc.manifest = Some(m.clone());
        }
        if let Some(e) = args.experiment {
            rc.experiment = e;
        }
        let t = &mut rc.train;
        if let Some(v) = args.epochs {
            t.epochs = v;
        }
        if let Some(v) = args.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = args.seed {
            t.seed = v;
        }
        if let Some(v) = args.lr {
            t.learning_rate = v;
        }
        if let Some(v) = args.validation_folds {
            t.validation_folds = v;
        }
        if let Some(g) = args.group_by {
            t.group_by = match g {
                GroupByArg::Polyp => GroupBy::Polyp,
                GroupByArg::Patient => GroupBy::Patient,
            };
        }
        t.no_recon |= args.no_recon;
        t.augment |= args.augment;
        if let Some(h) = args.height {
            rc.network.input_shape[0] = h;
        }
        if let Some(w) = args.width {
            rc.network.input_shape[1] = w;
        }
        if rc.manifest.is_none() {
            return Err(Error::config("no manifest given (--manifest or `manifest` in the config file)"));
        }
        Ok(rc)
    }

    fn manifest_path(&self) -> &Path {
        self.manifest.as_deref().expect("resolved configs carry a manifest")
    }

    /// Validate, then fold the training overrides into the network.
    fn finish(mut self) -> Result<Self> {
        self.train.validate()?;
        self.network = self.train.apply(&self.network);
        self.network.validate()?;
        Ok(self)
    }
}

/// Parse arguments and run. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Size the worker pool from `DCAPS_THREADS` (default 1).
fn configure_threads() -> Result<()> {
    let threads = match std::env::var("DCAPS_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config(format!("DCAPS_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenToy(a) => gen_toy(&a).map(|_| 0),
        Command::Train(a) => train(&a).map(|_| 0),
        Command::Crossval(a) => crossval(&a).map(|_| 0),
        Command::Eval(a) => eval(&a).map(|_| 0),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
    }
}

fn gen_toy(a: &GenToyArgs) -> Result<()> {
    let toy = data::generate_toy_dataset(a.polyps, a.per, a.seed, a.height, a.width)?;
    data::write_toy_dataset(&a.out, &toy)?;
    RunConfig {
        command: "gen-toy".into(),
        toy: Some(ToySettings {
            polyps: a.polyps,
            images_per_polyp: a.per,
            seed: a.seed,
            height: a.height,
            width: a.width,
        }),
        ..RunConfig::default()
    }
    .write(&a.out)?;
    info!("wrote {} images to {}", toy.records.len(), a.out.display());
    Ok(())
}

/// Load the experiment's records and preprocessed images.
fn load_dataset(manifest: &Path, experiment: u8, network: &DCapsConfig) -> Result<Dataset> {
    let records = data::load_manifest(manifest)?;
    data::validate_records(&records)?;
    let split = data::build_experiment(&records, experiment)?;
    let [h, w, _] = network.input_shape;
    let images = data::load_images(&manifest_dir(manifest), &split.records, h, w)?;
    Ok(Dataset {
        records: split.records,
        labels: split.labels,
        images,
    })
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut rc = RunConfig::resolve("train", &a.run)?;
    if a.routing.is_some() {
        rc.train.routing = a.routing;
    }
    let rc = rc.finish()?;
    rc.write(&a.run.out)?;
    let data = load_dataset(rc.manifest_path(), rc.experiment, &rc.network)?;
    let all: Vec<usize> = (0..data.records.len()).collect();
    let (train_idx, validation) = if rc.train.validation_folds >= 2 {
        let groups = training::group_keys(&data.records, rc.train.group_by);
        let folds =
            training::stratified_kfold(&data.labels, rc.train.validation_folds, &groups, rc.train.seed)?;
        (folds[0].train.clone(), folds[0].test.clone())
    } else {
        (all, Vec::new())
    };
    let mut net = DCaps::<f32>::build(rc.network.clone(), rc.train.seed)?;
    let samples = Samples {
        images: &data.images,
        labels: &data.labels,
    };
    let trained = training::train_fold(&mut net, samples, &train_idx, &validation, &rc.train, 0, Some(&a.run.out))?;
    write_log(&a.run.out.join("train_log.jsonl"), &trained.log)?;
    if let Some((epoch, acc)) = trained.best_validation {
        info!("best validation accuracy {acc:.4} at epoch {epoch}");
    }
    Ok(())
}

fn write_log(path: &Path, log: &[training::EpochLog]) -> Result<()> {
    let mut text = String::new();
    for entry in log {
        text.push_str(&serde_json::to_string(entry)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// One row of the cross-validation summary.
#[derive(Debug, Serialize)]
struct FoldSummary {
    fold: usize,
    train_records: usize,
    test_records: usize,
    polyp_accuracy: Option<f64>,
    recon_mse_initial: Option<f64>,
    recon_mse_final: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Summary {
    experiment: u8,
    routing_iterations: Vec<usize>,
    reconstruction: bool,
    polyp_accuracy: Option<f64>,
    image_accuracy: Option<f64>,
    recon_mse_initial: Option<f64>,
    recon_mse_final: Option<f64>,
    folds: Vec<FoldSummary>,
}

fn crossval(a: &CrossvalArgs) -> Result<()> {
    let mut base = RunConfig::resolve("crossval", &a.run)?;
    if let Some(k) = a.folds {
        base.train.fold_count = k;
    }
    let sweep = a.routing.len() > 1;
    if !sweep {
        if let Some(&r) = a.routing.first() {
            base.train.routing = Some(r);
        }
    }
    // Validate every configuration before any training starts.
    let runs: Vec<RunConfig> = if sweep {
        a.routing
            .iter()
            .map(|&r| {
                let mut rc = base.clone();
                rc.train.routing = Some(r);
                rc.finish()
            })
            .collect::<Result<_>>()?
    } else {
        vec![base.clone().finish()?]
    };
    let data = load_dataset(base.manifest_path(), base.experiment, &runs[0].network)?;
    let manifest_dir = manifest_dir(base.manifest_path());

    if !sweep {
        let rc = &runs[0];
        rc.write(&a.run.out)?;
        run_crossval(rc, &data, &manifest_dir, &a.run.out)?;
        return Ok(());
    }
    let mut rows = Vec::new();
    for (rc, &r) in runs.iter().zip(&a.routing) {
        let dir = a.run.out.join(format!("routing{r}"));
        rc.write(&dir)?;
        let cv = run_crossval(rc, &data, &manifest_dir, &dir)?;
        rows.push((r, cv.pooled));
    }
    base.clone().finish()?.write(&a.run.out)?;
    let table = ablation_table(&rows);
    fs::write(a.run.out.join("ablation.txt"), &table)?;
    let json: BTreeMap<String, &crate::evaluation::Report> =
        rows.iter().map(|(r, rep)| (format!("routing{r}"), rep)).collect();
    fs::write(a.run.out.join("ablation.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    print!("{table}");
    Ok(())
}

/// Pooled headline numbers per routing depth.
pub fn ablation_table(rows: &[(usize, crate::evaluation::Report)]) -> String {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut out = format!(
        "{:<8}  {:>12}  {:>12}  {:>12}  {:>12}\n",
        "routing", "Acc. %", "Sen. %", "Spe. %", "Images Acc."
    );
    for (r, rep) in rows {
        let polyps = rep.column("All Polyps");
        let images = rep.column("All Images").and_then(|c| c.accuracy);
        out.push_str(&format!(
            "{:<8}  {:>12}  {:>12}  {:>12}  {:>12}\n",
            r,
            pct(polyps.and_then(|c| c.accuracy)),
            pct(polyps.and_then(|c| c.sensitivity)),
            pct(polyps.and_then(|c| c.specificity)),
            pct(images)
        ));
    }
    out
}

fn run_crossval(rc: &RunConfig, data: &Dataset, manifest_dir: &Path, out: &Path) -> Result<CrossValidation> {
    let ckpt_dir = out.join("checkpoints");
    let cv = training::run_cross_validation(data, &rc.network, &rc.train, Some(&ckpt_dir))?;
    let abs_dir = fs::canonicalize(manifest_dir).unwrap_or_else(|_| manifest_dir.to_path_buf());
    for f in &cv.folds {
        write_log(&out.join(format!("fold{}_log.jsonl", f.fold)), &f.log)?;
        f.report.emit(out, &format!("fold{}_report", f.fold))?;
        let test: Vec<SampleRecord> = f
            .split
            .test
            .iter()
            .map(|&i| {
                let mut r = data.records[i].clone();
                r.image_path = data::resolve_path(&abs_dir, &r).to_string_lossy().into_owned();
                r
            })
            .collect();
        data::write_manifest(&out.join(format!("fold{}_test.csv", f.fold)), &test)?;
    }
    cv.pooled.emit(out, "report")?;
    let (init, fin) = cv.recon_mse().unzip();
    let summary = Summary {
        experiment: rc.experiment,
        routing_iterations: rc.network.layer_specs.iter().map(|s| s.routing_iterations).collect(),
        reconstruction: rc.network.recon_enabled,
        polyp_accuracy: cv.pooled.column("All Polyps").and_then(|c| c.accuracy),
        image_accuracy: cv.pooled.column("All Images").and_then(|c| c.accuracy),
        recon_mse_initial: init,
        recon_mse_final: fin,
        folds: cv
            .folds
            .iter()
            .map(|f| FoldSummary {
                fold: f.fold,
                train_records: f.split.train.len(),
                test_records: f.split.test.len(),
                polyp_accuracy: f.report.column("All Polyps").and_then(|c| c.accuracy),
                recon_mse_initial: f.recon_mse.map(|m| m.0),
                recon_mse_final: f.recon_mse.map(|m| m.1),
            })
            .collect(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print!("{}", cv.pooled.to_table());
    Ok(cv)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let net: DCaps<f32> = checkpoint::load(&a.checkpoint)?;
    let rc = RunConfig {
        command: "eval".into(),
        experiment: a.experiment,
        manifest: Some(a.manifest.clone()),
        checkpoint: Some(a.checkpoint.clone()),
        per_image: a.per_image,
        network: net.config().clone(),
        ..RunConfig::default()
    };
    let records = data::load_manifest(&a.manifest)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} has no records", a.manifest.display())));
    }
    data::validate_records(&records)?;
    let split = data::select_experiment(&records, a.experiment)?;
    rc.write(&a.out)?;
    let [h, w, _] = net.config().input_shape;
    let images = data::load_images(&manifest_dir(&a.manifest), &split.records, h, w)?;
    let refs: Vec<&SampleRecord> = split.records.iter().collect();
    let imgs: Vec<_> = images.iter().collect();
    let votes = training::vote(&net, &refs, &imgs)?;
    let labels: BTreeMap<String, usize> = split
        .records
        .iter()
        .zip(&split.labels)
        .map(|(r, &y)| (r.polyp_id.clone(), y))
        .collect();
    if labels.values().collect::<std::collections::BTreeSet<_>>().len() < 2 {
        warn!("manifest holds a single class; sensitivity or specificity is undefined");
    }
    let report = crate::evaluation::stratified_report(&votes, &labels, a.per_image)?;
    report.emit(&a.out, "report")?;
    print!("{}", report.to_table());
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<i32> {
    let reports = gradcheck::run_suite(a.seed, a.seeds, a.corrupt_op.as_deref())?;
    let mut failed = Vec::new();
    for r in &reports {
        println!("{r}");
        if !r.passed() {
            failed.push(r.component);
        }
    }
    if failed.is_empty() {
        println!("all {} components pass (tolerance {:e})", reports.len(), gradcheck::TOLERANCE);
        Ok(0)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(3)
    }
}
