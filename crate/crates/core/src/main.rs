//! `milscreen` command-line tool.
//!
//! Every command resolves its flags (and optional JSON config file) into a
//! run description, executes it into the output directory and writes that
//! description to `manifest.json`. `milscreen replay manifest.json` runs it
//! again and reproduces the same data files byte for byte.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use milscreen::impact::{self, CountryStats};
use milscreen::metrics::{self, format_float, ScoredSet, SlideAttention};
use milscreen::milnet::{self, FeatureBag, GROUP_BACKGROUND, GROUP_WITNESS};
use milscreen::protocol::{self, RankedModel, TrainConfig, TrainMode, TrainedModel};
use milscreen::slideprep::{self, RasterSlide};
use milscreen::synthgen::{self, CovariateTable, ImputeStrategy, SynthConfig};
use milscreen::Error;

const OUT_ENV: &str = "MILSCREEN_OUT";
const DEFAULT_OUT: &str = "milscreen-out";
const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "milscreen", version, about = "Gated-attention MIL screening pipeline and decision calculators")]
struct Cli {
    /// Output directory [default: $MILSCREEN_OUT or ./milscreen-out]
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (bag file and covariate CSV)
    Generate(GenerateArgs),
    /// Tile and featurise grayscale PGM slides into a bag file
    Tile(TileArgs),
    /// Run the split/replicate training protocol
    Train(TrainArgs),
    /// Evaluate an archive's top-k ensemble on a bag file
    Eval(EvalArgs),
    /// Signed attention per tile and per-group medians
    Attention(AttentionArgs),
    /// Untreated-patient reduction per country and sensitivity grids
    Impact(ImpactArgs),
    /// Trial-enrollment lower bounds by Monte Carlo
    Trial(TrialArgs),
    /// Re-run a command from its manifest
    Replay(ReplayArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// SynthConfig JSON; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    prevalence: Option<f64>,
    #[arg(long)]
    witness_fraction: Option<f64>,
    #[arg(long)]
    witness_shift: Option<f64>,
    #[arg(long)]
    missing_rate: Option<f64>,
}

#[derive(Args)]
struct TileArgs {
    /// CSV with columns slide_id,patient_id,label,path (paths relative to the CSV)
    slides: PathBuf,
    #[arg(long, default_value_t = slideprep::DEFAULT_TILE_SIZE)]
    tile_size: usize,
    #[arg(long, default_value_t = slideprep::DEFAULT_MICRONS_PER_PIXEL)]
    mpp: f64,
    #[arg(long, default_value_t = slideprep::DEFAULT_MIN_FOREGROUND)]
    min_foreground: f64,
    #[arg(long, default_value_t = 64)]
    d1: usize,
    /// Clinical covariate CSV; mode-imputed, encoded and attached to bags
    #[arg(long)]
    covariates: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    /// Tuned for small synthetic cohorts
    Desk,
    /// Published hyperparameters
    Published,
}

#[derive(Args)]
struct TrainArgs {
    bags: PathBuf,
    /// TrainConfig JSON; replaces the preset, flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TrainMode::Gma)]
    mode: TrainMode,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Encoded covariate indices for the fusion layer, e.g. 0,1
    #[arg(long, value_delimiter = ',')]
    covariate_columns: Option<Vec<usize>>,
    #[arg(long)]
    holdout_half: bool,
    #[arg(long, default_value_t = 20)]
    splits: usize,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    /// Models kept for the evaluation ensemble
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct EvalArgs {
    archive: PathBuf,
    bags: PathBuf,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop slides with less tissue than this (cm²)
    #[arg(long, default_value_t = slideprep::QC_MIN_AREA_CM2)]
    qc_min_area: f64,
    #[arg(long, default_value_t = slideprep::DEFAULT_TILE_SIZE)]
    tile_size: usize,
    #[arg(long, default_value_t = slideprep::DEFAULT_MICRONS_PER_PIXEL)]
    mpp: f64,
    /// Covariate column to stratify by (needs --covariates)
    #[arg(long)]
    strata: Option<String>,
    /// Raw clinical covariate CSV
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    min_stratum: usize,
    /// Ensemble size [default: the archive's top_k]
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args)]
struct AttentionArgs {
    archive: PathBuf,
    bags: PathBuf,
}

#[derive(Args)]
struct ImpactArgs {
    /// ROC CSV (threshold,sensitivity,specificity)
    #[arg(long)]
    roc: PathBuf,
    /// Country name; repeat for several [default: all known]
    #[arg(long)]
    country: Vec<String>,
    /// JSON array of country statistics replacing or extending the built-ins
    #[arg(long)]
    overrides: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    margin: f64,
    #[arg(long, default_value_t = 0.05)]
    grid_step: f64,
}

#[derive(Args)]
struct TrialArgs {
    /// Patients screened
    #[arg(long)]
    n: u64,
    /// Eligible fraction among screened patients
    #[arg(long, conflicts_with_all = ["se", "sp", "prevalence"], required_unless_present = "se")]
    rate: Option<f64>,
    /// Screen sensitivity; compares a random arm against a screened arm
    #[arg(long, requires_all = ["sp", "prevalence"])]
    se: Option<f64>,
    /// Screen specificity
    #[arg(long, requires_all = ["se", "prevalence"])]
    sp: Option<f64>,
    /// Eligible fraction without screening
    #[arg(long, requires_all = ["se", "sp"])]
    prevalence: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// Fully resolved command, as stored in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
enum Run {
    Generate {
        synth: SynthConfig,
    },
    Tile {
        slides: PathBuf,
        tile_size: usize,
        microns_per_pixel: f64,
        min_foreground: f64,
        d1: usize,
        covariates: Option<PathBuf>,
    },
    Train {
        bags: PathBuf,
        config: TrainConfig,
        splits: usize,
        train_frac: f64,
        top_k: usize,
    },
    Eval {
        archive: PathBuf,
        bags: PathBuf,
        bootstrap: usize,
        level: f64,
        seed: u64,
        qc_min_area: f64,
        tile_size: usize,
        microns_per_pixel: f64,
        strata: Option<String>,
        covariates: Option<PathBuf>,
        min_stratum: usize,
        top_k: Option<usize>,
    },
    Attention {
        archive: PathBuf,
        bags: PathBuf,
    },
    Impact {
        roc: PathBuf,
        countries: Vec<CountryStats>,
        margin: f64,
        grid_step: f64,
    },
    Trial {
        n: u64,
        rate: Option<f64>,
        se: Option<f64>,
        sp: Option<f64>,
        prevalence: Option<f64>,
        trials: usize,
        confidence: f64,
        seed: u64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    run: Run,
    /// Files written, relative to the output directory.
    outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Archive {
    mode: TrainMode,
    d1: usize,
    n_covariates: usize,
    top_k: usize,
    config: TrainConfig,
    /// One winner per split.
    models: Vec<RankedModel>,
}

/// Failure with its exit code.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn data(msg: impl Into<String>) -> Failure {
    Failure::Data(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run_cli(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot configure thread pool: {e}")))?;
    }
    let out = cli.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let run = match cli.command {
        Command::Generate(a) => resolve_generate(a)?,
        Command::Tile(a) => Run::Tile {
            slides: absolute(&a.slides)?,
            tile_size: a.tile_size,
            microns_per_pixel: a.mpp,
            min_foreground: a.min_foreground,
            d1: a.d1,
            covariates: a.covariates.as_deref().map(absolute).transpose()?,
        },
        Command::Train(a) => resolve_train(a)?,
        Command::Eval(a) => Run::Eval {
            archive: absolute(&a.archive)?,
            bags: absolute(&a.bags)?,
            bootstrap: a.bootstrap,
            level: a.level,
            seed: a.seed,
            qc_min_area: a.qc_min_area,
            tile_size: a.tile_size,
            microns_per_pixel: a.mpp,
            strata: a.strata,
            covariates: a.covariates.as_deref().map(absolute).transpose()?,
            min_stratum: a.min_stratum,
            top_k: a.top_k,
        },
        Command::Attention(a) => Run::Attention {
            archive: absolute(&a.archive)?,
            bags: absolute(&a.bags)?,
        },
        Command::Impact(a) => resolve_impact(a)?,
        Command::Trial(a) => Run::Trial {
            n: a.n,
            rate: a.rate,
            se: a.se,
            sp: a.sp,
            prevalence: a.prevalence,
            trials: a.trials,
            confidence: a.confidence,
            seed: a.seed,
        },
        Command::Replay(a) => {
            let text = fs::read_to_string(&a.manifest)
                .map_err(|e| usage(format!("cannot read {}: {e}", a.manifest.display())))?;
            let m: Manifest = serde_json::from_str(&text)
                .map_err(|e| usage(format!("invalid manifest {}: {e}", a.manifest.display())))?;
            m.run
        }
    };
    execute(&run, &out)
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| usage(format!("bad path {}: {e}", p.display())))
}

fn read_json_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn resolve_generate(a: GenerateArgs) -> CliResult<Run> {
    let mut synth: SynthConfig = match &a.config {
        Some(p) => read_json_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        synth.seed = v;
    }
    if let Some(v) = a.n_patients {
        synth.n_patients = v;
    }
    if let Some(v) = a.d1 {
        synth.d1 = v;
    }
    if let Some(v) = a.prevalence {
        synth.label_prevalence = v;
    }
    if let Some(v) = a.witness_fraction {
        synth.witness_fraction_positive = v;
    }
    if let Some(v) = a.witness_shift {
        synth.witness_shift = v;
    }
    if let Some(v) = a.missing_rate {
        synth.missing_rate = v;
    }
    synth.validate()?;
    Ok(Run::Generate { synth })
}

fn resolve_train(a: TrainArgs) -> CliResult<Run> {
    let mut config = match &a.config {
        Some(p) => read_json_config(p)?,
        None => match a.preset {
            Preset::Desk => TrainConfig::desk_scale(a.mode),
            Preset::Published => TrainConfig::published_defaults(a.mode),
        },
    };
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        config.optimizer = config.optimizer.with_learning_rate(v);
    }
    if let Some(v) = a.replicates {
        config.replicates = v;
    }
    if let Some(v) = a.sample_fraction {
        config.sample_fraction = v;
    }
    if let Some(v) = a.d2 {
        config.d2 = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if a.covariate_columns.is_some() {
        config.covariate_columns = a.covariate_columns;
    }
    if a.holdout_half {
        config.holdout_half = true;
    }
    config.validate()?;
    if a.top_k == 0 || a.top_k > a.splits {
        return Err(usage(format!("--top-k must lie in 1..={}", a.splits)));
    }
    Ok(Run::Train {
        bags: absolute(&a.bags)?,
        config,
        splits: a.splits,
        train_frac: a.train_frac,
        top_k: a.top_k,
    })
}

fn resolve_impact(a: ImpactArgs) -> CliResult<Run> {
    let overrides: Vec<CountryStats> = match &a.overrides {
        Some(p) => read_json_config(p)?,
        None => Vec::new(),
    };
    let registry = impact::registry_with_overrides(&overrides)?;
    let countries = if a.country.is_empty() {
        registry
    } else {
        a.country
            .iter()
            .map(|c| impact::find_country(&registry, c).cloned())
            .collect::<milscreen::Result<_>>()?
    };
    Ok(Run::Impact {
        roc: absolute(&a.roc)?,
        countries,
        margin: a.margin,
        grid_step: a.grid_step,
    })
}

/// Collects output files and writes them under the output directory.
struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl Outputs<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> milscreen::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn execute(run: &Run, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;
    let mut outputs = Outputs {
        dir: out,
        written: Vec::new(),
    };
    match run {
        Run::Generate { synth } => cmd_generate(synth, &mut outputs)?,
        Run::Tile {
            slides,
            tile_size,
            microns_per_pixel,
            min_foreground,
            d1,
            covariates,
        } => cmd_tile(
            slides,
            *tile_size,
            *microns_per_pixel,
            *min_foreground,
            *d1,
            covariates.as_deref(),
            &mut outputs,
        )?,
        Run::Train {
            bags,
            config,
            splits,
            train_frac,
            top_k,
        } => cmd_train(bags, config, *splits, *train_frac, *top_k, &mut outputs)?,
        Run::Eval { .. } => cmd_eval(run, &mut outputs)?,
        Run::Attention { archive, bags } => cmd_attention(archive, bags, &mut outputs)?,
        Run::Impact {
            roc,
            countries,
            margin,
            grid_step,
        } => cmd_impact(roc, countries, *margin, *grid_step, &mut outputs)?,
        Run::Trial { .. } => cmd_trial(run, &mut outputs)?,
    }
    let manifest = Manifest {
        tool: "milscreen".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        run: run.clone(),
        outputs: outputs.written.clone(),
    };
    outputs.json(MANIFEST, &manifest)?;
    Ok(())
}

fn cmd_generate(synth: &SynthConfig, out: &mut Outputs) -> CliResult<()> {
    let ds = synthgen::generate(synth)?;
    let bytes = slideprep::encode_bags(&ds.bags, synth.d1, synthgen::ENCODED_COVARIATES.len())?;
    out.put("bags.milb", &bytes)?;
    out.put("covariates.csv", &csv_bytes(|b| ds.covariates.write_csv(b))?)?;
    let labels = ds.patient_labels();
    let positive = labels.values().filter(|&&l| l == 1).count();
    let prevalence = positive as f64 / labels.len() as f64;
    let summary = serde_json::json!({
        "patients": labels.len(),
        "bags": ds.bags.len(),
        "prevalence": prevalence,
        "d1": synth.d1,
        "covariates": synthgen::ENCODED_COVARIATES,
        "missing_values": ds.covariates.missing_count(),
        "witness_dims": ds.witness_dims,
    });
    out.json("summary.json", &summary)?;
    println!(
        "generated {} bags from {} patients, prevalence {:.3}, D1={}",
        ds.bags.len(),
        labels.len(),
        prevalence,
        synth.d1
    );
    Ok(())
}

#[derive(Deserialize)]
struct SlideRow {
    slide_id: String,
    patient_id: String,
    label: u8,
    path: PathBuf,
}

fn cmd_tile(
    slides: &Path,
    tile_size: usize,
    mpp: f64,
    min_foreground: f64,
    d1: usize,
    covariates: Option<&Path>,
    out: &mut Outputs,
) -> CliResult<()> {
    let base = slides.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(slides).map_err(Error::from)?;
    let rows: Vec<SlideRow> = reader
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| data(format!("{}: {e}", slides.display())))?;
    if rows.is_empty() {
        return Err(data(format!("{} lists no slides", slides.display())));
    }
    let encoded = match covariates {
        Some(p) => {
            let table = CovariateTable::read_csv(fs::File::open(p).map_err(Error::from)?)?;
            Some(synthgen::impute(&table, ImputeStrategy::Mode, 0)?.encode()?)
        }
        None => None,
    };
    let mut bags = Vec::with_capacity(rows.len());
    let mut report = csv::Writer::from_writer(Vec::new());
    report
        .write_record(["slide_id", "threshold", "tiles", "tissue_area_cm2", "passes_qc"])
        .map_err(Error::from)?;
    for row in rows {
        if row.label > 1 {
            return Err(data(format!("slide {}: label must be 0 or 1", row.slide_id)));
        }
        let slide = RasterSlide::read_pgm(&base.join(&row.path), mpp)?;
        let threshold = slideprep::otsu_threshold(&slide.histogram())?;
        let mut bag = slideprep::slide_to_bag(&slide, &row.slide_id, &row.patient_id, row.label, tile_size, min_foreground, d1)
            .map_err(|e| data(format!("slide {}: {e}", row.slide_id)))?;
        if let Some(enc) = &encoded {
            bag.covariates = enc
                .get(&row.patient_id)
                .ok_or_else(|| data(format!("no covariates for patient {}", row.patient_id)))?
                .iter()
                .map(|&v| v as f32 as f64)
                .collect();
        }
        let count = u64::from(bag.tile_count_total);
        report
            .write_record([
                row.slide_id.clone(),
                threshold.to_string(),
                count.to_string(),
                format_float(slideprep::tissue_area_cm2(count, tile_size, mpp)),
                slideprep::passes_qc(count, tile_size, mpp, slideprep::QC_MIN_AREA_CM2).to_string(),
            ])
            .map_err(Error::from)?;
        bags.push(bag);
    }
    let n_cov = bags[0].covariates.len();
    out.put("bags.milb", &slideprep::encode_bags(&bags, d1, n_cov)?)?;
    let report = report.into_inner().map_err(|e| usage(e.to_string()))?;
    out.put("tiles.csv", &report)?;
    println!("tiled {} slides into bags with D1={d1}", bags.len());
    Ok(())
}

fn cmd_train(
    bags_path: &Path,
    config: &TrainConfig,
    splits: usize,
    train_frac: f64,
    top_k: usize,
    out: &mut Outputs,
) -> CliResult<()> {
    let ds = slideprep::read_bags(bags_path)?;
    let patients: Vec<String> = ds
        .bags
        .iter()
        .map(|b| b.patient_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let plan = protocol::make_splits(&patients, splits, train_frac, config.seed)?;
    let outcome = protocol::run_protocol(&ds.bags, &plan, config)?;

    let mut hist = csv::Writer::from_writer(Vec::new());
    hist.write_record(["split", "replicate", "epoch", "loss", "val_auc"])
        .map_err(Error::from)?;
    for s in &outcome.splits {
        for (r, h) in s.histories.iter().enumerate() {
            for e in h {
                hist.write_record([
                    s.split.to_string(),
                    r.to_string(),
                    e.epoch.to_string(),
                    format_float(e.loss),
                    if e.val_auc.is_nan() { "NA".into() } else { format_float(e.val_auc) },
                ])
                .map_err(Error::from)?;
            }
        }
    }
    out.put("history.csv", &hist.into_inner().map_err(|e| usage(e.to_string()))?)?;

    let archive = Archive {
        mode: config.mode,
        d1: ds.d1,
        n_covariates: ds.n_covariates,
        top_k,
        config: config.clone(),
        models: outcome.winners(),
    };
    out.json("archive.json", &archive)?;
    let winners: Vec<_> = outcome
        .splits
        .iter()
        .map(|s| {
            serde_json::json!({
                "split": s.split,
                "replicate": s.winner.replicate,
                "val_auc": nan_to_none(s.winner.val_auc),
            })
        })
        .collect();
    let mean = outcome.mean_val_auc();
    out.json(
        "summary.json",
        &serde_json::json!({
            "mode": config.mode,
            "splits": splits,
            "replicates": config.replicates,
            "mean_val_auc": nan_to_none(mean),
            "winners": winners,
        }),
    )?;
    println!("trained {splits} splits x {} replicates, mean validation AUC {mean:.4}", config.replicates);
    Ok(())
}

fn nan_to_none(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

fn load_archive(path: &Path) -> CliResult<Archive> {
    let text = fs::read_to_string(path).map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data(format!("invalid archive {}: {e}", path.display())))
}

fn check_compatible(archive: &Archive, ds: &slideprep::BagDataset) -> CliResult<()> {
    if archive.d1 != ds.d1 {
        return Err(data(format!(
            "archive expects D1={} but the bag file has D1={}",
            archive.d1, ds.d1
        )));
    }
    if archive.mode == TrainMode::GmaMultimodal && archive.n_covariates != ds.n_covariates {
        return Err(data(format!(
            "archive expects {} covariates but the bag file has {}",
            archive.n_covariates, ds.n_covariates
        )));
    }
    Ok(())
}

fn cmd_eval(run: &Run, out: &mut Outputs) -> CliResult<()> {
    let Run::Eval {
        archive,
        bags,
        bootstrap,
        level,
        seed,
        qc_min_area,
        tile_size,
        microns_per_pixel,
        strata,
        covariates,
        min_stratum,
        top_k,
    } = run
    else {
        unreachable!("cmd_eval called with another command");
    };
    let archive = load_archive(archive)?;
    let ds = slideprep::read_bags(bags)?;
    check_compatible(&archive, &ds)?;
    let n_total = ds.bags.len();
    let kept: Vec<FeatureBag> = ds
        .bags
        .into_iter()
        .filter(|b| {
            slideprep::passes_qc(u64::from(b.tile_count_total), *tile_size, *microns_per_pixel, *qc_min_area)
        })
        .collect();
    let dropped = n_total - kept.len();
    if kept.is_empty() {
        return Err(data(format!("all {n_total} slides fail the {qc_min_area} cm² tissue filter")));
    }
    let k = top_k.unwrap_or(archive.top_k).min(archive.models.len());
    let scores = protocol::topk_ensemble(&archive.models, k, &kept)?;
    let labels: Vec<u8> = kept.iter().map(|b| b.label).collect();
    let mut scored = ScoredSet::new(scores.clone(), labels)?;

    let mut pred = csv::Writer::from_writer(Vec::new());
    pred.write_record(["slide_id", "patient_id", "label", "score"])
        .map_err(Error::from)?;
    for (b, s) in kept.iter().zip(&scores) {
        pred.write_record([b.slide_id.clone(), b.patient_id.clone(), b.label.to_string(), format_float(*s)])
            .map_err(Error::from)?;
    }
    out.put("predictions.csv", &pred.into_inner().map_err(|e| usage(e.to_string()))?)?;

    let auc = metrics::auc(&scored)?;
    let (lo, hi) = metrics::bootstrap_ci(&scored, *bootstrap, *level, *seed)?;
    let curve = metrics::roc(&scored)?;
    out.put("roc.csv", &csv_bytes(|b| curve.write_csv(b))?)?;
    let youden = metrics::youden_point(&curve)?;

    if let Some(key) = strata {
        let path = covariates
            .as_deref()
            .ok_or_else(|| usage("--strata needs --covariates"))?;
        let table = CovariateTable::read_csv(fs::File::open(path).map_err(Error::from)?)?;
        let column = table.column(key).ok_or_else(|| {
            let known: Vec<&str> = table.columns.iter().map(|c| c.name.as_str()).collect();
            usage(format!("unknown stratum {key:?}; known: {}", known.join(", ")))
        })?;
        let by_patient: BTreeMap<&str, String> = table
            .patient_ids
            .iter()
            .zip(&column.values)
            .map(|(p, v)| (p.as_str(), v.clone().unwrap_or_else(|| synthgen::MISSING.to_string())))
            .collect();
        let tags = kept
            .iter()
            .map(|b| {
                by_patient
                    .get(b.patient_id.as_str())
                    .cloned()
                    .ok_or_else(|| data(format!("no covariates for patient {}", b.patient_id)))
            })
            .collect::<CliResult<Vec<_>>>()?;
        scored = scored.with_stratum(key, tags)?;
        let rows = metrics::stratified_auc(&scored, key, *min_stratum)?;
        out.put("strata.csv", &csv_bytes(|b| metrics::write_strata_csv(&rows, b))?)?;
    }

    out.json(
        "summary.json",
        &serde_json::json!({
            "slides": n_total,
            "dropped_qc": dropped,
            "evaluated": kept.len(),
            "ensemble_size": k,
            "auc": auc,
            "ci_low": lo,
            "ci_high": hi,
            "level": level,
            "youden_threshold": youden.threshold,
            "youden_sensitivity": youden.sensitivity,
            "youden_specificity": youden.specificity,
        }),
    )?;
    println!(
        "AUC {auc:.4} [{lo:.4}, {hi:.4}] on {} slides ({dropped} dropped by QC)",
        kept.len()
    );
    Ok(())
}

fn cmd_attention(archive_path: &Path, bags_path: &Path, out: &mut Outputs) -> CliResult<()> {
    let archive = load_archive(archive_path)?;
    let ds = slideprep::read_bags(bags_path)?;
    check_compatible(&archive, &ds)?;
    let best = protocol::rank_models(&archive.models, 1)?[0];
    let model: &TrainedModel = &archive.models[best].model;
    let gma = model
        .gma()
        .ok_or_else(|| usage("attention needs a gated-attention archive, not a tile model"))?;

    let mut tiles = csv::Writer::from_writer(Vec::new());
    tiles
        .write_record(["slide_id", "tile", "group", "sign", "attention"])
        .map_err(Error::from)?;
    let mut slides = Vec::with_capacity(ds.bags.len());
    for bag in &ds.bags {
        let groups = bag
            .tile_groups
            .clone()
            .ok_or_else(|| data(format!("slide {} has no tile groups", bag.slide_id)))?;
        let signed = milnet::signed_attention(bag, gma)?;
        for (k, (g, t)) in groups.iter().zip(&signed).enumerate() {
            tiles
                .write_record([
                    bag.slide_id.clone(),
                    k.to_string(),
                    milnet::group_name(*g),
                    if t.positive { "positive".into() } else { "negative".into() },
                    format_float(t.attention),
                ])
                .map_err(Error::from)?;
        }
        slides.push(SlideAttention {
            slide_id: bag.slide_id.clone(),
            label: bag.label,
            groups,
            tiles: signed,
        });
    }
    out.put("attention_tiles.csv", &tiles.into_inner().map_err(|e| usage(e.to_string()))?)?;

    let cells = metrics::attention_by_group(&slides)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["slide_id", "label", "group", "median_positive", "median_negative"])
        .map_err(Error::from)?;
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), format_float);
    for c in &cells {
        w.write_record([
            c.slide_id.clone(),
            c.label.to_string(),
            milnet::group_name(c.group),
            opt(c.median_positive),
            opt(c.median_negative),
        ])
        .map_err(Error::from)?;
    }
    out.put("attention_groups.csv", &w.into_inner().map_err(|e| usage(e.to_string()))?)?;
    let win = metrics::positive_attention_win_rate(&cells, GROUP_WITNESS, GROUP_BACKGROUND);
    out.json(
        "summary.json",
        &serde_json::json!({
            "slides": slides.len(),
            "model_split": archive.models[best].split,
            "witness_win_rate": win,
        }),
    )?;
    match win {
        Some(r) => println!("witness attention beats background on {:.1}% of positive slides", 100.0 * r),
        None => println!("no positive slides to summarise"),
    }
    Ok(())
}

fn cmd_impact(
    roc_path: &Path,
    countries: &[CountryStats],
    margin: f64,
    grid_step: f64,
    out: &mut Outputs,
) -> CliResult<()> {
    let file = fs::File::open(roc_path).map_err(|e| data(format!("cannot read {}: {e}", roc_path.display())))?;
    let curve = metrics::RocCurve::read_csv(file)?;
    let mut rows = Vec::new();
    for c in countries {
        rows.extend(impact::impact_report(c, &curve, margin)?);
    }
    out.put("impact.csv", &csv_bytes(|b| impact::write_impact_csv(&rows, b))?)?;

    let mut grid = csv::Writer::from_writer(Vec::new());
    grid.write_record([
        "country",
        "bound",
        "sensitivity",
        "specificity",
        "positive_screens",
        "reduction_pct",
    ])
    .map_err(Error::from)?;
    for r in &rows {
        let bound = serde_json::to_value(r.bound).map_err(Error::from)?;
        let bound = bound.as_str().unwrap_or_default().to_string();
        for cell in impact::sensitivity_grid(r.n_luad, r.p_egfr, r.p_test, grid_step)? {
            grid.write_record([
                r.country.clone(),
                bound.clone(),
                format_float(cell.sensitivity),
                format_float(cell.specificity),
                format_float(cell.positive_screens),
                cell.reduction_pct.map_or("NA".into(), format_float),
            ])
            .map_err(Error::from)?;
        }
    }
    out.put("grid.csv", &grid.into_inner().map_err(|e| usage(e.to_string()))?)?;
    out.json(
        "summary.json",
        &serde_json::json!({ "countries": countries, "margin": margin, "rows": rows }),
    )?;
    for r in &rows {
        println!(
            "{:<8} {:?}: before {:>7.0}  after {:>7.0}  reduction {}{}",
            r.country,
            r.bound,
            r.sot_before,
            r.sot_after,
            r.reduction_pct.map_or("NA".into(), |v| format!("{v:.1}%")),
            if r.point.within_margin { "" } else { "  (budget outside margin)" }
        );
    }
    Ok(())
}

fn cmd_trial(run: &Run, out: &mut Outputs) -> CliResult<()> {
    let Run::Trial {
        n,
        rate,
        se,
        sp,
        prevalence,
        trials,
        confidence,
        seed,
    } = *run
    else {
        unreachable!("cmd_trial called with another command");
    };
    // the random arm screens at prevalence, the model arm at its precision
    let mut arms: Vec<(&str, f64)> = Vec::new();
    let mut enrichment = None;
    match (rate, se, sp, prevalence) {
        (Some(r), None, None, None) => arms.push(("given", r)),
        (None, Some(se), Some(sp), Some(p)) => {
            arms.push(("random", p));
            arms.push(("model", impact::precision(p, se, sp)?));
            enrichment = Some(impact::enrichment(p, se, sp)?);
        }
        _ => return Err(usage("give either --rate or all of --se, --sp, --prevalence")),
    }
    let z = one_sided_z(confidence)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arm", "rate", "n_screened", "lower_bound", "normal_bound"])
        .map_err(Error::from)?;
    let mut results = Vec::new();
    for (i, (arm, r)) in arms.iter().enumerate() {
        let bound = impact::simulate_enrollment(n, *r, trials, confidence, milscreen::numkit::derive_seed(seed, &[i as u64]))?;
        let normal = impact::normal_lower_bound(n, *r, z);
        w.write_record([
            arm.to_string(),
            format_float(*r),
            n.to_string(),
            bound.to_string(),
            normal.to_string(),
        ])
        .map_err(Error::from)?;
        println!("{arm}: rate {r:.4}, {bound} eligible of {n} with {:.0}% confidence", confidence * 100.0);
        results.push(serde_json::json!({ "arm": arm, "rate": r, "lower_bound": bound, "normal_bound": normal }));
    }
    out.put("trial.csv", &w.into_inner().map_err(|e| usage(e.to_string()))?)?;
    out.json(
        "summary.json",
        &serde_json::json!({
            "n_screened": n,
            "trials": trials,
            "confidence": confidence,
            "enrichment": enrichment,
            "arms": results,
        }),
    )?;
    if let Some(e) = enrichment {
        println!("enrichment {e:.2}x");
    }
    Ok(())
}

/// One-sided standard normal quantile for the normal-approximation column.
fn one_sided_z(confidence: f64) -> CliResult<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(usage(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    Ok(milscreen::metrics::normal_quantile(confidence))
}
