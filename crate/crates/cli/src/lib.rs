//! `nimbus` command-line driver.
//!
//! Exit status: 0 success, 1 invalid input or usage, 2 runtime or data
//! failure, 3 some regional training jobs failed.

mod config;
mod image;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nimbus_core::data::{band_stats, center_crop, read_tensor_file, select_bands, synth_generate, Manifest, Split, SynthConfig};
use nimbus_core::eval::{evaluate, predict_split, prediction_path, EnsembleMode, PredictionSource};
use nimbus_core::model::{load_checkpoint, ModelConfig, Preset, SmaAtUNet};
use nimbus_core::nn::LossKind;
use nimbus_core::optim::{train_job, train_regional, JobScope};
use nimbus_core::{Error, Result, Tensor};

pub use config::{DataSection, RunConfig};
pub use image::{dump_image, encode_pgm, plane_to_gray};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

const DEFAULTS: &str = "\
Defaults (override in the --config JSON, sections model/train/data/eval):
  model: in_channels 36 (4 frames x 9 bands), out_channels 16 lead times,
         stage_widths 64,128,256,512,1024, depth_multiplier 2, cbam_reduction 16
  train: AdamW lr 1e-3, weight_decay 1e-2, batch_size 32, max_epochs 10,
         early stopping patience 3, min_delta 0, bce loss on events,
         validation = val split, else a seeded 10% of train
  data:  WV062/WV073 dropped, per-band z-score, non-rainy filter on train
         with the manifest threshold (synth: median train volume)
  eval:  event threshold 0.2 mm/h, probability threshold 0.5,
         predictions bilinearly resized to the target grid";

#[derive(Parser, Debug)]
#[command(name = "nimbus", version, about = "Precipitation nowcasting: synth data, train, predict, evaluate", after_help = DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic advected-rain dataset.
    Synth(SynthArgs),
    /// Train one pooled model, or one per region and year.
    Train(TrainArgs),
    /// Write prediction files for a manifest split.
    Predict(PredictArgs),
    /// Score a checkpoint or a prediction directory.
    Evaluate(EvaluateArgs),
    /// Average several checkpoints' probabilities.
    Ensemble(EnsembleArgs),
    /// Print parameter counts for a config and its standard-convolution reference.
    Params(ParamsArgs),
    /// Write one tensor plane as a binary graymap.
    DumpImage(DumpImageArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Event threshold in mm/h [default: 0.2].
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
#[command(after_help = DEFAULTS)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training samples before filtering.
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// Validation samples [default: n/4].
    #[arg(long)]
    n_val: Option<usize>,
    /// Test samples [default: n/4].
    #[arg(long)]
    n_test: Option<usize>,
    /// Coarse grid side; targets use twice this.
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, value_delimiter = ',', default_value = "R1,R2")]
    regions: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "2019")]
    years: Vec<i32>,
    /// Zero velocity, jitter and noise.
    #[arg(long)]
    r#static: bool,
    /// Synth settings JSON (fields of the generator config); flags above win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(after_help = DEFAULTS)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset manifest (file or directory) [default: data.manifest from config].
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, value_delimiter = ',')]
    regions: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    years: Vec<i32>,
    /// Run regional jobs concurrently.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
#[command(after_help = DEFAULTS)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(after_help = DEFAULTS)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Score this checkpoint.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Score prediction files written by `predict` or `ensemble`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Report directory (eval_report.json, eval_report.tsv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(after_help = DEFAULTS)]
struct EnsembleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Averaged prediction files go here, plus an evaluation report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
}

#[derive(Args, Debug)]
struct DumpImageArgs {
    /// W4CL tensor file.
    #[arg(long)]
    tensor: PathBuf,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Index along the leading (batch) axis.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("NIMBUS_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp_secs().try_init();
}

/// Parses `argv` (program name first) and runs the command.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Params(a) => params(a),
        Command::DumpImage(a) => {
            dump_image(&a.tensor, a.channel, a.frame, &a.out)?;
            Ok(EXIT_OK)
        }
    }
}

fn synth(a: SynthArgs) -> Result<i32> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    cfg.seed = a.seed;
    cfg.n_train = a.n;
    cfg.n_val = a.n_val.unwrap_or(a.n / 4);
    cfg.n_test = a.n_test.unwrap_or(a.n / 4);
    cfg.grid = a.grid;
    cfg.regions = a.regions;
    cfg.years = a.years;
    if a.r#static {
        cfg.velocity = [0.0, 0.0];
        cfg.velocity_jitter = 0.0;
        cfg.noise = 0.0;
    }
    let m = synth_generate(&cfg, &a.out)?;
    log::info!(
        "wrote {} samples to {} (filter threshold {:?})",
        m.samples.len(),
        a.out.display(),
        m.filter_threshold
    );
    Ok(EXIT_OK)
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(t) = common.threshold {
        cfg.eval.threshold = t;
    }
    cfg.reconcile();
    Ok(cfg)
}

/// Loads the manifest and applies the config's data overrides.
fn load_manifest(flag: Option<&Path>, cfg: &RunConfig) -> Result<Manifest> {
    let path = flag
        .or(cfg.data.manifest.as_deref())
        .ok_or_else(|| Error::config("no manifest given (--manifest or data.manifest)"))?;
    let mut m = Manifest::load(path)?;
    if let Some(t) = cfg.data.filter_threshold {
        m.filter_threshold = Some(t);
    }
    if let Some(drop) = &cfg.data.drop_bands {
        if drop != &m.drop_bands {
            m.drop_bands = drop.clone();
            m.validate()?;
            m.stats = recompute_stats(&m)?;
        }
    }
    Ok(m)
}

fn recompute_stats(m: &Manifest) -> Result<Vec<nimbus_core::data::BandStat>> {
    let mut xs = Vec::new();
    for e in m.split(Split::Train) {
        if let (Some(th), Some(v)) = (m.filter_threshold, e.target_sum) {
            if v < th {
                continue;
            }
        }
        let raw: Tensor<f32> = read_tensor_file(&m.resolve(&e.input))?;
        let x = select_bands(&raw, &m.band_names, &m.drop_bands, m.geometry.t_in)?;
        xs.push(center_crop(&x, m.geometry.crop)?);
    }
    band_stats(&xs, &m.kept_bands(), m.geometry.t_in)
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut cfg = load_run_config(&a.common)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = a.preset {
        cfg.model = ModelConfig {
            preset: p,
            ..ModelConfig::for_preset(p)
        }
        .with_widths_of(&cfg.model);
    }
    cfg.validate()?;
    let manifest = load_manifest(a.manifest.as_deref(), &cfg)?;
    if manifest.input_channels() != cfg.model.in_channels {
        return Err(Error::config(format!(
            "manifest yields {} input channels, model expects {}",
            manifest.input_channels(),
            cfg.model.in_channels
        )));
    }
    if manifest.geometry.t_out != cfg.model.out_channels {
        return Err(Error::config(format!(
            "manifest has {} lead times, model emits {}",
            manifest.geometry.t_out, cfg.model.out_channels
        )));
    }
    let echo = cfg.echo();
    if a.regions.is_empty() != a.years.is_empty() {
        return Err(Error::config("--regions and --years must be given together"));
    }
    if a.regions.is_empty() {
        let outcome = train_job(&manifest, &JobScope::Pooled, &cfg.model, &cfg.train, &a.out, "model", &echo)?;
        log::info!(
            "best epoch {} (val loss {:.6}); checkpoint {}",
            outcome.best_epoch,
            outcome.best_val_loss,
            outcome.checkpoint.display()
        );
        return Ok(EXIT_OK);
    }
    let jobs: Vec<(String, i32)> = a
        .regions
        .iter()
        .flat_map(|r| a.years.iter().map(move |&y| (r.clone(), y)))
        .collect();
    let report = train_regional(&manifest, &jobs, &cfg.model, &cfg.train, &a.out, &echo, a.parallel);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join("regional_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    log::info!("{} of {} regional jobs succeeded", report.succeeded(), report.jobs.len());
    Ok(match (report.succeeded(), report.failed()) {
        (_, 0) => EXIT_OK,
        (0, _) => EXIT_RUNTIME,
        _ => EXIT_PARTIAL,
    })
}

/// Loss kind recorded in a checkpoint's echo, if any.
fn echoed_loss(echo: &serde_json::Value) -> Option<LossKind> {
    serde_json::from_value(echo.get("train")?.get("loss")?.clone()).ok()
}

fn load_model(path: &Path, cfg: &mut RunConfig) -> Result<SmaAtUNet<f32>> {
    let ck = load_checkpoint::<f32>(path)?;
    if let Some(kind) = echoed_loss(&ck.echo) {
        cfg.eval.loss = kind;
    }
    cfg.model = ck.model.config().clone();
    Ok(ck.model)
}

fn check_model_fits(model: &SmaAtUNet<f32>, m: &Manifest) -> Result<()> {
    if model.config().in_channels != m.input_channels() || model.config().out_channels != m.geometry.t_out {
        return Err(Error::config(format!(
            "model maps {} -> {} channels, manifest needs {} -> {}",
            model.config().in_channels,
            model.config().out_channels,
            m.input_channels(),
            m.geometry.t_out
        )));
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<i32> {
    let mut cfg = load_run_config(&a.common)?;
    let model = load_model(&a.checkpoint, &mut cfg)?;
    let manifest = load_manifest(a.manifest.as_deref(), &cfg)?;
    check_model_fits(&model, &manifest)?;
    let paths = predict_split(&model, &manifest, a.split, &a.out, cfg.eval.loss)?;
    log::info!("wrote {} prediction files to {}", paths.len(), a.out.display());
    Ok(EXIT_OK)
}

fn write_report(report: &nimbus_core::eval::EvalReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.save(&out.join("eval_report.json"), &out.join("eval_report.tsv"))?;
    let b = report.baselines.as_ref();
    log::info!(
        "pooled CSI {:.6} (all-zeros {:.6}, all-ones {:.6}, persistence {})",
        report.pooled_csi,
        b.map_or(f64::NAN, |b| b.zeros),
        b.map_or(f64::NAN, |b| b.ones),
        b.and_then(|b| b.persistence).map_or("n/a".to_string(), |p| format!("{p:.6}"))
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<i32> {
    let mut cfg = load_run_config(&a.common)?;
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let model = load_model(ck, &mut cfg)?;
            let manifest = load_manifest(a.manifest.as_deref(), &cfg)?;
            check_model_fits(&model, &manifest)?;
            evaluate(PredictionSource::Model(&model), &manifest, a.split, &cfg.eval, true, &cfg.echo())?
        }
        (None, Some(dir)) => {
            let manifest = load_manifest(a.manifest.as_deref(), &cfg)?;
            evaluate::<f32>(PredictionSource::Directory(dir), &manifest, a.split, &cfg.eval, true, &cfg.echo())?
        }
        (None, None) => return Err(Error::config("give --checkpoint or --predictions")),
    };
    write_report(&report, &a.out)?;
    Ok(EXIT_OK)
}

fn ensemble(a: EnsembleArgs) -> Result<i32> {
    let mut cfg = load_run_config(&a.common)?;
    let models = a
        .checkpoints
        .iter()
        .map(|p| load_model(p, &mut cfg))
        .collect::<Result<Vec<_>>>()?;
    if cfg.eval.loss != LossKind::BceLogits {
        return Err(Error::config("ensembles average probabilities and need bce-trained checkpoints"));
    }
    let manifest = load_manifest(a.manifest.as_deref(), &cfg)?;
    for m in &models {
        check_model_fits(m, &manifest)?;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, e) in manifest.split(a.split).into_iter().enumerate() {
        let s = nimbus_core::data::load_sample::<f32>(&manifest, e)?;
        let p = nimbus_core::eval::ensemble_predict(&models, &s.input, EnsembleMode::Average)?;
        nimbus_core::data::write_tensor_file(&prediction_path(&a.out, a.split, i), &p)?;
    }
    let report = evaluate::<f32>(PredictionSource::Directory(&a.out), &manifest, a.split, &cfg.eval, true, &cfg.echo())?;
    write_report(&report, &a.out)?;
    Ok(EXIT_OK)
}

fn params(a: ParamsArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(p) = a.preset {
        cfg.model = ModelConfig {
            preset: p,
            ..ModelConfig::for_preset(p)
        }
        .with_widths_of(&cfg.model);
    }
    cfg.model.validate()?;
    let ours = SmaAtUNet::<f32>::build(cfg.model.clone(), 0)?.count_params();
    let reference = SmaAtUNet::<f32>::build(cfg.model.baseline_reference(), 0)?.count_params();
    println!("model\t{ours}");
    println!("baseline\t{reference}");
    println!("ratio\t{:.4}", ours as f64 / reference as f64);
    Ok(EXIT_OK)
}
