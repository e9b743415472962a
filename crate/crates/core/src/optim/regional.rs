use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::train::{fit, write_history, EpochRecord, TrainConfig};
use crate::data::{Dataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ModelConfig, SmaAtUNet};

/// FNV-1a over `region/year`.
pub fn region_hash(region: &str, year: i32) -> u64 {
    format!("{region}/{year}")
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn job_seed(seed: u64, region: &str, year: i32) -> u64 {
    seed ^ region_hash(region, year)
}

/// Where one training job reads its data from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JobScope {
    /// Every sample of the split.
    Pooled,
    Region { region: String, year: i32 },
}

#[derive(Clone, Debug, Serialize)]
pub struct JobOutcome {
    pub checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

/// Loads train/val data for `scope`, fits a freshly built model and writes
/// `{stem}.smck` and `{stem}.history.jsonl` into `out_dir`. Non-rainy train
/// samples are filtered; validation uses the manifest's val split when the
/// scope has one, otherwise a seeded hold-out of the train samples.
pub fn train_job(
    manifest: &Manifest,
    scope: &JobScope,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: &Path,
    stem: &str,
    echo: &serde_json::Value,
) -> Result<JobOutcome> {
    let select = |split: Split| {
        manifest
            .samples
            .iter()
            .filter(|s| s.split == split)
            .filter(|s| match scope {
                JobScope::Pooled => true,
                JobScope::Region { region, year } => &s.region == region && s.year == *year,
            })
            .collect::<Vec<_>>()
    };
    let train_entries = select(Split::Train);
    if train_entries.is_empty() {
        return Err(Error::Data(format!("no training samples for {scope:?}")));
    }
    let (train, report) = Dataset::<f32>::load_entries(manifest, train_entries, true)?;
    if let Some(r) = report {
        log::info!("filter: retained {} removed {} (threshold {})", r.retained, r.removed, r.threshold);
    }
    let val_entries = select(Split::Val);
    let (train, val) = if val_entries.is_empty() {
        train.carve(config.val_fraction, config.seed)?
    } else {
        (train, Dataset::load_entries(manifest, val_entries, false)?.0)
    };
    if train.is_empty() {
        return Err(Error::Data(format!("all training samples for {scope:?} were filtered out")));
    }
    let model = SmaAtUNet::<f32>::build(model_config.clone(), config.seed)?;
    let result = fit(model, &train, &val, config, |_| {})?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join(format!("{stem}.smck"));
    let history_path = out_dir.join(format!("{stem}.history.jsonl"));
    save_checkpoint(&result.model, &checkpoint, echo)?;
    write_history(&history_path, &result.history)?;
    Ok(JobOutcome {
        checkpoint,
        history_path,
        best_epoch: result.best_epoch,
        best_val_loss: result.best_val_loss,
        history: result.history,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RegionalResult {
    pub region: String,
    pub year: i32,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<JobOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegionalReport {
    pub jobs: Vec<RegionalResult>,
}

impl RegionalReport {
    pub fn succeeded(&self) -> usize {
        self.jobs.iter().filter(|j| j.outcome.is_some()).count()
    }

    pub fn failed(&self) -> usize {
        self.jobs.len() - self.succeeded()
    }
}

/// One independent model per `(region, year)`. A job whose data is missing
/// is recorded as failed; the others still run. Results do not depend on
/// `parallel`.
pub fn train_regional(
    manifest: &Manifest,
    jobs: &[(String, i32)],
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: &Path,
    echo: &serde_json::Value,
    parallel: bool,
) -> RegionalReport {
    let run = |(region, year): &(String, i32)| {
        let seed = job_seed(config.seed, region, *year);
        let job_config = TrainConfig {
            seed,
            ..config.clone()
        };
        let scope = JobScope::Region {
            region: region.clone(),
            year: *year,
        };
        let stem = format!("model_{region}_{year}");
        log::info!("training {region}/{year} with seed {seed}");
        let res = train_job(manifest, &scope, model_config, &job_config, out_dir, &stem, echo);
        if let Err(e) = &res {
            log::error!("job {region}/{year} failed: {e}");
        }
        RegionalResult {
            region: region.clone(),
            year: *year,
            seed,
            error: res.as_ref().err().map(ToString::to_string),
            outcome: res.ok(),
        }
    };
    let results = if parallel { jobs.par_iter().map(run).collect() } else { jobs.iter().map(run).collect() };
    RegionalReport { jobs: results }
}
