use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{binarize, csi, events_from_prediction, to_output_space, ConfusionCounts, EvalConfig};
use crate::data::{load_sample, read_tensor_file, write_tensor_file, Manifest, SampleEntry, Split};
use crate::error::{Error, Result};
use crate::model::{write_atomic, SmaAtUNet};
use crate::nn::LossKind;
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// Mean of per-model probabilities.
    #[default]
    Average,
}

/// Averages sigmoid outputs of `models` on `batch`, accumulating in `f64`.
pub fn ensemble_predict<T: Scalar>(models: &[SmaAtUNet<T>], batch: &Tensor<T>, mode: EnsembleMode) -> Result<Tensor<T>> {
    let EnsembleMode::Average = mode;
    let first = models.first().ok_or_else(|| Error::config("ensemble needs at least one model"))?;
    let out = first.config().out_channels;
    if let Some(m) = models.iter().find(|m| m.config().out_channels != out) {
        return Err(Error::shape(format!(
            "ensemble members disagree on output channels: {out} vs {}",
            m.config().out_channels
        )));
    }
    let mut acc: Option<(Vec<f64>, [usize; 4])> = None;
    for m in models {
        let p = sigmoid(&m.infer(batch)?);
        match &mut acc {
            None => acc = Some((p.data().iter().map(|v| v.to_f64_lossless()).collect(), p.dims())),
            Some((sum, dims)) => {
                if *dims != p.dims() {
                    return Err(Error::shape(format!("ensemble outputs {:?} vs {dims:?}", p.dims())));
                }
                sum.iter_mut().zip(p.data()).for_each(|(s, v)| *s += v.to_f64_lossless());
            }
        }
    }
    let (sum, dims) = acc.expect("at least one model");
    let k = models.len() as f64;
    Tensor::from_vec(dims, sum.into_iter().map(|s| T::lit(s / k)).collect())
}

/// Where predictions for an evaluation come from.
pub enum PredictionSource<'a, T> {
    Model(&'a SmaAtUNet<T>),
    Ensemble(&'a [SmaAtUNet<T>]),
    /// Files written by [`predict_split`] (or any W4CL files with the same names).
    Directory(&'a Path),
}

impl<T> PredictionSource<'_, T> {
    fn describe(&self) -> String {
        match self {
            PredictionSource::Model(_) => "model".into(),
            PredictionSource::Ensemble(m) => format!("ensemble of {}", m.len()),
            PredictionSource::Directory(p) => format!("predictions in {}", p.display()),
        }
    }
}

/// Prediction file for the `index`-th sample of `split` (manifest order).
pub fn prediction_path(dir: &Path, split: Split, index: usize) -> PathBuf {
    dir.join(format!("{split}_{index:06}.pred.w4cl"))
}

/// Writes one output-space prediction file per sample of `split`.
pub fn predict_split<T: Scalar>(
    model: &SmaAtUNet<T>,
    manifest: &Manifest,
    split: Split,
    out_dir: &Path,
    kind: LossKind,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::config(format!("split `{split}` is empty")));
    }
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let s = load_sample::<T>(manifest, e)?;
            let pred = to_output_space(&model.infer(&s.input)?, kind);
            let path = prediction_path(out_dir, split, i);
            write_tensor_file(&path, &pred)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: String,
    pub year: i32,
    pub samples: usize,
    pub csi: f64,
    pub counts: ConfusionCounts,
    pub per_lead_csi: Vec<f64>,
    pub per_lead_counts: Vec<ConfusionCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub zeros: f64,
    pub ones: f64,
    /// Absent when some sample has no persistence field.
    pub persistence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub split: Split,
    pub source: String,
    pub threshold: f64,
    pub prob_threshold: f64,
    pub loss: LossKind,
    /// Run configuration supplied by the caller (e.g. the CLI config).
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// From counts summed over all regions and lead times.
    pub pooled_csi: f64,
    pub pooled_counts: ConfusionCounts,
    pub per_lead_csi: Vec<f64>,
    pub per_lead_counts: Vec<ConfusionCounts>,
    pub regions: Vec<RegionScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baselines: Option<Baselines>,
    pub echo: EvalEcho,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Header plus one tab-separated line per `(region, year)`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("region\tyear\tsamples\ttp\tfp\tfn\ttn\tcsi\n");
        for r in &self.regions {
            let c = &r.counts;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.8}",
                r.region, r.year, r.samples, c.tp, c.fp, c.fn_, c.tn, r.csi
            );
        }
        out
    }

    pub fn save(&self, json_path: &Path, tsv_path: &Path) -> Result<()> {
        write_atomic(json_path, self.to_json()?.as_bytes())?;
        write_atomic(tsv_path, self.to_tsv().as_bytes())
    }
}

struct SampleCounts {
    key: (String, i32),
    leads: Vec<ConfusionCounts>,
}

fn load_target<T: Scalar>(manifest: &Manifest, e: &SampleEntry) -> Result<Tensor<T>> {
    let g = &manifest.geometry;
    let t: Tensor<T> = read_tensor_file(&manifest.resolve(&e.target))
        .map_err(|err| Error::Data(format!("missing or unreadable target for {}: {err}", e.target)))?;
    if t.dims() != [1, g.t_out, g.h_out, g.w_out] {
        return Err(Error::Data(format!(
            "target {} has dims {:?}, manifest declares {:?}",
            e.target,
            t.dims(),
            [1, g.t_out, g.h_out, g.w_out]
        )));
    }
    Ok(t)
}

fn tally_leads<T: Scalar>(pred_events: &Tensor<T>, obs_events: &Tensor<T>) -> Vec<ConfusionCounts> {
    (0..obs_events.c())
        .map(|c| ConfusionCounts::tally(pred_events.plane(0, c), obs_events.plane(0, c)))
        .collect()
}

fn assemble(
    per_sample: Vec<SampleCounts>,
    t_out: usize,
    baselines: Option<Baselines>,
    echo: EvalEcho,
) -> EvalReport {
    let mut groups: BTreeMap<(String, i32), (usize, Vec<ConfusionCounts>)> = BTreeMap::new();
    let mut per_lead_counts = vec![ConfusionCounts::default(); t_out];
    for s in &per_sample {
        let g = groups
            .entry(s.key.clone())
            .or_insert_with(|| (0, vec![ConfusionCounts::default(); t_out]));
        g.0 += 1;
        for (i, c) in s.leads.iter().enumerate() {
            g.1[i].add(c);
            per_lead_counts[i].add(c);
        }
    }
    let mut pooled = ConfusionCounts::default();
    per_lead_counts.iter().for_each(|c| pooled.add(c));
    let regions = groups
        .into_iter()
        .map(|((region, year), (samples, leads))| {
            let mut counts = ConfusionCounts::default();
            leads.iter().for_each(|c| counts.add(c));
            RegionScore {
                region,
                year,
                samples,
                csi: csi(&counts),
                counts,
                per_lead_csi: leads.iter().map(csi).collect(),
                per_lead_counts: leads,
            }
        })
        .collect();
    EvalReport {
        samples: per_sample.len(),
        pooled_csi: csi(&pooled),
        pooled_counts: pooled,
        per_lead_csi: per_lead_counts.iter().map(csi).collect(),
        per_lead_counts,
        regions,
        baselines,
        echo,
    }
}

/// CSI of the all-zeros, all-ones and persistence forecasts under the same
/// event definition as [`evaluate`]. Persistence repeats the last observed
/// rain field for every lead time.
pub fn trivial_baselines(manifest: &Manifest, split: Split, config: &EvalConfig) -> Result<Baselines> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::config(format!("split `{split}` is empty")));
    }
    let th = config.threshold as f32;
    let results: Vec<(ConfusionCounts, ConfusionCounts, Option<ConfusionCounts>)> = entries
        .par_iter()
        .map(|e| {
            let obs = binarize(&load_target::<f32>(manifest, e)?, th);
            let events = obs.data().iter().filter(|&&v| v > 0.0).count() as u64;
            let total = obs.len() as u64;
            let zeros = ConfusionCounts {
                fn_: events,
                tn: total - events,
                ..Default::default()
            };
            let ones = ConfusionCounts {
                tp: events,
                fp: total - events,
                ..Default::default()
            };
            let persistence = match &e.persistence {
                Some(p) => {
                    let field = binarize(&read_tensor_file::<f32>(&manifest.resolve(p))?, th);
                    if field.dims() != [1, 1, obs.h(), obs.w()] {
                        return Err(Error::Data(format!("persistence {p} has dims {:?}", field.dims())));
                    }
                    let mut c = ConfusionCounts::default();
                    for lead in 0..obs.c() {
                        c.add(&ConfusionCounts::tally(field.plane(0, 0), obs.plane(0, lead)));
                    }
                    Some(c)
                }
                None => None,
            };
            Ok((zeros, ones, persistence))
        })
        .collect::<Result<_>>()?;
    let mut z = ConfusionCounts::default();
    let mut o = ConfusionCounts::default();
    let mut p = Some(ConfusionCounts::default());
    for (zc, oc, pc) in &results {
        z.add(zc);
        o.add(oc);
        p = match (p, pc) {
            (Some(mut acc), Some(c)) => {
                acc.add(c);
                Some(acc)
            }
            _ => None,
        };
    }
    Ok(Baselines {
        zeros: csi(&z),
        ones: csi(&o),
        persistence: p.as_ref().map(csi),
    })
}

/// Scores predictions against the targets of `split`: predictions are
/// resized to the target grid, thresholded, and counted per
/// `(region, year, lead time)`. Baselines are included when
/// `with_baselines` is set.
pub fn evaluate<T: Scalar>(
    source: PredictionSource<'_, T>,
    manifest: &Manifest,
    split: Split,
    config: &EvalConfig,
    with_baselines: bool,
    run_echo: &serde_json::Value,
) -> Result<EvalReport> {
    config.validate()?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::config(format!("split `{split}` is empty")));
    }
    if matches!(source, PredictionSource::Ensemble(_)) && config.loss != LossKind::BceLogits {
        return Err(Error::config("ensembles average probabilities and need a bce-trained model"));
    }
    let g = &manifest.geometry;
    let th = T::lit(config.threshold);
    let per_sample = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let pred: Tensor<T> = match &source {
                PredictionSource::Model(m) => {
                    to_output_space(&m.infer(&load_sample::<T>(manifest, e)?.input)?, config.loss)
                }
                PredictionSource::Ensemble(ms) => {
                    ensemble_predict(ms, &load_sample::<T>(manifest, e)?.input, EnsembleMode::Average)?
                }
                PredictionSource::Directory(dir) => read_tensor_file(&prediction_path(dir, split, i))?,
            };
            if pred.n() != 1 || pred.c() != g.t_out {
                return Err(Error::shape(format!(
                    "prediction for sample {i} has dims {:?}, expected (1, {}, H, W)",
                    pred.dims(),
                    g.t_out
                )));
            }
            let obs = binarize(&load_target::<T>(manifest, e)?, th);
            let ev = events_from_prediction(&pred, g.h_out, g.w_out, config)?;
            Ok(SampleCounts {
                key: (e.region.clone(), e.year),
                leads: tally_leads(&ev, &obs),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let baselines = if with_baselines { Some(trivial_baselines(manifest, split, config)?) } else { None };
    let echo = EvalEcho {
        split,
        source: source.describe(),
        threshold: config.threshold,
        prob_threshold: config.prob_threshold,
        loss: config.loss,
        run: run_echo.clone(),
    };
    Ok(assemble(per_sample, g.t_out, baselines, echo))
}

pub fn evaluate_model<T: Scalar>(
    model: &SmaAtUNet<T>,
    manifest: &Manifest,
    split: Split,
    config: &EvalConfig,
) -> Result<EvalReport> {
    evaluate(PredictionSource::Model(model), manifest, split, config, true, &serde_json::Value::Null)
}

pub fn evaluate_prediction_dir(dir: &Path, manifest: &Manifest, split: Split, config: &EvalConfig) -> Result<EvalReport> {
    evaluate::<f32>(PredictionSource::Directory(dir), manifest, split, config, true, &serde_json::Value::Null)
}
