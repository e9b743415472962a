//! Synthetic advected-rain datasets.
//!
//! Each sample is a sum of Gaussian rain blobs drifting at a constant
//! velocity on a fine grid twice the coarse input resolution. Inputs are
//! per-band affine views of the 2×2 block-averaged field at the four input
//! times plus noise; targets are the fine field at the following `t_out`
//! steps. Velocities are in fine-grid pixels per time step.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{Geometry, Manifest, SampleEntry, Split, MANIFEST_FILE, MANIFEST_VERSION};
use super::preprocess::{band_stats, center_crop, select_bands, target_volume};
use super::tensor_file::{read_tensor_file, write_tensor_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Band order of the generated inputs.
pub const BANDS: [&str; 11] = [
    "IR016", "IR039", "IR087", "IR097", "IR108", "IR120", "IR134", "VIS006", "VIS008", "WV062", "WV073",
];

/// `(gain, offset)` per band applied to the coarse rain field.
const BAND_AFFINE: [(f64, f64); 11] = [
    (-6.0, 40.0),
    (-9.0, 270.0),
    (-12.0, 250.0),
    (-10.0, 255.0),
    (-14.0, 260.0),
    (-13.0, 258.0),
    (-8.0, 245.0),
    (0.15, 0.2),
    (0.12, 0.25),
    (-4.0, 235.0),
    (-5.0, 245.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Coarse input grid side; targets live on a `2 × grid` grid.
    pub grid: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub velocity: [f64; 2],
    /// Per-sample uniform perturbation of each velocity component.
    pub velocity_jitter: f64,
    pub blobs: usize,
    /// Blob standard deviation range, fine pixels.
    pub blob_scale: [f64; 2],
    /// Peak rain rate range, mm/h.
    pub amplitude: [f64; 2],
    /// Noise standard deviation, in rain-field units before the band affine.
    pub noise: f64,
    pub seed: u64,
    pub regions: Vec<String>,
    pub years: Vec<i32>,
    /// Calibrate the non-rainy threshold to the median train volume.
    pub calibrate_filter: bool,
    pub drop_bands: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 256,
            n_val: 64,
            n_test: 64,
            grid: 64,
            t_in: 4,
            t_out: 16,
            velocity: [0.75, 0.5],
            velocity_jitter: 0.25,
            blobs: 3,
            blob_scale: [5.0, 12.0],
            amplitude: [0.5, 4.0],
            noise: 0.05,
            seed: 0,
            regions: vec!["R1".into(), "R2".into()],
            years: vec![2019],
            calibrate_filter: true,
            drop_bands: vec!["WV062".into(), "WV073".into()],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 16 || self.t_in == 0 || self.t_out == 0 {
            return Err(Error::config("grid must be >= 16 and frame counts positive"));
        }
        if self.n_train == 0 {
            return Err(Error::config("n_train must be positive"));
        }
        if self.regions.is_empty() || self.years.is_empty() {
            return Err(Error::config("at least one region and one year required"));
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ordered(self.blob_scale) || !ordered(self.amplitude) {
            return Err(Error::config("blob_scale and amplitude need 0 < lo <= hi"));
        }
        if !(self.noise >= 0.0) || !(self.velocity_jitter >= 0.0) {
            return Err(Error::config("noise and velocity_jitter must be >= 0"));
        }
        if self.velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("velocity must be finite"));
        }
        for d in &self.drop_bands {
            if !BANDS.contains(&d.as_str()) {
                return Err(Error::config(format!("unknown band `{d}`")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

/// Latent parameters of one generated sample.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub persistence: Tensor<f32>,
    pub velocity: [f64; 2],
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(seed ^ (split as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407)) ^ index as u64)
}

fn render(blobs: &[Blob], velocity: [f64; 2], tau: f64, side: usize) -> Vec<f64> {
    let mut field = vec![0f64; side * side];
    for b in blobs {
        let (cx, cy) = (b.x + velocity[0] * tau, b.y + velocity[1] * tau);
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for y in 0..side {
            let dy = y as f64 + 0.5 - cy;
            let row = &mut field[y * side..(y + 1) * side];
            for (x, v) in row.iter_mut().enumerate() {
                let dx = x as f64 + 0.5 - cx;
                *v += b.amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    field
}

fn block_average(fine: &[f64], side: usize) -> Vec<f64> {
    let c = side / 2;
    let mut out = vec![0f64; c * c];
    for y in 0..c {
        for x in 0..c {
            let i = 2 * y * side + 2 * x;
            out[y * c + x] = 0.25 * (fine[i] + fine[i + 1] + fine[i + side] + fine[i + side + 1]);
        }
    }
    out
}

/// Generates one sample deterministically from `seed`.
pub fn synth_sample(config: &SynthConfig, seed: u64) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = 2 * config.grid;
    let j = config.velocity_jitter;
    let velocity = [
        config.velocity[0] + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 },
        config.velocity[1] + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 },
    ];
    let blobs: Vec<Blob> = (0..config.blobs)
        .map(|_| Blob {
            x: rng.random_range(0.0..fine as f64),
            y: rng.random_range(0.0..fine as f64),
            sigma: rng.random_range(config.blob_scale[0]..=config.blob_scale[1]),
            amp: rng.random_range(config.amplitude[0]..=config.amplitude[1]),
        })
        .collect();

    let g = config.grid;
    let nb = BANDS.len();
    let mut input = Vec::with_capacity(config.t_in * nb * g * g);
    for t in 0..config.t_in {
        let tau = t as f64 - (config.t_in - 1) as f64;
        let coarse = block_average(&render(&blobs, velocity, tau, fine), fine);
        for &(gain, offset) in &BAND_AFFINE {
            for &v in &coarse {
                let noise: f64 = if config.noise > 0.0 {
                    config.noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                input.push((offset + gain * (v + noise)) as f32);
            }
        }
    }
    let mut target = Vec::with_capacity(config.t_out * fine * fine);
    for t in 1..=config.t_out {
        target.extend(render(&blobs, velocity, t as f64, fine).into_iter().map(|v| v.max(0.0) as f32));
    }
    let persistence: Vec<f32> = render(&blobs, velocity, 0.0, fine).into_iter().map(|v| v.max(0.0) as f32).collect();
    Ok(SynthSample {
        input: Tensor::from_vec([1, config.t_in * nb, g, g], input)?,
        target: Tensor::from_vec([1, config.t_out, fine, fine], target)?,
        persistence: Tensor::from_vec([1, 1, fine, fine], persistence)?,
        velocity,
    })
}

fn timestamp(year: i32, index: usize) -> String {
    let base = NaiveDate::from_ymd_opt(year, 6, 1)
        .unwrap_or_default()
        .and_hms_opt(0, 0, 0)
        .unwrap_or_default();
    (base + Duration::minutes(60 * index as i64)).format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Writes a full dataset (tensor files plus `manifest.json`) under `out_dir`.
pub fn synth_generate(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let fine = 2 * config.grid;
    let band_names: Vec<String> = BANDS.iter().map(|s| s.to_string()).collect();
    let mut samples = Vec::new();
    for (split, n) in [(Split::Train, config.n_train), (Split::Val, config.n_val), (Split::Test, config.n_test)] {
        if n == 0 {
            continue;
        }
        let dir = out_dir.join(split.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n {
            let s = synth_sample(config, sample_seed(config.seed, split, i))?;
            let stem = format!("{split}/{i:06}");
            let entry = SampleEntry {
                input: format!("{stem}.input.w4cl"),
                target: format!("{stem}.target.w4cl"),
                persistence: Some(format!("{stem}.persist.w4cl")),
                region: config.regions[i % config.regions.len()].clone(),
                year: config.years[(i / config.regions.len()) % config.years.len()],
                split,
                timestamp: String::new(),
                target_sum: Some(target_volume(&s.target)),
            };
            let entry = SampleEntry {
                timestamp: timestamp(entry.year, i),
                ..entry
            };
            write_tensor_file(&out_dir.join(&entry.input), &s.input)?;
            write_tensor_file(&out_dir.join(&entry.target), &s.target)?;
            write_tensor_file(&out_dir.join(entry.persistence.as_ref().expect("set above")), &s.persistence)?;
            samples.push(entry);
        }
    }

    let filter_threshold = if config.calibrate_filter {
        let mut sums: Vec<f64> = samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .filter_map(|s| s.target_sum)
            .collect();
        sums.sort_by(f64::total_cmp);
        Some(sums[sums.len() / 2])
    } else {
        None
    };

    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        band_names,
        drop_bands: config.drop_bands.clone(),
        geometry: Geometry {
            t_in: config.t_in,
            t_out: config.t_out,
            h_raw: config.grid,
            w_raw: config.grid,
            crop: config.grid,
            h_out: fine,
            w_out: fine,
        },
        stats: Vec::new(),
        filter_threshold,
        samples,
        root: out_dir.to_path_buf(),
    };

    let mut stats_inputs = Vec::new();
    for e in manifest.split(Split::Train) {
        if filter_threshold.is_some_and(|th| e.target_sum.unwrap_or(0.0) < th) {
            continue;
        }
        let raw: Tensor<f32> = read_tensor_file(&manifest.resolve(&e.input))?;
        let x = select_bands(&raw, &manifest.band_names, &manifest.drop_bands, config.t_in)?;
        stats_inputs.push(center_crop(&x, manifest.geometry.crop)?);
    }
    manifest.stats = band_stats(&stats_inputs, &manifest.kept_bands(), config.t_in)?;
    manifest.validate()?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
