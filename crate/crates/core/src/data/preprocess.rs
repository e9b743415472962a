use std::collections::BTreeMap;

use serde::Serialize;

use super::manifest::BandStat;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Retained/removed counts for one `(region, year)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FilterCount {
    pub retained: usize,
    pub removed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub threshold: f64,
    pub retained: usize,
    pub removed: usize,
    /// Keyed by `"{region}/{year}"`.
    pub groups: BTreeMap<String, FilterCount>,
}

/// Total rain volume of a target tensor, accumulated in `f64`.
pub fn target_volume<T: Scalar>(target: &Tensor<T>) -> f64 {
    target.data().iter().map(|v| v.to_f64_lossless()).sum()
}

/// Keeps samples whose rain volume is at least `threshold`, preserving order.
pub fn filter_non_rainy<S>(
    samples: Vec<S>,
    threshold: f64,
    mut volume: impl FnMut(&S) -> Result<f64>,
    group: impl Fn(&S) -> (String, i32),
) -> Result<(Vec<S>, FilterReport)> {
    if !(threshold >= 0.0) {
        return Err(Error::config(format!("volume threshold must be >= 0, got {threshold}")));
    }
    let mut report = FilterReport {
        threshold,
        ..FilterReport::default()
    };
    let mut kept = Vec::with_capacity(samples.len());
    for s in samples {
        let (region, year) = group(&s);
        let count = report.groups.entry(format!("{region}/{year}")).or_default();
        if volume(&s)? >= threshold {
            count.retained += 1;
            report.retained += 1;
            kept.push(s);
        } else {
            count.removed += 1;
            report.removed += 1;
        }
    }
    Ok((kept, report))
}

/// Square center window of side `crop`; the offset is `(H - crop) / 2` rounded down.
pub fn center_crop<T: Scalar>(input: &Tensor<T>, crop: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims();
    if crop == 0 || crop > h || crop > w {
        return Err(Error::shape(format!("cannot crop {h}x{w} to {crop}x{crop}")));
    }
    if crop == h && crop == w {
        return Ok(input.clone());
    }
    let (top, left) = ((h - crop) / 2, (w - crop) / 2);
    let mut data = Vec::with_capacity(n * c * crop * crop);
    for s in 0..n {
        for ch in 0..c {
            let plane = input.plane(s, ch);
            for y in top..top + crop {
                data.extend_from_slice(&plane[y * w + left..y * w + left + crop]);
            }
        }
    }
    Tensor::from_vec([n, c, crop, crop], data)
}

/// Drops the named bands from every frame. Channels are frame-major: `t * bands + b`.
pub fn select_bands<T: Scalar>(
    input: &Tensor<T>,
    band_names: &[String],
    drop: &[String],
    t_in: usize,
) -> Result<Tensor<T>> {
    for d in drop {
        if !band_names.contains(d) {
            return Err(Error::config(format!("unknown band `{d}`; known: {band_names:?}")));
        }
    }
    let b = band_names.len();
    let [n, c, h, w] = input.dims();
    if c != t_in * b {
        return Err(Error::shape(format!(
            "{c} channels do not match {t_in} frames x {b} bands"
        )));
    }
    if drop.is_empty() {
        return Ok(input.clone());
    }
    let keep: Vec<usize> = (0..b).filter(|&i| !drop.contains(&band_names[i])).collect();
    let mut data = Vec::with_capacity(n * t_in * keep.len() * h * w);
    for s in 0..n {
        for t in 0..t_in {
            for &k in &keep {
                data.extend_from_slice(input.plane(s, t * b + k));
            }
        }
    }
    Tensor::from_vec([n, t_in * keep.len(), h, w], data)
}

fn check_stats<T>(input: &Tensor<T>, stats: &[BandStat], t_in: usize) -> Result<()> {
    if input.dims()[1] != t_in * stats.len() {
        return Err(Error::shape(format!(
            "{} channels do not match {t_in} frames x {} bands with stats",
            input.dims()[1],
            stats.len()
        )));
    }
    if let Some(bad) = stats.iter().find(|s| !(s.std > 0.0)) {
        return Err(Error::Manifest(format!("band `{}` has std {} <= 0", bad.band, bad.std)));
    }
    Ok(())
}

fn per_band<T: Scalar>(
    input: &Tensor<T>,
    stats: &[BandStat],
    t_in: usize,
    f: impl Fn(f64, &BandStat) -> f64,
) -> Result<Tensor<T>> {
    check_stats(input, stats, t_in)?;
    let b = stats.len();
    let mut out = input.clone();
    for s in 0..input.n() {
        for ch in 0..input.c() {
            let st = &stats[ch % b];
            out.plane_mut(s, ch)
                .iter_mut()
                .for_each(|v| *v = T::lit(f(v.to_f64_lossless(), st)));
        }
    }
    Ok(out)
}

/// Per-band z-score; the same statistics apply to every frame.
pub fn normalize<T: Scalar>(input: &Tensor<T>, stats: &[BandStat], t_in: usize) -> Result<Tensor<T>> {
    per_band(input, stats, t_in, |v, s| (v - s.mean) / s.std)
}

pub fn denormalize<T: Scalar>(input: &Tensor<T>, stats: &[BandStat], t_in: usize) -> Result<Tensor<T>> {
    per_band(input, stats, t_in, |v, s| v * s.std + s.mean)
}

/// Two-pass per-band mean and population standard deviation over all
/// samples, frames and pixels.
pub fn band_stats<T: Scalar>(inputs: &[Tensor<T>], bands: &[String], t_in: usize) -> Result<Vec<BandStat>> {
    let b = bands.len();
    if inputs.is_empty() {
        return Err(Error::Data("cannot compute band statistics of an empty set".into()));
    }
    for x in inputs {
        if x.c() != t_in * b {
            return Err(Error::shape(format!("{} channels, expected {}", x.c(), t_in * b)));
        }
    }
    let mut count = vec![0usize; b];
    let mut sum = vec![0f64; b];
    for x in inputs {
        for s in 0..x.n() {
            for ch in 0..x.c() {
                let p = x.plane(s, ch);
                count[ch % b] += p.len();
                sum[ch % b] += p.iter().map(|v| v.to_f64_lossless()).sum::<f64>();
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let mut sq = vec![0f64; b];
    for x in inputs {
        for s in 0..x.n() {
            for ch in 0..x.c() {
                let m = mean[ch % b];
                sq[ch % b] += x
                    .plane(s, ch)
                    .iter()
                    .map(|v| (v.to_f64_lossless() - m).powi(2))
                    .sum::<f64>();
            }
        }
    }
    Ok(bands
        .iter()
        .enumerate()
        .map(|(i, name)| BandStat {
            band: name.clone(),
            mean: mean[i],
            std: (sq[i] / count[i] as f64).sqrt(),
        })
        .collect())
}
