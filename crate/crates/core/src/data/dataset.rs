use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, SampleEntry, Split};
use super::preprocess::{center_crop, filter_non_rainy, normalize, select_bands, target_volume, FilterReport};
use super::tensor_file::read_tensor_file;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One preprocessed sample, each tensor with a leading batch axis of 1.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    pub persistence: Option<Tensor<T>>,
    pub region: String,
    pub year: i32,
    pub timestamp: String,
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    /// Positions of the batch members within their dataset or split.
    pub indices: Vec<usize>,
}

fn describe(entry: &SampleEntry) -> String {
    format!("{} ({}/{} {})", entry.input, entry.region, entry.year, entry.timestamp)
}

fn expect_dims(t: [usize; 4], want: [usize; 4], what: &str, entry: &SampleEntry) -> Result<()> {
    if t != want {
        return Err(Error::Data(format!(
            "sample {}: {what} dims {t:?}, manifest declares {want:?}",
            describe(entry)
        )));
    }
    Ok(())
}

/// Reads one sample and applies band removal, center crop and normalization.
pub fn load_sample<T: Scalar>(manifest: &Manifest, entry: &SampleEntry) -> Result<Sample<T>> {
    let g = &manifest.geometry;
    let raw: Tensor<T> = read_tensor_file(&manifest.resolve(&entry.input))?;
    expect_dims(
        raw.dims(),
        [1, g.t_in * manifest.band_names.len(), g.h_raw, g.w_raw],
        "input",
        entry,
    )?;
    let x = select_bands(&raw, &manifest.band_names, &manifest.drop_bands, g.t_in)?;
    let x = center_crop(&x, g.crop)?;
    let input = if manifest.stats.is_empty() { x } else { normalize(&x, &manifest.stats, g.t_in)? };
    let target: Tensor<T> = read_tensor_file(&manifest.resolve(&entry.target))?;
    expect_dims(target.dims(), [1, g.t_out, g.h_out, g.w_out], "target", entry)?;
    let persistence = match &entry.persistence {
        Some(p) => {
            let t: Tensor<T> = read_tensor_file(&manifest.resolve(p))?;
            expect_dims(t.dims(), [1, 1, g.h_out, g.w_out], "persistence", entry)?;
            Some(t)
        }
        None => None,
    };
    Ok(Sample {
        input,
        target,
        persistence,
        region: entry.region.clone(),
        year: entry.year,
        timestamp: entry.timestamp.clone(),
    })
}

/// Batch membership: a seeded permutation (or identity) cut into runs of
/// `batch_size`, last short run kept.
pub fn batch_order(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn stack_batch<T: Scalar>(samples: &[&Sample<T>], indices: Vec<usize>) -> Result<Batch<T>> {
    let inputs: Vec<&Tensor<T>> = samples.iter().map(|s| &s.input).collect();
    let targets: Vec<&Tensor<T>> = samples.iter().map(|s| &s.target).collect();
    Ok(Batch {
        input: Tensor::stack(&inputs)?,
        target: Tensor::stack(&targets)?,
        indices,
    })
}

/// An in-memory split.
#[derive(Clone, Debug, Default)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_samples(samples: Vec<Sample<T>>) -> Self {
        Dataset { samples }
    }

    /// Loads every sample of `split`. When `filter` is set and the manifest
    /// carries a threshold, non-rainy samples are dropped first.
    pub fn load(manifest: &Manifest, split: Split, filter: bool) -> Result<(Self, Option<FilterReport>)> {
        Self::load_entries(manifest, manifest.split(split), filter)
    }

    pub fn load_entries(
        manifest: &Manifest,
        entries: Vec<&SampleEntry>,
        filter: bool,
    ) -> Result<(Self, Option<FilterReport>)> {
        let (entries, report) = match manifest.filter_threshold {
            Some(th) if filter => {
                let (kept, report) = filter_non_rainy(
                    entries,
                    th,
                    |e| match e.target_sum {
                        Some(v) => Ok(v),
                        None => Ok(target_volume(&read_tensor_file::<f64>(&manifest.resolve(&e.target))?)),
                    },
                    |e| (e.region.clone(), e.year),
                )?;
                (kept, Some(report))
            }
            _ => (entries, None),
        };
        let samples = entries
            .into_iter()
            .map(|e| load_sample(manifest, e))
            .collect::<Result<Vec<_>>>()?;
        Ok((Dataset { samples }, report))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let picked: Vec<&Sample<T>> = indices.iter().map(|&i| &self.samples[i]).collect();
        stack_batch(&picked, indices.to_vec())
    }

    pub fn batches(&self, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch<T>>> {
        batch_order(self.len(), batch_size, seed, shuffle)?
            .iter()
            .map(|idx| self.batch(idx))
            .collect()
    }

    /// Splits off a seeded random `fraction` of samples (at least one) as a
    /// held-out set; returns `(rest, held_out)`.
    pub fn carve(self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::config(format!("need >= 2 samples to carve a validation set, have {n}")));
        }
        let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut held: Vec<usize> = order[..k].to_vec();
        held.sort_unstable();
        let (mut rest, mut out) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.into_iter().enumerate() {
            if held.binary_search(&i).is_ok() {
                out.push(s);
            } else {
                rest.push(s);
            }
        }
        Ok((Dataset { samples: rest }, Dataset { samples: out }))
    }
}

/// Lazily reads and preprocesses one batch at a time.
pub struct BatchIter<'a, T> {
    manifest: &'a Manifest,
    entries: Vec<&'a SampleEntry>,
    order: std::vec::IntoIter<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

pub fn batch_iter<'a, T: Scalar>(
    manifest: &'a Manifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<BatchIter<'a, T>> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::config(format!("split `{split}` is empty")));
    }
    let order = batch_order(entries.len(), batch_size, seed, shuffle)?;
    Ok(BatchIter {
        manifest,
        entries,
        order: order.into_iter(),
        _marker: std::marker::PhantomData,
    })
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.order.next()?;
        let load = || {
            let samples = idx
                .iter()
                .map(|&i| load_sample(self.manifest, self.entries[i]))
                .collect::<Result<Vec<Sample<T>>>>()?;
            let refs: Vec<&Sample<T>> = samples.iter().collect();
            stack_batch(&refs, idx.clone())
        };
        Some(load())
    }
}
