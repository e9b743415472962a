use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub t_in: usize,
    pub t_out: usize,
    pub h_raw: usize,
    pub w_raw: usize,
    pub crop: usize,
    /// Target grid; typically `2 × crop`.
    pub h_out: usize,
    pub w_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandStat {
    pub band: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    /// Raw input, `(1, t_in × bands, h_raw, w_raw)`, path relative to the manifest.
    pub input: String,
    /// Rain rates in mm/h, `(1, t_out, h_out, w_out)`.
    pub target: String,
    /// Rain field at the last input time on the target grid, `(1, 1, h_out, w_out)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persistence: Option<String>,
    pub region: String,
    pub year: i32,
    pub split: Split,
    pub timestamp: String,
    /// Total target volume (sum over frames and pixels).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_sum: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub band_names: Vec<String>,
    #[serde(default)]
    pub drop_bands: Vec<String>,
    pub geometry: Geometry,
    /// Per retained band, computed over the train split after cropping.
    pub stats: Vec<BandStat>,
    /// Volume threshold for the non-rainy filter; applied to the train split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_threshold: Option<f64>,
    pub samples: Vec<SampleEntry>,
    /// Directory holding the manifest; sample paths resolve against it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        crate::model::write_atomic(path, text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {}", self.version)));
        }
        for d in &self.drop_bands {
            if !self.band_names.contains(d) {
                return Err(Error::Manifest(format!("drop band `{d}` not among band names")));
            }
        }
        let kept = self.kept_bands();
        if !self.stats.is_empty() {
            let names: Vec<&str> = self.stats.iter().map(|s| s.band.as_str()).collect();
            if names != kept.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::Manifest(format!(
                    "stats cover {names:?}, retained bands are {kept:?}"
                )));
            }
        }
        for s in &self.stats {
            if !(s.std > 0.0) || !s.mean.is_finite() || !s.std.is_finite() {
                return Err(Error::Manifest(format!("band `{}` has invalid stats", s.band)));
            }
        }
        let g = &self.geometry;
        if g.crop == 0 || g.crop > g.h_raw || g.crop > g.w_raw || g.t_in == 0 || g.t_out == 0 {
            return Err(Error::Manifest(format!("inconsistent geometry {g:?}")));
        }
        if let Some(t) = self.filter_threshold {
            if !(t >= 0.0) {
                return Err(Error::Manifest(format!("negative filter threshold {t}")));
            }
        }
        Ok(())
    }

    pub fn kept_bands(&self) -> Vec<String> {
        self.band_names
            .iter()
            .filter(|b| !self.drop_bands.contains(b))
            .cloned()
            .collect()
    }

    /// Model input channels after band removal.
    pub fn input_channels(&self) -> usize {
        self.geometry.t_in * self.kept_bands().len()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> Vec<&SampleEntry> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Distinct `(region, year)` pairs in first-appearance order.
    pub fn region_years(&self) -> Vec<(String, i32)> {
        let mut out: Vec<(String, i32)> = Vec::new();
        for s in &self.samples {
            let key = (s.region.clone(), s.year);
            if !out.contains(&key) {
                out.push(key);
            }
        }
        out
    }
}
