//! Dataset ingestion: IDX image/label pairs, CSV tables and synthetic blobs.

pub mod blobs;
pub mod idx;

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Dataset;
use crate::{Error, Result};
pub use blobs::BlobsConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// IDX pixels divided by 255; CSV features min-max scaled per column.
    UnitInterval,
}

fn default_classes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    IdxPair {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default)]
        subsample: Option<usize>,
        #[serde(default)]
        normalization: Normalization,
    },
    Csv {
        path: PathBuf,
        /// Inferred as `max(label) + 1` when absent.
        #[serde(default)]
        classes: Option<usize>,
        #[serde(default)]
        subsample: Option<usize>,
        #[serde(default)]
        normalization: Normalization,
    },
    SyntheticBlobs(BlobsConfig),
}

impl DatasetSource {
    /// Files this source reads.
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            DatasetSource::IdxPair { images, labels, .. } => vec![images, labels],
            DatasetSource::Csv { path, .. } => vec![path],
            DatasetSource::SyntheticBlobs(_) => vec![],
        }
    }

    /// Resolves relative paths against `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSource::IdxPair { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DatasetSource::Csv { path, .. } => fix(path),
            DatasetSource::SyntheticBlobs(_) => {}
        }
    }
}

/// Loads a dataset. `seed` drives subsampling only.
pub fn ingest(source: &DatasetSource, seed: u64) -> Result<Dataset> {
    match source {
        DatasetSource::IdxPair {
            images,
            labels,
            classes,
            subsample,
            normalization,
        } => {
            let img = idx::read_images(images)?;
            let lab = idx::read_labels(labels, *classes)?;
            if img.count != lab.len() {
                return Err(Error::Parse {
                    path: labels.clone(),
                    reason: format!("{} labels for {} images", lab.len(), img.count),
                });
            }
            let scale = match normalization {
                Normalization::None => 1.0,
                Normalization::UnitInterval => 1.0 / 255.0,
            };
            let inputs = img.pixels.iter().map(|&b| f64::from(b) * scale).collect();
            let data = Dataset::from_labels(img.rows * img.cols, *classes, inputs, &lab)?;
            subsample_dataset(data, *subsample, seed)
        }
        DatasetSource::Csv {
            path,
            classes,
            subsample,
            normalization,
        } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let data = parse_csv(&text, path, *classes, *normalization)?;
            subsample_dataset(data, *subsample, seed)
        }
        DatasetSource::SyntheticBlobs(cfg) => blobs::generate(cfg),
    }
}

/// Keeps `count` examples chosen by a seeded draw, in ascending original
/// order and with their original ids.
pub fn subsample_dataset(data: Dataset, count: Option<usize>, seed: u64) -> Result<Dataset> {
    let Some(count) = count else {
        return Ok(data);
    };
    if count >= data.len() {
        return Ok(data);
    }
    if count == 0 {
        return Err(Error::Config("subsample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, data.len(), count).into_vec();
    picked.sort_unstable();
    data.select(&picked)
}

/// CSV with a header row; the column named `label` holds class indices and
/// every other column is a numeric feature.
pub fn parse_csv(
    text: &str,
    path: &Path,
    classes: Option<usize>,
    normalization: Normalization,
) -> Result<Dataset> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = columns
        .iter()
        .position(|&c| c == "label")
        .ok_or_else(|| parse_err(1, "no column named \"label\"".into()))?;
    let dim = columns.len() - 1;
    if dim == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(parse_err(
                i + 1,
                format!("expected {} fields, found {}", columns.len(), fields.len()),
            ));
        }
        for (c, f) in fields.iter().enumerate() {
            if c == label_col {
                let l: usize = f
                    .parse()
                    .map_err(|_| parse_err(i + 1, format!("bad label {f:?}")))?;
                labels.push(l);
            } else {
                let v: f64 = f
                    .parse()
                    .map_err(|_| parse_err(i + 1, format!("bad number {f:?}")))?;
                inputs.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let classes = match classes {
        Some(c) => c,
        None => labels.iter().max().copied().unwrap_or(0) + 1,
    };
    if let Some(pos) = labels.iter().position(|&l| l >= classes) {
        return Err(parse_err(
            pos + 2,
            format!("label {} out of range for {classes} classes", labels[pos]),
        ));
    }
    if normalization == Normalization::UnitInterval {
        for c in 0..dim {
            let col = inputs.iter().skip(c).step_by(dim);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            let span = hi - lo;
            for v in inputs.iter_mut().skip(c).step_by(dim) {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
    }
    Dataset::from_labels(dim, classes, inputs, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_pair_ingest_normalizes_and_one_hots() {
        let dir = tempfile::tempdir().unwrap();
        let images = idx::IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: [vec![0u8; 6], vec![255u8; 6]].concat(),
        };
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        std::fs::write(&ip, idx::encode_images(&images)).unwrap();
        std::fs::write(&lp, idx::encode_labels(&[0, 1])).unwrap();
        let source = DatasetSource::IdxPair {
            images: ip,
            labels: lp,
            classes: 10,
            subsample: None,
            normalization: Normalization::UnitInterval,
        };
        let d = ingest(&source, 0).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.input(0), &[0.0; 6]);
        assert_eq!(d.input(1), &[1.0; 6]);
        assert_eq!(d.target(0)[..2], [1.0, 0.0]);
        assert_eq!(d.target(1)[..2], [0.0, 1.0]);
        assert_eq!(d.classes(), 10);
    }

    #[test]
    fn missing_file_names_path() {
        let source = DatasetSource::Csv {
            path: PathBuf::from("/nonexistent/data.csv"),
            classes: None,
            subsample: None,
            normalization: Normalization::None,
        };
        let err = ingest(&source, 0).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/data.csv"));
        assert!(err.is_user_error());
    }

    #[test]
    fn csv_three_rows() {
        let text = "a,label,b\n1.0,0,2.0\n3.0,1,4.0\n5.0,2,6.0\n";
        let d = parse_csv(text, Path::new("t.csv"), None, Normalization::None).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.classes(), 3);
        assert_eq!(d.input(1), &[3.0, 4.0]);
        assert_eq!(d.labels(), vec![0, 1, 2]);

        let scaled = parse_csv(text, Path::new("t.csv"), None, Normalization::UnitInterval).unwrap();
        assert_eq!(scaled.input(1), &[0.5, 0.5]);

        assert!(parse_csv("a,b\n1,2\n", Path::new("t.csv"), None, Normalization::None).is_err());
        assert!(parse_csv("a,label\nx,0\n", Path::new("t.csv"), None, Normalization::None).is_err());
        assert!(parse_csv("a,label\n1,5\n", Path::new("t.csv"), Some(2), Normalization::None).is_err());
    }

    #[test]
    fn subsample_is_deterministic() {
        let labels: Vec<usize> = (0..60000).map(|i| i % 10).collect();
        let inputs: Vec<f64> = (0..60000).map(f64::from).collect();
        let data = Dataset::from_labels(1, 10, inputs, &labels).unwrap();
        let a = subsample_dataset(data.clone(), Some(100), 42).unwrap();
        let b = subsample_dataset(data.clone(), Some(100), 42).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.ids(), b.ids());
        assert!(a.ids().windows(2).all(|w| w[0] < w[1]));
        let c = subsample_dataset(data, Some(100), 43).unwrap();
        assert_ne!(a.ids(), c.ids());
    }

    #[test]
    fn source_config_parses() {
        let text = r#"
kind = "synthetic_blobs"
classes = 4
dim = 16
separation = 3.0
noise = 1.0
n = 100
seed = 1
"#;
        let s: DatasetSource = toml::from_str(text).unwrap();
        assert!(matches!(s, DatasetSource::SyntheticBlobs(_)));
        let bad = "kind = \"csv\"\npath = \"x\"\nbogus = 1\n";
        assert!(toml::from_str::<DatasetSource>(bad).is_err());
    }
}
