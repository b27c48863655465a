//! Snapshot sequences and their on-disk form: a directory holding
//! `manifest.json` and one `snapshot_<t>.csv` per time point.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub dim: usize,
    /// Number of transitions `T`; there are `T + 1` snapshots.
    pub transitions: usize,
    pub timestamps: Vec<f64>,
    pub generator: GeneratorInfo,
    pub seed: u64,
    pub split: String,
    pub labeled: bool,
}

/// An ordered sequence of point clouds `μ_0, …, μ_T`, optionally with an
/// integer label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    manifest: Manifest,
    snapshots: Vec<PointCloud>,
    labels: Option<Vec<Vec<u32>>>,
}

impl SnapshotDataset {
    pub fn new(
        name: impl Into<String>,
        snapshots: Vec<PointCloud>,
        timestamps: Vec<f64>,
        generator: GeneratorInfo,
        seed: u64,
        split: impl Into<String>,
    ) -> Result<Self> {
        let dim = snapshots.first().map(PointCloud::dim).ok_or_else(|| Error::invalid("dataset has no snapshots"))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            name: name.into(),
            dim,
            transitions: snapshots.len() - 1,
            timestamps,
            generator,
            seed,
            split: split.into(),
            labeled: false,
        };
        let ds = Self {
            manifest,
            snapshots,
            labels: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_labels(mut self, labels: Vec<Vec<u32>>) -> Result<Self> {
        self.labels = Some(labels);
        self.manifest.labeled = true;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.snapshots.is_empty() {
            return Err(Error::invalid("dataset has no snapshots"));
        }
        if m.transitions + 1 != self.snapshots.len() || m.timestamps.len() != self.snapshots.len() {
            return Err(Error::invalid(format!(
                "{} snapshots, {} timestamps, {} transitions",
                self.snapshots.len(),
                m.timestamps.len(),
                m.transitions
            )));
        }
        if m.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("timestamps must be strictly increasing"));
        }
        for s in &self.snapshots {
            s.check_dim(m.dim)?;
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.snapshots.len() || labels.iter().zip(&self.snapshots).any(|(l, s)| l.len() != s.len()) {
                return Err(Error::invalid("labels must give one entry per point of every snapshot"));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn snapshots(&self) -> &[PointCloud] {
        &self.snapshots
    }

    pub fn labels(&self) -> Option<&[Vec<u32>]> {
        self.labels.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn transitions(&self) -> usize {
        self.manifest.transitions
    }

    /// Same metadata with new point positions; labels are kept.
    pub fn with_snapshots(&self, snapshots: Vec<PointCloud>) -> Result<Self> {
        let ds = Self {
            manifest: self.manifest.clone(),
            snapshots,
            labels: self.labels.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Keeps every `stride`-th snapshot, starting with the first.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let keep: Vec<usize> = (0..self.snapshots.len()).step_by(stride).collect();
        let mut manifest = self.manifest.clone();
        manifest.timestamps = keep.iter().map(|&i| self.manifest.timestamps[i]).collect();
        manifest.transitions = keep.len() - 1;
        let ds = Self {
            manifest,
            snapshots: keep.iter().map(|&i| self.snapshots[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| keep.iter().map(|&i| l[i].clone()).collect()),
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn snapshot_file(t: usize) -> String {
    format!("snapshot_{t}.csv")
}

pub fn save_dataset(ds: &SnapshotDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest + "\n").map_err(|e| Error::io(&mpath, e))?;
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    for (t, cloud) in ds.snapshots.iter().enumerate() {
        let path = dir.join(snapshot_file(t));
        let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(&header).map_err(csv_err)?;
        for (i, p) in cloud.points().enumerate() {
            let mut row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            if let Some(labels) = &ds.labels {
                row.push(labels[t][i].to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SnapshotDataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let mut snapshots = Vec::new();
    let mut labels = Vec::new();
    for t in 0..=manifest.transitions {
        let path = dir.join(snapshot_file(t));
        let (cloud, lab) = read_snapshot(&path, manifest.dim, manifest.labeled)?;
        snapshots.push(cloud);
        labels.push(lab);
    }
    let ds = SnapshotDataset {
        labels: manifest.labeled.then_some(labels),
        manifest,
        snapshots,
    };
    ds.validate().map_err(|e| Error::format(&mpath, e.to_string()))?;
    Ok(ds)
}

fn read_snapshot(path: &Path, dim: usize, labeled: bool) -> Result<(PointCloud, Vec<u32>)> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let mut expected: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    if labeled {
        expected.push("label".into());
    }
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::format(
            path,
            format!("header {:?} does not match expected {:?}", header.iter().collect::<Vec<_>>(), expected),
        ));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        for (k, field) in rec.iter().enumerate() {
            let name = &expected[k];
            if k < dim {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(path, format!("line {line}, field {name}: cannot parse {field:?} as a number")))?;
                if !v.is_finite() {
                    return Err(Error::format(path, format!("line {line}, field {name}: non-finite value")));
                }
                data.push(v);
            } else {
                let l: u32 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(path, format!("line {line}, field {name}: cannot parse {field:?} as a class id")))?;
                labels.push(l);
            }
        }
    }
    Ok((PointCloud::new(dim, data)?, labels))
}
