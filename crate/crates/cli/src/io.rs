use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use ndarray::{Array2, ArrayView2};
use serde::Serialize;
use sha2::{Digest, Sha256};

use more_core::data::{load_matrix, load_matrix_csv, save_matrix, LabeledMatrix, MatrixFormat};

/// CSV files may start with a header; it is recognized by a non-numeric
/// second field on the first line.
fn csv_has_header(path: &Path) -> anyhow::Result<bool> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut first = String::new();
    BufReader::new(f).read_line(&mut first)?;
    let fields: Vec<&str> = first.trim().split(',').map(str::trim).collect();
    Ok(fields.len() >= 2 && fields[1].parse::<f64>().is_err())
}

pub fn read_matrix(path: &Path) -> anyhow::Result<LabeledMatrix> {
    match MatrixFormat::from_path(path) {
        MatrixFormat::Bin => Ok(LabeledMatrix {
            values: load_matrix(path, MatrixFormat::Bin)?,
            ids: None,
        }),
        MatrixFormat::Csv => Ok(load_matrix_csv(path, csv_has_header(path)?)?),
    }
}

pub fn write_matrix(path: &Path, m: ArrayView2<'_, f64>) -> anyhow::Result<()> {
    save_matrix(path, m, MatrixFormat::from_path(path))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `<dir>/<stem>.<suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Formats an optional float for CSV; missing values are empty cells.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

fn digest(path: &Path) -> anyhow::Result<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Provenance record written once per run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub threads: usize,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn start<T: Serialize>(command: &str, threads: usize, config: &T) -> anyhow::Result<Self> {
        Ok(ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                threads,
                config: serde_json::to_value(config)?,
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_unix: unix_now(),
                finished_unix: 0.0,
            },
        })
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest.inputs.push(digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest.outputs.push(digest(path)?);
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest.finished_unix = unix_now();
        write_json(path, &self.manifest)
    }
}

/// Reads inputs and, optionally, targets; row counts must agree.
pub fn read_pair(x: &Path, y: Option<&Path>) -> anyhow::Result<(LabeledMatrix, Option<Array2<f64>>)> {
    let xm = read_matrix(x)?;
    let ym = match y {
        Some(p) => {
            let ym = read_matrix(p)?.values;
            if ym.nrows() != xm.values.nrows() {
                anyhow::bail!(
                    "{} has {} rows but {} has {}",
                    x.display(),
                    xm.values.nrows(),
                    p.display(),
                    ym.nrows()
                );
            }
            Some(ym)
        }
        None => None,
    };
    Ok((xm, ym))
}
