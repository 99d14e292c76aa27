//! Model files: a JSON manifest whose matrices are stored in the binary
//! matrix layout, either embedded (base64) or as sibling `.bin` files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::matrix_io::{decode_bin, encode_bin, write_file};
use crate::baseline::RidgeModel;
use crate::error::{Error, Result};
use crate::model::{Expert, GatingNetwork, MixtureModel};

pub const MODEL_FORMAT_VERSION: &str = "1";

/// A model read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Mixture(MixtureModel),
    Ridge(RidgeModel),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Mixture(_) => "mixture",
            SavedModel::Ridge(_) => "ridge",
        }
    }

    /// Predictions for every row of `x`.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self {
            SavedModel::Mixture(m) => m.predict(x),
            SavedModel::Ridge(r) => r.predict(x),
        }
    }
}

impl From<MixtureModel> for SavedModel {
    fn from(m: MixtureModel) -> Self {
        SavedModel::Mixture(m)
    }
}

impl From<RidgeModel> for SavedModel {
    fn from(m: RidgeModel) -> Self {
        SavedModel::Ridge(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatrixLayout {
    #[default]
    Embedded,
    /// One `<stem>.<name>.bin` file per matrix next to the manifest.
    Sibling,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MatrixEntry {
    Embedded(String),
    File(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    #[serde(rename = "type")]
    kind: String,
    k: usize,
    n: usize,
    m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variance_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    matrices: BTreeMap<String, MatrixEntry>,
}

fn model_err(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

pub fn save_model(path: &Path, model: &SavedModel, layout: MatrixLayout) -> Result<()> {
    let mut named: Vec<(String, Array2<f64>)> = Vec::new();
    let manifest_base = match model {
        SavedModel::Mixture(mm) => {
            named.push(("gating".into(), mm.gating().params().to_owned()));
            let mut variances = Array2::zeros((mm.k(), mm.output_dim()));
            for (j, e) in mm.experts().iter().enumerate() {
                named.push((format!("weights_{j}"), e.weights().to_owned()));
                variances.row_mut(j).assign(&e.variances());
            }
            named.push(("variances".into(), variances));
            Manifest {
                format_version: MODEL_FORMAT_VERSION.into(),
                kind: "mixture".into(),
                k: mm.k(),
                n: mm.input_dim(),
                m: mm.output_dim(),
                variance_floor: Some(mm.variance_floor()),
                lambda: None,
                matrices: BTreeMap::new(),
            }
        }
        SavedModel::Ridge(r) => {
            named.push(("weights".into(), r.weights().to_owned()));
            Manifest {
                format_version: MODEL_FORMAT_VERSION.into(),
                kind: "ridge".into(),
                k: 1,
                n: r.input_dim(),
                m: r.output_dim(),
                variance_floor: None,
                lambda: Some(r.lambda()),
                matrices: BTreeMap::new(),
            }
        }
    };
    let mut manifest = manifest_base;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    for (name, m) in named {
        let bytes = encode_bin(m.view());
        let entry = match layout {
            MatrixLayout::Embedded => MatrixEntry::Embedded(STANDARD.encode(&bytes)),
            MatrixLayout::Sibling => {
                let file = format!("{stem}.{name}.bin");
                write_file(&sibling(path, &file), &bytes)?;
                MatrixEntry::File(file)
            }
        };
        manifest.matrices.insert(name, entry);
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| model_err(e.to_string()))?;
    write_file(path, json.as_bytes())
}

fn sibling(manifest: &Path, file: &str) -> PathBuf {
    manifest
        .parent()
        .map(|d| d.join(file))
        .unwrap_or_else(|| PathBuf::from(file))
}

fn read_matrix(path: &Path, manifest: &Manifest, name: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
    let entry = manifest
        .matrices
        .get(name)
        .ok_or_else(|| model_err(format!("matrix {name:?} missing from manifest")))?;
    let (bytes, origin) = match entry {
        MatrixEntry::Embedded(b64) => (
            STANDARD
                .decode(b64)
                .map_err(|e| model_err(format!("matrix {name:?}: bad base64: {e}")))?,
            path.to_path_buf(),
        ),
        MatrixEntry::File(file) => {
            let p = sibling(path, file);
            (fs::read(&p).map_err(|e| Error::io(&p, e))?, p)
        }
    };
    let m = decode_bin(&bytes, &origin).map_err(|e| model_err(format!("matrix {name:?}: {e}")))?;
    if m.dim() != shape {
        return Err(model_err(format!(
            "matrix {name:?} is {:?}, manifest implies {shape:?}",
            m.dim()
        )));
    }
    Ok(m)
}

/// Loads a model and re-validates every invariant.
pub fn load_model(path: &Path) -> Result<SavedModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| model_err(format!("{}: {e}", path.display())))?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(model_err(format!(
            "format version {:?} is not supported (expected {MODEL_FORMAT_VERSION:?})",
            manifest.format_version
        )));
    }
    let (k, n, m) = (manifest.k, manifest.n, manifest.m);
    if k == 0 || n == 0 || m == 0 {
        return Err(model_err(format!("invalid dimensions k={k} n={n} m={m}")));
    }
    let invalid = |e: Error| model_err(format!("invariant violated: {e}"));
    match manifest.kind.as_str() {
        "mixture" => {
            let floor = manifest
                .variance_floor
                .ok_or_else(|| model_err("mixture model without variance_floor"))?;
            let gating = read_matrix(path, &manifest, "gating", (k, n))?;
            let variances = read_matrix(path, &manifest, "variances", (k, m))?;
            let mut experts = Vec::with_capacity(k);
            for j in 0..k {
                let w = read_matrix(path, &manifest, &format!("weights_{j}"), (m, n))?;
                experts.push(Expert::strict(w, variances.row(j).to_owned(), floor).map_err(invalid)?);
            }
            let gating = GatingNetwork::new(gating).map_err(invalid)?;
            Ok(SavedModel::Mixture(
                MixtureModel::new(experts, gating, floor).map_err(invalid)?,
            ))
        }
        "ridge" => {
            let lambda = manifest
                .lambda
                .ok_or_else(|| model_err("ridge model without lambda"))?;
            let w = read_matrix(path, &manifest, "weights", (m, n))?;
            Ok(SavedModel::Ridge(RidgeModel::new(w, lambda).map_err(invalid)?))
        }
        other => Err(model_err(format!("unknown model type {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VARIANCE_FLOOR;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mixture() -> MixtureModel {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let experts = (0..3)
            .map(|_| {
                Expert::new(
                    Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0) / 3.0),
                    Array1::from_shape_fn(2, |_| rng.random_range(0.01..1.0)),
                    VARIANCE_FLOOR,
                )
                .unwrap()
            })
            .collect();
        let gating = GatingNetwork::new(Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)))
            .unwrap();
        MixtureModel::new(experts, gating, VARIANCE_FLOOR).unwrap()
    }

    #[test]
    fn round_trip_both_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let mm = SavedModel::Mixture(mixture());
        let ridge = SavedModel::Ridge(RidgeModel::new(array![[0.1, 1.0 / 3.0]], 0.25).unwrap());
        for layout in [MatrixLayout::Embedded, MatrixLayout::Sibling] {
            for (name, model) in [("mix.json", &mm), ("ridge.json", &ridge)] {
                let p = dir.path().join(format!("{layout:?}-{name}"));
                save_model(&p, model, layout).unwrap();
                let back = load_model(&p).unwrap();
                assert_eq!(&back, model);
                assert_eq!(back.kind(), model.kind());
            }
        }
    }

    #[test]
    fn tampered_variance_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&p, &SavedModel::Mixture(mixture()), MatrixLayout::Sibling).unwrap();
        let var_file = dir.path().join("m.variances.bin");
        let mut bytes = fs::read(&var_file).unwrap();
        bytes[24..32].copy_from_slice(&(-0.5f64).to_le_bytes());
        fs::write(&var_file, bytes).unwrap();
        let e = load_model(&p).unwrap_err();
        assert!(matches!(e, Error::ModelFormat(_)), "{e}");
    }

    #[test]
    fn version_and_type_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&p, &SavedModel::Mixture(mixture()), MatrixLayout::Embedded).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, text.replace("\"format_version\": \"1\"", "\"format_version\": \"2\"")).unwrap();
        assert!(load_model(&p).unwrap_err().to_string().contains("version"));
        fs::write(&p, text.replace("\"mixture\"", "\"forest\"")).unwrap();
        assert!(load_model(&p).unwrap_err().to_string().contains("unknown model type"));
    }
}
