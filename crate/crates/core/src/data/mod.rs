//! Datasets, atlases, file formats and the synthetic mixture generator.

mod atlas;
mod matrix_io;
mod model_io;
mod synthetic;

pub use atlas::{load_atlas, AtlasMap};
pub use matrix_io::{
    decode_bin, encode_bin, load_matrix, load_matrix_csv, save_matrix, save_matrix_csv,
    LabeledMatrix, MatrixFormat, BIN_MAGIC,
};
pub use model_io::{load_model, save_model, MatrixLayout, SavedModel, MODEL_FORMAT_VERSION};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::numerics::ensure_finite;

/// Paired stimulus embeddings `x` (`N×n`) and target activations `y`
/// (`N×m`). Targets may be absent for prediction-only inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Option<Array2<f64>>,
    ids: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::argument(format!(
                "x has {} rows but y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        ensure_finite(x.view(), "inputs")?;
        ensure_finite(y.view(), "targets")?;
        Ok(Dataset {
            x,
            y: Some(y),
            ids: None,
        })
    }

    pub fn inputs_only(x: Array2<f64>) -> Result<Self> {
        ensure_finite(x.view(), "inputs")?;
        Ok(Dataset { x, y: None, ids: None })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.x.nrows() {
            return Err(Error::argument(format!(
                "{} ids for {} samples",
                ids.len(),
                self.x.nrows()
            )));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    /// Targets, or an argument error when the dataset has none.
    pub fn y(&self) -> Result<ArrayView2<'_, f64>> {
        self.y
            .as_ref()
            .map(|y| y.view())
            .ok_or_else(|| Error::argument("dataset has no targets"))
    }

    pub fn has_targets(&self) -> bool {
        self.y.is_some()
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    /// Label of sample `i`: its id if present, else its row index.
    pub fn id(&self, i: usize) -> String {
        match &self.ids {
            Some(ids) => ids[i].clone(),
            None => i.to_string(),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.y.as_ref().map(|y| y.ncols())
    }

    /// New dataset holding the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.as_ref().map(|y| y.select(Axis(0), rows)),
            ids: self
                .ids
                .as_ref()
                .map(|ids| rows.iter().map(|&r| ids[r].clone()).collect()),
        }
    }
}
