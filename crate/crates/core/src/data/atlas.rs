use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps every output dimension to one labeled region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasMap {
    region_labels: Vec<String>,
    dim_to_region: Vec<usize>,
}

impl AtlasMap {
    pub fn new(region_labels: Vec<String>, dim_to_region: Vec<usize>) -> Result<Self> {
        if region_labels.is_empty() || dim_to_region.is_empty() {
            return Err(Error::argument("atlas needs at least one region and one dimension"));
        }
        if let Some((d, r)) = dim_to_region
            .iter()
            .enumerate()
            .find(|(_, r)| **r >= region_labels.len())
        {
            return Err(Error::argument(format!(
                "dimension {d} maps to region {r}, but only {} labels exist",
                region_labels.len()
            )));
        }
        Ok(AtlasMap {
            region_labels,
            dim_to_region,
        })
    }

    /// Every dimension in one region.
    pub fn single_region(dims: usize, label: &str) -> Result<Self> {
        AtlasMap::new(vec![label.to_string()], vec![0; dims])
    }

    pub fn region_labels(&self) -> &[String] {
        &self.region_labels
    }

    pub fn dim_to_region(&self) -> &[usize] {
        &self.dim_to_region
    }

    pub fn n_regions(&self) -> usize {
        self.region_labels.len()
    }

    pub fn n_dims(&self) -> usize {
        self.dim_to_region.len()
    }

    /// Number of dimensions assigned to each region.
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_regions()];
        for &r in &self.dim_to_region {
            sizes[r] += 1;
        }
        sizes
    }

    /// Labels no dimension maps to.
    pub fn unused_regions(&self) -> Vec<&str> {
        self.region_sizes()
            .iter()
            .zip(&self.region_labels)
            .filter(|(s, _)| **s == 0)
            .map(|(_, l)| l.as_str())
            .collect()
    }
}

/// Reads a `dim_index,region_label` CSV. Rows may come in any order; an
/// optional header line is recognized by a non-numeric first field. Region
/// indices follow first appearance in dimension order.
pub fn load_atlas(path: &Path) -> Result<AtlasMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<(usize, String, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (idx, label) = line.split_once(',').ok_or_else(|| {
            Error::format(path, format!("line {}", lineno + 1), "expected dim_index,region_label")
        })?;
        let idx = idx.trim();
        let label = label.trim();
        match idx.parse::<usize>() {
            Ok(d) => {
                if label.is_empty() {
                    return Err(Error::format(path, format!("line {}", lineno + 1), "empty region label"));
                }
                entries.push((d, label.to_string(), lineno + 1));
            }
            Err(_) if entries.is_empty() && lineno == 0 => {} // header
            Err(_) => {
                return Err(Error::format(
                    path,
                    format!("line {}", lineno + 1),
                    format!("bad dimension index {idx:?}"),
                ))
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::format(path, "line 1", "atlas has no entries"));
    }
    entries.sort_by_key(|e| e.0);
    for (expected, (d, _, line)) in entries.iter().enumerate() {
        if *d != expected {
            let msg = if *d < expected {
                format!("duplicate dimension index {d}")
            } else {
                format!("missing dimension index {expected}")
            };
            return Err(Error::format(path, format!("line {line}"), msg));
        }
    }
    let mut labels: Vec<String> = Vec::new();
    let mut dim_to_region = Vec::with_capacity(entries.len());
    for (_, label, _) in entries {
        let r = match labels.iter().position(|l| *l == label) {
            Some(r) => r,
            None => {
                labels.push(label);
                labels.len() - 1
            }
        };
        dim_to_region.push(r);
    }
    AtlasMap::new(labels, dim_to_region)
}
