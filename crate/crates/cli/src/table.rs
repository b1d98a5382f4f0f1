//! CSV inputs for plotting. Errors name the file, row and column.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use csv::StringRecord;

#[derive(Clone, Debug)]
pub struct Table {
    pub path: PathBuf,
    pub headers: Vec<String>,
    rows: Vec<StringRecord>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let headers = reader
            .headers()
            .with_context(|| format!("{}: reading header", path.display()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            rows.push(record.with_context(|| format!("{}: row {}", path.display(), i + 1))?);
        }
        if rows.is_empty() {
            bail!("{}: no data rows", path.display());
        }
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Short label: the parent directory for `metrics.csv`, else the file stem.
    pub fn label(&self) -> String {
        let stem = self.path.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
        if stem == "metrics" {
            if let Some(parent) = self.path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
                return parent.to_string();
            }
        }
        stem.to_string()
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{}: missing column `{name}`", self.path.display()))
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r.get(c).unwrap_or("").to_string()).collect())
    }

    /// Empty cells become `None`.
    pub fn optional(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cell = r.get(c).unwrap_or("").trim();
                if cell.is_empty() {
                    return Ok(None);
                }
                cell.parse().map(Some).map_err(|_| {
                    anyhow!("{}: row {}: column `{name}`: invalid number {cell:?}", self.path.display(), i + 1)
                })
            })
            .collect()
    }

    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        self.optional(name)?
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| anyhow!("{}: row {}: column `{name}` is empty", self.path.display(), i + 1))
            })
            .collect()
    }
}
