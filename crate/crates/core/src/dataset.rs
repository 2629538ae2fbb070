//! Labelled input vectors for accuracy measurements.
//!
//! JSON: `{"input_shape": [..], "bits": 8, "num_classes": 10,
//! "inputs": [[..], ..], "labels": [..]}`.
//! CSV: header-less rows of `label,x0,x1,...`; shape is a flat vector and
//! precision defaults to 8 bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::QuantTensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub input_shape: Vec<usize>,
    pub bits: u32,
    pub num_classes: usize,
    pub inputs: Vec<Vec<i32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::EmptyInput);
        }
        if self.inputs.len() != self.labels.len() {
            return Err(Error::shape(format!(
                "{} inputs but {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let width: usize = self.input_shape.iter().product();
        let top = (1i64 << self.bits) - 1;
        for (i, x) in self.inputs.iter().enumerate() {
            if x.len() != width {
                return Err(Error::shape(format!(
                    "sample {i} has {} values, expected {width}",
                    x.len()
                )));
            }
            if let Some(&v) = x.iter().find(|&&v| v < 0 || v as i64 > top) {
                return Err(Error::OutOfRange {
                    value: v as i64,
                    lo: 0,
                    hi: top,
                });
            }
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::shape(format!(
                "label {l} outside {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> QuantTensor {
        QuantTensor::new(
            self.input_shape.clone(),
            self.inputs[i].clone(),
            self.bits,
            false,
        )
        .expect("validated on load")
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_csv(text: &str, num_classes: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let mut fields = rec.iter();
            let label = fields
                .next()
                .ok_or_else(|| Error::Format("empty CSV row".into()))?
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("bad label: {e}")))?;
            let x = fields
                .map(|f| {
                    f.trim()
                        .parse::<i32>()
                        .map_err(|e| Error::Format(format!("bad value: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(label);
            inputs.push(x);
        }
        let width = inputs.first().map_or(0, Vec::len);
        let ds = Self {
            input_shape: vec![width],
            bits: 8,
            num_classes,
            inputs,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Loads by extension: `.csv` as CSV (10 classes), anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
        {
            Self::from_csv(&text, 10)
        } else {
            Self::from_json(&text)
        }
    }

    /// Input shape reinterpreted for a model expecting `shape` (same length).
    pub fn with_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        let want: usize = shape.iter().product();
        let have: usize = self.input_shape.iter().product();
        if want != have {
            return Err(Error::shape(format!(
                "cannot view {have}-value samples as {shape:?}"
            )));
        }
        self.input_shape = shape;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json_agree() {
        let csv = "1,0,255,3\n0,4,5,6\n";
        let a = Dataset::from_csv(csv, 2).unwrap();
        let json = r#"{"input_shape":[3],"bits":8,"num_classes":2,"inputs":[[0,255,3],[4,5,6]],"labels":[1,0]}"#;
        let b = Dataset::from_json(json).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_bad_datasets_rejected() {
        assert!(matches!(Dataset::from_csv("", 10), Err(Error::EmptyInput)));
        assert!(Dataset::from_csv("1,2\n0,1,2\n", 10).is_err());
        assert!(Dataset::from_csv("12,2\n", 10).is_err());
        assert!(Dataset::from_csv("1,256\n", 10).is_err());
    }

    #[test]
    fn bundled_dataset_loads() {
        let ds = Dataset::from_json(include_str!("../fixtures/digits_test.json")).unwrap();
        assert_eq!(ds.len(), 600);
        assert_eq!(ds.num_classes, 10);
        assert_eq!(ds.input_shape, vec![64]);
    }
}
