//! Confusion accumulation and pixel accuracy, mean accuracy and mean IoU.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i * k + j]` = pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    /// Ground-truth class whose pixels are skipped.
    ignore: Option<usize>,
}

impl ConfusionMatrix {
    pub fn new(k: usize, ignore: Option<usize>) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
            ignore,
        }
    }

    /// Build from explicit row-major counts.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Shape(format!("{} counts for k = {k}", counts.len())));
        }
        Ok(Self { k, counts, ignore: None })
    }

    pub fn class_count(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel pair of equally sized maps.
    pub fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        self.accumulate_flat(pred.iter().copied(), gt.iter().copied())
    }

    pub fn accumulate_flat(&mut self, pred: impl IntoIterator<Item = u8>, gt: impl IntoIterator<Item = u8>) -> Result<()> {
        for (p, t) in pred.into_iter().zip(gt) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::InvalidParam(format!("class index {} >= {}", p.max(t), self.k)));
            }
            if Some(t) == self.ignore {
                continue;
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("merging k = {} into k = {}", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.k..(i + 1) * self.k].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    /// `n_ii / sum_j n_ij`, undefined when the class never occurs.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|i| {
                let t = self.row_sum(i);
                (t > 0).then(|| self.get(i, i) as f64 / t as f64)
            })
            .collect()
    }

    /// `n_ii / (t_i + sum_j n_ji - n_ii)`, undefined when the class never occurs.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|i| {
                let t = self.row_sum(i);
                let union = t + self.col_sum(i) - self.get(i, i);
                (t > 0).then(|| self.get(i, i) as f64 / union as f64)
            })
            .collect()
    }
}

/// How class means treat absent classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanMode {
    /// Average over classes that occur in the ground truth.
    #[default]
    Present,
    /// Average over all `k` entries, absent classes counting as zero.
    Literal,
}

impl fmt::Display for MeanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeanMode::Present => "present",
            MeanMode::Literal => "literal",
        })
    }
}

impl FromStr for MeanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "present" => Ok(MeanMode::Present),
            "literal" => Ok(MeanMode::Literal),
            _ => Err(Error::Parse(format!("unknown mean mode `{s}`"))),
        }
    }
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Undefined("pixel accuracy of an empty matrix".into()));
    }
    let trace: u64 = (0..cm.k).map(|i| cm.get(i, i)).sum();
    Ok(trace as f64 / total as f64)
}

fn class_mean(values: &[Option<f64>], mode: MeanMode, what: &str) -> Result<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Undefined(format!("{what}: no class present")));
    }
    let sum: f64 = present.iter().sum();
    Ok(match mode {
        MeanMode::Present => sum / present.len() as f64,
        MeanMode::Literal => sum / values.len() as f64,
    })
}

pub fn mean_pixel_accuracy(cm: &ConfusionMatrix, mode: MeanMode) -> Result<f64> {
    class_mean(&cm.class_accuracy(), mode, "mean pixel accuracy")
}

pub fn mean_iou(cm: &ConfusionMatrix, mode: MeanMode) -> Result<f64> {
    class_mean(&cm.class_iou(), mode, "mean IoU")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pa: f64,
    pub mpa: f64,
    pub miou: f64,
    #[serde(skip)]
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    #[serde(skip)]
    pub counted_classes: usize,
    pub mode: MeanMode,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, mode: MeanMode) -> Result<Self> {
        let acc = cm.class_accuracy();
        Ok(Self {
            pa: pixel_accuracy(cm)?,
            mpa: mean_pixel_accuracy(cm, mode)?,
            miou: mean_iou(cm, mode)?,
            counted_classes: acc.iter().flatten().count(),
            per_class_accuracy: acc,
            per_class_iou: cm.class_iou(),
            mode,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_two_class_case() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        assert_eq!(pixel_accuracy(&cm).unwrap(), 0.75);
        assert_eq!(mean_pixel_accuracy(&cm, MeanMode::Present).unwrap(), 0.75);
        assert!((mean_iou(&cm, MeanMode::Present).unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn literal_mode_counts_absent_classes_as_zero() {
        let cm = ConfusionMatrix::from_counts(3, vec![0, 0, 0, 0, 2, 0, 0, 0, 2]).unwrap();
        assert_eq!(mean_pixel_accuracy(&cm, MeanMode::Present).unwrap(), 1.0);
        assert!((mean_pixel_accuracy(&cm, MeanMode::Literal).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ignore_index_skipped() {
        let mut cm = ConfusionMatrix::new(3, Some(0));
        let gt = Array2::from_shape_vec((1, 4), vec![0, 0, 1, 2]).unwrap();
        let pred = Array2::from_shape_vec((1, 4), vec![1, 2, 1, 1]).unwrap();
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.get(2, 1), 1);
    }

    #[test]
    fn empty_is_undefined() {
        let cm = ConfusionMatrix::new(4, None);
        assert!(matches!(pixel_accuracy(&cm), Err(Error::Undefined(_))));
        assert!(mean_iou(&cm, MeanMode::Present).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let mut cm = ConfusionMatrix::new(2, None);
        assert!(cm.accumulate(&Array2::zeros((2, 2)), &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn report_json_fields() {
        let cm = ConfusionMatrix::from_counts(3, vec![0, 0, 0, 0, 1, 1, 0, 0, 2]).unwrap();
        let json: serde_json::Value = serde_json::from_str(&MetricsReport::from_confusion(&cm, MeanMode::Present).unwrap().to_json().unwrap()).unwrap();
        let obj = json.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["miou", "mode", "mpa", "pa", "per_class_iou"]);
        assert!(obj["per_class_iou"][0].is_null());
        assert_eq!(obj["mode"], "present");
    }
}
