use crate::error::{bail, Result};
use crate::labels::LabelMap;

/// Counts of `(truth, prediction)` pairs over non-ignored truth pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    /// Truth pixels whose prediction is not a class id.
    unassigned: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            unassigned: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unassigned.iter().sum::<u64>()
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap, ignore_id: u8) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            bail!(
                Usage,
                "prediction is {}x{} but truth is {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            );
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == ignore_id {
                continue;
            }
            let t = t as usize;
            if t >= self.classes {
                bail!(Data, "truth label {t} outside {} classes", self.classes);
            }
            if (p as usize) < self.classes && p != ignore_id {
                self.counts[t * self.classes + p as usize] += 1;
            } else {
                self.unassigned[t] += 1;
            }
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp
                    + self.unassigned[c];
                let fp: u64 = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes present in truth or prediction; 0 when none are.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Per-class IoU and their mean for one prediction.
pub fn miou(
    pred: &LabelMap,
    truth: &LabelMap,
    num_classes: usize,
    ignore_id: u8,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, truth, ignore_id)?;
    Ok((cm.iou(), cm.mean_iou()))
}

/// Training cost of a scale set relative to a single full-resolution pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    scales: Vec<f64>,
}

impl CostModel {
    pub fn new(scales: &[f64]) -> Result<Self> {
        if scales.is_empty() {
            bail!(Config, "cost model needs at least one scale");
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            bail!(Config, "scales must be positive, got {s}");
        }
        Ok(Self {
            scales: scales.to_vec(),
        })
    }

    pub fn cost(scale: f64) -> f64 {
        scale * scale
    }

    pub fn total(&self) -> f64 {
        self.scales.iter().map(|&s| Self::cost(s)).sum()
    }
}

pub fn relative_training_cost(scales: &[f64]) -> Result<f64> {
    Ok(CostModel::new(scales)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unassigned_predictions_count_as_misses() {
        let truth = LabelMap::new(1, 2, 2, vec![0, 1]).unwrap();
        let pred = LabelMap::new(1, 2, 2, vec![0, 255]).unwrap();
        let (iou, mean) = miou(&pred, &truth, 2, 255).unwrap();
        assert_eq!(iou, vec![Some(1.0), Some(0.0)]);
        assert_eq!(mean, 0.5);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let truth = LabelMap::filled(2, 2, 3, 1).unwrap();
        let (iou, mean) = miou(&truth, &truth, 3, 255).unwrap();
        assert_eq!(iou, vec![None, Some(1.0), None]);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn cost_needs_positive_scales() {
        assert!(relative_training_cost(&[]).is_err());
        assert!(relative_training_cost(&[0.5, -1.0]).is_err());
        assert_eq!(relative_training_cost(&[1.0]).unwrap(), 1.0);
    }
}
