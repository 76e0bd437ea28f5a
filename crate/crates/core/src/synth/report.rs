//! Per-class mean effective weight of every inference scale.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{bail, Result};
use crate::fusion::{FusionMode, ScaleSet};
use crate::inference::predict;
use crate::labels::{LabelMap, IGNORE_ID};
use crate::pgm::write_pgm;
use crate::segnet::Network;
use crate::tensor::Tensor;

use super::{Dataset, CLASS_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleReport {
    pub scales: Vec<f64>,
    /// `sums[class][scale]`, divided by `pixels[class]` for the mean.
    sums: Vec<Vec<f64>>,
    pixels: Vec<u64>,
}

impl ScaleReport {
    pub fn new(scales: &[f64], num_classes: usize) -> Self {
        Self {
            scales: scales.to_vec(),
            sums: vec![vec![0.0; scales.len()]; num_classes],
            pixels: vec![0; num_classes],
        }
    }

    /// Adds one image's `[1, H, W]` weight maps against its truth labels.
    pub fn add(&mut self, weights: &[Tensor<f32>], truth: &LabelMap) -> Result<()> {
        if weights.len() != self.scales.len() {
            bail!(Usage, "{} weight maps for {} scales", weights.len(), self.scales.len());
        }
        for w in weights {
            if w.len() != truth.len() {
                bail!(Dimension, "weight map {:?} does not match {}x{} labels", w.shape(), truth.height(), truth.width());
            }
        }
        for (p, &c) in truth.data().iter().enumerate() {
            if c == IGNORE_ID || c as usize >= self.pixels.len() {
                continue;
            }
            self.pixels[c as usize] += 1;
            for (s, w) in weights.iter().enumerate() {
                self.sums[c as usize][s] += w.data()[p] as f64;
            }
        }
        Ok(())
    }

    /// Mean weight of scale index `s` over pixels of `class`.
    pub fn mean(&self, class: usize, s: usize) -> Option<f64> {
        (self.pixels[class] > 0).then(|| self.sums[class][s] / self.pixels[class] as f64)
    }

    pub fn scale_index(&self, scale: f64) -> Option<usize> {
        self.scales.iter().position(|&s| (s - scale).abs() < 1e-12)
    }

    pub fn num_classes(&self) -> usize {
        self.pixels.len()
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<16}", "class");
        for s in &self.scales {
            let _ = write!(out, " {:>8}", format!("r={s}"));
        }
        out.push('\n');
        for c in 0..self.num_classes() {
            let name = CLASS_NAMES.get(c).map_or_else(|| format!("class {c}"), |n| n.to_string());
            let _ = write!(out, "{name:<16}");
            for s in 0..self.scales.len() {
                match self.mean(c, s) {
                    Some(m) => {
                        let _ = write!(out, " {m:>8.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>8}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs hierarchical inference over `ds` and averages effective weights per
/// truth class.
pub fn attention_scale_report(net: &Network, ds: &Dataset, scales: &ScaleSet) -> Result<ScaleReport> {
    let mut report = ScaleReport::new(scales.scales(), ds.num_classes as usize);
    for s in &ds.samples {
        let pred = predict(net, &s.image, scales, FusionMode::Hierarchical)?;
        let weights = pred.effective_weights.expect("hierarchical fusion defines weights");
        report.add(&weights, &s.label)?;
    }
    Ok(report)
}

/// Writes `report.txt` and one `weights_r<scale>.pgm` per scale for the
/// first image of `ds`.
pub fn write_report(
    dir: &Path,
    net: &Network,
    ds: &Dataset,
    scales: &ScaleSet,
    report: &ScaleReport,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let table = dir.join("report.txt");
    std::fs::write(&table, report.table())?;
    written.push(table);
    if let Some(first) = ds.samples.first() {
        let pred = predict(net, &first.image, scales, FusionMode::Hierarchical)?;
        for (s, w) in scales.scales().iter().zip(pred.effective_weights.unwrap_or_default()) {
            let path = dir.join(format!("weights_r{s}.pgm"));
            write_pgm(&path, &w)?;
            written.push(path);
        }
    }
    Ok(written)
}
