//! Scale-specialisation experiment: train on synthetic scenes with the
//! 0.5/1.0 pair, then compare fusion strategies on held-out scenes.

use crate::config::{ModelConfig, SyntheticConfig};
use crate::error::Result;
use crate::fusion::{argmax_prediction, FusionMode, ScaleSet};
use crate::inference::{forward_scales, fuse_outputs};
use crate::labels::IGNORE_ID;
use crate::segnet::Network;
use crate::trainer::{train, TrainConfig, TrainSummary};

use super::report::ScaleReport;
use super::{ConfusionMatrix, Dataset};

pub const EVAL_SCALES: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}


#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    /// Hierarchical fusion over {0.5, 1.0, 2.0}.
    pub hierarchical: f64,
    /// Average fusion over {0.5, 1.0, 2.0}.
    pub average: f64,
    /// Hierarchical fusion over {0.25, 0.5, 1.0, 2.0}.
    pub hierarchical_with_quarter: f64,
    pub report: ScaleReport,
    pub summary: TrainSummary,
    /// Line-delimited metrics log of the training run.
    pub log: String,
}

/// mIoU of every evaluated fusion, plus the three-scale weight report.
pub struct Evaluation {
    pub hierarchical: f64,
    pub average: f64,
    pub hierarchical_with_quarter: f64,
    pub report: ScaleReport,
}

/// Evaluates a trained network on `val`, sharing forward passes between
/// the fusion variants.
pub fn evaluate(net: &Network, val: &Dataset) -> Result<Evaluation> {
    let all = ScaleSet::new(EVAL_SCALES.to_vec())?;
    let classes = val.num_classes as usize;
    let mut cms = [
        ConfusionMatrix::new(classes),
        ConfusionMatrix::new(classes),
        ConfusionMatrix::new(classes),
    ];
    let mut report = ScaleReport::new(&EVAL_SCALES[1..], classes);
    for s in &val.samples {
        let (h, w) = (s.label.height(), s.label.width());
        let per_scale = forward_scales(net, &s.image, &all)?;
        let (hier, weights) = fuse_outputs(&per_scale[1..], FusionMode::Hierarchical, h, w)?;
        let (avg, _) = fuse_outputs(&per_scale[1..], FusionMode::Average, h, w)?;
        let (hier4, _) = fuse_outputs(&per_scale, FusionMode::Hierarchical, h, w)?;
        for (cm, logits) in cms.iter_mut().zip([&hier, &avg, &hier4]) {
            cm.add(&argmax_prediction(logits)?, &s.label, IGNORE_ID)?;
        }
        report.add(&weights.expect("hierarchical weights"), &s.label)?;
    }
    Ok(Evaluation {
        hierarchical: cms[0].mean_iou(),
        average: cms[1].mean_iou(),
        hierarchical_with_quarter: cms[2].mean_iou(),
        report,
    })
}

/// Trains one network from `seed` (initialisation and sampling) and
/// evaluates it. The data stream is the same for every seed.
pub fn run_seed(cfg: &ExperimentConfig, data: &(Dataset, Dataset), seed: u64) -> Result<SeedResult> {
    let (train_ds, val_ds) = data;
    let mut net = Network::build(
        cfg.model.trunk.clone(),
        cfg.model.num_classes,
        cfg.model.with_aux,
        seed,
    )?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut log = Vec::new();
    let summary = train(&mut net, train_ds, Some(val_ds), &train_cfg, &mut log)?;
    let eval = evaluate(&net, val_ds)?;
    Ok(SeedResult {
        seed,
        hierarchical: eval.hierarchical,
        average: eval.average,
        hierarchical_with_quarter: eval.hierarchical_with_quarter,
        report: eval.report,
        summary,
        log: String::from_utf8(log).expect("metrics log is UTF-8"),
    })
}
