//! Dense class-id maps shared by ground truth, predictions and pseudo-labels.

use crate::error::{bail, Result};

/// Reserved id excluded from losses and metrics.
pub const IGNORE_ID: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: u8,
    data: Vec<u8>,
}

impl LabelMap {
    /// Checks every value is a valid class id or [`IGNORE_ID`].
    pub fn new(height: usize, width: usize, num_classes: u8, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Dimension, "label map must be at least 1x1");
        }
        if num_classes == 0 || num_classes == IGNORE_ID {
            bail!(Config, "num_classes must be in 1..=254, got {num_classes}");
        }
        if data.len() != height * width {
            bail!(
                Dimension,
                "{}x{} label map needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            );
        }
        if let Some((i, &v)) = data
            .iter()
            .enumerate()
            .find(|&(_, &v)| v != IGNORE_ID && v >= num_classes)
        {
            bail!(
                Data,
                "label {v} at pixel {i} is not a class id below {num_classes} or the ignore id"
            );
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: u8, value: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}
