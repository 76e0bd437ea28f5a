//! Binary greymap (P5) output for heatmaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Encodes a `[H, W]` or `[1, H, W]` map, mapping `[0, 1]` linearly to `0..=255`.
pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let [_, c, h, w] = map.dims4();
    if c != 1 || map.shape().len() < 2 {
        bail!(Dimension, "heatmaps are single-channel, got {:?}", map.shape());
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    let bytes = encode_pgm(map)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
