//! Hard pseudo-labels from teacher logits, their on-disk format, and the
//! storage arithmetic comparing soft and hard labels.
//!
//! Label files: `b"HMSL"`, version `0x01`, `u32` LE width, `u32` LE height,
//! `u8` class count, then `height × width` class bytes in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{bail, Error, Result};
use crate::fusion::{FusionMode, ScaleSet};
use crate::inference::predict;
use crate::labels::{LabelMap, IGNORE_ID};
use crate::segnet::{LogitMap, Network};
use crate::tensor::io::load_tensor;
use crate::tensor::kernels::softmax_channels;

pub const MAGIC: &[u8; 4] = b"HMSL";
pub const VERSION: u8 = 0x01;
pub const DEFAULT_THRESHOLD: f64 = 0.9;

/// Keeps the argmax class wherever its softmax probability reaches
/// `threshold`; every other pixel becomes [`IGNORE_ID`].
pub fn generate_hard_labels(logits: &LogitMap, threshold: f64) -> Result<LabelMap> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        bail!(Config, "threshold must be in (0, 1], got {threshold}");
    }
    let (c, h, w) = (logits.classes(), logits.height(), logits.width());
    if !(2..=254).contains(&c) {
        bail!(Dimension, "{c} classes cannot be stored as 8-bit labels");
    }
    let wide: Vec<f64> = logits.0.data().iter().map(|&v| v as f64).collect();
    let probs = softmax_channels(&wide, [1, c, h, w]);
    let hw = h * w;
    let data = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if probs[k * hw + p] > probs[best * hw + p] {
                    best = k;
                }
            }
            if probs[best * hw + p] >= threshold {
                best as u8
            } else {
                IGNORE_ID
            }
        })
        .collect();
    LabelMap::new(h, w, c as u8, data)
}

/// Fraction of pixels carrying a class id.
pub fn labelled_fraction(labels: &LabelMap) -> f64 {
    let kept = labels.data().iter().filter(|&&v| v != IGNORE_ID).count();
    kept as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// One probability per class and pixel.
    Soft,
    /// One class byte per pixel.
    Hard,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            other => bail!(Config, "unknown label mode {other:?}; expected soft or hard"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageEstimate {
    pub images: u64,
    pub width: u64,
    pub height: u64,
    pub classes: u64,
    pub bytes_per_value: u64,
}

/// Bytes needed to store every label of `est` in `mode`.
pub fn storage_cost(est: &StorageEstimate, mode: LabelMode) -> Result<u64> {
    let fields = [est.images, est.width, est.height, est.classes, est.bytes_per_value];
    if fields.contains(&0) {
        bail!(Config, "storage estimate needs positive counts, got {est:?}");
    }
    let per_pixel = match mode {
        LabelMode::Soft => est.classes.checked_mul(est.bytes_per_value),
        LabelMode::Hard => Some(1),
    };
    per_pixel
        .and_then(|b| b.checked_mul(est.images))
        .and_then(|b| b.checked_mul(est.width))
        .and_then(|b| b.checked_mul(est.height))
        .ok_or_else(|| Error::Config(format!("storage estimate {est:?} overflows 64 bits")))
}

pub fn write_labels_to(w: &mut impl Write, labels: &LabelMap) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(labels.width() as u32).to_le_bytes())?;
    w.write_all(&(labels.height() as u32).to_le_bytes())?;
    w.write_all(&[labels.num_classes()])?;
    w.write_all(labels.data())?;
    Ok(())
}

pub fn read_labels_from(r: &mut impl Read) -> Result<LabelMap> {
    let mut head = [0u8; 14];
    fill(r, &mut head, 0, "header")?;
    if &head[..4] != MAGIC {
        bail!(Data, "bad label magic {:?} at offset 0", &head[..4]);
    }
    if head[4] != VERSION {
        bail!(Data, "unsupported label version {} at offset 4", head[4]);
    }
    let width = u32::from_le_bytes([head[5], head[6], head[7], head[8]]) as usize;
    let height = u32::from_le_bytes([head[9], head[10], head[11], head[12]]) as usize;
    let classes = head[13];
    let len = width
        .checked_mul(height)
        .ok_or_else(|| Error::Data(format!("label extents {width}x{height} overflow")))?;
    let mut data = vec![0u8; len];
    fill(r, &mut data, 14, "payload")?;
    LabelMap::new(height, width, classes, data)
        .map_err(|e| Error::Data(format!("invalid label record: {e}")))
}

fn fill(r: &mut impl Read, buf: &mut [u8], offset: usize, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Data(format!(
            "truncated label {what}: needed {} bytes at offset {offset}",
            buf.len()
        )),
        _ => Error::Io(e),
    })
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_labels_to(&mut f, labels)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    read_labels_from(&mut f)
}

/// Summary of a directory labelling run.
#[derive(Debug, Clone, PartialEq)]
pub struct AutolabelSummary {
    pub files: Vec<PathBuf>,
    pub labelled_fraction: f64,
}

/// Labels every `.hmst` image in `in_dir` with the hierarchically fused
/// teacher prediction and writes `<stem>.hmsl` files to `out_dir`.
pub fn autolabel_dir(
    teacher: &Network,
    in_dir: &Path,
    out_dir: &Path,
    threshold: f64,
    scales: &ScaleSet,
) -> Result<AutolabelSummary> {
    let mut inputs: Vec<PathBuf> = fs::read_dir(in_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    inputs.retain(|p| p.extension().is_some_and(|e| e == "hmst"));
    inputs.sort();
    if inputs.is_empty() {
        bail!(Data, "no .hmst images in {}", in_dir.display());
    }
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::with_capacity(inputs.len());
    let (mut kept, mut total) = (0.0, 0usize);
    for input in &inputs {
        let image = load_tensor::<f32>(input)?;
        let pred = predict(teacher, &image, scales, FusionMode::Hierarchical)?;
        let labels = generate_hard_labels(&pred.logits, threshold)?;
        kept += labelled_fraction(&labels) * labels.len() as f64;
        total += labels.len();
        let stem = input.file_stem().expect("file has a name");
        let out = out_dir.join(stem).with_extension("hmsl");
        write_labels(&out, &labels)?;
        files.push(out);
    }
    Ok(AutolabelSummary {
        files,
        labelled_fraction: kept / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits(c: usize, data: Vec<f32>) -> LogitMap {
        let hw = data.len() / c;
        LogitMap(Tensor::new(&[c, 1, hw], data).unwrap())
    }

    #[test]
    fn dominant_channel_is_kept() {
        let l = logits(3, vec![0.0, 0.0, 20.0, 20.0, 0.0, 0.0]);
        let got = generate_hard_labels(&l, 0.9).unwrap();
        assert_eq!(got.data(), &[1, 1]);
    }

    #[test]
    fn uniform_logits_are_ignored() {
        let l = logits(4, vec![0.3; 8]);
        let got = generate_hard_labels(&l, 0.9).unwrap();
        assert!(got.data().iter().all(|&v| v == IGNORE_ID));
        // Threshold exactly at the uniform probability keeps the lowest id.
        assert_eq!(generate_hard_labels(&l, 0.25).unwrap().data(), &[0, 0]);
    }

    #[test]
    fn threshold_domain() {
        let l = logits(2, vec![0.0, 1.0]);
        assert!(generate_hard_labels(&l, 0.0).is_err());
        assert!(generate_hard_labels(&l, 1.01).is_err());
        assert!(generate_hard_labels(&l, 1.0).is_ok());
    }

    #[test]
    fn fractions() {
        let all = LabelMap::filled(2, 2, 3, IGNORE_ID).unwrap();
        assert_eq!(labelled_fraction(&all), 0.0);
        let none = LabelMap::filled(2, 2, 3, 1).unwrap();
        assert_eq!(labelled_fraction(&none), 1.0);
        let checker = LabelMap::new(2, 2, 3, vec![0, IGNORE_ID, IGNORE_ID, 2]).unwrap();
        assert_eq!(labelled_fraction(&checker), 0.5);
    }

    #[test]
    fn storage_overflow_is_reported() {
        let est = StorageEstimate {
            images: u64::MAX / 2,
            width: 4,
            height: 1,
            classes: 1,
            bytes_per_value: 1,
        };
        assert!(matches!(storage_cost(&est, LabelMode::Hard), Err(Error::Config(_))));
        let unit = StorageEstimate { images: 1, width: 1, height: 1, classes: 7, bytes_per_value: 4 };
        assert_eq!(storage_cost(&unit, LabelMode::Soft).unwrap(), 28);
    }

    #[test]
    fn header_layout() {
        let labels = LabelMap::new(1, 2, 5, vec![4, IGNORE_ID]).unwrap();
        let mut buf = Vec::new();
        write_labels_to(&mut buf, &labels).unwrap();
        assert_eq!(&buf, &[b'H', b'M', b'S', b'L', 1, 2, 0, 0, 0, 1, 0, 0, 0, 5, 4, 255]);
        let err = read_labels_from(&mut &buf[..15]).unwrap_err();
        assert!(err.to_string().contains("offset 14"), "{err}");
    }
}
