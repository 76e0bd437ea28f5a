//! Checkpoint files.
//!
//! Layout: `b"HMSC"`, version `0x01`, `u32` LE manifest length, the JSON
//! manifest (network config plus ordered parameter names and shapes), then
//! one HMST record per parameter in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{bail, Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::Scalar;

const MAGIC: &[u8; 4] = b"HMSC";
const VERSION: u8 = 0x01;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    network: NetworkConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<T: Scalar>(w: &mut impl Write, net: &Network<T>) -> Result<()> {
    let manifest = Manifest {
        network: net.config().clone(),
        params: net
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("cannot encode manifest: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for p in net.params() {
        write_tensor(w, &p.value)?;
    }
    Ok(())
}

/// Rebuilds the network layout from the manifest and checks every stored
/// shape against it before loading values.
pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Network<T>> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head)
        .map_err(|_| Error::Data("checkpoint header truncated".into()))?;
    if &head[..4] != MAGIC {
        bail!(Data, "not a checkpoint: bad magic {:?}", &head[..4]);
    }
    if head[4] != VERSION {
        bail!(Data, "unsupported checkpoint version {}", head[4]);
    }
    let len = u32::from_le_bytes([head[5], head[6], head[7], head[8]]) as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)
        .map_err(|_| Error::Data("checkpoint manifest truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Data(format!("invalid checkpoint manifest: {e}")))?;
    let cfg = manifest.network;
    let mut net = Network::<T>::build(cfg.trunk, cfg.num_classes, cfg.with_aux, 0)?;
    if manifest.params.len() != net.params().len() {
        bail!(
            Data,
            "checkpoint lists {} parameters, network has {}",
            manifest.params.len(),
            net.params().len()
        );
    }
    for (entry, p) in manifest.params.iter().zip(net.params_mut()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            bail!(
                Data,
                "checkpoint parameter {} {:?} does not match network parameter {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            );
        }
        let t = read_tensor::<T>(r)
            .map_err(|e| Error::Data(format!("parameter {}: {e}", entry.name)))?;
        if t.shape() != p.value.shape() {
            bail!(
                Data,
                "stored tensor for {} has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            );
        }
        p.value = t;
    }
    Ok(net)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, net: &Network<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, net)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::TrunkConfig;

    fn small() -> Network<f32> {
        let trunk = TrunkConfig {
            channels: vec![4, 8],
            blocks_per_stage: 1,
        };
        Network::build(trunk, 3, true, 5).unwrap()
    }

    #[test]
    fn round_trip_preserves_parameters() {
        let net = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net).unwrap();
        let back: Network<f32> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.config(), net.config());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net).unwrap();
        let text = String::from_utf8_lossy(&buf).into_owned();
        let needle = "\"num_classes\": 3";
        assert!(text.contains(needle));
        let start = buf.windows(needle.len()).position(|w| w == needle.as_bytes()).unwrap();
        buf[start + needle.len() - 1] = b'4';
        let err = read_checkpoint::<f32>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let net = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint::<f32>(&mut buf.as_slice()).is_err());
    }
}
