//! Checkpoint file format.
//!
//! Layout: magic "FALN", format version u32, architecture spec as canonical
//! JSON (u64 length prefix), little-endian f64 parameter buffers in layer
//! order, Adam state, then a CRC-32 of everything prior. All integers are
//! little-endian.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{build_network, ArchSpec, Network};
use crate::optim::{AdamConfig, AdamState, MomentPair};

const MAGIC: &[u8; 4] = b"FALN";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub network: Network,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Error unless the stored architecture matches `expected`.
    pub fn require_arch(&self, expected: &ArchSpec) -> Result<()> {
        let got = self.network.arch();
        if &got != expected {
            return Err(Error::CheckpointArch(format!(
                "expected {:?}, file holds {:?}",
                expected, got
            )));
        }
        Ok(())
    }
}

fn write_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.write_f64::<LittleEndian>(*v).expect("vec write");
    }
}

pub fn save_checkpoint(net: &Network, adam: &AdamState, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).expect("vec write");
    let arch = serde_json::to_string(&net.arch()).expect("arch serializes");
    buf.write_u64::<LittleEndian>(arch.len() as u64).expect("vec write");
    buf.extend_from_slice(arch.as_bytes());
    for p in net.params() {
        write_f64s(&mut buf, &p.values);
    }
    buf.write_u64::<LittleEndian>(adam.t).expect("vec write");
    buf.write_f64::<LittleEndian>(adam.cfg.eta).expect("vec write");
    buf.write_f64::<LittleEndian>(adam.cfg.beta1).expect("vec write");
    buf.write_f64::<LittleEndian>(adam.cfg.beta2).expect("vec write");
    buf.write_f64::<LittleEndian>(adam.cfg.eps).expect("vec write");
    for mom in &adam.moments {
        write_f64s(&mut buf, &mom.m);
        write_f64s(&mut buf, &mom.v);
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc).expect("vec write");
    let mut f = File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    if bytes.len() < 8 + 4 {
        return Err(Error::CheckpointTruncated);
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = (&bytes[bytes.len() - 4..]).read_u32::<LittleEndian>().expect("4 bytes");
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CheckpointChecksum { stored, computed });
    }
    let mut rd = &body[4..];
    let version = rd.read_u32::<LittleEndian>().map_err(|_| Error::CheckpointTruncated)?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let arch_len = rd.read_u64::<LittleEndian>().map_err(|_| Error::CheckpointTruncated)? as usize;
    if rd.len() < arch_len {
        return Err(Error::CheckpointTruncated);
    }
    let arch: ArchSpec = serde_json::from_slice(&rd[..arch_len])
        .map_err(|e| Error::CheckpointArch(format!("unparseable architecture spec: {}", e)))?;
    rd = &rd[arch_len..];
    let mut network = build_network(&arch.name, &arch.input_shape, &arch.layers, 0)?;
    let read_f64s = |rd: &mut &[u8], n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(rd.read_f64::<LittleEndian>().map_err(|_| Error::CheckpointTruncated)?);
        }
        Ok(out)
    };
    for p in network.params_mut() {
        p.values = read_f64s(&mut rd, p.len())?;
    }
    let t = rd.read_u64::<LittleEndian>().map_err(|_| Error::CheckpointTruncated)?;
    let cfg = AdamConfig {
        eta: rd.read_f64::<LittleEndian>().map_err(|_| Error::CheckpointTruncated)?,
        beta1: rd.read_f64::<LittleEndian>().map_err(|_| Error::CheckpointTruncated)?,
        beta2: rd.read_f64::<LittleEndian>().map_err(|_| Error::CheckpointTruncated)?,
        eps: rd.read_f64::<LittleEndian>().map_err(|_| Error::CheckpointTruncated)?,
    };
    let mut moments = Vec::new();
    for p in network.params() {
        moments.push(MomentPair {
            m: read_f64s(&mut rd, p.len())?,
            v: read_f64s(&mut rd, p.len())?,
        });
    }
    if !rd.is_empty() {
        return Err(Error::CheckpointArch(format!(
            "{} trailing bytes after Adam state",
            rd.len()
        )));
    }
    Ok(Checkpoint {
        network,
        adam: AdamState { cfg, t, moments },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;
    use crate::optim::AdamConfig;
    use std::fs;

    fn toy() -> (Network, AdamState) {
        let net = build_network(
            "ckpt-test",
            &[4],
            &[
                LayerSpec::Linear { fan_in: 4, fan_out: 3, bias: true },
                LayerSpec::Arsinh,
                LayerSpec::Linear { fan_in: 3, fan_out: 2, bias: false },
            ],
            12,
        )
        .unwrap();
        let mut adam = AdamState::for_network(AdamConfig::with_eta(3e-4), &net);
        adam.t = 41;
        for mom in &mut adam.moments {
            for (i, v) in mom.m.iter_mut().enumerate() {
                *v = i as f64 * 0.25;
            }
            for (i, v) in mom.v.iter_mut().enumerate() {
                *v = i as f64 * 0.5 + 1.0;
            }
        }
        (net, adam)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.faln");
        let (net, adam) = toy();
        save_checkpoint(&net, &adam, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.network.arch(), net.arch());
        for (pa, pb) in loaded.network.params().iter().zip(net.params()) {
            assert!(pa.values.iter().zip(&pb.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(loaded.adam, adam);
    }

    #[test]
    fn truncated_file_reports_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.faln");
        let (net, adam) = toy();
        save_checkpoint(&net, &adam, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(crate::Error::CheckpointChecksum { .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.faln");
        fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(crate::Error::CheckpointBadMagic)));
    }

    #[test]
    fn different_architecture_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.faln");
        let (net, adam) = toy();
        save_checkpoint(&net, &adam, &path).unwrap();
        let other = build_network(
            "other",
            &[4],
            &[LayerSpec::Linear { fan_in: 4, fan_out: 4, bias: true }],
            0,
        )
        .unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(matches!(
            loaded.require_arch(&other.arch()),
            Err(crate::Error::CheckpointArch(_))
        ));
    }
}
