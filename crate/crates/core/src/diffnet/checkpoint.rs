//! Binary checkpoint format (all integers and floats little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `TUBENET\0` |
//! | 4     | format version (`u32`, currently 1) |
//! | 4     | config length `n` (`u32`) |
//! | n     | `NetworkConfig` as UTF-8 JSON |
//! | 8     | seed (`u64`) |
//! | 8     | frequency count `f` (`u64`) |
//! | 8     | trainable count `w` (`u64`) |
//! | 32    | SHA-256 of everything after the checksum field |
//! | 8·f   | frequency matrix (`f64`, row-major `ffe_size × 2`) |
//! | 8·w   | trainable parameters (`f64`, layers in evaluation order, each weights then biases) |

use std::path::Path;

use sha2::{Digest, Sha256};

use super::network::{Architecture, NetworkConfig, NetworkParams};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TUBENET\0";
const VERSION: u32 = 1;

fn tensor_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    let config = serde_json::to_vec(params.config())?;
    let body = [tensor_bytes(&params.ffe_matrix), tensor_bytes(&params.weights)].concat();
    let mut out = Vec::with_capacity(80 + config.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&params.config().seed.to_le_bytes());
    out.extend_from_slice(&(params.ffe_matrix.len() as u64).to_le_bytes());
    out.extend_from_slice(&(params.weights.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.data.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::CorruptCheckpoint { path: path.to_path_buf(), reason: reason.into() };
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(corrupt("bad magic"));
    }
    match r.u32() {
        Some(VERSION) => {}
        Some(v) => return Err(corrupt(&format!("unsupported version {v}"))),
        None => return Err(corrupt("truncated header")),
    }
    let n = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
    let config_bytes = r.take(n).ok_or_else(|| corrupt("truncated config"))?;
    let config: NetworkConfig = serde_json::from_slice(config_bytes).map_err(|e| corrupt(&format!("config: {e}")))?;
    let seed = r.u64().ok_or_else(|| corrupt("truncated header"))?;
    let nf = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
    let nw = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
    let checksum = r.take(32).ok_or_else(|| corrupt("truncated header"))?;
    let body = &data[r.pos..];
    if body.len() != 8 * (nf + nw) {
        return Err(corrupt("truncated or oversized tensor data"));
    }
    if Sha256::digest(body).as_slice() != checksum {
        return Err(corrupt("checksum mismatch"));
    }
    if seed != config.seed {
        return Err(corrupt("seed does not match config"));
    }
    let arch = Architecture::new(config).map_err(|e| corrupt(&e.to_string()))?;
    if nf != 2 * arch.config.ffe_size || nw != arch.n_params() {
        return Err(corrupt("tensor sizes do not match config"));
    }
    let floats: Vec<f64> = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let (ffe, w) = floats.split_at(nf);
    Ok(NetworkParams { arch, ffe_matrix: ffe.to_vec(), weights: w.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::super::network::init_params;
    use super::*;

    #[test]
    fn round_trip_default_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let p = init_params(&NetworkConfig { seed: 42, ..Default::default() }).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(
            p.ffe_matrix.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q.ffe_matrix.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(p.weights.iter().zip(&q.weights).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(p.arch, q.arch);
        let size = std::fs::metadata(&path).unwrap().len();
        assert!(size < 20_000_000, "{size}");
    }

    #[test]
    fn truncated_and_tampered_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let cfg = NetworkConfig { n_f: 4, n_b: 1, ffe_size: 2, ..Default::default() };
        save_checkpoint(&init_params(&cfg).unwrap(), &path).unwrap();
        let data = std::fs::read(&path).unwrap();
        for cut in [3, 20, data.len() - 1] {
            std::fs::write(&path, &data[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint { .. })));
        }
        let mut bad = data.clone();
        *bad.last_mut().unwrap() ^= 1;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint { .. })));
        let mut bad = data;
        bad[8] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint { .. })));
    }
}
