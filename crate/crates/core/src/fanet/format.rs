//! `FANW1`: a text manifest followed by a little-endian f32 blob.
//!
//! ```text
//! FANW1
//! version 1
//! channels 16
//! alpha 0.4
//! mpm 32 64 128
//! tensor stem.weight 16 3 3 3 offset 0 bytes 1728
//! ...
//! params 8780
//! crc32 1a2b3c4d
//! end
//! <blob>
//! ```

use std::path::Path;

use super::{MpmConfig, NetworkConfig, NetworkWeights};
use crate::error::{Error, Result, WeightsError};
use crate::tensor::{Shape, Tensor};

pub const FORMAT_NAME: &str = "FANW1";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_weights(weights: &NetworkWeights<f32>) -> Vec<u8> {
    let mut blob = Vec::with_capacity(weights.param_count() * 4);
    let mut manifest = format!(
        "{FORMAT_NAME}\nversion {FORMAT_VERSION}\nchannels {}\nalpha {}\nmpm {}\n",
        weights.channels(),
        weights.alpha(),
        weights
            .config
            .mpm
            .target_sizes
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    );
    for (name, t) in weights.named_params() {
        let [n, c, h, w] = t.shape().dims();
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push_str(&format!(
            "tensor {name} {n} {c} {h} {w} offset {offset} bytes {}\n",
            blob.len() - offset
        ));
    }
    manifest.push_str(&format!(
        "params {}\ncrc32 {:08x}\nend\n",
        weights.param_count(),
        crc32fast::hash(&blob)
    ));
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&blob);
    out
}

struct Entry {
    name: String,
    shape: Shape,
    offset: usize,
    bytes: usize,
}

fn bad(line: usize, reason: impl Into<String>) -> Error {
    WeightsError::Manifest {
        line,
        reason: reason.into(),
    }
    .into()
}

fn num<V: std::str::FromStr>(line: usize, s: Option<&str>, what: &str) -> Result<V> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(line, format!("expected {what}")))
}

pub fn decode_weights(bytes: &[u8]) -> Result<NetworkWeights<f32>> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(WeightsError::Truncated {
                expected: pos + 1,
                found: bytes.len(),
            })?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad(lines.len() + 1, "not UTF-8"))?;
        pos += nl + 1;
        if lines.is_empty() && line != FORMAT_NAME {
            return Err(WeightsError::BadMagic(line.chars().take(16).collect()).into());
        }
        let done = line == "end";
        lines.push(line.to_string());
        if done {
            break;
        }
    }
    let blob = &bytes[pos..];

    let mut version = None;
    let mut channels = None;
    let mut alpha = None;
    let mut mpm = None;
    let mut params = None;
    let mut crc = None;
    let mut entries = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        let no = i + 1;
        let mut f = line.split_whitespace();
        match f.next() {
            Some("version") => version = Some(num::<u32>(no, f.next(), "version")?),
            Some("channels") => channels = Some(num::<usize>(no, f.next(), "channel count")?),
            Some("alpha") => alpha = Some(num::<f64>(no, f.next(), "alpha")?),
            Some("mpm") => {
                mpm = Some(
                    f.map(|s| num::<usize>(no, Some(s), "pyramid size"))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            Some("params") => params = Some(num::<usize>(no, f.next(), "parameter count")?),
            Some("crc32") => {
                crc = Some(
                    f.next()
                        .and_then(|s| u32::from_str_radix(s, 16).ok())
                        .ok_or_else(|| bad(no, "expected hex checksum"))?,
                )
            }
            Some("tensor") => {
                let name = f.next().ok_or_else(|| bad(no, "missing tensor name"))?.to_string();
                let mut d = [0usize; 4];
                for v in &mut d {
                    *v = num(no, f.next(), "dimension")?;
                }
                if f.next() != Some("offset") {
                    return Err(bad(no, "expected offset"));
                }
                let offset = num(no, f.next(), "offset")?;
                if f.next() != Some("bytes") {
                    return Err(bad(no, "expected bytes"));
                }
                let nbytes = num(no, f.next(), "byte count")?;
                entries.push(Entry {
                    name,
                    shape: Shape::new(d[0], d[1], d[2], d[3]),
                    offset,
                    bytes: nbytes,
                });
            }
            Some("end") => {}
            other => return Err(bad(no, format!("unknown key {:?}", other.unwrap_or("")))),
        }
    }

    let version = version.ok_or_else(|| bad(2, "missing version"))?;
    if version != FORMAT_VERSION {
        return Err(WeightsError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let missing = |k: &str| bad(lines.len(), format!("missing {k}"));
    let config = NetworkConfig {
        channels: channels.ok_or_else(|| missing("channels"))?,
        alpha: alpha.ok_or_else(|| missing("alpha"))?,
        mpm: MpmConfig {
            target_sizes: mpm.ok_or_else(|| missing("mpm"))?,
        },
    };
    let params = params.ok_or_else(|| missing("params"))?;
    let crc = crc.ok_or_else(|| missing("crc32"))?;

    let declared: usize = entries.iter().map(|e| e.shape.numel()).sum();
    if declared != params {
        return Err(WeightsError::Validation(format!("params says {params}, tensors hold {declared}")).into());
    }
    let expected_len = params * 4;
    if blob.len() < expected_len {
        return Err(WeightsError::Truncated {
            expected: expected_len,
            found: blob.len(),
        }
        .into());
    }
    if blob.len() > expected_len {
        return Err(WeightsError::Validation(format!(
            "{} trailing bytes after the parameter blob",
            blob.len() - expected_len
        ))
        .into());
    }
    let actual = crc32fast::hash(blob);
    if actual != crc {
        return Err(WeightsError::Checksum { expected: crc, actual }.into());
    }

    let mut weights = NetworkWeights::<f32>::seeded(config, 0).map_err(|e| WeightsError::Validation(e.to_string()))?;
    let layout = weights.named_params();
    if layout.len() != entries.len() {
        return Err(WeightsError::Validation(format!(
            "expected {} tensors, manifest lists {}",
            layout.len(),
            entries.len()
        ))
        .into());
    }
    let mut values = Vec::with_capacity(entries.len());
    for ((name, t), e) in layout.iter().zip(&entries) {
        if *name != e.name || t.shape() != e.shape {
            return Err(WeightsError::Validation(format!(
                "tensor {} {} does not match expected {name} {}",
                e.name,
                e.shape,
                t.shape()
            ))
            .into());
        }
        if e.bytes != e.shape.numel() * 4 || e.offset.checked_add(e.bytes).is_none_or(|end| end > blob.len()) {
            return Err(WeightsError::Validation(format!("tensor {} has a bad byte range", e.name)).into());
        }
        let data = blob[e.offset..e.offset + e.bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        values.push(Tensor::new(e.shape, data)?);
    }
    drop(layout);
    weights.set_params(values)?;
    Ok(weights)
}

pub fn save_weights(weights: &NetworkWeights<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_weights(weights))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights<f32>> {
    decode_weights(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> NetworkWeights<f32> {
        let mut n = NetworkWeights::init(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        n.set_alpha(0.35).unwrap();
        n
    }

    fn header_len(bytes: &[u8]) -> usize {
        let s = bytes.windows(4).position(|w| w == b"end\n").unwrap();
        s + 4
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let back = decode_weights(&encode_weights(&n)).unwrap();
        assert_eq!(back, n);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.fanw");
        save_weights(&net(), &p).unwrap();
        assert_eq!(load_weights(&p).unwrap(), net());
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut b = encode_weights(&net());
        let i = header_len(&b) + 100;
        b[i] ^= 0x01;
        assert!(matches!(
            decode_weights(&b),
            Err(Error::Weights(WeightsError::Checksum { .. }))
        ));
    }

    #[test]
    fn truncated_blob() {
        let b = encode_weights(&net());
        assert!(matches!(
            decode_weights(&b[..b.len() - 4]),
            Err(Error::Weights(WeightsError::Truncated { .. }))
        ));
        assert!(matches!(
            decode_weights(&b[..10]),
            Err(Error::Weights(WeightsError::Truncated { .. }))
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = encode_weights(&net());
        b.extend_from_slice(&[0; 4]);
        assert!(matches!(
            decode_weights(&b),
            Err(Error::Weights(WeightsError::Validation(_)))
        ));
    }

    #[test]
    fn wrong_magic_and_version() {
        let b = encode_weights(&net());
        let mut m = b.clone();
        m[4] = b'2';
        assert!(matches!(
            decode_weights(&m),
            Err(Error::Weights(WeightsError::BadMagic(_)))
        ));
        let s = String::from_utf8_lossy(&b[..header_len(&b)]).replace("version 1", "version 7");
        let mut v = s.into_bytes();
        v.extend_from_slice(&b[header_len(&b)..]);
        assert!(matches!(
            decode_weights(&v),
            Err(Error::Weights(WeightsError::Version { found: 7, expected: 1 }))
        ));
    }

    #[test]
    fn params_field_mismatch() {
        let b = encode_weights(&net());
        let h = header_len(&b);
        let s = String::from_utf8_lossy(&b[..h]).replace("params 8780", "params 8781");
        let mut v = s.into_bytes();
        v.extend_from_slice(&b[h..]);
        assert!(matches!(
            decode_weights(&v),
            Err(Error::Weights(WeightsError::Validation(_)))
        ));
    }
}
