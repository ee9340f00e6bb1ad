//! `DACB` codebook files.
//!
//! Layout (little-endian): magic `DACB`, u16 version (1), u64 seed, u16 layer
//! count, per layer (u32 n, u32 k), u32 n_clusters, u64 N, u8 cluster-block
//! flag, then for every pattern and layer `k` u32 indices, then (if flagged)
//! one u16 cluster id per item.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::{Codebook, CodebookSpec, DropoutPattern, LayerSpec};
use crate::bin::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DACB";
const VERSION: u16 = 1;

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u64(cb.spec.seed);
    w.u16(cb.spec.layers.len() as u16);
    for layer in &cb.spec.layers {
        w.u32(layer.n_channels as u32);
        w.u32(layer.k_active as u32);
    }
    w.u32(cb.spec.n_clusters as u32);
    w.u64(cb.patterns.len() as u64);
    w.u8(cb.cluster_of.is_some() as u8);
    for p in &cb.patterns {
        for layer in &p.per_layer {
            for &i in layer {
                w.u32(i as u32);
            }
        }
    }
    if let Some(ids) = &cb.cluster_of {
        for &c in ids {
            w.u16(c);
        }
    }
    w.buf
}

pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    decode(bytes).map_err(Error::CodebookFormat)
}

fn decode(bytes: &[u8]) -> std::result::Result<Codebook, String> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let seed = r.u64()?;
    let n_layers = r.u16()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        layers.push(LayerSpec::new(n, k));
    }
    let n_clusters = r.u32()? as usize;
    let spec = CodebookSpec {
        layers,
        n_clusters,
        seed,
    };
    spec.validate().map_err(|e| e.to_string())?;
    let n_items = r.u64()?;
    let has_clusters = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(format!("bad cluster flag {other}")),
    };
    let per_item = spec.total_active() as u64 * 4 + if has_clusters { 2 } else { 0 };
    if per_item.checked_mul(n_items) != Some(r.remaining() as u64) {
        return Err(format!(
            "length mismatch: {} items need {} payload bytes, found {}",
            n_items,
            per_item as u128 * n_items as u128,
            r.remaining()
        ));
    }
    let mut patterns = Vec::with_capacity(n_items as usize);
    for _ in 0..n_items {
        let mut per_layer = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let mut active = Vec::with_capacity(layer.k_active);
            for _ in 0..layer.k_active {
                active.push(r.u32()? as usize);
            }
            per_layer.push(active);
        }
        let p = DropoutPattern { per_layer };
        p.check(&spec).map_err(|e| e.to_string())?;
        patterns.push(p);
    }
    let cluster_of = if has_clusters {
        let mut ids = Vec::with_capacity(n_items as usize);
        for _ in 0..n_items {
            ids.push(r.u16()?);
        }
        Some(ids)
    } else {
        None
    };
    r.expect_end()?;

    let unique: HashSet<&DropoutPattern> = patterns.iter().collect();
    if unique.len() != patterns.len() {
        return Err("duplicate patterns".into());
    }
    if let Some(ids) = &cluster_of {
        if !spec.is_clustered() {
            return Err("cluster block present for an unclustered spec".into());
        }
        for (p, &c) in patterns.iter().zip(ids) {
            if c as usize >= spec.n_clusters || p.per_layer[0][0] != c as usize {
                return Err(format!("pattern does not encode cluster {c}"));
            }
        }
    } else if spec.is_clustered() {
        return Err("clustered spec without cluster block".into());
    }
    Ok(Codebook {
        spec,
        patterns,
        cluster_of,
        retries: 0,
    })
}

pub fn save_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    fs::write(path, encode_codebook(cb))?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let bytes = fs::read(path)?;
    decode_codebook(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::assign_patterns;

    fn standard_codebook(n: usize) -> Codebook {
        let spec = CodebookSpec::standard(32, 5);
        let ids: Vec<u16> = (0..n).map(|i| (i * 7 % 32) as u16).collect();
        assign_patterns(n, &spec, Some(&ids)).unwrap()
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.dacb");
        let mut cb = standard_codebook(8);
        save_codebook(&cb, &path).unwrap();
        let back = load_codebook(&path).unwrap();
        cb.retries = 0;
        assert_eq!(cb, back);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode_codebook(&standard_codebook(8));
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                decode_codebook(&bytes[..cut]),
                Err(Error::CodebookFormat(_))
            ));
        }
    }

    #[test]
    fn k_greater_than_n_is_rejected() {
        let spec = CodebookSpec {
            layers: vec![LayerSpec::new(4, 1)],
            n_clusters: 1,
            seed: 0,
        };
        let cb = assign_patterns(2, &spec, None).unwrap();
        let mut bytes = encode_codebook(&cb);
        // first layer k lives after magic(4) version(2) seed(8) count(2) n(4)
        bytes[20..24].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_codebook(&bytes), Err(Error::CodebookFormat(_))));
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = encode_codebook(&standard_codebook(2));
        bytes.push(0);
        assert!(decode_codebook(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(decode_codebook(&bytes).is_err());
    }
}
