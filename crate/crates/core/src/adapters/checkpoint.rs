//! Adapter checkpoint container.
//!
//! ```text
//! b"NLRC" | version u8 (=1) | header_len u64 | header JSON (UTF-8)
//! entry_count u64 | entry*
//! entry = name_len u32 | name (UTF-8) | blob_len u64 | blob (NLRA matrix)
//! ```
//!
//! All integers are little-endian. Each site contributes `<site>/base`,
//! `<site>/A`, `<site>/B` and, for SLoRA/NLoRA, `<site>/N`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adapter, AdapterConfig, NInit, NloraCore, TrainMask, Variant};
use crate::error::{Error, Result};
use crate::linalg::io::{self, AnyMatrix};
use crate::linalg::Matrix;
use crate::scalar::{Precision, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NLRC";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: Variant,
    pub rank: usize,
    pub alpha: f64,
    pub train_mask: TrainMask,
    pub subtract_at_init: bool,
    pub seed: u64,
    pub dropout: f64,
    pub n_init: NInit,
    pub nlora_core: NloraCore,
    pub a_init_std: f64,
    pub rank_tol: f64,
    pub sv_floor: f64,
    pub precision: Precision,
    pub sites: Vec<String>,
}

impl CheckpointHeader {
    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            variant: self.variant,
            n_init: self.n_init,
            nlora_core: self.nlora_core,
            subtract_at_init: self.subtract_at_init,
            train_mask: self.train_mask,
            a_init_std: self.a_init_std,
            rank_tol: self.rank_tol,
            sv_floor: self.sv_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub entries: Vec<(String, AnyMatrix)>,
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, len: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

fn take_u64(bytes: &[u8], at: &mut usize) -> Result<usize> {
    let mut buf = [0u8; 8];
    buf.copy_from_slice(take(bytes, at, 8)?);
    usize::try_from(u64::from_le_bytes(buf)).map_err(|_| Error::Format("length overflow".into()))
}

fn take_u32(bytes: &[u8], at: &mut usize) -> Result<usize> {
    let mut buf = [0u8; 4];
    buf.copy_from_slice(take(bytes, at, 4)?);
    Ok(u32::from_le_bytes(buf) as usize)
}

impl Checkpoint {
    /// Packs adapters that share one configuration.
    pub fn from_adapters<T: Scalar>(sites: &[(String, Adapter<T>)], seed: u64) -> Result<Self> {
        let first = sites
            .first()
            .ok_or_else(|| Error::Config("checkpoint needs at least one site".into()))?;
        let cfg = first.1.config();
        if let Some((name, _)) = sites.iter().find(|(_, a)| a.config() != cfg) {
            return Err(Error::Config(format!("site `{name}` has a different adapter config")));
        }
        let precision = Precision::from_code(T::PRECISION_CODE).expect("scalar precision");
        let header = CheckpointHeader {
            variant: cfg.variant,
            rank: cfg.rank,
            alpha: cfg.alpha,
            train_mask: cfg.train_mask,
            subtract_at_init: cfg.subtract_at_init,
            seed,
            dropout: cfg.dropout,
            n_init: cfg.n_init,
            nlora_core: cfg.nlora_core,
            a_init_std: cfg.a_init_std,
            rank_tol: cfg.rank_tol,
            sv_floor: cfg.sv_floor,
            precision,
            sites: sites.iter().map(|(n, _)| n.clone()).collect(),
        };
        let mut entries = Vec::new();
        for (name, ad) in sites {
            entries.push((format!("{name}/base"), AnyMatrix::from_typed(ad.base())));
            entries.push((format!("{name}/A"), AnyMatrix::from_typed(ad.a())));
            if let Some(mid) = ad.n() {
                entries.push((format!("{name}/N"), AnyMatrix::from_typed(mid)));
            }
            entries.push((format!("{name}/B"), AnyMatrix::from_typed(ad.b())));
        }
        Ok(Self { header, entries })
    }

    pub fn matrix(&self, name: &str) -> Option<&AnyMatrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn typed<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        let m = self
            .matrix(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing `{name}`")))?;
        m.to_typed()
            .map_err(|e| Error::Format(format!("`{name}`: {e}")))
    }

    /// Rebuilds the adapters in site order.
    pub fn adapters<T: Scalar>(&self) -> Result<Vec<(String, Adapter<T>)>> {
        let cfg = self.header.adapter_config();
        self.header
            .sites
            .iter()
            .map(|site| {
                let n = if cfg.variant.has_intermediate() {
                    Some(self.typed(&format!("{site}/N"))?)
                } else {
                    None
                };
                let ad = Adapter::from_parts(
                    self.typed(&format!("{site}/base"))?,
                    self.typed(&format!("{site}/A"))?,
                    n,
                    self.typed(&format!("{site}/B"))?,
                    cfg.clone(),
                )?;
                Ok((site.clone(), ad))
            })
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Format(format!("header serialisation: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, m) in &self.entries {
            let name_len = u32::try_from(name.len())
                .map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
            let blob = match m {
                AnyMatrix::F32(m) => io::encode(m),
                AnyMatrix::F64(m) => io::encode(m),
            };
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(bytes, &mut at, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic, expected NLRC".into()));
        }
        let version = take(bytes, &mut at, 1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = take_u64(bytes, &mut at)?;
        let header: CheckpointHeader = serde_json::from_slice(take(bytes, &mut at, header_len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = take_u64(bytes, &mut at)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = take_u32(bytes, &mut at)?;
            let name = std::str::from_utf8(take(bytes, &mut at, name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let blob_len = take_u64(bytes, &mut at)?;
            let m = io::decode_any(take(bytes, &mut at, blob_len)?)?;
            if m.precision() != header.precision {
                return Err(Error::Format(format!(
                    "`{name}` is {} but header says {}",
                    m.precision(),
                    header.precision
                )));
            }
            entries.push((name, m));
        }
        if at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random::{rng, standard_normal};

    #[test]
    fn round_trip_bit_exact() {
        let base: Matrix<f32> = standard_normal(8, 6, &mut rng(1));
        let cfg = AdapterConfig::new(Variant::Slora, 2);
        let ad = Adapter::init(base, &cfg, 11).unwrap();
        let ck = Checkpoint::from_adapters(&[("layer0".to_string(), ad.clone())], 11).unwrap();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
        let restored = back.adapters::<f32>().unwrap();
        assert_eq!(restored[0].1, ad);
        assert!(back.adapters::<f64>().is_err());
    }

    #[test]
    fn lora_has_no_intermediate_entry() {
        let base: Matrix<f64> = standard_normal(5, 5, &mut rng(2));
        let ad = Adapter::init(base, &AdapterConfig::new(Variant::Lora, 2), 1).unwrap();
        let ck = Checkpoint::from_adapters(&[("w".to_string(), ad)], 1).unwrap();
        assert!(ck.matrix("w/N").is_none());
        assert_eq!(ck.entries.len(), 3);
    }

    #[test]
    fn rejects_trailing_and_truncated() {
        let base: Matrix<f64> = standard_normal(5, 5, &mut rng(2));
        let ad = Adapter::init(base, &AdapterConfig::new(Variant::Nlora, 2), 1).unwrap();
        let mut bytes = Checkpoint::from_adapters(&[("w".to_string(), ad)], 1)
            .unwrap()
            .encode()
            .unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        bytes.push(0);
        assert!(Checkpoint::decode(&bytes).is_err());
    }
}
