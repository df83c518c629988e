//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "SDBN"  u16 version
//! u8 stage kind (0 segmentation, 1 denoising)  u32 block (0 = clean bootstrap)
//! str label  str config digest  u64 seed
//! u32 metric count, then (str name, f64 value) pairs
//! u32 tensor count, then per tensor: str name, u32 rank, rank x u32 dims, f64 payload
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::path::Path;

use crate::error::{data_err, Error, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDBN";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageKind {
    Segmentation,
    Denoising,
}

/// Which network of which block a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StageId {
    pub kind: StageKind,
    /// 1-based block index; 0 is the clean-image segmentation bootstrap.
    pub block: u32,
}

impl StageId {
    pub fn seg(block: u32) -> Self {
        StageId {
            kind: StageKind::Segmentation,
            block,
        }
    }

    pub fn den(block: u32) -> Self {
        StageId {
            kind: StageKind::Denoising,
            block,
        }
    }

    /// `s0`, `s1`, `d1`, ...
    pub fn short(&self) -> String {
        match self.kind {
            StageKind::Segmentation => format!("s{}", self.block),
            StageKind::Denoising => format!("d{}", self.block),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: StageId,
    /// Free-form tag, e.g. the cascade variant.
    pub label: String,
    pub config_digest: String,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(match self.stage.kind {
            StageKind::Segmentation => 0,
            StageKind::Denoising => 1,
        });
        b.extend_from_slice(&self.stage.block.to_le_bytes());
        put_str(&mut b, &self.label);
        put_str(&mut b, &self.config_digest);
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.metrics.len() as u32).to_le_bytes());
        for (n, v) in &self.metrics {
            put_str(&mut b, n);
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (n, t) in self.params.names().iter().zip(self.params.tensors()) {
            put_str(&mut b, n);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(data_err!("not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(data_err!("unsupported checkpoint version {version}"));
        }
        let kind = match r.take(1)?[0] {
            0 => StageKind::Segmentation,
            1 => StageKind::Denoising,
            k => return Err(data_err!("unknown stage kind {k}")),
        };
        let block = r.u32()?;
        let label = r.string()?;
        let config_digest = r.string()?;
        let seed = u64::from_le_bytes(r.array()?);
        let metrics = (0..r.u32()?)
            .map(|_| Ok((r.string()?, f64::from_le_bytes(r.array()?))))
            .collect::<Result<_>>()?;
        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| data_err!("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|_| data_err!("tensor `{name}` has an invalid shape"))?;
            params.push(name, t);
        }
        if r.pos != bytes.len() {
            return Err(data_err!("{} trailing bytes after checkpoint", bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            stage: StageId { kind, block },
            label,
            config_digest,
            seed,
            metrics,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so that an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => data_err!("{}: {m}", path.display()),
            e => e,
        })
    }

    /// Copy the stored tensors into `params`, failing with a per-tensor diff
    /// if the layouts differ.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<()> {
        params.load_from(&self.params).map_err(|e| match e {
            Error::CheckpointMismatch(d) => Error::CheckpointMismatch(format!(
                "stage {} does not fit the target network:\n{d}",
                self.stage.short()
            )),
            e => e,
        })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| data_err!("checkpoint truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| data_err!("checkpoint string is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{SegConfig, SegNetTiny};

    fn sample() -> Checkpoint {
        let seg = SegNetTiny::new(SegConfig::new(4), 3).unwrap();
        Checkpoint {
            stage: StageId::seg(2),
            label: "conditioned".into(),
            config_digest: "abc123".into(),
            seed: 42,
            metrics: vec![("val_loss".into(), 0.125), ("odd".into(), -0.0)],
            params: seg.params,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"SDBN");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.digest(), c.params.digest());
        assert_eq!(back.metric("odd").unwrap().to_bits(), (-0.0f64).to_bits());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/s2.sdbn");
        c.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&p).unwrap(), back);
    }

    #[test]
    fn corrupt_files_are_data_errors() {
        let bytes = sample().to_bytes();
        let is_data = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(Error::Data(_)));
        assert!(is_data(&bytes[..bytes.len() - 3]));
        assert!(is_data(b"NOPE\x01\x00"));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(is_data(&v));
        let mut v = bytes;
        v.push(0);
        assert!(is_data(&v));
    }

    #[test]
    fn restoring_into_another_architecture_lists_tensors() {
        let c = sample();
        let mut other = SegNetTiny::new(SegConfig { classes: 4, widths: [8, 32, 64] }, 0).unwrap();
        let err = c.restore_into(&mut other.params).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let msg = err.to_string();
        assert!(msg.contains("seg.enc1.weight") && msg.contains("seg.dec1.weight"), "{msg}");
        let mut same = SegNetTiny::new(SegConfig::new(4), 9).unwrap();
        c.restore_into(&mut same.params).unwrap();
        assert_eq!(same.params, c.params);
    }
}
