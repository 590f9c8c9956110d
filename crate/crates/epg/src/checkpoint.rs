//! Parameter checkpoints and coordinator state.
//!
//! A parameter file is an 8-byte little-endian header length, a JSON header,
//! then the flat parameter vector as little-endian `f64`s. The loss comes
//! first; an evolved policy initialization, when present, follows it.

use std::fs;
use std::io::Write;
use std::path::Path;

use epg_core::nets::{describe_layout, LossArch, LossParams, PolicyArch, PolicyParams};
use epg_core::outerloop::CoordinatorState;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub layout: String,
    pub loss_arch: LossArch,
    pub shapes: Vec<(String, Vec<usize>)>,
    #[serde(default)]
    pub policy_arch: Option<PolicyArch>,
    pub config_hash: String,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub loss: LossParams,
    pub policy_init: Option<PolicyParams>,
}

impl Checkpoint {
    pub fn new(loss: LossParams, policy_init: Option<PolicyParams>, config_hash: &str, epoch: u64) -> Self {
        let arch = *loss.arch();
        let header = Header {
            format_version: FORMAT_VERSION,
            layout: describe_layout(&arch.layout),
            loss_arch: arch,
            shapes: arch.shapes().into_iter().map(|(n, s)| (n.to_string(), s)).collect(),
            policy_arch: policy_init.as_ref().map(PolicyParams::arch),
            config_hash: config_hash.to_string(),
            epoch,
        };
        Self { header, loss, policy_init }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut data = self.loss.flatten();
        if let Some(p) = &self.policy_init {
            data.extend(p.flatten());
        }
        let mut out = Vec::with_capacity(8 + header.len() + 8 * data.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: &str| CliError::format(path, d);
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().unwrap();
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| CliError::format(path, e))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("format version {} (expected {FORMAT_VERSION})", header.format_version)));
        }
        let body = &bytes[8 + hlen..];
        if !body.len().is_multiple_of(8) {
            return Err(bad("parameter section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let loss_len = header.loss_arch.param_count();
        let policy_len = header.policy_arch.as_ref().map_or(0, PolicyArch::param_count);
        if data.len() != loss_len + policy_len {
            return Err(bad(&format!("{} parameters, header implies {}", data.len(), loss_len + policy_len)));
        }
        let loss = LossParams::unflatten(header.loss_arch, &data[..loss_len])?;
        let policy_init = match &header.policy_arch {
            Some(a) => Some(PolicyParams::unflatten(a, &data[loss_len..])?),
            None => None,
        };
        Ok(Self { header, loss, policy_init })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes via a sibling temporary file so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(CliError::io(&tmp))?;
    f.write_all(bytes).map_err(CliError::io(&tmp))?;
    f.sync_all().map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

/// Coordinator state plus the hash of the config that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub config_hash: String,
    pub coordinator: CoordinatorState,
}

impl ResumeState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec(self).expect("state serializes");
        write_atomic(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use epg_core::nets::{FeatureLayout, HeadInit};
    use epg_core::rng;

    fn loss() -> LossParams {
        let mut r = rng::stream(1, &[]);
        LossParams::init(LossArch::new(FeatureLayout::new(2, 2, true), 64), HeadInit::Random, &mut r).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let mut r = rng::stream(2, &[]);
        let init = PolicyParams::init(&PolicyArch::new(2, 2, vec![8]), &mut r);
        for ck in [Checkpoint::new(loss(), None, "abc", 3), Checkpoint::new(loss(), Some(init), "abc", 3)] {
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = Checkpoint::new(loss(), None, "h", 0).to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..4], p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut wrong = bytes.clone();
        let text = String::from_utf8_lossy(&wrong[8..40]).replace("\"format_version\":1", "\"format_version\":9");
        wrong[8..40].copy_from_slice(text.as_bytes());
        assert!(Checkpoint::from_bytes(&wrong, p).is_err());
    }

    #[test]
    fn header_is_little_endian_json() {
        let bytes = Checkpoint::new(loss(), None, "h", 0).to_bytes();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert!(header["layout"].as_str().unwrap().starts_with("state:2,action:2,done:1,reward:1"));
        let first = f64::from_le_bytes(bytes[8 + hlen..16 + hlen].try_into().unwrap());
        assert_eq!(first, loss().flatten()[0]);
    }
}
