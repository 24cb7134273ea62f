//! Portable binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `MTRKCKPT` |
//! | 4     | format version (u32, currently 1) |
//! | 4     | kind (u32: 1 meta-parameters, 2 pruner) |
//! | 32    | SHA-256 of the run config |
//! | 8     | seed (u64) |
//! | 8     | episodes consumed (u64) |
//! | 16    | RNG word position (u128) |
//! | 8     | ADAM step count (u64) |
//! | 8 + n | run config as TOML: length (u64) then UTF-8 bytes |
//! | 4     | section count (u32) |
//!
//! followed by that many sections, each a 4-byte ASCII tag, a value count
//! (u64) and the values as f64. Tags: `PARM` flattened meta-parameters,
//! `PHI_` flattened pruner parameters, `ADMM`/`ADMV` ADAM moments.

use std::io::{Read, Write};
use std::path::Path;

use metatrack::metalearn::{AdamState, MetaParams};
use metatrack::network::ModelParams;
use metatrack::pruning::PrunerParams;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"MTRKCKPT";
pub const VERSION: u32 = 1;

pub const TAG_META: [u8; 4] = *b"PARM";
pub const TAG_PRUNER: [u8; 4] = *b"PHI_";
pub const TAG_ADAM_M: [u8; 4] = *b"ADMM";
pub const TAG_ADAM_V: [u8; 4] = *b"ADMV";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Meta = 1,
    Pruner = 2,
}

impl CheckpointKind {
    fn from_u32(v: u32) -> CliResult<Self> {
        match v {
            1 => Ok(CheckpointKind::Meta),
            2 => Ok(CheckpointKind::Pruner),
            _ => Err(CliError::Checkpoint(format!("unknown checkpoint kind {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub episodes: u64,
    pub rng_word_pos: u128,
    pub adam_step: u64,
    pub config_toml: String,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, tag: [u8; 4]) -> CliResult<&[f64]> {
        self.sections
            .iter()
            .find(|s| s.tag == tag)
            .map(|s| s.values.as_slice())
            .ok_or_else(|| CliError::Checkpoint(format!("missing section {}", String::from_utf8_lossy(&tag))))
    }

    pub fn config(&self) -> CliResult<RunConfig> {
        let cfg = RunConfig::from_toml(&self.config_toml)?;
        if cfg.hash() != self.config_hash {
            return Err(CliError::Checkpoint("embedded config does not match the stored hash".into()));
        }
        Ok(cfg)
    }

    pub fn adam_state(&self) -> CliResult<AdamState> {
        Ok(AdamState {
            m: self.section(TAG_ADAM_M)?.to_vec(),
            v: self.section(TAG_ADAM_V)?.to_vec(),
            step: self.adam_step,
        })
    }

    /// Meta-parameters shaped by the embedded config.
    pub fn meta_params(&self) -> CliResult<MetaParams> {
        let cfg = self.config()?;
        let template = meta_template(&cfg)?;
        let flat = self.section(TAG_META)?;
        if flat.len() != template.numel() {
            return Err(CliError::Checkpoint(format!("PARM holds {} values, config implies {}", flat.len(), template.numel())));
        }
        Ok(template.unflatten_like(flat)?)
    }

    pub fn pruner_params(&self) -> CliResult<PrunerParams> {
        let cfg = self.config()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = PrunerParams::init(&cfg.arch, &cfg.pruner_shape, &mut rng)?;
        let flat = self.section(TAG_PRUNER)?;
        if flat.len() != template.numel() {
            return Err(CliError::Checkpoint(format!("PHI_ holds {} values, config implies {}", flat.len(), template.numel())));
        }
        Ok(template.unflatten_like(flat)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.episodes.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(self.config_toml.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_toml.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.tag);
            out.extend_from_slice(&(s.values.len() as u64).to_le_bytes());
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = CheckpointKind::from_u32(read_u32(&mut r)?)?;
        let mut config_hash = [0u8; 32];
        read_exact(&mut r, &mut config_hash)?;
        let seed = read_u64(&mut r)?;
        let episodes = read_u64(&mut r)?;
        let mut pos = [0u8; 16];
        read_exact(&mut r, &mut pos)?;
        let adam_step = read_u64(&mut r)?;
        let len = read_len(&mut r, 1)?;
        let mut text = vec![0u8; len];
        read_exact(&mut r, &mut text)?;
        let config_toml = String::from_utf8(text).map_err(|_| CliError::Checkpoint("config is not UTF-8".into()))?;
        let count = read_u32(&mut r)?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let mut tag = [0u8; 4];
            read_exact(&mut r, &mut tag)?;
            let n = read_len(&mut r, 8)?;
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            sections.push(Section { tag, values });
        }
        if !r.is_empty() {
            return Err(CliError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let ck = Checkpoint {
            kind,
            config_hash,
            seed,
            episodes,
            rng_word_pos: u128::from_le_bytes(pos),
            adam_step,
            config_toml,
            sections,
        };
        ck.config()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Zero meta-parameters with the shapes the config implies.
pub fn meta_template(cfg: &RunConfig) -> CliResult<MetaParams> {
    Ok(MetaParams::with_constant_rates(
        ModelParams::zeros(&cfg.arch)?,
        cfg.meta.lr_mode,
        cfg.meta.k_init,
        cfg.meta.k_on,
        0.0,
    )?)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> CliResult<()> {
    r.read_exact(buf).map_err(|_| CliError::Checkpoint("truncated file".into()))
}

fn read_u32(r: &mut &[u8]) -> CliResult<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> CliResult<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a length and checks that `len * unit` bytes remain.
fn read_len(r: &mut &[u8], unit: usize) -> CliResult<usize> {
    let n = read_u64(r)?;
    match usize::try_from(n).ok().and_then(|n| n.checked_mul(unit).map(|b| (n, b))) {
        Some((n, bytes)) if bytes <= r.len() => Ok(n),
        _ => Err(CliError::Checkpoint("truncated file".into())),
    }
}
