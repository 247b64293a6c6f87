//! Flat little-endian policy checkpoints.
//!
//! Layout: the magic `ADAGTD3\0`, then `u32` version, state dim, action dim,
//! hidden-layer count and each hidden width, then a `u32` block count and for
//! every block a `u64` length followed by that many `f64` values. Blocks are
//! actor, actor target, critic 1, critic 2 and their two targets. Optimizer
//! moments and the replay buffer are not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Td3Agent, Td3Config};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ADAGTD3\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub blocks: Vec<Vec<f64>>,
}

impl Td3Agent {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            hidden: self.cfg.hidden.clone(),
            blocks: vec![
                self.actor.clone(),
                self.actor_target.clone(),
                self.q1.clone(),
                self.q2.clone(),
                self.q1_target.clone(),
                self.q2_target.clone(),
            ],
        }
    }

    /// Fresh agent carrying the checkpointed weights.
    pub fn from_checkpoint(cp: &Checkpoint, cfg: Td3Config, seed: u64) -> Result<Self> {
        if cp.hidden != cfg.hidden {
            return Err(Error::Checkpoint(format!(
                "hidden sizes {:?} do not match config {:?}",
                cp.hidden, cfg.hidden
            )));
        }
        let mut agent = Td3Agent::new(cp.state_dim, cp.action_dim, cfg, seed)?;
        if cp.blocks.len() != 6 {
            return Err(Error::Checkpoint(format!("expected 6 parameter blocks, found {}", cp.blocks.len())));
        }
        let targets: [&mut Vec<f64>; 6] = [
            &mut agent.actor,
            &mut agent.actor_target,
            &mut agent.q1,
            &mut agent.q2,
            &mut agent.q1_target,
            &mut agent.q2_target,
        ];
        for (dst, src) in targets.into_iter().zip(&cp.blocks) {
            if dst.len() != src.len() {
                return Err(Error::Checkpoint(format!(
                    "block length {} does not match network ({})",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(agent)
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit the header")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION as usize)?;
    put_u32(&mut w, cp.state_dim)?;
    put_u32(&mut w, cp.action_dim)?;
    put_u32(&mut w, cp.hidden.len())?;
    for &h in &cp.hidden {
        put_u32(&mut w, h)?;
    }
    put_u32(&mut w, cp.blocks.len())?;
    for b in &cp.blocks {
        w.write_all(&(b.len() as u64).to_le_bytes())?;
        for x in b {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(get::<4>(r)?) as usize)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    if &get::<8>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a policy checkpoint", path.display())));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let state_dim = get_u32(&mut r)?;
    let action_dim = get_u32(&mut r)?;
    let n_hidden = get_u32(&mut r)?;
    let hidden = (0..n_hidden).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
    let n_blocks = get_u32(&mut r)?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let len = u64::from_le_bytes(get::<8>(&mut r)?) as usize;
        let mut b = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            b.push(f64::from_le_bytes(get::<8>(&mut r)?));
        }
        blocks.push(b);
    }
    Ok(Checkpoint { state_dim, action_dim, hidden, blocks })
}
