//! Versioned binary checkpoint container: schedule snapshot, class count,
//! parameter blobs, optimizer momentum, and the network's RNG state —
//! everything needed to resume bitwise-identically.

use crate::error::{Error, Result};
use crate::net::{NetConfig, SegNet, SgdMomentum};
use crate::types::TaskSchedule;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ISCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    schedule: TaskSchedule,
    net_config: NetConfig,
    class_count: usize,
    task: usize,
    rng_word_pos: u64,
    rng_seed_hex: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub net: SegNet,
    pub schedule: TaskSchedule,
    pub task: usize,
    pub velocity: Option<Vec<f64>>,
}

pub fn save(
    path: &Path,
    net: &SegNet,
    schedule: &TaskSchedule,
    task: usize,
    optimizer: Option<&SgdMomentum>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (word_pos, seed) = net.rng_state();
    let meta = Metadata {
        schedule: schedule.clone(),
        net_config: *net.config(),
        class_count: net.class_count(),
        task,
        rng_word_pos: word_pos,
        rng_seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let params = net.param_vector();

    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u64::<LittleEndian>(meta_json.len() as u64)?;
    out.write_all(&meta_json)?;
    out.write_u64::<LittleEndian>(params.len() as u64)?;
    for v in &params {
        out.write_f64::<LittleEndian>(*v)?;
    }
    match optimizer {
        Some(opt) => {
            let vel = opt.velocity_vector();
            out.write_u64::<LittleEndian>(vel.len() as u64)?;
            for v in &vel {
                out.write_f64::<LittleEndian>(*v)?;
            }
        }
        None => out.write_u64::<LittleEndian>(0)?,
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut input = BufReader::new(std::fs::File::open(path).map_err(|_| {
        Error::MissingArtifact {
            what: format!("checkpoint at {}", path.display()),
            hint: "train".into(),
        }
    })?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::validation("checkpoint: bad magic"));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::validation(format!("checkpoint: unsupported version {version}")));
    }
    let meta_len = input.read_u64::<LittleEndian>()? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    input.read_exact(&mut meta_buf)?;
    let meta: Metadata = serde_json::from_slice(&meta_buf)?;

    let n_params = input.read_u64::<LittleEndian>()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(input.read_f64::<LittleEndian>()?);
    }
    let n_vel = input.read_u64::<LittleEndian>()? as usize;
    let velocity = if n_vel > 0 {
        let mut vel = Vec::with_capacity(n_vel);
        for _ in 0..n_vel {
            vel.push(input.read_f64::<LittleEndian>()?);
        }
        Some(vel)
    } else {
        None
    };

    let mut net = SegNet::new(meta.net_config, meta.class_count, 0)?;
    net.set_param_vector(&params)?;
    if meta.rng_seed_hex.len() != 64 {
        return Err(Error::validation("checkpoint: bad rng seed"));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in meta.rng_seed_hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).map_err(|_| Error::validation("bad seed hex"))?;
        seed[i] = u8::from_str_radix(s, 16).map_err(|_| Error::validation("bad seed hex"))?;
    }
    net.restore_rng(meta.rng_word_pos, seed);

    Ok(Checkpoint { net, schedule: meta.schedule, task: meta.task, velocity })
}
