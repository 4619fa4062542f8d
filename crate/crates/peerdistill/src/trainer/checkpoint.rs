//! Versioned binary checkpoints with an integrity checksum.
//!
//! The file holds everything a resumed run needs to continue bitwise: the
//! config snapshot, graph parameters, optimizer velocity, bank state, epoch
//! counter, and the training rng position. A trailing content hash rejects
//! truncated or flipped bytes before any state is rebuilt.

use super::TrainState;
use crate::config::TrainConfig;
use crate::contrastive::MemoryBank;
use crate::error::{Error, Result};
use crate::graph::PeerGraph;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::io::{Cursor, Read};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PDCK";

/// On-disk checkpoint format revision, recorded in run manifests.
pub const CHECKPOINT_VERSION: u32 = 1;

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn write_params(buf: &mut Vec<u8>, graph: &PeerGraph) {
    let flat = graph.param_vector();
    buf.write_u64::<LittleEndian>(flat.len() as u64).unwrap();
    for v in flat {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
}

fn read_params(cur: &mut Cursor<&[u8]>, graph: &mut PeerGraph) -> Result<()> {
    let n = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| integrity("truncated checkpoint (parameter count)"))? as usize;
    if n != graph.param_count() {
        return Err(integrity(format!(
            "parameter count {n} does not match the configured model ({})",
            graph.param_count()
        )));
    }
    let mut flat = vec![0.0; n];
    for v in flat.iter_mut() {
        *v = cur
            .read_f64::<LittleEndian>()
            .map_err(|_| integrity("truncated checkpoint (parameters)"))?;
    }
    graph.set_param_vector(&flat)
}

/// Serialize the full training state to `path`.
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();

    let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
    buf.write_u64::<LittleEndian>(cfg_json.len() as u64).unwrap();
    buf.extend_from_slice(&cfg_json);

    buf.write_u64::<LittleEndian>(state.epoch as u64).unwrap();
    write_params(&mut buf, &state.graph);
    write_params(&mut buf, &state.velocity);

    buf.write_u64::<LittleEndian>(state.banks.len() as u64).unwrap();
    for bank in &state.banks {
        let (slots, labels, rho, z) = bank.snapshot();
        buf.write_u64::<LittleEndian>(slots.nrows() as u64).unwrap();
        buf.write_u64::<LittleEndian>(slots.ncols() as u64).unwrap();
        buf.write_f64::<LittleEndian>(rho).unwrap();
        match z {
            Some(z) => {
                buf.push(1);
                buf.write_f64::<LittleEndian>(z).unwrap();
            }
            None => {
                buf.push(0);
                buf.write_f64::<LittleEndian>(0.0).unwrap();
            }
        }
        for &l in &labels {
            buf.write_u64::<LittleEndian>(l as u64).unwrap();
        }
        for &v in slots.iter() {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
    }

    buf.extend_from_slice(&state.rng.get_seed());
    buf.write_u128::<LittleEndian>(state.rng.get_word_pos()).unwrap();

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Rebuild training state from `path`. When `expected` is given, the stored
/// config must match it exactly; differing keys are listed in the error.
pub fn restore_checkpoint(
    path: &Path,
    expected: Option<&TrainConfig>,
) -> Result<(TrainState, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 40 {
        return Err(integrity("file too short to be a checkpoint"));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(integrity("checksum mismatch, refusing to load"));
    }

    let mut cur = Cursor::new(body);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| integrity("truncated checkpoint (magic)"))?;
    if &magic != MAGIC {
        return Err(integrity("not a checkpoint file (bad magic)"));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| integrity("truncated checkpoint (version)"))?;
    if version != CHECKPOINT_VERSION {
        return Err(integrity(format!("unsupported checkpoint version {version}")));
    }

    let cfg_len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| integrity("truncated checkpoint (config length)"))? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    cur.read_exact(&mut cfg_json)
        .map_err(|_| integrity("truncated checkpoint (config)"))?;
    let cfg: TrainConfig = serde_json::from_slice(&cfg_json)
        .map_err(|e| integrity(format!("embedded config unreadable: {e}")))?;
    if let Some(exp) = expected {
        if *exp != cfg {
            return Err(Error::ConfigMismatch(config_diff(exp, &cfg)));
        }
    }

    let epoch = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| integrity("truncated checkpoint (epoch)"))? as usize;

    let spec = cfg.backbone_spec();
    let mut graph = PeerGraph::build(&spec, cfg.peers, cfg.share_stem, 0)?;
    read_params(&mut cur, &mut graph)?;
    let mut velocity = graph.zeros_like();
    read_params(&mut cur, &mut velocity)?;

    let n_banks = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| integrity("truncated checkpoint (bank count)"))? as usize;
    let mut banks = Vec::with_capacity(n_banks);
    for _ in 0..n_banks {
        let n = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| integrity("truncated checkpoint (bank rows)"))? as usize;
        let d = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| integrity("truncated checkpoint (bank dim)"))? as usize;
        let rho = cur
            .read_f64::<LittleEndian>()
            .map_err(|_| integrity("truncated checkpoint (bank rho)"))?;
        let mut flag = [0u8; 1];
        cur.read_exact(&mut flag)
            .map_err(|_| integrity("truncated checkpoint (bank z flag)"))?;
        let z_value = cur
            .read_f64::<LittleEndian>()
            .map_err(|_| integrity("truncated checkpoint (bank z)"))?;
        let z = if flag[0] == 1 { Some(z_value) } else { None };
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(
                cur.read_u64::<LittleEndian>()
                    .map_err(|_| integrity("truncated checkpoint (bank labels)"))?
                    as usize,
            );
        }
        let mut slots = Array2::zeros((n, d));
        for v in slots.iter_mut() {
            *v = cur
                .read_f64::<LittleEndian>()
                .map_err(|_| integrity("truncated checkpoint (bank slots)"))?;
        }
        banks.push(MemoryBank::from_snapshot(slots, labels, rho, z)?);
    }

    let mut seed = [0u8; 32];
    cur.read_exact(&mut seed)
        .map_err(|_| integrity("truncated checkpoint (rng seed)"))?;
    let word_pos = cur
        .read_u128::<LittleEndian>()
        .map_err(|_| integrity("truncated checkpoint (rng position)"))?;
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    if cur.position() as usize != body.len() {
        return Err(integrity("trailing bytes after checkpoint payload"));
    }

    Ok((
        TrainState {
            graph,
            banks,
            velocity,
            epoch,
            rng,
        },
        cfg,
    ))
}

/// List the keys on which two configs disagree.
fn config_diff(expected: &TrainConfig, stored: &TrainConfig) -> String {
    let a = serde_json::to_value(expected).expect("config serializes");
    let b = serde_json::to_value(stored).expect("config serializes");
    let (a, b) = match (a, b) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => (a, b),
        _ => return "configs differ".to_string(),
    };
    let keys: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    format!(
        "checkpoint config differs from the requested one on: {}",
        keys.join(", ")
    )
}
