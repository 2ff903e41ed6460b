//! Binary training checkpoint.
//!
//! Layout: `MAGIC`, version (u32 LE), payload length (u64 LE), payload,
//! SHA-256 of the payload. Floats are stored as their IEEE bit patterns so
//! a round trip is exact.

use std::fs;
use std::io::{self, Cursor, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::TagVocabulary;
use crate::embeddings::{EmbeddingSnapshot, EmbeddingTable};
use crate::error::{Error, Result};
use crate::model::{Dense, Moments, OptimizerConfig, OptimizerState, ProjectorConfig, ProjectorNet};
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"TAGEMBCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    train: TrainConfig,
    projector: ProjectorConfig,
    optimizer: OptimizerConfig,
}

fn put_f64s<'a>(w: &mut Vec<u8>, xs: impl ExactSizeIterator<Item = &'a f64>) {
    w.write_u64::<LE>(xs.len() as u64).unwrap();
    for x in xs {
        w.write_u64::<LE>(x.to_bits()).unwrap();
    }
}

fn put_matrix(w: &mut Vec<u8>, m: &Array2<f64>) {
    w.write_u64::<LE>(m.nrows() as u64).unwrap();
    w.write_u64::<LE>(m.ncols() as u64).unwrap();
    put_f64s(w, m.iter());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.write_u64::<LE>(b.len() as u64).unwrap();
    w.extend_from_slice(b);
}

fn put_moments(w: &mut Vec<u8>, m: &Moments) {
    put_f64s(w, m.first.iter());
    put_f64s(w, m.second.iter());
}

fn encode(state: &TrainState, cfg: &TrainConfig) -> Vec<u8> {
    let mut w = Vec::new();
    let meta = Meta {
        train: cfg.clone(),
        projector: state.net.config().clone(),
        optimizer: state.optimizer.config.clone(),
    };
    put_bytes(&mut w, serde_json::to_string(&meta).expect("config serializes").as_bytes());
    w.write_u64::<LE>(state.epochs_done).unwrap();
    w.write_u64::<LE>(state.net.layers().len() as u64).unwrap();
    for l in state.net.layers() {
        put_matrix(&mut w, &l.weight);
        put_f64s(&mut w, l.bias.iter());
    }
    let vocab = state.table.vocab();
    w.write_u64::<LE>(vocab.len() as u64).unwrap();
    for (t, f) in vocab.tokens().iter().zip(vocab.frequencies()) {
        put_bytes(&mut w, t.as_bytes());
        w.write_u64::<LE>(*f).unwrap();
    }
    put_matrix(&mut w, state.table.vectors());
    let mask: Vec<u8> = state.table.trainable_mask().iter().map(|&b| b as u8).collect();
    put_bytes(&mut w, &mask);
    put_matrix(&mut w, state.snapshot.vectors());
    let opt = &state.optimizer;
    w.write_u64::<LE>(opt.net_steps).unwrap();
    w.write_u64::<LE>(opt.net.len() as u64).unwrap();
    for (mw, mb) in &opt.net {
        put_moments(&mut w, mw);
        put_moments(&mut w, mb);
    }
    put_moments(&mut w, &opt.table);
    w.write_u64::<LE>(opt.table_steps.len() as u64).unwrap();
    for s in &opt.table_steps {
        w.write_u64::<LE>(*s).unwrap();
    }
    w.write_u64::<LE>(opt.table_dim as u64).unwrap();
    w
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path` once complete.
pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let payload = encode(state, cfg);
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let f = tmp.as_file_mut();
        f.write_all(MAGIC)?;
        f.write_u32::<LE>(VERSION)?;
        f.write_u64::<LE>(payload.len() as u64)?;
        f.write_all(&payload)?;
        f.write_all(&Sha256::digest(&payload))?;
        f.sync_all()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Payload<'a>(Cursor<&'a [u8]>);

impl Payload<'_> {
    fn u64(&mut self) -> io::Result<u64> {
        self.0.read_u64::<LE>()
    }

    fn len(&mut self, elem: usize) -> io::Result<usize> {
        let n = self.u64()? as usize;
        let left = self.0.get_ref().len() - self.0.position() as usize;
        if n.checked_mul(elem).is_none_or(|b| b > left) {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "length exceeds payload"));
        }
        Ok(n)
    }

    fn bytes(&mut self) -> io::Result<Vec<u8>> {
        let n = self.len(1)?;
        let mut b = vec![0; n];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }

    fn f64s(&mut self) -> io::Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.u64().map(f64::from_bits)).collect()
    }

    fn matrix(&mut self) -> Result<Array2<f64>> {
        let r = self.u64()? as usize;
        let c = self.u64()? as usize;
        let v = self.f64s()?;
        Array2::from_shape_vec((r, c), v).map_err(|e| Error::CheckpointCorrupt(e.to_string()))
    }

    fn moments(&mut self) -> io::Result<Moments> {
        Ok(Moments {
            first: self.f64s()?,
            second: self.f64s()?,
        })
    }
}

fn decode(payload: &[u8]) -> Result<Checkpoint> {
    let mut p = Payload(Cursor::new(payload));
    let meta: Meta = serde_json::from_slice(&p.bytes()?).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    let epochs_done = p.u64()?;
    let n_layers = p.len(16)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let weight = p.matrix()?;
        let bias = Array1::from(p.f64s()?);
        layers.push(Dense { weight, bias });
    }
    let net = ProjectorNet::from_layers(meta.projector, layers)?;
    let n_tokens = p.len(16)?;
    let mut entries = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let t = String::from_utf8(p.bytes()?).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        entries.push((t, p.u64()?));
    }
    let vocab = Arc::new(TagVocabulary::from_entries(entries)?);
    let mut table = EmbeddingTable::from_matrix(vocab, p.matrix()?)?;
    table.set_trainable_mask(p.bytes()?.into_iter().map(|b| b != 0).collect())?;
    let snapshot = EmbeddingSnapshot::from_matrix(p.matrix()?);
    if snapshot.vectors().dim() != table.vectors().dim() {
        return Err(Error::CheckpointCorrupt("snapshot shape differs from table".into()));
    }
    let net_steps = p.u64()?;
    let n_opt = p.len(32)?;
    let mut net_moments = Vec::with_capacity(n_opt);
    for _ in 0..n_opt {
        net_moments.push((p.moments()?, p.moments()?));
    }
    let table_moments = p.moments()?;
    let n_steps = p.len(8)?;
    let table_steps = (0..n_steps).map(|_| p.u64()).collect::<io::Result<Vec<_>>>()?;
    let table_dim = p.u64()? as usize;
    if (p.0.position() as usize) != payload.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes after payload".into()));
    }
    let optimizer = OptimizerState {
        config: meta.optimizer,
        net_steps,
        net: net_moments,
        table: table_moments,
        table_steps,
        table_dim,
    };
    let fresh = OptimizerState::new(optimizer.config.clone(), &net, &table);
    let shapes_match = optimizer.net.len() == fresh.net.len()
        && optimizer.net.iter().zip(&fresh.net).all(|(a, b)| same_shape(&a.0, &b.0) && same_shape(&a.1, &b.1))
        && same_shape(&optimizer.table, &fresh.table)
        && optimizer.table_steps.len() == fresh.table_steps.len()
        && optimizer.table_dim == fresh.table_dim;
    if !shapes_match {
        return Err(Error::CheckpointCorrupt("optimizer buffers do not match parameters".into()));
    }
    Ok(Checkpoint {
        config: meta.train,
        state: TrainState {
            net,
            table,
            snapshot,
            optimizer,
            epochs_done,
        },
    })
}

fn same_shape(a: &Moments, b: &Moments) -> bool {
    a.first.len() == b.first.len() && a.second.len() == b.second.len()
}

/// Reads and verifies a checkpoint. Nothing is returned unless the whole
/// file parses and its digest matches.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(Error::NotFound(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    let header = MAGIC.len() + 4 + 8;
    if bytes.len() < header + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointCorrupt(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != header + len + DIGEST_LEN {
        return Err(Error::CheckpointCorrupt("file length does not match header".into()));
    }
    let payload = &bytes[header..header + len];
    if Sha256::digest(payload).as_slice() != &bytes[header + len..] {
        return Err(Error::CheckpointCorrupt("integrity digest mismatch".into()));
    }
    decode(payload).map_err(|e| match e {
        Error::Io(io) => Error::CheckpointCorrupt(io.to_string()),
        other => other,
    })
}
