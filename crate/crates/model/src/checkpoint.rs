//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `FLEXCKPT`, `u32` version, `u32` length plus
//! UTF-8 config text, `u64` step, RNG state (32-byte seed, `u64` stream,
//! `u128` word position), `u64` optimizer count, loss statistics
//! (`u64` count, `f64` mean, `f64` last), `u32` tensor count, then per tensor
//! a `u32`-prefixed name, `u32` rank, `u64` dims and `f32` values. Tensor
//! names are namespaced `param/`, `ema/`, `opt/m/` and `opt/v/`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flexdiff_core::{Error, Result};

use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{LossStats, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLEXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const NAMESPACES: [&str; 4] = ["param/", "ema/", "opt/m/", "opt/v/"];

pub fn write_checkpoint(w: &mut impl Write, config_text: &str, state: &TrainState) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config_text.len() as u32).to_le_bytes())?;
    w.write_all(config_text.as_bytes())?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&state.rng.get_seed())?;
    w.write_all(&state.rng.get_stream().to_le_bytes())?;
    w.write_all(&state.rng.get_word_pos().to_le_bytes())?;
    w.write_all(&state.opt.t.to_le_bytes())?;
    w.write_all(&state.loss_stats.count.to_le_bytes())?;
    w.write_all(&state.loss_stats.mean.to_le_bytes())?;
    w.write_all(&state.loss_stats.last.to_le_bytes())?;
    let stores = [&state.params, &state.ema, &state.opt.m, &state.opt.v];
    let count: usize = stores.iter().map(|s| s.len()).sum();
    w.write_all(&(count as u32).to_le_bytes())?;
    for (ns, store) in NAMESPACES.iter().zip(stores) {
        for (name, t) in store.iter() {
            let full = format!("{ns}{name}");
            w.write_all(&(full.len() as u32).to_le_bytes())?;
            w.write_all(full.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, config_text: &str, state: &TrainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, config_text, state)?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| truncated(e, what))?;
        Ok(b)
    }

    fn vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        (&mut self.r).take(n as u64).read_to_end(&mut b)?;
        if b.len() != n {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what}"
            )));
        }
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }
}

fn truncated(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("checkpoint truncated while reading {what}"))
    } else {
        Error::Io(e)
    }
}

/// Parse a checkpoint. With `expected_config`, a differing config block is an error.
pub fn read_checkpoint(
    r: &mut impl Read,
    expected_config: Option<&str>,
) -> Result<(String, TrainState)> {
    let mut rd = Reader { r };
    if &rd.bytes::<8>("magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = rd.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let n = rd.u32("config length")? as usize;
    let config = String::from_utf8(rd.vec(n, "config")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    if let Some(want) = expected_config {
        if want != config {
            return Err(Error::Consistency("checkpoint config mismatch".into()));
        }
    }
    let step = rd.u64("step")?;
    let seed = rd.bytes::<32>("rng seed")?;
    let stream = rd.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(rd.bytes("rng position")?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let opt_t = rd.u64("optimizer count")?;
    let loss_stats = LossStats {
        count: rd.u64("loss count")?,
        mean: rd.f64("loss mean")?,
        last: rd.f64("last loss")?,
    };
    let count = rd.u32("tensor count")?;
    let mut stores: [ParamStore<f32>; 4] = Default::default();
    for _ in 0..count {
        let len = rd.u32("tensor name")? as usize;
        let name = String::from_utf8(rd.vec(len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = rd.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| rd.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = rd.vec(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (slot, short) = NAMESPACES
            .iter()
            .enumerate()
            .find_map(|(i, ns)| name.strip_prefix(ns).map(|s| (i, s)))
            .ok_or_else(|| Error::Format(format!("unknown tensor namespace in {name}")))?;
        if stores[slot].id(short).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        stores[slot].add(short, Tensor::new(shape, data));
    }
    let [params, ema, m, v] = stores;
    if !(params.same_layout(&ema) && params.same_layout(&m) && params.same_layout(&v)) {
        return Err(Error::Format(
            "parameter, EMA and optimizer tensors disagree".into(),
        ));
    }
    let mut extra = [0u8; 1];
    if rd.r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let state = TrainState {
        params,
        ema,
        opt: OptimizerState { m, v, t: opt_t },
        step,
        rng,
        loss_stats,
    };
    Ok((config, state))
}

pub fn load_checkpoint(path: &Path, expected_config: Option<&str>) -> Result<(String, TrainState)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?), expected_config)
}
