//! Binary little-endian checkpoints: run config, vocabulary, every
//! parameter with its Adam moments, noise statistics and step counters.
//! Writing is a pure function of the state, so save → load → save is
//! byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::generation::NoiseStats;
use crate::model::Model;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"AGENTCKP";
const VERSION: u32 = 1;

/// Complete training state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model<T>,
    pub noise: NoiseStats,
    /// Main-network steps done.
    pub step: u64,
    /// Adversarial steps done.
    pub gan_step: u64,
}

fn bad(what: impl Into<String>) -> Error {
    Error::Checkpoint(what.into())
}

fn io(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        bad("truncated file")
    } else {
        Error::Io(e)
    }
}

fn put_blob(w: &mut Vec<u8>, b: &[u8]) {
    w.write_u64::<LE>(b.len() as u64).unwrap();
    w.extend_from_slice(b);
}

fn get_blob(r: &mut &[u8]) -> Result<Vec<u8>> {
    let n = r.read_u64::<LE>().map_err(io)? as usize;
    if n > r.len() {
        return Err(bad("truncated file"));
    }
    let mut b = vec![0; n];
    r.read_exact(&mut b).map_err(io)?;
    Ok(b)
}

fn put_f64s<T: Scalar>(w: &mut Vec<u8>, xs: impl IntoIterator<Item = T>) {
    for x in xs {
        w.write_f64::<LE>(x.as_f64()).unwrap();
    }
}

fn get_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    if n.saturating_mul(8) > r.len() {
        return Err(bad("truncated file"));
    }
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out).map_err(io)?;
    Ok(out)
}

fn tensor<T: Scalar>(shape: &[usize], data: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::new(shape.to_vec(), data.into_iter().map(T::lit).collect())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u32::<LE>(VERSION).unwrap();
        put_blob(&mut w, serde_json::to_string(&self.config)?.as_bytes());
        put_blob(&mut w, self.vocab.to_file_string().as_bytes());
        let store = &self.model.store;
        let ids: Vec<_> = store.ids().collect();
        w.write_u64::<LE>(ids.len() as u64).unwrap();
        for &id in &ids {
            let name = store.name(id).as_bytes();
            w.write_u32::<LE>(name.len() as u32).unwrap();
            w.extend_from_slice(name);
            let v = store.value(id);
            w.write_u32::<LE>(v.shape().len() as u32).unwrap();
            for &d in v.shape() {
                w.write_u64::<LE>(d as u64).unwrap();
            }
            put_f64s(&mut w, v.data().iter().copied());
        }
        for &id in &ids {
            put_f64s(&mut w, store.moments(id).0.data().iter().copied());
        }
        for &id in &ids {
            put_f64s(&mut w, store.moments(id).1.data().iter().copied());
        }
        for &id in &ids {
            w.write_u64::<LE>(store.moments(id).2).unwrap();
        }
        let noise = &self.noise;
        w.write_u64::<LE>(noise.levels() as u64).unwrap();
        for l in 0..noise.levels() {
            w.write_u64::<LE>(noise.mean[l].len() as u64).unwrap();
            put_f64s(&mut w, noise.mean[l].iter().copied());
            put_f64s(&mut w, noise.var[l].iter().copied());
            w.write_u64::<LE>(noise.updates[l]).unwrap();
        }
        w.write_u64::<LE>(self.step).unwrap();
        w.write_u64::<LE>(self.gan_step).unwrap();
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.read_u32::<LE>().map_err(io)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config =
            String::from_utf8(get_blob(&mut r)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = RunConfig::from_json(&config)?;
        let vocab =
            String::from_utf8(get_blob(&mut r)?).map_err(|_| bad("vocabulary is not UTF-8"))?;
        let vocab = Vocabulary::from_file_string(&vocab)?;
        let mut model = Model::new(config.model.clone(), vocab.len(), config.seed()?)?;
        let ids: Vec<_> = model.store.ids().collect();
        let count = r.read_u64::<LE>().map_err(io)? as usize;
        if count != ids.len() {
            return Err(bad(format!(
                "{count} parameters stored, model has {}",
                ids.len()
            )));
        }
        let mut shapes = Vec::with_capacity(count);
        for &id in &ids {
            let n = r.read_u32::<LE>().map_err(io)? as usize;
            if n > r.len() {
                return Err(bad("truncated file"));
            }
            let mut name = vec![0; n];
            r.read_exact(&mut name).map_err(io)?;
            if name != model.store.name(id).as_bytes() {
                return Err(bad(format!(
                    "parameter {} found where {} was expected",
                    String::from_utf8_lossy(&name),
                    model.store.name(id)
                )));
            }
            let rank = r.read_u32::<LE>().map_err(io)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LE>().map(|d| d as usize).map_err(io))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let value = tensor(&shape, get_f64s(&mut r, len)?)?;
            model
                .store
                .set_value(id, value)
                .map_err(|e| bad(e.to_string()))?;
            shapes.push(shape);
        }
        let mut ms = Vec::with_capacity(count);
        for shape in &shapes {
            ms.push(tensor::<T>(
                shape,
                get_f64s(&mut r, shape.iter().product())?,
            )?);
        }
        let mut vs = Vec::with_capacity(count);
        for shape in &shapes {
            vs.push(tensor::<T>(
                shape,
                get_f64s(&mut r, shape.iter().product())?,
            )?);
        }
        for ((&id, m), v) in ids.iter().zip(ms).zip(vs) {
            let steps = r.read_u64::<LE>().map_err(io)?;
            model.store.restore_moments(id, m, v, steps)?;
        }
        let levels = r.read_u64::<LE>().map_err(io)? as usize;
        if levels != config.model.dims.len() {
            return Err(bad(format!("noise statistics for {levels} levels")));
        }
        let mut noise = NoiseStats::new(&config.model.dims);
        for l in 0..levels {
            let d = r.read_u64::<LE>().map_err(io)? as usize;
            if d != config.model.dims[l] {
                return Err(bad(format!("noise statistics of width {d} at level {l}")));
            }
            noise.mean[l] = get_f64s(&mut r, d)?;
            noise.var[l] = get_f64s(&mut r, d)?;
            noise.updates[l] = r.read_u64::<LE>().map_err(io)?;
        }
        let step = r.read_u64::<LE>().map_err(io)?;
        let gan_step = r.read_u64::<LE>().map_err(io)?;
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            config,
            vocab,
            model,
            noise,
            step,
            gan_step,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
