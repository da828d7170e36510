//! Binary checkpoint: `EMTK` magic, `u32` version, `u64` manifest length, a
//! JSON manifest (configs, step, array names, shapes, frozen flags), then
//! little-endian `f64` payload: every parameter array in manifest order,
//! followed by the Adam moments of the trainable arrays.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::training::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"EMTK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub shape: [usize; 2],
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub arrays: Vec<ArrayMeta>,
    pub frozen_checksum: u64,
}

fn put(out: &mut impl Write, a: &Array2<f64>) -> std::io::Result<()> {
    for v in a.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let store = &trainer.model.store;
    let manifest = CheckpointManifest {
        model: trainer.model.config.clone(),
        train: trainer.config.clone(),
        step: trainer.step,
        arrays: store
            .entries()
            .iter()
            .map(|e| ArrayMeta {
                name: e.name.clone(),
                shape: [e.value.nrows(), e.value.ncols()],
                frozen: e.frozen,
            })
            .collect(),
        frozen_checksum: store.frozen_checksum(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(fs::File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for e in store.entries() {
            put(&mut out, &e.value)?;
        }
        for id in store.trainable() {
            put(&mut out, &trainer.adam.m[id.index()])?;
            put(&mut out, &trainer.adam.v[id.index()])?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array(&mut self, shape: (usize, usize)) -> Result<Array2<f64>> {
        let raw = self.take(shape.0 * shape.1 * 8)?;
        let vals = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Array2::from_shape_vec(shape, vals).expect("sized from shape"))
    }
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    let len = check_header(&head)?;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    Ok(serde_json::from_slice(&json)?)
}

fn check_header(head: &[u8]) -> Result<usize> {
    if &head[0..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize)
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let len = check_header(r.take(16)?)?;
    let manifest: CheckpointManifest = serde_json::from_slice(r.take(len)?)?;

    let mut model = Model::new(&manifest.model, manifest.train.seed)?;
    if model.store.len() != manifest.arrays.len() {
        return Err(Error::Checkpoint(format!(
            "{} arrays in checkpoint, model has {}",
            manifest.arrays.len(),
            model.store.len()
        )));
    }
    for (entry, meta) in model.store.entries_mut().iter_mut().zip(&manifest.arrays) {
        let shape = (meta.shape[0], meta.shape[1]);
        if entry.name != meta.name || entry.value.dim() != shape || entry.frozen != meta.frozen {
            return Err(Error::Checkpoint(format!(
                "array {} {:?} does not match model array {} {:?}",
                meta.name,
                shape,
                entry.name,
                entry.value.dim()
            )));
        }
        entry.value = r.array(shape)?;
    }
    if model.store.frozen_checksum() != manifest.frozen_checksum {
        return Err(Error::Checkpoint("frozen parameter checksum mismatch".into()));
    }
    let mut adam = Adam::new(manifest.train.adam, &model.store);
    for id in model.store.trainable().collect::<Vec<_>>() {
        let dim = model.store.get(id).dim();
        adam.m[id.index()] = r.array(dim)?;
        adam.v[id.index()] = r.array(dim)?;
    }
    adam.t = manifest.step;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Trainer::from_parts(model, adam, manifest.train, manifest.step))
}
