use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use bifuser_tensor::{Adam, ParamKind, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BiFuser, ModelConfig, ModelError, ModelResult, Normalization, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIFUSER\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Generator position, enough to resume the exact random stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> ModelResult<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self.word_pos.parse::<u128>().map_err(|e| ModelError::Checkpoint(format!("rng position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Element offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Element type of the data section, `f32` or `f64`.
    pub dtype: String,
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub epoch: usize,
    pub step: u64,
    pub adam_steps: Option<u64>,
    pub rng: RngState,
    pub train_config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

/// Restored model plus training state.
pub struct LoadedCheckpoint<T: Scalar> {
    pub model: BiFuser<T>,
    pub optimizer: Option<Adam<T>>,
    pub header: CheckpointHeader,
}

/// Single-file checkpoint: magic, little-endian `u32` version, `u64` header
/// length, JSON header, then every tensor's elements in little-endian order.
pub struct Checkpoint;

impl Checkpoint {
    pub fn save<T: Scalar>(
        path: &Path,
        model: &BiFuser<T>,
        optimizer: Option<&Adam<T>>,
        epoch: usize,
        step: u64,
        rng: RngState,
        train_config: Option<&TrainConfig>,
    ) -> ModelResult<()> {
        let mut entries = Vec::new();
        let mut blobs: Vec<&Tensor<T>> = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, role, t: &Tensor<T>, entries: &mut Vec<TensorEntry>| {
            entries.push(TensorEntry { name: name.to_string(), role, shape: t.shape().to_vec(), offset });
            offset += t.numel();
        };
        for (_, e) in model.store.iter() {
            let role = if e.kind == ParamKind::Trainable { TensorRole::Param } else { TensorRole::Buffer };
            push(&e.name, role, e.value(), &mut entries);
            blobs.push(e.value());
        }
        if let Some(adam) = optimizer {
            for (id, m, v) in adam.state() {
                let name = &model.store.entry(id).name;
                push(name, TensorRole::AdamM, m, &mut entries);
                push(name, TensorRole::AdamV, v, &mut entries);
                blobs.push(m);
                blobs.push(v);
            }
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            dtype: T::DTYPE.to_string(),
            config: model.config.clone(),
            normalization: model.normalization,
            epoch,
            step,
            adam_steps: optimizer.map(|a| a.steps_taken()),
            rng,
            train_config: train_config.cloned(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for t in blobs {
                for &v in t.data() {
                    match T::DTYPE {
                        "f32" => w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?,
                        _ => w.write_all(&v.to_f64_lossy().to_le_bytes())?,
                    }
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_header(path: &Path) -> ModelResult<CheckpointHeader> {
        let mut r = BufReader::new(File::open(path)?);
        Self::header_from(&mut r)
    }

    fn header_from(r: &mut impl Read) -> ModelResult<CheckpointHeader> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.version != version {
            return Err(ModelError::Checkpoint("header and file versions disagree".into()));
        }
        Ok(header)
    }

    /// Loads into scalar type `T`, converting from the stored element type.
    pub fn load<T: Scalar>(path: &Path) -> ModelResult<LoadedCheckpoint<T>> {
        let mut r = BufReader::new(File::open(path)?);
        let header = Self::header_from(&mut r)?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(ModelError::Checkpoint(format!("unknown element type {other}"))),
        };
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if raw.len() != total * width {
            return Err(ModelError::Checkpoint(format!("data section holds {} bytes, expected {}", raw.len(), total * width)));
        }
        let read = |e: &TensorEntry| -> ModelResult<Tensor<T>> {
            let n: usize = e.shape.iter().product();
            let bytes = &raw[e.offset * width..(e.offset + n) * width];
            let data = bytes
                .chunks_exact(width)
                .map(|c| {
                    let v = if width == 4 { f32::from_le_bytes(c.try_into().unwrap()) as f64 } else { f64::from_le_bytes(c.try_into().unwrap()) };
                    T::lit(v)
                })
                .collect();
            Ok(Tensor::from_vec(&e.shape, data)?)
        };

        let mut model = BiFuser::<T>::new(header.config.clone(), 0)?;
        model.normalization = header.normalization;
        let mut seen = 0;
        let mut optimizer = header.adam_steps.map(|_| Adam::new(model.store.len()));
        let mut pending_m: Option<(String, Tensor<T>)> = None;
        for e in &header.tensors {
            let id = model.store.find(&e.name).ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {}", e.name)))?;
            let t = read(e)?;
            match e.role {
                TensorRole::Param | TensorRole::Buffer => {
                    model.store.set(id, t)?;
                    seen += 1;
                }
                TensorRole::AdamM => pending_m = Some((e.name.clone(), t)),
                TensorRole::AdamV => {
                    let (name, m) = pending_m.take().ok_or_else(|| ModelError::Checkpoint("optimizer moments out of order".into()))?;
                    if name != e.name {
                        return Err(ModelError::Checkpoint("optimizer moments out of order".into()));
                    }
                    if let Some(adam) = optimizer.as_mut() {
                        adam.restore(header.adam_steps.unwrap_or(0), id, m, t);
                    }
                }
            }
        }
        if seen != model.store.len() {
            return Err(ModelError::Checkpoint(format!("checkpoint has {seen} of {} model tensors", model.store.len())));
        }
        if let (Some(adam), Some(steps)) = (optimizer.as_mut(), header.adam_steps) {
            adam.set_steps(steps);
        }
        Ok(LoadedCheckpoint { model, optimizer, header })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_and_version_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = BiFuser::<f32>::new(ModelConfig::tiny(64), 3).unwrap();
        model.normalization.mean = [0.1, 0.2, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rand::Rng::random::<u64>(&mut rng);
        Checkpoint::save(&path, &model, None, 4, 17, RngState::of(&rng), None).unwrap();
        let loaded = Checkpoint::load::<f32>(&path).unwrap();
        assert_eq!(loaded.header.epoch, 4);
        assert_eq!(loaded.model.normalization, model.normalization);
        for (id, e) in model.store.iter() {
            assert_eq!(loaded.model.store.get(id), e.value());
        }
        let mut resumed = loaded.header.rng.restore().unwrap();
        assert_eq!(rand::Rng::random::<u64>(&mut resumed), rand::Rng::random::<u64>(&mut rng));

        // Loading at double precision converts elements.
        let wide = Checkpoint::load::<f64>(&path).unwrap();
        let id = model.store.ids().next().unwrap();
        assert_eq!(wide.model.store.get(id).data()[0], model.store.get(id).data()[0] as f64);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load::<f32>(&path), Err(ModelError::UnsupportedVersion(7))));
    }
}
