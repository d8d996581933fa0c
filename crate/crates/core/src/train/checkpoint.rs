use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainError};
use crate::diff::{Adam, ParamStore, Tensor, TensorArchive};
use crate::render::DnrModel;
use crate::scene::Vec3;
use crate::select::QFunction;

/// Complete training state after a step.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: DnrModel,
    pub selector: Option<QFunction>,
    pub adam_model: Option<Adam>,
    pub adam_selector: Option<Adam>,
    pub selected: Vec<usize>,
    /// `[step-1 epochs, step-2 epochs, total DNR iterations]`.
    pub counters: [u64; 3],
}

fn bytes_tensor(bytes: &[u8]) -> Tensor {
    Tensor::new(&[bytes.len().max(1)], if bytes.is_empty() { vec![0.0] } else { bytes.iter().map(|&b| b as f64).collect() })
        .expect("consistent dims")
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>, TrainError> {
    t.data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(TrainError::Checkpoint("byte tensor holds a non-byte value".into()))
            }
        })
        .collect()
}

fn push_store(ar: &mut TensorArchive, prefix: &str, store: &ParamStore) {
    for (_, p) in store.iter() {
        ar.push(format!("{prefix}/{}", p.name), p.value.clone());
    }
}

fn push_adam(ar: &mut TensorArchive, prefix: &str, adam: &Adam, store: &ParamStore) {
    ar.push(format!("{prefix}/step"), Tensor::scalar(adam.step_count() as f64));
    for (id, m, v) in adam.moments() {
        let p = store.get(id);
        let shape = p.value.shape();
        ar.push(format!("{prefix}/m/{}", p.name), Tensor::new(shape, m.to_vec()).expect("moment shape"));
        ar.push(format!("{prefix}/v/{}", p.name), Tensor::new(shape, v.to_vec()).expect("moment shape"));
    }
}

fn take(ar: &mut TensorArchive, name: &str) -> Result<Tensor, TrainError> {
    ar.take(name)
        .ok_or_else(|| TrainError::Checkpoint(format!("missing record {name}")))
}

fn load_store(ar: &mut TensorArchive, prefix: &str, store: &mut ParamStore) -> Result<(), TrainError> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}/{}", store.get(id).name);
        let t = take(ar, &name)?;
        if t.shape() != store.value(id).shape() {
            return Err(TrainError::Checkpoint(format!("{name}: shape {:?} differs from model", t.shape())));
        }
        *store.value_mut(id) = t;
    }
    Ok(())
}

fn load_adam(ar: &mut TensorArchive, prefix: &str, store: &ParamStore) -> Result<Option<Adam>, TrainError> {
    let Some(step) = ar.take(&format!("{prefix}/step")) else {
        return Ok(None);
    };
    let mut adam = Adam::for_store(store);
    let (mut ms, mut vs) = (Vec::new(), Vec::new());
    for &id in adam.params() {
        let name = &store.get(id).name;
        ms.push(take(ar, &format!("{prefix}/m/{name}"))?.into_data());
        vs.push(take(ar, &format!("{prefix}/v/{name}"))?.into_data());
    }
    adam.restore(step.item() as u64, ms, vs)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    Ok(Some(adam))
}

impl Checkpoint {
    pub fn to_archive(&self) -> TensorArchive {
        let mut ar = TensorArchive::new();
        let json = self.config.to_json();
        ar.push("meta/config", bytes_tensor(json.as_bytes()));
        ar.push("meta/config_hash", bytes_tensor(&self.config.hash()));
        ar.push(
            "meta/counters",
            Tensor::new(&[3], self.counters.iter().map(|&c| c as f64).collect()).expect("3 counters"),
        );
        ar.push(
            "meta/selected",
            Tensor::new(
                &[self.selected.len().max(1)],
                if self.selected.is_empty() { vec![-1.0] } else { self.selected.iter().map(|&s| s as f64).collect() },
            )
            .expect("ids"),
        );
        push_store(&mut ar, "model", &self.model.store);
        if let Some(adam) = &self.adam_model {
            push_adam(&mut ar, "adam_model", adam, &self.model.store);
        }
        if let Some(q) = &self.selector {
            push_store(&mut ar, "selector", &q.store);
            if let Some(adam) = &self.adam_selector {
                push_adam(&mut ar, "adam_selector", adam, &q.store);
            }
        }
        ar
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// SHA-256 over the serialized checkpoint.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

/// A loaded checkpoint plus whether its stored config hash disagrees with
/// its stored config or with the config the caller expected.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub hash_mismatch: bool,
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    ck.save(path)
}

pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<Loaded, TrainError> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes, expected)
}

pub fn checkpoint_from_bytes(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<Loaded, TrainError> {
    let mut ar = TensorArchive::from_bytes(bytes).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let json = String::from_utf8(tensor_bytes(&take(&mut ar, "meta/config")?)?)
        .map_err(|_| TrainError::Checkpoint("config is not UTF-8".into()))?;
    let config: TrainConfig =
        serde_json::from_str(&json).map_err(|e| TrainError::Checkpoint(format!("stored config: {e}")))?;
    let stored_hash = tensor_bytes(&take(&mut ar, "meta/config_hash")?)?;
    let mut hash_mismatch = stored_hash != config.hash();
    if let Some(exp) = expected {
        hash_mismatch |= stored_hash != exp.hash();
    }
    let counters_t = take(&mut ar, "meta/counters")?;
    let c = counters_t.data();
    if c.len() != 3 {
        return Err(TrainError::Checkpoint("counters record has wrong length".into()));
    }
    let counters = [c[0] as u64, c[1] as u64, c[2] as u64];
    let selected: Vec<usize> = take(&mut ar, "meta/selected")?
        .data()
        .iter()
        .filter(|&&v| v >= 0.0)
        .map(|&v| v as usize)
        .collect();

    // shapes come from the config; values from the archive
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = DnrModel::new(&config.model, &mut rng).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    load_store(&mut ar, "model", &mut model.store)?;
    let adam_model = load_adam(&mut ar, "adam_model", &model.store)?;
    let (selector, adam_selector) = match ar.get("selector/q.embedding").map(|t| t.shape().to_vec()) {
        Some(shape) => {
            let eyes = vec![Vec3::z(); shape[0]];
            let mut q = QFunction::new(&config.q, &eyes, config.model.channels, &mut rng)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            load_store(&mut ar, "selector", &mut q.store)?;
            let adam = load_adam(&mut ar, "adam_selector", &q.store)?;
            (Some(q), adam)
        }
        None => (None, None),
    };
    if let Some((name, _)) = ar.entries().first() {
        return Err(TrainError::Checkpoint(format!("unexpected record {name}")));
    }
    Ok(Loaded {
        checkpoint: Checkpoint {
            config,
            model,
            selector,
            adam_model,
            adam_selector,
            selected,
            counters,
        },
        hash_mismatch,
    })
}
