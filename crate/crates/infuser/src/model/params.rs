//! Parameter storage: named tensors with frozen flags, deterministic
//! initialization, SHA-256 checksums and a checkpoint format of one JSON
//! header followed by little-endian float32 arrays in manifest order.

use super::{AdapterConfig, TransformerConfig, INFUSER_HIDDEN, RC_DIM};
use crate::tensor::Mat;
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub mat: Mat,
    pub frozen: bool,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.mat.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mat.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.mat.rows
    }

    pub fn cols(&self) -> usize {
        self.mat.cols
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>, frozen: bool) {
        assert_eq!(data.len(), rows * cols, "{name}: bad shape");
        assert!(
            !self.index.contains_key(name),
            "duplicate tensor name {name}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            mat: Mat::from_vec(rows, cols, data),
            frozen,
        });
    }

    /// The weight matrix for `name`.
    pub fn mat(&self, name: &str) -> &Mat {
        &self.get(name).mat
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no tensor named {name}"));
        &mut self.tensors[i]
    }

    pub fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn by_idx(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|t| !t.frozen)
            .map(|t| t.name.clone())
            .collect()
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for t in &mut self.tensors {
            if t.name.starts_with(prefix) {
                t.frozen = frozen;
            }
        }
    }

    /// SHA-256 over the f64 bytes of every tensor whose name matches `prefix`,
    /// in store order.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            if t.name.starts_with(prefix) {
                h.update(t.name.as_bytes());
                for v in &t.mat.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        crate::kg::dataset::to_hex(&h.finalize())
    }
}

/// Box-Muller gaussian; good enough for weight init and fully determined by
/// the seeded stream.
pub fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| gauss(rng, std)).collect()
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: TransformerConfig,
    pub adapter: AdapterConfig,
    pub n_relations: usize,
    pub store: ParamStore,
}

impl ModelParams {
    /// Deterministic initialization. Base weights start trainable (they are
    /// frozen after pre-training); adapter up-projections start at zero so a
    /// fresh model computes exactly the base function.
    pub fn init(
        config: TransformerConfig,
        adapter: AdapterConfig,
        n_relations: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        adapter.validate(config.layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut store = ParamStore::default();
        let std = 0.02;

        store.add(
            "base.wte",
            config.vocab,
            d,
            normal_vec(&mut rng, config.vocab * d, std),
            false,
        );
        store.add(
            "base.wpe",
            config.max_seq,
            d,
            normal_vec(&mut rng, config.max_seq * d, std),
            false,
        );
        for l in 0..config.layers {
            let p = format!("base.l{l}");
            store.add(&format!("{p}.ln1.g"), 1, d, vec![1.0; d], false);
            store.add(&format!("{p}.ln1.b"), 1, d, vec![0.0; d], false);
            for w in ["wq", "wk", "wv"] {
                store.add(
                    &format!("{p}.{w}"),
                    d,
                    d,
                    normal_vec(&mut rng, d * d, std),
                    false,
                );
            }
            // zero-init residual projections: each block fades in, which
            // keeps constant-lr AdamW stable from step one
            store.add(&format!("{p}.wo"), d, d, vec![0.0; d * d], false);
            store.add(&format!("{p}.ln2.g"), 1, d, vec![1.0; d], false);
            store.add(&format!("{p}.ln2.b"), 1, d, vec![0.0; d], false);
            store.add(
                &format!("{p}.fc1"),
                d,
                4 * d,
                normal_vec(&mut rng, d * 4 * d, std),
                false,
            );
            store.add(&format!("{p}.fc2"), 4 * d, d, vec![0.0; 4 * d * d], false);
        }
        store.add("base.lnf.g", 1, d, vec![1.0; d], false);
        store.add("base.lnf.b", 1, d, vec![0.0; d], false);
        // output head is tied to base.wte

        let dp = adapter.bottleneck;
        for l in adapter.layers() {
            store.add(
                &format!("adapter.l{l}.down"),
                d,
                dp,
                normal_vec(&mut rng, d * dp, std),
                false,
            );
            // zero so the adapter contributes nothing until trained
            store.add(&format!("adapter.l{l}.up"), dp, d, vec![0.0; dp * d], false);
        }
        for l in adapter.layers() {
            store.add(
                &format!("infuser.l{l}.w1"),
                d,
                INFUSER_HIDDEN,
                normal_vec(&mut rng, d * INFUSER_HIDDEN, 0.05),
                false,
            );
            store.add(
                &format!("infuser.l{l}.b1"),
                1,
                INFUSER_HIDDEN,
                vec![0.0; INFUSER_HIDDEN],
                false,
            );
            store.add(
                &format!("infuser.l{l}.w2"),
                INFUSER_HIDDEN,
                1,
                normal_vec(&mut rng, INFUSER_HIDDEN, 0.05),
                false,
            );
            store.add(&format!("infuser.l{l}.b2"), 1, 1, vec![0.0], false);
        }
        store.add(
            "rc.f1",
            2 * d,
            RC_DIM,
            normal_vec(&mut rng, 2 * d * RC_DIM, std),
            false,
        );
        store.add(
            "rc.rel_emb",
            n_relations,
            RC_DIM,
            normal_vec(&mut rng, n_relations * RC_DIM, std),
            false,
        );

        Ok(ModelParams {
            config,
            adapter,
            n_relations,
            store,
        })
    }

    pub fn freeze_base(&mut self) {
        self.store.set_frozen("base.", true);
    }

    pub fn base_checksum(&self) -> String {
        self.store.checksum("base.")
    }

    /// Adapter parameter count: count * 2 * d * d' (down + up projections).
    pub fn adapter_param_count(&self) -> usize {
        self.adapter.count * 2 * self.config.dim * self.adapter.bottleneck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest: Vec<TensorMeta> = self
            .store
            .tensors()
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                frozen: t.frozen,
            })
            .collect();
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config,
            adapter: self.adapter,
            n_relations: self.n_relations,
            manifest,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())
            .and_then(|_| f.write_all(&header_json))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf: Vec<u8> = Vec::new();
        for t in self.store.tensors() {
            for v in &t.mat.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_buf = vec![0u8; header_len];
        f.read_exact(&mut header_buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let header: CheckpointHeader = serde_json::from_slice(&header_buf)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut store = ParamStore::default();
        for meta in &header.manifest {
            let n = meta.rows * meta.cols;
            let mut bytes = vec![0u8; n * 4];
            f.read_exact(&mut bytes)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let data: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store.add(&meta.name, meta.rows, meta.cols, data, meta.frozen);
        }
        Ok(ModelParams {
            config: header.config,
            adapter: header.adapter,
            n_relations: header.n_relations,
            store,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: TransformerConfig,
    adapter: AdapterConfig,
    n_relations: usize,
    manifest: Vec<TensorMeta>,
}
