//! Named parameter storage, the adaptive-moment optimizer, and the text
//! checkpoint format.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::DiffArray;
use crate::error::Error;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Entry {
    array: DiffArray,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Ordered map from parameter path (e.g. `agent0/temporal/in_proj/w`) to
/// leaf array, with per-parameter first/second moment buffers. Iteration
/// order is lexicographic, so updates and checkpoints are deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable parameter; names must be unique.
    pub fn register(&mut self, name: &str, values: Vec<f64>, shape: Vec<usize>) -> DiffArray {
        assert!(
            !self.entries.contains_key(name),
            "parameter {name:?} registered twice"
        );
        let n = values.len();
        let array = DiffArray::leaf(values, shape);
        self.entries.insert(
            name.to_string(),
            Entry {
                array: array.clone(),
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        array
    }

    pub fn get(&self, name: &str) -> Option<DiffArray> {
        self.entries.get(name).map(|e| e.array.clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.array.numel()).sum()
    }

    /// Number of optimizer steps taken; doubles as the parameter version
    /// used to detect stale policy snapshots.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&self) {
        for e in self.entries.values() {
            e.array.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.array.inner.borrow().values.iter().all(|v| v.is_finite()))
    }

    /// Global gradient 2-norm over all parameters (missing grads count as
    /// zero), summed in lexicographic parameter order.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for e in self.entries.values() {
            if let Some(g) = &e.array.inner.borrow().grad {
                for &v in g {
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }

    /// Scales gradients so the global 2-norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grad_norm(&self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for e in self.entries.values() {
                if let Some(g) = &mut e.array.inner.borrow_mut().grad {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        norm
    }

    /// One adaptive-moment update: clip the global gradient norm to
    /// `clip_norm`, apply the bias-corrected update, zero all grads.
    /// Returns the pre-clip gradient norm.
    pub fn adam_step(&mut self, lr: f64, clip_norm: f64) -> f64 {
        let pre_norm = self.clip_grad_norm(clip_norm);
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for e in self.entries.values_mut() {
            let mut inner = e.array.inner.borrow_mut();
            let grad = inner.grad.take();
            let zeros;
            let g: &[f64] = match &grad {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; inner.values.len()];
                    &zeros
                }
            };
            for i in 0..inner.values.len() {
                e.m[i] = BETA1 * e.m[i] + (1.0 - BETA1) * g[i];
                e.v[i] = BETA2 * e.v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                inner.values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        pre_norm
    }
}

/// Metadata carried by every checkpoint so any artifact can be traced
/// back to the run that produced it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub episode: u64,
}

/// One named tensor in a checkpoint.
#[derive(Clone, Debug)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Writes a self-describing JSON checkpoint. Floats are emitted with 18
/// significant digits, which round-trips every finite f64 bit-exactly.
pub fn save_checkpoint(path: &Path, stores: &[&ParamStore], meta: &CheckpointMeta) -> Result<(), Error> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{{")?;
    writeln!(w, "  \"format\": \"pursuit-checkpoint-v1\",")?;
    writeln!(
        w,
        "  \"config_hash\": {},",
        serde_json::to_string(&meta.config_hash)?
    )?;
    writeln!(w, "  \"seed\": {},", meta.seed)?;
    writeln!(w, "  \"episode\": {},", meta.episode)?;
    writeln!(w, "  \"params\": [")?;
    let total: usize = stores.iter().map(|s| s.len()).sum();
    let mut written = 0usize;
    for store in stores {
        for (name, entry) in &store.entries {
            let inner = entry.array.inner.borrow();
            assert!(
                inner.values.iter().all(|v| v.is_finite()),
                "checkpoint: non-finite value in {name:?}"
            );
            write!(w, "    {{\"name\": {}, \"shape\": [", serde_json::to_string(name)?)?;
            for (i, s) in inner.shape.iter().enumerate() {
                if i > 0 {
                    write!(w, ", ")?;
                }
                write!(w, "{s}")?;
            }
            write!(w, "], \"values\": [")?;
            for (i, v) in inner.values.iter().enumerate() {
                if i > 0 {
                    write!(w, ", ")?;
                }
                write!(w, "{v:.17e}")?;
            }
            written += 1;
            writeln!(w, "]}}{}", if written < total { "," } else { "" })?;
        }
    }
    writeln!(w, "  ]")?;
    writeln!(w, "}}")?;
    Ok(())
}

/// Parses a checkpoint file back into entries plus metadata.
pub fn load_checkpoint(path: &Path) -> Result<(Vec<CheckpointEntry>, CheckpointMeta), Error> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let format = value["format"].as_str().unwrap_or("");
    if format != "pursuit-checkpoint-v1" {
        return Err(Error::Checkpoint(format!(
            "{}: unknown checkpoint format {format:?}",
            path.display()
        )));
    }
    let meta = CheckpointMeta {
        config_hash: value["config_hash"].as_str().unwrap_or("").to_string(),
        seed: value["seed"].as_u64().unwrap_or(0),
        episode: value["episode"].as_u64().unwrap_or(0),
    };
    let params = value["params"]
        .as_array()
        .ok_or_else(|| Error::Checkpoint("missing params array".into()))?;
    let mut entries = Vec::with_capacity(params.len());
    for p in params {
        let name = p["name"]
            .as_str()
            .ok_or_else(|| Error::Checkpoint("param entry without name".into()))?
            .to_string();
        let shape: Vec<usize> = p["shape"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint(format!("{name}: missing shape")))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        let values: Vec<f64> = p["values"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint(format!("{name}: missing values")))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect();
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "{name}: {} values do not fill shape {shape:?}",
                values.len()
            )));
        }
        entries.push(CheckpointEntry { name, shape, values });
    }
    Ok((entries, meta))
}

impl ParamStore {
    /// Overwrites parameter values from checkpoint entries. Every
    /// parameter in the store must be covered with a matching shape;
    /// entries outside `prefix` are ignored, unknown prefixed entries are
    /// an error.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry], prefix: &str) -> Result<(), Error> {
        let mut covered = 0usize;
        for e in entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            let entry = self.entries.get(&e.name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint entry {:?} has no matching parameter", e.name))
            })?;
            let mut inner = entry.array.inner.borrow_mut();
            if inner.shape != e.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {:?}: checkpoint {:?} vs parameter {:?}",
                    e.name, e.shape, inner.shape
                )));
            }
            inner.values.copy_from_slice(&e.values);
            covered += 1;
        }
        if covered != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {covered} of {} parameters under prefix {prefix:?}",
                self.entries.len()
            )));
        }
        Ok(())
    }
}
