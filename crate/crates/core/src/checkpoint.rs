//! Versioned binary container for trained parameters.
//!
//! Layout: magic, format version (u32 LE), manifest length (u64 LE), JSON
//! manifest, payload length (u64 LE), payload of little-endian f64 values,
//! then a SHA-256 digest of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminator::{DiscriminatorConfig, DiscriminatorParams};
use crate::env::PlantSpec;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorParams};
use crate::memory::{LifelongConfig, SharedBasis, SharedMemory, TaskCode, TaskStats};
use crate::params::ParamSet;
use crate::tensor::Matrix;
use crate::trainer::TrainerConfig;

pub const MAGIC: &[u8; 8] = b"MTGANCK\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainerConfig,
    pub specs: Vec<PlantSpec>,
    /// Per task; `None` where the task was aborted.
    pub generators: Vec<Option<GeneratorParams>>,
    pub discriminators: Vec<Option<DiscriminatorParams>>,
    pub memory: Option<SharedMemory>,
    /// Metrics CSV of the run that produced the checkpoint.
    pub metrics_csv: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TaskEntry {
    generator: Option<GeneratorConfig>,
    discriminator: Option<DiscriminatorConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MemoryEntry {
    config: LifelongConfig,
    tasks_seen: usize,
    d_core: usize,
    k_latent: usize,
    /// `(task id, sample count, degenerate flag)` per absorbed task.
    tasks: Vec<(usize, usize, bool)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config: TrainerConfig,
    specs: Vec<PlantSpec>,
    tasks: Vec<TaskEntry>,
    memory: Option<MemoryEntry>,
    metrics_csv: String,
    arrays: Vec<ArrayEntry>,
}

struct Payload {
    data: Vec<f64>,
    arrays: Vec<ArrayEntry>,
}

impl Payload {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.arrays.push(ArrayEntry {
            name,
            shape,
            offset: self.data.len(),
        });
        self.data.extend_from_slice(values);
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Payload {
            data: Vec::new(),
            arrays: Vec::new(),
        };
        let mut tasks = Vec::with_capacity(self.generators.len());
        for (t, (g, d)) in self.generators.iter().zip(&self.discriminators).enumerate() {
            if let Some(g) = g {
                payload.push(format!("generator/{t}"), vec![g.num_params()], &g.flatten());
            }
            if let Some(d) = d {
                payload.push(format!("discriminator/{t}"), vec![d.num_params()], &d.flatten());
            }
            tasks.push(TaskEntry {
                generator: g.as_ref().map(|g| g.config()),
                discriminator: d.as_ref().map(disc_config),
            });
        }
        let memory = self.memory.as_ref().map(|m| {
            let (d, k) = m.basis.l.shape();
            payload.push("basis/L".into(), vec![d, k], m.basis.l.data());
            for (stats, code) in &m.tasks {
                let t = stats.task_id;
                payload.push(format!("code/{t}"), vec![k], &code.s);
                payload.push(format!("stats/{t}/theta"), vec![d], &stats.theta);
                payload.push(format!("stats/{t}/z"), vec![d], &stats.z);
            }
            MemoryEntry {
                config: m.config.clone(),
                tasks_seen: m.basis.tasks_seen,
                d_core: d,
                k_latent: k,
                tasks: m
                    .tasks
                    .iter()
                    .map(|(s, c)| (s.task_id, s.samples, c.degenerate))
                    .collect(),
            }
        });
        let manifest = Manifest {
            config: self.config.clone(),
            specs: self.specs.clone(),
            tasks,
            memory,
            metrics_csv: self.metrics_csv.clone(),
            arrays: payload.arrays,
        };
        let manifest = serde_json::to_vec(&manifest)
            .map_err(|e| corrupt(format!("manifest serialization failed: {e}")))?;
        let mut out = Vec::with_capacity(manifest.len() + 8 * payload.data.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(payload.data.len() as u64).to_le_bytes());
        for v in &payload.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 + DIGEST_LEN {
            return Err(corrupt("file too short to be a checkpoint"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic bytes; not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("integrity check failed: digest mismatch"));
        }
        let mut cur = Cursor {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mlen = cur.read_u64()? as usize;
        let manifest: Manifest = serde_json::from_slice(cur.take(mlen)?)
            .map_err(|e| corrupt(format!("manifest is not valid: {e}")))?;
        let n = cur.read_u64()? as usize;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| corrupt("payload length overflow"))?)?;
        if cur.pos != body.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let lookup = |name: &str| -> Result<(&[usize], &[f64])> {
            let e = manifest
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| corrupt(format!("array `{name}` missing from manifest")))?;
            let len: usize = e.shape.iter().product();
            let end = e.offset.checked_add(len).filter(|&end| end <= data.len());
            let end = end.ok_or_else(|| corrupt(format!("array `{name}` exceeds the payload")))?;
            Ok((&e.shape, &data[e.offset..end]))
        };

        let mut generators = Vec::with_capacity(manifest.tasks.len());
        let mut discriminators = Vec::with_capacity(manifest.tasks.len());
        for (t, entry) in manifest.tasks.iter().enumerate() {
            generators.push(match &entry.generator {
                Some(cfg) => {
                    let mut g = GeneratorParams::zeros(cfg)?;
                    let (_, v) = lookup(&format!("generator/{t}"))?;
                    if v.len() != g.num_params() {
                        return Err(corrupt(format!("generator/{t} has the wrong length")));
                    }
                    g.assign_flat(v);
                    Some(g)
                }
                None => None,
            });
            discriminators.push(match &entry.discriminator {
                Some(cfg) => {
                    let mut d = DiscriminatorParams::zeros(cfg)?;
                    let (_, v) = lookup(&format!("discriminator/{t}"))?;
                    if v.len() != d.num_params() {
                        return Err(corrupt(format!("discriminator/{t} has the wrong length")));
                    }
                    d.assign_flat(v);
                    Some(d)
                }
                None => None,
            });
        }
        let memory = match &manifest.memory {
            Some(m) => {
                let (shape, v) = lookup("basis/L")?;
                if shape != [m.d_core, m.k_latent] {
                    return Err(corrupt("basis shape disagrees with the manifest"));
                }
                let l = Matrix::from_vec(m.d_core, m.k_latent, v.to_vec())?;
                let mut tasks = Vec::with_capacity(m.tasks.len());
                for &(t, samples, degenerate) in &m.tasks {
                    let (_, s) = lookup(&format!("code/{t}"))?;
                    let (_, theta) = lookup(&format!("stats/{t}/theta"))?;
                    let (_, z) = lookup(&format!("stats/{t}/z"))?;
                    tasks.push((
                        TaskStats::new(t, theta.to_vec(), z.to_vec(), samples)?,
                        TaskCode {
                            task_id: t,
                            s: s.to_vec(),
                            degenerate,
                        },
                    ));
                }
                Some(SharedMemory {
                    config: m.config.clone(),
                    basis: SharedBasis {
                        l,
                        tasks_seen: m.tasks_seen,
                    },
                    tasks,
                })
            }
            None => None,
        };
        Ok(Self {
            config: manifest.config,
            specs: manifest.specs,
            generators,
            discriminators,
            memory,
            metrics_csv: manifest.metrics_csv,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn disc_config(d: &DiscriminatorParams) -> DiscriminatorConfig {
    DiscriminatorConfig {
        vocab: d.vocab(),
        embed_dim: d.embed_dim(),
        windows: d.banks.iter().map(|b| b.width).collect(),
        kernels_per_window: d.banks.first().map_or(0, |b| b.kernels.len()),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("unexpected end of checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
