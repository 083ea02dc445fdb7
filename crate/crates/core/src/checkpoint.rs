//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "NDFCKPT\0"
//! offset 8   u32       format version
//! offset 12  u64       header length H in bytes
//! offset 20  H bytes   UTF-8 JSON header
//! offset 20+H          f64 values (little-endian), concatenated
//! ```
//!
//! The header records the profile, the signal-chain geometry, the model
//! configurations present, and an index of named tensors, each with its shape
//! and its offset (in values) into the data section. Names are grouped by
//! prefix: `cwae/`, `cwae_running/`, `stats/`, `mcnn/`, `pca/`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cwae::{CwaeConfig, CwaeModel, RunningStats};
use crate::diff::ParamSet;
use crate::dsp::{DspConfig, ScalingStats};
use crate::error::{NdfError, Result};
use crate::latent::{PcaBasis, Synthesizer};
use crate::mcnn::{McnnConfig, McnnModel};
use crate::profile::Profile;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NDFCKPT\0";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    profile: Profile,
    dsp: DspConfig,
    cwae: Option<CwaeConfig>,
    mcnn: Option<McnnConfig>,
    pca_meaningful: Option<usize>,
    tensors: Vec<TensorEntry>,
}

/// Everything a pipeline stage may persist. Later stages add sections.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub profile: Profile,
    pub dsp: DspConfig,
    pub cwae: Option<CwaeModel>,
    pub stats: Option<ScalingStats>,
    pub mcnn: Option<McnnModel>,
    pub pca: Option<PcaBasis>,
}

#[derive(Default)]
struct Blob {
    entries: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl Blob {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.entries.push(TensorEntry {
            name,
            shape,
            offset: self.data.len(),
        });
        self.data.extend_from_slice(values);
    }
}

struct Reader<'a> {
    entries: &'a [TensorEntry],
    data: &'a [f64],
}

impl Reader<'_> {
    fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| NdfError::Checkpoint(format!("missing tensor {name}")))?;
        let len: usize = e.shape.iter().product();
        let end = e.offset.checked_add(len).filter(|&end| end <= self.data.len());
        match end {
            Some(end) => Ok((&e.shape, &self.data[e.offset..end])),
            None => Err(NdfError::Checkpoint(format!("tensor {name} runs past the data section"))),
        }
    }

    fn vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.1.to_vec())
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.get(name)?;
        Tensor::new(shape, data.to_vec()).map_err(|e| NdfError::Checkpoint(format!("{name}: {e}")))
    }

    fn params(&self, prefix: &str, like: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, _) in like.iter() {
            out.push(name, self.tensor(&format!("{prefix}/{name}"))?);
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn new(profile: Profile) -> Self {
        Checkpoint {
            profile,
            dsp: profile.dsp(),
            cwae: None,
            stats: None,
            mcnn: None,
            pca: None,
        }
    }

    /// Builds a synthesizer; every section must be present.
    pub fn synthesizer(&self) -> Result<Synthesizer> {
        let missing = |what: &str| NdfError::Checkpoint(format!("checkpoint has no {what}"));
        Synthesizer::new(
            self.dsp,
            self.cwae.clone().ok_or_else(|| missing("CWAE"))?,
            self.mcnn.clone().ok_or_else(|| missing("MCNN"))?,
            self.stats.clone().ok_or_else(|| missing("scaling statistics"))?,
            self.pca.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Blob::default();
        if let Some(m) = &self.cwae {
            for (name, t) in m.params().iter() {
                blob.push(format!("cwae/{name}"), t.shape().to_vec(), t.data());
            }
            for (i, r) in m.running_stats().iter().enumerate() {
                blob.push(format!("cwae_running/{i}/mean"), vec![r.mean.len()], &r.mean);
                blob.push(format!("cwae_running/{i}/var"), vec![r.var.len()], &r.var);
            }
        }
        if let Some(s) = &self.stats {
            blob.push("stats/mean".into(), vec![s.mean.len()], &s.mean);
            blob.push("stats/std".into(), vec![s.std.len()], &s.std);
        }
        if let Some(m) = &self.mcnn {
            for (name, t) in m.params().iter() {
                blob.push(format!("mcnn/{name}"), t.shape().to_vec(), t.data());
            }
        }
        if let Some(p) = &self.pca {
            let flat: Vec<f64> = p.components.iter().flatten().copied().collect();
            blob.push("pca/mean".into(), vec![p.dim()], &p.mean);
            blob.push("pca/components".into(), vec![p.k(), p.dim()], &flat);
            blob.push("pca/explained_variance".into(), vec![p.k()], &p.explained_variance);
        }
        let header = Header {
            profile: self.profile,
            dsp: self.dsp,
            cwae: self.cwae.as_ref().map(|m| m.config().clone()),
            mcnn: self.mcnn.as_ref().map(|m| m.config().clone()),
            pca_meaningful: self.pca.as_ref().map(|p| p.meaningful),
            tensors: blob.entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + 8 * blob.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &blob.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| NdfError::Checkpoint(msg.to_string());
        if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(NdfError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])?;
        let raw = &bytes[data_start..];
        if raw.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of values"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let r = Reader {
            entries: &header.tensors,
            data: &data,
        };
        // Throwaway initialization; every value is overwritten below.
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let cwae = match &header.cwae {
            None => None,
            Some(cfg) => {
                let mut model = CwaeModel::new(cfg.clone(), &mut rng)?;
                let params = r.params("cwae", model.params())?;
                let running = (0..model.running_stats().len())
                    .map(|i| {
                        Ok(RunningStats {
                            mean: r.vec(&format!("cwae_running/{i}/mean"))?,
                            var: r.vec(&format!("cwae_running/{i}/var"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                model.load_state(params, running)?;
                Some(model)
            }
        };
        let stats = match r.get("stats/mean") {
            Ok(_) => Some(ScalingStats {
                mean: r.vec("stats/mean")?,
                std: r.vec("stats/std")?,
            }),
            Err(_) => None,
        };
        let mcnn = match &header.mcnn {
            None => None,
            Some(cfg) => {
                let mut model = McnnModel::new(cfg.clone(), &mut rng)?;
                let params = r.params("mcnn", model.params())?;
                model.load_params(params)?;
                Some(model)
            }
        };
        let pca = match header.pca_meaningful {
            None => None,
            Some(meaningful) => {
                let mean = r.vec("pca/mean")?;
                let (shape, flat) = r.get("pca/components")?;
                let components = flat.chunks(shape[1].max(1)).map(<[f64]>::to_vec).collect();
                Some(PcaBasis {
                    mean,
                    components,
                    explained_variance: r.vec("pca/explained_variance")?,
                    meaningful,
                })
            }
        };
        Ok(Checkpoint {
            profile: header.profile,
            dsp: header.dsp,
            cwae,
            stats,
            mcnn,
            pca,
        })
    }

    /// Writes atomically: to a sibling temporary file, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
