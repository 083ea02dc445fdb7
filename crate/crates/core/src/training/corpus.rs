//! Procedural drum corpus and its on-disk form (WAV files plus a CSV manifest).

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{load_wav, preprocess, save_wav, AudioClip, SupportMask, SAMPLE_RATE};
use crate::error::{NdfError, Result};

/// Fraction of every class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrumClass {
    Kick,
    Snare,
    Hat,
}

impl DrumClass {
    pub const ALL: [DrumClass; 3] = [DrumClass::Kick, DrumClass::Snare, DrumClass::Hat];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DrumClass::Kick => "kick",
            DrumClass::Snare => "snare",
            DrumClass::Hat => "hat",
        }
    }

    /// Renders one raw (unnormalized, unpadded) hit of `len` samples.
    fn render(self, len: usize, rng: &mut impl Rng) -> Vec<f64> {
        let sr = SAMPLE_RATE as f64;
        // The decay constant scales with the clip so the cut at `len` stays
        // audible: the envelope ends between e^-1.5 and e^-3.
        let tau = len as f64 / rng.random_range(1.5..3.0);
        let env = |n: usize| (-(n as f64) / tau).exp();
        match self {
            DrumClass::Kick => {
                let f_hi = rng.random_range(150.0..250.0);
                let f_lo = rng.random_range(40.0..60.0);
                let drop = tau * rng.random_range(0.2..0.5);
                let mut phase = rng.random_range(0.0..0.5);
                (0..len)
                    .map(|n| {
                        let f = f_lo + (f_hi - f_lo) * (-(n as f64) / drop).exp();
                        phase += f / sr;
                        env(n) * (2.0 * PI * phase).sin()
                    })
                    .collect()
            }
            DrumClass::Snare => {
                let f = rng.random_range(180.0..260.0);
                let tone = rng.random_range(0.3..0.6);
                let cutoff = rng.random_range(0.3..0.6);
                let mut lp = 0.0;
                (0..len)
                    .map(|n| {
                        let white: f64 = rng.random_range(-1.0..1.0);
                        lp += cutoff * (white - lp);
                        let body = (2.0 * PI * f * n as f64 / sr).sin();
                        env(n) * (tone * body + (1.0 - tone) * lp)
                    })
                    .collect()
            }
            DrumClass::Hat => {
                let a = rng.random_range(0.85..0.95);
                let (mut prev_x, mut prev_y) = (0.0, 0.0);
                (0..len)
                    .map(|n| {
                        let x: f64 = rng.random_range(-1.0..1.0);
                        let y = a * (prev_y + x - prev_x);
                        prev_x = x;
                        prev_y = y;
                        env(n) * y
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for DrumClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DrumClass {
    type Err = NdfError;

    fn from_str(s: &str) -> Result<Self> {
        DrumClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| NdfError::Corpus(format!("unknown class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    /// Preprocessed: peak-normalized and padded to the canonical length.
    pub clip: AudioClip,
    pub class: DrumClass,
    pub split: Split,
}

impl CorpusItem {
    pub fn label(&self) -> usize {
        self.class.label()
    }

    pub fn mask(&self) -> SupportMask {
        SupportMask::new(self.clip.len(), self.clip.original_len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    file: String,
    class: DrumClass,
    split: Split,
    original_len: usize,
}

/// Deterministic synthetic corpus: `n_per_class` hits of each class with
/// lengths in `[0.1, 1] · canonical_len`, the first 80 % of every class in the
/// training split.
pub fn gen_synthetic_corpus(n_per_class: usize, canonical_len: usize, seed: u64) -> Result<Corpus> {
    if n_per_class < 2 {
        return Err(NdfError::Corpus("need at least 2 items per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = ((n_per_class as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n_per_class - 1);
    let min_len = ((canonical_len as f64 * 0.1).ceil() as usize).max(2);
    let mut items = Vec::with_capacity(n_per_class * DrumClass::ALL.len());
    for class in DrumClass::ALL {
        for i in 0..n_per_class {
            let len = rng.random_range(min_len..=canonical_len);
            let raw = class.render(len, &mut rng);
            let (clip, _) = preprocess(&AudioClip::new(raw), canonical_len)?;
            items.push(CorpusItem {
                clip,
                class,
                split: if i < n_train { Split::Train } else { Split::Val },
            });
        }
    }
    Ok(Corpus { items })
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &CorpusItem)> {
        self.items.iter().enumerate().filter(move |(_, it)| it.split == split)
    }

    pub fn n_classes(&self) -> usize {
        DrumClass::ALL.len()
    }

    /// Writes one WAV per item plus `manifest.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(MANIFEST)).map_err(csv_err)?;
        for (i, item) in self.items.iter().enumerate() {
            let file = format!("{}_{i:05}.wav", item.class);
            save_wav(dir.join(&file), item.clip.samples())?;
            w.serialize(ManifestRow {
                file,
                class: item.class,
                split: item.split,
                original_len: item.clip.original_len(),
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a corpus written by [`save`](Self::save); every clip must already
    /// have `canonical_len` samples.
    pub fn load(dir: &Path, canonical_len: usize) -> Result<Corpus> {
        let manifest = dir.join(MANIFEST);
        if !manifest.is_file() {
            return Err(NdfError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no manifest at {}", manifest.display()),
            )));
        }
        let mut r = csv::Reader::from_path(&manifest).map_err(csv_err)?;
        let mut items = Vec::new();
        for row in r.deserialize() {
            let row: ManifestRow = row.map_err(csv_err)?;
            let clip = load_wav(dir.join(&row.file))?;
            if clip.len() != canonical_len {
                return Err(NdfError::Corpus(format!(
                    "{}: {} samples, expected {canonical_len}",
                    row.file,
                    clip.len()
                )));
            }
            let clip = AudioClip::with_support(clip.into_samples(), row.original_len)?;
            items.push(CorpusItem {
                clip,
                class: row.class,
                split: row.split,
            });
        }
        if items.is_empty() {
            return Err(NdfError::Corpus(format!("{} lists no items", manifest.display())));
        }
        Ok(Corpus { items })
    }
}

fn csv_err(e: csv::Error) -> NdfError {
    NdfError::Corpus(e.to_string())
}
