use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_subject, SubjectParams};
use crate::env::{GridEnvironment, GridSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Offset of the split's seed range; ranges never overlap for fewer than
    /// this many subjects per split.
    fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 100_000,
            Split::Test => 200_000,
        }
    }
}

/// Closed intervals from which subject parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRange {
    pub warp_amplitude: [f32; 2],
    pub intensity_gain: [f32; 2],
    pub speckle_strength: [f32; 2],
    /// Largest absolute layout offset, applied to both spine column and sacrum row.
    pub layout_jitter: i32,
}

impl ParamRange {
    /// The wide, noisier range used for training subjects.
    pub fn training() -> Self {
        Self {
            warp_amplitude: [2.5, 6.0],
            intensity_gain: [0.75, 1.15],
            speckle_strength: [0.35, 0.9],
            layout_jitter: 1,
        }
    }

    /// The narrower "high quality" range used for validation and test subjects.
    pub fn evaluation() -> Self {
        Self {
            warp_amplitude: [3.5, 5.0],
            intensity_gain: [0.9, 1.05],
            speckle_strength: [0.3, 0.5],
            layout_jitter: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, [lo, hi]: [f32; 2], min: f32, strict: bool| {
            let ok = lo.is_finite() && hi.is_finite() && lo <= hi && if strict { lo > min } else { lo >= min };
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("{name} range [{lo}, {hi}] is invalid")))
            }
        };
        check("warp_amplitude", self.warp_amplitude, 0.0, false)?;
        check("intensity_gain", self.intensity_gain, 0.0, true)?;
        check("speckle_strength", self.speckle_strength, 0.0, false)?;
        if !(0..=2).contains(&self.layout_jitter) {
            return Err(Error::config("layout_jitter must be in 0..=2"));
        }
        Ok(())
    }

    pub fn sample(&self, seed: u64) -> SubjectParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let draw = |rng: &mut ChaCha8Rng, [lo, hi]: [f32; 2]| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..=hi)
            }
        };
        let j = self.layout_jitter;
        SubjectParams {
            seed,
            warp_amplitude: draw(&mut rng, self.warp_amplitude),
            intensity_gain: draw(&mut rng, self.intensity_gain),
            speckle_strength: draw(&mut rng, self.speckle_strength),
            spine_col_offset: rng.gen_range(-j..=j),
            sacrum_row_offset: rng.gen_range(-j..=j),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub train_range: ParamRange,
    pub eval_range: ParamRange,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 25,
            n_val: 4,
            n_test: 5,
            seed: 0,
            train_range: ParamRange::training(),
            eval_range: ParamRange::evaluation(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n >= 100_000 {
                return Err(Error::config(format!("{name} must be below 100000")));
            }
        }
        if self.n_train == 0 {
            return Err(Error::config("at least one training subject is required"));
        }
        self.train_range.validate()?;
        self.eval_range.validate()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Every subject of the dataset in manifest order, without rendering.
    pub fn entries(&self) -> Vec<SubjectEntry> {
        let base = self.seed.wrapping_mul(1_000_000);
        let mut out = Vec::new();
        for split in Split::ALL {
            let range = if split == Split::Train {
                self.train_range
            } else {
                self.eval_range
            };
            for i in 0..self.count(split) {
                let id = format!("{}-{i:02}", split.name());
                let seed = base.wrapping_add(split.seed_offset() + i as u64);
                out.push(SubjectEntry {
                    file: format!("{id}.env"),
                    id,
                    split,
                    seed,
                    params: range.sample(seed),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    /// Container path relative to the manifest's directory.
    pub file: String,
    pub params: SubjectParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: GridSpec,
    pub subjects: Vec<SubjectEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn path_of(&self, dir: &Path, entry: &SubjectEntry) -> PathBuf {
        dir.join(&entry.file)
    }

    /// Loads every environment of a split and checks it against the manifest.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<GridEnvironment>> {
        self.split(split)
            .map(|entry| {
                let path = self.path_of(dir, entry);
                let env = GridEnvironment::load(&path)?;
                if env.spec() != &self.spec || env.subject_id() != entry.id {
                    return Err(Error::load(
                        &path,
                        format!("container does not match manifest entry {}", entry.id),
                    ));
                }
                Ok(env)
            })
            .collect()
    }
}

/// Renders a split in memory.
pub fn generate_split(
    spec: &GridSpec,
    config: &DatasetConfig,
    split: Split,
) -> Result<Vec<GridEnvironment>> {
    config
        .entries()
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| generate_subject(spec, &e.params, e.id).map(|s| s.environment))
        .collect()
}

/// Renders every subject, writes one container per subject plus the manifest.
pub fn generate_dataset(spec: &GridSpec, config: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let manifest = DatasetManifest {
        spec: *spec,
        subjects: config.entries(),
    };
    for entry in &manifest.subjects {
        let subject = generate_subject(spec, &entry.params, entry.id.clone())?;
        subject.environment.save(&manifest.path_of(dir, entry))?;
    }
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_sizes_and_disjoint_seeds() {
        let cfg = DatasetConfig::default();
        let entries = cfg.entries();
        assert_eq!(entries.len(), 34);
        let count = |s| entries.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (25, 4, 5));
        let mut seeds: Vec<u64> = entries.iter().map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 34);
        let max_train = entries.iter().filter(|e| e.split == Split::Train).map(|e| e.seed).max().unwrap();
        let min_val = entries.iter().filter(|e| e.split == Split::Val).map(|e| e.seed).min().unwrap();
        assert!(max_train < min_val);
    }

    #[test]
    fn sampled_params_respect_ranges() {
        let range = ParamRange::training();
        for seed in 0..200 {
            let p = range.sample(seed);
            assert!((2.5..=6.0).contains(&p.warp_amplitude));
            assert!((0.75..=1.15).contains(&p.intensity_gain));
            assert!(p.spine_col_offset.abs() <= 1 && p.sacrum_row_offset.abs() <= 1);
            p.validate().unwrap();
        }
    }
}
