//! Procedural stand-in for recorded lower-back sweeps.
//!
//! A subject is a grid of anatomy classes (a vertebral column near the
//! centre, a sacrum region at its caudal end, pelvis at the caudal lateral
//! corners, muscle and soft tissue elsewhere). Every bin's frames are renders
//! of its class template through a displacement field made of
//!
//! * a probe-placement term: tissue layers tilt and slide with the bin's
//!   lateral offset from the spine and shift in depth with its distance from
//!   the sacrum rows,
//! * a smooth subject-specific warp,
//! * per-frame translation jitter,
//!
//! all proportional to `warp_amplitude`, followed by the subject gain, a small
//! per-frame gain jitter and blurred multiplicative speckle scaled by
//! `speckle_strength`.

mod dataset;
mod templates;

use std::f32::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, GridEnvironment, GridSpec};
use crate::error::{Error, Result};

pub use dataset::{
    generate_dataset, generate_split, DatasetConfig, DatasetManifest, ParamRange, Split,
    SubjectEntry, MANIFEST_FILE,
};
pub use templates::{class_template, nearest_template, MIN_TEMPLATE_SEPARATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnatomyClass {
    SoftTissue,
    Paraspinal,
    Vertebra,
    Sacrum,
    Pelvis,
}

impl AnatomyClass {
    pub const ALL: [AnatomyClass; 5] = [
        AnatomyClass::SoftTissue,
        AnatomyClass::Paraspinal,
        AnatomyClass::Vertebra,
        AnatomyClass::Sacrum,
        AnatomyClass::Pelvis,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AnatomyClass::SoftTissue => "soft_tissue",
            AnatomyClass::Paraspinal => "paraspinal",
            AnatomyClass::Vertebra => "vertebra",
            AnatomyClass::Sacrum => "sacrum",
            AnatomyClass::Pelvis => "pelvis",
        }
    }
}

impl std::str::FromStr for AnatomyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnatomyClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::input(format!("unknown anatomy class {s:?}")))
    }
}

/// Per-bin anatomy labels, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnatomyClassMap {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<AnatomyClass>,
}

impl AnatomyClassMap {
    pub fn get(&self, state: EnvState) -> AnatomyClass {
        self.labels[state.row * self.cols + state.col]
    }

    pub fn goal_mask(&self) -> Vec<bool> {
        self.labels
            .iter()
            .map(|&c| c == AnatomyClass::Sacrum)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectParams {
    pub seed: u64,
    /// Peak displacement of the warp field, in pixels.
    pub warp_amplitude: f32,
    pub intensity_gain: f32,
    pub speckle_strength: f32,
    /// Offset of the spine column from the grid's centre column.
    pub spine_col_offset: i32,
    /// Offset of the sacrum's top row from its nominal position.
    pub sacrum_row_offset: i32,
}

impl SubjectParams {
    pub fn validate(&self) -> Result<()> {
        if !self.warp_amplitude.is_finite() || self.warp_amplitude < 0.0 {
            return Err(Error::input("warp_amplitude must be finite and >= 0"));
        }
        if !self.intensity_gain.is_finite() || self.intensity_gain <= 0.0 {
            return Err(Error::input("intensity_gain must be finite and > 0"));
        }
        if !self.speckle_strength.is_finite() || self.speckle_strength < 0.0 {
            return Err(Error::input("speckle_strength must be finite and >= 0"));
        }
        Ok(())
    }

    /// Noise-free, unwarped subject with the nominal layout.
    pub fn clean(seed: u64) -> Self {
        Self {
            seed,
            warp_amplitude: 0.0,
            intensity_gain: 1.0,
            speckle_strength: 0.0,
            spine_col_offset: 0,
            sacrum_row_offset: 0,
        }
    }
}

/// Where the anatomy sits on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub spine_col: usize,
    /// Top row of the two-row sacrum region.
    pub sacrum_row: usize,
}

pub const MIN_ROWS: usize = 4;
pub const MIN_COLS: usize = 5;

impl Layout {
    pub fn new(spec: &GridSpec, params: &SubjectParams) -> Result<Self> {
        if spec.rows < MIN_ROWS || spec.cols < MIN_COLS {
            return Err(Error::input(format!(
                "a {}x{} grid cannot hold the anatomy layout (needs at least {MIN_ROWS}x{MIN_COLS})",
                spec.rows, spec.cols
            )));
        }
        let spine_col = spec.cols as i64 / 2 + params.spine_col_offset as i64;
        let sacrum_row = spec.rows as i64 - 4 + params.sacrum_row_offset as i64;
        let sacrum_row = if spec.rows == MIN_ROWS {
            sacrum_row.max(1)
        } else {
            sacrum_row
        };
        if spine_col < 1 || spine_col > spec.cols as i64 - 2 {
            return Err(Error::input(format!(
                "spine column {spine_col} leaves no room for the sacrum on a {}-column grid",
                spec.cols
            )));
        }
        if sacrum_row < 1 || sacrum_row > spec.rows as i64 - 3 {
            return Err(Error::input(format!(
                "sacrum row {sacrum_row} does not fit a {}-row grid",
                spec.rows
            )));
        }
        Ok(Self {
            spine_col: spine_col as usize,
            sacrum_row: sacrum_row as usize,
        })
    }

    pub fn class_at(&self, state: EnvState) -> AnatomyClass {
        let dc = state.col.abs_diff(self.spine_col);
        let r = state.row;
        let s = self.sacrum_row;
        if (r == s || r == s + 1) && dc <= 1 {
            AnatomyClass::Sacrum
        } else if dc == 0 && r < s {
            AnatomyClass::Vertebra
        } else if dc >= 3 && r + 1 >= s {
            AnatomyClass::Pelvis
        } else if dc <= 2 && r <= s + 1 {
            AnatomyClass::Paraspinal
        } else {
            AnatomyClass::SoftTissue
        }
    }

    pub fn class_map(&self, spec: &GridSpec) -> AnatomyClassMap {
        AnatomyClassMap {
            rows: spec.rows,
            cols: spec.cols,
            labels: spec.states().map(|s| self.class_at(s)).collect(),
        }
    }
}

/// A generated subject: the environment plus its ground-truth anatomy.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub environment: GridEnvironment,
    pub class_map: AnatomyClassMap,
    pub layout: Layout,
}

/// Smooth per-subject displacement: two plane waves per axis.
struct SubjectWarp {
    freq: [[f32; 2]; 4],
    phase: [f32; 4],
}

impl SubjectWarp {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut freq = [[0.0; 2]; 4];
        let mut phase = [0.0; 4];
        for i in 0..4 {
            freq[i] = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
            phase[i] = rng.gen_range(0.0..TAU);
        }
        Self { freq, phase }
    }

    /// Displacement in units of the warp amplitude, in [-0.5, 0.5] per axis.
    /// `gu`, `gv` locate the bin on the grid so the field also drifts slowly
    /// across the subject.
    fn at(&self, u: f32, v: f32, gu: f32, gv: f32) -> (f32, f32) {
        let wave = |i: usize| {
            (TAU * (self.freq[i][0] * u + self.freq[i][1] * v) + self.phase[i] + 1.3 * gu + 0.9 * gv)
                .sin()
        };
        (0.25 * (wave(0) + wave(1)), 0.25 * (wave(2) + wave(3)))
    }
}

fn signed_sqrt(x: f32) -> f32 {
    x.signum() * x.abs().sqrt()
}

/// Separable 5-tap Gaussian blur (sigma = 1 px) with clamped borders.
fn blur(field: &[f32], h: usize, w: usize) -> Vec<f32> {
    const K: [f32; 5] = [0.054_488_685, 0.244_201_34, 0.402_619_95, 0.244_201_34, 0.054_488_685];
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wgt) in K.iter().enumerate() {
                let xx = (x as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += wgt * field[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wgt) in K.iter().enumerate() {
                let yy = (y as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += wgt * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Multiplier applied to the blurred uniform speckle field; the blur shrinks
/// the field's spread, so this restores a per-pixel std of roughly half the
/// speckle strength.
const SPECKLE_GAIN: f32 = 3.0;
const FRAME_GAIN_JITTER: f32 = 0.1;
const FRAME_SHIFT_JITTER: f32 = 0.35;
const DEPTH_SHIFT: f32 = 0.5;

pub fn generate_subject(
    spec: &GridSpec,
    params: &SubjectParams,
    subject_id: impl Into<String>,
) -> Result<Subject> {
    spec.validate()?;
    params.validate()?;
    let layout = Layout::new(spec, params)?;
    let class_map = layout.class_map(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let warp = SubjectWarp::sample(&mut rng);

    let (h, w) = (spec.obs_height, spec.obs_width);
    let amp = params.warp_amplitude;
    let half_width = layout.spine_col.max(spec.cols - 1 - layout.spine_col).max(1) as f32;
    let goal_mid = layout.sacrum_row as f32 + 0.5;
    let mut frames = Vec::with_capacity(spec.num_bins() * spec.frames_per_bin * spec.frame_len());
    let mut pixel_buf = vec![0.0f32; h * w];

    for state in spec.states() {
        let class = layout.class_at(state);
        let lateral = signed_sqrt((state.col as f32 - layout.spine_col as f32) / half_width);
        let depth = ((state.row as f32 - goal_mid) / spec.rows as f32 * 2.0).clamp(-1.0, 1.0);
        let gu = state.col as f32 / spec.cols as f32;
        let gv = state.row as f32 / spec.rows as f32;

        for _ in 0..spec.frames_per_bin {
            let jitter_x = rng.gen_range(-1.0f32..=1.0) * FRAME_SHIFT_JITTER * amp;
            let jitter_y = rng.gen_range(-1.0f32..=1.0) * FRAME_SHIFT_JITTER * amp;
            let frame_gain = params.intensity_gain
                * (1.0 + FRAME_GAIN_JITTER * params.speckle_strength * rng.gen_range(-1.0f32..=1.0));

            for y in 0..h {
                let v = (y as f32 + 0.5) / h as f32;
                for x in 0..w {
                    let u = (x as f32 + 0.5) / w as f32;
                    let (sx, sy) = warp.at(u, v, gu, gv);
                    let dx = amp * (0.8 * lateral + sx) + jitter_x;
                    let dy = amp * ((u - 0.5) * 2.0 * lateral + DEPTH_SHIFT * depth + sy) + jitter_y;
                    pixel_buf[y * w + x] =
                        templates::template_value(class, u - dx / w as f32, v - dy / h as f32);
                }
            }

            if params.speckle_strength > 0.0 {
                let noise: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
                let noise = blur(&noise, h, w);
                for (p, n) in pixel_buf.iter_mut().zip(&noise) {
                    *p = (*p * frame_gain * (1.0 + SPECKLE_GAIN * params.speckle_strength * n))
                        .clamp(0.0, 1.0);
                }
            } else {
                for p in pixel_buf.iter_mut() {
                    *p = (*p * frame_gain).clamp(0.0, 1.0);
                }
            }
            frames.extend_from_slice(&pixel_buf);
        }
    }

    let environment = GridEnvironment::new(*spec, subject_id, class_map.goal_mask(), frames)?;
    Ok(Subject {
        environment,
        class_map,
        layout,
    })
}

/// Loads an externally supplied environment container and validates it.
pub fn ingest_environment(path: &Path) -> Result<GridEnvironment> {
    GridEnvironment::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GridSpec {
        GridSpec {
            rows: 11,
            cols: 15,
            frames_per_bin: 2,
            obs_height: 32,
            obs_width: 32,
        }
    }

    fn noisy(seed: u64) -> SubjectParams {
        SubjectParams {
            seed,
            warp_amplitude: 4.0,
            intensity_gain: 0.95,
            speckle_strength: 0.4,
            spine_col_offset: 1,
            sacrum_row_offset: -1,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_subject(&small_spec(), &noisy(5), "a").unwrap();
        let b = generate_subject(&small_spec(), &noisy(5), "a").unwrap();
        assert_eq!(a, b);
        let c = generate_subject(&small_spec(), &noisy(6), "a").unwrap();
        assert_ne!(a.environment.frames(), c.environment.frames());
    }

    #[test]
    fn clean_frames_equal_scaled_template() {
        let spec = small_spec();
        let params = SubjectParams {
            intensity_gain: 1.1,
            ..SubjectParams::clean(3)
        };
        let subject = generate_subject(&spec, &params, "clean").unwrap();
        for state in spec.states() {
            let template = class_template(subject.class_map.get(state), &spec);
            let expected: Vec<f32> = template.iter().map(|p| (p * 1.1).clamp(0.0, 1.0)).collect();
            for k in 0..spec.frames_per_bin {
                assert_eq!(subject.environment.frame(state, k), expected.as_slice());
            }
        }
    }

    #[test]
    fn goal_mask_matches_sacrum_labels() {
        let subject = generate_subject(&small_spec(), &noisy(1), "g").unwrap();
        assert_eq!(subject.environment.goal_mask(), subject.class_map.goal_mask().as_slice());
        assert_eq!(subject.environment.goal_states().count(), 6);
        let layout = subject.layout;
        assert_eq!(layout.spine_col, 8);
        assert_eq!(layout.sacrum_row, 6);
        assert_eq!(
            subject.class_map.get(EnvState::new(0, 8)),
            AnatomyClass::Vertebra
        );
        assert_eq!(
            subject.class_map.get(EnvState::new(10, 0)),
            AnatomyClass::Pelvis
        );
    }

    #[test]
    fn degenerate_grids_rejected() {
        for (rows, cols) in [(2, 15), (3, 15), (11, 4)] {
            let spec = GridSpec {
                rows,
                cols,
                ..small_spec()
            };
            assert!(matches!(
                generate_subject(&spec, &SubjectParams::clean(0), "x"),
                Err(Error::Input(_))
            ));
        }
        let spec = GridSpec {
            rows: 4,
            cols: 5,
            ..small_spec()
        };
        let s = generate_subject(&spec, &SubjectParams::clean(0), "min").unwrap();
        assert_eq!(s.environment.goal_states().count(), 6);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = SubjectParams {
            intensity_gain: 0.0,
            ..SubjectParams::clean(0)
        };
        assert!(generate_subject(&small_spec(), &bad, "x").is_err());
        let bad = SubjectParams {
            warp_amplitude: -1.0,
            ..SubjectParams::clean(0)
        };
        assert!(generate_subject(&small_spec(), &bad, "x").is_err());
    }

    #[test]
    fn unknown_label_rejected() {
        assert!("sacrum".parse::<AnatomyClass>().is_ok());
        assert!(matches!("femur".parse::<AnatomyClass>(), Err(Error::Input(_))));
    }

    #[test]
    fn ingest_round_trip_and_validation() {
        let subject = generate_subject(&small_spec(), &noisy(2), "rt").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.env");
        subject.environment.save(&path).unwrap();
        assert_eq!(ingest_environment(&path).unwrap(), subject.environment);

        // Header promises 2 frames per bin, payload carries 1.
        let env = &subject.environment;
        let spec = *env.spec();
        let short: Vec<f32> = spec
            .states()
            .flat_map(|s| env.frame(s, 0).to_vec())
            .collect();
        let one_frame = GridSpec {
            frames_per_bin: 1,
            ..spec
        };
        let short_env =
            GridEnvironment::new(one_frame, "rt", env.goal_mask().to_vec(), short).unwrap();
        let mut bytes = short_env.to_bytes();
        bytes[20..24].copy_from_slice(&2u32.to_le_bytes());
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = ingest_environment(&path).unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
        assert!(err.to_string().contains("frame bank"), "{err}");
    }

    #[test]
    fn out_of_range_intensity_rejected() {
        let subject = generate_subject(&small_spec(), &noisy(2), "hot").unwrap();
        let mut bytes = subject.environment.to_bytes();
        // First pixel of the first frame follows the header, id and mask.
        let offset = 8 + 4 + 20 + 4 + 3 + small_spec().num_bins();
        bytes[offset..offset + 4].copy_from_slice(&1.5f32.to_le_bytes());
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hot.env");
        std::fs::write(&path, &bytes).unwrap();
        let err = ingest_environment(&path).unwrap_err();
        assert!(err.to_string().contains("outside [0, 1]"), "{err}");
    }
}
