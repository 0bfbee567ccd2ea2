//! Analytic class templates. Each template is a function of normalized image
//! coordinates (`u` lateral, `v` depth, both in [0, 1)), so warped frames are
//! rendered by evaluating it at displaced coordinates.

use super::AnatomyClass;
use crate::env::GridSpec;

/// Lower bound on the pairwise mean-squared distance between any two
/// templates at the default 64x64 size.
pub const MIN_TEMPLATE_SEPARATION: f32 = 0.004;

fn gauss(x: f32, width: f32) -> f32 {
    (-(x / width) * (x / width)).exp()
}

/// Attenuated tissue background with the bright skin interface near the top.
fn background(v: f32) -> f32 {
    0.16 + 0.06 * (1.0 - v) + 0.35 * gauss(v - 0.05, 0.015)
}

fn shadow_below(v: f32, edge: f32, strength: f32) -> f32 {
    if v > edge {
        1.0 - strength * (1.0 - (-(v - edge) / 0.03).exp())
    } else {
        1.0
    }
}

pub(crate) fn template_value(class: AnatomyClass, u: f32, v: f32) -> f32 {
    let base = background(v);
    let value = match class {
        AnatomyClass::SoftTissue => base + 0.08 * gauss(v - 0.3, 0.04),
        AnatomyClass::Paraspinal => {
            let window = gauss(v - 0.45, 0.3);
            let band = 0.5 + 0.5 * (std::f32::consts::TAU * 3.5 * v).sin();
            base + 0.26 * band * band * window
        }
        AnatomyClass::Vertebra => {
            let mut blobs = 0.0f32;
            let mut shade = 1.0f32;
            for cx in [0.2, 0.5, 0.8] {
                let r2 = ((u - cx) / 0.075).powi(2) + ((v - 0.4) / 0.07).powi(2);
                blobs += 0.5 * (-r2).exp();
                if (u - cx).abs() < 0.075 {
                    shade = shade.min(shadow_below(v, 0.46, 0.7));
                }
            }
            base * shade + blobs
        }
        AnatomyClass::Sacrum => {
            let arc = 0.4 + 0.5 * (u - 0.5) * (u - 0.5);
            base * shadow_below(v, arc + 0.03, 0.65) + 0.55 * gauss(v - arc, 0.04)
        }
        AnatomyClass::Pelvis => {
            let crest = 0.25 + 0.4 * u;
            let wedge = if v < crest && v > crest - 0.3 * u {
                0.2 * u
            } else {
                0.0
            };
            base * shadow_below(v, crest + 0.03, 0.6) + wedge + 0.5 * gauss(v - crest, 0.04)
        }
    };
    value.clamp(0.0, 1.0)
}

/// The noise-free, unwarped image of a class at the spec's frame size.
pub fn class_template(class: AnatomyClass, spec: &GridSpec) -> Vec<f32> {
    let (h, w) = (spec.obs_height, spec.obs_width);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let v = (y as f32 + 0.5) / h as f32;
        for x in 0..w {
            let u = (x as f32 + 0.5) / w as f32;
            out.push(template_value(class, u, v));
        }
    }
    out
}

pub(crate) fn mean_squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>() / a.len() as f32
}

/// Index of the template closest to `frame` after dividing both by their mean
/// intensity, which removes a global gain difference.
pub fn nearest_template(frame: &[f32], templates: &[Vec<f32>]) -> usize {
    let normalize = |img: &[f32]| -> Vec<f32> {
        let mean = img.iter().sum::<f32>() / img.len() as f32;
        let scale = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        img.iter().map(|p| p * scale).collect()
    };
    let probe = normalize(frame);
    templates
        .iter()
        .map(|t| mean_squared_distance(&probe, &normalize(t)))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}
