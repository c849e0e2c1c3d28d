//! Random Erasing: pseudo-occlusion used to manufacture anomaly samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssues, Error, Result};
use crate::labeled::{Label, LabeledImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomErasingParams {
    /// Erased area as a fraction of the image area, sampled uniformly.
    pub area_ratio: [f64; 2],
    /// Height / width of the erased rectangle, sampled uniformly.
    pub aspect: [f64; 2],
    /// Number of sequential erasures per anomaly sample.
    pub applications: usize,
    pub max_retries: usize,
}

impl Default for RandomErasingParams {
    fn default() -> Self {
        Self {
            area_ratio: [0.02, 0.4],
            aspect: [0.3, 3.3],
            applications: 2,
            max_retries: 100,
        }
    }
}

impl RandomErasingParams {
    pub fn validate(&self) -> Result<()> {
        let mut issues = ConfigIssues::new();
        let [a0, a1] = self.area_ratio;
        issues.check(a0 > 0.0 && a0 <= a1 && a1 < 1.0, || {
            format!("erasing.area_ratio must satisfy 0 < lo <= hi < 1 (got {:?})", self.area_ratio)
        });
        let [r0, r1] = self.aspect;
        issues.check(r0 > 0.0 && r0 <= r1 && r1.is_finite(), || {
            format!("erasing.aspect must satisfy 0 < lo <= hi (got {:?})", self.aspect)
        });
        issues.check(self.max_retries >= 1, || "erasing.max_retries must be >= 1".into());
        issues.into_result()
    }
}

/// Where and how a rectangle was erased.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErasedRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub sampled_area: f64,
    pub sampled_aspect: f64,
    /// The retry budget ran out and the largest feasible box was used.
    pub fallback: bool,
}

impl ErasedRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn sample_rect(w: usize, h: usize, params: &RandomErasingParams, rng: &mut impl Rng) -> ErasedRect {
    let area = (w * h) as f64;
    let mut last = (0.0, 1.0);
    for _ in 0..params.max_retries {
        let s = uniform(rng, params.area_ratio);
        let r = uniform(rng, params.aspect);
        last = (s, r);
        let eh = (area * s * r).sqrt().floor() as usize;
        let ew = (area * s / r).sqrt().floor() as usize;
        if ew >= 1 && eh >= 1 && ew <= w && eh <= h {
            let x = rng.gen_range(0..=w - ew);
            let y = rng.gen_range(0..=h - eh);
            return ErasedRect {
                x,
                y,
                width: ew,
                height: eh,
                sampled_area: s,
                sampled_aspect: r,
                fallback: false,
            };
        }
    }
    // Largest box with the last sampled aspect that still fits.
    let (s, r) = last;
    let ew = (w as f64).min(h as f64 / r).floor().max(1.0) as usize;
    let eh = ((ew as f64 * r).floor() as usize).clamp(1, h);
    let x = rng.gen_range(0..=w - ew);
    let y = rng.gen_range(0..=h - eh);
    ErasedRect {
        x,
        y,
        width: ew,
        height: eh,
        sampled_area: s,
        sampled_aspect: r,
        fallback: true,
    }
}

/// Replaces one random rectangle with uniform noise in `[0, 1)`.
pub fn random_erase_once(
    image: &LabeledImage,
    params: &RandomErasingParams,
    rng: &mut impl Rng,
) -> Result<(LabeledImage, ErasedRect)> {
    if image.is_empty() {
        return Err(Error::Domain("cannot erase an empty image".into()));
    }
    params.validate()?;
    let rect = sample_rect(image.width, image.height, params, rng);
    let mut out = image.clone();
    for c in 0..3 {
        for y in rect.y..rect.y + rect.height {
            for x in rect.x..rect.x + rect.width {
                out.set(c, y, x, rng.gen::<f32>());
            }
        }
    }
    Ok((out, rect))
}

#[derive(Debug, Clone)]
pub struct AnomalySample {
    pub image: LabeledImage,
    pub rects: Vec<ErasedRect>,
}

impl AnomalySample {
    pub fn fallbacks(&self) -> usize {
        self.rects.iter().filter(|r| r.fallback).count()
    }

    /// Whether pixel `(x, y)` lies in any erased rectangle.
    pub fn erased(&self, x: usize, y: usize) -> bool {
        self.rects.iter().any(|r| r.contains(x, y))
    }
}

/// Applies [`random_erase_once`] `params.applications` times and relabels the
/// result as an anomaly of the source step.
pub fn make_anomaly_sample(
    image: &LabeledImage,
    params: &RandomErasingParams,
    rng: &mut impl Rng,
) -> Result<AnomalySample> {
    if image.is_empty() {
        return Err(Error::Domain("cannot erase an empty image".into()));
    }
    let mut current = image.clone();
    let mut rects = Vec::with_capacity(params.applications);
    for _ in 0..params.applications {
        let (next, rect) = random_erase_once(&current, params, rng)?;
        current = next;
        rects.push(rect);
    }
    current.label = match image.label {
        Label::Step(s) | Label::Anomaly(s) => Label::Anomaly(s),
        Label::Error => Label::Error,
    };
    current.id = format!("{}+erase", image.id);
    Ok(AnomalySample { image: current, rects })
}
