//! Labeled RGB images, the unit every dataset and tuple is built from.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth or predicted label of an image.
///
/// Ordering is `Step(1) < Step(2) < … < Error < Anomaly(_)`, which the kNN
/// tie-breaker relies on ("lower step index wins").
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    /// Assembly step, 1-based.
    Step(u16),
    /// Occluded / undeterminable image.
    Error,
    /// Synthesized training anomaly derived from an image of the given step.
    Anomaly(u16),
}

impl Label {
    pub fn step(&self) -> Option<u16> {
        match *self {
            Label::Step(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_step(&self) -> bool {
        matches!(self, Label::Step(_))
    }

    /// Directory name used in the dataset layout (`step_03`, `error`).
    pub fn dir_name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Step(s) => write!(f, "step_{s:02}"),
            Label::Error => f.write_str("error"),
            Label::Anomaly(s) => write!(f, "anomaly_{s:02}"),
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("unrecognized label {s:?}"));
        if s == "error" {
            return Ok(Label::Error);
        }
        if let Some(rest) = s.strip_prefix("step_") {
            let v: u16 = rest.parse().map_err(|_| bad())?;
            return if v == 0 { Err(bad()) } else { Ok(Label::Step(v)) };
        }
        if let Some(rest) = s.strip_prefix("anomaly_") {
            let v: u16 = rest.parse().map_err(|_| bad())?;
            return if v == 0 { Err(bad()) } else { Ok(Label::Anomaly(v)) };
        }
        Err(bad())
    }
}

/// An RGB image with values in `[0, 1]`, stored planar (channel-major, CHW).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub label: Label,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, label: Label, width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::Domain(format!(
                "pixel buffer has {} values, expected 3x{}x{}",
                pixels.len(),
                height,
                width
            )));
        }
        Ok(Self {
            id: id.into(),
            label,
            width,
            height,
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, label: Label, width: usize, height: usize, value: f32) -> Self {
        Self {
            id: id.into(),
            label,
            width,
            height,
            pixels: vec![value; 3 * width * height],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.pixels[i] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn clamp(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = to_u8(*p) as f32 / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            *px = image::Rgb([
                to_u8(self.get(0, y, x)),
                to_u8(self.get(1, y, x)),
                to_u8(self.get(2, y, x)),
            ]);
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path, id: impl Into<String>, label: Label) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(id, label, w, h, 0.0);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
