use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};

pub type ImageId = u64;
pub type ClassId = u32;

/// Axis-aligned box in pixels, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(PalError::DegenerateBox {
                w: self.w,
                h: self.h,
            })
        }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// One final (post-suppression) detection with the features the classifiers
/// consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probabilities: Option<Vec<f64>>,
    #[serde(default)]
    pub pre_nms_count: u32,
    /// Set only for detections on labelled images.
    #[serde(default, rename = "tp", skip_serializing_if = "Option::is_none")]
    pub tp_label: Option<bool>,
}

impl DetectionRecord {
    /// The class distribution used by the image entropy terms: the detector's
    /// own distribution when present, otherwise the two-point `(p, 1 - p)`.
    pub fn class_distribution(&self) -> ClassDistribution<'_> {
        match &self.class_probabilities {
            Some(p) => ClassDistribution::Full(p),
            None => ClassDistribution::TopOne(self.confidence),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ClassDistribution<'a> {
    Full(&'a [f64]),
    TopOne(f64),
}

impl ClassDistribution<'_> {
    /// Shannon entropy in nats with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        match *self {
            ClassDistribution::Full(p) => -p.iter().map(|&v| plogp(v)).sum::<f64>(),
            ClassDistribution::TopOne(p) => -(plogp(p) + plogp(1.0 - p)),
        }
    }
}

/// `p ln p` with the `0 ln 0 = 0` convention.
pub fn plogp(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}
