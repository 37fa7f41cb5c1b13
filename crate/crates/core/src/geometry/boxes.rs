use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox(format!("({x1}, {y1}, {x2}, {y2})")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Clips to `[0, width] × [0, height]`; `None` if nothing with positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let b = Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    /// Mirror about the vertical axis of an image `width` pixels wide.
    pub fn hflip(&self, width: f64) -> Self {
        Self {
            x1: width - self.x2,
            y1: self.y1,
            x2: width - self.x1,
            y2: self.y2,
        }
    }
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Box rotated by `theta` radians about its centre; `theta ∈ (−π/2, π/2]`.
///
/// At `theta = 0` the `h` axis is vertical; the local height axis maps to the
/// image direction `(−sin θ, cos θ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let rb = Self {
            cx,
            cy,
            w,
            h,
            theta,
        };
        if !(w > 0.0 && h > 0.0) || !rb.theta.is_finite() || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::DegenerateBox(format!("rotated {rb:?}")));
        }
        if !(theta > -std::f64::consts::FRAC_PI_2 && theta <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!(
                "rotation {theta} outside (−π/2, π/2]"
            )));
        }
        Ok(rb)
    }

    /// Image-plane corners in order (−u,−v), (+u,−v), (+u,+v), (−u,+v).
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| (self.cx + u * c - v * s, self.cy + u * s + v * c))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            cx: self.cx * s,
            cy: self.cy * s,
            w: self.w * s,
            h: self.h * s,
            theta: self.theta,
        }
    }
}

/// Rotated box with the axis-aligned box's centre and size.
pub fn to_rotated(b: &BBox, theta: f64) -> Result<RotatedBox> {
    let (cx, cy) = b.center();
    RotatedBox::new(cx, cy, b.width(), b.height(), theta)
}

/// Per-axis scale factors for the scale-jittered RoI view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleJitter {
    pub dx: f64,
    pub dy: f64,
}

impl ScaleJitter {
    pub const LOW: f64 = 0.9;
    pub const HIGH: f64 = 1.1;

    pub fn identity() -> Self {
        Self { dx: 1.0, dy: 1.0 }
    }

    /// Draws `dx, dy ~ U(0.9, 1.1)` independently.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            dx: rng.random_range(Self::LOW..Self::HIGH),
            dy: rng.random_range(Self::LOW..Self::HIGH),
        }
    }
}

/// Same centre, width scaled by `dx` and height by `dy`.
pub fn scale_jitter(b: &BBox, j: ScaleJitter) -> BBox {
    let (cx, cy) = b.center();
    let (hw, hh) = (j.dx * b.width() / 2.0, j.dy * b.height() / 2.0);
    BBox {
        x1: cx - hw,
        y1: cy - hh,
        x2: cx + hw,
        y2: cy + hh,
    }
}
