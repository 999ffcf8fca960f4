//! Axis-aligned boxes tagged with their coordinate form and units.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxForm {
    /// `(cx, cy, w, h)`
    Center,
    /// `(x1, y1, x2, y2)`
    Corner,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    /// Fractions of the image side.
    Normalized,
    Pixels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub coords: [f64; 4],
    pub form: BoxForm,
    pub units: Units,
}

impl BBox {
    pub fn center(cx: f64, cy: f64, w: f64, h: f64, units: Units) -> Self {
        BBox {
            coords: [cx, cy, w, h],
            form: BoxForm::Center,
            units,
        }
    }

    pub fn corner(x1: f64, y1: f64, x2: f64, y2: f64, units: Units) -> Self {
        BBox {
            coords: [x1, y1, x2, y2],
            form: BoxForm::Corner,
            units,
        }
    }

    pub fn to_corner(self) -> Self {
        match self.form {
            BoxForm::Corner => self,
            BoxForm::Center => {
                let [cx, cy, w, h] = self.coords;
                BBox::corner(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, self.units)
            }
        }
    }

    pub fn to_center(self) -> Self {
        match self.form {
            BoxForm::Center => self,
            BoxForm::Corner => {
                let [x1, y1, x2, y2] = self.coords;
                BBox::center((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, self.units)
            }
        }
    }

    /// Converts normalized coordinates to pixels of a square `size` image.
    pub fn to_pixels(self, size: f64) -> Self {
        match self.units {
            Units::Pixels => self,
            Units::Normalized => BBox {
                coords: self.coords.map(|v| v * size),
                units: Units::Pixels,
                ..self
            },
        }
    }

    pub fn to_normalized(self, size: f64) -> Self {
        match self.units {
            Units::Normalized => self,
            Units::Pixels => BBox {
                coords: self.coords.map(|v| v / size),
                units: Units::Normalized,
                ..self
            },
        }
    }

    pub fn width(&self) -> f64 {
        match self.form {
            BoxForm::Center => self.coords[2],
            BoxForm::Corner => self.coords[2] - self.coords[0],
        }
    }

    pub fn height(&self) -> f64 {
        match self.form {
            BoxForm::Center => self.coords[3],
            BoxForm::Corner => self.coords[3] - self.coords[1],
        }
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Clamps a box to `[0, limit]` on both axes, keeping its form.
    pub fn clamp(self, limit: f64) -> Self {
        let c = self.to_corner();
        let [x1, y1, x2, y2] = c.coords.map(|v| v.clamp(0.0, limit));
        let clamped = BBox::corner(x1, y1, x2, y2, self.units);
        match self.form {
            BoxForm::Corner => clamped,
            BoxForm::Center => clamped.to_center(),
        }
    }
}

/// Intersection over union. Both boxes must share units. Boxes with zero
/// area score 0 against anything, including themselves.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    debug_assert_eq!(a.units, b.units, "iou between boxes in different units");
    let [ax1, ay1, ax2, ay2] = a.to_corner().coords;
    let [bx1, by1, bx2, by2] = b.to_corner().coords;
    let area_a = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0);
    let area_b = (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (area_a + area_b - inter)
}
