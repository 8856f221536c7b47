//! Binary masks and axis-aligned boxes in pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x0, x1) x [y0, y1)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Validation(format!(
                "bbox ({x0},{y0},{x1},{y1}) needs x0 < x1 and y0 < y1"
            )));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Validation(format!(
                "mask of {width}x{height} needs {} entries, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Mask { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Rasterizes `bbox`; pixels outside the image are dropped.
    pub fn from_bbox(bbox: &BBox, width: usize, height: usize) -> Self {
        let mut m = Mask::empty(width, height);
        for y in bbox.y0..bbox.y1.min(height) {
            for x in bbox.x0..bbox.x1.min(width) {
                m.bits[y * width + x] = true;
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    /// Tight box around all positive pixels.
    pub fn bbox(&self) -> Option<BBox> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then_some(BBox { x0, y0, x1, y1 })
    }

    /// Largest 4-connected component; ties keep the one found first in scan order.
    pub fn largest_component(&self) -> Mask {
        let mut label = vec![usize::MAX; self.bits.len()];
        let mut best: Vec<usize> = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || label[start] != usize::MAX {
                continue;
            }
            let mut comp = Vec::new();
            label[start] = start;
            stack.push(start);
            while let Some(p) = stack.pop() {
                comp.push(p);
                let (x, y) = (p % self.width, p / self.width);
                let mut visit = |q: usize| {
                    if self.bits[q] && label[q] == usize::MAX {
                        label[q] = start;
                        stack.push(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < self.width {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - self.width);
                }
                if y + 1 < self.height {
                    visit(p + self.width);
                }
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
        let mut out = Mask::empty(self.width, self.height);
        for p in best {
            out.bits[p] = true;
        }
        out
    }

    /// `(|A ∩ B|, |A ∪ B|)`.
    pub fn overlap(&self, other: &Mask) -> Result<(usize, usize)> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Validation(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok((inter, union))
    }
}
