//! Region-of-interest masks.

use std::path::Path;

use crate::error::{DicError, Result};
use crate::image::{load_image, GrayImage};

/// Axis-aligned rectangle `[x0, x1) x [y0, y1)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Boolean mask over the reference image; `true` marks pixels inside the ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl RoiMask {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(DicError::DimensionMismatch(format!(
                "mask of {} cells for {width}x{height}",
                mask.len()
            )));
        }
        Ok(Self { width, height, mask })
    }

    pub fn all(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
        }
    }

    /// Everything except a `border`-pixel frame along the outer edges.
    pub fn exclude_border(dims: (usize, usize), border: usize) -> Result<Self> {
        let rect = border_rect(dims, border)?;
        Ok(Self::from_rects(dims, &[rect]))
    }

    /// Union of rectangles, clipped to the image.
    pub fn from_rects(dims: (usize, usize), rects: &[Rect]) -> Self {
        let mut roi = Self {
            width: dims.0,
            height: dims.1,
            mask: vec![false; dims.0 * dims.1],
        };
        for r in rects {
            roi.set_rect(*r, true);
        }
        roi
    }

    /// Nonzero pixels of a grayscale image are inside.
    pub fn from_image(image: &GrayImage) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
            mask: image.pixels().iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_image(&load_image(path)?))
    }

    /// Set every pixel of `rect` (clipped) to `value`.
    pub fn set_rect(&mut self, rect: Rect, value: bool) {
        let x1 = rect.x1.min(self.width);
        let y1 = rect.y1.min(self.height);
        for y in rect.y0.min(y1)..y1 {
            let row = &mut self.mask[y * self.width..(y + 1) * self.width];
            row[rect.x0.min(x1)..x1].fill(value);
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Tight bounding box of the true pixels, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<Rect> {
        let mut bb: Option<Rect> = None;
        for y in 0..self.height {
            let row = &self.mask[y * self.width..(y + 1) * self.width];
            let (Some(first), Some(last)) = (row.iter().position(|&m| m), row.iter().rposition(|&m| m))
            else {
                continue;
            };
            bb = Some(match bb {
                None => Rect {
                    x0: first,
                    y0: y,
                    x1: last + 1,
                    y1: y + 1,
                },
                Some(b) => Rect {
                    x0: b.x0.min(first),
                    y0: b.y0,
                    x1: b.x1.max(last + 1),
                    y1: y + 1,
                },
            });
        }
        bb
    }
}

/// The interior rectangle left after removing a `border`-pixel frame.
pub fn border_rect(dims: (usize, usize), border: usize) -> Result<Rect> {
    let (width, height) = dims;
    if 2 * border >= width.min(height) {
        return Err(DicError::BorderTooLarge {
            border,
            width,
            height,
        });
    }
    Ok(Rect {
        x0: border,
        y0: border,
        x1: width - border,
        y1: height - border,
    })
}

/// Free-function form of [`RoiMask::exclude_border`].
pub fn roi_exclude_border(dims: (usize, usize), border: usize) -> Result<RoiMask> {
    RoiMask::exclude_border(dims, border)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn border_three_leaves_centered_block() {
        let roi = roi_exclude_border((10, 10), 3).unwrap();
        assert_eq!(roi.count(), 16);
        for y in 0..10 {
            for x in 0..10 {
                let inside = (3..7).contains(&x) && (3..7).contains(&y);
                assert_eq!(roi.get(x, y), inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn zero_border_is_all_true() {
        let roi = roi_exclude_border((7, 5), 0).unwrap();
        assert_eq!(roi.count(), 35);
    }

    #[test]
    fn border_too_large() {
        assert!(matches!(
            roi_exclude_border((10, 20), 5),
            Err(DicError::BorderTooLarge { .. })
        ));
    }

    #[test]
    fn gigapixel_border_region() {
        let r = border_rect((32000, 32000), 1000).unwrap();
        assert_eq!((r.x1 - r.x0, r.y1 - r.y0), (30000, 30000));
    }

    #[test]
    fn large_border_region_size() {
        let roi = roi_exclude_border((3200, 3200), 100).unwrap();
        assert_eq!(
            roi.bounding_box().unwrap(),
            Rect { x0: 100, y0: 100, x1: 3100, y1: 3100 }
        );
        assert_eq!(roi.count(), 3000 * 3000);
    }

    #[test]
    fn rects_union_and_bbox() {
        let roi = RoiMask::from_rects(
            (20, 20),
            &[
                Rect { x0: 2, y0: 3, x1: 5, y1: 6 },
                Rect { x0: 10, y0: 1, x1: 30, y1: 4 },
            ],
        );
        assert_eq!(roi.count(), 9 + 10 * 3);
        assert_eq!(roi.bounding_box().unwrap(), Rect { x0: 2, y0: 1, x1: 20, y1: 6 });
        assert!(RoiMask::from_rects((4, 4), &[]).bounding_box().is_none());
    }
}
