//! Regular grid of subset centers over an ROI.

use crate::error::{DicError, Result};
use crate::roi::RoiMask;

/// Row/column address of a grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
}

/// Subset centers laid out on a rectangular lattice.
///
/// Points whose footprint touches a pixel outside the ROI keep their address
/// but are marked absent, so every per-point field stays rectangular.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetGrid {
    subset_size: usize,
    step: usize,
    origin: (usize, usize),
    cols: usize,
    rows: usize,
    image_dims: (usize, usize),
    present: Vec<bool>,
}

impl SubsetGrid {
    /// Assemble a grid from its parts, e.g. when re-importing results.
    pub fn from_parts(
        subset_size: usize,
        step: usize,
        origin: (usize, usize),
        dims: (usize, usize),
        image_dims: (usize, usize),
        present: Vec<bool>,
    ) -> Result<Self> {
        let (cols, rows) = dims;
        if present.len() != cols * rows {
            return Err(DicError::DimensionMismatch(format!(
                "{} presence flags for a {cols}x{rows} grid",
                present.len()
            )));
        }
        if step == 0 || subset_size % 2 == 0 {
            return Err(DicError::InvalidParameter(format!(
                "subset size {subset_size} must be odd and step {step} positive"
            )));
        }
        Ok(Self {
            subset_size,
            step,
            origin,
            cols,
            rows,
            image_dims,
            present,
        })
    }

    #[inline]
    pub fn subset_size(&self) -> usize {
        self.subset_size
    }

    #[inline]
    pub fn half_width(&self) -> usize {
        (self.subset_size - 1) / 2
    }

    #[inline]
    pub fn step(&self) -> usize {
        self.step
    }

    #[inline]
    pub fn origin(&self) -> (usize, usize) {
        self.origin
    }

    /// `(cols, rows)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.image_dims
    }

    #[inline]
    pub fn linear(&self, idx: GridIndex) -> usize {
        idx.row * self.cols + idx.col
    }

    #[inline]
    pub fn index_of(&self, linear: usize) -> GridIndex {
        GridIndex {
            row: linear / self.cols,
            col: linear % self.cols,
        }
    }

    /// Pixel position of a grid address, whether present or not.
    #[inline]
    pub fn center(&self, idx: GridIndex) -> (usize, usize) {
        (
            self.origin.0 + idx.col * self.step,
            self.origin.1 + idx.row * self.step,
        )
    }

    #[inline]
    pub fn center_linear(&self, linear: usize) -> (usize, usize) {
        self.center(self.index_of(linear))
    }

    #[inline]
    pub fn is_present(&self, linear: usize) -> bool {
        self.present[linear]
    }

    pub fn presence(&self) -> &[bool] {
        &self.present
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    /// Present centers as `(linear index, (x, y))`.
    pub fn centers(&self) -> impl Iterator<Item = (usize, (usize, usize))> + '_ {
        (0..self.len())
            .filter(|&i| self.present[i])
            .map(|i| (i, self.center_linear(i)))
    }

    /// The up-to-four edge neighbours of a point (present or not).
    pub fn neighbors4(&self, linear: usize) -> impl Iterator<Item = usize> {
        let GridIndex { row, col } = self.index_of(linear);
        let (rows, cols) = (self.rows, self.cols);
        [
            (row > 0).then(|| linear - cols),
            (col > 0).then(|| linear - 1),
            (col + 1 < cols).then(|| linear + 1),
            (row + 1 < rows).then(|| linear + cols),
        ]
        .into_iter()
        .flatten()
    }

    /// Grid address whose center is closest to a pixel coordinate.
    pub fn nearest(&self, x: f64, y: f64) -> GridIndex {
        let snap = |v: f64, origin: usize, n: usize| -> usize {
            let k = ((v - origin as f64) / self.step as f64).round();
            k.clamp(0.0, (n - 1) as f64) as usize
        };
        GridIndex {
            row: snap(y, self.origin.1, self.rows),
            col: snap(x, self.origin.0, self.cols),
        }
    }
}

/// Lay a grid with spacing `step` over the ROI.
///
/// The first center sits half a subset inside the ROI's bounding box; a center
/// is present only if its whole `subset_size`-square footprint is inside the
/// mask.
pub fn build_subset_grid(roi: &RoiMask, subset_size: usize, step: usize) -> Result<SubsetGrid> {
    if subset_size % 2 == 0 || subset_size == 0 {
        return Err(DicError::InvalidParameter(format!(
            "subset size must be odd, got {subset_size}"
        )));
    }
    if step == 0 {
        return Err(DicError::InvalidParameter("subset step must be >= 1".into()));
    }
    let bbox = roi.bounding_box().ok_or(DicError::EmptyGrid)?;
    let half = (subset_size - 1) / 2;
    if bbox.x1 - bbox.x0 < subset_size || bbox.y1 - bbox.y0 < subset_size {
        return Err(DicError::EmptyGrid);
    }
    let origin = (bbox.x0 + half, bbox.y0 + half);
    let cols = (bbox.x1 - 1 - half - origin.0) / step + 1;
    let rows = (bbox.y1 - 1 - half - origin.1) / step + 1;

    let width = roi.width();
    let mut present = vec![false; cols * rows];
    let mut column_ok = vec![true; width];
    let mut prefix = vec![0u32; width + 1];
    for r in 0..rows {
        let cy = origin.1 + r * step;
        // a column is usable if all footprint rows are inside the mask there
        column_ok.fill(true);
        for y in cy - half..=cy + half {
            for (ok, &m) in column_ok.iter_mut().zip(&roi.as_slice()[y * width..(y + 1) * width]) {
                *ok &= m;
            }
        }
        for x in 0..width {
            prefix[x + 1] = prefix[x] + column_ok[x] as u32;
        }
        for c in 0..cols {
            let cx = origin.0 + c * step;
            let good = prefix[cx + half + 1] - prefix[cx - half];
            present[r * cols + c] = good as usize == subset_size;
        }
    }
    if !present.iter().any(|&p| p) {
        return Err(DicError::EmptyGrid);
    }
    Ok(SubsetGrid {
        subset_size,
        step,
        origin,
        cols,
        rows,
        image_dims: roi.dims(),
        present,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::Rect;

    /// Brute force: every footprint fully in bounds and in the mask.
    fn brute_force_centers(roi: &RoiMask, size: usize, step: usize) -> Vec<(usize, usize)> {
        let h = (size - 1) / 2;
        let bb = roi.bounding_box().unwrap();
        let mut out = Vec::new();
        let mut y = bb.y0 + h;
        while y + h < bb.y1 {
            let mut x = bb.x0 + h;
            while x + h < bb.x1 {
                let inside = (y - h..=y + h).all(|yy| (x - h..=x + h).all(|xx| roi.get(xx, yy)));
                if inside {
                    out.push((x, y));
                }
                x += step;
            }
            y += step;
        }
        out
    }

    #[test]
    fn full_roi_grid_matches_enumeration() {
        let roi = RoiMask::all(100, 100);
        let grid = build_subset_grid(&roi, 21, 10).unwrap();
        let expected = brute_force_centers(&roi, 21, 10);
        // x, y in {10, 20, ..., 80}: a center at 90 would need pixel 100
        assert_eq!(expected.len(), 64);
        assert_eq!(grid.dims(), (8, 8));
        let got: Vec<_> = grid.centers().map(|(_, c)| c).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn hole_marks_one_point_absent() {
        let mut roi = RoiMask::all(100, 100);
        roi.set_rect(Rect { x0: 40, y0: 40, x1: 41, y1: 41 }, false);
        let grid = build_subset_grid(&roi, 21, 30).unwrap();
        // centers at 10, 40, 70: only (40,40) sees the hole... and its neighbours
        // are 30 px away, outside the 10 px half-width
        assert_eq!(grid.dims(), (3, 3));
        assert_eq!(grid.present_count(), 8);
        assert!(!grid.is_present(grid.linear(GridIndex { row: 1, col: 1 })));
    }

    #[test]
    fn subset_bigger_than_roi_is_empty() {
        let roi = RoiMask::from_rects((50, 50), &[Rect { x0: 10, y0: 10, x1: 20, y1: 40 }]);
        assert!(matches!(build_subset_grid(&roi, 11, 1), Err(DicError::EmptyGrid)));
    }

    #[test]
    fn nearest_and_neighbours() {
        let roi = RoiMask::all(60, 60);
        let grid = build_subset_grid(&roi, 11, 5).unwrap();
        assert_eq!(grid.origin(), (5, 5));
        assert_eq!(grid.nearest(17.4, 6.0), GridIndex { row: 0, col: 2 });
        assert_eq!(grid.nearest(-100.0, 1e6), GridIndex { row: grid.rows() - 1, col: 0 });
        let n: Vec<_> = grid.neighbors4(0).collect();
        assert_eq!(n, vec![1, grid.cols()]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn grid_agrees_with_brute_force(
                holes in proptest::collection::vec((0usize..40, 0usize..40, 1usize..8, 1usize..8), 0..4),
                size in (1usize..5).prop_map(|k| 2 * k + 1),
                step in 1usize..7,
            ) {
                let mut roi = RoiMask::all(40, 40);
                for (x, y, w, h) in holes {
                    roi.set_rect(Rect { x0: x, y0: y, x1: x + w, y1: y + h }, false);
                }
                let expected = brute_force_centers(&roi, size, step);
                match build_subset_grid(&roi, size, step) {
                    Ok(grid) => {
                        let got: Vec<_> = grid.centers().map(|(_, c)| c).collect();
                        prop_assert_eq!(got, expected);
                    }
                    Err(DicError::EmptyGrid) => prop_assert!(expected.is_empty()),
                    Err(e) => prop_assert!(false, "unexpected error {e}"),
                }
            }
        }
    }
}
