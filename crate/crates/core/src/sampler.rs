//! Grid windows over a document and their patch decomposition.

use crate::error::{Error, Result};
use crate::preproc::{foreground_fraction, BinaryImage};

/// Square crop of a document at `origin = (x, y)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub origin: (usize, usize),
    pub pixels: BinaryImage,
}

impl Window {
    pub fn size(&self) -> usize {
        self.pixels.width()
    }
}

/// Windows on a regular grid, row-major. Documents smaller than `size` in either
/// dimension are padded with background on the right/bottom. Trailing margins that
/// do not fit a full window are left uncovered.
pub fn sample_windows(doc: &BinaryImage, size: usize, stride: usize) -> Result<Vec<Window>> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidParameter("window size and stride must be >= 1".into()));
    }
    let width = doc.width().max(size);
    let height = doc.height().max(size);
    let cols = (width - size) / stride + 1;
    let rows = (height - size) / stride + 1;
    let mut windows = Vec::with_capacity(rows * cols);
    for j in 0..rows {
        for i in 0..cols {
            let origin = (i * stride, j * stride);
            let pixels = doc.crop_padded(origin.0, origin.1, size, size)?;
            windows.push(Window { origin, pixels });
        }
    }
    Ok(windows)
}

/// Keeps windows whose foreground fraction is strictly greater than `min_fg`.
pub fn filter_windows(windows: Vec<Window>, min_fg: f64) -> Result<Vec<Window>> {
    if !(0.0..=1.0).contains(&min_fg) {
        return Err(Error::InvalidParameter(format!("min_fg = {min_fg} not in [0, 1]")));
    }
    let mut kept = Vec::with_capacity(windows.len());
    for w in windows {
        if foreground_fraction(&w.pixels)? > min_fg {
            kept.push(w);
        }
    }
    Ok(kept)
}

/// A window cut into `L` flattened `P x P` patches, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    /// Patches per side.
    pub grid_side: usize,
    pub patches: Vec<Vec<u8>>,
    pub fg_counts: Vec<u32>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Inverse of [`patchify`].
    pub fn reassemble(&self) -> Result<BinaryImage> {
        let p = self.patch_size;
        let side = self.grid_side * p;
        let mut pixels = vec![0u8; side * side];
        for (idx, patch) in self.patches.iter().enumerate() {
            let (gy, gx) = (idx / self.grid_side, idx % self.grid_side);
            for (r, row) in patch.chunks(p).enumerate() {
                let start = (gy * p + r) * side + gx * p;
                pixels[start..start + p].copy_from_slice(row);
            }
        }
        BinaryImage::new(side, side, pixels)
    }
}

pub fn patchify(window: &Window, patch_size: usize) -> Result<PatchGrid> {
    let size = window.size();
    if patch_size == 0 || !size.is_multiple_of(patch_size) || window.pixels.height() != size {
        return Err(Error::DimensionMismatch(format!(
            "window {}x{} is not divisible into {patch_size}px patches",
            size,
            window.pixels.height()
        )));
    }
    let side = size / patch_size;
    let mut patches = Vec::with_capacity(side * side);
    let mut fg_counts = Vec::with_capacity(side * side);
    let src = window.pixels.pixels();
    for gy in 0..side {
        for gx in 0..side {
            let mut patch = Vec::with_capacity(patch_size * patch_size);
            for r in 0..patch_size {
                let start = (gy * patch_size + r) * size + gx * patch_size;
                patch.extend_from_slice(&src[start..start + patch_size]);
            }
            fg_counts.push(patch.iter().map(|&v| u32::from(v)).sum());
            patches.push(patch);
        }
    }
    Ok(PatchGrid { patch_size, grid_side: side, patches, fg_counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_tiling() {
        let doc = BinaryImage::zeros(448, 448).unwrap();
        let origins: Vec<_> = sample_windows(&doc, 224, 224).unwrap().iter().map(|w| w.origin).collect();
        assert_eq!(origins, vec![(0, 0), (224, 0), (0, 224), (224, 224)]);
    }

    #[test]
    fn single_position_with_small_stride() {
        let doc = BinaryImage::zeros(224, 224).unwrap();
        assert_eq!(sample_windows(&doc, 224, 56).unwrap().len(), 1);
    }

    #[test]
    fn non_square_grid() {
        // 300 wide, 520 tall: floor(76/224)+1 = 1 column, floor(296/224)+1 = 2 rows
        let doc = BinaryImage::zeros(300, 520).unwrap();
        let origins: Vec<_> = sample_windows(&doc, 224, 224).unwrap().iter().map(|w| w.origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 224)]);
    }

    #[test]
    fn undersized_document_is_padded() {
        let doc = BinaryImage::new(3, 2, vec![1; 6]).unwrap();
        let w = sample_windows(&doc, 8, 8).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].pixels.foreground_count(), 6);
        assert_eq!(w[0].pixels.get(2, 1), 1);
        assert_eq!(w[0].pixels.get(3, 1), 0);
    }

    fn window_with(count: usize, size: usize) -> Window {
        let mut px = BinaryImage::zeros(size, size).unwrap();
        for i in 0..count {
            px.set(i % size, i / size, true);
        }
        Window { origin: (0, 0), pixels: px }
    }

    #[test]
    fn filter_threshold_is_strict() {
        let blank = vec![window_with(0, 224); 3];
        assert!(filter_windows(blank.clone(), 0.025).unwrap().is_empty());
        assert!(filter_windows(blank, 0.0).unwrap().is_empty());
        assert_eq!(filter_windows(vec![window_with(1, 224)], 0.0).unwrap().len(), 1);
        assert_eq!(filter_windows(vec![window_with(1255, 224)], 0.025).unwrap().len(), 1);
        assert!(filter_windows(vec![window_with(1254, 224)], 0.025).unwrap().is_empty());
    }

    #[test]
    fn patchify_shapes() {
        let g = patchify(&window_with(0, 224), 16).unwrap();
        assert_eq!(g.len(), 196);
        assert!(g.patches.iter().all(|p| p.len() == 256));

        let full = Window { origin: (0, 0), pixels: BinaryImage::zeros(32, 32).unwrap().invert() };
        assert_eq!(patchify(&full, 16).unwrap().fg_counts, vec![256; 4]);

        assert_eq!(patchify(&window_with(1, 32), 16).unwrap().fg_counts, vec![1, 0, 0, 0]);
        assert!(patchify(&window_with(0, 30), 16).is_err());
    }

    proptest! {
        #[test]
        fn patchify_is_a_bijection(bits in proptest::collection::vec(0u8..2, 64 * 64)) {
            let pixels = BinaryImage::new(64, 64, bits).unwrap();
            let w = Window { origin: (0, 0), pixels: pixels.clone() };
            let g = patchify(&w, 16).unwrap();
            prop_assert_eq!(g.reassemble().unwrap(), pixels.clone());
            let total: u32 = g.fg_counts.iter().sum();
            prop_assert_eq!(total as usize, pixels.foreground_count());
        }

        #[test]
        fn filter_is_monotone(counts in proptest::collection::vec(0usize..200, 1..12), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let windows: Vec<_> = counts.iter().map(|&c| window_with(c, 16)).collect();
            let a = filter_windows(windows.clone(), lo).unwrap();
            let b = filter_windows(windows, hi).unwrap();
            prop_assert!(b.len() <= a.len());
            prop_assert!(b.iter().all(|w| a.contains(w)));
        }

        #[test]
        fn stride_equal_size_tiles_disjointly(w in 1usize..100, h in 1usize..100, size in 1usize..40) {
            let doc = BinaryImage::zeros(w, h).unwrap();
            let windows = sample_windows(&doc, size, size).unwrap();
            let cols = (w.max(size) - size) / size + 1;
            let rows = (h.max(size) - size) / size + 1;
            prop_assert_eq!(windows.len(), rows * cols);
            for (n, win) in windows.iter().enumerate() {
                prop_assert_eq!(win.origin, ((n % cols) * size, (n / cols) * size));
            }
        }
    }
}
