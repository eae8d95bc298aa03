//! Per-document token extraction: windows -> patches -> ViT -> cached tokens.
//!
//! All patch tokens are kept together with their patch foreground counts, so the
//! foreground threshold can be changed without re-running the transformer.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::preproc::BinaryImage;
use crate::sampler::{filter_windows, patchify, sample_windows};
use crate::vit::Vit;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractParams {
    pub window: usize,
    pub stride: usize,
    /// Windows need a foreground fraction strictly above this to be used.
    pub min_window_fg: f64,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self { window: 224, stride: 224, min_window_fg: 0.025 }
    }
}

/// Tokens of every kept window of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentTokens {
    pub doc_id: String,
    /// `W x 2` window origins `(x, y)`.
    pub origins: Vec<(usize, usize)>,
    /// `W x E` class tokens.
    pub cls: Array2<f32>,
    /// `W * L x E` patch tokens, window-major.
    pub patch_tokens: Array2<f32>,
    /// `W * L` foreground pixel counts matching `patch_tokens`.
    pub fg_counts: Vec<u32>,
}

impl DocumentTokens {
    pub fn num_windows(&self) -> usize {
        self.origins.len()
    }

    pub fn dim(&self) -> usize {
        self.patch_tokens.ncols()
    }

    /// Foreground tokens of all windows pooled together.
    pub fn foreground(&self, t_fg: u32) -> Array2<f64> {
        let keep: Vec<usize> = self.fg_counts.iter().enumerate().filter(|(_, &c)| c >= t_fg).map(|(i, _)| i).collect();
        self.patch_tokens.select(Axis(0), &keep).mapv(f64::from)
    }

    pub fn cls_tokens(&self) -> Array2<f64> {
        self.cls.mapv(f64::from)
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.set_attr("doc_id", self.doc_id.clone());
        let w = self.num_windows();
        let e = self.dim();
        let origins = self.origins.iter().flat_map(|&(x, y)| [x as f64, y as f64]).collect();
        c.insert_f64("origins", &[w, 2], origins)?;
        c.insert_f32("cls", &[w, e], self.cls.iter().copied().collect())?;
        c.insert_f32("patch_tokens", &[self.patch_tokens.nrows(), e], self.patch_tokens.iter().copied().collect())?;
        c.insert_f32("fg_counts", &[self.fg_counts.len()], self.fg_counts.iter().map(|&v| v as f32).collect())?;
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let doc_id = c.attr("doc_id").unwrap_or_default().to_string();
        let matrix = |name: &str| -> Result<Array2<f32>> {
            let (dims, data) = c.f32(name)?;
            let &[r, k] = dims else {
                return Err(Error::DimensionMismatch(format!("`{name}` must be rank 2")));
            };
            Ok(Array2::from_shape_vec((r, k), data.to_vec()).expect("container checked size"))
        };
        let (_, origins) = c.f64("origins")?;
        let origins = origins.chunks_exact(2).map(|p| (p[0] as usize, p[1] as usize)).collect();
        let (_, counts) = c.f32("fg_counts")?;
        let tokens = Self {
            doc_id,
            origins,
            cls: matrix("cls")?,
            patch_tokens: matrix("patch_tokens")?,
            fg_counts: counts.iter().map(|&v| v as u32).collect(),
        };
        if tokens.fg_counts.len() != tokens.patch_tokens.nrows() || tokens.cls.nrows() != tokens.origins.len() {
            return Err(Error::DimensionMismatch("inconsistent token cache".into()));
        }
        Ok(tokens)
    }
}

/// Samples, filters and patchifies windows, then runs the ViT on each (in parallel).
pub fn extract_document_tokens(
    doc_id: &str,
    doc: &BinaryImage,
    vit: &Vit,
    params: &ExtractParams,
) -> Result<DocumentTokens> {
    let cfg = vit.config();
    if params.window != cfg.input_size {
        return Err(Error::DimensionMismatch(format!(
            "window size {} but the model expects {}",
            params.window, cfg.input_size
        )));
    }
    let windows = filter_windows(sample_windows(doc, params.window, params.stride)?, params.min_window_fg)?;
    let outputs = windows
        .par_iter()
        .map(|w| {
            let grid = patchify(w, cfg.patch_size)?;
            let seq = vit.forward(&grid)?;
            Ok((w.origin, seq, grid.fg_counts))
        })
        .collect::<Result<Vec<_>>>()?;

    let e = cfg.embed_dim;
    let mut cls = Array2::zeros((outputs.len(), e));
    let mut patch_tokens = Array2::zeros((outputs.len() * cfg.num_patches(), e));
    let mut fg_counts = Vec::with_capacity(outputs.len() * cfg.num_patches());
    let mut origins = Vec::with_capacity(outputs.len());
    let l = cfg.num_patches();
    for (i, (origin, seq, counts)) in outputs.into_iter().enumerate() {
        origins.push(origin);
        cls.row_mut(i).assign(&seq.cls);
        patch_tokens.slice_mut(ndarray::s![i * l..(i + 1) * l, ..]).assign(&seq.patch_tokens);
        fg_counts.extend(counts);
    }
    Ok(DocumentTokens { doc_id: doc_id.to_string(), origins, cls, patch_tokens, fg_counts })
}

/// Sum of rows (zero vector of width `dim` when there are none).
pub fn sum_pool(rows: &Array2<f64>) -> Array1<f64> {
    rows.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{VitConfig, VitWeights};

    fn tiny_vit() -> Vit {
        let cfg = VitConfig { patch_size: 4, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2, input_size: 8 };
        Vit::new(cfg, VitWeights::random(&cfg, 4, 0.5).unwrap()).unwrap()
    }

    #[test]
    fn extraction_matches_per_window_forward() {
        let vit = tiny_vit();
        let doc = BinaryImage::from_fn(16, 12, |x, y| (x * y + x) % 3 == 0).unwrap();
        let params = ExtractParams { window: 8, stride: 4, min_window_fg: 0.0 };
        let toks = extract_document_tokens("d", &doc, &vit, &params).unwrap();
        assert_eq!(toks.num_windows(), 3 * 2);
        assert_eq!(toks.patch_tokens.nrows(), 6 * 4);
        let w = &sample_windows(&doc, 8, 4).unwrap()[4];
        let seq = vit.forward(&patchify(w, 4).unwrap()).unwrap();
        assert_eq!(toks.cls.row(4), seq.cls);
        assert_eq!(toks.patch_tokens.slice(ndarray::s![16..20, ..]), seq.patch_tokens);
        assert_eq!(toks.foreground(0).nrows(), 24);
        assert_eq!(DocumentTokens::from_container(&toks.to_container().unwrap()).unwrap(), toks);
    }

    #[test]
    fn blank_document_has_no_windows() {
        let vit = tiny_vit();
        let doc = BinaryImage::zeros(16, 16).unwrap();
        let params = ExtractParams { window: 8, stride: 8, min_window_fg: 0.025 };
        let toks = extract_document_tokens("blank", &doc, &vit, &params).unwrap();
        assert_eq!(toks.num_windows(), 0);
        assert_eq!(toks.foreground(0).nrows(), 0);
    }

    #[test]
    fn window_must_match_model() {
        let vit = tiny_vit();
        let doc = BinaryImage::zeros(16, 16).unwrap();
        let params = ExtractParams { window: 16, stride: 8, min_window_fg: 0.0 };
        assert!(extract_document_tokens("d", &doc, &vit, &params).is_err());
    }
}
