//! Open-vocabulary inference over precomputed backbone features.
//!
//! Pipeline per image: per-window class similarity maps, optional
//! attention-guided background cleaning, averaging of overlapping windows at
//! patch resolution, one bilinear upsample to image size, optional PAMR, then
//! per-pixel argmax with an optional background threshold.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{self, cosine_similarity, Grid2D, Matrix};
use crate::projection::ProjectionParams;
use crate::refine::{self, PamrConfig, RgbImage};
use crate::sample::{AttentionStack, DenseFeatureMap, SampleRecord};
use crate::tensor_store::{Container, DType};
use crate::trainer;

pub const DEFAULT_LAMBDA: f32 = 5.0 / 6.0;
pub const DEFAULT_THRESHOLD: f32 = 0.55;
pub const DEFAULT_WINDOW_PX: usize = 448;
pub const DEFAULT_STRIDE_PX: usize = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    pub embedding: Vec<f32>,
    pub projected: Vec<f32>,
}

/// Foreground classes plus whether a background label is in play.
///
/// With `has_background`, masks reserve index `len()` for background.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
    has_background: bool,
}

impl ClassVocabulary {
    pub fn new(
        params: &ProjectionParams,
        classes: impl IntoIterator<Item = (String, Vec<f32>)>,
        has_background: bool,
    ) -> Result<Self> {
        let entries = classes
            .into_iter()
            .map(|(name, embedding)| {
                let projected = params.forward(&embedding)?;
                Ok(ClassEntry {
                    name,
                    embedding,
                    projected,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if entries.is_empty() {
            return Err(Error::Empty("vocabulary with no classes"));
        }
        Ok(ClassVocabulary {
            entries,
            has_background,
        })
    }

    /// Builds a vocabulary from class names, looking each up in `embeddings`
    /// under `template` (with `{}` replaced by the name), then under the raw name.
    pub fn from_names(
        params: &ProjectionParams,
        names: &[String],
        embeddings: &TextEmbeddings,
        template: &str,
        has_background: bool,
    ) -> Result<Self> {
        let classes = names
            .iter()
            .map(|name| {
                let key = template.replace("{}", name);
                embeddings
                    .get(&key)
                    .or_else(|| embeddings.get(name))
                    .map(|e| (name.clone(), e.to_vec()))
                    .ok_or_else(|| {
                        Error::MissingRecord(format!("text embedding for class `{key}`"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(params, classes, has_background)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_background(&self) -> bool {
        self.has_background
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }
}

/// Text-encoder outputs keyed by the encoded string.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextEmbeddings {
    order: Vec<String>,
    by_key: HashMap<String, Vec<f32>>,
}

impl TextEmbeddings {
    /// Every rank-1 float record is an embedding named by its key; other
    /// records (manifests) are ignored.
    pub fn from_container(c: &Container) -> Result<Self> {
        let mut out = TextEmbeddings::default();
        for rec in c.records() {
            if matches!(rec.dtype, DType::F32 | DType::F16) && rec.shape.len() == 1 {
                out.insert(rec.name.clone(), rec.to_f32()?);
            }
        }
        let mut dims = out.by_key.values().map(Vec::len);
        if let Some(d) = dims.next() {
            if dims.any(|x| x != d) {
                return Err(Error::InconsistentDataset(
                    "text embeddings differ in dimension".into(),
                ));
            }
        }
        Ok(out)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn insert(&mut self, key: String, embedding: Vec<f32>) {
        if self.by_key.insert(key.clone(), embedding).is_none() {
            self.order.push(key);
        }
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.by_key.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> &[String] {
        &self.order
    }
}

/// One score grid per class, all the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVolume {
    maps: Vec<Grid2D>,
}

impl SimilarityVolume {
    pub fn new(maps: Vec<Grid2D>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or(Error::Empty("similarity volume with no classes"))?;
        let dims = first.dims();
        if maps.iter().any(|m| m.dims() != dims) {
            return Err(Error::DimensionMismatch(
                "class maps differ in shape".into(),
            ));
        }
        Ok(SimilarityVolume { maps })
    }

    pub fn num_classes(&self) -> usize {
        self.maps.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.maps[0].dims()
    }

    pub fn maps(&self) -> &[Grid2D] {
        &self.maps
    }

    pub fn map(&self, j: usize) -> &Grid2D {
        &self.maps[j]
    }

    pub fn into_maps(self) -> Vec<Grid2D> {
        self.maps
    }

    pub fn global_min(&self) -> f32 {
        self.maps
            .iter()
            .map(Grid2D::min)
            .fold(f32::INFINITY, f32::min)
    }

    pub fn global_max(&self) -> f32 {
        self.maps
            .iter()
            .map(Grid2D::max)
            .fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Per-pixel class indices; `background` is `Some(M)` when thresholding was applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub background: Option<u32>,
}

/// Cosine of every patch against every projected class vector.
pub fn similarity_maps(
    features: &DenseFeatureMap,
    vocab: &ClassVocabulary,
) -> Result<SimilarityVolume> {
    let (h, w) = (features.height(), features.width());
    if let Some(e) = vocab.entries().first() {
        if e.projected.len() != features.dim() {
            return Err(Error::DimensionMismatch(format!(
                "class vectors have {} dims, features have {}",
                e.projected.len(),
                features.dim()
            )));
        }
    }
    let maps = vocab
        .entries()
        .iter()
        .map(|entry| {
            let mut values = Vec::with_capacity(h * w);
            for row in 0..h {
                for col in 0..w {
                    let s = cosine_similarity(features.patch(row, col), &entry.projected).map_err(
                        |e| match e {
                            Error::DegenerateVector
                                if math::l2_norm(features.patch(row, col)) == 0.0 =>
                            {
                                Error::DegeneratePatch { row, col }
                            }
                            other => other,
                        },
                    )?;
                    values.push(s);
                }
            }
            Grid2D::new(h, w, values)
        })
        .collect::<Result<Vec<_>>>()?;
    SimilarityVolume::new(maps)
}

/// M x N matrix of head-to-class relevance, softmax-normalized per class.
pub fn head_relevance(
    features: &DenseFeatureMap,
    attn: &AttentionStack,
    vocab: &ClassVocabulary,
) -> Result<Matrix> {
    let pooled = trainer::pool_all_heads(features, attn)?;
    let (m, n) = (vocab.len(), attn.num_heads());
    let mut raw = Matrix::zeros(m, n);
    for (j, entry) in vocab.entries().iter().enumerate() {
        for (i, p) in pooled.iter().enumerate() {
            raw.set(j, i, cosine_similarity(p, &entry.projected)?);
        }
    }
    Ok(math::row_softmax(&raw))
}

/// Relevance-weighted sum of the raw attention logit maps for class `j`.
pub fn class_attention(attn: &AttentionStack, relevance: &Matrix, j: usize) -> Result<Grid2D> {
    if j >= relevance.rows() {
        return Err(Error::InvalidParameter(format!(
            "class index {j} out of range for {} classes",
            relevance.rows()
        )));
    }
    if relevance.cols() != attn.num_heads() {
        return Err(Error::DimensionMismatch(format!(
            "relevance has {} columns, stack has {} heads",
            relevance.cols(),
            attn.num_heads()
        )));
    }
    let (h, w) = attn.dims();
    let mut out = vec![0.0f32; h * w];
    for (i, head) in attn.heads().iter().enumerate() {
        let weight = relevance.get(j, i);
        for (o, &v) in out.iter_mut().zip(head.values()) {
            *o += weight * v;
        }
    }
    Grid2D::new(h, w, out)
}

/// Spatial softmax, then affine remap onto the global range of the raw similarities.
pub fn normalize_class_attention(class_attn: &Grid2D, volume: &SimilarityVolume) -> Grid2D {
    let soft = math::spatial_softmax(class_attn);
    math::minmax_remap(&soft, volume.global_min(), volume.global_max())
}

/// Per-cell `lambda * S + (1 - lambda) * F`.
pub fn shape_similarity(
    volume: &SimilarityVolume,
    normalized: &[Grid2D],
    lambda: f32,
) -> Result<SimilarityVolume> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    if normalized.len() != volume.num_classes()
        || normalized.iter().any(|g| g.dims() != volume.dims())
    {
        return Err(Error::DimensionMismatch(
            "normalized attention does not match volume".into(),
        ));
    }
    if lambda == 1.0 {
        return Ok(volume.clone());
    }
    if lambda == 0.0 {
        return SimilarityVolume::new(normalized.to_vec());
    }
    let maps = volume
        .maps()
        .iter()
        .zip(normalized)
        .map(|(s, f)| {
            let values = s
                .values()
                .iter()
                .zip(f.values())
                .map(|(&sv, &fv)| lambda * sv + (1.0 - lambda) * fv)
                .collect();
            Grid2D::new(s.height(), s.width(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    SimilarityVolume::new(maps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOptions {
    pub background_cleaning: bool,
    pub lambda: f32,
    /// Pixels scoring below this for every class become background.
    /// Only honored when the vocabulary has a background label.
    pub threshold: f32,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            background_cleaning: false,
            lambda: DEFAULT_LAMBDA,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl SegmentOptions {
    pub fn effective_threshold(&self, vocab: &ClassVocabulary) -> Option<f32> {
        vocab.has_background().then_some(self.threshold)
    }
}

/// Patch-resolution scores for one window, background-cleaned when enabled.
pub fn segment_window(
    features: &DenseFeatureMap,
    attn: &AttentionStack,
    vocab: &ClassVocabulary,
    options: &SegmentOptions,
) -> Result<SimilarityVolume> {
    if attn.dims() != (features.height(), features.width()) {
        return Err(Error::DimensionMismatch(
            "attention and feature grids differ".into(),
        ));
    }
    let raw = similarity_maps(features, vocab)?;
    if !(options.background_cleaning && vocab.has_background()) {
        return Ok(raw);
    }
    if vocab.is_empty() {
        return Err(Error::Empty(
            "background cleaning without foreground classes",
        ));
    }
    let relevance = head_relevance(features, attn, vocab)?;
    let normalized = (0..vocab.len())
        .map(|j| {
            Ok(normalize_class_attention(
                &class_attention(attn, &relevance, j)?,
                &raw,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    shape_similarity(&raw, &normalized, options.lambda)
}

/// A window's placement on the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

fn axis_origins(len: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let window = window.min(len);
    let steps = (len - window).div_ceil(stride) + 1;
    (0..steps)
        .map(|k| {
            let end = (k * stride + window).min(len);
            (end - window, window)
        })
        .collect()
}

/// Sliding windows over a patch grid; the last window on each axis is
/// snapped so its far edge touches the border.
pub fn window_layout(
    grid: (usize, usize),
    window: usize,
    stride: usize,
) -> Result<Vec<WindowSpec>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidParameter(
            "window and stride must be positive".into(),
        ));
    }
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::Empty("window layout over an empty grid"));
    }
    let rows = axis_origins(grid.0, window, stride);
    let cols = axis_origins(grid.1, window, stride);
    Ok(rows
        .iter()
        .flat_map(|&(row, height)| {
            cols.iter().map(move |&(col, width)| WindowSpec {
                row,
                col,
                height,
                width,
            })
        })
        .collect())
}

/// Averages overlapping window volumes cell by cell (uniform weights).
pub fn stitch_windows(
    windows: &[((usize, usize), SimilarityVolume)],
    full: (usize, usize),
) -> Result<SimilarityVolume> {
    let m = windows
        .first()
        .map(|(_, v)| v.num_classes())
        .ok_or(Error::Empty("stitching with no windows"))?;
    let (h, w) = full;
    let mut sums = vec![vec![0.0f32; h * w]; m];
    let mut counts = vec![0u32; h * w];
    for ((row0, col0), vol) in windows {
        let (wh, ww) = vol.dims();
        if vol.num_classes() != m {
            return Err(Error::DimensionMismatch(
                "windows disagree on class count".into(),
            ));
        }
        if row0 + wh > h || col0 + ww > w {
            return Err(Error::DimensionMismatch(format!(
                "window {wh}x{ww} at ({row0},{col0}) exceeds {h}x{w}"
            )));
        }
        for r in 0..wh {
            for c in 0..ww {
                let idx = (row0 + r) * w + col0 + c;
                counts[idx] += 1;
                for (sum, map) in sums.iter_mut().zip(vol.maps()) {
                    sum[idx] += map.at(r, c);
                }
            }
        }
    }
    if let Some(idx) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Internal(format!(
            "cell ({}, {}) not covered by any window",
            idx / w,
            idx % w
        )));
    }
    let maps = sums
        .into_iter()
        .map(|sum| {
            let values = sum
                .iter()
                .zip(&counts)
                .map(|(&s, &n)| s / n as f32)
                .collect();
            Grid2D::new(h, w, values)
        })
        .collect::<Result<Vec<_>>>()?;
    SimilarityVolume::new(maps)
}

pub fn upsample_volume(
    volume: &SimilarityVolume,
    height: usize,
    width: usize,
) -> Result<SimilarityVolume> {
    let maps = volume
        .maps()
        .par_iter()
        .map(|g| math::bilinear_upsample(g, height, width))
        .collect::<Result<Vec<_>>>()?;
    SimilarityVolume::new(maps)
}

/// Per-pixel argmax (lowest index on ties), with background where every
/// class scores below `threshold`.
pub fn assign_labels(
    volume: &SimilarityVolume,
    threshold: Option<f32>,
) -> Result<SegmentationMask> {
    let (h, w) = volume.dims();
    let m = volume.num_classes();
    let mut scores = vec![0.0f32; m];
    let mut labels = Vec::with_capacity(h * w);
    for idx in 0..h * w {
        for (s, map) in scores.iter_mut().zip(volume.maps()) {
            *s = map.values()[idx];
        }
        let label = match threshold {
            Some(t) if scores.iter().all(|&s| s < t) => m as u32,
            _ => math::argmax_with_tiebreak(&scores)? as u32,
        };
        labels.push(label);
    }
    Ok(SegmentationMask {
        height: h,
        width: w,
        labels,
        num_classes: m,
        background: threshold.map(|_| m as u32),
    })
}

pub fn finalize_mask(
    volume: &SimilarityVolume,
    height: usize,
    width: usize,
    threshold: Option<f32>,
) -> Result<SegmentationMask> {
    assign_labels(&upsample_volume(volume, height, width)?, threshold)
}

/// Image-text score: best cosine over all heads' pooled embeddings.
pub fn score_image_text(
    features: &DenseFeatureMap,
    attn: &AttentionStack,
    params: &ProjectionParams,
    text: &[f32],
) -> Result<f32> {
    let sims = trainer::head_similarities(features, attn, params, text)?;
    Ok(sims.into_iter().fold(f32::NEG_INFINITY, f32::max))
}

/// Mean of the per-head pooled embeddings.
pub fn global_image_embedding(
    features: &DenseFeatureMap,
    attn: &AttentionStack,
) -> Result<Vec<f32>> {
    trainer::mean_of_heads(features, attn)
}

/// Baseline retrieval score: cosine of the global embedding with the projected text.
pub fn score_image_text_global(
    features: &DenseFeatureMap,
    attn: &AttentionStack,
    params: &ProjectionParams,
    text: &[f32],
) -> Result<f32> {
    cosine_similarity(
        &global_image_embedding(features, attn)?,
        &params.forward(text)?,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOptions {
    pub segment: SegmentOptions,
    pub window_px: usize,
    pub stride_px: usize,
    pub refinement: Option<PamrConfig>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            segment: SegmentOptions::default(),
            window_px: DEFAULT_WINDOW_PX,
            stride_px: DEFAULT_STRIDE_PX,
            refinement: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub mask: SegmentationMask,
    /// Stitched patch-resolution volume, before upsampling.
    pub patch_volume: SimilarityVolume,
    pub windows: Vec<WindowSpec>,
}

/// Immutable params + vocabulary + options; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Engine {
    params: ProjectionParams,
    vocab: ClassVocabulary,
    options: EngineOptions,
}

impl Engine {
    pub fn new(
        params: ProjectionParams,
        vocab: ClassVocabulary,
        options: EngineOptions,
    ) -> Result<Self> {
        if let Some(e) = vocab.entries().first() {
            if e.projected.len() != params.visual_dim() {
                return Err(Error::DimensionMismatch(
                    "vocabulary was projected with other params".into(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&options.segment.lambda) {
            return Err(Error::InvalidParameter(format!(
                "lambda {} outside [0, 1]",
                options.segment.lambda
            )));
        }
        Ok(Engine {
            params,
            vocab,
            options,
        })
    }

    pub fn params(&self) -> &ProjectionParams {
        &self.params
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    /// Window size and stride in patches.
    pub fn window_patches(&self, patch_size: usize) -> Result<(usize, usize)> {
        if patch_size == 0 {
            return Err(Error::InvalidParameter(
                "patch size must be positive".into(),
            ));
        }
        let window = self.options.window_px / patch_size;
        let stride = self.options.stride_px / patch_size;
        if window == 0 || stride == 0 {
            return Err(Error::InvalidParameter(format!(
                "window {} / stride {} px smaller than patch size {patch_size}",
                self.options.window_px, self.options.stride_px
            )));
        }
        Ok((window, stride))
    }

    /// Stitched patch-resolution volume for a sample.
    ///
    /// Uses the sample's exported windows when present, otherwise crops
    /// windows out of the full-image grid.
    pub fn patch_volume(
        &self,
        sample: &SampleRecord,
    ) -> Result<(SimilarityVolume, Vec<WindowSpec>)> {
        let grid = (sample.features.height(), sample.features.width());
        let opts = &self.options.segment;
        let per_window: Vec<((usize, usize), SimilarityVolume, WindowSpec)> =
            if sample.windows.is_empty() {
                let (window, stride) = self.window_patches(sample.patch_size)?;
                window_layout(grid, window, stride)?
                    .par_iter()
                    .map(|spec| {
                        let f =
                            sample
                                .features
                                .crop(spec.row, spec.col, spec.height, spec.width)?;
                        let a = sample
                            .attn
                            .crop(spec.row, spec.col, spec.height, spec.width)?;
                        let vol = segment_window(&f, &a, &self.vocab, opts)?;
                        Ok(((spec.row, spec.col), vol, *spec))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                sample
                    .windows
                    .par_iter()
                    .map(|w| {
                        let vol = segment_window(&w.features, &w.attn, &self.vocab, opts)?;
                        let spec = WindowSpec {
                            row: w.origin.0,
                            col: w.origin.1,
                            height: w.features.height(),
                            width: w.features.width(),
                        };
                        Ok((w.origin, vol, spec))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
        let specs = per_window.iter().map(|(_, _, s)| *s).collect();
        let volumes: Vec<_> = per_window.into_iter().map(|(o, v, _)| (o, v)).collect();
        Ok((stitch_windows(&volumes, grid)?, specs))
    }

    /// Full-resolution score volume (after optional refinement), before labeling.
    pub fn pixel_volume(
        &self,
        patch_volume: &SimilarityVolume,
        size: (usize, usize),
        image: Option<&RgbImage>,
    ) -> Result<SimilarityVolume> {
        let up = upsample_volume(patch_volume, size.0, size.1)?;
        match (&self.options.refinement, image) {
            (Some(cfg), Some(img)) => {
                if (img.height(), img.width()) != size {
                    return Err(Error::DimensionMismatch(format!(
                        "refinement image is {}x{}, mask is {}x{}",
                        img.height(),
                        img.width(),
                        size.0,
                        size.1
                    )));
                }
                let affinity = refine::compute_affinity(img, cfg)?;
                SimilarityVolume::new(refine::refine(up.maps(), &affinity, cfg.iterations)?)
            }
            (Some(_), None) => Err(Error::InvalidParameter(
                "mask refinement needs the RGB image".into(),
            )),
            (None, _) => Ok(up),
        }
    }

    pub fn segment(
        &self,
        sample: &SampleRecord,
        image: Option<&RgbImage>,
    ) -> Result<SegmentationOutput> {
        let (patch_volume, windows) = self.patch_volume(sample)?;
        let pixels = self.pixel_volume(&patch_volume, sample.image_size, image)?;
        let mask = assign_labels(
            &pixels,
            self.options.segment.effective_threshold(&self.vocab),
        )?;
        Ok(SegmentationOutput {
            mask,
            patch_volume,
            windows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ProjectionMode;

    fn identity_params(d: usize) -> ProjectionParams {
        let mut eye = Matrix::zeros(d, d);
        for i in 0..d {
            eye.set(i, i, 1.0);
        }
        ProjectionParams {
            w_a: eye,
            b_a: vec![0.0; d],
            w_b: Matrix::zeros(d, d),
            b_b: vec![0.0; d],
            mode: ProjectionMode::Linear,
        }
    }

    fn vocab(classes: &[&[f32]], bg: bool) -> ClassVocabulary {
        let d = classes[0].len();
        ClassVocabulary::new(
            &identity_params(d),
            classes
                .iter()
                .enumerate()
                .map(|(i, c)| (format!("c{i}"), c.to_vec())),
            bg,
        )
        .unwrap()
    }

    fn grid(h: usize, w: usize, v: &[f32]) -> Grid2D {
        Grid2D::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn similarity_maps_hit_one_and_zero() {
        let f = DenseFeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let v = vocab(&[&[1.0, 0.0]], false);
        let s = similarity_maps(&f, &v).unwrap();
        assert_eq!(s.map(0).values(), &[1.0, 0.0]);
    }

    #[test]
    fn degenerate_patch_reports_coordinates() {
        let f = DenseFeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let err = similarity_maps(&f, &vocab(&[&[1.0, 1.0]], false)).unwrap_err();
        assert!(matches!(err, Error::DegeneratePatch { row: 0, col: 1 }));
    }

    #[test]
    fn relevance_single_head_and_identical_heads() {
        let f = DenseFeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.5, 1.0]).unwrap();
        let v = vocab(&[&[1.0, 0.0], &[0.0, 1.0]], true);
        let one = AttentionStack::new(vec![grid(1, 2, &[0.3, 0.1])]).unwrap();
        let r = head_relevance(&f, &one, &v).unwrap();
        assert_eq!(r.data(), &[1.0, 1.0]);
        let two =
            AttentionStack::new(vec![grid(1, 2, &[0.3, 0.1]), grid(1, 2, &[0.3, 0.1])]).unwrap();
        let r = head_relevance(&f, &two, &v).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn class_attention_examples() {
        let attn = AttentionStack::new(vec![grid(1, 1, &[0.0]), grid(1, 1, &[2.0])]).unwrap();
        let half = Matrix::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(class_attention(&attn, &half, 0).unwrap().values(), &[1.0]);
        let onehot = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(class_attention(&attn, &onehot, 0).unwrap(), *attn.head(1));
        assert!(class_attention(&attn, &onehot, 1).is_err());
    }

    #[test]
    fn normalize_constant_attention_hits_midpoint() {
        let vol = SimilarityVolume::new(vec![grid(1, 2, &[0.1, 0.9])]).unwrap();
        let n = normalize_class_attention(&grid(2, 2, &[3.0; 4]), &vol);
        assert!(n.values().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn normalize_peaked_attention_spans_range() {
        let vol =
            SimilarityVolume::new(vec![grid(1, 2, &[0.1, 0.3]), grid(1, 2, &[-0.2, 0.9])]).unwrap();
        let n = normalize_class_attention(&grid(1, 3, &[1e4, 0.0, 0.0]), &vol);
        assert_eq!(n.values()[0], 0.9);
        assert_eq!(&n.values()[1..], &[-0.2, -0.2]);
    }

    #[test]
    fn shape_similarity_examples() {
        let vol = SimilarityVolume::new(vec![grid(1, 1, &[0.6])]).unwrap();
        let f = vec![grid(1, 1, &[0.0])];
        let s = shape_similarity(&vol, &f, 5.0 / 6.0).unwrap();
        assert!((s.map(0).values()[0] - 0.5).abs() < 1e-6);
        assert_eq!(shape_similarity(&vol, &f, 1.0).unwrap(), vol);
        assert_eq!(shape_similarity(&vol, &f, 0.0).unwrap().map(0), &f[0]);
        assert!(shape_similarity(&vol, &f, 1.5).is_err());
    }

    #[test]
    fn window_layout_snaps_last_window() {
        // 32x48 patches, window 32, stride 16 -> cols 0, 16
        let w = window_layout((32, 48), 32, 16).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!((w[1].row, w[1].col), (0, 16));
        // 32x50: cols 0, 16, 18 (snapped)
        let w = window_layout((32, 50), 32, 16).unwrap();
        let cols: Vec<_> = w.iter().map(|s| s.col).collect();
        assert_eq!(cols, vec![0, 16, 18]);
        // grid smaller than the window: one clipped window
        let w = window_layout((10, 12), 32, 16).unwrap();
        assert_eq!(
            w,
            vec![WindowSpec {
                row: 0,
                col: 0,
                height: 10,
                width: 12
            }]
        );
    }

    #[test]
    fn stitch_averages_overlap() {
        let a = SimilarityVolume::new(vec![grid(1, 2, &[0.0, 0.0])]).unwrap();
        let b = SimilarityVolume::new(vec![grid(1, 2, &[1.0, 1.0])]).unwrap();
        let s = stitch_windows(&[((0, 0), a.clone()), ((0, 1), b)], (1, 3)).unwrap();
        assert_eq!(s.map(0).values(), &[0.0, 0.5, 1.0]);
        assert_eq!(stitch_windows(&[((0, 0), a.clone())], (1, 2)).unwrap(), a);
        assert!(matches!(
            stitch_windows(&[((0, 0), a)], (1, 3)),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn finalize_thresholds() {
        let vol = SimilarityVolume::new(vec![grid(1, 1, &[0.9])]).unwrap();
        let m = finalize_mask(&vol, 2, 2, Some(0.55)).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
        let vol = SimilarityVolume::new(vec![grid(1, 1, &[0.0]), grid(1, 1, &[0.0])]).unwrap();
        let m = finalize_mask(&vol, 2, 2, Some(0.55)).unwrap();
        assert!(m.labels.iter().all(|&l| l == 2));
        assert_eq!(m.background, Some(2));
    }

    #[test]
    fn finalize_crafted_two_class() {
        // Same-size target: no interpolation, argmax per cell with ties to class 0.
        let vol = SimilarityVolume::new(vec![
            grid(2, 2, &[0.9, 0.1, 0.5, 0.2]),
            grid(2, 2, &[0.3, 0.8, 0.5, 0.7]),
        ])
        .unwrap();
        assert_eq!(
            finalize_mask(&vol, 2, 2, None).unwrap().labels,
            vec![0, 1, 0, 1]
        );
        // With threshold 0.55 the tied 0.5 cell falls to background.
        assert_eq!(
            finalize_mask(&vol, 2, 2, Some(0.55)).unwrap().labels,
            vec![0, 1, 2, 1]
        );
    }

    #[test]
    fn text_embeddings_skip_non_vectors() {
        use crate::tensor_store::TensorRecord;
        let c = Container::new(vec![
            TensorRecord::from_f32("dog", vec![2], &[1.0, 0.0]).unwrap(),
            TensorRecord::from_str("manifest", "{}").unwrap(),
        ]);
        let t = TextEmbeddings::from_container(&c).unwrap();
        assert_eq!(t.keys(), &["dog".to_string()]);
    }

    #[test]
    fn vocabulary_uses_template_then_raw_name() {
        let mut t = TextEmbeddings::default();
        t.insert("a photo of a dog.".into(), vec![1.0, 0.0]);
        t.insert("cat".into(), vec![0.0, 1.0]);
        let names = vec!["dog".to_string(), "cat".to_string()];
        let v =
            ClassVocabulary::from_names(&identity_params(2), &names, &t, "a photo of a {}.", false)
                .unwrap();
        assert_eq!(v.entries()[0].projected, vec![1.0, 0.0]);
        assert_eq!(v.entries()[1].projected, vec![0.0, 1.0]);
        let missing = vec!["bird".to_string()];
        assert!(
            ClassVocabulary::from_names(&identity_params(2), &missing, &t, "{}", false).is_err()
        );
    }
}
