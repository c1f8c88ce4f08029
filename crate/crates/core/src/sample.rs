//! Per-image sample containers: dense patch features, per-head CLS attention
//! logits, captions and geometry.
//!
//! Record names inside a `.t2d` sample container:
//!
//! | name                     | dtype    | shape        |
//! |--------------------------|----------|--------------|
//! | `image_id`               | u8 text  | `[len]`      |
//! | `features`               | f32/f16  | `[h, w, D_v]`|
//! | `attn_logits`            | f32/f16  | `[N, h, w]`  |
//! | `image_size`             | i32      | `[2]` (H, W) |
//! | `resized_size`           | i32      | `[2]`        |
//! | `patch_size`             | i32      | `[1]`        |
//! | `caption/{k}/text`       | u8 text  | `[len]`      |
//! | `caption/{k}/embedding`  | f32/f16  | `[D_t]`      |
//! | `window/{k}/origin`      | i32      | `[2]` patches|
//! | `window/{k}/features`    | f32/f16  | `[h', w', D_v]` |
//! | `window/{k}/attn_logits` | f32/f16  | `[N, h', w']`|
//! | `cls_embedding`          | f32/f16  | `[D_v]`      |
//! | `manifest`               | u8 text  | `[len]`      |
//!
//! Only `features`, `attn_logits`, `image_size` and `patch_size` are required.

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{Grid2D, Scalar};
use crate::tensor_store::{self, Container, TensorRecord};

/// Patch grid of backbone embeddings, row-major `[height, width, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap<F = f32> {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<F>,
}

impl<F: Scalar> DenseFeatureMap<F> {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<F>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "feature map dims must be positive, got {height}x{width}x{dim}"
            )));
        }
        if data.len() != height * width * dim {
            return Err(Error::DimensionMismatch(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        Ok(DenseFeatureMap {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn patch(&self, row: usize, col: usize) -> &[F] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Patch by flat cell index.
    pub fn cell(&self, idx: usize) -> &[F] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::DimensionMismatch(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{} feature map",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.dim);
        for r in row..row + h {
            let start = (r * self.width + col) * self.dim;
            data.extend_from_slice(&self.data[start..start + w * self.dim]);
        }
        DenseFeatureMap::new(h, w, self.dim, data)
    }

    pub fn cast<G: Scalar>(&self) -> DenseFeatureMap<G> {
        DenseFeatureMap {
            height: self.height,
            width: self.width,
            dim: self.dim,
            data: self.data.iter().map(|v| G::from(*v).unwrap()).collect(),
        }
    }
}

/// The N per-head attention logit maps over one patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<F = f32> {
    heads: Vec<Grid2D<F>>,
}

impl<F: Scalar> AttentionStack<F> {
    pub fn new(heads: Vec<Grid2D<F>>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or(Error::Empty("attention stack with no heads"))?;
        let dims = first.dims();
        if heads.iter().any(|h| h.dims() != dims) {
            return Err(Error::DimensionMismatch(
                "attention heads differ in shape".into(),
            ));
        }
        Ok(AttentionStack { heads })
    }

    /// From a flat `[N, h, w]` buffer.
    pub fn from_flat(n: usize, height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != n * height * width {
            return Err(Error::DimensionMismatch(format!(
                "attention stack {n}x{height}x{width} needs {} values, got {}",
                n * height * width,
                data.len()
            )));
        }
        let cells = height * width;
        let heads = (0..n)
            .map(|i| Grid2D::new(height, width, data[i * cells..(i + 1) * cells].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(heads)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.heads[0].dims()
    }

    pub fn heads(&self) -> &[Grid2D<F>] {
        &self.heads
    }

    pub fn head(&self, i: usize) -> &Grid2D<F> {
        &self.heads[i]
    }

    pub fn flat(&self) -> Vec<F> {
        self.heads
            .iter()
            .flat_map(|h| h.values().iter().copied())
            .collect()
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        let heads = self
            .heads
            .iter()
            .map(|g| g.crop(row, col, h, w))
            .collect::<Result<Vec<_>>>()?;
        Self::new(heads)
    }

    pub fn cast<G: Scalar>(&self) -> AttentionStack<G> {
        AttentionStack {
            heads: self
                .heads
                .iter()
                .map(|g| {
                    Grid2D::new(
                        g.height(),
                        g.width(),
                        g.values().iter().map(|v| G::from(*v).unwrap()).collect(),
                    )
                    .unwrap()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub text: String,
    pub embedding: Vec<f32>,
}

/// Backbone outputs for one inference window, origin in patch units.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFeatures {
    pub origin: (usize, usize),
    pub features: DenseFeatureMap,
    pub attn: AttentionStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_id: String,
    pub features: DenseFeatureMap,
    pub attn: AttentionStack,
    pub captions: Vec<Caption>,
    /// Original image size (H, W) in pixels; masks are produced at this size.
    pub image_size: (usize, usize),
    /// Size the backbone saw after resizing; the patch grid is `resized / patch_size`.
    pub resized_size: (usize, usize),
    pub patch_size: usize,
    pub windows: Vec<WindowFeatures>,
    pub cls_embedding: Option<Vec<f32>>,
    pub manifest: Option<String>,
}

impl SampleRecord {
    pub fn visual_dim(&self) -> usize {
        self.features.dim()
    }

    pub fn num_heads(&self) -> usize {
        self.attn.num_heads()
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.captions.first().map(|c| c.embedding.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord {
            name: self.image_id.clone(),
            reason,
        };
        if self.patch_size == 0 {
            return Err(bad("patch size must be positive".into()));
        }
        let (rh, rw) = self.resized_size;
        let expect = (rh / self.patch_size, rw / self.patch_size);
        let grid = (self.features.height(), self.features.width());
        if grid != expect {
            return Err(bad(format!(
                "feature grid {grid:?} does not match resized size {:?} / patch {}",
                self.resized_size, self.patch_size
            )));
        }
        if self.attn.dims() != grid {
            return Err(bad(format!(
                "attention grid {:?} does not match feature grid {grid:?}",
                self.attn.dims()
            )));
        }
        if let Some(dt) = self.text_dim() {
            if self.captions.iter().any(|c| c.embedding.len() != dt) {
                return Err(bad("caption embeddings differ in dimension".into()));
            }
        }
        for (k, w) in self.windows.iter().enumerate() {
            if w.attn.dims() != (w.features.height(), w.features.width())
                || w.features.dim() != self.features.dim()
                || w.attn.num_heads() != self.attn.num_heads()
            {
                return Err(bad(format!("window {k} shapes inconsistent with sample")));
            }
            if w.origin.0 + w.features.height() > grid.0 || w.origin.1 + w.features.width() > grid.1
            {
                return Err(bad(format!("window {k} extends past the patch grid")));
            }
        }
        if let Some(cls) = &self.cls_embedding {
            if cls.len() != self.features.dim() {
                return Err(bad("cls embedding dimension differs from features".into()));
            }
        }
        Ok(())
    }

    pub fn to_records(&self, features_as_f16: bool) -> Result<Vec<TensorRecord>> {
        self.validate()?;
        let feat = |name: String, f: &DenseFeatureMap| {
            let shape = vec![f.height(), f.width(), f.dim()];
            if features_as_f16 {
                TensorRecord::from_f32_as_f16(name, shape, f.data())
            } else {
                TensorRecord::from_f32(name, shape, f.data())
            }
        };
        let attn = |name: String, a: &AttentionStack| {
            let (h, w) = a.dims();
            TensorRecord::from_f32(name, vec![a.num_heads(), h, w], &a.flat())
        };
        let pair = |name: &str, v: (usize, usize)| {
            TensorRecord::from_i32(name, vec![2], &[v.0 as i32, v.1 as i32])
        };

        let mut records = vec![
            TensorRecord::from_str("image_id", &self.image_id)?,
            feat("features".into(), &self.features)?,
            attn("attn_logits".into(), &self.attn)?,
            pair("image_size", self.image_size)?,
            pair("resized_size", self.resized_size)?,
            TensorRecord::from_i32("patch_size", vec![1], &[self.patch_size as i32])?,
        ];
        for (k, c) in self.captions.iter().enumerate() {
            records.push(TensorRecord::from_str(
                format!("caption/{k}/text"),
                &c.text,
            )?);
            records.push(TensorRecord::from_f32(
                format!("caption/{k}/embedding"),
                vec![c.embedding.len()],
                &c.embedding,
            )?);
        }
        for (k, w) in self.windows.iter().enumerate() {
            records.push(pair(&format!("window/{k}/origin"), w.origin)?);
            records.push(feat(format!("window/{k}/features"), &w.features)?);
            records.push(attn(format!("window/{k}/attn_logits"), &w.attn)?);
        }
        if let Some(cls) = &self.cls_embedding {
            records.push(TensorRecord::from_f32(
                "cls_embedding",
                vec![cls.len()],
                cls,
            )?);
        }
        if let Some(m) = &self.manifest {
            records.push(TensorRecord::from_str("manifest", m)?);
        }
        Ok(records)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let features = read_features(c.require("features")?)?;
        let attn = read_attention(c.require("attn_logits")?)?;
        let image_size = read_pair(c.require("image_size")?)?;
        let resized_size = match c.get("resized_size") {
            Some(r) => read_pair(r)?,
            None => image_size,
        };
        let patch = c.require("patch_size")?.to_i32()?;
        let patch_size = patch
            .first()
            .and_then(|&p| usize::try_from(p).ok())
            .ok_or_else(|| Error::InvalidRecord {
                name: "patch_size".into(),
                reason: "expected one non-negative value".into(),
            })?;
        let image_id = match c.get("image_id") {
            Some(r) => r.to_text()?,
            None => String::new(),
        };

        let mut captions = Vec::new();
        while let Some(emb) = c.get(&format!("caption/{}/embedding", captions.len())) {
            let k = captions.len();
            let text = match c.get(&format!("caption/{k}/text")) {
                Some(t) => t.to_text()?,
                None => String::new(),
            };
            captions.push(Caption {
                text,
                embedding: read_vector(emb)?,
            });
        }

        let mut windows = Vec::new();
        while let Some(origin) = c.get(&format!("window/{}/origin", windows.len())) {
            let k = windows.len();
            windows.push(WindowFeatures {
                origin: read_pair(origin)?,
                features: read_features(c.require(&format!("window/{k}/features"))?)?,
                attn: read_attention(c.require(&format!("window/{k}/attn_logits"))?)?,
            });
        }

        let sample = SampleRecord {
            image_id,
            features,
            attn,
            captions,
            image_size,
            resized_size,
            patch_size,
            windows,
            cls_embedding: c.get("cls_embedding").map(read_vector).transpose()?,
            manifest: c.get("manifest").map(TensorRecord::to_text).transpose()?,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>, features_as_f16: bool) -> Result<()> {
        tensor_store::write_container(path, &self.to_records(features_as_f16)?)
    }
}

fn shape_error(rec: &TensorRecord, expected: &str) -> Error {
    Error::InvalidRecord {
        name: rec.name.clone(),
        reason: format!("expected shape {expected}, found {:?}", rec.shape),
    }
}

fn read_features(rec: &TensorRecord) -> Result<DenseFeatureMap> {
    match rec.shape[..] {
        [h, w, d] => DenseFeatureMap::new(h, w, d, rec.to_f32()?),
        _ => Err(shape_error(rec, "[h, w, D_v]")),
    }
}

fn read_attention(rec: &TensorRecord) -> Result<AttentionStack> {
    match rec.shape[..] {
        [n, h, w] => AttentionStack::from_flat(n, h, w, rec.to_f32()?),
        _ => Err(shape_error(rec, "[N, h, w]")),
    }
}

fn read_vector(rec: &TensorRecord) -> Result<Vec<f32>> {
    match rec.shape[..] {
        [_] => rec.to_f32(),
        _ => Err(shape_error(rec, "[D]")),
    }
}

fn read_pair(rec: &TensorRecord) -> Result<(usize, usize)> {
    let v = rec.to_i32()?;
    match v[..] {
        [a, b] if a >= 0 && b >= 0 => Ok((a as usize, b as usize)),
        _ => Err(shape_error(rec, "[2] non-negative")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_sample() -> SampleRecord {
        let features =
            DenseFeatureMap::new(2, 3, 2, (0..12).map(|v| v as f32 * 0.5).collect()).unwrap();
        let attn = AttentionStack::from_flat(2, 2, 3, (0..12).map(|v| v as f32).collect()).unwrap();
        SampleRecord {
            image_id: "img".into(),
            features: features.clone(),
            attn: attn.clone(),
            captions: vec![Caption {
                text: "a cat".into(),
                embedding: vec![0.1, 0.2, 0.3],
            }],
            image_size: (28, 42),
            resized_size: (28, 42),
            patch_size: 14,
            windows: vec![WindowFeatures {
                origin: (0, 1),
                features: features.crop(0, 1, 2, 2).unwrap(),
                attn: attn.crop(0, 1, 2, 2).unwrap(),
            }],
            cls_embedding: None,
            manifest: Some("{}".into()),
        }
    }

    #[test]
    fn sample_round_trip() {
        let s = tiny_sample();
        let c = Container::new(s.to_records(false).unwrap());
        assert_eq!(SampleRecord::from_container(&c).unwrap(), s);
    }

    #[test]
    fn grid_must_match_resized_size() {
        let mut s = tiny_sample();
        s.resized_size = (42, 42);
        assert!(s.validate().is_err());
    }

    #[test]
    fn caption_dims_must_agree() {
        let mut s = tiny_sample();
        s.captions.push(Caption {
            text: "b".into(),
            embedding: vec![1.0],
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn f16_features_widen() {
        let s = tiny_sample();
        let c = Container::new(s.to_records(true).unwrap());
        let back = SampleRecord::from_container(&c).unwrap();
        // Multiples of 0.5 below 8 are exact in half precision.
        assert_eq!(back.features, s.features);
    }
}
