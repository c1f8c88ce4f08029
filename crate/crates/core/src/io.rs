//! PNG/JPEG helpers: RGB loading, 8-bit index masks, palette overlays.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::SegmentationMask;
use crate::error::{Error, Result};
use crate::refine::RgbImage;

const PALETTE_SEED: u64 = 0x7a1e_77e5;

/// Fixed 256-entry color table; entry 0 is black.
pub fn palette() -> [[u8; 3]; 256] {
    let mut rng = ChaCha8Rng::seed_from_u64(PALETTE_SEED);
    let mut table = [[0u8; 3]; 256];
    for entry in table.iter_mut().skip(1) {
        *entry = [rng.gen(), rng.gen(), rng.gen()];
    }
    table
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads an image as RGB in [0, 1], resized (bilinear) to `size` when given.
pub fn load_rgb(path: impl AsRef<Path>, size: Option<(usize, usize)>) -> Result<RgbImage> {
    let path = path.as_ref();
    let mut img = image::open(path).map_err(image_err(path))?.to_rgb8();
    if let Some((h, w)) = size {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            img = image::imageops::resize(
                &img,
                w as u32,
                h as u32,
                image::imageops::FilterType::Triangle,
            );
        }
    }
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    RgbImage::new(h as usize, w as usize, data)
}

pub fn load_index_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u32>)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(image_err(path))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::InvalidParameter(format!(
                "{}: annotation must be a single-channel 8-bit PNG, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    Ok((
        h as usize,
        w as usize,
        gray.into_raw().into_iter().map(u32::from).collect(),
    ))
}

pub fn mask_to_gray(height: usize, width: usize, labels: &[u32]) -> Result<GrayImage> {
    let bytes = labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| {
                Error::InvalidParameter(format!("label {l} does not fit an 8-bit PNG"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::DimensionMismatch("mask buffer size".into()))
}

pub fn save_index_mask(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    labels: &[u32],
) -> Result<()> {
    let path = path.as_ref();
    mask_to_gray(height, width, labels)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

/// Blends palette colors over the image (`alpha` = mask opacity); without an
/// image the palette colors are written as-is.
pub fn render_overlay(
    mask: &SegmentationMask,
    image: Option<&RgbImage>,
    alpha: f32,
) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let table = palette();
    let mut out = ImageBuffer::new(mask.width as u32, mask.height as u32);
    for (idx, &label) in mask.labels.iter().enumerate() {
        let (row, col) = (idx / mask.width, idx % mask.width);
        // Background draws as black in the overlay.
        let color = if Some(label) == mask.background {
            [0u8; 3]
        } else {
            table[(label as usize + 1) % 256]
        };
        let px = match image {
            Some(img) => {
                let base = img.pixel(row, col);
                let mut rgb = [0u8; 3];
                for ch in 0..3 {
                    let v = (1.0 - alpha) * base[ch] * 255.0 + alpha * color[ch] as f32;
                    rgb[ch] = v.round().clamp(0.0, 255.0) as u8;
                }
                rgb
            }
            None => color,
        };
        out.put_pixel(col as u32, row as u32, Rgb(px));
    }
    Ok(out)
}

pub fn save_rgb(path: impl AsRef<Path>, img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Result<()> {
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

pub fn save_rgb_image(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let bytes = img
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::DimensionMismatch("image buffer size".into()))?;
    save_rgb(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_fixed() {
        assert_eq!(palette(), palette());
        assert_eq!(palette()[0], [0, 0, 0]);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let labels = vec![0, 1, 2, 255, 3, 4];
        save_index_mask(&path, 2, 3, &labels).unwrap();
        assert_eq!(load_index_mask(&path).unwrap(), (2, 3, labels));
    }

    #[test]
    fn oversized_label_rejected() {
        assert!(mask_to_gray(1, 1, &[256]).is_err());
    }
}
