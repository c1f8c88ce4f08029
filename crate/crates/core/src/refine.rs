//! Pixel-adaptive mask refinement (PAMR).
//!
//! Each pixel's class scores are repeatedly replaced by an affinity-weighted
//! average over dilated 8-neighborhoods. Affinities come from color
//! distances normalized by their per-pixel spread, so averaging stays within
//! regions of similar color.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Grid2D;

pub const DEFAULT_DILATIONS: [usize; 6] = [1, 2, 4, 8, 12, 24];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PamrConfig {
    pub iterations: usize,
    pub dilations: Vec<usize>,
    pub sigma_floor: f32,
    /// Multiplies the per-pixel spread in the kernel `exp(-d / (scale * sigma))`.
    pub kernel_scale: f32,
}

impl Default for PamrConfig {
    fn default() -> Self {
        PamrConfig {
            iterations: 10,
            dilations: DEFAULT_DILATIONS.to_vec(),
            sigma_floor: 1e-4,
            kernel_scale: 0.1,
        }
    }
}

/// RGB image with channels in [0, 1], row-major `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("image must be at least 1x1".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite pixel value".into()));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * 3;
        &self.data[i..i + 3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Neighbor offsets `(dy, dx)`: the 8-neighborhood at every dilation.
pub fn neighbor_offsets(dilations: &[usize]) -> Vec<(isize, isize)> {
    let mut out = Vec::with_capacity(dilations.len() * 8);
    for &d in dilations {
        let d = d as isize;
        for (dy, dx) in [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ] {
            out.push((dy * d, dx * d));
        }
    }
    out
}

/// Per-pixel neighbor weights. Slot `offsets.len()` is the pixel itself,
/// used only when no neighbor is in bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    height: usize,
    width: usize,
    offsets: Vec<(isize, isize)>,
    weights: Vec<f32>,
}

impl AffinityField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    fn slots(&self) -> usize {
        self.offsets.len() + 1
    }

    /// Weights of pixel (row, col): one per offset, then the self weight.
    pub fn weights(&self, row: usize, col: usize) -> &[f32] {
        let k = self.slots();
        let i = (row * self.width + col) * k;
        &self.weights[i..i + k]
    }

    fn neighbor(&self, row: usize, col: usize, slot: usize) -> Option<(usize, usize)> {
        match self.offsets.get(slot) {
            None => Some((row, col)),
            Some(&(dy, dx)) => {
                let r = row as isize + dy;
                let c = col as isize + dx;
                (r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width)
                    .then_some((r as usize, c as usize))
            }
        }
    }
}

pub fn compute_affinity(image: &RgbImage, config: &PamrConfig) -> Result<AffinityField> {
    if config.kernel_scale <= 0.0 || config.sigma_floor <= 0.0 {
        return Err(Error::InvalidParameter(
            "PAMR kernel scale and sigma floor must be positive".into(),
        ));
    }
    let offsets = neighbor_offsets(&config.dilations);
    let (h, w) = (image.height(), image.width());
    let slots = offsets.len() + 1;
    let mut field = AffinityField {
        height: h,
        width: w,
        offsets,
        weights: vec![0.0; h * w * slots],
    };

    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut out = vec![0.0f32; w * slots];
            let mut dists: Vec<(usize, f32)> = Vec::with_capacity(slots);
            for col in 0..w {
                let here = image.pixel(row, col);
                dists.clear();
                for slot in 0..field.offsets.len() {
                    if let Some((r, c)) = field.neighbor(row, col, slot) {
                        let there = image.pixel(r, c);
                        let d = here
                            .iter()
                            .zip(there)
                            .map(|(a, b)| (a - b).abs())
                            .sum::<f32>()
                            / 3.0;
                        dists.push((slot, d));
                    }
                }
                let cell = &mut out[col * slots..(col + 1) * slots];
                if dists.is_empty() {
                    cell[slots - 1] = 1.0;
                    continue;
                }
                let n = dists.len() as f32;
                let mean = dists.iter().map(|(_, d)| d).sum::<f32>() / n;
                let var = dists
                    .iter()
                    .map(|(_, d)| (d - mean) * (d - mean))
                    .sum::<f32>()
                    / n;
                let sigma = var.sqrt().max(config.sigma_floor) * config.kernel_scale;
                let d_min = dists.iter().map(|(_, d)| *d).fold(f32::INFINITY, f32::min);
                let mut total = 0.0f32;
                for &(slot, d) in &dists {
                    let k = (-(d - d_min) / sigma).exp();
                    cell[slot] = k;
                    total += k;
                }
                for &(slot, _) in &dists {
                    cell[slot] /= total;
                }
            }
            out
        })
        .collect();
    for (row, vals) in rows.into_iter().enumerate() {
        field.weights[row * w * slots..(row + 1) * w * slots].copy_from_slice(&vals);
    }
    Ok(field)
}

fn refine_map(map: &Grid2D, affinity: &AffinityField, iterations: usize) -> Result<Grid2D> {
    let (h, w) = map.dims();
    let slots = affinity.slots();
    let mut current = map.values().to_vec();
    let mut next = vec![0.0f32; current.len()];
    for _ in 0..iterations {
        for row in 0..h {
            for col in 0..w {
                let x = current[row * w + col];
                let weights = affinity.weights(row, col);
                // Accumulate weighted differences from the center so constant
                // neighborhoods are reproduced exactly.
                let mut delta = 0.0f32;
                let mut lo = x;
                let mut hi = x;
                for (slot, &wt) in weights.iter().enumerate().take(slots) {
                    if wt == 0.0 {
                        continue;
                    }
                    if let Some((r, c)) = affinity.neighbor(row, col, slot) {
                        let y = current[r * w + c];
                        delta += wt * (y - x);
                        lo = lo.min(y);
                        hi = hi.max(y);
                    }
                }
                next[row * w + col] = (x + delta).clamp(lo, hi);
            }
        }
        std::mem::swap(&mut current, &mut next);
    }
    Grid2D::new(h, w, current)
}

/// Runs `iterations` rounds of affinity averaging on every class map.
pub fn refine(
    scores: &[Grid2D],
    affinity: &AffinityField,
    iterations: usize,
) -> Result<Vec<Grid2D>> {
    if let Some(bad) = scores
        .iter()
        .find(|g| g.dims() != (affinity.height(), affinity.width()))
    {
        return Err(Error::DimensionMismatch(format!(
            "score map {:?} vs affinity {}x{}",
            bad.dims(),
            affinity.height(),
            affinity.width()
        )));
    }
    scores
        .par_iter()
        .map(|g| refine_map(g, affinity, iterations))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_image(h: usize, w: usize, v: f32) -> RgbImage {
        RgbImage::new(h, w, vec![v; h * w * 3]).unwrap()
    }

    #[test]
    fn one_by_one_image_is_self_affine() {
        let a = compute_affinity(&constant_image(1, 1, 0.3), &PamrConfig::default()).unwrap();
        let wts = a.weights(0, 0);
        assert_eq!(*wts.last().unwrap(), 1.0);
        assert!(wts[..wts.len() - 1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_image_gives_uniform_in_bounds_weights() {
        let a = compute_affinity(&constant_image(5, 5, 0.7), &PamrConfig::default()).unwrap();
        // Corner pixel: only 3 neighbors at dilation 1, 2 and 4 are in bounds.
        let wts = a.weights(0, 0);
        let nonzero: Vec<f32> = wts.iter().copied().filter(|&x| x > 0.0).collect();
        assert_eq!(nonzero.len(), 9);
        assert!(nonzero.iter().all(|&x| (x - 1.0 / 9.0).abs() < 1e-7));
        // Center: all 8 neighbors at dilations 1 and 2.
        let center: Vec<f32> = a
            .weights(2, 2)
            .iter()
            .copied()
            .filter(|&x| x > 0.0)
            .collect();
        assert_eq!(center.len(), 16);
    }

    #[test]
    fn weights_sum_to_one() {
        let data: Vec<f32> = (0..6 * 7 * 3)
            .map(|i| ((i * 37) % 11) as f32 / 10.0)
            .collect();
        let img = RgbImage::new(6, 7, data).unwrap();
        let a = compute_affinity(&img, &PamrConfig::default()).unwrap();
        for r in 0..6 {
            for c in 0..7 {
                let s: f32 = a.weights(r, c).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(a.weights(r, c).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn iterations_zero_is_identity() {
        let img = constant_image(3, 3, 0.2);
        let a = compute_affinity(&img, &PamrConfig::default()).unwrap();
        let g = Grid2D::new(3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        assert_eq!(refine(std::slice::from_ref(&g), &a, 0).unwrap()[0], g);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = compute_affinity(&constant_image(3, 3, 0.2), &PamrConfig::default()).unwrap();
        let g = Grid2D::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(refine(&[g], &a, 1).is_err());
    }
}
