//! Index maps between image pixels and patch tokens, and the plain-value
//! versions of the de-patchify scatter and the global feature.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};

/// `P x P` grid of `p x p` patches over a square `res x res` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub res: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(res: usize, patch: usize) -> Result<Self> {
        if patch == 0 || res == 0 || res % patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "image resolution {res} is not divisible by patch size {patch}"
            )));
        }
        Ok(PatchGrid { res, patch })
    }

    /// Patches per side.
    pub fn side(&self) -> usize {
        self.res / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.side() * self.side()
    }

    pub fn pixels(&self) -> usize {
        self.res * self.res
    }

    /// Pixel index of slot `(py, px)` inside token `t` (row-major tokens).
    pub fn pixel_of(&self, token: usize, slot: usize) -> usize {
        let (tr, tc) = (token / self.side(), token % self.side());
        let (sr, sc) = (slot / self.patch, slot % self.patch);
        (tr * self.patch + sr) * self.res + tc * self.patch + sc
    }

    /// Token-major flat index `t * p^2 + slot` of a pixel.
    pub fn slot_of(&self, pixel: usize) -> usize {
        let (r, c) = (pixel / self.res, pixel % self.res);
        let token = (r / self.patch) * self.side() + c / self.patch;
        token * self.patch * self.patch + (r % self.patch) * self.patch + c % self.patch
    }

    /// `out[t * p^2 + s] = pixel_of(t, s)`: gathers an image into token order.
    pub fn patchify_index(&self) -> Arc<[usize]> {
        let pp = self.patch * self.patch;
        (0..self.pixels()).map(|i| self.pixel_of(i / pp, i % pp)).collect()
    }

    /// `out[pixel] = slot_of(pixel)`: scatters token-ordered values to an image.
    pub fn scatter_index(&self) -> Arc<[usize]> {
        (0..self.pixels()).map(|p| self.slot_of(p)).collect()
    }
}

/// Places per-token `p^2` logits (token-major) at their image locations.
pub fn scatter_tokens(grid: &PatchGrid, tokens: &[f64]) -> Result<Vec<f64>> {
    if tokens.len() != grid.pixels() {
        return Err(Error::shape("scatter_tokens", &[tokens.len()], &[grid.pixels()]));
    }
    Ok((0..grid.pixels()).map(|p| tokens[grid.slot_of(p)]).collect())
}

/// Sums a heatmap over each patch, giving `P x P` weights.
pub fn pool_heatmap(grid: &PatchGrid, heatmap: &[f64]) -> Vec<f64> {
    let pp = grid.patch * grid.patch;
    (0..grid.tokens())
        .map(|t| (0..pp).map(|s| heatmap[grid.pixel_of(t, s)]).sum())
        .collect()
}

/// Global feature `[phi_1..phi_K, psi_1..psi_K]` from per-view feature
/// grids (`P^2 x C`, token-major) and heatmap probabilities (`H x W`).
///
/// `phi_k` is the heatmap-weighted sum of view k's features, with the
/// heatmap sum-pooled to patch resolution; `psi_k` is the per-channel max.
pub fn global_feature(grid: &PatchGrid, features: &[Vec<f64>], heatmaps: &[Vec<f64>], channels: usize) -> Result<Vec<f64>> {
    if features.len() != heatmaps.len() {
        return Err(Error::shape("global_feature", &[features.len()], &[heatmaps.len()]));
    }
    let n = grid.tokens();
    let mut phi = Vec::with_capacity(features.len() * channels);
    let mut psi = Vec::with_capacity(features.len() * channels);
    for (k, (f, h)) in features.iter().zip(heatmaps).enumerate() {
        if f.len() != n * channels {
            return Err(Error::shape("global_feature features", &[f.len()], &[n, channels]));
        }
        if h.len() != grid.pixels() {
            return Err(Error::shape("global_feature heatmap", &[h.len()], &[grid.pixels()]));
        }
        let total: f64 = h.iter().sum();
        if h.iter().any(|&x| x < 0.0) || (total - 1.0).abs() > 1e-5 {
            return Err(invalid(format!("heatmap of view {k} is not a distribution (sum {total})")));
        }
        let w = pool_heatmap(grid, h);
        for c in 0..channels {
            phi.push((0..n).map(|t| w[t] * f[t * channels + c]).sum());
            psi.push((0..n).map(|t| f[t * channels + c]).fold(f64::NEG_INFINITY, f64::max));
        }
    }
    phi.extend(psi);
    Ok(phi)
}
