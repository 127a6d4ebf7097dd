//! Context-aware probability sampling (CAPS) of spatially aligned patch
//! pairs.
//!
//! The sampling distribution over valid patch positions mixes three terms:
//! a uniform floor, a Gaussian center bias, and a normalized local
//! perceptual difference between the reference and distorted images. Both
//! sequences share the same pixel windows, so patch `i` of each side is cut
//! from identical coordinates.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{derive_rng, Scalar, Tensor};

/// Local difference measure used for the CAPS difference term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiffMetric {
    /// Mean squared error over the patch window (cheap, default).
    #[default]
    Mse,
    /// One minus local SSIM over the patch window.
    SsimLocal,
}

/// Mixture weights and shape parameters for CAPS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Weight of the uniform term.
    pub alpha: f64,
    /// Weight of the center-bias term.
    pub beta: f64,
    /// Weight of the perceptual-difference term.
    pub gamma: f64,
    /// Center-bias standard deviation as a fraction of `min(H, W)`.
    pub sigma_center: f64,
    pub diff_metric: DiffMetric,
    pub patch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.3,
            gamma: 0.5,
            sigma_center: 0.25,
            diff_metric: DiffMetric::Mse,
            patch_size: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("sampler weights must be nonnegative".into()));
        }
        if self.alpha + self.beta + self.gamma <= 0.0 {
            return Err(Error::Config(
                "at least one sampler weight must be positive".into(),
            ));
        }
        if self.sigma_center <= 0.0 {
            return Err(Error::Config("sigma_center must be positive".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(())
    }

    /// Uniform-sampling variant of this config (center bias and difference
    /// terms switched off), used for sampling-strategy comparisons.
    pub fn uniform(patch_size: usize) -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            patch_size,
            ..Self::default()
        }
    }
}

/// Probability distribution over valid patch positions (identified by their
/// top-left corner; `grid[a * wc + b]` is the mass of position `(a, b)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    grid: Vec<f64>,
    hc: usize,
    wc: usize,
    patch_size: usize,
    height: usize,
    width: usize,
}

impl ProbabilityMap {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Grid dimensions `(Hc, Wc)`.
    pub fn grid_size(&self) -> (usize, usize) {
        (self.hc, self.wc)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn source_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn sum(&self) -> f64 {
        self.grid.iter().sum()
    }

    /// Writes the grid as CSV (one row per grid row).
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for row in self.grid.chunks(self.wc) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Writes the grid as a grayscale PNG, max-normalized for visibility.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let max = self
            .grid
            .iter()
            .copied()
            .fold(0.0_f64, f64::max)
            .max(1e-300);
        let mut img = image::GrayImage::new(self.wc as u32, self.hc as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            *px = image::Luma([(self.grid[i] / max * 255.0).round() as u8]);
        }
        img.save(path.as_ref()).map_err(|e| Error::Image {
            path: path.as_ref().to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// N aligned RGB patches plus their normalized uv center coordinates.
#[derive(Debug, Clone)]
pub struct PatchSequence<F: Scalar> {
    /// `[N, p, p, 3]` patch stack.
    pub patches: Tensor<F>,
    /// Normalized (row, column) patch-center coordinates in `[0, 1]^2`.
    pub uv: Vec<(f64, f64)>,
    /// `(H, W)` of the source image.
    pub source_size: (usize, usize),
}

impl<F: Scalar> PatchSequence<F> {
    pub fn len(&self) -> usize {
        self.uv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uv.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.shape()[1]
    }
}

fn check_image_shape<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 3 || t.shape()[2] != 3 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected [H, W, 3]".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_patch_fits(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || p > h.min(w) {
        return Err(Error::Config(format!(
            "patch size {p} does not fit a {h}x{w} image"
        )));
    }
    Ok(())
}

/// Integral image (summed-area table) with one guard row/column of zeros.
fn integral(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row_sum = 0.0;
        for c in 0..w {
            row_sum += values[r * w + c];
            s[(r + 1) * (w + 1) + (c + 1)] = s[r * (w + 1) + (c + 1)] + row_sum;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, top: usize, left: usize, p: usize) -> f64 {
    let stride = w + 1;
    s[(top + p) * stride + (left + p)] - s[top * stride + (left + p)] - s[(top + p) * stride + left]
        + s[top * stride + left]
}

/// Per-valid-position local perceptual difference between two images.
///
/// `Mse` is the mean squared error over the `p x p` window (averaged over
/// channels); `SsimLocal` is `1 - SSIM` computed on the channel-mean
/// intensity with a box window.
pub fn compute_difference_map<F: Scalar>(
    reference: &Tensor<F>,
    distorted: &Tensor<F>,
    patch_size: usize,
    metric: DiffMetric,
) -> Result<Vec<f64>> {
    let (h, w) = check_image_shape(reference, "compute_difference_map")?;
    if reference.shape() != distorted.shape() {
        return Err(Error::ShapeMismatch {
            op: "compute_difference_map",
            lhs: reference.shape().to_vec(),
            rhs: distorted.shape().to_vec(),
        });
    }
    check_patch_fits(h, w, patch_size)?;
    let p = patch_size;
    let (hc, wc) = (h - p + 1, w - p + 1);
    let area = (p * p) as f64;

    match metric {
        DiffMetric::Mse => {
            let mut sqerr = vec![0.0; h * w];
            for (i, e) in sqerr.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..3 {
                    let d =
                        reference.data()[i * 3 + c].as_f64() - distorted.data()[i * 3 + c].as_f64();
                    acc += d * d;
                }
                *e = acc / 3.0;
            }
            let s = integral(&sqerr, h, w);
            let mut grid = vec![0.0; hc * wc];
            for a in 0..hc {
                for b in 0..wc {
                    grid[a * wc + b] = window_sum(&s, w, a, b, p) / area;
                }
            }
            Ok(grid)
        }
        DiffMetric::SsimLocal => {
            let lum = |t: &Tensor<F>| -> Vec<f64> {
                t.data()
                    .chunks(3)
                    .map(|px| (px[0].as_f64() + px[1].as_f64() + px[2].as_f64()) / 3.0)
                    .collect()
            };
            let x = lum(reference);
            let y = lum(distorted);
            let lo = x
                .iter()
                .chain(y.iter())
                .copied()
                .fold(f64::INFINITY, f64::min);
            let hi = x
                .iter()
                .chain(y.iter())
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let range = (hi - lo).max(1e-6);
            let c1 = (0.01 * range).powi(2);
            let c2 = (0.03 * range).powi(2);

            let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();
            let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
            let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
            let sx = integral(&x, h, w);
            let sy = integral(&y, h, w);
            let sxx = integral(&xx, h, w);
            let syy = integral(&yy, h, w);
            let sxy = integral(&xy, h, w);

            let mut grid = vec![0.0; hc * wc];
            for a in 0..hc {
                for b in 0..wc {
                    let mx = window_sum(&sx, w, a, b, p) / area;
                    let my = window_sum(&sy, w, a, b, p) / area;
                    let vx = window_sum(&sxx, w, a, b, p) / area - mx * mx;
                    let vy = window_sum(&syy, w, a, b, p) / area - my * my;
                    let cov = window_sum(&sxy, w, a, b, p) / area - mx * my;
                    let ssim = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    grid[a * wc + b] = (1.0 - ssim).max(0.0);
                }
            }
            Ok(grid)
        }
    }
}

/// Isotropic Gaussian over patch-center positions around the image center,
/// normalized to sum 1. `sigma_center` is a fraction of `min(H, W)`.
pub fn compute_center_bias_map(
    height: usize,
    width: usize,
    patch_size: usize,
    sigma_center: f64,
) -> Result<Vec<f64>> {
    check_patch_fits(height, width, patch_size)?;
    if sigma_center <= 0.0 {
        return Err(Error::Config("sigma_center must be positive".into()));
    }
    let p = patch_size;
    let (hc, wc) = (height - p + 1, width - p + 1);
    let sigma = sigma_center * height.min(width) as f64;
    let center_r = (height as f64 - 1.0) / 2.0;
    let center_c = (width as f64 - 1.0) / 2.0;
    let half = (p as f64 - 1.0) / 2.0;

    let mut grid = vec![0.0; hc * wc];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for a in 0..hc {
        let dr = a as f64 + half - center_r;
        for b in 0..wc {
            let dc = b as f64 + half - center_c;
            grid[a * wc + b] = (-(dr * dr + dc * dc) * inv).exp();
        }
    }
    normalize_in_place(&mut grid);
    Ok(grid)
}

fn normalize_in_place(grid: &mut [f64]) {
    let sum: f64 = grid.iter().sum();
    if sum > 0.0 {
        for v in grid.iter_mut() {
            *v /= sum;
        }
    } else {
        let u = 1.0 / grid.len() as f64;
        for v in grid.iter_mut() {
            *v = u;
        }
    }
}

/// Builds the CAPS distribution `P ∝ alpha·uniform + beta·center +
/// gamma·normalize(diff)`.
///
/// When the difference map is identically zero (e.g. identical images) the
/// gamma term is dropped and the map reduces exactly to the (alpha, beta)
/// mixture; if alpha and beta are also zero the map falls back to uniform.
pub fn build_probability_map<F: Scalar>(
    reference: &Tensor<F>,
    distorted: &Tensor<F>,
    config: &SamplerConfig,
) -> Result<ProbabilityMap> {
    config.validate()?;
    let (h, w) = check_image_shape(reference, "build_probability_map")?;
    let p = config.patch_size;
    check_patch_fits(h, w, p)?;
    let (hc, wc) = (h - p + 1, w - p + 1);
    let cells = hc * wc;
    let uniform = 1.0 / cells as f64;

    let center = if config.beta > 0.0 {
        Some(compute_center_bias_map(h, w, p, config.sigma_center)?)
    } else {
        None
    };
    let diff = if config.gamma > 0.0 {
        let mut d = compute_difference_map(reference, distorted, p, config.diff_metric)?;
        let sum: f64 = d.iter().sum();
        if sum > 0.0 {
            for v in d.iter_mut() {
                *v /= sum;
            }
            Some(d)
        } else {
            None
        }
    } else {
        None
    };

    let gamma = if diff.is_some() { config.gamma } else { 0.0 };
    let total = config.alpha + config.beta + gamma;

    let mut grid = vec![0.0; cells];
    if total <= 0.0 {
        // Only the gamma term was requested and the images are identical.
        for v in grid.iter_mut() {
            *v = uniform;
        }
    } else {
        for (i, v) in grid.iter_mut().enumerate() {
            let mut acc = config.alpha * uniform;
            if let Some(c) = &center {
                acc += config.beta * c[i];
            }
            if let Some(d) = &diff {
                acc += gamma * d[i];
            }
            *v = acc / total;
        }
    }

    Ok(ProbabilityMap {
        grid,
        hc,
        wc,
        patch_size: p,
        height: h,
        width: w,
    })
}

fn uv_of(top: usize, left: usize, p: usize, h: usize, w: usize) -> (f64, f64) {
    let half = (p as f64 - 1.0) / 2.0;
    let u = if h > 1 {
        (top as f64 + half) / (h as f64 - 1.0)
    } else {
        0.5
    };
    let v = if w > 1 {
        (left as f64 + half) / (w as f64 - 1.0)
    } else {
        0.5
    };
    (u, v)
}

fn extract_patches<F: Scalar>(
    image: &Tensor<F>,
    positions: &[(usize, usize)],
    p: usize,
) -> Tensor<F> {
    let w = image.shape()[1];
    let data = image.data();
    let mut out = Vec::with_capacity(positions.len() * p * p * 3);
    for &(top, left) in positions {
        for r in 0..p {
            let base = ((top + r) * w + left) * 3;
            out.extend_from_slice(&data[base..base + p * 3]);
        }
    }
    Tensor::new(vec![positions.len(), p, p, 3], out).expect("patch stack shape")
}

/// Draws `n` patch positions i.i.d. with replacement from `pmap` and cuts
/// the same windows out of both images. Deterministic for a given seed.
pub fn sample_patches<F: Scalar>(
    reference: &Tensor<F>,
    distorted: &Tensor<F>,
    pmap: &ProbabilityMap,
    n: usize,
    patch_size: usize,
    seed: u64,
) -> Result<(PatchSequence<F>, PatchSequence<F>)> {
    let (h, w) = check_image_shape(reference, "sample_patches")?;
    if reference.shape() != distorted.shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_patches",
            lhs: reference.shape().to_vec(),
            rhs: distorted.shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(Error::Contract {
            op: "sample_patches",
            reason: "need at least one patch".into(),
        });
    }
    check_patch_fits(h, w, patch_size)?;
    if patch_size != pmap.patch_size || (h, w) != (pmap.height, pmap.width) {
        return Err(Error::Config(format!(
            "probability map was built for patch size {} on {}x{}, got {} on {}x{}",
            pmap.patch_size, pmap.height, pmap.width, patch_size, h, w
        )));
    }

    // Inverse-CDF sampling over the flattened grid.
    let mut cdf = Vec::with_capacity(pmap.grid.len());
    let mut acc = 0.0;
    for &v in &pmap.grid {
        acc += v;
        cdf.push(acc);
    }
    let total = acc;

    let mut rng = derive_rng(seed, &[0x63617073]); // "caps" stream
    let mut positions = Vec::with_capacity(n);
    let mut uv = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let (a, b) = (idx / pmap.wc, idx % pmap.wc);
        positions.push((a, b));
        uv.push(uv_of(a, b, patch_size, h, w));
    }

    let ref_seq = PatchSequence {
        patches: extract_patches(reference, &positions, patch_size),
        uv: uv.clone(),
        source_size: (h, w),
    };
    let dist_seq = PatchSequence {
        patches: extract_patches(distorted, &positions, patch_size),
        uv,
        source_size: (h, w),
    };
    Ok((ref_seq, dist_seq))
}

/// Deterministic non-overlapping raster tiling:
/// `floor(H/p) * floor(W/p)` patches.
pub fn tile_patches<F: Scalar>(image: &Tensor<F>, patch_size: usize) -> Result<PatchSequence<F>> {
    let (h, w) = check_image_shape(image, "tile_patches")?;
    check_patch_fits(h, w, patch_size)?;
    let p = patch_size;
    let (rows, cols) = (h / p, w / p);
    let mut positions = Vec::with_capacity(rows * cols);
    let mut uv = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            positions.push((i * p, j * p));
            uv.push(uv_of(i * p, j * p, p, h, w));
        }
    }
    Ok(PatchSequence {
        patches: extract_patches(image, &positions, p),
        uv,
        source_size: (h, w),
    })
}
