//! Procedural toy dataset: textured reference images with a ladder of
//! Gaussian-blur distortion levels and monotone quality scores. Used by
//! smoke tests and the training walkthrough; no external data needed.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::derive_rng;

/// Shape of a generated toy dataset.
#[derive(Debug, Clone)]
pub struct ToyDatasetSpec {
    pub n_references: usize,
    pub blur_levels: usize,
    /// Square image side in pixels.
    pub size: u32,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            n_references: 20,
            blur_levels: 5,
            size: 64,
            seed: 0,
        }
    }
}

/// Renders one procedural reference image: random sinusoidal gratings over
/// a colored gradient plus per-pixel noise, so blurring visibly removes
/// energy.
fn render_reference(size: u32, rng: &mut impl Rng) -> image::RgbImage {
    let n_waves = 6;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            (
                0.3 + rng.random::<f64>() * 2.2, // frequency (cycles / 8 px)
                rng.random::<f64>() * std::f64::consts::TAU, // orientation
                rng.random::<f64>() * std::f64::consts::TAU, // phase
                0.4 + rng.random::<f64>() * 0.6, // amplitude
            )
        })
        .collect();
    let base = [
        rng.random::<f64>() * 0.5 + 0.25,
        rng.random::<f64>() * 0.5 + 0.25,
        rng.random::<f64>() * 0.5 + 0.25,
    ];

    let mut img = image::RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let mut signal = 0.0;
            for &(freq, theta, phase, amp) in &waves {
                let proj = (x as f64 * theta.cos() + y as f64 * theta.sin())
                    * freq
                    * std::f64::consts::TAU
                    / 8.0;
                signal += amp * (proj + phase).sin();
            }
            signal /= n_waves as f64;
            let noise = rng.random::<f64>() * 0.25 - 0.125;
            let gradient = 0.2 * (x as f64 + y as f64) / (2.0 * size as f64);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = base[c] + 0.5 * signal + noise + gradient * (c as f64 - 1.0);
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x, y, image::Rgb(px));
        }
    }
    img
}

/// Blur sigma for a 1-based distortion level: 0.6, 1.2, 2.4, ...
pub fn blur_sigma(level: usize) -> f32 {
    0.6 * 2.0_f32.powi(level as i32 - 1)
}

/// Monotone target score for a 1-based distortion level (higher = better).
pub fn level_score(level: usize) -> f64 {
    100.0 / (1.0 + 0.6 * (level as f64 - 1.0).powi(2)) + 2.0 * (6.0 - level as f64)
}

/// Materializes the dataset under `dir`: reference and distorted PNGs plus
/// `manifest.csv`. Returns the manifest path.
pub fn generate_toy_dataset(dir: impl AsRef<Path>, spec: &ToyDatasetSpec) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if spec.n_references == 0 || spec.blur_levels == 0 || spec.size < 8 {
        return Err(Error::Config("degenerate toy dataset spec".into()));
    }

    let mut manifest = String::from("ref_path,dist_path,score,ref_id\n");
    for r in 0..spec.n_references {
        let mut rng = derive_rng(spec.seed, &[0x746f79, r as u64]); // "toy"
        let reference = render_reference(spec.size, &mut rng);
        let ref_name = format!("ref{r:03}.png");
        reference
            .save(dir.join(&ref_name))
            .map_err(|e| Error::Image {
                path: dir.join(&ref_name),
                reason: e.to_string(),
            })?;

        for level in 1..=spec.blur_levels {
            let blurred = image::imageops::blur(&reference, blur_sigma(level));
            let dist_name = format!("ref{r:03}_blur{level}.png");
            blurred
                .save(dir.join(&dist_name))
                .map_err(|e| Error::Image {
                    path: dir.join(&dist_name),
                    reason: e.to_string(),
                })?;
            manifest.push_str(&format!(
                "{ref_name},{dist_name},{:.6},ref{r:03}\n",
                level_score(level)
            ));
        }
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
