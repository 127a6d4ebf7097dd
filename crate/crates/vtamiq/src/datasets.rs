//! Dataset manifests, reference-wise splitting, image loading and score
//! preprocessing.
//!
//! A CSV manifest (`ref_path,dist_path,score,ref_id`) is the single
//! ingestion path for every dataset layout; splits are always taken along
//! the reference-image dimension so no test or validation content leaks
//! into training.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{derive_rng, Scalar, Tensor};

/// Whether larger manifest scores mean better quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    #[default]
    HigherIsBetter,
    LowerIsBetter,
}

/// One (reference, distorted) pair with its subjective score.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub reference_path: PathBuf,
    pub distorted_path: PathBuf,
    pub score: f64,
    pub reference_id: String,
}

/// A named dataset: records plus the orientation of its score scale.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<ImageRecord>,
    pub score_direction: ScoreDirection,
}

impl DatasetManifest {
    /// Distinct reference ids in first-appearance order.
    pub fn reference_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.reference_id.as_str()) {
                out.push(r.reference_id.clone());
            }
        }
        out
    }

    /// Scores linearly mapped to [0, 1] with higher always better; the
    /// orientation flip happens here so every consumer downstream sees one
    /// fixed direction.
    pub fn normalized_scores(&self) -> Vec<f64> {
        let lo = self
            .records
            .iter()
            .map(|r| r.score)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .records
            .iter()
            .map(|r| r.score)
            .fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.records
            .iter()
            .map(|r| {
                let s = if span > 0.0 {
                    (r.score - lo) / span
                } else {
                    0.5
                };
                match self.score_direction {
                    ScoreDirection::HigherIsBetter => s,
                    ScoreDirection::LowerIsBetter => 1.0 - s,
                }
            })
            .collect()
    }
}

/// Loads a CSV manifest with the header `ref_path,dist_path,score,ref_id`.
/// Relative image paths are resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let display = path.display().to_string();

    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::EmptyManifest(display));
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["ref_path", "dist_path", "score", "ref_id"] {
        return Err(Error::Parse {
            path: display,
            line: 1,
            reason: format!("expected header ref_path,dist_path,score,ref_id, found {header:?}"),
        });
    }

    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let score: f64 = fields[2].parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: line_no,
            reason: format!("score {:?} is not numeric", fields[2]),
        })?;
        if !score.is_finite() {
            return Err(Error::Parse {
                path: display.clone(),
                line: line_no,
                reason: format!("score {score} is not finite"),
            });
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        records.push(ImageRecord {
            reference_path: resolve(fields[0]),
            distorted_path: resolve(fields[1]),
            score,
            reference_id: fields[3].to_string(),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest(display));
    }
    Ok(DatasetManifest {
        name,
        records,
        score_direction: ScoreDirection::HigherIsBetter,
    })
}

/// Which subset a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Train,
    Val,
    Test,
}

/// Disjoint train/val/test partition of reference ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn subset_of(&self, reference_id: &str) -> Option<Subset> {
        if self.train.contains(reference_id) {
            Some(Subset::Train)
        } else if self.val.contains(reference_id) {
            Some(Subset::Val)
        } else if self.test.contains(reference_id) {
            Some(Subset::Test)
        } else {
            None
        }
    }

    /// Records of `manifest` whose reference falls in `subset`, in manifest
    /// order.
    pub fn records<'m>(
        &self,
        manifest: &'m DatasetManifest,
        subset: Subset,
    ) -> Vec<&'m ImageRecord> {
        manifest
            .records
            .iter()
            .filter(|r| self.subset_of(&r.reference_id) == Some(subset))
            .collect()
    }

    /// Plain-text persistence: one section per subset, one reference id per
    /// line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# seed: {}", self.seed).expect("string write");
        for (tag, ids) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            writeln!(out, "[{tag}]").expect("string write");
            for id in ids {
                writeln!(out, "{id}").expect("string write");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = SplitSpec {
            train: BTreeSet::new(),
            val: BTreeSet::new(),
            test: BTreeSet::new(),
            seed: 0,
        };
        let mut current: Option<Subset> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(seed) = line.strip_prefix("# seed:") {
                spec.seed = seed.trim().parse().map_err(|_| Error::Parse {
                    path: "<split>".into(),
                    line: i + 1,
                    reason: "bad seed".into(),
                })?;
            } else if line == "[train]" {
                current = Some(Subset::Train);
            } else if line == "[val]" {
                current = Some(Subset::Val);
            } else if line == "[test]" {
                current = Some(Subset::Test);
            } else if !line.starts_with('#') {
                let set = match current {
                    Some(Subset::Train) => &mut spec.train,
                    Some(Subset::Val) => &mut spec.val,
                    Some(Subset::Test) => &mut spec.test,
                    None => {
                        return Err(Error::Parse {
                            path: "<split>".into(),
                            line: i + 1,
                            reason: "reference id before any [section]".into(),
                        })
                    }
                };
                set.insert(line.to_string());
            }
        }
        Ok(spec)
    }
}

/// Splits along the reference-image dimension. Validation and test sizes are
/// `round(fraction * n_refs)`; the remainder goes to train. Deterministic
/// for a given seed.
pub fn split_by_reference(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSpec> {
    let (f_train, f_val, f_test) = fractions;
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    if f_train < 0.0 || f_val < 0.0 || f_test < 0.0 {
        return Err(Error::Config("split fractions must be nonnegative".into()));
    }
    let mut refs = manifest.reference_ids();
    if refs.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 distinct reference ids, found {}",
            refs.len()
        )));
    }
    let n = refs.len();
    let n_val = (f_val * n as f64).round() as usize;
    let n_test = (f_test * n as f64).round() as usize;
    if n_val + n_test > n {
        return Err(Error::Config(format!(
            "val+test rounds to {} of {} references",
            n_val + n_test,
            n
        )));
    }
    let n_train = n - n_val - n_test;

    let mut rng = derive_rng(seed, &[0x73706c6974]); // "split" stream
    refs.shuffle(&mut rng);

    Ok(SplitSpec {
        train: refs[..n_train].iter().cloned().collect(),
        val: refs[n_train..n_train + n_val].iter().cloned().collect(),
        test: refs[n_train + n_val..].iter().cloned().collect(),
        seed,
    })
}

/// Per-channel normalization constants. Defaults to the ImageNet statistics
/// customary for ViT-family models; override in config if needed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationSpec {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Decodes an 8-bit RGB image and normalizes it to a `[H, W, 3]` tensor
/// with `(v/255 - mean_c) / std_c` per channel.
pub fn load_image_normalized<F: Scalar>(
    path: impl AsRef<Path>,
    norm: &NormalizationSpec,
) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = match dynimg {
        image::DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::Channel {
                path: path.to_path_buf(),
                found: format!("{:?}", other.color()),
            })
        }
    };
    Ok(normalize_rgb8(&rgb, norm))
}

/// Normalization of an in-memory 8-bit RGB buffer.
pub fn normalize_rgb8<F: Scalar>(img: &image::RgbImage, norm: &NormalizationSpec) -> Tensor<F> {
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    let mut data = vec![F::zero(); raw.len()];
    let mean = norm.mean;
    let std = norm.std;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if raw.len() >= 1 << 16 {
            data.par_chunks_mut(3)
                .zip(raw.par_chunks(3))
                .for_each(|(out, px)| {
                    for c in 0..3 {
                        out[c] = F::from_f64((px[c] as f64 / 255.0 - mean[c]) / std[c]);
                    }
                });
            return Tensor::new(vec![h as usize, w as usize, 3], data).expect("image shape");
        }
    }
    for (out, px) in data.chunks_mut(3).zip(raw.chunks(3)) {
        for c in 0..3 {
            out[c] = F::from_f64((px[c] as f64 / 255.0 - mean[c]) / std[c]);
        }
    }
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("image shape")
}

/// Inverse of [`normalize_rgb8`] back to the [0, 1] pixel scale (not
/// re-quantized to 8 bits).
pub fn denormalize<F: Scalar>(t: &Tensor<F>, norm: &NormalizationSpec) -> Result<Tensor<F>> {
    if t.shape().len() != 3 || t.shape()[2] != 3 {
        return Err(Error::InvalidShape {
            op: "denormalize",
            shape: t.shape().to_vec(),
            reason: "expected [H, W, 3]".into(),
        });
    }
    let mut data = Vec::with_capacity(t.numel());
    for px in t.data().chunks(3) {
        for c in 0..3 {
            data.push(F::from_f64(px[c].as_f64() * norm.std[c] + norm.mean[c]));
        }
    }
    Tensor::new(t.shape().to_vec(), data)
}

/// Rank-based histogram equalization: score `s_i` maps to
/// `(rank_i - 0.5) / n`, ties sharing the average rank. Output order matches
/// input order; results lie in (0, 1).
pub fn histogram_equalize_scores(scores: &[f64]) -> Vec<f64> {
    let ranks = average_ranks(scores);
    let n = scores.len() as f64;
    ranks.iter().map(|r| (r - 0.5) / n).collect()
}

/// Average ranks (1-based) with tie sharing, the same convention SROCC uses.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}
