//! Evaluation: Fréchet distance between Gaussian summaries of classifier FC7
//! features, sample diversity, and the per-level report.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::apps::{self, Model};
use crate::backbone;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` unbiased covariance.
    pub covariance: Vec<f64>,
    pub sample_count: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Summary of `rows`, each of length `dim`.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], dim: usize) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Validation(format!(
                "a Gaussian summary needs at least 2 samples, got {n}"
            )));
        }
        let mut mean = vec![0.0; dim];
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "feature row of length {}, expected {dim}",
                    r.len()
                )));
            }
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x as f64;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for r in rows {
            for ((c, &x), &m) in centered.iter_mut().zip(r.as_ref()).zip(&mean) {
                *c = x as f64 - m;
            }
            for i in 0..dim {
                let ci = centered[i];
                for j in i..dim {
                    cov[i * dim + j] += ci * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / (n - 1) as f64;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Ok(GaussianSummary {
            mean,
            covariance: cov,
            sample_count: n,
        })
    }
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
pub fn gaussian_frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.covariance.len() != d * d || b.covariance.len() != d * d {
        return Err(Error::Shape(format!(
            "Gaussian summaries of dimension {} and {}",
            d,
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let ra = linalg::sqrt_psd(&a.covariance, d)?;
    let inner = linalg::matmul(&linalg::matmul(&ra, &b.covariance, d), &ra, d);
    let cross = linalg::trace_sqrt_psd(&inner, d)?;
    let dist =
        mean_term + linalg::trace(&a.covariance, d) + linalg::trace(&b.covariance, d) - 2.0 * cross;
    if !dist.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(dist.max(0.0))
}

/// FC7 activations of each image.
pub fn fc7_features(model: &Model, images: &[Image]) -> Result<Vec<Vec<f32>>> {
    let spec = model.spec();
    let fc7 = spec.num_stages();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let prepared = chunk
            .iter()
            .map(|im| im.preprocess(spec.input_size))
            .collect::<Result<Vec<_>>>()?;
        let taps = backbone::extract_batch(&model.classifier, &Image::batch(&prepared)?)?;
        let t = &taps[fc7];
        let per = t.per_sample();
        for i in 0..chunk.len() {
            out.push(t.data()[i * per..(i + 1) * per].to_vec());
        }
    }
    Ok(out)
}

/// Seed used for source image `index` under `seed`.
fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// Fréchet distance between FC7 features of the first `n_samples` real
/// images and of one level-`level_id` generation per image.
pub fn compute_fid(
    model: &Model,
    real_set: &[Image],
    level_id: &str,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    model.spec().level_index(level_id)?;
    let n = n_samples.min(real_set.len());
    if n < 2 {
        return Err(Error::Validation(format!(
            "FID needs at least 2 images, got {n}"
        )));
    }
    let sources = &real_set[..n];
    let generated = sources
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let g = apps::invert_at_level(model, im, level_id, 1, sample_seed(seed, i), None)?;
            Ok(g.samples.into_iter().next().expect("one sample"))
        })
        .collect::<Result<Vec<_>>>()?;
    fid_between(model, sources, &generated)
}

/// Fréchet distance between the FC7 feature distributions of two image sets.
pub fn fid_between(model: &Model, a: &[Image], b: &[Image]) -> Result<f64> {
    let dim = model.spec().fc_dim;
    let fa = GaussianSummary::from_rows(&fc7_features(model, a)?, dim)?;
    let fb = GaussianSummary::from_rows(&fc7_features(model, b)?, dim)?;
    gaussian_frechet_distance(&fa, &fb)
}

/// Mean over unordered pairs of the mean per-pixel L1 distance.
pub fn diversity_score(samples: &[Image]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Validation(format!(
            "diversity needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let (w, h) = (samples[0].width(), samples[0].height());
    if samples.iter().any(|s| s.width() != w || s.height() != h) {
        return Err(Error::Shape("diversity samples differ in size".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += samples[i].mean_abs_diff(&samples[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportConfig {
    /// Images used for each FID estimate.
    pub fid_samples: usize,
    /// Source images for the diversity column.
    pub diversity_images: usize,
    /// Samples per source image for the diversity column.
    pub k_per_image: usize,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            fid_samples: 512,
            diversity_images: 32,
            k_per_image: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelRow {
    pub level: String,
    pub fid: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelReport {
    pub rows: Vec<LevelRow>,
}

impl LevelReport {
    pub const HEADER: &'static str = "level\tfid\tdiversity";

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\n", r.level, r.fid, r.diversity));
        }
        s
    }
}

/// Mean diversity over the first `cfg.diversity_images` images, `k_per_image`
/// samples each.
pub fn level_diversity(
    model: &Model,
    images: &[Image],
    level_id: &str,
    cfg: &ReportConfig,
) -> Result<f64> {
    let n = cfg.diversity_images.min(images.len());
    if n == 0 {
        return Err(Error::Validation(
            "no images for the diversity estimate".into(),
        ));
    }
    let mut total = 0.0;
    for (i, im) in images[..n].iter().enumerate() {
        let g = apps::invert_at_level(
            model,
            im,
            level_id,
            cfg.k_per_image,
            sample_seed(cfg.seed, i),
            None,
        )?;
        total += diversity_score(&g.samples)?;
    }
    Ok(total / n as f64)
}

/// One row per requested level, ordered fine to deep.
pub fn per_level_report(
    model: &Model,
    eval_set: &[Image],
    levels: &[String],
    cfg: &ReportConfig,
) -> Result<LevelReport> {
    let spec = model.spec();
    let mut idx = levels
        .iter()
        .map(|l| spec.level_index(l))
        .collect::<Result<Vec<_>>>()?;
    idx.sort_unstable();
    idx.dedup();
    let rows = idx
        .into_iter()
        .map(|i| {
            let level = spec.level_name(i);
            Ok(LevelRow {
                level: level.into(),
                fid: compute_fid(model, eval_set, level, cfg.fid_samples, cfg.seed)?,
                diversity: level_diversity(model, eval_set, level, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LevelReport { rows })
}
