//! Flat `key = value` configuration files for GAN training.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the training
//! field names; unknown or repeated keys are errors. Relative paths resolve
//! against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pyragen_core::trainer::TrainConfig;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GanRunConfig {
    pub train: TrainConfig,
    pub classifier_checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Directory for checkpoints and metrics; defaults to `run` next to the
    /// config file.
    pub output_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "alpha",
    "beta",
    "eps_div",
    "eps_norm",
    "p_crop",
    "lr_g",
    "lr_d",
    "batch_size",
    "latent_dim",
    "embed_dim",
    "attention",
    "steps",
    "seed",
    "adam_betas",
    "snapshot_every",
    "classifier_checkpoint",
    "dataset",
    "output_dir",
];

/// Parse the raw pairs, rejecting unknown and duplicate keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: key `{k}` given twice",
                i + 1
            )));
        }
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn required<'a>(pairs: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    pairs
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
}

impl GanRunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut t = TrainConfig::default();
        for (k, v) in &pairs {
            match k.as_str() {
                "alpha" => t.weights.alpha = parse(k, v)?,
                "beta" => t.weights.beta = parse(k, v)?,
                "eps_div" => t.weights.eps_div = parse(k, v)?,
                "eps_norm" => t.weights.eps_norm = parse(k, v)?,
                "p_crop" => t.p_crop = parse(k, v)?,
                "lr_g" => t.lr_g = parse(k, v)?,
                "lr_d" => t.lr_d = parse(k, v)?,
                "batch_size" => t.batch_size = parse(k, v)?,
                "latent_dim" => t.latent_dim = parse(k, v)?,
                "embed_dim" => t.embed_dim = parse(k, v)?,
                "attention" => t.attention = parse(k, v)?,
                "steps" => t.steps = parse(k, v)?,
                "seed" => t.seed = parse(k, v)?,
                "snapshot_every" => t.snapshot_every = parse(k, v)?,
                "adam_betas" => {
                    let (a, b) = v.split_once(',').ok_or_else(|| {
                        Error::Config(format!("`adam_betas`: expected `b1, b2`, got `{v}`"))
                    })?;
                    t.adam_betas = (parse(k, a.trim())?, parse(k, b.trim())?);
                }
                _ => {}
            }
        }
        t.validate()?;
        let resolve = |p: &str| base_dir.join(p);
        Ok(GanRunConfig {
            train: t,
            classifier_checkpoint: resolve(required(&pairs, "classifier_checkpoint")?),
            dataset: resolve(required(&pairs, "dataset")?),
            output_dir: resolve(pairs.get("output_dir").map(String::as_str).unwrap_or("run")),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "classifier_checkpoint = c.pgc\ndataset = data/manifest.tsv\n";

    #[test]
    fn defaults_and_overrides() {
        let c = GanRunConfig::parse(MIN, Path::new("/x")).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.dataset, Path::new("/x/data/manifest.tsv"));
        assert_eq!(c.output_dir, Path::new("/x/run"));
        let text =
            format!("{MIN}# comment\nsteps = 5\nadam_betas = 0.5, 0.99\nattention = false\n");
        let c = GanRunConfig::parse(&text, Path::new("/x")).unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.adam_betas, (0.5, 0.99));
        assert!(!c.train.attention);
    }

    #[test]
    fn errors_name_the_key() {
        let e = GanRunConfig::parse("dataset = d\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("classifier_checkpoint"), "{e}");
        let e = GanRunConfig::parse(&format!("{MIN}lr = 1\n"), Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("unknown key `lr`"), "{e}");
        let e = GanRunConfig::parse(&format!("{MIN}batch_size = 3\n"), Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("batch_size"), "{e}");
        assert!(
            GanRunConfig::parse(&format!("{MIN}steps = 1\nsteps = 2\n"), Path::new(".")).is_err()
        );
    }
}
