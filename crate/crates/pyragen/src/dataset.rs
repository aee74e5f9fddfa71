//! Image datasets on disk: a manifest of `relative/path.png<TAB>label` lines
//! next to the PNG files.

use std::fmt::Write as _;
use std::path::Path;

use pyragen_core::data::{ClassLabel, Dataset};

use crate::error::{io_err, Error, Result};
use crate::imageio;

pub const MANIFEST: &str = "manifest.tsv";

/// Load every listed image, preprocessed to `size x size`. Paths resolve
/// against the manifest's directory.
pub fn load(manifest: &Path, size: usize, num_classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut data = Dataset::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Dataset(format!("{}:{}: {msg}", manifest.display(), i + 1));
        let (path, label) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `path<TAB>label`".into()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad label `{label}`")))?;
        let label = ClassLabel(label)
            .check(num_classes)
            .map_err(|e| bad(e.to_string()))?;
        let image = imageio::read_image(&root.join(path))?;
        let image = image.preprocess(size).map_err(|e| bad(e.to_string()))?;
        data.push(image, label);
    }
    if data.is_empty() {
        return Err(Error::Dataset(format!(
            "{} lists no images",
            manifest.display()
        )));
    }
    Ok(data)
}

/// Write `data` as PNGs plus a manifest into `dir`, returning the manifest path.
pub fn save(data: &Dataset, dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for (i, (image, label)) in data.iter().enumerate() {
        let name = format!("{i:05}_c{}.png", label.0);
        imageio::write_image(&dir.join(&name), image)?;
        writeln!(manifest, "{name}\t{}", label.0).expect("writing to a String");
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}
