//! Run drivers: classifier training and the GAN training loop with snapshots
//! and a metrics stream.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pyragen_core::backbone::{
    self, ClassifierParams, ClassifierReport, ClassifierSpec, ClassifierTrainConfig, EpochProgress,
};
use pyragen_core::data::Dataset;
use pyragen_core::trainer::{self, StepMetrics, TrainConfig, TrainState};

use crate::checkpoint;
use crate::config::GanRunConfig;
use crate::dataset;
use crate::error::{io_err, Error, Result};

pub const METRICS_FILE: &str = "metrics.tsv";

pub fn snapshot_name(step: u64) -> String {
    format!("step_{step:08}.pgc")
}

/// Steps after which a snapshot is written: 0, every multiple of `every`, and
/// the final step.
pub fn is_snapshot_step(step: u64, every: u64, total: u64) -> bool {
    step == 0 || step % every == 0 || step == total
}

pub fn train_classifier(
    data: &Dataset,
    spec: &ClassifierSpec,
    config: &ClassifierTrainConfig,
    seed: u64,
    out: &Path,
    progress: &mut dyn FnMut(EpochProgress),
) -> Result<(ClassifierParams, ClassifierReport)> {
    let (params, report) = backbone::train_classifier(data, spec, config, seed, progress)?;
    checkpoint::save_classifier(out, &params)?;
    Ok((params, report))
}

#[derive(Debug)]
pub struct RunOutcome {
    pub final_checkpoint: PathBuf,
    pub snapshots: Vec<PathBuf>,
    pub metrics: PathBuf,
}

/// Train from a config file's settings. On divergence the error names the
/// offending component and the snapshots already written stay on disk.
pub fn train_gan(run: &GanRunConfig, progress: &mut dyn FnMut(&StepMetrics)) -> Result<RunOutcome> {
    let classifier = checkpoint::load_classifier(&run.classifier_checkpoint)?;
    let data = dataset::load(
        &run.dataset,
        classifier.spec.input_size,
        classifier.spec.num_classes,
    )?;
    train_gan_with(&classifier, &data, &run.train, &run.output_dir, progress)
}

pub fn train_gan_with(
    classifier: &ClassifierParams,
    data: &Dataset,
    config: &TrainConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&StepMetrics),
) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{}", StepMetrics::HEADER).map_err(io_err(&metrics_path))?;

    let mut state = TrainState::init(&classifier.spec, config)?;
    let mut snapshots = Vec::new();
    let save = |state: &TrainState, snapshots: &mut Vec<PathBuf>| -> Result<()> {
        let path = out_dir.join(snapshot_name(state.step));
        checkpoint::save_training(&path, state, classifier, config.seed)?;
        snapshots.push(path);
        Ok(())
    };
    save(&state, &mut snapshots)?;
    while state.step < config.steps {
        let m = match trainer::advance(&mut state, classifier, config, data) {
            Ok(m) => m,
            Err(pyragen_core::Error::Divergence(what)) => {
                let last = snapshots
                    .last()
                    .expect("initial snapshot")
                    .display()
                    .to_string();
                let what = format!("{what}; last good checkpoint: {last}");
                return Err(Error::Core(pyragen_core::Error::Divergence(what)));
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(metrics, "{}", m.tsv_row()).map_err(io_err(&metrics_path))?;
        metrics.flush().map_err(io_err(&metrics_path))?;
        progress(&m);
        if is_snapshot_step(state.step, config.snapshot_every, config.steps) {
            save(&state, &mut snapshots)?;
        }
    }
    Ok(RunOutcome {
        final_checkpoint: snapshots.last().cloned().expect("initial snapshot"),
        snapshots,
        metrics: metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_schedule() {
        let count = |n: u64, k: u64| (0..=n).filter(|&s| is_snapshot_step(s, k, n)).count() as u64;
        assert_eq!(count(0, 5), 1);
        assert_eq!(count(10, 5), 3);
        assert_eq!(count(20_000, 1_000), 21);
        // a partial final interval still gets its own snapshot
        assert_eq!(count(7, 5), 3);
    }
}
