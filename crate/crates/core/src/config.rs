//! Experiment configs as TOML files, field-for-field with
//! [`ExperimentConfig`], plus the resolved-snapshot convention: every run
//! drops the exact configuration it executed into its output directory, so
//! re-running from that snapshot reproduces the outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::experiments::ExperimentConfig;
use crate::{Error, Result};

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_experiment_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Name of the snapshot every run writes into its output directory.
pub const SNAPSHOT_FILE: &str = "resolved-config.toml";

/// Serializes the values a run actually used (after defaults, clipping and
/// flag resolution) into `out_dir`. Returns the snapshot path.
pub fn write_snapshot<T: Serialize>(out_dir: &Path, resolved: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(SNAPSHOT_FILE);
    let text = toml::to_string_pretty(resolved)
        .map_err(|e| Error::Config(format!("serialize snapshot: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{Method, SweepKind};
    use crate::shiftgen::Axis;

    fn tempdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("unshift-config-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn configs_round_trip_through_toml() {
        let dir = tempdir("rt");
        let mut cfg = ExperimentConfig::mnist_finetune(vec![1, 2, 3]);
        cfg.train_limit = Some(6000);
        cfg.adapt.epochs = 12;
        let path = dir.join("exp.toml");
        save_experiment_config(&path, &cfg).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("sweep = \"finetune\""));
        assert!(text.contains("axes = [\"rotation\"]"));
        assert!(text.contains("\"ft-last\""));
        assert!(text.contains("train_limit = 6000"));

        let back = load_experiment_config(&path).unwrap();
        assert_eq!(back, cfg);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loading_rejects_unknown_fields_and_bad_semantics() {
        let dir = tempdir("bad");
        let path = dir.join("exp.toml");

        std::fs::write(&path, "this is not toml [").unwrap();
        assert!(load_experiment_config(&path).is_err());

        let mut cfg = ExperimentConfig::mnist_severity(1);
        save_experiment_config(&path, &cfg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, format!("mystery_knob = 3\n{text}")).unwrap();
        let err = load_experiment_config(&path).unwrap_err();
        assert!(err.to_string().contains("mystery_knob"), "{err}");
        // typos inside the nested adapt table are caught too
        std::fs::write(&path, format!("{text}\ntemprature = 1.0\n")).unwrap();
        assert!(load_experiment_config(&path).is_err());

        cfg.subsample_count = 1;
        save_experiment_config(&path, &cfg).unwrap();
        assert!(load_experiment_config(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn snapshots_land_in_the_output_directory_and_rerun() {
        let dir = tempdir("snap");
        let out = dir.join("run1");
        let mut cfg = ExperimentConfig::cifar_multiaxis(9);
        cfg.methods = vec![Method::Source];
        let snap = write_snapshot(&out, &cfg).unwrap();
        assert_eq!(snap, out.join(SNAPSHOT_FILE));

        // the snapshot is itself a loadable config describing the same run
        let back = load_experiment_config(&snap).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.sweep, SweepKind::Multiaxis);
        assert_eq!(back.axes, vec![Axis::Brightness, Axis::Contrast]);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
