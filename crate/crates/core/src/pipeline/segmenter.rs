//! Subprocess contract with the external segmenter.
//!
//! Commands are argv templates; `{train_dir}`, `{label_dir}`, `{model_dir}`,
//! `{input_dir}` and `{output_dir}` are replaced with paths before launch.

use std::fs::{self, File};
use std::path::Path;
use std::process::{Command, Stdio};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// `<case>.nii.gz` label maps.
    Labels,
    /// `<case>_prob_<class>.nii.gz` probability maps, one per class.
    #[default]
    Probabilities,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterContract {
    pub train_cmd: Vec<String>,
    pub predict_cmd: Vec<String>,
    pub output_mode: OutputMode,
}

impl SegmenterContract {
    pub fn validate(&self) -> Result<()> {
        if self.train_cmd.is_empty() || self.predict_cmd.is_empty() {
            return Err(Error::InvalidParams("segmenter train_cmd and predict_cmd must be set".into()));
        }
        Ok(())
    }

    pub fn train(&self, train_dir: &Path, label_dir: &Path, model_dir: &Path, log: &Path) -> Result<()> {
        let argv = expand(
            &self.train_cmd,
            &[("train_dir", train_dir), ("label_dir", label_dir), ("model_dir", model_dir)],
        );
        run_logged(&argv, log)
    }

    pub fn predict(&self, model_dir: &Path, input_dir: &Path, output_dir: &Path, log: &Path) -> Result<()> {
        let argv = expand(
            &self.predict_cmd,
            &[("model_dir", model_dir), ("input_dir", input_dir), ("output_dir", output_dir)],
        );
        run_logged(&argv, log)
    }
}

/// Substitutes `{name}` placeholders in every argument.
pub fn expand(template: &[String], vars: &[(&str, &Path)]) -> Vec<String> {
    template
        .iter()
        .map(|arg| {
            vars.iter().fold(arg.clone(), |acc, (name, path)| {
                acc.replace(&format!("{{{name}}}"), &path.display().to_string())
            })
        })
        .collect()
}

/// Runs `argv` to completion with stdout and stderr appended to `log`.
pub fn run_logged(argv: &[String], log: &Path) -> Result<()> {
    let (prog, args) = argv.split_first().ok_or(Error::EmptyInput("empty segmenter command"))?;
    if let Some(dir) = log.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let out = File::options()
        .create(true)
        .append(true)
        .open(log)
        .map_err(|e| Error::io(log, e))?;
    let err = out.try_clone().map_err(|e| Error::io(log, e))?;
    debug!("running {argv:?}");
    let status = Command::new(prog)
        .args(args)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .status()
        .map_err(|source| Error::Spawn {
            command: argv.join(" "),
            source,
        })?;
    if !status.success() {
        return Err(Error::Segmenter {
            command: argv.join(" "),
            status: format!("{status} (see {})", log.display()),
        });
    }
    Ok(())
}
