//! Dataset manifests.
//!
//! UTF-8 text, one `key = value` per line; blank lines and `#` comments
//! are ignored:
//!
//! ```text
//! task = long_words
//! subject = S2
//! classes = cooperate,independent
//! trial = S2/long_words/trial0000.eegt
//! trial = S2/long_words/trial0001.eegt
//! ```
//!
//! `classes` lists class names in label order. Each `trial` line names one
//! trial file, relative to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ccvnet_core::Trial;

use crate::error::{AppError, Result};
use crate::trialfile;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub task: String,
    pub subject: String,
    pub classes: Vec<String>,
    /// Trial file paths as written in the manifest.
    pub trials: Vec<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut m = Manifest::default();
        let mut have_classes = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let v = v.trim();
            match k.trim() {
                "task" => m.task = v.to_string(),
                "subject" => m.subject = v.to_string(),
                "classes" => {
                    m.classes = v.split(',').map(|c| c.trim().to_string()).collect();
                    have_classes = true;
                }
                "trial" => m.trials.push(PathBuf::from(v)),
                other => return Err(format!("line {}: unknown key {other:?}", n + 1)),
            }
        }
        if !have_classes || m.classes.iter().any(String::is_empty) {
            return Err("classes must be a nonempty comma-separated list".into());
        }
        let mut seen = HashSet::new();
        if let Some(dup) = m.classes.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(format!("duplicate class name {dup:?}"));
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "task = {}\nsubject = {}\nclasses = {}\n",
            self.task,
            self.subject,
            self.classes.join(",")
        );
        for t in &self.trials {
            s.push_str(&format!("trial = {}\n", t.display()));
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Manifest::parse(&text).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| AppError::io(path, e))
    }

    /// Trial paths resolved against the manifest's directory.
    pub fn resolved(&self, manifest_path: &Path) -> Vec<PathBuf> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.trials
            .iter()
            .map(|t| if t.is_absolute() { t.clone() } else { base.join(t) })
            .collect()
    }
}

/// Loads every trial of a manifest, in manifest order, checking labels
/// against the class list.
pub fn load(manifest_path: &Path) -> Result<(Manifest, Vec<Trial>)> {
    let m = Manifest::read(manifest_path)?;
    let mut trials = Vec::with_capacity(m.trials.len());
    for path in m.resolved(manifest_path) {
        let file = trialfile::read(&path)?;
        if file.header.label as usize >= m.classes.len() {
            return Err(AppError::Parse {
                path,
                offset: 16,
                reason: format!(
                    "label {} out of range for {} classes",
                    file.header.label,
                    m.classes.len()
                ),
            });
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        trials.push(file.to_trial(&m.subject, &id).map_err(|e| AppError::at(&path, e))?);
    }
    Ok((m, trials))
}
