//! Run directories, stage manifests and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pointq_pipeline::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of a resolved config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

/// Hash of a file, or of a directory as the hash of its sorted
/// `relative-path hash` lines.
pub fn hash_path(path: &Path) -> anyhow::Result<String> {
    if path.is_file() {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(sha256_hex(&bytes));
    }
    let mut lines = Vec::new();
    collect_hashes(path, path, &mut lines)?;
    lines.sort();
    Ok(sha256_hex(lines.join("\n").as_bytes()))
}

fn collect_hashes(root: &Path, dir: &Path, out: &mut Vec<String>) -> anyhow::Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_hashes(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("walked from root");
            out.push(format!("{} {}", rel.display(), hash_path(&p)?));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Resolved configuration the stage ran with.
    pub config: ExperimentConfig,
    /// Stage-specific options that are not part of the config.
    pub options: BTreeMap<String, String>,
    /// Artifact hashes of every stage this one read, keyed by stage.
    pub upstream: BTreeMap<String, BTreeMap<String, String>>,
    pub artifacts: BTreeMap<String, String>,
}

/// `<root>/<name>`.
pub struct Run {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub strict: bool,
    upstream: BTreeMap<String, BTreeMap<String, String>>,
}

impl Run {
    pub fn new(root: &Path, name: &str, config: ExperimentConfig, strict: bool) -> Self {
        Self {
            dir: root.join(name),
            config,
            strict,
            upstream: BTreeMap::new(),
        }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.dir.join(stage)
    }

    /// Path of `file` inside a finished upstream stage, recording that stage's
    /// artifacts. Fails with a message naming what is missing.
    pub fn require(&mut self, stage: &str, file: &str, hint: &str) -> Result<PathBuf, CliError> {
        let dir = self.stage_dir(stage);
        let path = dir.join(file);
        let manifest_path = dir.join(MANIFEST);
        if !path.exists() || !manifest_path.exists() {
            return Err(CliError::User(format!(
                "missing {}: {} not found; run `{hint}` first",
                describe(stage),
                path.display()
            )));
        }
        let text = fs::read_to_string(&manifest_path)
            .with_context(|| format!("reading {}", manifest_path.display()))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::User(format!("{}: invalid manifest: {e}", manifest_path.display())))?;
        let ours = config_hash(&self.config);
        if manifest.config_sha256 != ours {
            let msg = format!(
                "config of stage '{stage}' ({}) differs from the current config ({})",
                &manifest.config_sha256[..12],
                &ours[..12]
            );
            if self.strict {
                return Err(CliError::User(msg));
            }
            log::warn!("{msg}");
        }
        self.upstream.insert(stage.to_string(), manifest.artifacts);
        Ok(path)
    }

    /// Creates a scratch directory for `stage`; refuses if the stage exists.
    pub fn begin(&self, stage: &str) -> Result<Stage, CliError> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            return Err(CliError::User(format!(
                "{} already exists; runs are never overwritten, pick another --name",
                dir.display()
            )));
        }
        let scratch = self.dir.join(format!(".{stage}.partial-{}", std::process::id()));
        if scratch.exists() {
            fs::remove_dir_all(&scratch).with_context(|| format!("clearing {}", scratch.display()))?;
        }
        fs::create_dir_all(&scratch).with_context(|| format!("creating {}", scratch.display()))?;
        Ok(Stage {
            name: stage.to_string(),
            scratch,
            target: dir,
            options: BTreeMap::new(),
        })
    }

    /// Writes the manifest and moves the stage into place. Returns the
    /// manifest's hash.
    pub fn finish(&self, stage: Stage) -> Result<String, CliError> {
        let mut artifacts = BTreeMap::new();
        let mut entries: Vec<_> = fs::read_dir(&stage.scratch)
            .with_context(|| format!("listing {}", stage.scratch.display()))?
            .collect::<Result<_, _>>()
            .context("listing stage artifacts")?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let name = e.file_name().to_string_lossy().into_owned();
            artifacts.insert(name, hash_path(&e.path())?);
        }
        let manifest = Manifest {
            stage: stage.name.clone(),
            config_sha256: config_hash(&self.config),
            seed: self.config.seed,
            config: self.config.clone(),
            options: stage.options,
            upstream: self.upstream.clone(),
            artifacts,
        };
        let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        fs::write(stage.scratch.join(MANIFEST), &bytes).context("writing manifest")?;
        fs::rename(&stage.scratch, &stage.target)
            .with_context(|| format!("moving stage into {}", stage.target.display()))?;
        Ok(sha256_hex(&bytes))
    }
}

pub struct Stage {
    pub name: String,
    pub scratch: PathBuf,
    target: PathBuf,
    pub options: BTreeMap<String, String>,
}

impl Stage {
    pub fn path(&self, file: &str) -> PathBuf {
        self.scratch.join(file)
    }

    pub fn write(&self, file: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let p = self.path(file);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn option(&mut self, key: &str, value: impl ToString) {
        self.options.insert(key.to_string(), value.to_string());
    }
}

fn describe(stage: &str) -> String {
    match stage {
        "data" => "dataset".into(),
        s if s.starts_with("teacher") => format!("teacher checkpoint ({s})"),
        s if s.starts_with("pseudo") => format!("pseudo-labels ({s})"),
        s => format!("checkpoint ({s})"),
    }
}
