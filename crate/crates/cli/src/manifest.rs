use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the output directory, `/`-separated.
    pub path: String,
}

/// Record of one invocation: what ran, with which seed, and every file it
/// left in the output directory besides the manifest itself.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub artifacts: Vec<Artifact>,
    pub summary: toml::Table,
    /// Resolved config, present for config-driven commands.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<toml::Table>,
}

impl RunManifest {
    pub fn artifact(&self, kind: &str) -> Option<PathBuf> {
        self.artifacts
            .iter()
            .find(|a| a.kind == kind)
            .map(|a| self.output_dir.join(&a.path))
    }

    pub fn path(&self) -> PathBuf {
        self.output_dir.join(MANIFEST_FILE)
    }
}

/// An output directory being filled by one command.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    created: bool,
    artifacts: Vec<Artifact>,
}

impl OutputDir {
    /// Creates `root`, or accepts it if it exists and is empty.
    pub fn prepare(root: &Path) -> CliResult<Self> {
        let created = match fs::read_dir(root) {
            Ok(mut entries) => {
                if entries.next().is_some() {
                    return Err(CliError::io(
                        root,
                        std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory is not empty"),
                    ));
                }
                false
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
                true
            }
            Err(e) => return Err(CliError::io(root, e)),
        };
        Ok(Self {
            root: root.to_path_buf(),
            created,
            artifacts: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn create_subdir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.join(rel);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    /// Writes `bytes` to `rel` and records it.
    pub fn write(&mut self, kind: &str, rel: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.record(kind, rel);
        Ok(p)
    }

    /// Records a file written by someone else.
    pub fn record(&mut self, kind: &str, rel: &str) {
        self.artifacts.push(Artifact {
            kind: kind.into(),
            path: rel.into(),
        });
    }

    /// Records every file under `dir` (as given by `files`) relative to root.
    pub fn record_all(&mut self, kind: &str, files: &[PathBuf]) -> CliResult<()> {
        for f in files {
            let rel = f
                .strip_prefix(&self.root)
                .map_err(|_| CliError::Usage(format!("{} lies outside the output directory", f.display())))?;
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            self.record(kind, &rel.join("/"));
        }
        Ok(())
    }

    /// Writes the manifest and hands it back.
    pub fn finish(
        self,
        command: &str,
        seed: Option<u64>,
        summary: toml::Table,
        config: Option<toml::Table>,
    ) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            command: command.into(),
            seed,
            output_dir: self.root.clone(),
            artifacts: self.artifacts,
            summary,
            config,
        };
        let text = toml::to_string(&manifest).map_err(|e| CliError::Usage(format!("cannot serialise manifest: {e}")))?;
        let p = manifest.path();
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(manifest)
    }

    /// Removes what this command wrote after a failure.
    pub fn abandon(self) {
        if self.created {
            let _ = fs::remove_dir_all(&self.root);
        } else if let Ok(entries) = fs::read_dir(&self.root) {
            for e in entries.flatten() {
                let p = e.path();
                let _ = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            }
        }
    }
}
