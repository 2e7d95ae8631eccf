use std::fs;
use std::path::{Path, PathBuf};

use crate::datamodel::RunManifest;
use crate::error::{io_err, Error, Result};
use crate::influence::sha256_hex;

/// A run directory: `manifest.json` plus one numbered subdirectory of
/// `artifacts/` per command invocation. Earlier invocations are never
/// overwritten.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

pub const MANIFEST: &str = "manifest.json";
pub const CHECKSUMS: &str = "SHA256SUMS";

impl RunDir {
    /// Creates the directory layout if missing. Does not write a manifest.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("artifacts")).map_err(io_err(root))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    /// Opens an existing run; fails when there is no manifest.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = root.join(MANIFEST);
        if !manifest.is_file() {
            return Err(Error::Config(format!("{} is not a run directory (no {MANIFEST})", root.display())));
        }
        Self::create(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }

    pub fn load_manifest(&self) -> Result<RunManifest> {
        RunManifest::load(&self.manifest_path())
    }

    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<()> {
        manifest.save(&self.manifest_path())
    }

    /// Resolves a manifest-relative path.
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    /// Path relative to the run root, for recording in the manifest.
    pub fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
    }

    /// Invocation directories in creation order.
    pub fn invocations(&self) -> Result<Vec<PathBuf>> {
        let dir = self.root.join("artifacts");
        let mut out: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        out.sort();
        Ok(out)
    }

    /// Creates `artifacts/NNNN-<command>` with the next free number.
    pub fn new_invocation(&self, command: &str) -> Result<PathBuf> {
        let next = self
            .invocations()?
            .iter()
            .filter_map(|p| p.file_name()?.to_str()?.split('-').next()?.parse::<usize>().ok())
            .max()
            .map_or(1, |n| n + 1);
        let dir = self.root.join("artifacts").join(format!("{next:04}-{command}"));
        fs::create_dir(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    /// Writes `SHA256SUMS` for the regular files of `dir`, sorted by name.
    pub fn write_checksums(dir: &Path) -> Result<String> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n != CHECKSUMS)
            .collect();
        names.sort();
        let mut text = String::new();
        for n in names {
            text += &format!("{}  {n}\n", file_sha256(&dir.join(&n))?);
        }
        let path = dir.join(CHECKSUMS);
        fs::write(&path, &text).map_err(io_err(&path))?;
        Ok(text)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}
