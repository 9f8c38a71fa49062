//! Run manifests: the resolved invocation, derived seeds and content hashes
//! of every input and artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commands::{execute, Invocation, RunOutput};
use crate::error::{CliError, CliResult};
use crate::io::{sha256_file, sha256_hex, write_atomic};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRecord {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    /// File name of the manifest relative to the output directory.
    pub file_name: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, InputRecord>,
    pub artifacts: Vec<ArtifactRecord>,
    pub invocation: Invocation,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes to TOML")
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let m: Manifest =
            toml::from_str(text).map_err(|e| CliError::Config(vec![format!("invalid manifest: {}", e.message())]))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(CliError::Config(vec![format!(
                "unsupported manifest version {}",
                m.manifest_version
            )]));
        }
        m.invocation.config.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Where a run's artifacts go.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputTarget {
    pub dir: PathBuf,
    /// Manifest file name inside `dir`.
    pub manifest_name: String,
    /// Renames of artifacts, for single-file commands whose artifact name is
    /// chosen on the command line.
    pub renames: BTreeMap<String, String>,
}

impl OutputTarget {
    pub fn directory(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            manifest_name: "manifest.toml".into(),
            renames: BTreeMap::new(),
        }
    }

    /// A single artifact written to `path`, with its manifest beside it.
    pub fn file(path: &Path, artifact: &str) -> CliResult<Self> {
        let name = path
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?
            .to_string_lossy()
            .into_owned();
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Ok(Self {
            dir,
            manifest_name: format!("{name}.manifest.toml"),
            renames: BTreeMap::from([(artifact.to_string(), name)]),
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(&self.manifest_name)
    }
}

fn hash_inputs(inv: &Invocation) -> CliResult<BTreeMap<String, InputRecord>> {
    inv.input_files()
        .into_iter()
        .map(|(label, path)| {
            let sha256 = sha256_file(&path)?;
            Ok((label, InputRecord { path, sha256 }))
        })
        .collect()
}

/// Writes every artifact atomically, then the manifest.
pub fn persist(inv: &Invocation, run: &RunOutput, target: &OutputTarget) -> CliResult<Manifest> {
    let inputs = hash_inputs(inv)?;
    let mut artifacts = Vec::with_capacity(run.artifacts.len());
    for a in &run.artifacts {
        let name = target.renames.get(&a.name).cloned().unwrap_or_else(|| a.name.clone());
        write_atomic(&target.dir.join(&name), &a.bytes)?;
        artifacts.push(ArtifactRecord {
            name,
            bytes: a.bytes.len(),
            sha256: sha256_hex(&a.bytes),
        });
    }
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        file_name: target.manifest_name.clone(),
        seeds: run.seeds.clone(),
        inputs,
        artifacts,
        invocation: inv.clone(),
    };
    write_atomic(&target.manifest_path(), manifest.to_toml().as_bytes())?;
    Ok(manifest)
}

/// Re-executes a manifest into `dir` and checks every artifact hash.
pub fn rerun(manifest_path: &Path, dir: &Path) -> CliResult<(Manifest, RunOutput)> {
    let original = Manifest::load(manifest_path)?;
    for (label, rec) in &original.inputs {
        let now = sha256_file(&rec.path)?;
        if now != rec.sha256 {
            return Err(CliError::Mismatch(format!(
                "input {label} ({}) changed since the manifest was written",
                rec.path.display()
            )));
        }
    }
    let run = execute(&original.invocation)?;
    let mut target = OutputTarget::directory(dir);
    target.manifest_name = original.file_name.clone();
    // Single-file commands recorded their chosen artifact name.
    if run.artifacts.len() == 1 && original.artifacts.len() == 1 {
        target
            .renames
            .insert(run.artifacts[0].name.clone(), original.artifacts[0].name.clone());
    }
    let fresh = persist(&original.invocation, &run, &target)?;
    let expected: BTreeMap<_, _> = original.artifacts.iter().map(|a| (&a.name, &a.sha256)).collect();
    let actual: BTreeMap<_, _> = fresh.artifacts.iter().map(|a| (&a.name, &a.sha256)).collect();
    if expected != actual {
        let differing: Vec<String> = expected
            .keys()
            .chain(actual.keys())
            .filter(|k| expected.get(*k) != actual.get(*k))
            .map(|k| k.to_string())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        return Err(CliError::Mismatch(format!(
            "artifacts differ from the manifest: {}",
            differing.join(", ")
        )));
    }
    Ok((fresh, run))
}
