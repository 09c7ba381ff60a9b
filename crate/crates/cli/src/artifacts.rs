//! On-disk layout of a run directory and the provenance files written
//! next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use repsurgery::checkpoint;
use repsurgery::data::make_tasks;
use repsurgery::model::TaskHead;
use repsurgery::pipeline::{MergeMethod, Prepared, RunConfig};
use repsurgery::surgery::SurgeryBundle;
use repsurgery::{Error, ParameterMap};

use crate::config;

pub const VERSION_TAG: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const VERSION_FILE: &str = "VERSION";

/// Paths of every artifact under the configured output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn prepare_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("prepare")
    }

    pub fn base(&self, seed: u64) -> PathBuf {
        self.prepare_dir(seed).join("theta0.msrg")
    }

    pub fn finetuned(&self, seed: u64, task: usize) -> PathBuf {
        self.prepare_dir(seed).join(format!("task-{task}.msrg"))
    }

    pub fn heads(&self, seed: u64) -> PathBuf {
        self.prepare_dir(seed).join("heads.msrg")
    }

    pub fn merge_dir(&self, seed: u64, method: MergeMethod) -> PathBuf {
        self.seed_dir(seed).join("merge").join(method.cli_name())
    }

    pub fn merged(&self, seed: u64, method: MergeMethod) -> PathBuf {
        self.merge_dir(seed, method).join("merged.msrg")
    }

    pub fn surgery_dir(&self, seed: u64, method: MergeMethod) -> PathBuf {
        self.seed_dir(seed).join("surgery").join(method.cli_name())
    }

    pub fn modules(&self, seed: u64, method: MergeMethod) -> PathBuf {
        self.surgery_dir(seed, method).join("modules.msrg")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn reproduce_dir(&self, suite: &str) -> PathBuf {
        self.root.join("reproduce").join(suite)
    }
}

pub fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Index of an output directory: every file with its SHA-256.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub command: String,
    pub files: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok((hex, bytes.len() as u64))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes config, version tag and manifest into `dir`. Call after all
/// other outputs of the command are in place.
pub fn finalize_dir(dir: &Path, command: &str, cfg: &RunConfig) -> Result<Manifest, Error> {
    write_text(&dir.join(CONFIG_FILE), &config::to_toml(cfg)?)?;
    write_text(&dir.join(VERSION_FILE), &format!("{VERSION_TAG}\n"))?;
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut entries = Vec::new();
    for path in files {
        let rel = path.strip_prefix(dir).expect("listed under dir");
        if rel == Path::new(MANIFEST) {
            continue;
        }
        let (sha256, bytes) = sha256_file(&path)?;
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        entries.push(FileEntry {
            path: rel,
            sha256,
            bytes,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        tool: VERSION_TAG.into(),
        command: command.into(),
        files: entries,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Fails with every missing path listed when any of `paths` is absent.
pub fn require_files(paths: &[PathBuf]) -> Result<(), Error> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "missing artifacts:\n  {}",
            missing.join("\n  ")
        )))
    }
}

pub fn save_prepared(
    layout: &Layout,
    cfg: &RunConfig,
    prepared: &Prepared,
) -> Result<Manifest, Error> {
    let seed = prepared.seed;
    let dir = layout.prepare_dir(seed);
    create_dir(&dir.join("data"))?;
    checkpoint::save(&prepared.base, layout.base(seed))?;
    for (t, theta) in prepared.finetuned.iter().enumerate() {
        checkpoint::save(theta, layout.finetuned(seed, t))?;
    }
    checkpoint::save(&TaskHead::to_params(&prepared.heads)?, layout.heads(seed))?;
    for task in &prepared.tasks {
        for kind in [
            repsurgery::data::SplitKind::Train,
            repsurgery::data::SplitKind::Test,
        ] {
            let name = match kind {
                repsurgery::data::SplitKind::Train => "train",
                repsurgery::data::SplitKind::Test => "test",
            };
            task.write_csv(
                kind,
                dir.join("data")
                    .join(format!("task-{}-{name}.csv", task.task)),
            )?;
        }
    }
    finalize_dir(&dir, "prepare", &cfg_for_seed(cfg, seed))
}

pub fn cfg_for_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..cfg.clone()
    }
}

/// Settings that determine the prepared artifacts of a seed.
fn preparation_key(cfg: &RunConfig) -> Result<String, Error> {
    let key = serde_json::json!({
        "suite": cfg.suite,
        "model": cfg.model,
        "pretext": cfg.pretext,
        "pretrain": cfg.pretrain,
        "finetune": cfg.finetune,
    });
    Ok(key.to_string())
}

/// Loads a prepared seed, refusing artifacts produced by different
/// data/model/training settings. Datasets are regenerated from the seed.
pub fn load_prepared(layout: &Layout, cfg: &RunConfig, seed: u64) -> Result<Prepared, Error> {
    let mut paths = vec![
        layout.base(seed),
        layout.heads(seed),
        layout.prepare_dir(seed).join(CONFIG_FILE),
    ];
    paths.extend((0..cfg.suite.tasks).map(|t| layout.finetuned(seed, t)));
    require_files(&paths)?;
    let stored = config::parse_config(&read_text(&layout.prepare_dir(seed).join(CONFIG_FILE))?)?;
    if preparation_key(&stored)? != preparation_key(cfg)? {
        return Err(Error::Config(format!(
            "artifacts in {} were prepared with different data/model/training settings; rerun prepare",
            layout.prepare_dir(seed).display()
        )));
    }
    let base = checkpoint::load(layout.base(seed))?;
    let finetuned = (0..cfg.suite.tasks)
        .map(|t| checkpoint::load(layout.finetuned(seed, t)))
        .collect::<Result<Vec<_>, _>>()?;
    let heads = TaskHead::from_params(&checkpoint::load(layout.heads(seed))?)?;
    Ok(Prepared {
        seed,
        tasks: make_tasks(seed, &cfg.suite)?,
        base,
        finetuned,
        heads,
    })
}

/// Uses prepared artifacts when present and matching, otherwise trains in memory.
pub fn load_or_prepare(layout: &Layout, cfg: &RunConfig, seed: u64) -> Result<Prepared, Error> {
    if layout.base(seed).is_file() {
        match load_prepared(layout, cfg, seed) {
            Ok(p) => return Ok(p),
            Err(e) => log::warn!("ignoring stored artifacts for seed {seed}: {e}"),
        }
    }
    Prepared::build(cfg, seed)
}

pub fn load_merged(layout: &Layout, seed: u64, method: MergeMethod) -> Result<ParameterMap, Error> {
    let path = layout.merged(seed, method);
    require_files(std::slice::from_ref(&path))?;
    checkpoint::load(path)
}

pub fn load_bundle(
    layout: &Layout,
    prepared: &Prepared,
    method: MergeMethod,
) -> Result<SurgeryBundle, Error> {
    let seed = prepared.seed;
    require_files(&[layout.merged(seed, method), layout.modules(seed, method)])?;
    let bundle = SurgeryBundle {
        merged: checkpoint::load(layout.merged(seed, method))?,
        modules: SurgeryBundle::modules_from_params(&checkpoint::load(
            layout.modules(seed, method),
        )?)?,
        heads: prepared.heads.clone(),
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_files_with_hashes_and_skips_itself() {
        let dir = tempfile::tempdir().unwrap();
        write_text(&dir.path().join("a.txt"), "abc").unwrap();
        write_text(&dir.path().join("sub/b.txt"), "").unwrap();
        let m = finalize_dir(dir.path(), "test", &RunConfig::default()).unwrap();
        let paths: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, vec!["VERSION", "a.txt", CONFIG_FILE, "sub/b.txt"]);
        let a = &m.files[1];
        // SHA-256 of "abc"
        assert_eq!(
            a.sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(a.bytes, 3);
        let again = finalize_dir(dir.path(), "test", &RunConfig::default()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn missing_files_are_all_named() {
        let err = require_files(&[
            PathBuf::from("/nonexistent/x"),
            PathBuf::from("/nonexistent/y"),
        ])
        .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("/nonexistent/x") && msg.contains("/nonexistent/y"),
            "{msg}"
        );
    }
}
