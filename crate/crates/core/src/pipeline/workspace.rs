//! On-disk workspace: directory layout, advisory lock and run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{ErrorKind, Write as _};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const STAGE_DIRS: [&str; 9] = ["frames", "gt", "flow", "masks", "views", "depth", "cloud", "rig", "report"];

pub fn frame_name(l: usize) -> String {
    format!("frames/frame_{l:04}.png")
}

pub fn view_depth_name(l: usize, view: usize) -> String {
    format!("depth_{l:04}_v{view:02}.pfm")
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Held while a process works on a workspace; removed on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
pub enum LockError {
    Held(PathBuf),
    Io(Error),
}

#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    _lock: WorkspaceLock,
}

impl Workspace {
    /// Create the layout if needed and take the lock.
    pub fn open(root: impl Into<PathBuf>) -> std::result::Result<Self, LockError> {
        let root = root.into();
        let io = |e: std::io::Error| LockError::Io(e.into());
        for d in STAGE_DIRS {
            fs::create_dir_all(root.join(d)).map_err(io)?;
        }
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(io)?;
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => return Err(LockError::Held(path)),
            Err(e) => return Err(io(e)),
        }
        Ok(Workspace {
            root,
            _lock: WorkspaceLock { path },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Number of consecutive `frames/frame_NNNN.png` starting at 1.
    pub fn frame_count(&self) -> usize {
        (1..).take_while(|&l| self.path(&frame_name(l)).is_file()).count()
    }

    /// Files under `dir` (recursively) whose names satisfy `keep`, as sorted relative paths.
    pub fn list(&self, dir: &str, keep: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = vec![self.path(dir)];
        while let Some(d) = stack.pop() {
            if !d.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&d)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().and_then(|n| n.to_str()).is_some_and(&keep) {
                    out.push(self.relative(&p));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn relative(&self, p: &Path) -> String {
        let rel = p.strip_prefix(&self.root).unwrap_or(p);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path(MANIFEST_FILE)
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        match fs::read_to_string(self.manifest_path()) {
            Ok(text) => Manifest::parse(&text),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save_manifest(&self, m: &Manifest) -> Result<()> {
        let tmp = self.path("manifest.txt.tmp");
        fs::write(&tmp, m.to_text())?;
        fs::rename(tmp, self.manifest_path())?;
        Ok(())
    }
}

/// What a completed stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StageEntry {
    pub input_hash: String,
    /// `(relative path, sha256)` of every output, sorted by path.
    pub files: Vec<(String, String)>,
}

/// The run manifest. Holds no timestamps or absolute paths, so identical runs write
/// identical manifests.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    /// Canonical `key = value` config lines.
    pub config: Vec<String>,
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# panost run manifest\n");
        let w = "writing to a String cannot fail";
        writeln!(s, "seed {}", self.seed).expect(w);
        writeln!(s, "config {}", self.config_hash).expect(w);
        for line in &self.config {
            writeln!(s, "set {line}").expect(w);
        }
        for (name, st) in &self.stages {
            writeln!(s, "stage {name} {}", st.input_hash).expect(w);
            for (path, digest) in &st.files {
                writeln!(s, "file {path} {digest}").expect(w);
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        let mut current: Option<String> = None;
        let mut offset = 0u64;
        for line in text.lines() {
            let at = offset;
            let bad = |msg: &str| Error::format(at, format!("manifest: {msg}: {line:?}"));
            offset += line.len() as u64 + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, rest) = line.split_once(' ').ok_or_else(|| bad("missing value"))?;
            match tag {
                "seed" => m.seed = rest.parse().map_err(|_| bad("bad seed"))?,
                "config" => m.config_hash = rest.to_string(),
                "set" => m.config.push(rest.to_string()),
                "stage" => {
                    let (name, hash) = rest.split_once(' ').ok_or_else(|| bad("stage needs a hash"))?;
                    m.stages.insert(
                        name.to_string(),
                        StageEntry {
                            input_hash: hash.to_string(),
                            files: Vec::new(),
                        },
                    );
                    current = Some(name.to_string());
                }
                "file" => {
                    let (path, digest) = rest.rsplit_once(' ').ok_or_else(|| bad("file needs a digest"))?;
                    let stage = current.as_ref().ok_or_else(|| bad("file before any stage"))?;
                    let entry = m.stages.get_mut(stage).expect("current stage was inserted");
                    entry.files.push((path.to_string(), digest.to_string()));
                }
                _ => return Err(bad("unknown record")),
            }
        }
        Ok(m)
    }

    /// The `set` lines as config text.
    pub fn config_text(&self) -> String {
        self.config.iter().map(|l| format!("{l}\n")).collect()
    }
}
