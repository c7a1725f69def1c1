//! Snapshot namespace and staging transactions.
//!
//! ```text
//! <store>/staging/<uuid>/        in-progress run, never read by anyone else
//! <store>/snapshots/<sid>/       header.json payload.bin manifest.json plan.json
//! <store>/commits.jsonl          one CommitRecord per published run
//! ```
//!
//! A snapshot becomes visible through one directory rename.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, MANIFEST_FILE, PLAN_FILE};
use crate::container::{BlockKey, CheckpointHandle};
use crate::digest::Digest;
use crate::error::{Error, Result};

pub const STAGING_DIR: &str = "staging";
pub const SNAPSHOTS_DIR: &str = "snapshots";
pub const COMMIT_LOG: &str = "commits.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub sid: Digest,
    pub plan_digest: Digest,
    pub manifest_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    /// Logical output payload digest.
    pub id: Digest,
    pub path: PathBuf,
    pub manifest_path: PathBuf,
}

impl Snapshot {
    pub fn plan_path(&self) -> PathBuf {
        self.path.join(PLAN_FILE)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Manifest::load(&self.manifest_path)
    }

    /// Opens the published container, resolving base references through `base`.
    pub fn open(&self, base: &CheckpointHandle) -> Result<CheckpointHandle> {
        let manifest = self.manifest()?;
        let handle = CheckpointHandle::open(&self.path)?;
        let refs: BTreeSet<BlockKey> = manifest.references.iter().cloned().collect();
        if refs.is_empty() && handle.header().base_ref.is_none() {
            return Ok(handle);
        }
        handle.with_base_references(base, refs)
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn fsync_dir(path: &Path) -> Result<()> {
    #[cfg(unix)]
    {
        let dir = File::open(path).map_err(|e| Error::io(path, e))?;
        dir.sync_all().map_err(|e| Error::io(path, e))?;
    }
    #[cfg(not(unix))]
    let _ = path;
    Ok(())
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for sub in [STAGING_DIR, SNAPSHOTS_DIR] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn snapshot_dir(&self, sid: &Digest) -> PathBuf {
        self.root.join(SNAPSHOTS_DIR).join(sid.to_hex())
    }

    pub fn begin(&self) -> Result<Transaction> {
        let dir = self.root.join(STAGING_DIR).join(uuid::Uuid::new_v4().to_string());
        fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Transaction {
            dir,
            store: self.clone(),
            done: false,
        })
    }

    /// Published snapshot ids, sorted.
    pub fn snapshots(&self) -> Result<Vec<Digest>> {
        let dir = self.root.join(SNAPSHOTS_DIR);
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if let Some(sid) = entry.file_name().to_str().and_then(|s| s.parse::<Digest>().ok()) {
                out.push(sid);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn staging_entries(&self) -> Result<Vec<PathBuf>> {
        let dir = self.root.join(STAGING_DIR);
        let mut out: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        out.sort();
        Ok(out)
    }

    /// Removes staging directories left behind by a crashed process.
    pub fn clean_staging(&self) -> Result<usize> {
        let entries = self.staging_entries()?;
        for p in &entries {
            fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        Ok(entries.len())
    }

    pub fn snapshot(&self, sid: &Digest) -> Result<Snapshot> {
        let path = self.snapshot_dir(sid);
        let manifest_path = path.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::InvalidParameter(format!("no snapshot {sid} in {}", self.root.display())));
        }
        Ok(Snapshot {
            id: *sid,
            path,
            manifest_path,
        })
    }

    pub fn commits(&self) -> Result<Vec<CommitRecord>> {
        let path = self.root.join(COMMIT_LOG);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub(crate) fn append_commit(&self, record: &CommitRecord) -> Result<()> {
        let path = self.root.join(COMMIT_LOG);
        let mut line = crate::digest::canonical_json(record)?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(&line).map_err(|e| Error::io(&path, e))?;
        f.sync_all().map_err(|e| Error::io(&path, e))
    }
}

/// Exclusive staging area for one run. Dropping it without publishing
/// removes everything it wrote.
#[derive(Debug)]
pub struct Transaction {
    dir: PathBuf,
    store: Store,
    done: bool,
}

impl Transaction {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Renames the staging directory to `snapshots/<sid>`. Returns whether a
    /// new snapshot was created; an existing one with the same id counts as
    /// success and the staged copy is discarded.
    pub fn publish(mut self, sid: &Digest) -> Result<(Snapshot, bool)> {
        fsync_dir(&self.dir)?;
        let target = self.store.snapshot_dir(sid);
        let created = if target.exists() {
            false
        } else {
            match fs::rename(&self.dir, &target) {
                Ok(()) => {
                    self.done = true;
                    fsync_dir(&self.store.root.join(SNAPSHOTS_DIR))?;
                    true
                }
                // A concurrent publisher won the race with identical content.
                Err(_) if target.join(MANIFEST_FILE).is_file() => false,
                Err(e) => return Err(Error::io(&target, e)),
            }
        };
        let snapshot = self.store.snapshot(sid)?;
        Ok((snapshot, created))
    }

    pub fn abort(self) {}
}

impl Drop for Transaction {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropped_transaction_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let txn = store.begin().unwrap();
        fs::write(txn.dir().join("payload.bin"), b"x").unwrap();
        assert_eq!(store.staging_entries().unwrap().len(), 1);
        txn.abort();
        assert!(store.staging_entries().unwrap().is_empty());
        assert!(store.snapshots().unwrap().is_empty());
    }

    #[test]
    fn publish_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let sid = Digest([3; 32]);
        for round in 0..2 {
            let txn = store.begin().unwrap();
            fs::write(txn.dir().join(MANIFEST_FILE), b"{}").unwrap();
            let (snap, created) = txn.publish(&sid).unwrap();
            assert_eq!(created, round == 0);
            assert_eq!(snap.id, sid);
        }
        assert_eq!(store.snapshots().unwrap(), vec![sid]);
        assert!(store.staging_entries().unwrap().is_empty());
    }

    #[test]
    fn commit_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(store.commits().unwrap().is_empty());
        let r = CommitRecord {
            sid: Digest([1; 32]),
            plan_digest: Digest([2; 32]),
            manifest_digest: Digest([3; 32]),
        };
        store.append_commit(&r).unwrap();
        store.append_commit(&r).unwrap();
        assert_eq!(store.commits().unwrap(), vec![r.clone(), r]);
    }
}
