//! Persistent last-group store used to resume subscriptions.
//!
//! The file is JSON lines, one record per update:
//! `{"track_hash": <hex sha256 of the track bytes>, "track": <base64 track
//! bytes>, "last_group": <n or null>}`. A null group removes the track.
//! The last record for a track wins. Records that fail to parse (such as a
//! line cut short by a crash) are skipped.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::track::TrackKey;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("resume store I/O: {0}")]
    Io(#[from] io::Error),
    #[error("resume store encoding: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct Line {
    track_hash: String,
    track: String,
    last_group: Option<u64>,
}

pub fn track_hash(track: &TrackKey) -> String {
    hex::encode(Sha256::digest(track.to_bytes()))
}

#[derive(Debug)]
pub struct ResumeStore {
    path: Option<PathBuf>,
    file: Option<File>,
    entries: BTreeMap<TrackKey, u64>,
}

impl Clone for ResumeStore {
    /// Clones the contents. The clone writes to the same file, if any.
    fn clone(&self) -> Self {
        ResumeStore {
            path: self.path.clone(),
            file: self.path.as_ref().and_then(|p| open_append(p).ok()),
            entries: self.entries.clone(),
        }
    }
}

fn open_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

impl ResumeStore {
    pub fn in_memory() -> Self {
        ResumeStore {
            path: None,
            file: None,
            entries: BTreeMap::new(),
        }
    }

    /// Loads `path`, creating it if missing.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = BTreeMap::new();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse_line(line) {
                Some((track, Some(g))) => {
                    entries.insert(track, g);
                }
                Some((track, None)) => {
                    entries.remove(&track);
                }
                None => warn!(path = %path.display(), line = n + 1, "skipping malformed resume record"),
            }
        }
        let mut file = open_append(&path)?;
        if !text.is_empty() && !text.ends_with('\n') {
            // Terminate a torn record so the next one starts on its own line.
            file.write_all(b"\n")?;
        }
        let file = Some(file);
        Ok(ResumeStore {
            path: Some(path),
            file,
            entries,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, track: &TrackKey) -> Option<u64> {
        self.entries.get(track).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&TrackKey, u64)> {
        self.entries.iter().map(|(t, g)| (t, *g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records `group` for `track` if it is newer than the stored one.
    pub fn record(&mut self, track: &TrackKey, group: u64) -> Result<bool, StoreError> {
        if self.entries.get(track).is_some_and(|g| *g >= group) {
            return Ok(false);
        }
        self.entries.insert(track.clone(), group);
        self.append(track, Some(group))?;
        Ok(true)
    }

    pub fn remove(&mut self, track: &TrackKey) -> Result<(), StoreError> {
        if self.entries.remove(track).is_some() {
            self.append(track, None)?;
        }
        Ok(())
    }

    /// Rewrites the file with one record per track.
    pub fn compact(&mut self) -> Result<(), StoreError> {
        let Some(path) = self.path.clone() else {
            return Ok(());
        };
        let tmp = path.with_extension("tmp");
        {
            let mut out = io::BufWriter::new(File::create(&tmp)?);
            for (track, g) in &self.entries {
                serde_json::to_writer(&mut out, &line(track, Some(*g)))?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        fs::rename(&tmp, &path)?;
        self.file = Some(open_append(&path)?);
        Ok(())
    }

    fn append(&mut self, track: &TrackKey, group: Option<u64>) -> Result<(), StoreError> {
        let Some(f) = self.file.as_mut() else {
            return Ok(());
        };
        let mut buf = serde_json::to_vec(&line(track, group))?;
        buf.push(b'\n');
        f.write_all(&buf)?;
        Ok(())
    }
}

fn line(track: &TrackKey, last_group: Option<u64>) -> Line {
    Line {
        track_hash: track_hash(track),
        track: BASE64.encode(track.to_bytes()),
        last_group,
    }
}

fn parse_line(s: &str) -> Option<(TrackKey, Option<u64>)> {
    let line: Line = serde_json::from_str(s).ok()?;
    let bytes = BASE64.decode(line.track.as_bytes()).ok()?;
    let track = TrackKey::from_bytes(&bytes).ok()?;
    (track_hash(&track) == line.track_hash).then_some((track, line.last_group))
}
