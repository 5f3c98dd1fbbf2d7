//! Append-only, line-oriented log devices.
//!
//! Both the coordinator and the resource managers persist their decisions as
//! tab-separated text lines. A device is either memory-backed (the medium
//! outlives the crash of its owner because the handle is shared) or a file
//! that is flushed and synced before `append` returns.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

#[derive(Debug)]
struct Device {
    lines: Vec<String>,
    file: Option<(PathBuf, File)>,
    failing: bool,
}

/// Shared handle to a durable log medium.
#[derive(Debug, Clone)]
pub struct DurableLog {
    device: Arc<Mutex<Device>>,
}

impl Default for DurableLog {
    fn default() -> Self {
        DurableLog::in_memory()
    }
}

impl DurableLog {
    pub fn in_memory() -> Self {
        DurableLog {
            device: Arc::new(Mutex::new(Device {
                lines: Vec::new(),
                file: None,
                failing: false,
            })),
        }
    }

    /// Memory-backed log pre-loaded with `lines`.
    pub fn from_lines<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let log = DurableLog::in_memory();
        log.lock().lines = lines.into_iter().map(Into::into).collect();
        log
    }

    /// Opens (or creates) a file-backed log, loading any existing records.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut lines = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if !line.is_empty() {
                    lines.push(line);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(DurableLog {
            device: Arc::new(Mutex::new(Device {
                lines,
                file: Some((path, file)),
                failing: false,
            })),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Device> {
        self.device.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends one record. The record is durable when this returns `Ok`.
    pub fn append(&self, record: &str) -> io::Result<()> {
        debug_assert!(!record.contains('\n'));
        let mut device = self.lock();
        if device.failing {
            return Err(io::Error::other("log device failure"));
        }
        if let Some((_, file)) = device.file.as_mut() {
            file.write_all(record.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
            file.sync_data()?;
        }
        device.lines.push(record.to_string());
        Ok(())
    }

    pub fn lines(&self) -> Vec<String> {
        self.lock().lines.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.lock().file.as_ref().map(|(p, _)| p.clone())
    }

    /// Makes every subsequent append fail, simulating a dead log device.
    pub fn set_failing(&self, failing: bool) {
        self.lock().failing = failing;
    }
}
