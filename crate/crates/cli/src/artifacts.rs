//! Run artifacts: append-only CSV logs synced at epoch boundaries, JSON
//! summaries and tracker snapshots.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use isda::CovarianceTracker;
use serde::Serialize;

/// CSV file opened for appending; the header is written only when the file
/// is new or empty, so an interrupted run leaves a valid prefix.
pub struct CsvLog {
    out: BufWriter<File>,
    columns: usize,
}

impl CsvLog {
    pub fn open(path: &Path, header: &str) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let empty = file.metadata()?.len() == 0;
        let mut log = CsvLog { out: BufWriter::new(file), columns: header.split(',').count() };
        if empty {
            writeln!(log.out, "{header}")?;
            log.sync()?;
        }
        Ok(log)
    }

    pub fn row(&mut self, fields: &[String]) -> io::Result<()> {
        if fields.len() != self.columns {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("{} fields for {} columns", fields.len(), self.columns),
            ));
        }
        writeln!(self.out, "{}", fields.join(","))
    }

    /// Pushes buffered rows to disk; called at every epoch boundary.
    pub fn sync(&mut self) -> io::Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn child(&self, name: &str) -> io::Result<RunDir> {
        RunDir::create(&self.root.join(name))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn csv(&self, name: &str, header: &str) -> io::Result<CsvLog> {
        CsvLog::open(&self.path(name), header)
    }

    /// Written to a temporary name and renamed, so readers never see half a file.
    pub fn json(&self, name: &str, value: &impl Serialize) -> io::Result<()> {
        let tmp = self.path(&format!(".{name}.tmp"));
        let text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        let mut f = File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        fs::rename(tmp, self.path(name))
    }

    pub fn snapshot(&self, name: &str, tracker: &CovarianceTracker) -> io::Result<()> {
        let mut f = BufWriter::new(File::create(self.path(name))?);
        tracker.write_snapshot(&mut f).map_err(io::Error::other)?;
        f.flush()?;
        f.get_ref().sync_all()
    }
}

/// Shortest round-trip formatting keeps CSV values bit-exact.
pub fn num(x: f64) -> String {
    format!("{x}")
}
