//! Durable streaming state between invocations.
//!
//! A session holds the layer-1 slots drawn at `init` and the running
//! aggregate. It never stores set elements. Every rewrite goes through a
//! temporary file and a rename, so a killed writer leaves the previous
//! session intact.

use crate::error::{CliError, Result};
use crate::text::{write_matrix, LineReader};
use slotset_core::{AggMode, AggregateState, Matrix};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

pub const SESSION_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SessionFile {
    pub model_fingerprint: String,
    pub seed: u64,
    /// Raw layer-1 slots as sampled, before layer norm; `None` for encoders
    /// without slots.
    pub slots: Option<Matrix<f64>>,
    pub state: AggregateState<f64>,
}

impl SessionFile {
    pub fn mode(&self) -> AggMode {
        self.state.mode()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "format_version {SESSION_FORMAT_VERSION}\nmodel_fingerprint {}\nmode {}\nseed {}\n",
            self.model_fingerprint,
            self.mode(),
            self.seed
        );
        match &self.slots {
            Some(s) => {
                out.push_str(&format!("slots {} {}\n", s.rows(), s.cols()));
                write_matrix(&mut out, s);
            }
            None => out.push_str("slots none\n"),
        }
        let p = self.state.partial();
        out.push_str(&format!("count {}\npartial {} {}\n", self.state.count(), p.rows(), p.cols()));
        write_matrix(&mut out, p);
        out
    }

    pub fn parse(label: &str, text: &str) -> Result<Self> {
        let mut r = LineReader::new(label, text);
        let version: u32 = r.parse_value("format_version")?;
        if version != SESSION_FORMAT_VERSION {
            return Err(r.error(1, Some(2), format!("unsupported session format version {version}")));
        }
        let (_, fp) = r.expect_value("model_fingerprint")?;
        let (mode_line, mode) = r.expect_value("mode")?;
        let mode: AggMode = mode.parse().map_err(|e: slotset_core::Error| r.error(mode_line, Some(2), e.to_string()))?;
        let seed: u64 = r.parse_value("seed")?;
        let (slot_line, t) = r.next_tokens()?;
        let slots = match t.as_slice() {
            ["slots", "none"] => None,
            ["slots", rows, cols] => {
                let rows: usize = r.parse_at(slot_line, 2, rows, "row count")?;
                let cols: usize = r.parse_at(slot_line, 3, cols, "column count")?;
                Some(r.matrix(rows, cols)?)
            }
            _ => return Err(r.error(slot_line, None, "expected `slots none` or `slots ROWS COLS`")),
        };
        let count: usize = r.parse_value("count")?;
        let (pline, dims) = r.expect("partial", 2)?;
        let rows: usize = r.parse_at(pline, 2, dims[0], "row count")?;
        let cols: usize = r.parse_at(pline, 3, dims[1], "column count")?;
        let partial = r.matrix(rows, cols)?;
        if !r.at_end() {
            let (line, _) = r.next_tokens()?;
            return Err(r.error(line, Some(1), "trailing content"));
        }
        let state = AggregateState::from_parts(mode, partial, count).map_err(|e| r.error(pline, None, e.to_string()))?;
        Ok(Self {
            model_fingerprint: fp.to_string(),
            seed,
            slots,
            state,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Writes `bytes` to a temporary file next to `path`, syncs it and renames
/// it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling(path, &format!(".tmp-{}", std::process::id()));
    let io = |e| CliError::io(&tmp, e);
    {
        let mut f = OpenOptions::new().write(true).create(true).truncate(true).open(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        // Persist the rename itself; not every platform can open a directory.
        if let Ok(d) = fs::File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

/// Advisory single-writer lock: a `.lock` file next to the session holding
/// the owner's PID. Removed on drop.
#[derive(Debug)]
pub struct SessionLock {
    path: PathBuf,
}

/// How long a lock file may stay empty (its owner between create and
/// write) before it counts as abandoned.
const EMPTY_LOCK_GRACE: Duration = Duration::from_secs(5);

fn process_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new(&format!("/proc/{pid}")).exists()
    } else {
        true
    }
}

impl SessionLock {
    pub fn path_for(session: &Path) -> PathBuf {
        sibling(session, ".lock")
    }

    pub fn acquire(session: &Path) -> Result<Self> {
        let path = Self::path_for(session);
        for _ in 0..3 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(std::process::id().to_string().as_bytes()).map_err(|e| CliError::io(&path, e))?;
                    f.sync_all().map_err(|e| CliError::io(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    let stale = match owner {
                        Some(pid) => !process_alive(pid),
                        None => fs::metadata(&path)
                            .and_then(|m| m.modified())
                            .map(|t| SystemTime::now().duration_since(t).unwrap_or_default() > EMPTY_LOCK_GRACE)
                            .unwrap_or(false),
                    };
                    if !stale {
                        let who = owner.map_or("another process".to_string(), |p| format!("process {p}"));
                        return Err(CliError::Session(format!("{} is locked by {who}", session.display())));
                    }
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        Err(CliError::Session(format!("could not take the lock on {}", session.display())))
    }
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(mode: AggMode) -> SessionFile {
        SessionFile {
            model_fingerprint: "ab".repeat(32),
            seed: 7,
            slots: Some(Matrix::from_vec(2, 2, vec![0.1, -2.5, 3.0, 1e-300]).unwrap()),
            state: AggregateState::init(mode, 2, 3),
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        for mode in AggMode::ALL {
            let s = session(mode);
            let text = s.to_text();
            let back = SessionFile::parse("s", &text).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.to_text(), text);
        }
        let mut none = session(AggMode::Sum);
        none.slots = None;
        assert_eq!(SessionFile::parse("s", &none.to_text()).unwrap(), none);
    }

    #[test]
    fn max_identity_uses_inf_tokens() {
        let text = session(AggMode::Max).to_text();
        assert!(text.contains("partial 2 3\n-inf -inf -inf\n-inf -inf -inf\n"), "{text}");
        assert!(session(AggMode::Min).to_text().contains("\ninf inf inf\n"));
    }

    #[test]
    fn parse_errors_point_at_the_field() {
        let text = session(AggMode::Sum).to_text().replace("count 0", "count x");
        let err = SessionFile::parse("s", &text).unwrap_err().to_string();
        assert!(err.starts_with("s:8 field 2"), "{err}");
        let truncated: String = session(AggMode::Sum).to_text().lines().take(7).map(|l| format!("{l}\n")).collect();
        assert!(SessionFile::parse("s", &truncated).is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("a.session");
        let lock = SessionLock::acquire(&s).unwrap();
        assert!(matches!(SessionLock::acquire(&s), Err(CliError::Session(_))));
        drop(lock);
        assert!(!SessionLock::path_for(&s).exists());
        SessionLock::acquire(&s).unwrap();
    }

    #[test]
    #[cfg(target_os = "linux")]
    fn stale_lock_is_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("b.session");
        // PIDs this large are beyond the kernel's limit, so never alive.
        fs::write(SessionLock::path_for(&s), "4294967295").unwrap();
        let _lock = SessionLock::acquire(&s).unwrap();
        assert_eq!(fs::read_to_string(SessionLock::path_for(&s)).unwrap(), std::process::id().to_string());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
