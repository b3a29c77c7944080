//! Incrementally updated stability residue with a line-oriented journal.
//!
//! Journal layout:
//!
//! ```text
//! NCSR-LEDGER 1 arcsin_b=0.7853981633974483
//! ADD uplink 0.5
//! MOD uplink 0.5 0.25
//! DEL uplink 0.25
//! CHECKSUM <sha256 of the preceding bytes, hex>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::neumaier_sum;

const MAGIC: &str = "NCSR-LEDGER";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("unknown channel label {0:?}")]
    UnknownLabel(String),
    #[error("channel label {0:?} already present")]
    DuplicateLabel(String),
    #[error("value {0} outside the admissible range")]
    OutOfRange(f64),
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
    #[error("journal line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("journal checksum mismatch")]
    Checksum,
    #[error("ledger {0} is locked by another writer")]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LedgerEvent {
    Add { label: String, r: f64 },
    Modify { label: String, r_old: f64, r_new: f64 },
    Remove { label: String, r_old: f64 },
}

impl LedgerEvent {
    fn to_line(&self) -> String {
        match self {
            LedgerEvent::Add { label, r } => format!("ADD {label} {r}"),
            LedgerEvent::Modify { label, r_old, r_new } => format!("MOD {label} {r_old} {r_new}"),
            LedgerEvent::Remove { label, r_old } => format!("DEL {label} {r_old}"),
        }
    }

    fn parse(line: &str, lineno: usize) -> Result<Self, LedgerError> {
        let bad = |msg: &str| LedgerError::Malformed { line: lineno, msg: msg.to_string() };
        let parts: Vec<&str> = line.split(' ').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        match parts.as_slice() {
            ["ADD", label, r] => Ok(LedgerEvent::Add { label: label.to_string(), r: num(r)? }),
            ["MOD", label, a, b] => {
                Ok(LedgerEvent::Modify { label: label.to_string(), r_old: num(a)?, r_new: num(b)? })
            }
            ["DEL", label, r] => Ok(LedgerEvent::Remove { label: label.to_string(), r_old: num(r)? }),
            _ => Err(bad("expected ADD, MOD or DEL event")),
        }
    }
}

/// Running residue `arcsin b − Σ arcsin r_k`, updated one event at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueLedger {
    arcsin_b: f64,
    channels: BTreeMap<String, f64>,
    events: Vec<LedgerEvent>,
    sum: f64,
    comp: f64,
}

fn check_r(r: f64) -> Result<(), LedgerError> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(LedgerError::OutOfRange(r))
    }
}

fn check_label(label: &str) -> Result<(), LedgerError> {
    if label.is_empty() || label.chars().any(|c| c.is_whitespace() || c.is_control()) {
        Err(LedgerError::InvalidLabel(label.to_string()))
    } else {
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl ResidueLedger {
    pub fn new(arcsin_b: f64) -> Result<Self, LedgerError> {
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&arcsin_b) {
            return Err(LedgerError::OutOfRange(arcsin_b));
        }
        Ok(Self { arcsin_b, channels: BTreeMap::new(), events: Vec::new(), sum: arcsin_b, comp: 0.0 })
    }

    pub fn arcsin_b(&self) -> f64 {
        self.arcsin_b
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn channels(&self) -> &BTreeMap<String, f64> {
        &self.channels
    }

    pub fn residue(&self) -> f64 {
        self.sum + self.comp
    }

    /// Residue recomputed from scratch over the surviving channels.
    pub fn batch_residue(&self) -> f64 {
        self.arcsin_b - neumaier_sum(self.channels.values().map(|r| r.asin()))
    }

    /// `|running − batch|`.
    pub fn discrepancy(&self) -> f64 {
        (self.residue() - self.batch_residue()).abs()
    }

    fn accumulate(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn apply(&mut self, event: LedgerEvent) -> Result<(), LedgerError> {
        match &event {
            LedgerEvent::Add { label, r } => {
                check_label(label)?;
                check_r(*r)?;
                if self.channels.contains_key(label) {
                    return Err(LedgerError::DuplicateLabel(label.clone()));
                }
                self.channels.insert(label.clone(), *r);
                self.accumulate(-r.asin());
            }
            LedgerEvent::Modify { label, r_old, r_new } => {
                check_r(*r_new)?;
                let cur = *self.channels.get(label).ok_or_else(|| LedgerError::UnknownLabel(label.clone()))?;
                if cur != *r_old {
                    return Err(LedgerError::OutOfRange(*r_old));
                }
                self.channels.insert(label.clone(), *r_new);
                self.accumulate(-r_new.asin());
                self.accumulate(r_old.asin());
            }
            LedgerEvent::Remove { label, r_old } => {
                let cur = *self.channels.get(label).ok_or_else(|| LedgerError::UnknownLabel(label.clone()))?;
                if cur != *r_old {
                    return Err(LedgerError::OutOfRange(*r_old));
                }
                self.channels.remove(label);
                self.accumulate(r_old.asin());
            }
        }
        self.events.push(event);
        Ok(())
    }

    pub fn add(&mut self, label: &str, r: f64) -> Result<(), LedgerError> {
        self.apply(LedgerEvent::Add { label: label.to_string(), r })
    }

    pub fn modify(&mut self, label: &str, r_new: f64) -> Result<(), LedgerError> {
        let r_old = *self.channels.get(label).ok_or_else(|| LedgerError::UnknownLabel(label.to_string()))?;
        self.apply(LedgerEvent::Modify { label: label.to_string(), r_old, r_new })
    }

    pub fn remove(&mut self, label: &str) -> Result<(), LedgerError> {
        let r_old = *self.channels.get(label).ok_or_else(|| LedgerError::UnknownLabel(label.to_string()))?;
        self.apply(LedgerEvent::Remove { label: label.to_string(), r_old })
    }

    /// Serialized journal, including the trailing checksum line.
    pub fn to_journal(&self) -> String {
        let mut body = format!("{MAGIC} {VERSION} arcsin_b={}\n", self.arcsin_b);
        for e in &self.events {
            body.push_str(&e.to_line());
            body.push('\n');
        }
        let sum = hex(&Sha256::digest(body.as_bytes()));
        body.push_str(&format!("CHECKSUM {sum}\n"));
        body
    }

    /// Replays a journal, verifying its checksum first.
    pub fn from_journal(text: &str) -> Result<Self, LedgerError> {
        let bad = |line: usize, msg: &str| LedgerError::Malformed { line, msg: msg.to_string() };
        let body_end = text
            .trim_end_matches('\n')
            .rfind('\n')
            .map(|i| i + 1)
            .ok_or_else(|| bad(1, "journal needs a header and a checksum line"))?;
        let (body, tail) = text.split_at(body_end);
        let expected = tail
            .trim_end_matches('\n')
            .strip_prefix("CHECKSUM ")
            .ok_or_else(|| bad(body.lines().count() + 1, "missing CHECKSUM line"))?;
        if hex(&Sha256::digest(body.as_bytes())) != expected {
            return Err(LedgerError::Checksum);
        }
        let mut lines = body.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(bad(1, "not a ledger journal"));
        }
        if parts.next() != Some(&VERSION.to_string()) {
            return Err(bad(1, "unsupported journal version"));
        }
        let arcsin_b = parts
            .next()
            .and_then(|s| s.strip_prefix("arcsin_b="))
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| bad(1, "header needs arcsin_b=<number>"))?;
        if parts.next().is_some() {
            return Err(bad(1, "trailing header fields"));
        }
        let mut ledger = Self::new(arcsin_b)?;
        for (i, line) in lines {
            let event = LedgerEvent::parse(line, i + 1)?;
            ledger.apply(event).map_err(|e| bad(i + 1, &e.to_string()))?;
        }
        Ok(ledger)
    }

    pub fn load(path: &Path) -> Result<Self, LedgerError> {
        Self::from_journal(&fs::read_to_string(path)?)
    }

    /// Writes the journal through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<(), LedgerError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_journal())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Exclusive writer lock: a `<path>.lock` file created atomically and
/// removed on drop.
#[derive(Debug)]
pub struct LedgerLock {
    path: PathBuf,
}

impl LedgerLock {
    pub fn acquire(ledger_path: &Path) -> Result<Self, LedgerError> {
        let mut name = ledger_path.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(LedgerError::Locked(ledger_path.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LedgerLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Single-writer ledger shared with concurrent readers.
#[derive(Debug, Clone)]
pub struct SharedLedger {
    inner: Arc<RwLock<ResidueLedger>>,
}

impl SharedLedger {
    pub fn new(ledger: ResidueLedger) -> Self {
        Self { inner: Arc::new(RwLock::new(ledger)) }
    }

    /// Consistent `(residue, journal length)` pair.
    pub fn snapshot(&self) -> (f64, usize) {
        let guard = self.inner.read().unwrap_or_else(|e| e.into_inner());
        (guard.residue(), guard.events().len())
    }

    pub fn apply(&self, event: LedgerEvent) -> Result<(), LedgerError> {
        self.inner.write().unwrap_or_else(|e| e.into_inner()).apply(event)
    }

    pub fn read(&self) -> ResidueLedger {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn deg(x: f64) -> f64 {
        x.to_radians()
    }

    #[test]
    fn add_then_modify() {
        let mut l = ResidueLedger::new(deg(40.0)).unwrap();
        l.add("a", 0.5).unwrap();
        assert_abs_diff_eq!(l.residue(), deg(10.0), epsilon = 1e-12);
        l.modify("a", deg(15.0).sin()).unwrap();
        assert_abs_diff_eq!(l.residue(), deg(25.0), epsilon = 1e-12);
        l.remove("a").unwrap();
        assert_abs_diff_eq!(l.residue(), deg(40.0), epsilon = 1e-12);
    }

    #[test]
    fn event_errors() {
        let mut l = ResidueLedger::new(0.5).unwrap();
        l.add("a", 0.1).unwrap();
        assert!(matches!(l.add("a", 0.2), Err(LedgerError::DuplicateLabel(_))));
        assert!(matches!(l.modify("b", 0.2), Err(LedgerError::UnknownLabel(_))));
        assert!(matches!(l.remove("b"), Err(LedgerError::UnknownLabel(_))));
        assert!(matches!(l.add("c", 1.0), Err(LedgerError::OutOfRange(_))));
        assert!(matches!(l.add("c d", 0.1), Err(LedgerError::InvalidLabel(_))));
        assert_eq!(l.events().len(), 1);
    }

    fn random_events(l: &mut ResidueLedger, rng: &mut ChaCha8Rng, n: usize) {
        let mut next = 0;
        for _ in 0..n {
            let labels: Vec<String> = l.channels().keys().cloned().collect();
            let op = if labels.is_empty() { 0 } else { rng.random_range(0..3) };
            let r = rng.random_range(0.0..0.3);
            match op {
                0 => {
                    l.add(&format!("c{next}"), r).unwrap();
                    next += 1;
                }
                1 => l.modify(&labels[rng.random_range(0..labels.len())], r).unwrap(),
                _ => l.remove(&labels[rng.random_range(0..labels.len())]).unwrap(),
            }
        }
    }

    #[test]
    fn replay_matches_batch_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = ResidueLedger::new(deg(45.0)).unwrap();
        random_events(&mut l, &mut rng, 1000);
        assert!(l.discrepancy() < 1e-12);
        let text = l.to_journal();
        let back = ResidueLedger::from_journal(&text).unwrap();
        assert_eq!(back.to_journal(), text);
        assert_eq!(back.residue(), l.residue());
    }

    #[test]
    fn tampered_journal_is_rejected() {
        let mut l = ResidueLedger::new(0.5).unwrap();
        l.add("a", 0.1).unwrap();
        let text = l.to_journal().replace("0.1", "0.2");
        assert!(matches!(ResidueLedger::from_journal(&text), Err(LedgerError::Checksum)));
        assert!(matches!(ResidueLedger::from_journal("garbage"), Err(LedgerError::Malformed { .. })));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.journal");
        let a = LedgerLock::acquire(&path).unwrap();
        assert!(matches!(LedgerLock::acquire(&path), Err(LedgerError::Locked(_))));
        drop(a);
        LedgerLock::acquire(&path).unwrap();
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.journal");
        let mut l = ResidueLedger::new(0.7).unwrap();
        l.add("up", 0.3).unwrap();
        l.save(&path).unwrap();
        assert_eq!(ResidueLedger::load(&path).unwrap(), l);
    }

    #[test]
    fn shared_snapshot_is_consistent() {
        let shared = SharedLedger::new(ResidueLedger::new(1.0).unwrap());
        let writer = shared.clone();
        let handle = std::thread::spawn(move || {
            for i in 0..200 {
                writer.apply(LedgerEvent::Add { label: format!("c{i}"), r: 0.001 }).unwrap();
            }
        });
        for _ in 0..200 {
            let (res, len) = shared.snapshot();
            assert_abs_diff_eq!(res, 1.0 - len as f64 * 0.001f64.asin(), epsilon = 1e-12);
        }
        handle.join().unwrap();
        assert_eq!(shared.read().events().len(), 200);
    }
}
