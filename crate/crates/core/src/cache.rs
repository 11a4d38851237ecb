//! On-disk cache of spectral reference trajectories: a little-endian binary
//! container of coefficient snapshots plus a JSON sidecar describing them.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SacError};
use crate::model::SigmaPreset;

const MAGIC: &[u8; 8] = b"SACREF01";

/// Identifies one cached reference trajectory. The first five fields name
/// the file; the rest must also match for a hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub seed: u64,
    pub path_index: u64,
    pub modes: usize,
    pub j_fine: usize,
    pub sigma: SigmaPreset,
    pub length: f64,
    pub horizon: f64,
    pub pad: f64,
    pub newton_tol: f64,
    pub x0: String,
    /// Snapshot every `stride` reference steps, including step 0.
    pub stride: usize,
}

impl CacheKey {
    fn stem(&self) -> String {
        format!(
            "ref-s{}-p{}-N{}-J{}-{:?}{}",
            self.seed,
            self.path_index,
            self.modes,
            self.j_fine,
            self.sigma.kind,
            crate::report::fmt_f64(self.sigma.amplitude)
        )
        .to_lowercase()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    key: CacheKey,
    snapshots: usize,
    coefficients: usize,
}

#[derive(Debug, Clone)]
pub struct ReferenceCache {
    dir: PathBuf,
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn paths(&self, key: &CacheKey) -> (PathBuf, PathBuf) {
        let stem = key.stem();
        (
            self.dir.join(format!("{stem}.bin")),
            self.dir.join(format!("{stem}.json")),
        )
    }

    /// Snapshots for `key`, or `None` if absent or stale.
    pub fn load(&self, key: &CacheKey) -> Result<Option<Vec<Vec<Complex64>>>> {
        let (bin, json) = self.paths(key);
        if !bin.exists() || !json.exists() {
            return Ok(None);
        }
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&json)?)
            .map_err(|e| SacError::Io(format!("{}: {e}", json.display())))?;
        if &sidecar.key != key {
            return Ok(None);
        }
        let mut bytes = Vec::new();
        fs::File::open(&bin)?.read_to_end(&mut bytes)?;
        let corrupt = || SacError::Io(format!("{}: corrupt reference container", bin.display()));
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(corrupt());
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let (count, len) = (word(8) as usize, word(16) as usize);
        if count != sidecar.snapshots || len != sidecar.coefficients || bytes.len() != 24 + count * len * 16 {
            return Err(corrupt());
        }
        let mut pos = 24;
        let mut f = || {
            let v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            pos += 8;
            v
        };
        let snapshots = (0..count)
            .map(|_| (0..len).map(|_| Complex64::new(f(), f())).collect())
            .collect();
        Ok(Some(snapshots))
    }

    pub fn store(&self, key: &CacheKey, snapshots: &[Vec<Complex64>]) -> Result<()> {
        let len = snapshots.first().map_or(0, |s| s.len());
        if snapshots.iter().any(|s| s.len() != len) {
            return Err(SacError::Structure("snapshots differ in length".into()));
        }
        let (bin, json) = self.paths(key);
        let mut buf = Vec::with_capacity(24 + snapshots.len() * len * 16);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(snapshots.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(len as u64).to_le_bytes());
        for c in snapshots.iter().flatten() {
            buf.extend_from_slice(&c.re.to_le_bytes());
            buf.extend_from_slice(&c.im.to_le_bytes());
        }
        fs::File::create(&bin)?.write_all(&buf)?;
        let sidecar = Sidecar {
            key: key.clone(),
            snapshots: snapshots.len(),
            coefficients: len,
        };
        fs::write(&json, crate::report::to_json(&sidecar)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> CacheKey {
        CacheKey {
            seed: 1,
            path_index: 3,
            modes: 2,
            j_fine: 8,
            sigma: SigmaPreset::sine(0.5),
            length: 1.0,
            horizon: 0.25,
            pad: 2.0,
            newton_tol: 1e-12,
            x0: "cos".into(),
            stride: 2,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ReferenceCache::new(dir.path()).unwrap();
        assert!(cache.load(&key()).unwrap().is_none());
        let snaps = vec![
            (0..5).map(|i| Complex64::new(0.1 * i as f64, -1.0 / 3.0)).collect::<Vec<_>>(),
            (0..5).map(|i| Complex64::new(1e-300 * i as f64, 7.0)).collect(),
        ];
        cache.store(&key(), &snaps).unwrap();
        assert_eq!(cache.load(&key()).unwrap().unwrap(), snaps);
        let mut other = key();
        other.horizon = 0.5;
        assert!(cache.load(&other).unwrap().is_none());
    }

    #[test]
    fn corrupt_container_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ReferenceCache::new(dir.path()).unwrap();
        cache.store(&key(), &[vec![Complex64::new(1.0, 0.0)]]).unwrap();
        let (bin, _) = cache.paths(&key());
        fs::write(&bin, b"SACREF01garbage").unwrap();
        assert!(cache.load(&key()).is_err());
    }
}
