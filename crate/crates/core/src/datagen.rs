//! Labeled training data from Haar-random finite-depth circuits, and the
//! on-disk dataset format.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic    "SHDW"
//! version  u32 = 1
//! n_states u64
//! n_s      u32
//! l        u32
//! N        u32
//! t        u32
//! seed     u64
//! n_states x { label u8, n_s * l * 4 x f32 }
//! ```
//!
//! Each site record is `(θ, φ, χ, outcome)` with the outcome stored as 0.0/1.0.
//! Label 255 marks an unlabeled state (Hamiltonian ground states).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qsim::{QsimError, Statevector};
use crate::randunit::{haar_u2, haar_u4};
use crate::rng::{keyed_rng, TAG_CIRCUIT, TAG_ONSITE};
use crate::shadows::{measure_shadows_keyed, BasisChoice, ShadowError, ShadowSet};

pub const MAGIC: &[u8; 4] = b"SHDW";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 40;
pub const UNLABELED: u8 = 255;
pub const GENERATOR_VERSION: &str = concat!("qphase-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"SHDW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("trailing bytes after {0} states")]
    TrailingBytes(u64),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Qsim(#[from] QsimError),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseLabel {
    Trivial = 0,
    Ssb = 1,
}

impl PhaseLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Trivial),
            1 => Some(Self::Ssb),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub phase_label: PhaseLabel,
    /// Chain length.
    pub n_chain: usize,
    pub l: usize,
    pub t: usize,
    pub n_s: usize,
    pub n_b: usize,
    pub seed: u64,
    pub patch_start: usize,
}

impl GenConfig {
    /// Patch centred at `(N - l) / 2`.
    pub fn new(phase_label: PhaseLabel, n_chain: usize, l: usize, t: usize, n_s: usize, n_b: usize, seed: u64) -> Self {
        Self {
            phase_label,
            n_chain,
            l,
            t,
            n_s,
            n_b,
            seed,
            patch_start: n_chain.saturating_sub(l) / 2,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.l == 0 || self.n_s == 0 || self.n_b == 0 {
            return bad(format!("l, n_s, n_b must be positive (l={}, n_s={}, n_b={})", self.l, self.n_s, self.n_b));
        }
        if self.l + 4 * self.t > self.n_chain {
            return bad(format!(
                "patch length {} plus lightcone margin 4t={} exceeds chain length {}",
                self.l,
                4 * self.t,
                self.n_chain
            ));
        }
        if self.patch_start + self.l > self.n_chain {
            return bad(format!("patch [{}, {}) outside chain of {}", self.patch_start, self.patch_start + self.l, self.n_chain));
        }
        if self.t > 0 && !self.n_chain.is_multiple_of(2) {
            return bad(format!("brick-wall circuits need an even chain length, got {}", self.n_chain));
        }
        if self.n_chain < 2 || self.n_chain > crate::qsim::MAX_QUBITS {
            return bad(format!("chain length {} outside 2..={}", self.n_chain, crate::qsim::MAX_QUBITS));
        }
        Ok(())
    }
}

/// `t` rounds of a periodic brick wall: pairs `(0,1), (2,3), ...` then
/// `(1,2), (3,4), ..., (N-1, 0)`, each gate an independent Haar U(4).
pub fn brickwall_fdlu<R: rand::Rng + ?Sized>(state: &mut Statevector, t: usize, rng: &mut R) -> Result<(), QsimError> {
    let n = state.n_qubits();
    for _ in 0..t {
        for offset in [0, 1] {
            // the second layer ends with the wrap pair (N-1, 0)
            let mut site = offset;
            while site < n && (site + 1 < n || offset == 1) {
                state.apply_2q(site, &haar_u4(rng))?;
                site += 2;
            }
        }
    }
    Ok(())
}

/// Independent Haar U(2) on every site.
pub fn randomize_onsite<R: rand::Rng + ?Sized>(state: &mut Statevector, rng: &mut R) -> Result<(), QsimError> {
    for q in 0..state.n_qubits() {
        state.apply_1q(q, &haar_u2(rng))?;
    }
    Ok(())
}

/// Test hooks for [`generate_phase_dataset_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenOptions {
    pub basis: BasisChoice,
    pub randomize_onsite: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            basis: BasisChoice::Haar,
            randomize_onsite: true,
        }
    }
}

/// Representative state, on-site randomization and circuit for state `index`.
pub fn evolved_state(cfg: &GenConfig, index: u64, randomize: bool) -> Result<Statevector, QsimError> {
    let mut state = match cfg.phase_label {
        PhaseLabel::Trivial => Statevector::new_all_ones(cfg.n_chain)?,
        PhaseLabel::Ssb => Statevector::new_ghz(cfg.n_chain)?,
    };
    if randomize {
        randomize_onsite(&mut state, &mut keyed_rng(cfg.seed, &[TAG_ONSITE, index]))?;
    }
    brickwall_fdlu(&mut state, cfg.t, &mut keyed_rng(cfg.seed, &[TAG_CIRCUIT, index]))?;
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_states: u64,
    pub n_s: u32,
    pub l: u32,
    pub n_chain: u32,
    pub t: u32,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn record_len(&self) -> usize {
        self.n_s as usize * self.l as usize * 4
    }
}

/// In-memory dataset: one label byte and one `n_s x l x 4` float32 record per state.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub labels: Vec<u8>,
    pub payload: Vec<f32>,
}

impl Dataset {
    pub fn from_sets(n_chain: usize, t: usize, seed: u64, sets: &[ShadowSet]) -> Result<Self, DatasetError> {
        let first = sets.first().ok_or_else(|| DatasetError::Inconsistent("no states".into()))?;
        let (n_s, l) = (first.n_shadows(), first.patch_length());
        let mut payload = Vec::with_capacity(sets.len() * n_s * l * 4);
        let mut labels = Vec::with_capacity(sets.len());
        for s in sets {
            if s.n_shadows() != n_s || s.patch_length() != l {
                return Err(DatasetError::Inconsistent(format!(
                    "state shape {}x{} differs from {}x{}",
                    s.n_shadows(),
                    s.patch_length(),
                    n_s,
                    l
                )));
            }
            labels.push(s.label.unwrap_or(UNLABELED));
            payload.extend(s.to_flat());
        }
        Ok(Self {
            header: DatasetHeader {
                n_states: sets.len() as u64,
                n_s: n_s as u32,
                l: l as u32,
                n_chain: n_chain as u32,
                t: t as u32,
                seed,
            },
            labels,
            payload,
        })
    }

    pub fn n_states(&self) -> usize {
        self.labels.len()
    }

    pub fn n_s(&self) -> usize {
        self.header.n_s as usize
    }

    pub fn l(&self) -> usize {
        self.header.l as usize
    }

    pub fn record(&self, i: usize) -> &[f32] {
        let len = self.header.record_len();
        &self.payload[i * len..(i + 1) * len]
    }

    pub fn shadow_set(&self, i: usize) -> Result<ShadowSet, ShadowError> {
        let mut s = ShadowSet::from_flat(self.l(), self.record(i))?;
        s.label = (self.labels[i] != UNLABELED).then_some(self.labels[i]);
        Ok(s)
    }

    /// Appends another dataset with the same `n_s`, `l`, `N` and `t`.
    pub fn concat(mut self, other: Dataset) -> Result<Self, DatasetError> {
        let (a, b) = (self.header, other.header);
        if (a.n_s, a.l, a.n_chain, a.t) != (b.n_s, b.l, b.n_chain, b.t) {
            return Err(DatasetError::Inconsistent(format!("cannot concatenate {a:?} with {b:?}")));
        }
        self.labels.extend(other.labels);
        self.payload.extend(other.payload);
        self.header.n_states = self.labels.len() as u64;
        Ok(self)
    }

    fn check(&self) -> Result<(), DatasetError> {
        let expect = self.header.n_states as usize * self.header.record_len();
        if self.labels.len() as u64 != self.header.n_states || self.payload.len() != expect {
            return Err(DatasetError::Inconsistent(format!(
                "header says {} states of {} floats, have {} labels and {} floats",
                self.header.n_states,
                self.header.record_len(),
                self.labels.len(),
                self.payload.len()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DatasetError> {
        self.check()?;
        let h = &self.header;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&h.n_states.to_le_bytes())?;
        for v in [h.n_s, h.l, h.n_chain, h.t] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&h.seed.to_le_bytes())?;
        let len = h.record_len();
        let mut buf = Vec::with_capacity(1 + 4 * len);
        for (i, &label) in self.labels.iter().enumerate() {
            buf.clear();
            buf.push(label);
            for x in &self.payload[i * len..(i + 1) * len] {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, DatasetError> {
        let mut head = [0u8; HEADER_BYTES];
        let mut got = 0;
        while got < HEADER_BYTES {
            let n = r.read(&mut head[got..])?;
            if n == 0 {
                break;
            }
            got += n;
        }
        if got >= 4 && &head[..4] != MAGIC {
            return Err(DatasetError::BadMagic(head[..4].try_into().unwrap()));
        }
        if got >= 8 {
            let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
            if version != FORMAT_VERSION {
                return Err(DatasetError::UnsupportedVersion(version));
            }
        }
        if got < HEADER_BYTES {
            return Err(DatasetError::Truncated {
                expected: HEADER_BYTES as u64,
                found: got as u64,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(head[o..o + 8].try_into().unwrap());
        let header = DatasetHeader {
            n_states: u64_at(8),
            n_s: u32_at(16),
            l: u32_at(20),
            n_chain: u32_at(24),
            t: u32_at(28),
            seed: u64_at(32),
        };
        if header.l == 0 || header.n_s == 0 || header.l > header.n_chain {
            return Err(DatasetError::Inconsistent(format!(
                "header fields l={} n_s={} N={} are invalid",
                header.l, header.n_s, header.n_chain
            )));
        }
        let len = header.record_len();
        let expected = HEADER_BYTES as u64 + header.n_states * (1 + 4 * len as u64);
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let found = HEADER_BYTES as u64 + body.len() as u64;
        if found < expected {
            return Err(DatasetError::Truncated { expected, found });
        }
        if found > expected {
            return Err(DatasetError::TrailingBytes(header.n_states));
        }
        let n = header.n_states as usize;
        let mut labels = Vec::with_capacity(n);
        let mut payload = Vec::with_capacity(n * len);
        for rec in body.chunks_exact(1 + 4 * len) {
            labels.push(rec[0]);
            payload.extend(rec[1..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
        }
        Ok(Self { header, labels, payload })
    }
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    d.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    Dataset::read_from(&mut BufReader::new(File::open(path)?))
}

/// Sidecar JSON describing how a dataset file was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    #[serde(rename = "N")]
    pub n_chain: usize,
    pub l: usize,
    pub t: usize,
    pub n_s: usize,
    pub n_b: usize,
    /// `None` for mixed-label or unlabeled files.
    pub phase_label: Option<u8>,
    pub patch_start: usize,
    pub generator_version: String,
    pub git_describe: String,
    pub timestamp: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut p = dataset.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn write_manifest(dataset: &Path, m: &Manifest) -> Result<(), DatasetError> {
    let s = serde_json::to_string_pretty(m)?;
    std::fs::write(manifest_path(dataset), s + "\n")?;
    Ok(())
}

pub fn read_manifest(dataset: &Path) -> Result<Manifest, DatasetError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(manifest_path(dataset))?)?)
}

/// Runs the four-step protocol for `cfg.n_b` states of one phase.
pub fn generate_phase_dataset(cfg: &GenConfig) -> Result<Dataset, DatasetError> {
    generate_phase_dataset_with(cfg, &GenOptions::default())
}

pub fn generate_phase_dataset_with(cfg: &GenConfig, opts: &GenOptions) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let sets: Vec<ShadowSet> = (0..cfg.n_b as u64)
        .into_par_iter()
        .map(|i| -> Result<ShadowSet, DatasetError> {
            let state = evolved_state(cfg, i, opts.randomize_onsite)?;
            let mut set = measure_shadows_keyed(&state, cfg.patch_start, cfg.l, cfg.n_s, opts.basis, cfg.seed, i)?;
            set.label = Some(cfg.phase_label as u8);
            Ok(set)
        })
        .collect::<Result<_, _>>()?;
    Dataset::from_sets(cfg.n_chain, cfg.t, cfg.seed, &sets)
}
