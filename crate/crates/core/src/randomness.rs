//! Label-addressable, counter-based random streams.
//!
//! A stream is identified by `(master_seed, experiment_id, path)`. Its output at
//! cursor position `k` is a pure function of that identity and `k`, so two
//! executions that must share internal randomness can draw from the same path
//! regardless of how much environment noise each of them consumed.
//!
//! The key for a path is the SHA-256 digest of its canonical byte encoding; the
//! generator itself is SplitMix64 run in counter mode with a per-stream odd
//! increment.

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One component of a stream path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Index(u64),
    Name(String),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Index(i) => write!(f, "{i}"),
            Label::Name(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label::Name(s.to_owned())
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        Label::Name(s)
    }
}

impl From<u64> for Label {
    fn from(i: u64) -> Self {
        Label::Index(i)
    }
}

impl From<usize> for Label {
    fn from(i: usize) -> Self {
        Label::Index(i as u64)
    }
}

impl From<u32> for Label {
    fn from(i: u32) -> Self {
        Label::Index(u64::from(i))
    }
}

impl From<i32> for Label {
    fn from(i: i32) -> Self {
        Label::Index(u64::try_from(i).expect("stream label indices must be non-negative"))
    }
}

/// Builds a `Vec<Label>` from mixed string and integer literals.
///
/// ```
/// use repbandit::labels;
/// let path = labels!["shared", "u", 0];
/// assert_eq!(path.len(), 3);
/// ```
#[macro_export]
macro_rules! labels {
    ($($x:expr),* $(,)?) => {
        <[_]>::into_vec(::std::boxed::Box::new([$($crate::randomness::Label::from($x)),*]))
    };
}

/// Root of the stream hierarchy for one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master_seed: u64,
    pub experiment_id: String,
}

/// The three streams backing one paired trial.
#[derive(Debug, Clone)]
pub struct PairedStreams {
    /// Internal randomness, identical for both executions of the trial.
    pub shared: StreamHandle,
    /// Reward noise for the first execution.
    pub env_a: StreamHandle,
    /// Reward noise for the second execution.
    pub env_b: StreamHandle,
}

impl SeedPlan {
    pub fn new(master_seed: u64, experiment_id: impl Into<String>) -> Self {
        Self {
            master_seed,
            experiment_id: experiment_id.into(),
        }
    }

    /// Derives the stream at `path`, positioned at cursor 0.
    ///
    /// Panics if `path` is empty.
    pub fn derive_stream(&self, path: Vec<Label>) -> StreamHandle {
        assert!(!path.is_empty(), "stream path must be non-empty");
        let (key, gamma) = stream_key(self.master_seed, &self.experiment_id, &path);
        StreamHandle {
            plan: self.clone(),
            path,
            key,
            gamma,
            cursor: 0,
        }
    }

    /// Streams for trial `trial_id`: one shared stream and two independent
    /// environment streams.
    pub fn paired_streams(&self, trial_id: u64) -> PairedStreams {
        PairedStreams {
            shared: self.derive_stream(labels!["trial", trial_id, "shared"]),
            env_a: self.derive_stream(labels!["trial", trial_id, "env", 0]),
            env_b: self.derive_stream(labels!["trial", trial_id, "env", 1]),
        }
    }
}

fn stream_key(master_seed: u64, experiment_id: &str, path: &[Label]) -> (u64, u64) {
    let mut h = Sha256::new();
    h.update(b"repbandit/stream/v1");
    h.update(master_seed.to_le_bytes());
    h.update((experiment_id.len() as u64).to_le_bytes());
    h.update(experiment_id.as_bytes());
    h.update((path.len() as u64).to_le_bytes());
    for label in path {
        match label {
            Label::Index(i) => {
                h.update([0u8]);
                h.update(i.to_le_bytes());
            }
            Label::Name(s) => {
                h.update([1u8]);
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
    }
    let digest = h.finalize();
    let key = u64::from_le_bytes(digest[0..8].try_into().unwrap());
    let gamma = u64::from_le_bytes(digest[8..16].try_into().unwrap()) | 1;
    (key, gamma)
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A position in a deterministic stream.
///
/// The cursor is the only mutable part. `value_at(k)` never depends on the
/// cursor, so rewinding reproduces earlier draws exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHandle {
    plan: SeedPlan,
    path: Vec<Label>,
    key: u64,
    gamma: u64,
    cursor: u64,
}

impl StreamHandle {
    pub fn path(&self) -> &[Label] {
        &self.path
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn seek(&mut self, cursor: u64) {
        self.cursor = cursor;
    }

    pub fn reset(&mut self) {
        self.cursor = 0;
    }

    /// Stream at `self.path ++ suffix`, positioned at cursor 0.
    pub fn child(&self, suffix: &[Label]) -> StreamHandle {
        let mut path = self.path.clone();
        path.extend_from_slice(suffix);
        self.plan.derive_stream(path)
    }

    /// Raw 64-bit output at position `k`.
    #[inline]
    pub fn value_at(&self, k: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(self.gamma.wrapping_mul(k.wrapping_add(1))),
        )
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.value_at(self.cursor);
        self.cursor = self.cursor.wrapping_add(1);
        v
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the cosine branch of the Box–Muller transform.
    /// Always consumes exactly two uniforms.
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    }
}
