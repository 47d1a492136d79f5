//! Deterministic, hash-split random streams.
//!
//! Every random draw in an experiment comes from a stream identified by a
//! root seed plus a label path such as `["k1", "e3", "noise"]`. The path is
//! hashed with the seed into a ChaCha key, so streams for different paths are
//! independent and reruns reproduce bit-identical draws.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RngError {
    #[error("stream path must contain at least one label")]
    EmptyPath,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    path: Vec<String>,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn derive<S: AsRef<str>>(root_seed: u64, path: &[S]) -> Result<Self, RngError> {
        if path.is_empty() {
            return Err(RngError::EmptyPath);
        }
        let mut hasher = Sha256::new();
        hasher.update(b"dipa-rng-v1");
        hasher.update(root_seed.to_le_bytes());
        for label in path {
            let bytes = label.as_ref().as_bytes();
            // length prefix keeps ["ab","c"] and ["a","bc"] apart
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(bytes);
        }
        let key: [u8; 32] = hasher.finalize().into();
        Ok(Self {
            root_seed,
            path: path.iter().map(|s| s.as_ref().to_owned()).collect(),
            inner: ChaCha8Rng::from_seed(key),
        })
    }

    /// Child stream: same root seed, this path extended by `labels`.
    pub fn child<S: AsRef<str>>(&self, labels: &[S]) -> RngStream {
        let mut path = self.path.clone();
        path.extend(labels.iter().map(|s| s.as_ref().to_owned()));
        RngStream::derive(self.root_seed, &path).expect("non-empty path")
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Standard `(iteration, episode, purpose)` path.
pub fn episode_path(iteration: u32, episode: u32, purpose: &str) -> [String; 3] {
    [format!("k{iteration}"), format!("e{episode}"), purpose.to_owned()]
}
