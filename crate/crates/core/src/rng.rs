//! Hierarchical, counter-based random streams.
//!
//! A stream is identified by a root seed plus a path of labels
//! (experiment, replicate, fold, purpose, ...). The generator for a path is
//! a ChaCha8 instance keyed by a hash of that path, so the draws a worker
//! sees depend only on its path and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Label accepted when forking a stream.
pub trait StreamLabel {
    fn label_hash(&self) -> u64;
}

impl StreamLabel for &str {
    fn label_hash(&self) -> u64 {
        fnv1a(self.as_bytes())
    }
}

impl StreamLabel for String {
    fn label_hash(&self) -> u64 {
        fnv1a(self.as_bytes())
    }
}

impl StreamLabel for u64 {
    fn label_hash(&self) -> u64 {
        splitmix(*self ^ 0x5851_f42d_4c95_7f2d)
    }
}

impl StreamLabel for usize {
    fn label_hash(&self) -> u64 {
        (*self as u64).label_hash()
    }
}

impl<A: StreamLabel, B: StreamLabel> StreamLabel for (A, B) {
    fn label_hash(&self) -> u64 {
        splitmix(self.0.label_hash() ^ self.1.label_hash().rotate_left(17))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Child stream one level below this one.
    pub fn fork(&self, label: impl StreamLabel) -> Self {
        let mut path = self.path.clone();
        path.push(label.label_hash());
        Self {
            seed: self.seed,
            path,
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut state = splitmix(self.seed);
        for &component in &self.path {
            state = splitmix(state ^ component);
        }
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            state = splitmix(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draws(stream: &RngStream) -> Vec<u64> {
        let mut g = stream.generator();
        (0..16).map(|_| g.random()).collect()
    }

    #[test]
    fn same_path_same_draws() {
        let a = RngStream::new(7).fork("exp").fork(3usize).fork("fold");
        let b = RngStream::new(7).fork("exp").fork(3usize).fork("fold");
        assert_eq!(draws(&a), draws(&b));
    }

    #[test]
    fn sibling_paths_differ() {
        let root = RngStream::new(7);
        assert_ne!(draws(&root.fork(0usize)), draws(&root.fork(1usize)));
        assert_ne!(draws(&root.fork("a")), draws(&root.fork("b")));
        assert_ne!(draws(&RngStream::new(8)), draws(&RngStream::new(7)));
    }

    #[test]
    fn forks_are_thread_independent() {
        let root = RngStream::new(42);
        let serial: Vec<Vec<u64>> = (0..8usize).map(|i| draws(&root.fork(i))).collect();
        let parallel: Vec<Vec<u64>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8usize)
                .rev()
                .map(|i| {
                    let r = root.clone();
                    s.spawn(move || (i, draws(&r.fork(i))))
                })
                .collect();
            let mut out: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
            out.sort_by_key(|(i, _)| *i);
            out.into_iter().map(|(_, d)| d).collect()
        });
        assert_eq!(serial, parallel);
    }
}
