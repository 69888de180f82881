//! Seed derivation. Every replica, path and tree node draws from its own
//! ChaCha8 stream keyed by the master seed and an index path, so results do
//! not depend on how work is spread across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Seed for the stream at `path` below `master`.
pub fn derive_seed(master: u64, path: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"sbmcond-stream");
    hasher.update(master.to_le_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    seed
}

pub fn stream(master: u64, path: &[u64]) -> SimRng {
    SimRng::from_seed(derive_seed(master, path))
}

/// 64-bit child seed, for handing a stream to a nested construction.
pub fn child_seed(master: u64, path: &[u64]) -> u64 {
    let s = derive_seed(master, path);
    u64::from_le_bytes(s[..8].try_into().expect("8 bytes"))
}

/// Runs `reps` independent replicas in parallel, replica `i` on the stream
/// `(master, [tag, i])`, and returns the results in index order.
pub fn replicate<T, F>(master: u64, tag: u64, reps: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut SimRng) -> T + Sync + Send,
{
    (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(master, &[tag, i as u64]);
            f(i, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(1, &[2, 3]).random();
        let b: u64 = stream(1, &[2, 3]).random();
        let c: u64 = stream(1, &[3, 2]).random();
        let d: u64 = stream(2, &[2, 3]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(child_seed(1, &[0]), child_seed(1, &[1]));
    }

    #[test]
    fn replicas_do_not_depend_on_thread_count() {
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| replicate(7, 1, 64, |i, rng| (i, rng.random::<u64>())))
        };
        assert_eq!(run(1), run(3));
    }
}
