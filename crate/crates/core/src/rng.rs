//! Counter-based random streams keyed by `(seed, run, particle, channel)`.
//!
//! Every particle owns one ChaCha8 stream per channel, so results do not
//! depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Primary Brownian increments (reflected channel in couplings).
    Brownian = 0,
    /// Second, independent Brownian increments (synchronous channel).
    Independent = 1,
    /// Spin holding times.
    Spin = 2,
    /// Spin-coupling draws and the partner clock of an unglued pair.
    Coupling = 3,
    /// Initial-condition sampling.
    Init = 4,
}

const CHANNELS: u64 = 8;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key(seed: u64, run: u64) -> [u8; 32] {
    let mut state = seed ^ run.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out
}

/// The stream for one `(seed, run, particle, channel)` tuple.
pub fn stream(seed: u64, run: u64, particle: u64, channel: Channel) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(key(seed, run));
    rng.set_stream(particle * CHANNELS + channel as u64);
    rng
}

/// One stream per particle for a given channel.
pub fn particle_streams(seed: u64, run: u64, n: usize, channel: Channel) -> Vec<ChaCha8Rng> {
    (0..n as u64).map(|i| stream(seed, run, i, channel)).collect()
}
