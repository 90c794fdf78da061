//! Named random streams derived from one run seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

pub const STREAMS: [&str; 4] = ["data", "augment", "aft", "init"];

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(run_seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix(run_seed ^ mix(h))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (it is a u128).
    pub word_pos: String,
}

#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    streams: BTreeMap<String, ChaCha8Rng>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let streams = STREAMS
            .iter()
            .map(|&n| (n.to_string(), ChaCha8Rng::seed_from_u64(stream_seed(seed, n))))
            .collect();
        RngStreams { seed, streams }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, name: &str) -> &mut ChaCha8Rng {
        let seed = self.seed;
        self.streams
            .entry(name.to_string())
            .or_insert_with(|| ChaCha8Rng::seed_from_u64(stream_seed(seed, name)))
    }

    /// One fresh `u64` from the named stream.
    pub fn next_seed(&mut self, name: &str) -> u64 {
        self.stream(name).gen()
    }

    pub fn state(&self) -> BTreeMap<String, StreamState> {
        self.streams
            .iter()
            .map(|(n, r)| {
                (n.clone(), StreamState { seed: stream_seed(self.seed, n), word_pos: r.get_word_pos().to_string() })
            })
            .collect()
    }

    pub fn restore(seed: u64, state: &BTreeMap<String, StreamState>) -> Result<Self> {
        let mut out = RngStreams::new(seed);
        for (name, s) in state {
            let pos: u128 = s.word_pos.parse().map_err(|_| invalid(format!("bad word_pos for stream {name}")))?;
            let mut r = ChaCha8Rng::seed_from_u64(s.seed);
            r.set_word_pos(pos);
            out.streams.insert(name.clone(), r);
        }
        Ok(out)
    }
}

/// Normal(0, std²) truncated to ±2 std by rejection.
pub fn trunc_normal<T: Scalar>(dims: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(T::c(z * std));
        }
    }
    Tensor::new(dims.to_vec(), data).expect("sized by construction")
}
