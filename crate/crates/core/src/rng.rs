//! Keyed random streams and Gaussian draw generators.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by
//! `(seed, domain, unit, sub)`, so results do not depend on how work is
//! scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Independent purposes that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Likelihood = 1,
    Generate = 2,
    Weights = 3,
    Tail = 4,
    Restart = 5,
    Fisher = 6,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic stream for `(seed, domain, unit, sub)`.
pub fn substream(seed: u64, domain: Domain, unit: u64, sub: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed) ^ (domain as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(splitmix(unit) ^ sub.rotate_left(32));
    rng
}

/// How standard-normal vectors for Monte-Carlo integration are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Independent pseudo-random draws.
    Iid,
    /// Pairs `(z, -z)`.
    Antithetic,
    /// Digitally shifted Sobol points mapped through the normal quantile and
    /// completed with all coordinate sign flips (when `2^p ≤ 64`). The sign
    /// flips make the estimate even in every standard deviation, hence smooth
    /// in the variances at zero.
    #[default]
    Sobol,
}

const SOBOL_MAX_DIM: usize = 8;
// (degree s, polynomial coefficients a, initial direction numbers m) for dimensions 2..=8.
const SOBOL_PARAMS: [(u32, u32, &[u32]); SOBOL_MAX_DIM - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
];

fn direction_numbers(dim: usize) -> [u32; 32] {
    let mut v = [0u32; 32];
    if dim == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (31 - k);
        }
        return v;
    }
    let (s, a, m) = SOBOL_PARAMS[dim - 1];
    let s = s as usize;
    for k in 0..32 {
        v[k] = if k < s {
            m[k] << (31 - k)
        } else {
            let mut x = v[k - s] ^ (v[k - s] >> s);
            for l in 1..s {
                if (a >> (s - 1 - l)) & 1 == 1 {
                    x ^= v[k - l];
                }
            }
            x
        };
    }
    v
}

/// Unscrambled Sobol integers for indices `0..n` in `dims` dimensions (row-major).
pub(crate) fn sobol_points(n: usize, dims: usize) -> Vec<u32> {
    assert!(dims <= SOBOL_MAX_DIM, "Sobol sequence supports at most {SOBOL_MAX_DIM} dimensions");
    let dirs: Vec<[u32; 32]> = (0..dims).map(direction_numbers).collect();
    let mut out = vec![0u32; n * dims];
    let mut state = vec![0u32; dims];
    for i in 0..n {
        if i > 0 {
            let c = (i - 1).trailing_ones() as usize;
            for d in 0..dims {
                state[d] ^= dirs[d][c];
            }
        }
        out[i * dims..(i + 1) * dims].copy_from_slice(&state);
    }
    out
}

/// `m` standard-normal vectors of dimension `p` (row-major `m × p`) for one unit.
pub fn normal_draws(sampler: Sampler, seed: u64, domain: Domain, unit: u64, m: usize, p: usize) -> Vec<f64> {
    let mut rng = substream(seed, domain, unit, 0);
    let mut out = vec![0.0; m * p];
    match sampler {
        Sampler::Iid => {
            for v in out.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        Sampler::Antithetic => {
            for pair in 0..m.div_ceil(2) {
                let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                for (copy, sign) in [(2 * pair, 1.0), (2 * pair + 1, -1.0)] {
                    if copy < m {
                        for k in 0..p {
                            out[copy * p + k] = sign * z[k];
                        }
                    }
                }
            }
        }
        Sampler::Sobol if p > SOBOL_MAX_DIM => {
            return normal_draws(Sampler::Antithetic, seed, domain, unit, m, p);
        }
        Sampler::Sobol => {
            let flips = if p <= 6 { 1usize << p } else { 2 };
            let base = m.div_ceil(flips);
            let shift: Vec<u32> = (0..p).map(|_| rng.random()).collect();
            let pts = sobol_points(base, p);
            let normal = Normal::standard();
            let mut row = 0;
            'outer: for b in 0..base {
                let z: Vec<f64> = (0..p)
                    .map(|k| {
                        let u = ((pts[b * p + k] ^ shift[k]) as f64 + 0.5) / 4_294_967_296.0;
                        normal.inverse_cdf(u)
                    })
                    .collect();
                for f in 0..flips {
                    if row == m {
                        break 'outer;
                    }
                    for k in 0..p {
                        let flip = if flips == 2 { f == 1 } else { (f >> k) & 1 == 1 };
                        out[row * p + k] = if flip { -z[k] } else { z[k] };
                    }
                    row += 1;
                }
            }
        }
    }
    out
}
