//! Deterministic sub-seed derivation and low-discrepancy sampling.

/// Derive a well-mixed sub-seed from a base seed and two salts (splitmix64
/// finalizer). Used so every episode, proposal, and refit draws from its own
/// reproducible stream.
pub fn derive_seed(base: u64, salt: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Radical-inverse (van der Corput) value of `index` in the given base.
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut f = 1.0 / base as f64;
    while index > 0 {
        result += (index % base) as f64 * f;
        index /= base;
        f /= base as f64;
    }
    result
}

/// First `n` primes (Halton bases).
fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut candidate = 2u64;
    while primes.len() < n {
        if primes.iter().all(|p| candidate % p != 0) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

/// Halton sequence over the unit cube with a Cranley-Patterson rotation:
/// point `i` is `frac(halton_i + shift)` component-wise.
pub struct HaltonSampler {
    primes: Vec<u64>,
    shift: Vec<f64>,
    next_index: u64,
}

impl HaltonSampler {
    pub fn new(dim: usize, shift: Vec<f64>) -> Self {
        assert_eq!(shift.len(), dim);
        Self {
            primes: first_primes(dim),
            shift,
            // Skip index 0 (the all-zeros point).
            next_index: 1,
        }
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let i = self.next_index;
        self.next_index += 1;
        self.primes
            .iter()
            .zip(self.shift.iter())
            .map(|(&p, &s)| {
                let v = radical_inverse(i, p) + s;
                v - v.floor()
            })
            .collect()
    }
}
