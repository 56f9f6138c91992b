//! Small numerical helpers shared across modules.

/// Kahan–Babuška (Neumaier) compensated sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub const fn new() -> Self {
        Self {
            sum: 0.0,
            compensation: 0.0,
        }
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for v in iter {
            s.add(v);
        }
        s
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `index` in an ensemble with master seed `master`.
///
/// `splitmix64(splitmix64(master) ^ index)`; stable across releases so that
/// any single run can be reproduced from the manifest.
pub fn run_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index)
}

/// Seed of an independent sub-stream of `seed` (0 = environment, 1 = walker).
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5EED)))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().copied().collect::<KahanSum>().value() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: KahanSum = values.iter().map(|v| (v - m) * (v - m)).collect();
    ss.value() / (values.len() as f64 - 1.0)
}

pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ma, mb) = (mean(a), mean(b));
    let s: KahanSum = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    s.value() / (a.len() as f64 - 1.0)
}

/// Standard error of the unbiased variance estimate, from the fourth
/// central moment: `sqrt((m4 - s^4 (N-3)/(N-1)) / N)`.
pub fn variance_standard_error(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = mean(values);
    let s2 = variance(values);
    let m4: KahanSum = values.iter().map(|v| (v - m).powi(4)).collect();
    let m4 = m4.value() / n;
    ((m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut s = KahanSum::new();
        s.add(1.0);
        for _ in 0..10_000_000 {
            s.add(1e-16);
        }
        assert!((s.value() - (1.0 + 1e-9)).abs() < 1e-15);
    }

    #[test]
    fn seeds_differ_by_index_and_stream() {
        assert_ne!(run_seed(1, 0), run_seed(1, 1));
        assert_ne!(run_seed(1, 0), run_seed(2, 0));
        assert_ne!(stream_seed(7, 0), stream_seed(7, 1));
        assert_eq!(run_seed(42, 17), run_seed(42, 17));
    }

    #[test]
    fn moments_of_small_sample() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&v), 2.5);
        assert!((variance(&v) - 5.0 / 3.0).abs() < 1e-15);
        assert!((covariance(&v, &v) - variance(&v)).abs() < 1e-15);
    }
}
