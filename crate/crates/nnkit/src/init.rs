//! Parameter initialization.

use rand::Rng;

use crate::tensor::Tensor;

/// Standard normal draw via Box-Muller, so we stay off distribution crates
/// and keep the byte-for-byte stream stable.
pub fn normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// Truncated normal (resample outside ±2σ) with stddev 1/sqrt(fan_in).
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    trunc_normal_std(rng, shape, std)
}

pub fn trunc_normal_std(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let mut z = normal(rng);
        while z.abs() > 2.0 {
            z = normal(rng);
        }
        *v = z * std;
    }
    t
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = trunc_normal(&mut rng, &[64, 64], 64);
        let std = 1.0 / 8.0;
        assert!(t.data().iter().all(|v| v.abs() <= 2.0 * std + 1e-12));

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let t2 = trunc_normal(&mut rng2, &[64, 64], 64);
        assert_eq!(t, t2);
    }
}
