use rand::Rng;

/// Maximum forecast horizon for `epoch`: 1 during the first stage, 2 during
/// the second, then `k_max`. Never exceeds `k_max`.
pub fn curriculum_stage(epoch: usize, stages: [usize; 2], k_max: usize) -> usize {
    let l = if epoch < stages[0] {
        1
    } else if epoch < stages[0] + stages[1] {
        2
    } else {
        k_max
    };
    l.min(k_max).max(1)
}

/// Normalized `p(m) ∝ base^-m` over `m = 1..=l`.
pub fn future_step_probabilities(l: usize, base: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=l).map(|m| base.powi(-(m as i32))).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / z).collect()
}

/// Draws `m` in `1..=l` with geometrically decaying probability.
pub fn sample_future_timestep<R: Rng + ?Sized>(l: usize, base: f64, rng: &mut R) -> usize {
    if l <= 1 {
        return 1;
    }
    let p = future_step_probabilities(l, base);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i + 1;
        }
    }
    l
}
