use crate::error::{Error, Result};

/// Default base of the geometric frequency ladder.
pub const DEFAULT_SIN_BASE: f64 = 10_000.0;

/// Frequencies used for each input scalar when `inputs` scalars share `d_sin`
/// output slots: `omega_i = base^(-2i / slots)` with `slots = d_sin / inputs`.
pub fn frequency_ladder(d_sin: usize, inputs: usize, base: f64) -> Result<Vec<f64>> {
    if inputs == 0 {
        return Err(Error::config("sinusoidal encoding needs at least one input"));
    }
    if d_sin == 0 || d_sin % (2 * inputs) != 0 {
        return Err(Error::config(format!(
            "sinusoidal width {d_sin} must be a positive multiple of {}",
            2 * inputs
        )));
    }
    if !(base.is_finite() && base > 0.0) {
        return Err(Error::config(format!("sinusoidal base must be positive, got {base}")));
    }
    let slots = d_sin / inputs;
    Ok((0..slots / 2)
        .map(|i| base.powf(-2.0 * i as f64 / slots as f64))
        .collect())
}

/// Encodes one or more scalars into `d_sin` bounded values.
///
/// Scalar `j` owns the contiguous block `[j*s, (j+1)*s)` with `s = d_sin / x.len()`;
/// inside it slot `2i` holds `sin(x_j * omega_i)` and slot `2i+1` holds `cos(x_j * omega_i)`.
pub fn sinusoidal_encode(x: &[f64], d_sin: usize, base: f64) -> Result<Vec<f64>> {
    let freqs = frequency_ladder(d_sin, x.len(), base)?;
    let mut out = Vec::with_capacity(d_sin);
    for &v in x {
        for &w in &freqs {
            let (s, c) = (v * w).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_maps_to_alternating_pattern() {
        assert_eq!(sinusoidal_encode(&[0.0], 4, DEFAULT_SIN_BASE).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        let pair = sinusoidal_encode(&[0.0, 0.0], 8, DEFAULT_SIN_BASE).unwrap();
        assert_eq!(pair, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn custom_ladder_matches_direct_evaluation() {
        // base 100 with 4 slots gives omega = (1, 1/10)
        let got = sinusoidal_encode(&[1.0], 4, 100.0).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.1f64.sin(), 0.1f64.cos()];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_width_is_config_error() {
        assert!(matches!(sinusoidal_encode(&[1.0], 5, 10.0), Err(Error::Config(_))));
        assert!(matches!(sinusoidal_encode(&[1.0, 2.0], 6, 10.0), Err(Error::Config(_))));
    }

    #[test]
    fn outputs_are_bounded() {
        for x in [-1e6, -3.3, 0.0, 0.25, 17.0, 1e9] {
            for v in sinusoidal_encode(&[x, -x], 32, DEFAULT_SIN_BASE).unwrap() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
