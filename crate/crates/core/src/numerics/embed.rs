use crate::error::{Error, Result};

/// Interleaved `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with frequencies
/// spaced geometrically from 1 down to 1/10000.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("embedding dim {dim} must be even and positive")));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("timestep {t} must be finite and non-negative")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10_000f64.powf(-(i as f64) / (half - 1) as f64)
        };
        let (s, c) = (t * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_timestep() {
        let e = sinusoidal_embed(0.0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
    }

    #[test]
    fn bounded_and_unit_pairs() {
        let e = sinusoidal_embed(417.0, 64).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        let norm2: f64 = e.iter().map(|v| v * v).sum();
        assert!((norm2 - 32.0).abs() < 1e-9);
    }

    #[test]
    fn distinct_timesteps_are_distinct() {
        // brute-force pairwise check over t = 0..=1000
        let embs: Vec<Vec<f64>> = (0..=1000)
            .map(|t| sinusoidal_embed(t as f64, 64).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(sinusoidal_embed(1.0, 7).is_err());
        assert!(sinusoidal_embed(-1.0, 8).is_err());
    }
}
