use crate::{Error, Result};

/// Log-scaled sinusoidal features of a noise level.
///
/// The level enters as `c = ln(t) / 4`; the first pair uses unit frequency,
/// so `(sin c, cos c)` alone is injective for `t` in `(e^{-4 pi}, e^{4 pi})`,
/// which covers every schedule used here. Higher pairs use geometrically
/// increasing frequencies. An odd `width` appends `c` itself.
pub fn noise_embedding(t: f64, width: usize) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise level must be positive, got {t}"
        )));
    }
    let c = t.ln() / 4.0;
    let pairs = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..pairs {
        let freq = if pairs > 1 {
            (i as f64 * (16f64).ln() / (pairs - 1) as f64).exp()
        } else {
            1.0
        };
        out.push((c * freq).sin());
        out.push((c * freq).cos());
    }
    if width % 2 == 1 {
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let a = noise_embedding(0.3, 16).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, noise_embedding(0.3, 16).unwrap());
        assert_eq!(noise_embedding(0.3, 7).unwrap().len(), 7);
    }

    #[test]
    fn distinct_levels_embed_distinctly() {
        let levels = [80.0, 20.0, 5.0, 1.0, 0.3, 0.05, 0.01, 0.002];
        for (i, a) in levels.iter().enumerate() {
            for b in &levels[i + 1..] {
                assert_ne!(
                    noise_embedding(*a, 8).unwrap(),
                    noise_embedding(*b, 8).unwrap()
                );
            }
        }
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(noise_embedding(0.0, 8).is_err());
        assert!(noise_embedding(-1.0, 8).is_err());
    }
}
