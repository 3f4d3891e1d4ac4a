//! Timing-noise distributions.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A distribution of additive time noise, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    None,
    Constant {
        value: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// Zero-mean unless `mean` is set.
    Gaussian {
        #[serde(default)]
        mean: f64,
        sigma: f64,
    },
    /// `shift + LogNormal(mu, sigma)`, the usual shape of network jitter.
    ShiftedLogNormal {
        shift: f64,
        mu: f64,
        sigma: f64,
    },
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        NoiseSpec::Gaussian { mean: 0.0, sigma }
    }

    /// Shifted lognormal whose lognormal part has the given mean and standard
    /// deviation.
    pub fn lognormal_with_moments(shift: f64, mean: f64, std: f64) -> Result<Self> {
        if mean <= 0.0 || std < 0.0 || !mean.is_finite() || !std.is_finite() {
            return Err(Error::param(
                "lognormal",
                format!("mean {mean} must be > 0 and std {std} >= 0"),
            ));
        }
        let sigma2 = (1.0 + (std / mean).powi(2)).ln();
        Ok(NoiseSpec::ShiftedLogNormal {
            shift,
            mu: mean.ln() - sigma2 / 2.0,
            sigma: sigma2.sqrt(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |name, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} is not finite")))
            }
        };
        match *self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Constant { value } => finite("noise.value", value),
            NoiseSpec::Uniform { low, high } => {
                finite("noise.low", low)?;
                finite("noise.high", high)?;
                if low > high {
                    return Err(Error::param("noise.low", "low must not exceed high"));
                }
                Ok(())
            }
            NoiseSpec::Gaussian { mean, sigma } => {
                finite("noise.mean", mean)?;
                finite("noise.sigma", sigma)?;
                if sigma < 0.0 {
                    return Err(Error::param("noise.sigma", "must be >= 0"));
                }
                Ok(())
            }
            NoiseSpec::ShiftedLogNormal { shift, mu, sigma } => {
                finite("noise.shift", shift)?;
                finite("noise.mu", mu)?;
                finite("noise.sigma", sigma)?;
                if sigma < 0.0 {
                    return Err(Error::param("noise.sigma", "must be >= 0"));
                }
                Ok(())
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Constant { value } => value,
            NoiseSpec::Uniform { low, high } => (low + high) / 2.0,
            NoiseSpec::Gaussian { mean, .. } => mean,
            NoiseSpec::ShiftedLogNormal { shift, mu, sigma } => shift + (mu + sigma * sigma / 2.0).exp(),
        }
    }

    pub fn std_dev(&self) -> f64 {
        match *self {
            NoiseSpec::None | NoiseSpec::Constant { .. } => 0.0,
            NoiseSpec::Uniform { low, high } => (high - low) / 12f64.sqrt(),
            NoiseSpec::Gaussian { sigma, .. } => sigma,
            NoiseSpec::ShiftedLogNormal { mu, sigma, .. } => {
                let s2 = sigma * sigma;
                ((s2.exp() - 1.0) * (2.0 * mu + s2).exp()).sqrt()
            }
        }
    }

    /// Draws one sample. Degenerate parameters (zero width or zero sigma)
    /// return the location without consuming randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Constant { value } => value,
            NoiseSpec::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    rng.random_range(low..high)
                }
            }
            NoiseSpec::Gaussian { mean, sigma } => {
                if sigma == 0.0 {
                    mean
                } else {
                    Normal::new(mean, sigma).expect("validated sigma").sample(rng)
                }
            }
            NoiseSpec::ShiftedLogNormal { shift, mu, sigma } => {
                if sigma == 0.0 {
                    shift + mu.exp()
                } else {
                    shift + LogNormal::new(mu, sigma).expect("validated sigma").sample(rng)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn degenerate_distributions() {
        let mut rng = seed::rng(1);
        assert_eq!(NoiseSpec::None.sample(&mut rng), 0.0);
        assert_eq!(NoiseSpec::gaussian(0.0).sample(&mut rng), 0.0);
        assert_eq!(NoiseSpec::Constant { value: 0.005 }.sample(&mut rng), 0.005);
    }

    #[test]
    fn lognormal_moments_round_trip() {
        let spec = NoiseSpec::lognormal_with_moments(0.001, 0.002, 0.0005).unwrap();
        assert!((spec.mean() - 0.003).abs() < 1e-15);
        assert!((spec.std_dev() - 0.0005).abs() < 1e-15);
        let mut rng = seed::rng(3);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| spec.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.003).abs() < 1e-5, "{mean}");
        assert!(draws.iter().all(|d| *d > 0.001));
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(NoiseSpec::gaussian(-1.0).validate().is_err());
        assert!(NoiseSpec::Uniform { low: 1.0, high: 0.0 }.validate().is_err());
        assert!(NoiseSpec::Constant { value: f64::NAN }.validate().is_err());
        assert!(NoiseSpec::lognormal_with_moments(0.0, 0.0, 1.0).is_err());
    }
}
