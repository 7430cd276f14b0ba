//! Truncated Karhunen-Loeve expansion of a log-diffusivity field on the
//! unit square, built from analytic tensor sinusoids.
//!
//! Mode amplitudes follow the one-dimensional exponential-covariance
//! spectral decay at the configured correlation length, tensorized over
//! both axes and normalized so that the domain-averaged field variance
//! matches the target. Modes are ordered by decreasing wavelength, so the
//! leading coefficients carry the coarse structure of the field.

use nalgebra::DVector;

#[derive(Debug, Clone, Copy)]
struct KlMode {
    p: usize,
    q: usize,
    amplitude: f64,
}

/// log kappa(x, theta) = sum_k a_k phi_k(x) theta_k with
/// phi_{p,q}(x, y) = cos(p pi x) cos(q pi y).
#[derive(Debug, Clone)]
pub struct KlField {
    modes: Vec<KlMode>,
}

impl KlField {
    pub fn new(mode_count: usize, correlation_length: f64, variance: f64) -> Self {
        assert!(mode_count > 0 && correlation_length > 0.0 && variance > 0.0);
        let spectral = |p: usize| -> f64 {
            let omega = p as f64 * std::f64::consts::PI;
            2.0 * correlation_length / (1.0 + (correlation_length * omega).powi(2))
        };
        // Standard KL truncation: keep the modes with the largest
        // eigenvalues, which for this spectrum are the longest wavelengths.
        // Ties broken deterministically.
        let cap = (mode_count as f64).sqrt().ceil() as usize + 4;
        let mut pairs: Vec<(usize, usize, f64)> = (0..=cap)
            .flat_map(|p| (0..=cap).map(move |q| (p, q)))
            .map(|(p, q)| (p, q, (spectral(p) * spectral(q)).sqrt()))
            .collect();
        pairs.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then_with(|| (a.0 * a.0 + a.1 * a.1, a.0, a.1).cmp(&(b.0 * b.0 + b.1 * b.1, b.0, b.1)))
        });
        pairs.truncate(mode_count);

        // cos^2 averages to 1 for the constant factor and 1/2 otherwise.
        let weight = |p: usize| if p == 0 { 1.0 } else { 0.5 };
        let total: f64 = pairs
            .iter()
            .map(|&(p, q, r)| r * r * weight(p) * weight(q))
            .sum();
        let scale = (variance / total).sqrt();
        let modes = pairs
            .into_iter()
            .map(|(p, q, r)| KlMode { p, q, amplitude: scale * r })
            .collect();
        Self { modes }
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn amplitude(&self, k: usize) -> f64 {
        self.modes[k].amplitude
    }

    /// log kappa at one point; linear in theta.
    pub fn log_field(&self, theta: &DVector<f64>, x: f64, y: f64) -> f64 {
        debug_assert_eq!(theta.len(), self.modes.len());
        self.modes
            .iter()
            .zip(theta.iter())
            .map(|(m, t)| {
                m.amplitude
                    * (m.p as f64 * std::f64::consts::PI * x).cos()
                    * (m.q as f64 * std::f64::consts::PI * y).cos()
                    * t
            })
            .sum()
    }

    pub fn field(&self, theta: &DVector<f64>, x: f64, y: f64) -> f64 {
        self.log_field(theta, x, y).exp()
    }
}
