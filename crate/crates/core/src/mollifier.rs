//! The smooth bump used to average densities just to the right of the walker.

use std::sync::OnceLock;

use crate::lattice::SiteWeights;
use crate::quadrature;

fn bump(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        (-1.0 / (u * (1.0 - u))).exp()
    }
}

/// `∫_0^1 exp(-1/(u(1-u))) du`.
pub fn normalization() -> f64 {
    static Z: OnceLock<f64> = OnceLock::new();
    *Z.get_or_init(|| {
        quadrature::integrate(bump, 0.0, 1.0, 1e-16, 100_000)
            .expect("bump integral converges")
            .value
    })
}

/// Unit-mass bump supported in `(0, 1)`.
pub fn phi(u: f64) -> f64 {
    bump(u) / normalization()
}

/// `φ_ε(u) = φ(u/ε)/ε`, supported in `(0, ε)`.
pub fn phi_eps(u: f64, epsilon: f64) -> f64 {
    phi(u / epsilon) / epsilon
}

/// Lattice weights `φ_ε(y/n)/n` for the sites `y = 1, 2, …` with `y/n < ε`.
pub fn site_weights(epsilon: f64, n: u32) -> SiteWeights {
    let n_f = n as f64;
    let values = (1..)
        .map(|y| y as f64 / n_f)
        .take_while(|&u| u < epsilon)
        .map(|u| phi_eps(u, epsilon) / n_f)
        .collect();
    SiteWeights { start: 1, values }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_value() {
        // independent check: composite midpoint rule with 2e6 panels
        let m = 2_000_000;
        let h = 1.0 / m as f64;
        let midpoint: f64 = (0..m).map(|k| bump((k as f64 + 0.5) * h)).sum::<f64>() * h;
        assert!((normalization() - midpoint).abs() < 1e-13, "{} {}", normalization(), midpoint);
    }

    #[test]
    fn support_is_open_unit_interval() {
        assert_eq!(phi(0.0), 0.0);
        assert_eq!(phi(1.0), 0.0);
        assert_eq!(phi(-0.3), 0.0);
        assert!(phi(0.5) > 0.0);
        assert_eq!(phi_eps(0.25, 0.2), 0.0);
        assert!(phi_eps(0.1, 0.2) > 0.0);
    }

    #[test]
    fn riemann_mass_near_one() {
        let w = site_weights(0.2, 64);
        assert_eq!(w.values.len(), 12);
        let mass: f64 = w.values.iter().sum();
        assert!((mass - 1.0).abs() < 1e-4, "{mass}");
    }
}
