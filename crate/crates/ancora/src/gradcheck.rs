//! Finite-difference gradient verification helpers.
//!
//! Central differences in f64: truncation error is O(h^2) and with the
//! step sizes used here both truncation and roundoff sit far below the
//! 1e-4 relative tolerance the crate's checks are stated at.

/// (f(x+h) - f(x-h)) / 2h with the probe restored by the caller's closure.
pub fn central_difference(mut eval_at: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (eval_at(x0 + h) - eval_at(x0 - h)) / (2.0 * h)
}

/// Step size scaled to the probed value; cbrt(f64 eps) is the classic
/// balance point between truncation and cancellation.
pub fn fd_step(x0: f64) -> f64 {
    6e-6 * x0.abs().max(1.0)
}

/// |a - b| relative to the larger magnitude. Values below the floor are
/// both treated as zero, since FD noise dominates there.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let floor = 1e-10;
    if a.abs() < floor && b.abs() < floor {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Outcome of sweeping FD probes against analytic gradients.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_label: String,
}

impl GradCheckReport {
    pub fn record(&mut self, label: &str, analytic: f64, fd: f64) {
        self.checked += 1;
        let rel = relative_error(analytic, fd);
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst_label = format!("{label}: analytic {analytic:.6e} vs fd {fd:.6e}");
        }
    }

    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max rel err {:.3e} >= {:.1e} over {} probes ({})",
            self.max_rel_err,
            tol,
            self.checked,
            self.worst_label
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_matches_polynomial_derivative() {
        // f(x) = x^3 - 2x, f'(2) = 10
        let fd = central_difference(|x| x * x * x - 2.0 * x, 2.0, fd_step(2.0));
        assert!(relative_error(fd, 10.0) < 1e-8);
    }

    #[test]
    fn relative_error_treats_tiny_pairs_as_equal() {
        assert_eq!(relative_error(1e-13, -1e-12), 0.0);
        assert!(relative_error(1.0, 1.0001) > 9e-5);
    }
}
