//! Central finite differences for gradient verification.

/// Relative error with an absolute floor, so coordinates whose true
/// gradient is ~0 are compared on an absolute scale of `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for the requested coordinate.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], coord: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[coord] += h;
    let fp = f(&xp);
    xp[coord] = x[coord] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

impl GradCheckReport {
    pub fn record(&mut self, coord: usize, analytic: f64, numeric: f64, floor: f64) {
        let e = relative_error(analytic, numeric, floor);
        if self.checked == 0 || e > self.max_rel_err {
            self.max_rel_err = e;
            self.worst_coord = coord;
        }
        self.checked += 1;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}
