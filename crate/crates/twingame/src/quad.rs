//! Discounted-payoff quadrature: composite 3-point Gauss–Legendre panels
//! aligned with a trajectory mesh. Panels are subdivided so that
//! `rho * h` stays small, keeping the exponential weight resolved even on
//! coarse meshes.

/// Nodes/weights of 3-point Gauss–Legendre on [-1, 1].
const GL3_X: [f64; 3] = [-0.7745966692414834, 0.0, 0.7745966692414834];
const GL3_W: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// Computes `∫ e^{-rho t} f(t) dt` over the mesh `times`, evaluating `f`
/// at Gauss points. Each mesh interval is split so a panel spans at most
/// `0.2 / rho` in time.
pub fn discounted_mesh_integral(rho: f64, times: &[f64], f: &mut dyn FnMut(f64) -> f64) -> f64 {
    assert!(times.len() >= 2, "quadrature needs at least one interval");
    let panel_cap = if rho > 1e-12 { 0.2 / rho } else { f64::INFINITY };
    let mut total = 0.0;
    for w in times.windows(2) {
        let (a, b) = (w[0], w[1]);
        let dt = b - a;
        if dt <= 0.0 {
            continue;
        }
        let parts = (dt / panel_cap).ceil().max(1.0) as usize;
        let h = dt / parts as f64;
        for p in 0..parts {
            let lo = a + h * p as f64;
            let mid = lo + 0.5 * h;
            let mut acc = 0.0;
            for (x, wgt) in GL3_X.iter().zip(GL3_W) {
                let t = mid + 0.5 * h * x;
                acc += wgt * (-rho * t).exp() * f(t);
            }
            total += 0.5 * h * acc;
        }
    }
    total
}
