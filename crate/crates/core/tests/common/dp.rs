/// Brute-force dynamic programming over a gridded input (step 1e-3 N) and a
/// gridded state with linear interpolation of the cost-to-go. Returns the
/// optimal first input on the input grid.
pub fn dp_first_input(a: f64, b: f64, x0: f64, reference: &[f64], q: f64, r: f64, u_max: f64) -> f64 {
    let n = reference.len();
    let du = 1e-3;
    let steps = (u_max / du).round() as i64;
    let inputs: Vec<f64> = (-steps..=steps).map(|i| i as f64 * du).collect();

    // reachable state interval before input k
    let mut lo = vec![x0; n + 1];
    let mut hi = vec![x0; n + 1];
    for k in 0..n {
        let (p, s) = (a * lo[k], a * hi[k]);
        let reach = b.abs() * u_max;
        lo[k + 1] = p.min(s) - reach;
        hi[k + 1] = p.max(s) + reach;
    }

    const GRID: usize = 1601;
    // value[k][i]: optimal cost from state grid point i before input k
    let mut next_value: Vec<f64> = vec![0.0; GRID];
    let mut next_lo = lo[n];
    let mut next_hi = hi[n];
    let interp = |values: &[f64], lo: f64, hi: f64, x: f64| -> f64 {
        if hi <= lo {
            return values[0];
        }
        let s = ((x - lo) / (hi - lo) * (GRID - 1) as f64).clamp(0.0, (GRID - 1) as f64);
        let i = (s.floor() as usize).min(GRID - 2);
        let w = s - i as f64;
        values[i] * (1.0 - w) + values[i + 1] * w
    };
    for k in (1..n).rev() {
        let mut value = vec![0.0; GRID];
        for (i, v) in value.iter_mut().enumerate() {
            let x = if hi[k] > lo[k] {
                lo[k] + (hi[k] - lo[k]) * i as f64 / (GRID - 1) as f64
            } else {
                lo[k]
            };
            let mut best = f64::INFINITY;
            for &u in &inputs {
                let xn = a * x + b * u;
                let c = q * (xn - reference[k]).powi(2)
                    + r * u * u
                    + interp(&next_value, next_lo, next_hi, xn);
                best = best.min(c);
            }
            *v = best;
        }
        next_value = value;
        next_lo = lo[k];
        next_hi = hi[k];
    }
    let mut best = (f64::INFINITY, 0.0);
    for &u in &inputs {
        let xn = a * x0 + b * u;
        let tail = if n > 1 {
            interp(&next_value, next_lo, next_hi, xn)
        } else {
            0.0
        };
        let c = q * (xn - reference[0]).powi(2) + r * u * u + tail;
        if c < best.0 {
            best = (c, u);
        }
    }
    best.1
}
