//! Independent oracles shared by the integration tests. Nothing in here calls
//! into the library's numeric code.
#![allow(dead_code, unused_imports)]

mod dp;

pub use dp::dp_first_input;

/// Naive power-sum evaluation, highest degree first.
pub fn power_sum(coeffs: &[f64], x: f64) -> f64 {
    let n = coeffs.len();
    coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| c * x.powi((n - 1 - i) as i32))
        .sum()
}

pub const FS: [f64; 4] = [0.008, 2.087, 8.766, 0.0];
pub const XF: [f64; 3] = [0.0001, -0.0575, 19.21];
pub const FF: [f64; 3] = [0.001, -1.176, 697.1];
pub const A: [f64; 5] = [1e-7, -7e-5, 0.0101, 0.0485, -79.313];

pub fn fs(x: f64) -> f64 {
    power_sum(&FS, x)
}

pub fn xf(v: f64) -> f64 {
    power_sum(&XF, v).max(0.0)
}

pub fn ff(v: f64) -> f64 {
    power_sum(&FF, v)
}

pub fn slope(v: f64) -> f64 {
    power_sum(&A, v)
}

pub fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    if want == 0.0 {
        got.abs() <= tol
    } else {
        ((got - want) / want).abs() <= tol
    }
}

pub fn x_grid() -> impl Iterator<Item = f64> {
    (0..=250).map(|i| i as f64 / 10.0)
}

pub fn v_grid() -> impl Iterator<Item = f64> {
    (0..=200).map(|i| i as f64)
}

/// Two-pass mean and n-1 sample standard deviation.
pub fn two_pass(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    let mean = sum / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    (mean, (ss / (n - 1.0)).sqrt())
}
