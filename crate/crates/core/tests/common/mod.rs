#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Noise-free output of a stable single-output ARX system
/// `y(k+1) = sum_i a[i] y(k-i) + b . u(k)`, the class a depth-`d` delay
/// embedding with the current input represents exactly.
pub struct ArxSystem {
    pub a: Vec<f64>,
    pub b: [f64; 2],
}

impl ArxSystem {
    /// Random system of order `n` with poles inside radius 0.9, padded with
    /// zero coefficients to length `d`.
    pub fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Self {
        // Build the characteristic polynomial from random poles; complex
        // poles come in conjugate pairs so the coefficients stay real.
        let mut poly = vec![1.0];
        let mut remaining = n;
        while remaining > 0 {
            if remaining >= 2 && rng.random_bool(0.5) {
                let r = rng.random_range(0.1..0.9);
                let th = rng.random_range(0.0..std::f64::consts::PI);
                poly = mul_poly(&poly, &[1.0, -2.0 * r * th.cos(), r * r]);
                remaining -= 2;
            } else {
                let p = rng.random_range(-0.9..0.9);
                poly = mul_poly(&poly, &[1.0, -p]);
                remaining -= 1;
            }
        }
        let mut a = vec![0.0; d];
        for i in 0..n {
            a[i] = -poly[i + 1];
        }
        let b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        Self { a, b }
    }

    /// Simulates `len` samples from `y0` (most recent last) under `inputs`.
    pub fn simulate(&self, y0: &[f64], inputs: &[[f64; 2]], len: usize) -> Vec<f64> {
        let d = self.a.len();
        let mut y = y0.to_vec();
        while y.len() < len {
            let k = y.len() - 1;
            let mut next = self.b[0] * inputs[k][0] + self.b[1] * inputs[k][1];
            for i in 0..d {
                next += self.a[i] * y[k - i];
            }
            y.push(next);
        }
        y
    }
}

fn mul_poly(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

pub fn random_inputs(rng: &mut ChaCha8Rng, len: usize) -> Vec<[f64; 2]> {
    (0..len)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sse / a.len() as f64).sqrt()
}
