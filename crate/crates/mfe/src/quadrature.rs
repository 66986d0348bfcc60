//! Gauss–Legendre rules on [0, t].
//!
//! Nodes come from Newton iteration on the three-term recurrence, which stays
//! accurate for the several-thousand-node rules the oscillatory integrals need.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// n-point rule on [-1, 1], nodes ascending. Rules are memoized; nested
/// quadratures ask for the same n thousands of times.
pub fn gauss_legendre(n: usize) -> Arc<Rule> {
    assert!(n >= 1, "rule needs at least one node");
    static RULES: OnceLock<Mutex<HashMap<usize, Arc<Rule>>>> = OnceLock::new();
    let rules = RULES.get_or_init(Mutex::default);
    if let Some(r) = rules.lock().expect("rule cache").get(&n) {
        return r.clone();
    }
    let rule = Arc::new(compute_rule(n));
    rules.lock().expect("rule cache").insert(n, rule.clone());
    rule
}

fn compute_rule(n: usize) -> Rule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Rule { nodes, weights }
}

// P_n(x) and P_n'(x)
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

impl Rule {
    /// Affine map onto [a, b].
    pub fn on(&self, a: f64, b: f64) -> Rule {
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        Rule {
            nodes: self.nodes.iter().map(|x| c + h * x).collect(),
            weights: self.weights.iter().map(|w| w * h).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Node count for ∫_0^t of something oscillating like e^{iωsτ}: ten points per period, at least `floor`.
pub fn oscillatory_nodes(omega: f64, s: f64, t: f64, floor: usize) -> usize {
    let per = (10.0 * omega * s.abs() * t / (2.0 * PI)).ceil() as usize;
    per.max(floor).max(8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 16, 33] {
            let r = gauss_legendre(n);
            for p in 0..(2 * n) {
                let got: f64 = r
                    .nodes
                    .iter()
                    .zip(&r.weights)
                    .map(|(x, w)| w * x.powi(p as i32))
                    .sum();
                let want = if p % 2 == 1 {
                    0.0
                } else {
                    2.0 / (p as f64 + 1.0)
                };
                assert!((got - want).abs() < 1e-13, "n={n} p={p} got {got}");
            }
        }
    }

    #[test]
    fn large_rule_is_sane() {
        let r = gauss_legendre(4000).on(0.0, 3.0);
        let w: f64 = r.weights.iter().sum();
        assert!((w - 3.0).abs() < 1e-12);
        // ∫_0^3 cos(200 x) dx
        let got: f64 = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(x, w)| w * (200.0 * x).cos())
            .sum();
        assert!((got - (600.0f64).sin() / 200.0).abs() < 1e-13);
        assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
    }
}
