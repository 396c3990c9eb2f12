//! Gauss–Legendre rules on `[0,1]`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub order: usize,
    /// Subdivisions per axis for cell triples cut by a truncation boundary.
    pub near_factor: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { order: 4, near_factor: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    /// `order`-point Gauss–Legendre rule mapped to `[0,1]`.
    pub fn gauss(order: usize) -> Rule {
        assert!(order >= 1);
        let m = order;
        let mut nodes = vec![0.0; m];
        let mut weights = vec![0.0; m];
        for i in 0..(m + 1) / 2 {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(m, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(m, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = 0.5 * (1.0 - x);
            nodes[m - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[m - 1 - i] = 0.5 * w;
        }
        Rule { nodes, weights }
    }

    /// Composite rule: `parts` equal panels of the base rule.
    pub fn composite(order: usize, parts: usize) -> Rule {
        let base = Rule::gauss(order);
        let mut nodes = Vec::with_capacity(order * parts);
        let mut weights = Vec::with_capacity(order * parts);
        let w = 1.0 / parts as f64;
        for p in 0..parts {
            for (x, wt) in base.nodes.iter().zip(&base.weights) {
                nodes.push((p as f64 + x) * w);
                weights.push(wt * w);
            }
        }
        Rule { nodes, weights }
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let h = b - a;
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(a + h * x)).sum::<f64>() * h
    }
}

/// `(P_m(x), P_m'(x))` by the three-term recurrence.
fn legendre(m: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_polynomials() {
        for m in 1..=12 {
            let r = Rule::gauss(m);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for deg in 0..2 * m {
                let got = r.integrate(0.0, 1.0, |x| x.powi(deg as i32));
                assert!((got - 1.0 / (deg as f64 + 1.0)).abs() < 1e-13, "m={m} deg={deg}");
            }
        }
    }

    #[test]
    fn composite_converges() {
        let f = |x: f64| (3.0 * x).sin();
        let exact = (1.0 - 3f64.cos()) / 3.0;
        let r = Rule::composite(4, 8);
        assert!((r.integrate(0.0, 1.0, f) - exact).abs() < 1e-10);
    }
}
