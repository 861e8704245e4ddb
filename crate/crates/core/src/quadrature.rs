//! Thin wrappers over Gauss rules plus the composite rules used along paths
//! and on the direction circle.

use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use gauss_quad::legendre::GaussLegendre;

/// Nodes and weights of a rule on a fixed reference interval.
#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Gauss–Legendre rule on `[-1, 1]`, nodes ascending.
pub fn legendre(n: usize) -> Rule {
    let q = GaussLegendre::new(NonZeroUsize::new(n.max(1)).unwrap());
    let mut pairs: Vec<(f64, f64)> = q.as_node_weight_pairs().to_vec();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Rule { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
}

/// Gauss–Hermite rule for the weight `e^{-s^2}` on the real line, nodes ascending.
pub fn hermite(n: usize) -> Rule {
    let q = GaussHermite::new(NonZeroUsize::new(n.max(1)).unwrap());
    let mut pairs: Vec<(f64, f64)> = q.as_node_weight_pairs().to_vec();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Rule { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
}

/// Integrate `f` over `[a, b]` with the Legendre rule mapped affinely.
pub fn integrate_legendre(rule: &Rule, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Equally spaced angles on the circle with equal weights `2π/n` (spectrally
/// accurate for smooth periodic integrands).
pub fn circle(n: usize, offset: f64) -> Vec<(f64, f64)> {
    let w = std::f64::consts::TAU / n as f64;
    (0..n).map(|k| (offset + w * k as f64, w)).collect()
}

/// Graded Gauss panels on the circle: uniform coarse panels plus refined
/// panels of half-width `width` around each centre in `peaks`.
pub fn circle_graded(peaks: &[f64], width: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    use std::f64::consts::{PI, TAU};
    let mut breaks: Vec<f64> = (0..=panels).map(|k| -PI + TAU * k as f64 / panels as f64).collect();
    let wrap = |t: f64| {
        let mut t = (t + PI).rem_euclid(TAU) - PI;
        if t <= -PI {
            t += TAU;
        }
        t
    };
    if width > 0.0 && width < PI {
        for &p in peaks {
            let mut w = width;
            while w > width / 64.0 && w < PI {
                breaks.push(wrap(p - w));
                breaks.push(wrap(p + w));
                w *= 0.5;
            }
            breaks.push(wrap(p));
        }
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    let rule = legendre(order);
    let mut out = Vec::with_capacity(breaks.len() * order);
    for k in 0..breaks.len() - 1 {
        let (a, b) = (breaks[k], breaks[k + 1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            out.push((mid + half * x, w * half));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_exact_for_polynomials() {
        let r = legendre(5);
        let v = integrate_legendre(&r, 0.0, 2.0, |x| x.powi(9));
        assert!((v - 2f64.powi(10) / 10.0).abs() < 1e-10);
    }

    #[test]
    fn hermite_moments() {
        let r = hermite(16);
        let m0: f64 = r.weights.iter().sum();
        let m2: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
        let sp = std::f64::consts::PI.sqrt();
        assert!((m0 - sp).abs() < 1e-12);
        assert!((m2 - sp / 2.0).abs() < 1e-12);
    }

    #[test]
    fn graded_circle_integrates_peaked_function() {
        let s: f64 = 0.01;
        let nodes = circle_graded(&[0.3], 12.0 * s, 16, 10);
        let total: f64 = nodes.iter().map(|(t, w)| w * (-((t - 0.3) / s).powi(2)).exp()).sum();
        let exact = s * std::f64::consts::PI.sqrt();
        assert!((total - exact).abs() < 1e-10 * exact.max(1.0));
        let len: f64 = nodes.iter().map(|p| p.1).sum();
        assert!((len - std::f64::consts::TAU).abs() < 1e-12);
    }
}
