//! Gauss–Legendre rules on the unit interval.

/// Nodes and weights of the `n`-point Gauss–Legendre rule mapped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            // Tricomi initial guess, then Newton on P_n
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 1.0;
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
            // map [-1,1] -> [0,1]
            nodes[i] = 0.5 * (1.0 - x);
            nodes[n - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
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

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_for_polynomials() {
        for n in [1, 2, 5, 8, 16] {
            let q = GaussLegendre::new(n);
            assert_relative_eq!(q.weights.iter().sum::<f64>(), 1.0, max_relative = 1e-14);
            for deg in 0..(2 * n) {
                let got = q.integrate(|x| x.powi(deg as i32));
                assert_relative_eq!(got, 1.0 / (deg as f64 + 1.0), max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn nodes_sorted_inside_interval() {
        let q = GaussLegendre::new(16);
        assert!(q.nodes.windows(2).all(|w| w[0] < w[1]));
        assert!(q.nodes[0] > 0.0 && q.nodes[15] < 1.0);
    }

    #[test]
    fn smooth_integrand() {
        let q = GaussLegendre::new(16);
        assert_relative_eq!(q.integrate(|x| (3.0 * x).exp()), ((3.0f64).exp() - 1.0) / 3.0, max_relative = 1e-14);
    }
}
