//! Uniform tensor grids on a box with zero Dirichlet data, grid functions,
//! difference operators and the discrete sine eigenbasis of `-Δ_h`.
//!
//! Gradients live on "pieces": the `n + 1` cell edges in one dimension and
//! the two triangles of each cell of the Courant triangulation in two. Both
//! choices make `-div ∘ grad` the standard 3- resp. 5-point Laplacian, so the
//! sine modes diagonalize it exactly.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    n: [usize; 2],
    lengths: [f64; 2],
}

impl Grid {
    /// A grid with interior node counts `n` and box side lengths `lengths`.
    pub fn new(n: &[usize], lengths: &[f64]) -> Result<Self> {
        let dim = n.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidArgument(format!("dimension {dim} not in {{1,2}}")));
        }
        if lengths.len() != dim {
            return Err(Error::ShapeMismatch { expected: dim, got: lengths.len() });
        }
        if let Some(&bad) = n.iter().find(|&&k| k < 2) {
            return Err(Error::InvalidArgument(format!("need at least 2 interior nodes per axis, got {bad}")));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!("side length {bad} must be positive")));
        }
        let mut g = Grid { dim, n: [n[0], 1], lengths: [lengths[0], 1.0] };
        if dim == 2 {
            g.n[1] = n[1];
            g.lengths[1] = lengths[1];
        }
        Ok(g)
    }

    pub fn line(n: usize, length: f64) -> Result<Self> {
        Self::new(&[n], &[length])
    }

    pub fn square(n: usize, length: f64) -> Result<Self> {
        Self::new(&[n, n], &[length, length])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> &[usize] {
        &self.n[..self.dim]
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths[..self.dim]
    }

    pub fn h(&self, axis: usize) -> f64 {
        if axis >= self.dim {
            return 1.0;
        }
        self.lengths[axis] / (self.n[axis] + 1) as f64
    }

    /// `|O|`, the product of side lengths.
    pub fn volume(&self) -> f64 {
        self.lengths().iter().product()
    }

    /// Number of interior nodes.
    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight of one node, `h_0 h_1 ...`.
    pub fn node_weight(&self) -> f64 {
        (0..self.dim).map(|a| self.h(a)).product()
    }

    pub fn piece_count(&self) -> usize {
        match self.dim {
            1 => self.n[0] + 1,
            _ => 2 * (self.n[0] + 1) * (self.n[1] + 1),
        }
    }

    /// Quadrature weight of one gradient piece.
    pub fn piece_weight(&self) -> f64 {
        match self.dim {
            1 => self.h(0),
            _ => 0.5 * self.h(0) * self.h(1),
        }
    }

    /// Coordinates of node `idx` (row-major).
    pub fn point(&self, idx: usize) -> [f64; 2] {
        match self.dim {
            1 => [(idx + 1) as f64 * self.h(0), 0.0],
            _ => {
                let (i, j) = (idx / self.n[1], idx % self.n[1]);
                [(i + 1) as f64 * self.h(0), (j + 1) as f64 * self.h(1)]
            }
        }
    }

    pub fn zeros(&self) -> Field {
        Field { grid: *self, values: vec![0.0; self.len()] }
    }

    pub fn from_fn(&self, mut f: impl FnMut([f64; 2]) -> f64) -> Field {
        Field { grid: *self, values: (0..self.len()).map(|i| f(self.point(i))).collect() }
    }

    /// Forward differences with zero ghost values: `u` nodal, `out` piecewise.
    pub fn gradient_into(&self, u: &[f64], out: &mut [[f64; 2]]) {
        debug_assert_eq!(u.len(), self.len());
        debug_assert_eq!(out.len(), self.piece_count());
        match self.dim {
            1 => {
                let n = self.n[0];
                let inv_h = 1.0 / self.h(0);
                let mut prev = 0.0;
                for e in 0..=n {
                    let cur = if e < n { u[e] } else { 0.0 };
                    out[e] = [(cur - prev) * inv_h, 0.0];
                    prev = cur;
                }
            }
            _ => {
                let (n0, n1) = (self.n[0], self.n[1]);
                let (ix, iy) = (1.0 / self.h(0), 1.0 / self.h(1));
                let at = |a: usize, b: usize| -> f64 {
                    if a == 0 || b == 0 || a > n0 || b > n1 {
                        0.0
                    } else {
                        u[(a - 1) * n1 + (b - 1)]
                    }
                };
                for i in 0..=n0 {
                    for j in 0..=n1 {
                        let p00 = at(i, j);
                        let p10 = at(i + 1, j);
                        let p01 = at(i, j + 1);
                        let p11 = at(i + 1, j + 1);
                        let c = 2 * (i * (n1 + 1) + j);
                        out[c] = [(p10 - p00) * ix, (p01 - p00) * iy];
                        out[c + 1] = [(p11 - p01) * ix, (p11 - p10) * iy];
                    }
                }
            }
        }
    }

    /// `out = -div w`, the adjoint of [`Grid::gradient_into`] with respect to
    /// the node and piece quadratures.
    pub fn neg_divergence_into(&self, w: &[[f64; 2]], out: &mut [f64]) {
        debug_assert_eq!(w.len(), self.piece_count());
        debug_assert_eq!(out.len(), self.len());
        match self.dim {
            1 => {
                let n = self.n[0];
                let inv_h = 1.0 / self.h(0);
                for i in 0..n {
                    out[i] = (w[i][0] - w[i + 1][0]) * inv_h;
                }
            }
            _ => {
                let (n0, n1) = (self.n[0], self.n[1]);
                let (ix, iy) = (1.0 / self.h(0), 1.0 / self.h(1));
                out.iter_mut().for_each(|v| *v = 0.0);
                // piece_weight / node_weight = 1/2
                let mut add = |a: usize, b: usize, v: f64| {
                    if a >= 1 && b >= 1 && a <= n0 && b <= n1 {
                        out[(a - 1) * n1 + (b - 1)] += 0.5 * v;
                    }
                };
                for i in 0..=n0 {
                    for j in 0..=n1 {
                        let c = 2 * (i * (n1 + 1) + j);
                        let [lx, ly] = w[c];
                        add(i + 1, j, lx * ix);
                        add(i, j, -lx * ix - ly * iy);
                        add(i, j + 1, ly * iy);
                        let [ux, uy] = w[c + 1];
                        add(i + 1, j + 1, ux * ix + uy * iy);
                        add(i, j + 1, -ux * ix);
                        add(i + 1, j, -uy * iy);
                    }
                }
            }
        }
    }

    pub fn gradient(&self, u: &Field) -> Result<VectorField> {
        self.check(u)?;
        let mut pieces = vec![[0.0; 2]; self.piece_count()];
        self.gradient_into(&u.values, &mut pieces);
        Ok(VectorField { grid: *self, pieces })
    }

    /// Divergence of a piecewise vector field (the negative adjoint of the
    /// gradient).
    pub fn divergence(&self, w: &VectorField) -> Result<Field> {
        if w.pieces.len() != self.piece_count() {
            return Err(Error::ShapeMismatch { expected: self.piece_count(), got: w.pieces.len() });
        }
        let mut out = vec![0.0; self.len()];
        self.neg_divergence_into(&w.pieces, &mut out);
        out.iter_mut().for_each(|v| *v = -*v);
        Ok(Field { grid: *self, values: out })
    }

    /// Discrete `-Δ_h u`.
    pub fn neg_laplacian(&self, u: &Field) -> Result<Field> {
        let g = self.gradient(u)?;
        let mut out = vec![0.0; self.len()];
        self.neg_divergence_into(&g.pieces, &mut out);
        Ok(Field { grid: *self, values: out })
    }

    pub fn check(&self, u: &Field) -> Result<()> {
        if u.grid != *self {
            return Err(Error::ShapeMismatch { expected: self.len(), got: u.values.len() });
        }
        Ok(())
    }

    /// Second differences of `u` as `(weight, value)` pairs: the pure
    /// derivatives at nodes and, in two dimensions, the mixed derivative at
    /// every cell corner counted once for each ordering.
    pub fn second_differences(&self, u: &Field) -> Vec<(f64, f64)> {
        let v = &u.values;
        match self.dim {
            1 => {
                let n = self.n[0];
                let h = self.h(0);
                (0..n)
                    .map(|i| {
                        let l = if i > 0 { v[i - 1] } else { 0.0 };
                        let r = if i + 1 < n { v[i + 1] } else { 0.0 };
                        (h, (l - 2.0 * v[i] + r) / (h * h))
                    })
                    .collect()
            }
            _ => {
                let (n0, n1) = (self.n[0], self.n[1]);
                let (hx, hy) = (self.h(0), self.h(1));
                let w = hx * hy;
                let at = |a: isize, b: isize| -> f64 {
                    if a < 0 || b < 0 || a >= n0 as isize || b >= n1 as isize {
                        0.0
                    } else {
                        v[a as usize * n1 + b as usize]
                    }
                };
                let mut out = Vec::with_capacity(2 * n0 * n1 + 2 * (n0 + 1) * (n1 + 1));
                for i in 0..n0 as isize {
                    for j in 0..n1 as isize {
                        let c = at(i, j);
                        out.push((w, (at(i - 1, j) - 2.0 * c + at(i + 1, j)) / (hx * hx)));
                        out.push((w, (at(i, j - 1) - 2.0 * c + at(i, j + 1)) / (hy * hy)));
                    }
                }
                for i in -1..n0 as isize {
                    for j in -1..n1 as isize {
                        let m = (at(i + 1, j + 1) - at(i + 1, j) - at(i, j + 1) + at(i, j)) / (hx * hy);
                        out.push((w, m));
                        out.push((w, m));
                    }
                }
                out
            }
        }
    }
}

/// Interior nodal values of a grid function; the boundary is implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value at node {bad}")));
        }
        Ok(Self { grid, values })
    }

    /// Wraps values known to be finite and correctly sized.
    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::ShapeMismatch { expected: self.len(), got: other.len() });
        }
        Ok(())
    }

    /// Grid inner product `<u, v>_h`.
    pub fn dot(&self, other: &Field) -> Result<f64> {
        self.same_grid(other)?;
        Ok(self.grid.node_weight() * self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>())
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &Field) -> Result<Field> {
        self.same_grid(other)?;
        Ok(Field::from_raw(
            self.grid,
            self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect(),
        ))
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.axpy(-1.0, other)
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.axpy(1.0, other)
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field::from_raw(self.grid, self.values.iter().map(|a| c * a).collect())
    }

    /// `L^2` norm under the nodal quadrature.
    pub fn h_norm(&self) -> f64 {
        (self.grid.node_weight() * self.values.iter().map(|a| a * a).sum::<f64>()).sqrt()
    }

    /// `L^2` norm of the piecewise gradient.
    pub fn v_norm(&self) -> f64 {
        let g = self.grid.gradient(self).expect("own grid");
        g.norm()
    }

    /// `∫|∇u|`.
    pub fn w11_seminorm(&self) -> f64 {
        self.grad_power_integral(1.0)
    }

    /// `∫|∇u|^q` over the gradient pieces.
    pub fn grad_power_integral(&self, q: f64) -> f64 {
        let g = self.grid.gradient(self).expect("own grid");
        g.weight() * g.pieces.iter().map(|z| z[0].hypot(z[1]).powf(q)).sum::<f64>()
    }

    /// `(∫Σ_ij |∂_i ∂_j u|^α)^{1/α}` from second differences.
    pub fn w2alpha_seminorm(&self, alpha: f64) -> Result<f64> {
        if !(alpha >= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha={alpha} must be at least 1")));
        }
        let s: f64 = self
            .grid
            .second_differences(self)
            .iter()
            .map(|(w, v)| w * v.abs().powf(alpha))
            .sum();
        Ok(s.powf(1.0 / alpha))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Flat text form: a `# grid` header line then one value per line.
    pub fn to_csv(&self) -> String {
        let join = |xs: Vec<String>| xs.join("x");
        let mut s = format!(
            "# grid d={} n={} L={}\n",
            self.grid.dim,
            join(self.grid.shape().iter().map(|k| k.to_string()).collect()),
            join(self.grid.lengths().iter().map(|l| l.to_string()).collect()),
        );
        for v in &self.values {
            let _ = writeln!(s, "{v}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Field> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty field file".into()))?;
        let rest = header
            .strip_prefix("# grid")
            .ok_or_else(|| Error::Format(format!("bad header {header:?}")))?;
        let (mut dim, mut n, mut l) = (None, None, None);
        for tok in rest.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::Format(format!("bad token {tok:?}")))?;
            match k {
                "d" => dim = Some(v.parse::<usize>().map_err(|e| Error::Format(e.to_string()))?),
                "n" => {
                    n = Some(
                        v.split('x')
                            .map(|t| t.parse::<usize>().map_err(|e| Error::Format(e.to_string())))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "L" => {
                    l = Some(
                        v.split('x')
                            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(e.to_string())))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                _ => return Err(Error::Format(format!("unknown header key {k:?}"))),
            }
        }
        let (dim, n, l) = match (dim, n, l) {
            (Some(d), Some(n), Some(l)) => (d, n, l),
            _ => return Err(Error::Format("header needs d, n and L".into())),
        };
        if n.len() != dim {
            return Err(Error::Format(format!("d={dim} but {} node counts", n.len())));
        }
        let grid = Grid::new(&n, &l)?;
        let values = lines
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Field::new(grid, values)
    }

    const MAGIC: &'static [u8; 4] = b"PHIF";

    /// Compact binary form: magic, `u32` dimension, `u64` node counts, `f64`
    /// lengths, then values; little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 16 * self.grid.dim + 8 * self.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(self.grid.dim as u32).to_le_bytes());
        for &k in self.grid.shape() {
            out.extend_from_slice(&(k as u64).to_le_bytes());
        }
        for &l in self.grid.lengths() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Field> {
        let mut pos = 0usize;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + k)
                .ok_or_else(|| Error::Format("truncated field data".into()))?;
            pos += k;
            Ok(s)
        };
        if take(4)? != Self::MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let dim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        if !(1..=2).contains(&dim) {
            return Err(Error::Format(format!("bad dimension {dim}")));
        }
        let mut n = Vec::with_capacity(dim);
        for _ in 0..dim {
            n.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let mut l = Vec::with_capacity(dim);
        for _ in 0..dim {
            l.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        let grid = Grid::new(&n, &l)?;
        let mut values = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            values.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Field::new(grid, values)
    }
}

/// A vector value per gradient piece (second component unused when `d = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    pub pieces: Vec<[f64; 2]>,
}

impl VectorField {
    pub fn new(grid: Grid, pieces: Vec<[f64; 2]>) -> Result<Self> {
        if pieces.len() != grid.piece_count() {
            return Err(Error::ShapeMismatch { expected: grid.piece_count(), got: pieces.len() });
        }
        Ok(Self { grid, pieces })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weight(&self) -> f64 {
        self.grid.piece_weight()
    }

    pub fn dot(&self, other: &VectorField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::ShapeMismatch { expected: self.pieces.len(), got: other.pieces.len() });
        }
        Ok(self.weight()
            * self
                .pieces
                .iter()
                .zip(&other.pieces)
                .map(|(a, b)| a[0] * b[0] + a[1] * b[1])
                .sum::<f64>())
    }

    pub fn norm(&self) -> f64 {
        (self.weight() * self.pieces.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum::<f64>()).sqrt()
    }
}

#[derive(Debug, Clone)]
struct AxisBasis {
    n: usize,
    h: f64,
    /// Row `k`, column `i`: `sqrt(2/L) sin((k+1) π (i+1)/(n+1))`.
    sines: Vec<f64>,
    eigen: Vec<f64>,
    continuum: Vec<f64>,
}

impl AxisBasis {
    fn new(n: usize, length: f64) -> Self {
        let h = length / (n + 1) as f64;
        let amp = (2.0 / length).sqrt();
        let mut sines = vec![0.0; n * n];
        for k in 0..n {
            for i in 0..n {
                // reduce the integer phase first to keep the argument small
                let m = ((k + 1) * (i + 1)) % (2 * (n + 1));
                sines[k * n + i] = amp * (PI * m as f64 / (n + 1) as f64).sin();
            }
        }
        let eigen = (1..=n)
            .map(|k| {
                let s = (k as f64 * PI * h / (2.0 * length)).sin();
                4.0 / (h * h) * s * s
            })
            .collect();
        let continuum = (1..=n).map(|k| (k as f64 * PI / length).powi(2)).collect();
        Self { n, h, sines, eigen, continuum }
    }
}

/// Tensor sine eigenbasis of `-Δ_h`, modes ranked by eigenvalue.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    grid: Grid,
    axes: Vec<AxisBasis>,
    /// Rank -> row-major tensor index of the mode.
    order: Vec<usize>,
    eigen: Vec<f64>,
    continuum: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(grid: &Grid) -> Self {
        let axes: Vec<AxisBasis> = (0..grid.dim()).map(|a| AxisBasis::new(grid.shape()[a], grid.lengths()[a])).collect();
        let total = grid.len();
        let eig_of = |t: usize| -> (f64, f64) {
            match axes.len() {
                1 => (axes[0].eigen[t], axes[0].continuum[t]),
                _ => {
                    let n1 = axes[1].n;
                    let (k0, k1) = (t / n1, t % n1);
                    (axes[0].eigen[k0] + axes[1].eigen[k1], axes[0].continuum[k0] + axes[1].continuum[k1])
                }
            }
        };
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&a, &b| eig_of(a).0.total_cmp(&eig_of(b).0).then(a.cmp(&b)));
        let eigen = order.iter().map(|&t| eig_of(t).0).collect();
        let continuum = order.iter().map(|&t| eig_of(t).1).collect();
        Self { grid: *grid, axes, order, eigen, continuum }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Discrete eigenvalues of `-Δ_h`, nondecreasing in rank.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen
    }

    pub fn eigenvalue(&self, rank: usize) -> f64 {
        self.eigen[rank]
    }

    /// `(kπ/L)^2` sums for the same modes, for diagnostics.
    pub fn continuum_eigenvalues(&self) -> &[f64] {
        &self.continuum
    }

    /// One-based per-axis wave numbers of the mode with the given rank.
    pub fn wave_numbers(&self, rank: usize) -> [usize; 2] {
        let t = self.order[rank];
        match self.axes.len() {
            1 => [t + 1, 0],
            _ => [t / self.axes[1].n + 1, t % self.axes[1].n + 1],
        }
    }

    fn forward_tensor(&self, u: &[f64]) -> Vec<f64> {
        match self.axes.len() {
            1 => {
                let ax = &self.axes[0];
                (0..ax.n)
                    .map(|k| ax.h * ax.sines[k * ax.n..(k + 1) * ax.n].iter().zip(u).map(|(s, v)| s * v).sum::<f64>())
                    .collect()
            }
            _ => {
                let (a0, a1) = (&self.axes[0], &self.axes[1]);
                let (n0, n1) = (a0.n, a1.n);
                let mut tmp = vec![0.0; n0 * n1];
                for i in 0..n0 {
                    let row = &u[i * n1..(i + 1) * n1];
                    for k1 in 0..n1 {
                        tmp[i * n1 + k1] =
                            a1.h * a1.sines[k1 * n1..(k1 + 1) * n1].iter().zip(row).map(|(s, v)| s * v).sum::<f64>();
                    }
                }
                let mut out = vec![0.0; n0 * n1];
                for k0 in 0..n0 {
                    for i in 0..n0 {
                        let s = a0.h * a0.sines[k0 * n0 + i];
                        if s != 0.0 {
                            for k1 in 0..n1 {
                                out[k0 * n1 + k1] += s * tmp[i * n1 + k1];
                            }
                        }
                    }
                }
                out
            }
        }
    }

    fn inverse_tensor(&self, c: &[f64]) -> Vec<f64> {
        match self.axes.len() {
            1 => {
                let ax = &self.axes[0];
                let mut out = vec![0.0; ax.n];
                for (k, &ck) in c.iter().enumerate() {
                    if ck != 0.0 {
                        for (o, s) in out.iter_mut().zip(&ax.sines[k * ax.n..(k + 1) * ax.n]) {
                            *o += ck * s;
                        }
                    }
                }
                out
            }
            _ => {
                let (a0, a1) = (&self.axes[0], &self.axes[1]);
                let (n0, n1) = (a0.n, a1.n);
                // along axis 0 first: tmp[i][k1] = Σ_k0 c[k0][k1] S0[k0][i]
                let mut tmp = vec![0.0; n0 * n1];
                for k0 in 0..n0 {
                    let crow = &c[k0 * n1..(k0 + 1) * n1];
                    if crow.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for i in 0..n0 {
                        let s = a0.sines[k0 * n0 + i];
                        for k1 in 0..n1 {
                            tmp[i * n1 + k1] += s * crow[k1];
                        }
                    }
                }
                let mut out = vec![0.0; n0 * n1];
                for i in 0..n0 {
                    for k1 in 0..n1 {
                        let t = tmp[i * n1 + k1];
                        if t != 0.0 {
                            let srow = &a1.sines[k1 * n1..(k1 + 1) * n1];
                            for (o, s) in out[i * n1..(i + 1) * n1].iter_mut().zip(srow) {
                                *o += t * s;
                            }
                        }
                    }
                }
                out
            }
        }
    }

    /// Coefficients `<u, e_k>_h` in rank order.
    pub fn forward(&self, u: &Field) -> Result<Vec<f64>> {
        self.grid.check(u)?;
        let t = self.forward_tensor(&u.values);
        Ok(self.order.iter().map(|&i| t[i]).collect())
    }

    /// Synthesizes `Σ_k c_k e_k`; missing trailing coefficients are zero.
    pub fn inverse(&self, coeffs: &[f64]) -> Result<Field> {
        if coeffs.len() > self.len() {
            return Err(Error::ShapeMismatch { expected: self.len(), got: coeffs.len() });
        }
        let mut t = vec![0.0; self.len()];
        for (&rank_idx, &c) in self.order.iter().zip(coeffs) {
            t[rank_idx] = c;
        }
        Ok(Field::from_raw(self.grid, self.inverse_tensor(&t)))
    }

    /// Adds `Σ_k c_k e_k` into `out` (rank order, `coeffs` may be short).
    pub fn synthesize_into(&self, coeffs: &[f64], out: &mut [f64]) {
        if self.axes.len() == 1 {
            let ax = &self.axes[0];
            for (k, &ck) in coeffs.iter().enumerate() {
                if ck != 0.0 {
                    for (o, s) in out.iter_mut().zip(&ax.sines[k * ax.n..(k + 1) * ax.n]) {
                        *o += ck * s;
                    }
                }
            }
        } else {
            let f = self.inverse(coeffs).expect("coefficient count checked by caller");
            for (o, v) in out.iter_mut().zip(&f.values) {
                *o += v;
            }
        }
    }

    pub fn mode(&self, rank: usize) -> Field {
        let mut c = vec![0.0; rank + 1];
        c[rank] = 1.0;
        self.inverse(&c).expect("rank in range")
    }

    /// Applies `m(λ_k)` to each spectral coefficient.
    pub fn apply_multiplier(&self, u: &Field, m: impl Fn(f64) -> f64) -> Result<Field> {
        let mut c = self.forward(u)?;
        for (ck, &l) in c.iter_mut().zip(&self.eigen) {
            *ck *= m(l);
        }
        self.inverse(&c)
    }

    /// `J_n u = (Id - Δ_h/n)^{-1} u`.
    pub fn laplace_resolvent(&self, u: &Field, n: f64) -> Result<Field> {
        check_positive(n)?;
        self.apply_multiplier(u, |l| 1.0 / (1.0 + l / n))
    }

    /// `T_n u = n (u - J_n u)`, the Yosida approximation of `-Δ_h`.
    pub fn yosida_t(&self, u: &Field, n: f64) -> Result<Field> {
        check_positive(n)?;
        self.apply_multiplier(u, |l| n * l / (n + l))
    }

    /// `sqrt(Σ <u,e_k>^2 / λ_k)`.
    pub fn dual_norm(&self, u: &Field) -> Result<f64> {
        let c = self.forward(u)?;
        Ok(c.iter().zip(&self.eigen).map(|(ck, l)| ck * ck / l).sum::<f64>().sqrt())
    }

    /// Orthogonal projection onto the first `m` ranked modes.
    pub fn galerkin_project(&self, u: &Field, m: usize) -> Result<Field> {
        if m == 0 || m > self.len() {
            return Err(Error::InvalidArgument(format!("mode count {m} outside 1..={}", self.len())));
        }
        let mut c = self.forward(u)?;
        c.truncate(m);
        self.inverse(&c)
    }

    /// `u = Σ c_k e_k` with `c_k = amplitude ξ_k / (1 + k)^decay` for the
    /// first `modes` ranks, `ξ` supplied by the caller.
    pub fn band_limited(&self, xi: &[f64], amplitude: f64, decay: f64) -> Result<Field> {
        let c: Vec<f64> = xi
            .iter()
            .enumerate()
            .map(|(k, x)| amplitude * x / (1.0 + k as f64).powf(decay))
            .collect();
        self.inverse(&c)
    }
}

fn check_positive(n: f64) -> Result<()> {
    if n > 0.0 && n.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("resolvent parameter {n} must be positive")))
    }
}
