//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use phiflow_core::sampling::{random_band_limited, rng_from_seed};
use phiflow_core::{Field, Grid, SpectralBasis};

/// A grid, its basis and a smooth random field of moderate amplitude.
pub struct Fixture {
    pub grid: Grid,
    pub basis: Arc<SpectralBasis>,
    pub field: Field,
}

impl Fixture {
    pub fn new(d: usize, n: usize, seed: u64) -> Self {
        let grid = if d == 1 { Grid::line(n, 1.0) } else { Grid::square(n, 1.0) }.expect("valid grid");
        let basis = Arc::new(SpectralBasis::new(&grid));
        let field = random_band_limited(&basis, 12, 1.0, 1.0, &mut rng_from_seed(seed)).expect("band within basis");
        Self { grid, basis, field }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_reproducible() {
        let a = Fixture::new(2, 8, 3);
        let b = Fixture::new(2, 8, 3);
        assert_eq!(a.field, b.field);
        assert_eq!(a.field.len(), 64);
    }
}
