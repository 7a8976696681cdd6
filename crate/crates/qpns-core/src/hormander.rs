//! Spanning check for the noise directions under the advection bracket.
//!
//! Starting from the forced directions, repeatedly bracket pairs from the
//! current collection and track the dimension of the real span inside the
//! truncation. Every generated direction is a constant field, so iterated
//! brackets make each of them available in both slots; restricting the
//! second slot to the original directions would reach the same infinite
//! lattice but stalls on small truncations whose intermediate wavevectors
//! fall outside the cutoff. If the span reaches the full truncated space
//! the noise, though injected in only a few modes, moves every mode through
//! the nonlinearity; if a generation adds nothing the collection has
//! stalled on a proper invariant subspace.
//!
//! Rank growth is decided by modified Gram-Schmidt with one
//! re-orthogonalization pass and a relative residual cutoff, processed in a
//! fixed order, so the report is deterministic.

use crate::forcing::NoiseConfig;
use crate::spectral::{symmetrized_bracket, SpectralVorticity};
use crate::{CoreError, Result};

/// Residual below this fraction of the candidate's norm counts as linearly
/// dependent.
const RANK_TOL: f64 = 1e-10;

/// Outcome of the bracket closure scan.
#[derive(Debug, Clone)]
pub struct SpanReport {
    /// Real dimension of the truncated vorticity space.
    pub dim_real: usize,
    /// Span dimension after each generation; `ranks[0]` is the directions
    /// themselves.
    pub ranks: Vec<usize>,
    /// The closure reached the whole truncated space.
    pub saturated: bool,
    /// A generation added no new directions before saturation.
    pub stalled: bool,
    /// Orthonormal basis of the final span.
    pub basis: Vec<SpectralVorticity>,
}

impl SpanReport {
    pub fn rank(&self) -> usize {
        *self.ranks.last().expect("at least one generation")
    }

    pub fn generations(&self) -> usize {
        self.ranks.len()
    }

    pub fn spans_truncation(&self) -> bool {
        self.saturated
    }
}

/// Orthogonalize `v` against `basis` and append it when the residual is
/// numerically independent. Returns whether the rank grew.
fn try_insert(basis: &mut Vec<SpectralVorticity>, mut v: SpectralVorticity) -> bool {
    let original = v.norm();
    if !(original > 0.0) {
        return false;
    }
    for _ in 0..2 {
        for b in basis.iter() {
            let c = v.inner(b);
            v.add_scaled(b, -c);
        }
    }
    let residual = v.norm();
    if residual > RANK_TOL * original {
        v.scale(1.0 / residual);
        basis.push(v);
        true
    } else {
        false
    }
}

/// Grow the bracket closure of `directions` for at most `max_generations`
/// rounds, stopping early on saturation or stall.
pub fn bracket_closure(
    directions: &[SpectralVorticity],
    max_generations: usize,
) -> Result<SpanReport> {
    if directions.is_empty() || max_generations == 0 {
        return Err(CoreError::invalid(
            "need at least one direction and one generation",
        ));
    }
    let lattice = directions[0].lattice();
    let dim_real = lattice.dim_real();

    let mut basis: Vec<SpectralVorticity> = Vec::new();
    for d in directions {
        if d.lattice().radius() != lattice.radius() {
            return Err(CoreError::LatticeMismatch {
                left: lattice.radius(),
                right: d.lattice().radius(),
            });
        }
        try_insert(&mut basis, d.clone());
    }
    let mut ranks = vec![basis.len()];
    let mut saturated = basis.len() == dim_real;
    let mut stalled = false;

    let mut frontier_start = 0usize;
    while ranks.len() < max_generations && !saturated && !stalled {
        let frontier_end = basis.len();
        // Pairs of older elements were bracketed in earlier generations and
        // the bracket is symmetric, so each pair with at least one element
        // from the newest slice is taken exactly once.
        for i in frontier_start..frontier_end {
            let h = basis[i].clone();
            for j in 0..=i {
                let g = basis[j].clone();
                let candidate = symmetrized_bracket(&h, &g)?;
                try_insert(&mut basis, candidate);
            }
        }
        frontier_start = frontier_end;
        ranks.push(basis.len());
        saturated = basis.len() == dim_real;
        stalled = !saturated && basis.len() == frontier_end;
    }

    Ok(SpanReport {
        dim_real,
        ranks,
        saturated,
        stalled,
        basis,
    })
}

/// Closure scan for a noise configuration.
pub fn check_noise_spans(noise: &NoiseConfig, max_generations: usize) -> Result<SpanReport> {
    bracket_closure(noise.directions(), max_generations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::ModeLattice;

    #[test]
    fn canonical_four_saturates_small_truncations() {
        for (n, dim) in [(2u32, 24usize), (3, 48), (4, 80)] {
            let lattice = ModeLattice::new(n);
            assert_eq!(lattice.dim_real(), dim);
            let noise = NoiseConfig::canonical_four(&lattice, 1.0, 0);
            let report = check_noise_spans(&noise, 8).unwrap();
            assert!(report.saturated, "n = {n}: ranks {:?}", report.ranks);
            assert_eq!(report.rank(), dim);
            assert!(!report.stalled);
            assert!(
                report.generations() <= 6,
                "n = {n} took {} generations",
                report.generations()
            );
        }
    }

    #[test]
    fn aligned_pair_stalls_at_rank_two() {
        // Both directions sit on the same wavevector line; every bracket
        // between parallel modes vanishes, so the span never grows.
        let lattice = ModeLattice::new(4);
        let directions = vec![
            SpectralVorticity::harmonic_cos(&lattice, [1, 0], 1.0),
            SpectralVorticity::harmonic_sin(&lattice, [1, 0], 1.0),
        ];
        let report = bracket_closure(&directions, 8).unwrap();
        assert!(report.stalled);
        assert!(!report.saturated);
        assert_eq!(report.rank(), 2);
        assert_eq!(report.ranks, vec![2, 2]);
    }

    #[test]
    fn equal_shell_pair_also_stalls() {
        // (1,0) and (0,1) share a shell; the symmetrized bracket of modes
        // with equal length vanishes, so this classical pair is degenerate.
        let lattice = ModeLattice::new(3);
        let directions = vec![
            SpectralVorticity::harmonic_cos(&lattice, [1, 0], 1.0),
            SpectralVorticity::harmonic_sin(&lattice, [1, 0], 1.0),
            SpectralVorticity::harmonic_cos(&lattice, [0, 1], 1.0),
            SpectralVorticity::harmonic_sin(&lattice, [0, 1], 1.0),
        ];
        let report = bracket_closure(&directions, 8).unwrap();
        assert!(report.stalled);
        assert_eq!(report.rank(), 4);
    }

    #[test]
    fn full_basis_saturates_in_one_generation() {
        let lattice = ModeLattice::new(2);
        let mut directions = Vec::new();
        for &k in lattice.half_modes() {
            directions.push(SpectralVorticity::harmonic_cos(&lattice, k, 1.0));
            directions.push(SpectralVorticity::harmonic_sin(&lattice, k, 1.0));
        }
        let report = bracket_closure(&directions, 4).unwrap();
        assert!(report.saturated);
        assert_eq!(report.generations(), 1);
        assert_eq!(report.rank(), lattice.dim_real());
    }

    #[test]
    fn verdict_is_invariant_under_rescaling() {
        let lattice = ModeLattice::new(3);
        let noise = NoiseConfig::canonical_four(&lattice, 1.0, 0);
        let reference = check_noise_spans(&noise, 8).unwrap();
        let scale_by = |factor: f64| -> Vec<SpectralVorticity> {
            noise
                .directions()
                .iter()
                .map(|g| {
                    let mut s = g.clone();
                    s.scale(factor);
                    s
                })
                .collect()
        };
        // Arbitrary scaling preserves the span, hence rank and verdict; the
        // generation-by-generation history may shuffle borderline inserts.
        let report = bracket_closure(&scale_by(1e3), 8).unwrap();
        assert_eq!(report.rank(), reference.rank());
        assert_eq!(report.saturated, reference.saturated);
        // Power-of-two scaling is exact, so the whole history matches.
        let exact = bracket_closure(&scale_by(1024.0), 8).unwrap();
        assert_eq!(exact.ranks, reference.ranks);
    }

    #[test]
    fn ranks_are_monotone_and_bounded() {
        let lattice = ModeLattice::new(4);
        let directions = vec![
            SpectralVorticity::harmonic_cos(&lattice, [1, 0], 0.5),
            SpectralVorticity::harmonic_cos(&lattice, [1, 1], 2.0),
        ];
        let report = bracket_closure(&directions, 10).unwrap();
        assert!(report.ranks.windows(2).all(|p| p[1] >= p[0]));
        assert!(report.rank() <= lattice.dim_real());
        // Duplicate directions never inflate the first generation.
        let doubled = [directions.clone(), directions.clone()].concat();
        let doubled_report = bracket_closure(&doubled, 10).unwrap();
        assert_eq!(doubled_report.ranks[0], report.ranks[0]);
    }

    #[test]
    fn basis_is_orthonormal() {
        let lattice = ModeLattice::new(3);
        let noise = NoiseConfig::canonical_four(&lattice, 1.0, 0);
        let report = check_noise_spans(&noise, 8).unwrap();
        for (i, a) in report.basis.iter().enumerate() {
            for (j, b) in report.basis.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((a.inner(b) - expect).abs() < 1e-9, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn generation_budget_is_respected() {
        let lattice = ModeLattice::new(4);
        let noise = NoiseConfig::canonical_four(&lattice, 1.0, 0);
        let capped = check_noise_spans(&noise, 2).unwrap();
        assert_eq!(capped.generations(), 2);
        assert!(!capped.saturated);
        assert!(!capped.stalled);
    }
}
