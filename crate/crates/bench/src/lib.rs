//! Fixtures shared by the benchmarks.

use bpgat::cnf::CnfFormula;
use bpgat::datagen::{rng_from_seed, sample_random_formula, GenParams};

/// `n` normalized random formulae from the given size ranges.
pub fn formulas(nv: (u32, u32), nc: (u32, u32), n: usize, seed: u64) -> Vec<CnfFormula> {
    let params = GenParams::with_ranges(nv, nc, seed);
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| sample_random_formula(&params, &mut rng).formula.normalize()).collect()
}
