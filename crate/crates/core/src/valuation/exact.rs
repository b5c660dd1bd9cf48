use rayon::prelude::*;

use super::{Method, Utility, ValuationResult};
use crate::error::{Error, Result};

/// Largest universe enumerated exactly unless the caller raises the cap.
pub const DEFAULT_EXACT_CAP: usize = 12;

/// Shapley values by full subset enumeration:
/// `phi_i = sum_{S not containing i} |S|!(N-|S|-1)!/N! [v(S+i) - v(S)]`.
///
/// All `2^N` utilities are evaluated once and reused.
pub fn exact_shapley<U: Utility>(utility: &U, cap: usize) -> Result<ValuationResult> {
    let n = utility.size();
    if n == 0 {
        return Err(Error::data("cannot value an empty training set"));
    }
    if n > cap || n >= usize::BITS as usize - 1 {
        return Err(Error::config(format!(
            "exact Shapley needs 2^{n} utility evaluations, over the cap of N = {cap}; use the tmc method"
        )));
    }
    let table: Vec<f64> = (0..1usize << n)
        .into_par_iter()
        .map(|mask| {
            let subset: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            utility.evaluate(&subset)
        })
        .collect::<Result<_>>()?;

    // weight[s] = s! (n - s - 1)! / n!
    let weight: Vec<f64> = (0..n)
        .map(|s| {
            let ln = ln_factorial(s) + ln_factorial(n - s - 1) - ln_factorial(n);
            ln.exp()
        })
        .collect();

    let values: Vec<f64> = (0..n)
        .map(|i| {
            let bit = 1usize << i;
            (0..1usize << n)
                .filter(|m| m & bit == 0)
                .map(|m| weight[m.count_ones() as usize] * (table[m | bit] - table[m]))
                .sum()
        })
        .collect();

    let mut out = ValuationResult::from_vec(Method::Exact, utility.ids(), &values);
    out.utility_full = Some(table[(1usize << n) - 1]);
    out.utility_empty = Some(table[0]);
    Ok(out)
}

fn ln_factorial(k: usize) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}
