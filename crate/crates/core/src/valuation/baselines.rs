use rand::Rng;
use rayon::prelude::*;

use super::{task_rng, Method, Utility, ValuationResult};
use crate::error::{Error, Result};

/// Leave-one-out: `v(D) - v(D without i)`.
pub fn loo_values<U: Utility>(utility: &U) -> Result<ValuationResult> {
    let n = utility.size();
    if n < 2 {
        return Err(Error::data("leave-one-out needs at least two samples"));
    }
    let all: Vec<usize> = (0..n).collect();
    let full = utility.evaluate(&all)?;
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            let rest: Vec<usize> = all.iter().copied().filter(|&k| k != i).collect();
            Ok(full - utility.evaluate(&rest)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut out = ValuationResult::from_vec(Method::Loo, utility.ids(), &values);
    out.utility_full = Some(full);
    Ok(out)
}

/// I.i.d. uniform values in `[0, 1)`; only their order is meaningful.
pub fn random_values(ids: &[String], seed: u64) -> ValuationResult {
    let mut rng = task_rng(seed, 0);
    let values: Vec<f64> = ids.iter().map(|_| rng.random::<f64>()).collect();
    let mut out = ValuationResult::from_vec(Method::Random, ids, &values);
    out.seed = Some(seed);
    out
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::FnUtility;
    use super::*;

    #[test]
    fn hand_table() {
        let r = loo_values(&table(vec![0.0, 1.0, 2.0, 4.0])).unwrap();
        assert_eq!(r.values["z0"], 2.0);
        assert_eq!(r.values["z1"], 3.0);
    }

    #[test]
    fn duplicates_and_null_points() {
        // 0 and 1 are interchangeable, 2 adds nothing.
        let u = FnUtility::new(ids(3), |s: &[usize]| {
            let a = s.contains(&0) as u8 + s.contains(&1) as u8;
            f64::from(a).sqrt()
        });
        let r = loo_values(&u).unwrap();
        assert_eq!(r.values["z0"], r.values["z1"]);
        assert_eq!(r.values["z2"], 0.0);
        assert!(loo_values(&FnUtility::new(ids(1), |_: &[usize]| 0.0)).is_err());
    }

    #[test]
    fn random_is_seeded() {
        let a = random_values(&ids(20), 4);
        let b = random_values(&ids(20), 4);
        assert_eq!(a, b);
        assert_eq!(a.ascending_ids(), b.ascending_ids());
        let mut seen: Vec<f64> = a.values.values().copied().collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 20);
    }
}
