use serde::{Deserialize, Serialize};
use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};

use crate::error::{Error, Result};

/// Pairwise preference counts between a model and its comparison side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTally {
    pub wins_model: u64,
    pub wins_other: u64,
}

impl PreferenceTally {
    pub fn new(wins_model: u64, wins_other: u64) -> Result<Self> {
        if wins_model + wins_other == 0 {
            return Err(Error::contract("preference tally is empty"));
        }
        Ok(PreferenceTally { wins_model, wins_other })
    }

    pub fn n(&self) -> u64 {
        self.wins_model + self.wins_other
    }

    pub fn win_rate(&self) -> f64 {
        self.wins_model as f64 / self.n() as f64
    }
}

/// Exact two-sided binomial test against p = 1/2: the total probability of
/// outcomes no more likely than the observed one, correctly rounded.
pub fn binomial_two_tailed(tally: PreferenceTally) -> f64 {
    let n = tally.n();
    let m = tally.wins_model.min(tally.wins_other);
    // C(n, i) is symmetric and strictly increasing toward the center, so the
    // outcomes no more likely than m are exactly i <= m and i >= n - m.
    if 2 * m + 1 >= n {
        return 1.0;
    }
    let mut c = BigUint::one();
    let mut tail = BigUint::one();
    for i in 1..=m {
        c = c * (n - i + 1) / i;
        tail += &c;
    }
    let p = BigRational::new(BigInt::from(tail), BigInt::one() << (n - 1));
    p.to_f64().expect("finite ratio")
}
