use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{binomial_two_tailed, PreferenceTally};

/// One model response, as written by the decode JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub context_id: String,
    pub output_text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
}

/// A pairwise judgement between the responses of A and B for one context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub context_id: String,
    pub turn: usize,
    pub winner: Winner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub wins_a: u64,
    pub wins_b: u64,
    pub n: u64,
    pub win_rate_a: f64,
    pub p_value: f64,
}

impl CompareRow {
    fn from_tally(t: PreferenceTally) -> Self {
        CompareRow {
            wins_a: t.wins_model,
            wins_b: t.wins_other,
            n: t.n(),
            win_rate_a: t.win_rate(),
            p_value: binomial_two_tailed(t),
        }
    }
}

/// Win rates of A over B per turn and overall, with exact two-tailed
/// binomial p-values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub turns: BTreeMap<usize, CompareRow>,
    pub all: CompareRow,
}

/// Checks that both response files cover the same contexts and that every
/// preference refers to one of them.
pub fn compare_preferences(a: &[ResponseRecord], b: &[ResponseRecord], prefs: &[Preference]) -> Result<CompareReport> {
    let index = |rs: &[ResponseRecord], which: &str| -> Result<HashMap<String, String>> {
        let mut m = HashMap::new();
        for r in rs {
            if m.insert(r.context_id.clone(), r.output_text.clone()).is_some() {
                return Err(Error::contract(format!("responses {which}: duplicate context_id {:?}", r.context_id)));
            }
        }
        Ok(m)
    };
    let ia = index(a, "A")?;
    let ib = index(b, "B")?;
    if let Some(id) = ia.keys().find(|k| !ib.contains_key(*k)).or_else(|| ib.keys().find(|k| !ia.contains_key(*k))) {
        return Err(Error::contract(format!("response files are not aligned: {id:?} is in only one")));
    }
    let mut per_turn: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for p in prefs {
        if !ia.contains_key(&p.context_id) {
            return Err(Error::contract(format!("preference for unknown context_id {:?}", p.context_id)));
        }
        let e = per_turn.entry(p.turn).or_default();
        match p.winner {
            Winner::A => e.0 += 1,
            Winner::B => e.1 += 1,
        }
    }
    let (wa, wb) = per_turn.values().fold((0, 0), |acc, &(x, y)| (acc.0 + x, acc.1 + y));
    let all = CompareRow::from_tally(PreferenceTally::new(wa, wb)?);
    let turns = per_turn
        .into_iter()
        .map(|(t, (x, y))| Ok((t, CompareRow::from_tally(PreferenceTally::new(x, y)?))))
        .collect::<Result<_>>()?;
    Ok(CompareReport { turns, all })
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>8}{:>8}{:>10}{:>14}", "", "A wins", "n", "win rate", "p-value")?;
        let rows = self.turns.iter().map(|(t, r)| (format!("Turn {t}"), r)).chain([("All".to_string(), &self.all)]);
        for (label, r) in rows {
            writeln!(f, "{label:<8}{:>8}{:>8}{:>9.1}%{:>14.3e}", r.wins_a, r.n, 100.0 * r.win_rate_a, r.p_value)?;
        }
        Ok(())
    }
}
