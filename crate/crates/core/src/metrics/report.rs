use std::collections::BTreeMap;
use std::fmt;

use serde_json::{json, Map, Value};

use super::overlap::{bleu4, BleuScore};
use crate::error::{Error, Result};

/// Per-turn and overall metric values for one evaluation run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    /// Keyed by turn index 1..=3.
    pub turns: BTreeMap<usize, BTreeMap<String, f64>>,
    pub all: BTreeMap<String, f64>,
    pub counts: BTreeMap<usize, usize>,
    pub config: Value,
    pub seed: u64,
}

impl MetricReport {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (turn, values) in &self.turns {
            let mut v = json!(values);
            v["n"] = json!(self.counts.get(turn).copied().unwrap_or(0));
            m.insert(format!("turn{turn}"), v);
        }
        let mut all = json!(self.all);
        all["n"] = json!(self.counts.values().sum::<usize>());
        m.insert("all".into(), all);
        m.insert("config".into(), self.config.clone());
        m.insert("seed".into(), json!(self.seed));
        Value::Object(m)
    }

    pub fn get(&self, turn: Option<usize>, name: &str) -> Option<f64> {
        match turn {
            Some(t) => self.turns.get(&t)?.get(name).copied(),
            None => self.all.get(name).copied(),
        }
    }

    fn metric_names(&self) -> Vec<&String> {
        self.all.keys().collect()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "metric")?;
        for t in self.turns.keys() {
            write!(f, "{:>10}", format!("Turn {t}"))?;
        }
        writeln!(f, "{:>10}", "All")?;
        for name in self.metric_names() {
            write!(f, "{name:<12}")?;
            for values in self.turns.values() {
                match values.get(name) {
                    Some(v) => write!(f, "{v:>10.4}")?,
                    None => write!(f, "{:>10}", "-")?,
                }
            }
            writeln!(f, "{:>10.4}", self.all[name])?;
        }
        Ok(())
    }
}

/// Collects per-example values and averages them per turn and overall.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sums: BTreeMap<usize, BTreeMap<String, (f64, usize)>>,
    counts: BTreeMap<usize, usize>,
    bleu: BTreeMap<usize, (Vec<Vec<String>>, Vec<Vec<String>>)>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers one evaluated example at `turn`.
    pub fn example(&mut self, turn: usize) {
        *self.counts.entry(turn).or_default() += 1;
    }

    pub fn add(&mut self, turn: usize, name: &str, value: f64) {
        let e = self.sums.entry(turn).or_default().entry(name.to_string()).or_default();
        e.0 += value;
        e.1 += 1;
    }

    /// Queues a hypothesis/reference pair for corpus BLEU.
    pub fn add_bleu_pair(&mut self, turn: usize, hyp: Vec<String>, reference: Vec<String>) {
        let e = self.bleu.entry(turn).or_default();
        e.0.push(hyp);
        e.1.push(reference);
    }

    pub fn finish(&self, config: Value, seed: u64) -> Result<MetricReport> {
        if self.counts.is_empty() {
            return Err(Error::contract("no examples were evaluated"));
        }
        let mut report = MetricReport { config, seed, counts: self.counts.clone(), ..Default::default() };
        let mut totals: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (&turn, metrics) in &self.sums {
            let row = report.turns.entry(turn).or_default();
            for (name, &(s, n)) in metrics {
                row.insert(name.clone(), s / n as f64);
                let t = totals.entry(name.clone()).or_default();
                t.0 += s;
                t.1 += n;
            }
        }
        for (name, (s, n)) in totals {
            report.all.insert(name, s / n as f64);
        }
        if !self.bleu.is_empty() {
            let (mut all_h, mut all_r) = (Vec::new(), Vec::new());
            for (&turn, (h, r)) in &self.bleu {
                insert_bleu(report.turns.entry(turn).or_default(), &bleu4(h, r)?);
                all_h.extend(h.iter().cloned());
                all_r.extend(r.iter().cloned());
            }
            insert_bleu(&mut report.all, &bleu4(&all_h, &all_r)?);
        }
        Ok(report)
    }
}

fn insert_bleu(row: &mut BTreeMap<String, f64>, b: &BleuScore) {
    row.insert("bleu4".into(), 100.0 * b.smoothed);
    row.insert("bleu4_unsmoothed".into(), 100.0 * b.unsmoothed);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_is_example_weighted() {
        let mut acc = MetricAccumulator::new();
        for (turn, v) in [(1, 1.0), (1, 0.0), (2, 1.0)] {
            acc.example(turn);
            acc.add(turn, "r1", v);
        }
        let r = acc.finish(json!({"k": 1}), 7).unwrap();
        assert_eq!(r.get(Some(1), "r1"), Some(0.5));
        assert_eq!(r.get(Some(2), "r1"), Some(1.0));
        assert!((r.get(None, "r1").unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let j = r.to_json();
        assert_eq!(j["turn1"]["n"], 2);
        assert_eq!(j["all"]["n"], 3);
        assert_eq!(j["seed"], 7);
        assert!(r.to_string().contains("Turn 2"));
    }

    #[test]
    fn bleu_is_scaled() {
        let mut acc = MetricAccumulator::new();
        acc.example(3);
        let s: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        acc.add_bleu_pair(3, s.clone(), s);
        let r = acc.finish(Value::Null, 0).unwrap();
        assert_eq!(r.get(None, "bleu4"), Some(100.0));
    }

    #[test]
    fn empty_rejected() {
        assert!(MetricAccumulator::new().finish(Value::Null, 0).is_err());
    }
}
