//! Accuracy, NLL, AUROC, entropy histograms and cross-seed aggregation.
//!
//! All logs are natural; predictive distributions are `(rows, C)` tensors of
//! probabilities.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor inside `−ln p`.
pub const NLL_FLOOR: f64 = 1e-12;

fn check_batch(op: &str, probs: &Tensor, labels: &[usize]) -> Result<usize> {
    let (rows, classes) = probs
        .as_rows()
        .ok_or_else(|| Error::Contract(format!("{op}: expected a (rows, C) tensor")))?;
    if rows == 0 {
        return Err(Error::Contract(format!("{op}: empty batch")));
    }
    if rows != labels.len() {
        return Err(Error::Contract(format!(
            "{op}: {rows} rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("{op}: label {bad} out of range for {classes} classes")));
    }
    Ok(classes)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = check_batch("accuracy", probs, labels)?;
    let hits = probs
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = check_batch("nll", probs, labels)?;
    let total: f64 = probs
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &l)| -row[l].max(NLL_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mann-Whitney AUROC with `positive` as the positive class; ties count half.
///
/// One sort over the pooled scores, then a sweep over groups of equal score.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Contract("auroc needs non-empty score sets".into()));
    }
    if positive.iter().chain(negative).any(|v| v.is_nan()) {
        return Err(Error::Contract("auroc scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Count, for each positive, negatives strictly below plus half the tied ones.
    let mut wins = 0.0;
    let mut negatives_below = 0usize;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let group = &all[i..j];
        let pos = group.iter().filter(|e| e.1).count();
        let neg = group.len() - pos;
        wins += pos as f64 * (negatives_below as f64 + 0.5 * neg as f64);
        negatives_below += neg;
        i = j;
    }
    Ok(wins / (positive.len() as f64 * negative.len() as f64))
}

/// Which per-instance score ranks out-of-distribution inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OodScore {
    #[default]
    Entropy,
    /// `1 − max_c p_c`
    MaxSoftmax,
}

impl OodScore {
    pub fn name(self) -> &'static str {
        match self {
            OodScore::Entropy => "entropy",
            OodScore::MaxSoftmax => "max_softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "entropy" => Some(OodScore::Entropy),
            "max_softmax" => Some(OodScore::MaxSoftmax),
            _ => None,
        }
    }
}

/// Fixed-width bins, left-closed except the last which also holds the upper edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values outside the range, clamped into the end bins.
    pub clamped: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Two columns: `bin_left_edge`, `count`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bin_left_edge\tcount\n");
        for (e, c) in self.edges.iter().zip(&self.counts) {
            writeln!(out, "{e}\t{c}").unwrap();
        }
        out
    }
}

pub fn entropy_histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::Config(format!("bad histogram range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect::<Vec<_>>();
    let mut counts = vec![0; bins];
    let mut clamped = 0;
    for &v in values {
        if v.is_nan() {
            return Err(Error::Contract("histogram input contains NaN".into()));
        }
        if v < lo || v > hi {
            clamped += 1;
        }
        // edges[b] <= v < edges[b + 1], with v == hi going to the last bin
        let b = edges[1..bins].partition_point(|&e| e <= v);
        counts[b] += 1;
    }
    let mut edges = edges;
    edges.truncate(bins);
    Ok(Histogram {
        edges,
        counts,
        clamped,
    })
}

/// Mean and standard error `sd/√m` over per-seed values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub runs: usize,
}

pub fn aggregate_seeds(values: &[f64]) -> Result<Aggregate> {
    let m = values.len();
    if m == 0 {
        return Err(Error::Contract("aggregate over zero runs".into()));
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let stderr = if m == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
        (var / m as f64).sqrt()
    };
    Ok(Aggregate {
        mean,
        stderr,
        runs: m,
    })
}

/// One aggregated metric line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub label_fraction: f64,
    pub ensemble_size: usize,
    pub metric: String,
    pub value: Aggregate,
    pub per_seed: Vec<f64>,
}

/// Tab-separated evaluation table stamped with the producing config digest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub config_digest: String,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Self {
            config_digest: config_digest.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        method: &str,
        label_fraction: f64,
        ensemble_size: usize,
        metric: &str,
        per_seed: Vec<f64>,
    ) -> Result<()> {
        let value = aggregate_seeds(&per_seed)?;
        self.rows.push(ReportRow {
            method: method.into(),
            label_fraction,
            ensemble_size,
            metric: metric.into(),
            value,
            per_seed,
        });
        Ok(())
    }

    pub fn find(&self, method: &str, label_fraction: f64, ensemble_size: usize, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.method == method
                && r.label_fraction == label_fraction
                && r.ensemble_size == ensemble_size
                && r.metric == metric
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# config_digest\t{}\n", self.config_digest);
        out += "method\tlabel_fraction\tensemble_size\tmetric\tvalue\tstderr\truns\n";
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                r.method, r.label_fraction, r.ensemble_size, r.metric, r.value.mean, r.value.stderr, r.value.runs
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs(rows: Vec<Vec<f64>>) -> Tensor {
        let c = rows[0].len();
        Tensor::matrix(rows.len(), c, rows.concat()).unwrap()
    }

    fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut w = 0.0;
        for p in pos {
            for n in neg {
                if p > n {
                    w += 1.0;
                } else if p == n {
                    w += 0.5;
                }
            }
        }
        w / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn accuracy_anchors() {
        let p = probs(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(accuracy(&p, &[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&p, &[0, 1, 0, 0]).unwrap(), 0.75);
        let tie = probs(vec![vec![0.5, 0.5]]);
        assert_eq!(accuracy(&tie, &[0]).unwrap(), 1.0);
        let empty = Tensor::matrix(0, 2, vec![]).unwrap();
        assert!(matches!(accuracy(&empty, &[]), Err(Error::Contract(_))));
        assert!(matches!(nll(&p, &[0, 1, 0, 2]), Err(Error::Data(_))));
    }

    #[test]
    fn nll_anchors() {
        let p = probs(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(nll(&p, &[0, 1]).unwrap(), 0.0);
        let h = probs(vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!((nll(&h, &[0, 1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let zero = probs(vec![vec![0.0, 1.0]]);
        assert!((nll(&zero, &[0]).unwrap() - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn nll_and_accuracy_match_row_by_row_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (rows, c) = (rng.gen_range(1..30), rng.gen_range(2..6));
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..rows {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                data.extend(raw.iter().map(|v| v / s));
                labels.push(rng.gen_range(0..c));
            }
            let p = Tensor::matrix(rows, c, data.clone()).unwrap();
            let mut total = 0.0;
            let mut hits = 0;
            for r in 0..rows {
                let row = &data[r * c..(r + 1) * c];
                total += -row[labels[r]].max(1e-12).ln();
                let mut best = 0;
                for k in 0..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                hits += usize::from(best == labels[r]);
            }
            assert!((nll(&p, &labels).unwrap() - total / rows as f64).abs() < 1e-12);
            assert_eq!(accuracy(&p, &labels).unwrap(), hits as f64 / rows as f64);
        }
    }

    #[test]
    fn auroc_anchors() {
        assert_eq!(auroc(&[0.8, 0.9], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert!(auroc(&[], &[0.5]).is_err());
        assert!(auroc(&[0.5], &[]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = rng.gen_range(1..60);
            let n = rng.gen_range(1..60);
            // coarse grid so ties actually occur
            let pos: Vec<f64> = (0..p).map(|_| (rng.gen_range(0..20) as f64) / 4.0).collect();
            let neg: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 5.0).collect();
            assert!((auroc(&pos, &neg).unwrap() - brute_auroc(&pos, &neg)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auroc_is_antisymmetric_without_ties(
            distinct in prop::collection::hash_set(-5000i32..5000, 2..80),
            cut in 1usize..79,
        ) {
            let all: Vec<f64> = distinct.iter().map(|&v| v as f64 / 7.0).collect();
            prop_assume!(cut < all.len());
            let (a, b) = all.split_at(cut);
            let s = auroc(a, b).unwrap() + auroc(b, a).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auroc_is_invariant_under_monotone_maps(
            pos in prop::collection::vec(-5.0f64..5.0, 1..40),
            neg in prop::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let f = |v: &f64| (2.0 * v).exp() + v.powi(3);
            let base = auroc(&pos, &neg).unwrap();
            let mapped = auroc(
                &pos.iter().map(f).collect::<Vec<_>>(),
                &neg.iter().map(f).collect::<Vec<_>>(),
            ).unwrap();
            prop_assert!((base - mapped).abs() < 1e-12);
        }

        #[test]
        fn histogram_keeps_every_value(
            values in prop::collection::vec(-1.0f64..4.0, 0..100),
            bins in 1usize..20,
        ) {
            let h = entropy_histogram(&values, bins, (0.0, 10f64.ln())).unwrap();
            prop_assert_eq!(h.total(), values.len());
            prop_assert_eq!(h.counts.len(), bins);
            prop_assert_eq!(h.clamped, values.iter().filter(|v| **v < 0.0 || **v > 10f64.ln()).count());
        }
    }

    #[test]
    fn histogram_anchors() {
        let h = entropy_histogram(&[0.0; 7], 10, (0.0, 10f64.ln())).unwrap();
        assert_eq!(h.counts[0], 7);
        assert_eq!(h.total(), 7);
        let h = entropy_histogram(&[0.1, 0.1, 2.0], 2, (0.0, 2.302)).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        let h = entropy_histogram(&[], 3, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![0, 0, 0]);
        // left-closed bins, upper edge in the final bin
        let h = entropy_histogram(&[0.5, 1.0, 0.0], 2, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.edges, vec![0.0, 0.5]);
        let h = entropy_histogram(&[-0.2, 1.5], 2, (0.0, 1.0)).unwrap();
        assert_eq!((h.counts.clone(), h.clamped), (vec![1, 1], 2));
        assert!(h.to_tsv().starts_with("bin_left_edge\tcount\n0\t1\n"));
    }

    #[test]
    fn aggregate_anchors() {
        let a = aggregate_seeds(&[0.9, 0.9, 0.9]).unwrap();
        assert!((a.mean - 0.9).abs() < 1e-15 && a.stderr.abs() < 1e-15);
        let a = aggregate_seeds(&[0.8, 1.0]).unwrap();
        assert!((a.mean - 0.9).abs() < 1e-12);
        assert!((a.stderr - 0.1).abs() < 1e-12);
        assert_eq!(aggregate_seeds(&[0.3]).unwrap().stderr, 0.0);
    }

    #[test]
    fn report_table_carries_digest_and_rows() {
        let mut r = EvalReport::new("abc123");
        r.push("bbyol_ens", 0.25, 4, "nll", vec![0.5, 0.7]).unwrap();
        let text = r.to_tsv();
        assert!(text.starts_with("# config_digest\tabc123\n"));
        assert!(text.contains("bbyol_ens\t0.25\t4\tnll\t0.600000\t0.100000\t2"));
        assert!(r.find("bbyol_ens", 0.25, 4, "nll").is_some());
        assert!(r.find("bbyol_ens", 0.25, 3, "nll").is_none());
    }
}
