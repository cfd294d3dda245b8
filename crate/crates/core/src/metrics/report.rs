//! Aggregation of per-sample metrics into a report.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Prf, Whdr, WhdrSums, ALL, DISTINCT, OVERLAPPING};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-sample values over samples where the value is defined.
    #[default]
    Macro,
    /// Counts and weights pooled over all samples, then one ratio.
    Micro,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub value: Option<f64>,
    /// Samples contributing (macro) or samples with a nonzero denominator
    /// (micro).
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub aggregation: Aggregation,
    pub samples: usize,
    /// Samples with fewer than two instances, excluded from every metric.
    pub skipped: usize,
    pub recall: Scored,
    pub precision: Scored,
    pub f1: Scored,
    pub whdr_distinct: Scored,
    pub whdr_overlap: Scored,
    pub whdr_all: Scored,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn rows(&self) -> [(&'static str, Scored); 6] {
        [
            ("recall", self.recall),
            ("precision", self.precision),
            ("f1", self.f1),
            ("whdr_distinct", self.whdr_distinct),
            ("whdr_overlap", self.whdr_overlap),
            ("whdr_all", self.whdr_all),
        ]
    }

    /// Aligned text table of several reports, one column per method.
    pub fn table(reports: &[&MetricsReport]) -> String {
        let name_w = 14;
        let col_w = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max(8) + 2;
        let mut s = format!("{:<name_w$}", "metric");
        for r in reports {
            let _ = write!(s, "{:>col_w$}", r.method);
        }
        s.push('\n');
        let rows: Vec<_> = reports.iter().map(|r| r.rows()).collect();
        for k in 0..6 {
            let _ = write!(s, "{:<name_w$}", rows.first().map_or("", |r| r[k].0));
            for r in &rows {
                let cell = r[k].1.value.map_or("-".to_string(), |v| format!("{v:.4}"));
                let _ = write!(s, "{cell:>col_w$}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<name_w$}", "samples");
        for r in reports {
            let _ = write!(s, "{:>col_w$}", format!("{}/{}", r.samples - r.skipped, r.samples));
        }
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    aggregation: Aggregation,
    samples: usize,
    skipped: usize,
    prf: Vec<Prf>,
    whdr: Vec<Whdr>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Scored {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        count += 1;
    }
    Scored {
        value: (count > 0).then(|| sum / count as f64),
        samples: count,
    }
}

impl MetricsAccumulator {
    pub fn new(aggregation: Aggregation) -> Self {
        MetricsAccumulator {
            aggregation,
            ..Default::default()
        }
    }

    pub fn skip(&mut self) {
        self.samples += 1;
        self.skipped += 1;
    }

    pub fn add(&mut self, prf: Prf, whdr: Whdr) {
        self.samples += 1;
        self.prf.push(prf);
        self.whdr.push(whdr);
    }

    pub fn finish(&self, method: impl Into<String>) -> MetricsReport {
        let (recall, precision, f1, wd, wo, wa) = match self.aggregation {
            Aggregation::Macro => (
                mean(self.prf.iter().map(|p| p.recall)),
                mean(self.prf.iter().map(|p| p.precision)),
                mean(self.prf.iter().map(|p| p.f1)),
                mean(self.whdr.iter().map(|w| w.rates[DISTINCT])),
                mean(self.whdr.iter().map(|w| w.rates[OVERLAPPING])),
                mean(self.whdr.iter().map(|w| w.rates[ALL])),
            ),
            Aggregation::Micro => {
                let (tp, pr, ac) = self.prf.iter().fold((0, 0, 0), |a, p| (a.0 + p.tp, a.1 + p.predicted, a.2 + p.actual));
                let pooled = Prf::from_counts(tp, pr, ac);
                let count = |f: fn(&Prf) -> usize| self.prf.iter().filter(|p| f(p) > 0).count();
                let mut sums = WhdrSums::default();
                for w in &self.whdr {
                    for k in 0..3 {
                        sums.wrong[k] += w.sums.wrong[k];
                        sums.total[k] += w.sums.total[k];
                    }
                }
                let pooled_w = Whdr::from_sums(sums);
                let wcount = |k: usize| self.whdr.iter().filter(|w| w.sums.total[k] > 0.0).count();
                let sc = |value, samples| Scored { value, samples };
                (
                    sc(pooled.recall, count(|p| p.actual)),
                    sc(pooled.precision, count(|p| p.predicted)),
                    sc(pooled.f1, self.prf.len()),
                    sc(pooled_w.rates[DISTINCT], wcount(DISTINCT)),
                    sc(pooled_w.rates[OVERLAPPING], wcount(OVERLAPPING)),
                    sc(pooled_w.rates[ALL], wcount(ALL)),
                )
            }
        };
        MetricsReport {
            method: method.into(),
            aggregation: self.aggregation,
            samples: self.samples,
            skipped: self.skipped,
            recall,
            precision,
            f1,
            whdr_distinct: wd,
            whdr_overlap: wo,
            whdr_all: wa,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_and_micro_differ_as_expected() {
        let mut mac = MetricsAccumulator::new(Aggregation::Macro);
        let mut mic = MetricsAccumulator::new(Aggregation::Micro);
        let w = Whdr::default();
        for acc in [&mut mac, &mut mic] {
            acc.add(Prf::from_counts(1, 1, 1), w);
            acc.add(Prf::from_counts(0, 0, 3), w);
            acc.skip();
        }
        let (a, b) = (mac.finish("m"), mic.finish("m"));
        assert_eq!(a.recall.value, Some(0.5));
        assert_eq!(b.recall.value, Some(0.25));
        assert_eq!(a.precision, Scored { value: Some(1.0), samples: 1 });
        assert_eq!((a.samples, a.skipped), (3, 1));
        assert_eq!(a.whdr_all.value, None);
        let table = MetricsReport::table(&[&a, &b]);
        assert!(table.lines().all(|l| l.len() == table.lines().next().unwrap().len()));
    }
}
