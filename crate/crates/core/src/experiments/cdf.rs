//! Empirical CDFs and their text form.

use std::fmt::Write as _;
use std::path::Path;

/// A group of nearby samples: one step of a step CDF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cluster {
    pub lo: f64,
    pub hi: f64,
    /// Most frequent value.
    pub mode: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfSeries {
    sorted: Vec<f64>,
}

impl CdfSeries {
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        Self { sorted: samples }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// `(value, fraction of samples <= value)` for each distinct value.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, v) in self.sorted.iter().enumerate() {
            let f = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == *v => last.1 = f,
                _ => out.push((*v, f)),
            }
        }
        out
    }

    /// Nearest-rank quantile.
    pub fn quantile(&self, q: f64) -> f64 {
        assert!(!self.sorted.is_empty(), "empty series");
        let rank = (q * self.sorted.len() as f64).ceil().max(1.0) as usize;
        self.sorted[rank.min(self.sorted.len()) - 1]
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    /// Splits wherever consecutive samples are more than `gap` apart.
    pub fn clusters(&self, gap: f64) -> Vec<Cluster> {
        let n = self.sorted.len() as f64;
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.sorted.len() {
            if i < self.sorted.len() && self.sorted[i] - self.sorted[i - 1] <= gap {
                continue;
            }
            let run = &self.sorted[start..i];
            let mut mode = (run[0], 0usize);
            let mut j = 0;
            while j < run.len() {
                let k = j + run[j..].iter().take_while(|v| **v == run[j]).count();
                if k - j > mode.1 {
                    mode = (run[j], k - j);
                }
                j = k;
            }
            out.push(Cluster {
                lo: run[0],
                hi: run[run.len() - 1],
                mode: mode.0,
                mass: run.len() as f64 / n,
            });
            start = i;
        }
        out
    }

    /// The same series translated by `delta` ms.
    pub fn shifted(&self, delta: f64) -> CdfSeries {
        CdfSeries {
            sorted: self.sorted.iter().map(|v| v + delta).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# latency_ms cumulative_fraction\n");
        for (v, f) in self.points() {
            let _ = writeln!(s, "{v:.3} {f:.6}");
        }
        if self.sorted.is_empty() {
            return s;
        }
        let _ = writeln!(s, "# summary");
        let _ = writeln!(s, "# samples {}", self.sorted.len());
        let _ = writeln!(s, "# median {:.3}", self.median());
        let _ = writeln!(s, "# p95 {:.3}", self.quantile(0.95));
        for c in self.clusters(5.0) {
            let _ = writeln!(s, "# step {:.3} mass {:.4}", c.mode, c.mass);
        }
        s
    }
}

pub fn emit_cdf(series: &CdfSeries, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, series.to_text())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_end_at_one() {
        let c = CdfSeries::from_samples(vec![3.0, 1.0, 2.0, 2.0]);
        assert_eq!(c.points(), vec![(1.0, 0.25), (2.0, 0.75), (3.0, 1.0)]);
        assert_eq!(c.median(), 2.0);
        assert_eq!(c.quantile(1.0), 3.0);
    }

    #[test]
    fn clusters_and_text() {
        let mut xs = vec![57.0; 4];
        xs.extend([142.0, 142.0, 143.0, 216.0]);
        let c = CdfSeries::from_samples(xs);
        let cl = c.clusters(5.0);
        assert_eq!(cl.len(), 3);
        assert_eq!((cl[0].mode, cl[0].mass), (57.0, 0.5));
        assert_eq!((cl[1].lo, cl[1].hi, cl[1].mode), (142.0, 143.0, 142.0));
        let t = c.to_text();
        assert!(t.starts_with("# latency_ms cumulative_fraction\n57.000 0.500000\n"));
        assert!(t.contains("# step 216.000 mass 0.1250"));
        assert_eq!(c.shifted(-53.0).samples()[0], 4.0);
    }
}
