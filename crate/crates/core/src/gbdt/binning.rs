use serde::{Deserialize, Serialize};

/// Upper bin edges for one feature. A value `x` falls in bin
/// `#{e in edges : e < x}`, so bin `b` holds `edges[b-1] < x <= edges[b]`
/// and everything above the last edge lands in the last bin.
///
/// Edges are observed training values, so any strictly increasing transform
/// of the feature yields the same binning when applied consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBins {
    pub edges: Vec<f64>,
}

impl FeatureBins {
    pub fn fit(values: &[f64], max_bins: usize) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() <= 1 {
            return Self { edges: Vec::new() };
        }
        let edges = if distinct.len() <= max_bins {
            distinct[..distinct.len() - 1].to_vec()
        } else {
            let n = sorted.len();
            let top = *distinct.last().unwrap();
            let mut edges: Vec<f64> = (1..max_bins)
                .map(|b| sorted[(b * n / max_bins).min(n - 1)])
                .filter(|&v| v < top)
                .collect();
            edges.dedup();
            edges
        };
        Self { edges }
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn bin(&self, x: f64) -> u16 {
        self.edges.partition_point(|&e| e < x) as u16
    }

    /// Raw-value threshold equivalent to "bin <= b".
    pub fn threshold(&self, b: u16) -> f64 {
        self.edges[b as usize]
    }
}
