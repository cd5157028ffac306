use serde::{Deserialize, Serialize};

/// Euclidean k-nearest-neighbours. Distance ties are broken by training
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    pub k: usize,
    pub points: Vec<Vec<f64>>,
    pub infected: Vec<bool>,
}

impl Knn {
    pub(crate) fn fit(x: &[&[f64]], y: &[bool], k: usize) -> Knn {
        Knn { k, points: x.iter().map(|r| r.to_vec()).collect(), infected: y.to_vec() }
    }

    /// Share of infected points among the `k` nearest (fewer if the
    /// training set is smaller).
    pub fn infected_fraction(&self, row: &[f64]) -> f64 {
        let k = self.k.min(self.points.len());
        if k == 0 {
            return 0.0;
        }
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let hits = dist[..k].iter().filter(|(_, i)| self.infected[*i]).count();
        hits as f64 / k as f64
    }
}
