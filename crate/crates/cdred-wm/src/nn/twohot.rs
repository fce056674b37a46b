use serde::{Deserialize, Serialize};

/// Evenly spaced scalar support for distributional value heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueBins {
    pub v_min: f64,
    pub v_max: f64,
    pub count: usize,
}

impl ValueBins {
    pub fn new(v_min: f64, v_max: f64, count: usize) -> Self {
        assert!(count >= 2, "need at least two bins");
        assert!(v_max > v_min, "v_max must exceed v_min");
        ValueBins { v_min, v_max, count }
    }

    pub fn step(&self) -> f64 {
        (self.v_max - self.v_min) / (self.count - 1) as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.v_min + self.step() * i as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.center(i)).collect()
    }

    /// Two-hot encoding: the clamped value is split between the two adjacent
    /// bin centers that bracket it, linearly by distance. At most two entries
    /// are nonzero and they sum to 1.
    pub fn encode(&self, value: f64) -> Vec<f64> {
        let v = value.clamp(self.v_min, self.v_max);
        let x = (v - self.v_min) / self.step();
        let lo = (x.floor() as usize).min(self.count - 2);
        let frac = x - lo as f64;
        let mut out = vec![0.0; self.count];
        out[lo] = 1.0 - frac;
        out[lo + 1] = frac;
        out
    }

    /// Probability-weighted mean of bin centers.
    pub fn decode(&self, probs: &[f64]) -> f64 {
        assert_eq!(probs.len(), self.count, "probability width mismatch");
        probs
            .iter()
            .enumerate()
            .map(|(i, &p)| p * self.center(i))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_between_adjacent_centers() {
        // Centers {-1, -0.5, 0, 0.5, 1}: 0.25 sits halfway between 0 and 0.5.
        let bins = ValueBins::new(-1.0, 1.0, 5);
        let enc = bins.encode(0.25);
        assert_eq!(enc, vec![0.0, 0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn bin_center_is_one_hot() {
        let bins = ValueBins::new(-1.0, 1.0, 5);
        let enc = bins.encode(-0.5);
        assert_eq!(enc, vec![0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_values_clamp_to_edges() {
        let bins = ValueBins::new(-1.0, 1.0, 5);
        assert_eq!(bins.encode(7.0)[4], 1.0);
        assert_eq!(bins.encode(-7.0)[0], 1.0);
        assert_eq!(bins.decode(&bins.encode(123.0)), 1.0);
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact_in_range(value in -10.0f64..10.0) {
            let bins = ValueBins::new(-10.0, 10.0, 101);
            let enc = bins.encode(value);
            let nonzero = enc.iter().filter(|&&p| p != 0.0).count();
            prop_assert!(nonzero <= 2);
            let sum: f64 = enc.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!((bins.decode(&enc) - value).abs() <= 1e-9);
        }
    }
}
