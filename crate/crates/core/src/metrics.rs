//! Confusion matrices and the rates derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{CLASS_NAMES, N_CLASSES};

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; N_CLASSES]; N_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = Self::default();
        for (t, p) in pairs {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= N_CLASSES || predicted >= N_CLASSES {
            return Err(Error::InvalidParameter(format!(
                "class pair ({truth}, {predicted}) out of range"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = format!("true\\predicted,{}\n", CLASS_NAMES.join(","));
        for (name, row) in CLASS_NAMES.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// Mean per-class recall. Every class must occur at least once.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let mut sum = 0.0;
    for c in 0..N_CLASSES {
        let n = cm.row_sum(c);
        if n == 0 {
            return Err(Error::MissingClass(c));
        }
        sum += cm.counts[c][c] as f64 / n as f64;
    }
    Ok(sum / N_CLASSES as f64)
}

/// `TP / (TP + (FP + FN) / 2)` per class; 0 when the class is neither
/// present nor predicted.
pub fn f1_per_class(cm: &ConfusionMatrix) -> [f64; N_CLASSES] {
    std::array::from_fn(|c| {
        let tp = cm.counts[c][c] as f64;
        let fp = cm.col_sum(c) as f64 - tp;
        let fn_ = cm.row_sum(c) as f64 - tp;
        let den = tp + 0.5 * (fp + fn_);
        if den == 0.0 {
            0.0
        } else {
            tp / den
        }
    })
}

/// Sample mean and (population) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::new([[5, 0, 0], [0, 3, 0], [0, 0, 7]]);
        assert_eq!(balanced_accuracy(&cm).unwrap(), 1.0);
        assert_eq!(f1_per_class(&cm), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn recalls_average() {
        // recalls 1.0, 0.8, 0.6
        let cm = ConfusionMatrix::new([[10, 0, 0], [1, 8, 1], [2, 2, 6]]);
        assert!((balanced_accuracy(&cm).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn f1_formula() {
        // class 0: TP 8, FP 2, FN 2
        let cm = ConfusionMatrix::new([[8, 2, 0], [2, 0, 0], [0, 0, 0]]);
        assert!((f1_per_class(&cm)[0] - 0.8).abs() < 1e-12);
        // class 2 never true, never predicted
        assert_eq!(f1_per_class(&cm)[2], 0.0);
    }

    #[test]
    fn zeroed_diagonal_and_empty_row() {
        let cm = ConfusionMatrix::new([[0, 2, 1], [3, 0, 1], [1, 1, 0]]);
        assert_eq!(balanced_accuracy(&cm).unwrap(), 0.0);
        let empty = ConfusionMatrix::new([[1, 0, 0], [0, 0, 0], [0, 0, 1]]);
        assert!(matches!(balanced_accuracy(&empty), Err(Error::MissingClass(1))));
    }

    #[test]
    fn uniform_guessing_is_chance() {
        use rand::Rng as _;
        let mut r = crate::rng::rng_from(5, &[]);
        let pairs = (0..30_000).map(|i| (i % 3, r.random_range(0..3)));
        let cm = ConfusionMatrix::from_pairs(pairs).unwrap();
        assert!((balanced_accuracy(&cm).unwrap() - 1.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::new([[1, 2, 3], [4, 5, 6], [7, 8, 9]]);
        let csv = cm.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "true\\predicted,no_pattern,pattern1,pattern2");
        assert_eq!(lines[2], "pattern1,4,5,6");
    }

    fn matrix() -> impl Strategy<Value = [[u64; 3]; 3]> {
        proptest::array::uniform3(proptest::array::uniform3(0u64..50)).prop_map(|mut m| {
            for (c, row) in m.iter_mut().enumerate() {
                row[c] += 1;
            }
            m
        })
    }

    proptest! {
        #[test]
        fn rates_survive_duplication_and_relabeling(m in matrix(), perm in Just([2usize, 0, 1])) {
            let cm = ConfusionMatrix::new(m);
            let doubled = ConfusionMatrix::new(m.map(|r| r.map(|v| 2 * v)));
            prop_assert!((balanced_accuracy(&cm).unwrap() - balanced_accuracy(&doubled).unwrap()).abs() < 1e-12);
            let mut p = [[0u64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    p[perm[i]][perm[j]] = m[i][j];
                }
            }
            let pm = ConfusionMatrix::new(p);
            prop_assert!((balanced_accuracy(&cm).unwrap() - balanced_accuracy(&pm).unwrap()).abs() < 1e-12);
            let (f, fp) = (f1_per_class(&cm), f1_per_class(&pm));
            for i in 0..3 {
                prop_assert!((f[i] - fp[perm[i]]).abs() < 1e-12);
            }
            for v in f {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
