//! Confusion-matrix metrics: accuracy, macro/micro F1 and the multiclass
//! Matthews correlation coefficient.
//!
//! Degenerate denominators yield 0 (with a logged warning) rather than NaN or
//! an error.

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{Error, Result};

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::invalid(format!(
                "{} counts for a {classes}×{classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Support of each true class.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes.max(1)).map(|r| r.iter().sum()).collect()
    }

    /// Number of predictions of each class.
    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|p| (0..self.classes).map(|t| self.get(t, p)).sum())
            .collect()
    }

    /// Adds another matrix's counts into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::incompatible(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// The same matrix under a class relabeling `c → perm[c]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.classes);
        for t in 0..self.classes {
            for p in 0..self.classes {
                out.counts[perm[t] * self.classes + perm[p]] = self.get(t, p);
            }
        }
        out
    }
}

pub fn confusion(truth: &[u32], pred: &[u32], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t as usize >= classes || p as usize >= classes {
            return Err(Error::invalid(format!(
                "label pair ({t}, {p}) at position {i} outside {classes} classes"
            )));
        }
        m.counts[t as usize * classes + p as usize] += 1;
    }
    Ok(m)
}

pub fn accuracy(m: &ConfusionMatrix) -> f64 {
    match m.total() {
        0 => 0.0,
        n => m.trace() as f64 / n as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn per_class(m: &ConfusionMatrix) -> ClassScores {
    let rows = m.row_sums();
    let cols = m.col_sums();
    let mut s = ClassScores {
        precision: Vec::with_capacity(m.classes),
        recall: Vec::with_capacity(m.classes),
        f1: Vec::with_capacity(m.classes),
    };
    for c in 0..m.classes {
        let tp = m.get(c, c);
        s.precision.push(ratio(tp, cols[c]));
        s.recall.push(ratio(tp, rows[c]));
        // 2PR/(P+R) = 2·tp/(row + col); P + R = 0 exactly when tp = 0
        if tp == 0 {
            log::warn!("class {c}: precision + recall is 0, F1 taken as 0");
            s.f1.push(0.0);
        } else {
            s.f1.push(2.0 * tp as f64 / (rows[c] + cols[c]) as f64);
        }
    }
    s
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(m: &ConfusionMatrix) -> f64 {
    if m.classes == 0 {
        return 0.0;
    }
    per_class(m).f1.iter().sum::<f64>() / m.classes as f64
}

/// F1 over pooled counts. For single-label data this equals accuracy.
pub fn micro_f1(m: &ConfusionMatrix) -> f64 {
    let tp = m.trace();
    let errors = m.total() - tp;
    // pooled FP and FN both equal the off-diagonal total
    ratio(2 * tp, 2 * tp + 2 * errors)
}

/// Multiclass Matthews correlation (Gorodkin's R_K).
pub fn mcc(m: &ConfusionMatrix) -> f64 {
    let t = m.total() as i128;
    let rows = m.row_sums();
    let cols = m.col_sums();
    let rc: i128 = rows.iter().zip(&cols).map(|(&r, &c)| r as i128 * c as i128).sum();
    let rr: i128 = rows.iter().map(|&r| r as i128 * r as i128).sum();
    let cc: i128 = cols.iter().map(|&c| c as i128 * c as i128).sum();
    let num = t * m.trace() as i128 - rc;
    let a = t * t - rr;
    let b = t * t - cc;
    if a == 0 || b == 0 {
        if t > 0 {
            log::warn!("MCC denominator is 0 (a single true or predicted class), taken as 0");
        }
        return 0.0;
    }
    (num as f64 / ((a as f64).sqrt() * (b as f64).sqrt())).clamp(-1.0, 1.0)
}

/// Summary emitted by `feddbl eval`. Serializes every real with six decimals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(serialize_with = "fixed6")]
    pub accuracy: f64,
    #[serde(serialize_with = "fixed6")]
    pub macro_f1: f64,
    #[serde(serialize_with = "fixed6")]
    pub mcc: f64,
    #[serde(serialize_with = "fixed6_opt", skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
    pub per_class: PerClassJson,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerClassJson {
    #[serde(serialize_with = "fixed6_vec")]
    pub precision: Vec<f64>,
    #[serde(serialize_with = "fixed6_vec")]
    pub recall: Vec<f64>,
    #[serde(serialize_with = "fixed6_vec")]
    pub f1: Vec<f64>,
}

impl EvalReport {
    pub fn from_confusion(m: &ConfusionMatrix, with_micro: bool) -> Self {
        let pc = per_class(m);
        Self {
            accuracy: accuracy(m),
            macro_f1: pc.f1.iter().sum::<f64>() / m.classes.max(1) as f64,
            mcc: mcc(m),
            micro_f1: with_micro.then(|| micro_f1(m)),
            per_class: PerClassJson {
                precision: pc.precision,
                recall: pc.recall,
                f1: pc.f1,
            },
            total: m.total(),
        }
    }
}

/// A JSON number literal with `places` decimals.
pub(crate) fn fixed_raw(x: f64, places: usize) -> Box<RawValue> {
    let x = if x.is_finite() { x } else { 0.0 };
    RawValue::from_string(format!("{x:.places$}")).expect("formatted float is valid JSON")
}

pub(crate) fn fixed6<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    fixed_raw(*x, 6).serialize(s)
}

fn fixed6_opt<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    x.map(|v| fixed_raw(v, 6)).serialize(s)
}

pub(crate) fn fixed6_vec<S: Serializer>(xs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    xs.iter().map(|&x| fixed_raw(x, 6)).collect::<Vec<_>>().serialize(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(c: usize, v: &[u64]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(c, v.to_vec()).unwrap()
    }

    /// Pearson correlation between the one-hot indicator matrices of truth
    /// and prediction (each indicator column centered on its own mean),
    /// computed from expanded samples.
    fn pearson_oracle(m: &ConfusionMatrix) -> f64 {
        let c = m.num_classes();
        let mut x: Vec<Vec<f64>> = Vec::new();
        let mut y: Vec<Vec<f64>> = Vec::new();
        for t in 0..c {
            for p in 0..c {
                for _ in 0..m.get(t, p) {
                    x.push((0..c).map(|k| f64::from(k == t)).collect());
                    y.push((0..c).map(|k| f64::from(k == p)).collect());
                }
            }
        }
        let n = x.len() as f64;
        let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for k in 0..c {
            let mx = x.iter().map(|r| r[k]).sum::<f64>() / n;
            let my = y.iter().map(|r| r[k]).sum::<f64>() / n;
            for (a, b) in x.iter().zip(&y) {
                cov += (a[k] - mx) * (b[k] - my);
                vx += (a[k] - mx).powi(2);
                vy += (b[k] - my).powi(2);
            }
        }
        if vx == 0.0 || vy == 0.0 {
            0.0
        } else {
            cov / (vx * vy).sqrt()
        }
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[0, 1], &[0, 1], 2).unwrap(), cm(2, &[1, 0, 0, 1]));
        assert_eq!(confusion(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        assert_eq!(confusion(&[0, 0, 1], &[1, 0, 1], 2).unwrap(), cm(2, &[1, 1, 0, 1]));
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn metric_examples() {
        let diag = cm(3, &[4, 0, 0, 0, 2, 0, 0, 0, 9]);
        assert_eq!((accuracy(&diag), macro_f1(&diag), mcc(&diag)), (1.0, 1.0, 1.0));
        assert_eq!(mcc(&cm(2, &[1, 1, 1, 1])), 0.0);
        let empty = ConfusionMatrix::zeros(4);
        assert_eq!((accuracy(&empty), macro_f1(&empty), mcc(&empty)), (0.0, 0.0, 0.0));
        // every sample predicted as class 0
        let flat = cm(2, &[5, 0, 5, 0]);
        assert_eq!(mcc(&flat), 0.0);
        assert_eq!(per_class(&flat).f1[1], 0.0);
        assert!((accuracy(&cm(2, &[1, 1, 0, 1])) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn micro_equals_accuracy() {
        let m = cm(3, &[5, 1, 0, 2, 7, 1, 0, 3, 4]);
        assert!((micro_f1(&m) - accuracy(&m)).abs() < 1e-15);
    }

    #[test]
    fn report_uses_six_decimals() {
        let m = cm(2, &[2, 1, 0, 3]);
        let json = serde_json::to_string(&EvalReport::from_confusion(&m, false)).unwrap();
        assert!(json.starts_with(r#"{"accuracy":0.833333,"macro_f1":0.828571,"mcc":0.707107,"#), "{json}");
        assert!(json.contains(r#""precision":[1.000000,0.750000]"#), "{json}");
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["total"], 6);
        assert!(v.get("micro_f1").is_none());
    }

    fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..6).prop_flat_map(|c| proptest::collection::vec(0u64..40, c * c).prop_map(move |v| cm(c, &v)))
    }

    proptest! {
        #[test]
        fn ranges(m in matrix()) {
            let (a, f, r) = (accuracy(&m), macro_f1(&m), mcc(&m));
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn relabeling_invariance(m in matrix(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..m.num_classes()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p = m.permuted(&perm);
            prop_assert_eq!(accuracy(&p), accuracy(&m));
            prop_assert!((macro_f1(&p) - macro_f1(&m)).abs() < 1e-12);
            prop_assert!((mcc(&p) - mcc(&m)).abs() < 1e-12);
        }

        #[test]
        fn matches_pearson_oracle(m in matrix()) {
            prop_assert!((mcc(&m) - pearson_oracle(&m)).abs() < 1e-12);
        }

        #[test]
        fn binary_formula(tp in 0u64..200, fn_ in 0u64..200, fp in 0u64..200, tn in 0u64..200) {
            let m = cm(2, &[tp, fn_, fp, tn]);
            let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)) as f64;
            let expected = if den == 0.0 { 0.0 } else { (tp as f64 * tn as f64 - fp as f64 * fn_ as f64) / den.sqrt() };
            prop_assert!((mcc(&m) - expected).abs() < 1e-12);
        }
    }
}
