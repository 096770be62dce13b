//! Pixel-level accuracy: confusion matrix, per-class IoU and mIoU.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LABEL_FILL;
use crate::scene::NUM_CLASSES;

/// Column names in report order (class 0 to 10).
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Clear", "Ci", "Cs", "Dc", "Ac", "As", "Ns", "Cu", "SC", "St", "Unknown",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction has {pred} pixels, ground truth {gt}")]
    ShapeMismatch { pred: usize, gt: usize },
    #[error("invalid {what} value {value}")]
    InvalidValue { what: &'static str, value: u8 },
    #[error("no class is present")]
    NoClassesPresent,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub ignored: u64,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self {
            counts: [[0; NUM_CLASSES]; NUM_CLASSES],
            ignored: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Mean over every class; absent classes count as zero.
    #[default]
    All11,
    /// Mean over classes present in ground truth or prediction.
    PresentOnly,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one prediction/ground-truth pair; ground truth `255` is counted
    /// as ignored.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<(), MetricsError> {
        if pred.len() != gt.len() {
            return Err(MetricsError::ShapeMismatch {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        if let Some(&v) = pred.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(MetricsError::InvalidValue {
                what: "prediction",
                value: v,
            });
        }
        if let Some(&v) = gt
            .iter()
            .find(|&&v| v as usize >= NUM_CLASSES && v != LABEL_FILL)
        {
            return Err(MetricsError::InvalidValue {
                what: "label",
                value: v,
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == LABEL_FILL {
                self.ignored += 1;
            } else {
                self.counts[g as usize][p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
        self.ignored += other.ignored;
    }

    pub fn counted(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn total(&self) -> u64 {
        self.counted() + self.ignored
    }

    /// IoU per class; `None` where the class appears in neither ground truth
    /// nor prediction.
    pub fn iou_per_class(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|c| self.iou_fraction(c).map(|(i, u)| i as f64 / u as f64))
    }

    /// `(intersection, union)` of a class, `None` when absent.
    fn iou_fraction(&self, c: usize) -> Option<(u64, u64)> {
        let tp = self.counts[c][c];
        let row: u64 = self.counts[c].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[c]).sum();
        let union = row + col - tp;
        (union > 0).then_some((tp, union))
    }

    fn iou_fractions(&self, classes: impl Iterator<Item = usize>) -> Vec<(u64, u64)> {
        classes.filter_map(|c| self.iou_fraction(c)).collect()
    }

    pub fn miou(&self, mode: MiouMode) -> Result<f64, MetricsError> {
        let present = self.iou_fractions(0..NUM_CLASSES);
        if present.is_empty() {
            return Err(MetricsError::NoClassesPresent);
        }
        let over = match mode {
            MiouMode::All11 => NUM_CLASSES,
            MiouMode::PresentOnly => present.len(),
        };
        Ok(mean_of_fractions(&present, over))
    }

    /// Mean IoU over the given classes that are present.
    pub fn mean_iou_of(&self, classes: &[usize]) -> Option<f64> {
        let present = self.iou_fractions(classes.iter().copied());
        (!present.is_empty()).then(|| mean_of_fractions(&present, present.len()))
    }

    pub fn report(&self, mode: MiouMode) -> Result<MetricsReport, MetricsError> {
        let ious = self.iou_per_class();
        Ok(MetricsReport {
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            per_class_iou: ious.to_vec(),
            miou: self.miou(mode)?,
            miou_mode: mode,
            pixel_totals: PixelTotals {
                per_class_gt: self.counts.iter().map(|r| r.iter().sum()).collect(),
                per_class_pred: (0..NUM_CLASSES)
                    .map(|c| self.counts.iter().map(|r| r[c]).sum())
                    .collect(),
                counted: self.counted(),
                ignored: self.ignored,
            },
            confusion: self.clone(),
        })
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `Σ(n/d) / count`, summed as an exact fraction so the result is the
/// nearest double whenever the reduced numerator and denominator fit in the
/// 53-bit mantissa; plain float summation otherwise.
fn mean_of_fractions(fracs: &[(u64, u64)], count: usize) -> f64 {
    let exact = || -> Option<f64> {
        let (mut num, mut den) = (0u128, 1u128);
        for &(n, d) in fracs {
            let (n, d) = (n as u128, d as u128);
            let lcm = (den / gcd(den, d)).checked_mul(d)?;
            num = num
                .checked_mul(lcm / den)?
                .checked_add(n.checked_mul(lcm / d)?)?;
            den = lcm;
            let g = gcd(num, den).max(1);
            (num, den) = (num / g, den / g);
        }
        den = den.checked_mul(count as u128)?;
        let g = gcd(num, den).max(1);
        let (num, den) = (num / g, den / g);
        const EXACT: u128 = 1 << f64::MANTISSA_DIGITS;
        (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
    };
    exact().unwrap_or_else(|| {
        fracs.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / count as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelTotals {
    pub per_class_gt: Vec<u64>,
    pub per_class_pred: Vec<u64>,
    pub counted: u64,
    pub ignored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// `null` for absent classes.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub miou_mode: MiouMode,
    pub pixel_totals: PixelTotals,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn save_json(&self, path: &Path) -> Result<(), MetricsError> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, MetricsError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// One header row of class names plus `mIoU`, one row of percentages
    /// (two decimals); absent classes are left empty.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<&str> = CLASS_NAMES.to_vec();
        header.push("mIoU");
        let mut row: Vec<String> = self
            .per_class_iou
            .iter()
            .map(|v| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default())
            .collect();
        row.push(format!("{:.2}", 100.0 * self.miou));
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn cm_of(pred: &[u8], gt: &[u8]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(pred, gt).unwrap();
        cm
    }

    #[test]
    fn hand_example() {
        // pred [[0,1],[1,1]], gt [[0,1],[0,1]]
        let cm = cm_of(&[0, 1, 1, 1], &[0, 1, 0, 1]);
        let iou = cm.iou_per_class();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(2.0 / 3.0));
        assert!(iou[2..].iter().all(Option::is_none));
        assert_eq!(cm.miou(MiouMode::PresentOnly).unwrap(), 7.0 / 12.0);
        assert_eq!(cm.miou(MiouMode::All11).unwrap(), 7.0 / 66.0);
    }

    #[test]
    fn perfect_and_ignored() {
        let gt: Vec<u8> = (0..100).map(|i| (i % 11) as u8).collect();
        let cm = cm_of(&gt, &gt);
        assert_eq!((0..11).map(|c| cm.counts[c][c]).sum::<u64>(), 100);
        assert!(cm.iou_per_class().iter().all(|v| *v == Some(1.0)));
        assert_eq!(cm.miou(MiouMode::All11).unwrap(), 1.0);

        let cm = cm_of(&[3; 10], &[255; 10]);
        assert_eq!(cm.ignored, 10);
        assert_eq!(cm.counted(), 0);
        assert!(matches!(
            cm.miou(MiouMode::All11),
            Err(MetricsError::NoClassesPresent)
        ));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut cm = ConfusionMatrix::new();
        assert!(matches!(
            cm.accumulate(&[0, 1], &[0]),
            Err(MetricsError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            cm.accumulate(&[11], &[0]),
            Err(MetricsError::InvalidValue { .. })
        ));
        assert!(matches!(
            cm.accumulate(&[255], &[0]),
            Err(MetricsError::InvalidValue { .. })
        ));
        assert!(matches!(
            cm.accumulate(&[0], &[12]),
            Err(MetricsError::InvalidValue { .. })
        ));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn csv_layout() {
        let rep = cm_of(&[0, 1, 1, 1], &[0, 1, 0, 1])
            .report(MiouMode::PresentOnly)
            .unwrap();
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Clear,Ci,Cs,Dc,Ac,As,Ns,Cu,SC,St,Unknown,mIoU");
        assert_eq!(lines[1], "50.00,66.67,,,,,,,,,,58.33");
    }

    fn mask() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(prop_oneof![8 => 0u8..11, 1 => Just(255u8)], 256)
    }

    proptest! {
        #[test]
        fn matches_set_oracle(gt in mask(), pred in prop::collection::vec(0u8..11, 256)) {
            let cm = cm_of(&pred, &gt);
            let iou = cm.iou_per_class();
            for c in 0..11u8 {
                let inter = (0..256).filter(|&i| gt[i] != 255 && gt[i] == c && pred[i] == c).count();
                let union = (0..256).filter(|&i| gt[i] != 255 && (gt[i] == c || pred[i] == c)).count();
                if union == 0 {
                    prop_assert_eq!(iou[c as usize], None);
                } else {
                    prop_assert_eq!(iou[c as usize], Some(inter as f64 / union as f64));
                }
            }
            prop_assert_eq!(cm.total(), 256);
        }

        #[test]
        fn accumulation_order_is_irrelevant(a in mask(), b in mask(), pa in prop::collection::vec(0u8..11, 256), pb in prop::collection::vec(0u8..11, 256)) {
            let mut x = ConfusionMatrix::new();
            x.accumulate(&pa, &a).unwrap();
            x.accumulate(&pb, &b).unwrap();
            let mut y = ConfusionMatrix::new();
            y.accumulate(&pb, &b).unwrap();
            y.accumulate(&pa, &a).unwrap();
            prop_assert_eq!(&x, &y);
            let mut z = cm_of(&pa, &a);
            z.merge(&cm_of(&pb, &b));
            prop_assert_eq!(&x, &z);
            prop_assert_eq!(x.total(), 512);
        }
    }
}
