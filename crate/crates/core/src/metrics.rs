//! Segmentation evaluation: confusion matrix, per-class IoU, mean IoU, and
//! pixel accuracy. Matrices merge by elementwise addition.

use crate::error::{Error, Result};
use crate::image::{LabelMap, IGNORE_LABEL};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// counts[truth * classes + pred]
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one prediction/truth pair; ignore-sentinel truth pixels are
    /// skipped.
    pub fn update(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::Shape(format!(
                "confusion_update: pred {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= self.classes || p as usize >= self.classes {
                return Err(Error::Data(format!(
                    "confusion_update: class id out of range (pred {p}, truth {t}, C={})",
                    self.classes
                )));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class; `None` for classes absent from both prediction and truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..self.classes)
                    .filter(|&t| t != c)
                    .map(|t| self.count(t, c))
                    .sum();
                let fneg: u64 = (0..self.classes)
                    .filter(|&p| p != c)
                    .map(|p| self.count(c, p))
                    .sum();
                let denom = tp + fp + fneg;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes present in prediction or truth.
    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Data("miou: empty confusion matrix".into()));
        }
        let ious: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("pixel_accuracy: empty confusion matrix".into()));
        }
        let trace: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Evaluation report CSV: `class,id,iou` rows plus summary rows.
    pub fn report_csv(&self, class_names: &[&str]) -> Result<String> {
        let mut s = String::from("class,id,iou\n");
        for (id, iou) in self.iou_per_class().iter().enumerate() {
            let name = class_names.get(id).copied().unwrap_or("?");
            match iou {
                Some(v) => s.push_str(&format!("{name},{id},{v}\n")),
                None => s.push_str(&format!("{name},{id},\n")),
            }
        }
        s.push_str(&format!("miou,,{}\n", self.miou()?));
        s.push_str(&format!("pixel_acc,,{}\n", self.pixel_accuracy()?));
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(h: usize, w: usize, data: &[u8]) -> LabelMap {
        LabelMap::new(h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let truth = labels(2, 2, &[0, 1, 1, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&truth, &truth).unwrap();
        assert_eq!(cm.total(), 4);
        assert!(cm.iou_per_class().iter().all(|i| i.unwrap() == 1.0));
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn ignored_pixels_skipped_and_one_mismatch() {
        let truth = labels(2, 2, &[0, 255, 255, 255]);
        let pred = labels(2, 2, &[1, 0, 0, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &truth).unwrap();
        assert_eq!(cm.total(), 1);
        assert_eq!(cm.count(0, 1), 1);

        let mut cm2 = ConfusionMatrix::new(2);
        let all_ignored = labels(2, 2, &[255; 4]);
        cm2.update(&pred, &all_ignored).unwrap();
        assert_eq!(cm2.total(), 0);
        assert!(cm2.miou().is_err());
    }

    #[test]
    fn disjoint_prediction_gives_zero_iou() {
        let truth = labels(1, 4, &[0, 0, 0, 0]);
        let pred = labels(1, 4, &[1, 1, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &truth).unwrap();
        assert_eq!(cm.iou_per_class()[0], Some(0.0));
    }

    #[test]
    fn hand_enumerated_counts() {
        // cm = [[3,1],[2,4]]
        let mut cm = ConfusionMatrix::new(2);
        let truth = labels(1, 10, &[0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        let pred = labels(1, 10, &[0, 0, 0, 1, 0, 0, 1, 1, 1, 1]);
        cm.update(&pred, &truth).unwrap();
        assert_eq!(cm.count(0, 0), 3);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 2);
        assert_eq!(cm.count(1, 1), 4);
        let ious = cm.iou_per_class();
        assert!((ious[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((ious[1].unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert!((cm.pixel_accuracy().unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn class_permutation_permutes_iou() {
        let truth = labels(1, 6, &[0, 0, 1, 1, 2, 2]);
        let pred = labels(1, 6, &[0, 1, 1, 1, 2, 0]);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&pred, &truth).unwrap();
        // permutation 0->2, 1->0, 2->1
        let perm = |l: &LabelMap| {
            let data: Vec<u8> = l.data().iter().map(|&v| [2u8, 0, 1][v as usize]).collect();
            LabelMap::new(l.height, l.width, data).unwrap()
        };
        let mut cmp = ConfusionMatrix::new(3);
        cmp.update(&perm(&pred), &perm(&truth)).unwrap();
        let a = cm.iou_per_class();
        let b = cmp.iou_per_class();
        assert_eq!(a[0], b[2]);
        assert_eq!(a[1], b[0]);
        assert_eq!(a[2], b[1]);
        assert!((cm.miou().unwrap() - cmp.miou().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_excluded_from_mean() {
        let truth = labels(1, 2, &[0, 0]);
        let pred = labels(1, 2, &[0, 0]);
        let mut cm = ConfusionMatrix::new(5);
        cm.update(&pred, &truth).unwrap();
        assert_eq!(cm.iou_per_class()[3], None);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }
}
