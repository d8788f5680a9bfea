use crate::dataio::PointCloud;
use crate::error::{Error, Result};

/// Confusion counts with rows indexed by ground truth and columns by
/// prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Metrics {
    pub num_classes: usize,
    pub confusion: Vec<u64>,
}

impl Metrics {
    pub fn new(num_classes: usize) -> Self {
        Metrics {
            num_classes,
            confusion: vec![0; num_classes * num_classes],
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.confusion[gt * self.num_classes + pred]
    }

    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        self.accumulate_masked(pred, gt, None)
    }

    /// Adds the pairs whose mask entry is set (all pairs without a mask).
    /// Nothing is counted if any index is out of range.
    pub fn accumulate_masked(&mut self, pred: &[usize], gt: &[usize], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
            return Err(Error::data(format!(
                "{} predictions against {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        let l = self.num_classes;
        if let Some(i) = (0..gt.len()).find(|&i| pred[i] >= l || gt[i] >= l) {
            return Err(Error::data(format!(
                "point {i}: prediction {} / label {} outside 0..{l}",
                pred[i], gt[i]
            )));
        }
        for i in 0..gt.len() {
            if mask.is_none_or(|m| m[i]) {
                self.confusion[gt[i] * l + pred[i]] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Metrics) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::data("cannot merge metrics over different class counts"));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from both
    /// ground truth and predictions.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let l = self.num_classes;
        (0..l)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..l).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let fp: u64 = (0..l).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over present classes; 0 when nothing was evaluated.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Twenty well-separated colors; longer palettes cycle with a brightness
/// shift.
pub fn default_palette(len: usize) -> Vec<[f64; 3]> {
    const BASE: [[u8; 3]; 20] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
        [128, 128, 0],
        [255, 215, 180],
        [0, 0, 128],
        [128, 128, 128],
    ];
    (0..len)
        .map(|i| {
            let scale = 1.0 / (1 + i / BASE.len()) as f64;
            BASE[i % BASE.len()].map(|c| c as f64 / 255.0 * scale)
        })
        .collect()
}

/// Copy of `cloud` whose first three channels are the palette color of
/// each point's predicted class; a cloud without rgb gains it.
pub fn colorize_predictions(cloud: &PointCloud, pred: &[usize], palette: &[[f64; 3]]) -> Result<PointCloud> {
    if pred.len() != cloud.len() {
        return Err(Error::data(format!("{} predictions for {} points", pred.len(), cloud.len())));
    }
    let needed = pred.iter().max().map_or(0, |&m| m + 1).max(cloud.num_classes);
    if palette.len() < needed {
        return Err(Error::contract(format!("palette has {} colors, need {needed}", palette.len())));
    }
    let f0 = cloud.f0.max(3);
    let mut features = Vec::with_capacity(cloud.len() * f0);
    for (i, &p) in pred.iter().enumerate() {
        features.extend_from_slice(&palette[p]);
        if cloud.f0 > 3 {
            features.extend_from_slice(&cloud.feature_row(i)[3..]);
        }
    }
    let out = PointCloud {
        xyz: cloud.xyz.clone(),
        features,
        f0,
        labels: cloud.labels.clone(),
        num_classes: cloud.num_classes,
        class_names: cloud.class_names.clone(),
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let gt = [0, 1, 2, 2, 1, 0, 0, 1, 2, 2];
        let mut m = Metrics::new(4);
        m.accumulate(&gt, &gt).unwrap();
        assert_eq!(m.overall_accuracy(), 1.0);
        assert_eq!(m.per_class_iou(), vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(m.mean_iou(), 1.0);
    }

    #[test]
    fn hand_worked_confusion() {
        let mut m = Metrics::new(2);
        m.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.confusion, vec![1, 1, 0, 2]);
        assert_eq!(m.per_class_iou(), vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m.mean_iou() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.overall_accuracy(), 0.75);
    }

    #[test]
    fn empty_input_changes_nothing() {
        let mut m = Metrics::new(3);
        m.accumulate(&[], &[]).unwrap();
        assert_eq!(m, Metrics::new(3));
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let mut m = Metrics::new(3);
        m.accumulate(&[1, 2, 0], &[0, 1, 2]).unwrap();
        assert_eq!(m.mean_iou(), 0.0);
    }

    #[test]
    fn out_of_range_is_data_error() {
        let mut m = Metrics::new(2);
        assert!(matches!(m.accumulate(&[0, 2], &[0, 1]), Err(Error::Data(_))));
        assert_eq!(m.total(), 0);
    }

    #[test]
    fn palette_colors_follow_predictions() {
        let cloud = PointCloud::unlabeled(vec![[0.0; 3]; 4], vec![0.1; 12], 3).unwrap();
        let red_blue = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let pred = [0, 1, 1, 0];
        let out = colorize_predictions(&cloud, &pred, &red_blue).unwrap();
        for (i, &p) in pred.iter().enumerate() {
            assert_eq!(out.feature_row(i), &red_blue[p]);
        }
        assert_eq!(PointCloud::parse(&out.to_text()).unwrap(), out);
        assert!(matches!(colorize_predictions(&cloud, &[0, 1, 2, 0], &red_blue), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn order_does_not_matter(pairs in prop::collection::vec((0usize..5, 0usize..5), 0..60), seed in any::<u64>()) {
            let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let mut a = Metrics::new(5);
            a.accumulate(&pred, &gt).unwrap();
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            use rand::{seq::SliceRandom, SeedableRng};
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut b = Metrics::new(5);
            b.accumulate(&order.iter().map(|&i| pred[i]).collect::<Vec<_>>(), &order.iter().map(|&i| gt[i]).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(&a, &b);
            let trace: u64 = (0..5).map(|c| a.count(c, c)).sum();
            if a.total() > 0 {
                prop_assert_eq!(a.overall_accuracy(), trace as f64 / a.total() as f64);
            }
        }
    }
}
