//! Time-bin confusion metrics and event-level IoU.

use serde::{Deserialize, Serialize};

use crate::dataset::SoundEvent;
use crate::error::{Error, Result};
use crate::inference::{covered_bins, IntervalSet};
use crate::nn::interval_iou;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1_score: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// Zero denominators give 0, and F1 is 0 when precision + recall is 0.
    pub fn metrics(&self) -> BinMetrics {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1_score = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        BinMetrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision,
            recall,
            specificity: ratio(self.tn, self.tn + self.fp),
            f1_score,
        }
    }
}

/// Bins whose centre lies in some interval.
pub fn binary_mask(intervals: &IntervalSet, n_bins: usize, time_bins_per_s: u32) -> Vec<bool> {
    let mut mask = vec![false; n_bins];
    for &(s, e) in intervals.as_slice() {
        let (lo, hi) = covered_bins(s, e, n_bins, time_bins_per_s);
        mask[lo..hi].iter_mut().for_each(|m| *m = true);
    }
    mask
}

pub fn events_to_intervals(events: &[SoundEvent]) -> IntervalSet {
    IntervalSet::from_intervals(events.iter().map(|e| (e.start_s, e.end_s)).collect())
}

pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::MaskLength { pred: pred.len(), truth: truth.len() });
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn classification_metrics(pred: &[bool], truth: &[bool]) -> Result<BinMetrics> {
    Ok(confusion(pred, truth)?.metrics())
}

/// Best IoU of each event against any predicted interval, summed.
pub fn event_iou_sum(pred: &IntervalSet, events: &[SoundEvent]) -> f64 {
    events
        .iter()
        .map(|ev| {
            pred.as_slice()
                .iter()
                .map(|&(s, e)| interval_iou((ev.center(), ev.duration()), ((s + e) / 2.0, e - s)))
                .fold(0.0, f64::max)
        })
        .sum()
}

/// Mean over events of the best IoU against any predicted interval; 0
/// without events.
pub fn avg_event_iou(pred: &IntervalSet, events: &[SoundEvent]) -> f64 {
    if events.is_empty() {
        0.0
    } else {
        event_iou_sum(pred, events) / events.len() as f64
    }
}

/// Corpus-level totals: bin counts and event IoUs pooled over recordings.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub iou_sum: f64,
    pub n_events: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(flatten)]
    pub bins: BinMetrics,
    pub avg_iou: f64,
}

impl Evaluation {
    pub fn add_recording(&mut self, pred: &IntervalSet, events: &[SoundEvent], n_bins: usize, time_bins_per_s: u32) {
        let p = binary_mask(pred, n_bins, time_bins_per_s);
        let t = binary_mask(&events_to_intervals(events), n_bins, time_bins_per_s);
        self.counts.add(&confusion(&p, &t).expect("masks share n_bins"));
        self.iou_sum += event_iou_sum(pred, events);
        self.n_events += events.len() as u64;
    }

    pub fn row(&self) -> MetricsRow {
        let avg_iou = if self.n_events == 0 { 0.0 } else { self.iou_sum / self.n_events as f64 };
        MetricsRow { bins: self.counts.metrics(), avg_iou }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SoundKind;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn ev(s: f64, e: f64) -> SoundEvent {
        SoundEvent::new(s, e, SoundKind::SingleBurst)
    }

    #[test]
    fn mask_examples() {
        assert!(binary_mask(&IntervalSet::default(), 100, 630).iter().all(|m| !m));
        assert!(binary_mask(&IntervalSet::from_intervals(vec![(0.0, 2.0)]), 1260, 630).iter().all(|m| *m));
        let m = binary_mask(&IntervalSet::from_intervals(vec![(0.1, 0.2)]), 1260, 630);
        let set: Vec<usize> = (0..1260).filter(|t| m[*t]).collect();
        assert_eq!(set, (63..=125).collect::<Vec<_>>());
    }

    #[test]
    fn metric_examples() {
        let gt: Vec<bool> = (0..100).map(|i| i % 7 < 2).collect();
        let m = classification_metrics(&gt, &gt).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.specificity, m.f1_score), (1.0, 1.0, 1.0, 1.0, 1.0));
        let inv: Vec<bool> = gt.iter().map(|v| !v).collect();
        let m = classification_metrics(&inv, &gt).unwrap();
        assert_eq!((m.accuracy, m.f1_score), (0.0, 0.0));
        let m = classification_metrics(&[false; 100], &gt).unwrap();
        assert_eq!((m.recall, m.specificity, m.precision), (0.0, 1.0, 0.0));
        assert!(matches!(classification_metrics(&[true], &[true, false]), Err(Error::MaskLength { pred: 1, truth: 2 })));
    }

    #[test]
    fn iou_examples() {
        let gt = [ev(0.0, 1.0)];
        assert_eq!(avg_event_iou(&events_to_intervals(&gt), &gt), 1.0);
        assert_eq!(avg_event_iou(&IntervalSet::default(), &gt), 0.0);
        let pred = IntervalSet::from_intervals(vec![(0.5, 1.5), (2.0, 3.0)]);
        assert!((avg_event_iou(&pred, &gt) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(avg_event_iou(&pred, &[]), 0.0);
    }

    proptest! {
        #[test]
        fn iou_is_order_invariant_and_monotone(
            raw in proptest::collection::vec((0.0f64..5.0, 0.01f64..0.5), 1..6),
            events in proptest::collection::vec((0.0f64..5.0, 0.01f64..0.3), 1..5),
            cand in (0.0f64..5.0, 0.01f64..0.5),
            which in 0usize..6,
        ) {
            let events: Vec<SoundEvent> = events.into_iter().map(|(s, l)| ev(s, s + l)).collect();
            let ivs: Vec<(f64, f64)> = raw.iter().map(|(s, l)| (*s, s + l)).collect();
            let mut rev = ivs.clone();
            rev.reverse();
            let a = IntervalSet::from_intervals(ivs);
            prop_assert_eq!(avg_event_iou(&a, &events), avg_event_iou(&IntervalSet::from_intervals(rev), &events));

            let i = which % a.len();
            let old = a.as_slice()[i];
            let new = (cand.0, cand.0 + cand.1);
            let iou = |(s, e): (f64, f64), ev: &SoundEvent| interval_iou((ev.center(), ev.duration()), ((s + e) / 2.0, e - s));
            let mut replaced = a.as_slice().to_vec();
            replaced[i] = new;
            let b = IntervalSet::from_intervals(replaced.clone());
            let still_canonical = b.len() == replaced.len();
            if still_canonical && events.iter().all(|e| iou(new, e) >= iou(old, e)) {
                prop_assert!(avg_event_iou(&b, &events) >= avg_event_iou(&a, &events));
            }
        }
    }
}
