//! Evaluation metrics for frame-wise segmentation output: frame accuracy,
//! segmental edit score, and segmental overlap F1 at a set of IoU
//! thresholds.
//!
//! Everything here is a pure function of label sequences, so evaluation can
//! fan out across threads freely.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label sequences differ in length: prediction {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("sequences must be non-empty")]
    EmptySequence,
    #[error("IoU threshold must be in (0, 1]; got {0}")]
    InvalidThreshold(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// The three overlap thresholds reported as F1@10, F1@25, and F1@50.
pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// A maximal run of consecutive frames sharing one label; `end` is
/// exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Splits a frame-label sequence into its maximal constant runs, in
/// temporal order. An empty input yields an empty list.
pub fn extract_segments(labels: &[usize]) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            segments.push(Segment {
                label: labels[start],
                start,
                end: t,
            });
            start = t;
        }
    }
    segments
}

/// Percentage of frames where prediction and ground truth agree.
pub fn framewise_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * correct as f64 / gt.len() as f64)
}

/// Segmental edit score: `100 * (1 - d / max(|P|, |G|))` where `d` is the
/// Levenshtein distance between the two segment-label strings. Durations
/// are irrelevant; only the order of segment labels matters.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let p: Vec<usize> = extract_segments(pred).iter().map(|s| s.label).collect();
    let g: Vec<usize> = extract_segments(gt).iter().map(|s| s.label).collect();
    let d = levenshtein(&p, &g);
    let norm = p.len().max(g.len()) as f64;
    Ok((100.0 * (1.0 - d as f64 / norm)).max(0.0))
}

// Classic two-row dynamic program.
fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ai != bj);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Match counts behind an F1 value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct F1Counts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl F1Counts {
    pub fn merge(&mut self, other: &F1Counts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }

    /// `200 * precision * recall / (precision + recall)`, defined as 0 when
    /// there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.true_positives == 0 {
            return 0.0;
        }
        let tp = self.true_positives as f64;
        let precision = tp / (tp + self.false_positives as f64);
        let recall = tp / (tp + self.false_negatives as f64);
        200.0 * precision * recall / (precision + recall)
    }
}

fn interval_iou(a: &Segment, b: &Segment) -> f64 {
    if a.label != b.label {
        return 0.0;
    }
    let intersection = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - intersection;
    intersection as f64 / union as f64
}

/// Segment-level F1 at IoU threshold `tau`.
///
/// Predicted segments are matched greedily in temporal order: each takes the
/// ground-truth segment with the highest same-label IoU (lowest index on
/// ties) and counts as a true positive when that IoU reaches `tau` and the
/// ground-truth segment is still unclaimed; otherwise it is a false
/// positive. Unclaimed ground-truth segments are the false negatives.
pub fn f1_at_k(pred: &[Segment], gt: &[Segment], tau: f64) -> Result<(f64, F1Counts)> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(MetricsError::InvalidThreshold(tau));
    }
    let mut matched = vec![false; gt.len()];
    let mut counts = F1Counts::default();
    for p in pred {
        let mut best = 0.0;
        let mut best_index = None;
        for (g_index, g) in gt.iter().enumerate() {
            let iou = interval_iou(p, g);
            if iou > best {
                best = iou;
                best_index = Some(g_index);
            }
        }
        match best_index {
            Some(g_index) if best >= tau && !matched[g_index] => {
                matched[g_index] = true;
                counts.true_positives += 1;
            }
            _ => counts.false_positives += 1,
        }
    }
    counts.false_negatives = matched.iter().filter(|&&m| !m).count();
    Ok((counts.f1(), counts))
}

/// One video's scores across all three metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub edit: f64,
    /// F1 per threshold, in [`F1_THRESHOLDS`] order.
    pub f1: [f64; 3],
    pub counts: [F1Counts; 3],
}

/// Runs all three metrics on one prediction / ground-truth pair.
pub fn evaluate(pred: &[usize], gt: &[usize]) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let accuracy = framewise_accuracy(pred, gt)?;
    let edit = edit_score(pred, gt)?;
    let pred_segments = extract_segments(pred);
    let gt_segments = extract_segments(gt);
    let mut f1 = [0.0; 3];
    let mut counts = [F1Counts::default(); 3];
    for (i, &tau) in F1_THRESHOLDS.iter().enumerate() {
        let (score, c) = f1_at_k(&pred_segments, &gt_segments, tau)?;
        f1[i] = score;
        counts[i] = c;
    }
    Ok(EvalReport {
        accuracy,
        edit,
        f1,
        counts,
    })
}

/// Accumulates per-video results into dataset-level numbers: frame accuracy
/// pools frames, F1 pools match counts, and edit averages per-video scores.
#[derive(Debug, Default)]
pub struct DatasetEval {
    correct_frames: usize,
    total_frames: usize,
    edit_sum: f64,
    videos: usize,
    counts: [F1Counts; 3],
}

impl DatasetEval {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scores one video, folds it into the dataset totals, and returns the
    /// per-video report.
    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<EvalReport> {
        let report = evaluate(pred, gt)?;
        self.correct_frames += pred.iter().zip(gt).filter(|(p, g)| p == g).count();
        self.total_frames += gt.len();
        self.edit_sum += report.edit;
        self.videos += 1;
        for (mine, theirs) in self.counts.iter_mut().zip(&report.counts) {
            mine.merge(theirs);
        }
        Ok(report)
    }

    pub fn videos(&self) -> usize {
        self.videos
    }

    /// Dataset-level report. Panics if no video was added.
    pub fn report(&self) -> EvalReport {
        assert!(self.videos > 0, "no videos were evaluated");
        let f1 = [
            self.counts[0].f1(),
            self.counts[1].f1(),
            self.counts[2].f1(),
        ];
        EvalReport {
            accuracy: 100.0 * self.correct_frames as f64 / self.total_frames as f64,
            edit: self.edit_sum / self.videos as f64,
            f1,
            counts: self.counts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn segments_basic_cases() {
        assert_eq!(
            extract_segments(&[0, 0, 1]),
            vec![
                Segment { label: 0, start: 0, end: 2 },
                Segment { label: 1, start: 2, end: 3 },
            ]
        );
        assert_eq!(
            extract_segments(&[2, 2, 2]),
            vec![Segment { label: 2, start: 0, end: 3 }]
        );
        assert_eq!(extract_segments(&[]), vec![]);
    }

    #[test]
    fn segments_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..200 {
            let len = rng.random_range(1..60);
            let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
            let segments = extract_segments(&labels);
            // segments tile [0, T) and adjacent segments differ
            assert_eq!(segments[0].start, 0);
            assert_eq!(segments.last().unwrap().end, len);
            for pair in segments.windows(2) {
                assert_eq!(pair[0].end, pair[1].start);
                assert_ne!(pair[0].label, pair[1].label);
            }
            let mut rebuilt = Vec::with_capacity(len);
            for s in &segments {
                rebuilt.extend(std::iter::repeat(s.label).take(s.len()));
            }
            assert_eq!(rebuilt, labels);
        }
    }

    #[test]
    fn accuracy_simple_values() {
        assert_eq!(framewise_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(framewise_accuracy(&[1, 2, 0, 0], &[1, 2, 3, 4]).unwrap(), 50.0);
        assert_eq!(framewise_accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(matches!(
            framewise_accuracy(&[1], &[1, 2]),
            Err(MetricsError::LengthMismatch { pred: 1, gt: 2 })
        ));
    }

    #[test]
    fn edit_score_examples() {
        assert_eq!(edit_score(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 100.0);
        // segment strings one apart: [A,B] vs [A,B,A] -> 1/3 missing -> 66.67
        let gt = [0, 0, 1, 1, 0, 0];
        let pred = [0, 0, 0, 1, 1, 1];
        let score = edit_score(&pred, &gt).unwrap();
        assert!((score - 66.0 - 2.0 / 3.0).abs() < 1e-9, "{score}");
        // the DP itself on raw strings
        assert_eq!(levenshtein(&[0, 0], &[0, 1, 0]), 1);
        assert_eq!(levenshtein(&[], &[1, 2, 3]), 3);
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein(&[1, 4, 3], &[1, 2, 3]), 1);
        // single segments with different labels
        assert_eq!(edit_score(&[5, 5, 5], &[3, 3, 3]).unwrap(), 0.0);
        // empty prediction against non-empty ground truth
        assert_eq!(edit_score(&[], &[1, 2]).unwrap(), 0.0);
        assert!(matches!(edit_score(&[1], &[]), Err(MetricsError::EmptyGroundTruth)));
    }

    #[test]
    fn edit_score_symmetry_and_rescaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..100 {
            let len_a = rng.random_range(1..30);
            let len_b = rng.random_range(1..30);
            let a: Vec<usize> = (0..len_a).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<usize> = (0..len_b).map(|_| rng.random_range(0..3)).collect();
            // symmetric even for different lengths (edit works on segments)
            assert_eq!(edit_score(&a, &b).unwrap(), edit_score(&b, &a).unwrap());
            // doubling every frame's duration changes nothing
            let stretch = |v: &[usize]| -> Vec<usize> {
                v.iter().flat_map(|&l| [l, l]).collect()
            };
            assert_eq!(
                edit_score(&a, &b).unwrap(),
                edit_score(&stretch(&a), &stretch(&b)).unwrap()
            );
        }
    }

    #[test]
    fn f1_hand_cases() {
        let gt = [Segment { label: 0, start: 0, end: 100 }];
        let pred = [Segment { label: 0, start: 0, end: 60 }];
        // IoU = 60/100 = 0.6
        let (f1, counts) = f1_at_k(&pred, &gt, 0.5).unwrap();
        assert_eq!(
            counts,
            F1Counts { true_positives: 1, false_positives: 0, false_negatives: 0 }
        );
        assert_eq!(f1, 100.0);
        let (f1, counts) = f1_at_k(&pred, &gt, 0.75).unwrap();
        assert_eq!(
            counts,
            F1Counts { true_positives: 0, false_positives: 1, false_negatives: 1 }
        );
        assert_eq!(f1, 0.0);

        // exact match at every threshold
        for tau in F1_THRESHOLDS {
            let (f1, _) = f1_at_k(&gt, &gt, tau).unwrap();
            assert_eq!(f1, 100.0);
        }

        // no predictions
        let (f1, counts) = f1_at_k(&[], &gt, 0.5).unwrap();
        assert_eq!(f1, 0.0);
        assert_eq!(counts.false_negatives, 1);

        assert!(matches!(
            f1_at_k(&pred, &gt, 0.0),
            Err(MetricsError::InvalidThreshold(_))
        ));
        assert!(f1_at_k(&pred, &gt, 1.0).is_ok());
    }

    #[test]
    fn f1_label_must_match() {
        let gt = [Segment { label: 1, start: 0, end: 50 }];
        let pred = [Segment { label: 2, start: 0, end: 50 }];
        let (f1, counts) = f1_at_k(&pred, &gt, 0.1).unwrap();
        assert_eq!(f1, 0.0);
        assert_eq!(counts.false_positives, 1);
        assert_eq!(counts.false_negatives, 1);
    }

    #[test]
    fn f1_each_gt_segment_matches_once() {
        let gt = [Segment { label: 0, start: 0, end: 100 }];
        let pred = [
            Segment { label: 0, start: 0, end: 55 },
            Segment { label: 0, start: 55, end: 100 },
        ];
        // both overlap the single gt segment above tau=0.1; only the first
        // (greedy order) claims it
        let (_, counts) = f1_at_k(&pred, &gt, 0.1).unwrap();
        assert_eq!(
            counts,
            F1Counts { true_positives: 1, false_positives: 1, false_negatives: 0 }
        );
    }

    #[test]
    fn f1_monotone_in_tau() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let len = rng.random_range(2..50);
            let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
            let gt: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
            let ps = extract_segments(&pred);
            let gs = extract_segments(&gt);
            let mut prev = f64::INFINITY;
            for tau in [0.05, 0.1, 0.25, 0.5, 0.75, 1.0] {
                let (f1, _) = f1_at_k(&ps, &gs, tau).unwrap();
                assert!(f1 <= prev + 1e-12, "F1 rose from {prev} to {f1} at tau {tau}");
                prev = f1;
            }
        }
    }

    #[test]
    fn evaluate_perfect_and_oversegmented() {
        let gt = vec![0usize; 50];
        let report = evaluate(&gt, &gt).unwrap();
        assert_eq!(report.accuracy, 100.0);
        assert_eq!(report.edit, 100.0);
        assert_eq!(report.f1, [100.0, 100.0, 100.0]);

        // one wrong frame inside a long run splits the prediction into
        // three segments: accuracy stays high, edit and F1 drop hard
        let mut pred = gt.clone();
        pred[25] = 1;
        let report = evaluate(&pred, &gt).unwrap();
        assert_eq!(report.accuracy, 98.0);
        assert!((report.edit - 100.0 / 3.0).abs() < 1e-9);
        // pred segments: [0]x25, [1]x1, [0]x24 vs one gt segment: the first
        // claims it (IoU 0.5), the others are false positives
        assert_eq!(
            report.counts[0],
            F1Counts { true_positives: 1, false_positives: 2, false_negatives: 0 }
        );
        for (i, &tau) in F1_THRESHOLDS.iter().enumerate() {
            let expected = if tau <= 0.5 { report.counts[i].f1() } else { 0.0 };
            assert_eq!(report.f1[i], expected);
        }
    }

    #[test]
    fn report_f1_consistent_with_counts() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..50 {
            let len = rng.random_range(1..40);
            let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
            let gt: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
            let report = evaluate(&pred, &gt).unwrap();
            for i in 0..3 {
                assert_eq!(report.f1[i], report.counts[i].f1());
            }
        }
    }

    #[test]
    fn dataset_aggregation_rules() {
        let mut agg = DatasetEval::new();
        // video 1: 10 frames, all correct
        let a = vec![0usize; 10];
        agg.add(&a, &a).unwrap();
        // video 2: 30 frames, all wrong, different segment structure
        let pred = vec![1usize; 30];
        let gt = vec![2usize; 30];
        agg.add(&pred, &gt).unwrap();
        let report = agg.report();
        // accuracy pools frames: 10 of 40
        assert_eq!(report.accuracy, 25.0);
        // edit averages per video: (100 + 0) / 2
        assert_eq!(report.edit, 50.0);
        // F1 pools counts: video1 tp=1, video2 fp=1 fn=1 at every tau
        assert_eq!(
            report.counts[2],
            F1Counts { true_positives: 1, false_positives: 1, false_negatives: 1 }
        );
        let expected = 200.0 * 0.5 * 0.5 / 1.0;
        assert_eq!(report.f1[2], expected);
        assert_eq!(agg.videos(), 2);
    }
}
