//! Segment-overlap F1@k scoring and cross-validation aggregation.
//!
//! A predicted segment counts as correct when its same-class IoU with a
//! still-unmatched ground-truth segment reaches the threshold k. Matching is
//! greedy in predicted-segment order; an exhaustive optimal matcher is also
//! provided for cross-checking.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_model::{Segment, SegmentTimeline};
use crate::error::{Error, Result};

pub const STANDARD_K: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// IoU of two inclusive frame ranges, computed on frame counts.
pub fn segment_iou(a: &Segment, b: &Segment) -> f64 {
    let inter_start = a.start.max(b.start);
    let inter_end = a.end.min(b.end);
    let inter = if inter_start > inter_end {
        0
    } else {
        inter_end - inter_start + 1
    };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Greedy matcher in predicted-segment order: each prediction takes the
/// same-class ground-truth segment with maximal IoU; a hit needs IoU >= k and
/// an unmatched target. Unmatched ground truth counts as FN.
pub fn f1_at_k(pred: &SegmentTimeline, gt: &SegmentTimeline, k: f64) -> MatchCounts {
    assert!(k > 0.0 && k <= 1.0, "k must be in (0,1], got {k}");
    let mut matched = vec![false; gt.segments.len()];
    let mut counts = MatchCounts::default();
    for p in &pred.segments {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.segments.iter().enumerate() {
            if g.class != p.class {
                continue;
            }
            let iou = segment_iou(p, g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= k && !matched[j] => {
                matched[j] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = matched.iter().filter(|&&m| !m).count();
    counts
}

/// Exhaustive matcher maximizing TP under the same IoU >= k, same-class,
/// one-to-one constraints. Used to audit the greedy convention.
pub fn f1_at_k_optimal(pred: &SegmentTimeline, gt: &SegmentTimeline, k: f64) -> MatchCounts {
    let n = pred.segments.len();
    let mut allowed: Vec<Vec<usize>> = Vec::with_capacity(n);
    for p in &pred.segments {
        let mut row = Vec::new();
        for (j, g) in gt.segments.iter().enumerate() {
            if g.class == p.class && segment_iou(p, g) >= k {
                row.push(j);
            }
        }
        allowed.push(row);
    }
    fn assign(i: usize, allowed: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if i == allowed.len() {
            return 0;
        }
        // skip prediction i
        let mut best = assign(i + 1, allowed, used);
        for &j in &allowed[i] {
            if !used[j] {
                used[j] = true;
                best = best.max(1 + assign(i + 1, allowed, used));
                used[j] = false;
            }
        }
        best
    }
    let tp = assign(0, &allowed, &mut vec![false; gt.segments.len()]);
    MatchCounts {
        tp,
        fp: n - tp,
        fn_: gt.segments.len() - tp,
    }
}

/// Mean and sample (n-1) standard deviation; std is 0 for a single fold.
pub fn aggregate_folds(per_fold: &[f64]) -> Result<(f64, f64)> {
    if per_fold.is_empty() {
        return Err(Error::data("aggregate_folds: no folds"));
    }
    let n = per_fold.len() as f64;
    let mean = per_fold.iter().sum::<f64>() / n;
    if per_fold.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = per_fold.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// "65.1 ± 5.2"-style presentation of fold scores in percent.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", mean * 100.0, std * 100.0)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Joint,
    KnownSegmentation,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Joint => "joint",
            Task::KnownSegmentation => "known-segmentation",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Task::Joint),
            "known-segmentation" | "known_segmentation" => Ok(Task::KnownSegmentation),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }
}

/// One scored row: a (kind, k) cell at some scope.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub task: String,
    pub kind: String,
    pub k: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub fold: String,
}

/// F1@k tables per entity kind, with per-fold and aggregate scopes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct F1Report {
    pub rows: Vec<ReportRow>,
}

/// Per-video prediction/ground-truth pair for one entity kind.
pub struct ScoredTimeline {
    pub video_id: String,
    pub kind: String,
    pub pred: SegmentTimeline,
    pub gt: SegmentTimeline,
}

/// Pools counts per (kind, k) within each fold, then aggregates fold scores.
pub fn make_report(
    dataset: &str,
    task: Task,
    folds: &[(String, Vec<ScoredTimeline>)],
    expected_videos: &[String],
) -> Result<F1Report> {
    let mut seen: Vec<&str> = folds
        .iter()
        .flat_map(|(_, items)| items.iter().map(|s| s.video_id.as_str()))
        .collect();
    seen.sort_unstable();
    for v in expected_videos {
        if !seen.iter().any(|s| s == v) {
            return Err(Error::data(format!("missing prediction for video {v}")));
        }
    }
    let mut report = F1Report::default();
    // (kind, k-index) -> fold f1 values
    let mut fold_scores: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for (fold_name, items) in folds {
        let mut pooled: BTreeMap<(String, usize), MatchCounts> = BTreeMap::new();
        for item in items {
            for (ki, &k) in STANDARD_K.iter().enumerate() {
                let counts = f1_at_k(&item.pred, &item.gt, k);
                pooled
                    .entry((item.kind.clone(), ki))
                    .or_default()
                    .add(counts);
            }
        }
        for ((kind, ki), counts) in pooled {
            fold_scores
                .entry((kind.clone(), ki))
                .or_default()
                .push(counts.f1());
            report.rows.push(ReportRow {
                dataset: dataset.into(),
                task: task.as_str().into(),
                kind,
                k: STANDARD_K[ki],
                precision: counts.precision(),
                recall: counts.recall(),
                f1: counts.f1(),
                tp: counts.tp,
                fp: counts.fp,
                fn_: counts.fn_,
                fold: fold_name.clone(),
            });
        }
    }
    for ((kind, ki), scores) in fold_scores {
        let (mean, _std) = aggregate_folds(&scores)?;
        report.rows.push(ReportRow {
            dataset: dataset.into(),
            task: task.as_str().into(),
            kind,
            k: STANDARD_K[ki],
            precision: f64::NAN,
            recall: f64::NAN,
            f1: mean,
            tp: 0,
            fp: 0,
            fn_: 0,
            fold: "aggregate".into(),
        });
    }
    Ok(report)
}

impl F1Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,task,kind,k,precision,recall,f1,tp,fp,fn,fold\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.2},{:.6},{:.6},{:.6},{},{},{},{}",
                r.dataset, r.task, r.kind, r.k, r.precision, r.recall, r.f1, r.tp, r.fp, r.fn_, r.fold
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<F1Report> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(Error::data(format!("csv row {i}: expected 11 fields")));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::data(format!("csv row {i}: bad {what} '{s}'")))
            };
            rows.push(ReportRow {
                dataset: f[0].into(),
                task: f[1].into(),
                kind: f[2].into(),
                k: parse(f[3], "k")?,
                precision: parse(f[4], "precision")?,
                recall: parse(f[5], "recall")?,
                f1: parse(f[6], "f1")?,
                tp: f[7].parse().map_err(|_| Error::data("bad tp"))?,
                fp: f[8].parse().map_err(|_| Error::data("bad fp"))?,
                fn_: f[9].parse().map_err(|_| Error::data("bad fn"))?,
                fold: f[10].into(),
            });
        }
        Ok(F1Report { rows })
    }

    /// Aggregate-scope F1 for (kind, k), if present.
    pub fn aggregate_f1(&self, kind: &str, k: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.fold == "aggregate" && r.kind == kind && (r.k - k).abs() < 1e-9)
            .map(|r| r.f1)
    }
}


#[cfg(test)]
mod tests {
    use super::test_oracles::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tl(segs: &[(usize, usize, usize)]) -> SegmentTimeline {
        SegmentTimeline::new(
            segs.iter()
                .map(|&(start, end, class)| Segment { start, end, class })
                .collect(),
        )
    }

    #[test]
    fn perfect_prediction_scores_one_at_every_k() {
        let gt = tl(&[(0, 9, 0), (10, 19, 1), (20, 24, 0)]);
        for &k in &STANDARD_K {
            let c = f1_at_k(&gt, &gt, k);
            assert_eq!((c.tp, c.fp, c.fn_), (3, 0, 0));
            assert_eq!(c.f1(), 1.0);
        }
    }

    #[test]
    fn disjoint_classes_score_zero() {
        let gt = tl(&[(0, 9, 0)]);
        let pred = tl(&[(0, 9, 1)]);
        let c = f1_at_k(&pred, &gt, 0.1);
        assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
        assert_eq!(c.f1(), 0.0);
    }

    #[test]
    fn worked_example_matches_hand_iou() {
        // gt = [(0-9,A),(10-19,B)], pred = [(0-3,A),(4-19,B)]
        // IoU_A = 4/10 = 0.4, IoU_B = 10/16 = 0.625
        let gt = tl(&[(0, 9, 0), (10, 19, 1)]);
        let pred = tl(&[(0, 3, 0), (4, 19, 1)]);
        assert!((segment_iou(&pred.segments[0], &gt.segments[0]) - 0.4).abs() < 1e-12);
        assert!((segment_iou(&pred.segments[1], &gt.segments[1]) - 0.625).abs() < 1e-12);
        for &k in &[0.10, 0.25] {
            let c = f1_at_k(&pred, &gt, k);
            assert_eq!((c.tp, c.fp, c.fn_), (2, 0, 0), "k={k}");
            assert_eq!(c.f1(), 1.0);
        }
        let c = f1_at_k(&pred, &gt, 0.50);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 1));
        assert!((c.f1() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_gt_makes_all_predictions_fp() {
        let gt = tl(&[]);
        let pred = tl(&[(0, 4, 0), (5, 9, 1)]);
        let c = f1_at_k(&pred, &gt, 0.5);
        assert_eq!((c.tp, c.fp, c.fn_), (0, 2, 0));
    }

    #[test]
    fn greedy_equals_brute_force_on_random_timelines() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let gt = random_timeline(&mut rng, 60, 8, 5);
            let pred = random_timeline(&mut rng, 60, 8, 5);
            for &k in &STANDARD_K {
                let a = f1_at_k(&pred, &gt, k);
                let b = brute_force_greedy(&pred, &gt, k);
                assert_eq!(a, b, "k={k} pred={pred:?} gt={gt:?}");
            }
        }
    }

    #[test]
    fn greedy_never_beats_optimal_and_gaps_are_logged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut gaps = 0usize;
        let mut total = 0usize;
        for _ in 0..1000 {
            let gt = random_timeline(&mut rng, 60, 8, 5);
            let pred = random_timeline(&mut rng, 60, 8, 5);
            for &k in &STANDARD_K {
                total += 1;
                let g = f1_at_k(&pred, &gt, k);
                let o = f1_at_k_optimal(&pred, &gt, k);
                assert!(g.tp <= o.tp, "greedy exceeded optimal");
                if g.tp != o.tp {
                    gaps += 1;
                }
            }
        }
        println!("greedy-vs-optimal gap cases: {gaps}/{total}");
        assert!(gaps * 20 < total, "greedy diverges from optimal too often");
    }

    #[test]
    fn tp_monotonically_non_increasing_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..300 {
            let gt = random_timeline(&mut rng, 50, 6, 4);
            let pred = random_timeline(&mut rng, 50, 6, 4);
            let mut last_tp = usize::MAX;
            let mut last_f1 = f64::INFINITY;
            for &k in &STANDARD_K {
                let c = f1_at_k(&pred, &gt, k);
                assert!(c.tp <= last_tp);
                assert!(c.f1() <= last_f1 + 1e-12);
                last_tp = c.tp;
                last_f1 = c.f1();
            }
        }
    }

    #[test]
    fn aggregate_folds_examples() {
        assert_eq!(aggregate_folds(&[0.4]).unwrap(), (0.4, 0.0));
        let (mean, std) = aggregate_folds(&[0.6, 0.7]).unwrap();
        assert!((mean - 0.65).abs() < 1e-12);
        assert!((std - 0.07071067811865475).abs() < 1e-9);
        let (_, std) = aggregate_folds(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(std, 0.0);
    }

    #[test]
    fn format_matches_table_style() {
        assert_eq!(format_mean_std(0.651, 0.052), "65.1 ± 5.2");
    }

    #[test]
    fn report_pools_counts_and_round_trips_csv() {
        let gt = tl(&[(0, 9, 0), (10, 19, 1)]);
        let folds = vec![(
            "fold0".to_string(),
            vec![ScoredTimeline {
                video_id: "v0".into(),
                kind: "human".into(),
                pred: gt.clone(),
                gt: gt.clone(),
            }],
        )];
        let report = make_report("synth", Task::Joint, &folds, &["v0".to_string()]).unwrap();
        for &k in &STANDARD_K {
            assert_eq!(report.aggregate_f1("human", k), Some(1.0));
        }
        let csv = report.to_csv();
        let parsed = F1Report::from_csv(&csv).unwrap();
        assert_eq!(parsed.rows.len(), report.rows.len());
        for (a, b) in parsed.rows.iter().zip(&report.rows) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.tp, b.tp);
            assert!((a.f1 - b.f1).abs() < 1e-6);
        }
    }

    #[test]
    fn report_rejects_missing_video() {
        let folds = vec![("fold0".to_string(), vec![])];
        let err = make_report("synth", Task::Joint, &folds, &["v9".to_string()]).unwrap_err();
        assert!(err.to_string().contains("v9"));
    }
}
