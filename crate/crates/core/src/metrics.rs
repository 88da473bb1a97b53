//! Objective metrics: maximal per-frame error (MVE / MBE), its lip-region
//! restriction (LVE / LBE), upper-face dynamics deviation (FDD), pairwise
//! diversity, per-vertex motion statistics and animation-graph tables.
//!
//! Every metric works on groups: a vertex is a 3-vector of columns, a rig
//! control a single column. Standard deviations divide by the number of
//! frames.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::data::{AnimationSequence, MotionKind, RegionMask};
use crate::error::{Error, Result};

/// Human-readable scale of each metric, as used in published tables.
pub const MVE_SCALE: f64 = 1e-3;
pub const LVE_SCALE: f64 = 1e-4;
pub const FDD_SCALE: f64 = 1e-5;
pub const DIVERSITY_SCALE: f64 = 1e-3;

fn group_norm(a: ArrayView1<f64>, b: ArrayView1<f64>, group: usize, g: usize) -> f64 {
    (0..group)
        .map(|k| {
            let d = a[g * group + k] - b[g * group + k];
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn magnitude(a: ArrayView1<f64>, group: usize, g: usize) -> f64 {
    (0..group).map(|k| a[g * group + k].powi(2)).sum::<f64>().sqrt()
}

fn population_mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_pair(pred: &AnimationSequence, gt: &AnimationSequence) -> Result<()> {
    if pred.kind() != gt.kind() {
        return Err(Error::Contract(format!(
            "cannot compare {} with {}",
            pred.kind().name(),
            gt.kind().name()
        )));
    }
    if pred.frames().dim() != gt.frames().dim() {
        return Err(Error::Contract(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.frames().dim(),
            gt.frames().dim()
        )));
    }
    Ok(())
}

fn max_error(pred: &AnimationSequence, gt: &AnimationSequence, groups: &[usize]) -> f64 {
    let k = pred.kind().group_size();
    let total: f64 = pred
        .frames()
        .rows()
        .into_iter()
        .zip(gt.frames().rows())
        .map(|(p, t)| groups.iter().map(|&g| group_norm(p, t, k, g)).fold(0.0, f64::max))
        .sum();
    total / pred.n_frames() as f64
}

/// Mean over frames of the largest per-vertex (per-control) error.
pub fn mve(pred: &AnimationSequence, gt: &AnimationSequence) -> Result<f64> {
    check_pair(pred, gt)?;
    let all: Vec<usize> = (0..pred.n_groups()).collect();
    Ok(max_error(pred, gt, &all))
}

/// [`mve`] restricted to the lip indices of `mask`.
pub fn lve(pred: &AnimationSequence, gt: &AnimationSequence, mask: &RegionMask) -> Result<f64> {
    check_pair(pred, gt)?;
    mask.validate(pred.n_groups())?;
    Ok(max_error(pred, gt, &mask.lip_indices))
}

fn magnitude_std(seq: &AnimationSequence, g: usize) -> f64 {
    let k = seq.kind().group_size();
    let mags: Vec<f64> = seq.frames().rows().into_iter().map(|r| magnitude(r, k, g)).collect();
    population_mean_std(&mags).1
}

/// Mean over upper-face indices of `std_gt - std_pred`, where each std is
/// taken over frames of the per-frame motion magnitude. Positive values
/// mean the prediction moves less than the ground truth.
pub fn fdd(pred: &AnimationSequence, gt: &AnimationSequence, mask: &RegionMask) -> Result<f64> {
    check_pair(pred, gt)?;
    mask.validate(pred.n_groups())?;
    if pred.n_frames() < 2 {
        return Err(Error::Undefined(format!(
            "dynamics need at least 2 frames, got {}",
            pred.n_frames()
        )));
    }
    let idx = &mask.upper_face_indices;
    let sum: f64 = idx.iter().map(|&g| magnitude_std(gt, g) - magnitude_std(pred, g)).sum();
    Ok(sum / idx.len() as f64)
}

/// Mean over unordered pairs of the mean per-frame per-vertex distance.
pub fn diversity(samples: &[AnimationSequence]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "diversity needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    for s in &samples[1..] {
        check_pair(s, &samples[0])?;
    }
    let k = samples[0].kind().group_size();
    let groups = samples[0].n_groups();
    let cells = (samples[0].n_frames() * groups) as f64;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d: f64 = samples[i]
                .frames()
                .rows()
                .into_iter()
                .zip(samples[j].frames().rows())
                .map(|(a, b)| (0..groups).map(|g| group_norm(a, b, k, g)).sum::<f64>())
                .sum();
            total += d / cells;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Per-vertex mean and std of the frame-to-frame displacement magnitude,
/// pooled over every transition of every sequence.
pub fn mean_motion_stats(samples: &[AnimationSequence]) -> Result<Vec<(f64, f64)>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyInput("no sequences for motion statistics".into()))?;
    for s in samples {
        if s.kind() != first.kind() || s.dim() != first.dim() {
            return Err(Error::Contract("motion statistics need sequences of one shape".into()));
        }
        if s.n_frames() < 2 {
            return Err(Error::Undefined(format!(
                "motion statistics need at least 2 frames, {} has {}",
                s.sentence(),
                s.n_frames()
            )));
        }
    }
    let k = first.kind().group_size();
    let out = (0..first.n_groups())
        .map(|g| {
            let steps: Vec<f64> = samples
                .iter()
                .flat_map(|s| {
                    let f = s.frames();
                    (1..s.n_frames()).map(move |n| group_norm(f.row(n), f.row(n - 1), k, g))
                })
                .collect();
            population_mean_std(&steps)
        })
        .collect();
    Ok(out)
}

pub fn write_motion_stats_csv(stats: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(["vertex", "mean", "std"]).map_err(|e| Error::format(path, e))?;
    for (i, (m, s)) in stats.iter().enumerate() {
        w.write_record([i.to_string(), m.to_string(), s.to_string()])
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRow {
    pub sample: String,
    pub control: usize,
    pub frame: usize,
    pub value: f64,
}

/// Long-format `(sample, control, frame, value)` table for plotting chosen
/// rig controls across samples.
pub fn animation_graphs(samples: &[(String, &AnimationSequence)], controls: &[usize]) -> Result<Vec<GraphRow>> {
    let mut rows = Vec::new();
    for (id, seq) in samples {
        if seq.kind() != MotionKind::RigControl {
            return Err(Error::Contract(format!("animation graphs need rig controls, {id} holds vertices")));
        }
        if let Some(&c) = controls.iter().find(|&&c| c >= seq.dim()) {
            return Err(Error::Config(format!("control {c} out of range for {} controls", seq.dim())));
        }
        for &c in controls {
            for (n, v) in seq.frames().column(c).iter().enumerate() {
                rows.push(GraphRow {
                    sample: id.clone(),
                    control: c,
                    frame: n,
                    value: *v,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_graph_csv(rows: &[GraphRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics of one predicted sequence against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub mve: f64,
    pub lve: f64,
    pub fdd: f64,
}

pub fn sequence_metrics(
    name: &str,
    pred: &AnimationSequence,
    gt: &AnimationSequence,
    mask: &RegionMask,
) -> Result<SequenceMetrics> {
    Ok(SequenceMetrics {
        name: name.to_string(),
        mve: mve(pred, gt)?,
        lve: lve(pred, gt, mask)?,
        fdd: fdd(pred, gt, mask)?,
    })
}

/// Aggregate metrics over a test set; raw values, no scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub mask_id: String,
    pub kind: MotionKind,
    pub sequences: usize,
    pub mve: f64,
    pub lve: f64,
    pub fdd: f64,
    pub fdd_abs: f64,
    pub diversity: Option<f64>,
}

impl MetricReport {
    /// Mean of per-sequence values.
    pub fn aggregate(
        dataset: &str,
        mask: &RegionMask,
        kind: MotionKind,
        per_sequence: &[SequenceMetrics],
        diversity: Option<f64>,
    ) -> Result<Self> {
        if per_sequence.is_empty() {
            return Err(Error::EmptyInput("no sequences to aggregate".into()));
        }
        let n = per_sequence.len() as f64;
        let mean = |f: fn(&SequenceMetrics) -> f64| per_sequence.iter().map(f).sum::<f64>() / n;
        let fdd = mean(|s| s.fdd);
        Ok(Self {
            dataset: dataset.to_string(),
            mask_id: mask.label().to_string(),
            kind,
            sequences: per_sequence.len(),
            mve: mean(|s| s.mve),
            lve: mean(|s| s.lve),
            fdd,
            fdd_abs: fdd.abs(),
            diversity,
        })
    }

    /// Table with values divided by the customary scale factors.
    pub fn scaled_table(&self) -> String {
        let (m, l) = match self.kind {
            MotionKind::VertexDisplacement => ("MVE", "LVE"),
            MotionKind::RigControl => ("MBE", "LBE"),
        };
        let mut s = String::new();
        let _ = writeln!(s, "{} ({} sequences, mask {})", self.dataset, self.sequences, self.mask_id);
        let _ = writeln!(s, "{m:>10} x1e-3 {:.4}", self.mve / MVE_SCALE);
        let _ = writeln!(s, "{l:>10} x1e-4 {:.4}", self.lve / LVE_SCALE);
        let _ = writeln!(s, "{:>10} x1e-5 {:.4} (|FDD| {:.4})", "FDD", self.fdd / FDD_SCALE, self.fdd_abs / FDD_SCALE);
        match self.diversity {
            Some(d) => {
                let _ = writeln!(s, "{:>10} x1e-3 {:.4}", "Diversity", d / DIVERSITY_SCALE);
            }
            None => {
                let _ = writeln!(s, "{:>10}       n/a", "Diversity");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn vseq(frames: Array2<f64>) -> AnimationSequence {
        AnimationSequence::new(frames, MotionKind::VertexDisplacement, 25.0, "s", "x").unwrap()
    }

    fn rseq(frames: Array2<f64>) -> AnimationSequence {
        AnimationSequence::new(frames, MotionKind::RigControl, 60.0, "s", "x").unwrap()
    }

    #[test]
    fn mve_hand_cases() {
        let gt = vseq(Array2::zeros((1, 6)));
        let pred = vseq(array![[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]]);
        assert_eq!(mve(&pred, &gt).unwrap(), 2.0);
        assert_eq!(mve(&gt, &gt).unwrap(), 0.0);

        let c = 0.7;
        let gt = vseq(Array2::zeros((2, 6)));
        let mut p = Array2::zeros((2, 6));
        p.row_mut(0).slice_mut(ndarray::s![3..6]).fill(c);
        let got = mve(&vseq(p), &gt).unwrap();
        assert!((got - c * 3f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mve_rejects_mismatch() {
        let a = vseq(Array2::zeros((2, 6)));
        let b = vseq(Array2::zeros((3, 6)));
        assert!(matches!(mve(&a, &b), Err(Error::Contract(_))));
        let r = rseq(Array2::zeros((2, 6)));
        assert!(matches!(mve(&a, &r), Err(Error::Contract(_))));
    }

    #[test]
    fn lve_hand_cases() {
        let gt = vseq(Array2::zeros((1, 6)));
        let pred = vseq(array![[3.0, 4.0, 0.0, 9.0, 9.0, 9.0]]);
        let mask = RegionMask::new(vec![0], vec![1]);
        assert_eq!(lve(&pred, &gt, &mask).unwrap(), 5.0);
        let off_lip = vseq(array![[0.0, 0.0, 0.0, 9.0, 9.0, 9.0]]);
        assert_eq!(lve(&off_lip, &gt, &mask).unwrap(), 0.0);
        assert!(matches!(lve(&pred, &gt, &RegionMask::new(vec![], vec![1])), Err(Error::Config(_))));
        assert_eq!(lve(&pred, &gt, &RegionMask::full(2)).unwrap(), mve(&pred, &gt).unwrap());
    }

    #[test]
    fn fdd_hand_cases() {
        let gt = rseq(array![[0.0], [2.0]]);
        let pred = rseq(array![[0.0], [0.0]]);
        let mask = RegionMask::new(vec![0], vec![0]);
        assert_eq!(fdd(&pred, &gt, &mask).unwrap(), 1.0);
        assert_eq!(fdd(&gt, &pred, &mask).unwrap(), -1.0);
        assert_eq!(fdd(&gt, &gt, &mask).unwrap(), 0.0);
        let one = rseq(array![[1.0]]);
        assert!(matches!(fdd(&one, &one, &mask), Err(Error::Undefined(_))));
        // rig magnitude is the absolute value
        let neg = rseq(array![[0.0], [-2.0]]);
        assert_eq!(fdd(&pred, &neg, &mask).unwrap(), 1.0);
    }

    #[test]
    fn diversity_hand_cases() {
        let s: Vec<_> = [0.0, 1.0, 2.0].iter().map(|&x| vseq(array![[x, 0.0, 0.0]])).collect();
        assert_eq!(diversity(&s).unwrap(), 4.0 / 3.0);
        let same = vec![vseq(array![[1.0, 2.0, 3.0]]); 3];
        assert_eq!(diversity(&same).unwrap(), 0.0);
        assert!(matches!(diversity(&s[..1]), Err(Error::Config(_))));
        let scaled: Vec<_> = [0.0, 3.0, 6.0].iter().map(|&x| vseq(array![[x, 0.0, 0.0]])).collect();
        assert!((diversity(&scaled).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_outlier_shrinks_with_copies() {
        let outlier = vseq(array![[5.0, 0.0, 0.0]]);
        let base = vseq(array![[0.0, 0.0, 0.0]]);
        let mut prev = f64::INFINITY;
        for k in 1..6 {
            let mut s = vec![base.clone(); k];
            s.push(outlier.clone());
            let d = diversity(&s).unwrap();
            assert!(d > 0.0 && d < prev);
            prev = d;
        }
    }

    #[test]
    fn motion_stats_cases() {
        let stat = mean_motion_stats(&[vseq(Array2::ones((4, 6)))]).unwrap();
        assert!(stat.iter().all(|&(m, s)| m == 0.0 && s == 0.0));
        let ramp = vseq(array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(mean_motion_stats(&[ramp]).unwrap(), vec![(1.0, 0.0)]);
        assert!(matches!(mean_motion_stats(&[vseq(Array2::zeros((1, 3)))]), Err(Error::Undefined(_))));
    }

    #[test]
    fn graph_rows() {
        let s = rseq(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let rows = animation_graphs(&[("gt".into(), &s)], &[1]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2], GraphRow { sample: "gt".into(), control: 1, frame: 2, value: 6.0 });
        let rows = animation_graphs(&[("gt".into(), &s), ("a".into(), &s)], &[0, 1]).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        let v = vseq(Array2::zeros((2, 3)));
        assert!(matches!(animation_graphs(&[("v".into(), &v)], &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn report_aggregates_means() {
        let per = vec![
            SequenceMetrics { name: "a".into(), mve: 1.0, lve: 2.0, fdd: -3.0 },
            SequenceMetrics { name: "b".into(), mve: 3.0, lve: 4.0, fdd: 1.0 },
        ];
        let r = MetricReport::aggregate("t", &RegionMask::full(1), MotionKind::RigControl, &per, Some(0.5)).unwrap();
        assert_eq!((r.mve, r.lve, r.fdd, r.fdd_abs), (2.0, 3.0, -1.0, 1.0));
        assert!(r.scaled_table().contains("MBE"));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
    }
}
