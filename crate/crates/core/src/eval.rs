//! KITTI-style 3D detection evaluation: greedy matching, 40-point interpolated
//! AP and difficulty buckets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{box3d_iou, Box3D};
use crate::kitti_io::{label_to_box3d, LabelRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyRule {
    pub min_height_px: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

impl DifficultyRule {
    pub fn admits(&self, gt: &LabelRecord) -> bool {
        gt.box2d.height() >= self.min_height_px && gt.occlusion <= self.max_occlusion && gt.truncation <= self.max_truncation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: BTreeMap<String, f64>,
    pub recall_positions: usize,
    pub easy: DifficultyRule,
    pub moderate: DifficultyRule,
    pub hard: DifficultyRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let iou_thresholds = [("Car", 0.7), ("Pedestrian", 0.5), ("Cyclist", 0.5)].into_iter().map(|(c, t)| (c.to_string(), t)).collect();
        Self {
            iou_thresholds,
            recall_positions: 40,
            easy: DifficultyRule { min_height_px: 40.0, max_occlusion: 0, max_truncation: 0.15 },
            moderate: DifficultyRule { min_height_px: 25.0, max_occlusion: 1, max_truncation: 0.30 },
            hard: DifficultyRule { min_height_px: 25.0, max_occlusion: 2, max_truncation: 0.50 },
        }
    }
}

impl EvalConfig {
    pub fn rule(&self, d: Difficulty) -> &DifficultyRule {
        match d {
            Difficulty::Easy => &self.easy,
            Difficulty::Moderate => &self.moderate,
            Difficulty::Hard => &self.hard,
        }
    }
}

/// One scored 3D detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub score: f64,
}

/// A ground-truth box and whether it belongs to the difficulty being evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub box3d: Box3D,
    pub counted: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    /// `(score, is_tp)` for every detection that is neither ignored nor unmatched-to-ignored.
    pub scored: Vec<(f64, bool)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Counted ground truths.
    pub n_gt: usize,
}

fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    // content-based tie break keeps the result independent of input order
    b.score.total_cmp(&a.score).then_with(|| {
        let ka = [a.box3d.center.x, a.box3d.center.y, a.box3d.center.z, a.box3d.size.h, a.box3d.size.w, a.box3d.size.l, a.box3d.heading];
        let kb = [b.box3d.center.x, b.box3d.center.y, b.box3d.center.z, b.box3d.size.h, b.box3d.size.w, b.box3d.size.l, b.box3d.heading];
        ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Greedy matching in descending score order within one frame and class.
///
/// A detection is a TP when its best unmatched counted ground truth reaches
/// `threshold`. Failing that, a detection reaching an unmatched uncounted
/// ground truth consumes it and is ignored. Everything else is a FP.
pub fn match_frame(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> FrameMatch {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));
    let mut used = vec![false; gts.len()];
    let mut out = FrameMatch { n_gt: gts.iter().filter(|g| g.counted).count(), ..Default::default() };
    for d in order {
        let best = |counted: bool, used: &[bool]| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.counted != counted {
                    continue;
                }
                let iou = box3d_iou(&d.box3d, &g.box3d);
                if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            best
        };
        if let Some((j, _)) = best(true, &used) {
            used[j] = true;
            out.tp += 1;
            out.scored.push((d.score, true));
        } else if let Some((j, _)) = best(false, &used) {
            used[j] = true;
        } else {
            out.fp += 1;
            out.scored.push((d.score, false));
        }
    }
    out.fn_ = out.n_gt - out.tp;
    out
}

/// Precision/recall at every distinct score cutoff, highest score first.
pub fn pr_curve(scored: &[(f64, bool)], n_gt: usize) -> Vec<(f64, f64)> {
    if n_gt == 0 {
        return Vec::new();
    }
    let mut s: Vec<(f64, bool)> = scored.to_vec();
    s.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let mut out = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    for i in 0..s.len() {
        n += 1;
        tp += s[i].1 as usize;
        // detections sharing a score enter together
        if i + 1 == s.len() || s[i + 1].0 != s[i].0 {
            out.push((tp as f64 / n_gt as f64, tp as f64 / n as f64));
        }
    }
    out
}

/// Mean over `r = k/positions, k = 1..=positions` of the best precision at recall ≥ r.
/// `None` when there is no counted ground truth.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize, positions: usize) -> Option<f64> {
    if n_gt == 0 || positions == 0 {
        return None;
    }
    let curve = pr_curve(scored, n_gt);
    let sum: f64 = (1..=positions)
        .map(|k| {
            let r = k as f64 / positions as f64;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum();
    Some(sum / positions as f64)
}

pub fn average_precision_40(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    average_precision(scored, n_gt, 40)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    /// In `[0, 1]`; `None` without counted ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
    pub tp: usize,
    pub fp: usize,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalTable {
    pub cells: BTreeMap<String, BTreeMap<Difficulty, EvalCell>>,
    pub warnings: Vec<String>,
}

impl EvalTable {
    pub fn ap(&self, class: &str, d: Difficulty) -> Option<f64> {
        self.cells.get(class)?.get(&d)?.ap
    }

    /// Aligned text, AP in percent.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:>9} {:>9} {:>9}\n", "class", "easy", "moderate", "hard");
        for (class, row) in &self.cells {
            let _ = write!(s, "{class:<12}");
            for d in Difficulty::ALL {
                match row.get(&d).and_then(|c| c.ap) {
                    Some(ap) => {
                        let _ = write!(s, " {:>9.2}", 100.0 * ap);
                    }
                    None => {
                        let _ = write!(s, " {:>9}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    /// `class,difficulty,ap,n_gt,n_det,tp,fp` rows with a header; empty AP field when undefined.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,difficulty,ap,n_gt,n_det,tp,fp\n");
        for (class, row) in &self.cells {
            for (d, c) in row {
                let ap = c.ap.map(|a| format!("{:.4}", 100.0 * a)).unwrap_or_default();
                let _ = writeln!(s, "{class},{},{ap},{},{},{},{}", d.name(), c.n_gt, c.n_det, c.tp, c.fp);
            }
        }
        s
    }

    /// `class,difficulty,recall,precision` rows for plotting.
    pub fn pr_dump(&self) -> String {
        let mut s = String::from("class,difficulty,recall,precision\n");
        for (class, row) in &self.cells {
            for (d, c) in row {
                for (r, p) in &c.curve {
                    let _ = writeln!(s, "{class},{},{r:.6},{p:.6}", d.name());
                }
            }
        }
        s
    }
}

/// Evaluates per-frame predictions against per-frame truth, both keyed by frame id.
///
/// Prediction scores default to 1 when absent. Frames with truth but no
/// predictions count as empty; the reverse is reported as a warning.
pub fn evaluate(preds: &BTreeMap<u32, Vec<LabelRecord>>, truth: &BTreeMap<u32, Vec<LabelRecord>>, cfg: &EvalConfig) -> EvalTable {
    let mut table = EvalTable::default();
    for id in preds.keys().filter(|id| !truth.contains_key(id)) {
        table.warnings.push(format!("frame {id}: predictions without ground truth ignored"));
    }
    for (class, &threshold) in &cfg.iou_thresholds {
        let mut row = BTreeMap::new();
        for d in Difficulty::ALL {
            let rule = cfg.rule(d);
            let per_frame: Vec<(FrameMatch, usize)> = truth
                .par_iter()
                .map(|(id, gts)| {
                    let gts: Vec<GroundTruth> = gts
                        .iter()
                        .filter(|g| &g.class_name == class)
                        .filter_map(|g| label_to_box3d(g).ok().map(|b| GroundTruth { box3d: b, counted: rule.admits(g) }))
                        .collect();
                    let dets: Vec<Detection> = preds
                        .get(id)
                        .map(|p| {
                            p.iter()
                                .filter(|r| &r.class_name == class)
                                .filter_map(|r| label_to_box3d(r).ok().map(|b| Detection { box3d: b, score: r.score.unwrap_or(1.0) }))
                                .collect()
                        })
                        .unwrap_or_default();
                    (match_frame(&dets, &gts, threshold), dets.len())
                })
                .collect();
            let mut scored = Vec::new();
            let (mut n_gt, mut n_det, mut tp, mut fp) = (0, 0, 0, 0);
            for (m, nd) in per_frame {
                scored.extend(m.scored);
                n_gt += m.n_gt;
                n_det += nd;
                tp += m.tp;
                fp += m.fp;
            }
            let ap = average_precision(&scored, n_gt, cfg.recall_positions);
            row.insert(d, EvalCell { ap, n_gt, n_det, tp, fp, curve: pr_curve(&scored, n_gt) });
        }
        table.cells.insert(class.clone(), row);
    }
    table
}

/// Mean over truth boxes of the best 3D IoU with a same-class prediction of the same frame.
/// `None` when there is no truth at all.
pub fn mean_best_iou(truth: &[Vec<(String, Box3D)>], preds: &[Vec<(String, Box3D)>]) -> Option<f64> {
    let empty = Vec::new();
    let mut total = 0.0;
    let mut n = 0usize;
    for (k, t) in truth.iter().enumerate() {
        let p = preds.get(k).unwrap_or(&empty);
        for (class, gt) in t {
            n += 1;
            total += p.iter().filter(|(c, _)| c == class).map(|(_, b)| box3d_iou(b, gt)).fold(0.0, f64::max);
        }
    }
    (n > 0).then(|| total / n as f64)
}
