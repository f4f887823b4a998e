//! Detection evaluation in the nuScenes style.
//!
//! Predictions are matched to ground truth by BEV center distance at four
//! thresholds. AP uses 101-point interpolated precision. TP errors are taken
//! at the 2 m threshold, and the summary composes them into NDS.
//!
//! Two aggregation rules matter for reproducing published tables:
//! * a threshold with no true positive is *not evaluable*, and it counts as
//!   zero inside a class's mean AP (the mean always divides by four);
//! * a TP error that a class does not define, or cannot measure, is left out
//!   of both numerator and denominator of the class-averaged error.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fusion::DetectionBox;

pub const CLASS_NAMES: [&str; 10] = [
    "car",
    "truck",
    "bus",
    "trailer",
    "construction_vehicle",
    "pedestrian",
    "motorcycle",
    "bicycle",
    "traffic_cone",
    "barrier",
];

pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Matching threshold used for the TP errors.
pub const TP_THRESHOLD: f64 = 2.0;

pub const TP_METRIC_NAMES: [&str; 5] = ["trans_err", "scale_err", "orient_err", "vel_err", "attr_err"];

const VEHICLE_ATTRS: &[&str] = &["vehicle.moving", "vehicle.parked", "vehicle.stopped"];
const PEDESTRIAN_ATTRS: &[&str] = &["pedestrian.moving", "pedestrian.standing", "pedestrian.sitting_lying_down"];
const CYCLE_ATTRS: &[&str] = &["cycle.with_rider", "cycle.without_rider"];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| *c == name)
}

/// Attribute vocabulary of a class; empty for classes without attributes.
pub fn attribute_names(class_id: usize) -> &'static [&'static str] {
    match class_id {
        0..=4 => VEHICLE_ATTRS,
        5 => PEDESTRIAN_ATTRS,
        6 | 7 => CYCLE_ATTRS,
        _ => &[],
    }
}

/// Which of the five TP errors a class defines. Cones have no orientation,
/// velocity or attribute; barriers have no velocity or attribute.
pub fn defined_tp_metrics(class_id: usize) -> [bool; 5] {
    match CLASS_NAMES.get(class_id) {
        Some(&"traffic_cone") => [true, true, false, false, false],
        Some(&"barrier") => [true, true, true, false, false],
        _ => [true; 5],
    }
}

/// One box as stored in the predictions / ground-truth JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBox {
    pub translation: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub detection_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_score: Option<f64>,
    #[serde(default)]
    pub attribute_name: String,
}

impl EvalBox {
    pub fn from_detection(b: &DetectionBox, with_score: bool) -> Result<Self> {
        let name = CLASS_NAMES
            .get(b.class_id)
            .ok_or_else(|| Error::Invalid(format!("class id {} out of range", b.class_id)))?;
        let attrs = attribute_names(b.class_id);
        Ok(EvalBox {
            translation: b.center,
            size: b.size,
            yaw: b.yaw,
            velocity: b.velocity,
            detection_name: name.to_string(),
            detection_score: with_score.then_some(b.score),
            attribute_name: attrs.get(b.attribute_id).map(|s| s.to_string()).unwrap_or_default(),
        })
    }

    pub fn score(&self) -> f64 {
        self.detection_score.unwrap_or(1.0)
    }

    fn validate(&self) -> Result<()> {
        if class_index(&self.detection_name).is_none() {
            return Err(Error::Invalid(format!("unknown detection_name `{}`", self.detection_name)));
        }
        if !self.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Invalid(format!("box sizes must be positive, got {:?}", self.size)));
        }
        if let Some(s) = self.detection_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Invalid(format!("detection_score {s} outside [0, 1]")));
            }
        }
        let finite = self.translation.iter().chain(&self.velocity).chain([&self.yaw]).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("box has non-finite pose or velocity".into()));
        }
        Ok(())
    }

    fn bev_distance(&self, other: &EvalBox) -> f64 {
        (self.translation[0] - other.translation[0]).hypot(self.translation[1] - other.translation[1])
    }
}

/// A predictions or ground-truth file: boxes keyed by sample token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    pub results: BTreeMap<String, Vec<EvalBox>>,
}

/// Greedy matching result for one class in one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Prediction indices by descending score (stable on ties).
    pub ranked: Vec<usize>,
    /// Per ranked prediction, the matched gt index.
    pub assignment: Vec<Option<usize>>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ranked.iter().zip(&self.assignment).filter_map(|(&p, g)| g.map(|g| (p, g)))
    }

    pub fn matched(&self) -> usize {
        self.assignment.iter().flatten().count()
    }
}

/// Visits predictions by descending score and matches each to the nearest
/// still-unmatched gt within `threshold` meters; equal distances go to the
/// lower gt index.
pub fn match_center_distance(preds: &[EvalBox], gts: &[EvalBox], threshold: f64) -> MatchResult {
    let mut ranked: Vec<usize> = (0..preds.len()).collect();
    ranked.sort_by(|&a, &b| preds[b].score().total_cmp(&preds[a].score()));
    let mut taken = vec![false; gts.len()];
    let assignment = ranked
        .iter()
        .map(|&p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let d = preds[p].bev_distance(gt);
                if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((g, d));
                }
            }
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        })
        .collect();
    let unmatched_gts = (0..gts.len()).filter(|&g| !taken[g]).collect();
    MatchResult {
        ranked,
        assignment,
        unmatched_gts,
    }
}

/// 101-point interpolated AP of a ranked true-positive sequence against
/// `n_gt` ground truths. `None` when there are no ground truths or no true
/// positives.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 || !ranked_tp.iter().any(|&t| t) {
        return None;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    for (k, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Envelope: best precision at this rank or any later one.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut k = 0;
    let mut area = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k == recall.len() {
            break;
        }
        area += precision[k];
    }
    Some(area / 101.0)
}

/// Mean over all four thresholds with not-evaluable entries counted as zero.
/// `None` when no threshold is evaluable.
pub fn class_mean_ap(aps: &[Option<f64>; 4]) -> Option<f64> {
    if aps.iter().all(Option::is_none) {
        return None;
    }
    Some(aps.iter().map(|a| a.unwrap_or(0.0)).sum::<f64>() / 4.0)
}

fn wrap_angle(a: f64) -> f64 {
    let d = (a + PI).rem_euclid(2.0 * PI) - PI;
    d.abs()
}

/// Scale error: `1 − IOU` of the two boxes after aligning centers and yaw.
pub fn scale_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    1.0 - inter / union
}

/// `(ATE, ASE, AOE, AVE, AAE)` over matched `(pred, gt)` pairs of one class.
/// Metrics the class does not define, and all metrics when there are no
/// pairs, are `None`.
pub fn tp_errors(pairs: &[(&EvalBox, &EvalBox)], class_id: usize) -> [Option<f64>; 5] {
    if pairs.is_empty() {
        return [None; 5];
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&EvalBox, &EvalBox) -> f64| pairs.iter().map(|(p, g)| f(p, g)).sum::<f64>() / n;
    let values = [
        mean(&|p, g| p.bev_distance(g)),
        mean(&|p, g| scale_error(&p.size, &g.size)),
        mean(&|p, g| wrap_angle(p.yaw - g.yaw)),
        mean(&|p, g| (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1])),
        mean(&|p, g| if p.attribute_name == g.attribute_name { 0.0 } else { 1.0 }),
    ];
    let defined = defined_tp_metrics(class_id);
    std::array::from_fn(|i| defined[i].then_some(values[i]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassEval {
    pub class_name: String,
    pub n_gt: usize,
    pub n_pred: usize,
    /// AP at each of [`DIST_THRESHOLDS`]; `None` is not evaluable.
    pub ap: [Option<f64>; 4],
    pub mean_ap: Option<f64>,
    /// ATE, ASE, AOE, AVE, AAE.
    pub tp_errors: [Option<f64>; 5],
}

/// Evaluates one class over aligned per-sample prediction / gt lists.
pub fn evaluate_class(class_id: usize, samples: &[(Vec<&EvalBox>, Vec<&EvalBox>)]) -> ClassEval {
    let n_gt: usize = samples.iter().map(|(_, g)| g.len()).sum();
    let n_pred: usize = samples.iter().map(|(p, _)| p.len()).sum();
    let owned: Vec<(Vec<EvalBox>, Vec<EvalBox>)> = samples
        .iter()
        .map(|(p, g)| (p.iter().map(|b| (*b).clone()).collect(), g.iter().map(|b| (*b).clone()).collect()))
        .collect();

    let mut ap = [None; 4];
    let mut tp_pairs: Vec<(&EvalBox, &EvalBox)> = Vec::new();
    for (t, &threshold) in DIST_THRESHOLDS.iter().enumerate() {
        let mut ranked: Vec<(f64, bool)> = Vec::with_capacity(n_pred);
        for (preds, gts) in &owned {
            let m = match_center_distance(preds, gts, threshold);
            ranked.extend(m.ranked.iter().zip(&m.assignment).map(|(&p, a)| (preds[p].score(), a.is_some())));
            if threshold == TP_THRESHOLD {
                tp_pairs.extend(m.pairs().map(|(p, g)| (&preds[p], &gts[g])));
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
        ap[t] = average_precision(&flags, n_gt);
    }
    ClassEval {
        class_name: CLASS_NAMES[class_id].to_string(),
        n_gt,
        n_pred,
        ap,
        mean_ap: class_mean_ap(&ap),
        tp_errors: tp_errors(&tp_pairs, class_id),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub classes: Vec<ClassEval>,
    pub map: f64,
    pub m_te: Option<f64>,
    pub m_se: Option<f64>,
    pub m_oe: Option<f64>,
    pub m_ve: Option<f64>,
    pub m_ae: Option<f64>,
    pub nds: f64,
    pub eval_time: f64,
}

impl EvalSummary {
    pub fn mtps(&self) -> [Option<f64>; 5] {
        [self.m_te, self.m_se, self.m_oe, self.m_ve, self.m_ae]
    }

    /// Single-row summary with the columns mTE, mSE, mOE, mVE, mAE, mAP,
    /// NDS and eval time.
    pub fn summary_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}",
            "mTE", "mSE", "mOE", "mVE", "mAE", "mAP", "NDS", "Eval Time"
        );
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8.4} {:>8.4} {:>9.2}s",
            f(self.m_te),
            f(self.m_se),
            f(self.m_oe),
            f(self.m_ve),
            f(self.m_ae),
            self.map,
            self.nds,
            self.eval_time
        );
        s
    }

    /// Per-class AP and TP-error rows followed by the summary row.
    pub fn render_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>6} {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>6} {:>6}",
            "class", "0.5m", "1m", "2m", "4m", "mAP", "ATE", "ASE", "AOE", "AVE", "AAE"
        );
        for c in &self.classes {
            let _ = write!(s, "{:<22}", c.class_name);
            for a in c.ap.iter().chain([&c.mean_ap]) {
                let _ = write!(s, " {:>6}", f(*a));
            }
            let _ = write!(s, " |");
            for e in &c.tp_errors {
                let _ = write!(s, " {:>6}", f(*e));
            }
            s.push('\n');
        }
        s.push('\n');
        s.push_str(&self.summary_table());
        s
    }
}

/// `(5·mAP + Σ(1 − min(1, mTP))) / 10`.
pub fn compose_nds(map: f64, mtps: &[f64; 5]) -> f64 {
    (5.0 * map + mtps.iter().map(|e| 1.0 - e.min(1.0)).sum::<f64>()) / 10.0
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Global mAP over classes with a mean AP (zero if none), each mTP over the
/// classes where it is present. An mTP with no present value enters NDS as 1,
/// contributing nothing.
pub fn aggregate_summary(classes: Vec<ClassEval>, eval_time: f64) -> Result<EvalSummary> {
    if classes.is_empty() {
        return Err(Error::Invalid("aggregate_summary needs at least one class".into()));
    }
    let map = mean_present(classes.iter().map(|c| c.mean_ap)).unwrap_or(0.0);
    let m: [Option<f64>; 5] = std::array::from_fn(|i| mean_present(classes.iter().map(|c| c.tp_errors[i])));
    let nds = compose_nds(map, &m.map(|v| v.unwrap_or(1.0)));
    Ok(EvalSummary {
        classes,
        map,
        m_te: m[0],
        m_se: m[1],
        m_oe: m[2],
        m_ve: m[3],
        m_ae: m[4],
        nds,
        eval_time,
    })
}

/// Evaluates all classes. Every prediction token must appear in the ground
/// truth; gt samples without predictions count as empty.
pub fn evaluate(preds: &DetectionFile, gts: &DetectionFile) -> Result<EvalSummary> {
    let start = Instant::now();
    let unknown: BTreeSet<&String> = preds.results.keys().filter(|t| !gts.results.contains_key(*t)).collect();
    if !unknown.is_empty() {
        return Err(Error::Invalid(format!("prediction tokens missing from ground truth: {unknown:?}")));
    }
    for b in gts.results.values().flatten() {
        b.validate()?;
    }
    for b in preds.results.values().flatten() {
        b.validate()?;
        if b.detection_score.is_none() {
            return Err(Error::Invalid("prediction without detection_score".into()));
        }
    }
    let empty = Vec::new();
    let classes: Vec<usize> = (0..CLASS_NAMES.len()).collect();
    let evals = exec::map_slice(&classes, |&k| {
        let name = CLASS_NAMES[k];
        let samples: Vec<(Vec<&EvalBox>, Vec<&EvalBox>)> = gts
            .results
            .iter()
            .map(|(token, g)| {
                let p = preds.results.get(token).unwrap_or(&empty);
                (
                    p.iter().filter(|b| b.detection_name == name).collect(),
                    g.iter().filter(|b| b.detection_name == name).collect(),
                )
            })
            .collect();
        evaluate_class(k, &samples)
    });
    aggregate_summary(evals, start.elapsed().as_secs_f64())
}
