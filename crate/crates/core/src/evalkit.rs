//! Detection metrics, equivariance diagnostics and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::detector::{assemble_detections, forward, run_variant, Detection, EpochLog, Model, Variant};
use crate::eqvnet::{measure_forward_time, Graph};
use crate::error::{EonError, Result};
use crate::geometry::{dist2, rotate_point_about, rotated_iou, OrientedBox, Vec3};
use crate::parallel::run_indexed;
use crate::rotgroup::{wrap_angle, CyclicGroup, GroupElement};
use crate::scenegen::{default_templates, Scene};

/// Order of detections by descending score, ties by input index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// TP flags aligned with `dets`: in ranking order each detection claims the
/// highest-IoU unmatched ground truth with IoU at least `iou_thr`.
pub fn match_detections(dets: &[OrientedBox], gts: &[OrientedBox], iou_thr: f64) -> Vec<Option<usize>> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in ranking(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (k, gt) in gts.iter().enumerate() {
            if taken[k] {
                continue;
            }
            let iou = rotated_iou(&dets[i], gt);
            if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        if let Some((k, _)) = best {
            taken[k] = true;
            out[i] = Some(k);
        }
    }
    out
}

/// All-point interpolated AP: each true positive adds the precision
/// envelope at its rank, divided by `num_gt`.
pub fn average_precision(flags: &[bool], scores: &[f64], num_gt: usize) -> f64 {
    assert_eq!(flags.len(), scores.len());
    if num_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let order = ranking(scores);
    let mut precision = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if flags[i] {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut area = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if flags[i] {
            area += precision[k];
        }
    }
    area / num_gt as f64
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(flags: &[bool], scores: &[f64], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    ranking(scores)
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if flags[i] {
                tp += 1;
            }
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub class_name: String,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub threshold: f64,
    pub classes: Vec<ClassAp>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub g0: usize,
    pub angle: f64,
    /// Max deviation of object seed orbits from the shifted reference.
    pub orbit_residual: Option<f64>,
    /// Fraction of oriented object seeds whose orientation composed with `g0`;
    /// `None` where seeds carry no orientation.
    pub shift_rate: Option<f64>,
    /// Max `|wrap(yaw′ − yaw − angle(g0))|` over the object's regions.
    pub yaw_delta: f64,
    pub size_drift: f64,
    /// Max distance between a region center and its rotated reference.
    pub center_drift: f64,
    /// Max box drift (center and size) of regions away from the object.
    pub static_drift: f64,
    pub object_regions: usize,
    pub static_regions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub variant: Variant,
    pub group_order: usize,
    pub object_id: usize,
    pub applicable: bool,
    pub point_gap: f64,
    pub vote_gap: f64,
    pub required_point_gap: f64,
    pub required_vote_gap: f64,
    pub rows: Vec<ProbeRow>,
}

/// Bounds asserted for oracle-mode equivariant variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeBounds {
    pub orbit_residual: f64,
    pub yaw_delta: f64,
    pub size_drift: f64,
    pub static_drift: f64,
}

impl ProbeBounds {
    pub fn for_precision(is_f64: bool) -> Self {
        if is_f64 {
            Self {
                orbit_residual: 1e-10,
                yaw_delta: 1e-10,
                size_drift: 1e-10,
                static_drift: 1e-10,
            }
        } else {
            Self {
                orbit_residual: 1e-5,
                yaw_delta: 1e-5,
                size_drift: 1e-4,
                static_drift: 1e-4,
            }
        }
    }
}

impl ProbeReport {
    /// Every row within `bounds`, with full orientation shift correctness.
    pub fn within(&self, b: &ProbeBounds) -> bool {
        self.rows.iter().all(|r| {
            r.orbit_residual.is_none_or(|v| v <= b.orbit_residual)
                && r.shift_rate.is_none_or(|v| v == 1.0)
                && r.yaw_delta <= b.yaw_delta
                && r.size_drift <= b.size_drift
                && r.center_drift <= b.static_drift
                && r.static_drift <= b.static_drift
        })
    }
}

fn min_cross_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut best = f64::INFINITY;
    for p in a {
        for q in b {
            best = best.min(dist2(*p, *q));
        }
    }
    best.sqrt()
}

struct ProbeRun {
    dets: Vec<Detection>,
    region_centers: Vec<usize>,
    seed_source: Vec<usize>,
    seed_fg: Vec<bool>,
    seed_ori: Vec<Option<usize>>,
    orbit: Vec<f64>,
    channels: usize,
    votes: Vec<Vec3>,
}

fn probe_run<T: Real>(model: &Model<T>, scene: &Scene) -> Result<ProbeRun> {
    model.check_scene(scene)?;
    let mut g = Graph::new(&model.store);
    let out = forward(model, &mut g, scene)?;
    let dets = match out.proposals {
        Some(p) => assemble_detections(model, &out, g.value(p))?,
        None => Vec::new(),
    };
    let (orbit, channels) = match &out.seed_orbit {
        Some(o) => (g.value(o.var).data.iter().map(|v| v.as_f64()).collect(), o.channels),
        None => (Vec::new(), 0),
    };
    let v = g.value(out.votes);
    let votes = (0..v.rows)
        .map(|i| [v.at(i, 0).as_f64(), v.at(i, 1).as_f64(), v.at(i, 2).as_f64()])
        .collect();
    Ok(ProbeRun {
        dets,
        region_centers: out.regions.iter().map(|r| r.center_seed).collect(),
        seed_source: out.seed_source,
        seed_fg: out.seed_foreground,
        seed_ori: out.seed_orientation.iter().map(|o| o.map(|e| e.index())).collect(),
        orbit,
        channels,
        votes,
    })
}

/// Rotates one object by every group element and compares the runs.
pub fn equivariance_probe<T: Real>(model: &Model<T>, scene: &Scene, object_id: usize) -> Result<ProbeReport> {
    if object_id >= scene.gt_boxes.len() {
        return Err(EonError::InvalidArgument(format!(
            "object {object_id} not in scene ({} objects)",
            scene.gt_boxes.len()
        )));
    }
    let group = model.group;
    let n = group.order();
    let pivot = scene.gt_boxes[object_id].center;
    let in_object: Vec<bool> = scene.object_id.iter().map(|&o| o == object_id as i64).collect();
    let obj_pts: Vec<Vec3> = (0..scene.len()).filter(|&i| in_object[i]).map(|i| scene.points[i]).collect();
    let other_pts: Vec<Vec3> = (0..scene.len()).filter(|&i| !in_object[i]).map(|i| scene.points[i]).collect();
    let point_gap = min_cross_distance(&obj_pts, &other_pts);
    let required_point_gap = model.cfg.influence_radius();
    let required_vote_gap = model.cfg.cluster_radius;

    let base = probe_run(model, scene)?;
    let vote_gap_of = |run: &ProbeRun| {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, &s) in run.seed_source.iter().enumerate() {
            if in_object[s] {
                a.push(run.votes[i]);
            } else {
                b.push(run.votes[i]);
            }
        }
        min_cross_distance(&a, &b)
    };
    let mut vote_gap = vote_gap_of(&base);
    let mut rows = Vec::with_capacity(n);
    for g0 in group.elements() {
        let (c, s) = g0.cos_sin();
        let rotated = scene.rotate_object(object_id, g0.angle(), c, s)?;
        let run = probe_run(model, &rotated)?;
        vote_gap = vote_gap.min(vote_gap_of(&run));
        let seeds_match = run.seed_source == base.seed_source;
        let comparable = seeds_match && run.region_centers == base.region_centers;

        let obj_seeds: Vec<usize> = (0..base.seed_source.len()).filter(|&i| in_object[base.seed_source[i]]).collect();
        let (orbit_residual, shift_rate) = if !seeds_match {
            (Some(f64::INFINITY), Some(0.0))
        } else {
            let residual = (!base.orbit.is_empty()).then(|| {
                let per_point = base.channels * n;
                let pick = |orbit: &[f64]| -> Vec<f64> {
                    obj_seeds.iter().flat_map(|&p| orbit[p * per_point..(p + 1) * per_point].iter().copied()).collect()
                };
                orbit_shift_residual(&pick(&base.orbit), &pick(&run.orbit), obj_seeds.len(), n, g0.index())
            });
            let fg: Vec<usize> = obj_seeds.iter().copied().filter(|&p| base.seed_fg[p] && base.seed_ori[p].is_some()).collect();
            let rate = (model.cfg.variant.suspends() && !fg.is_empty()).then(|| {
                let ok = fg
                    .iter()
                    .filter(|&&p| match (base.seed_ori[p], run.seed_ori[p]) {
                        (Some(a), Some(b)) => (a + g0.index()) % n == b,
                        _ => false,
                    })
                    .count();
                ok as f64 / fg.len() as f64
            });
            (residual, rate)
        };

        let mut row = ProbeRow {
            g0: g0.index(),
            angle: g0.angle(),
            orbit_residual,
            shift_rate,
            yaw_delta: 0.0,
            size_drift: 0.0,
            center_drift: 0.0,
            static_drift: 0.0,
            object_regions: 0,
            static_regions: 0,
        };
        if !comparable || run.dets.len() != base.dets.len() {
            row.yaw_delta = f64::INFINITY;
            row.size_drift = f64::INFINITY;
            row.center_drift = f64::INFINITY;
            row.static_drift = f64::INFINITY;
        } else {
            for (ri, (a, b)) in base.dets.iter().zip(&run.dets).enumerate() {
                let size = dist2(a.bbox.size, b.bbox.size).sqrt();
                if in_object[base.seed_source[base.region_centers[ri]]] {
                    row.object_regions += 1;
                    let expect = rotate_point_about(a.bbox.center, pivot, c, s);
                    let dyaw = wrap_angle(b.bbox.yaw - a.bbox.yaw - g0.angle()).abs();
                    row.yaw_delta = row.yaw_delta.max(dyaw);
                    row.size_drift = row.size_drift.max(size);
                    row.center_drift = row.center_drift.max(dist2(expect, b.bbox.center).sqrt());
                } else {
                    row.static_regions += 1;
                    let drift = dist2(a.bbox.center, b.bbox.center).sqrt().max(size);
                    row.static_drift = row.static_drift.max(drift);
                }
            }
        }
        rows.push(row);
    }
    Ok(ProbeReport {
        variant: model.cfg.variant,
        group_order: n,
        object_id,
        applicable: point_gap > required_point_gap && vote_gap > required_vote_gap,
        point_gap,
        vote_gap,
        required_point_gap,
        required_vote_gap,
        rows,
    })
}

fn orbit_shift_residual(a: &[f64], b: &[f64], points: usize, order: usize, shift: usize) -> f64 {
    let ch = a.len().checked_div(points * order).unwrap_or(0);
    let mut worst = 0.0f64;
    for p in 0..points {
        for k in 0..order {
            let moved = (shift + k) % order;
            for j in 0..ch {
                worst = worst.max((a[(p * order + k) * ch + j] - b[(p * order + moved) * ch + j]).abs());
            }
        }
    }
    worst
}

/// Anchor sources, flattened orbit values and group order of one stage.
type StageOrbit = (Vec<usize>, Vec<f64>, usize);

/// Rotates the whole cloud about the vertical axis by `g0` and returns the
/// largest deviation of backbone orbits from the circularly shifted
/// reference. Stages carried with a smaller group are skipped.
pub fn whole_scene_shift_residual<T: Real>(model: &Model<T>, points: &[Vec3], g0: &GroupElement) -> Result<f64> {
    let bb = &model.net.backbone;
    if g0.order() != bb.group1.order() {
        return Err(EonError::GroupMismatch {
            expected: bb.group1.order(),
            found: g0.order(),
        });
    }
    let (c, s) = g0.cos_sin();
    let rotated: Vec<Vec3> = points.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]).collect();
    let run = |pts: &[Vec3]| -> Result<Vec<StageOrbit>> {
        let mut g = Graph::new(&model.store);
        let (s1, s2) = bb.forward(&mut g, pts)?;
        let mut out = vec![(s1.source.clone(), g.value(s1.var).data.iter().map(|v| v.as_f64()).collect(), s1.order())];
        if bb.group2.order() == bb.group1.order() {
            out.push((s2.source.clone(), g.value(s2.var).data.iter().map(|v| v.as_f64()).collect(), s2.order()));
        }
        Ok(out)
    };
    let (base, moved) = (run(points)?, run(&rotated)?);
    let mut worst = 0.0f64;
    for ((src_a, a, n), (src_b, b, _)) in base.iter().zip(&moved) {
        if src_a != src_b {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(orbit_shift_residual(a, b, src_a.len(), *n, g0.index()));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub group_order: usize,
    pub num_scenes: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    pub tables: Vec<ApTable>,
    /// Fraction of detections matched at the lowest threshold whose yaw
    /// bin equals the ground truth's; `None` without matches.
    pub orientation_accuracy: Option<f64>,
    pub parameter_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_forward_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeReport>,
    /// `(class, threshold) → [(recall, precision)]`.
    #[serde(default)]
    pub pr_curves: Vec<PrCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_name: String,
    pub threshold: f64,
    pub points: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.tables.iter().find(|t| t.threshold == threshold).map(|t| t.map)
    }
}

pub fn class_names() -> Vec<String> {
    let mut t = default_templates();
    t.sort_by_key(|s| s.class_id);
    t.into_iter().map(|s| s.name.to_string()).collect()
}

/// Deterministic metrics over a split. Per-scene inference runs on
/// `workers` threads; reduction follows scene order.
pub fn evaluate<T: Real>(model: &Model<T>, scenes: &[Scene], thresholds: &[f64], workers: usize) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(EonError::InvalidArgument("at least one IoU threshold is required".into()));
    }
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let dets: Vec<Vec<Detection>> = run_indexed(workers, scenes.len(), |i| run_variant(model, &scenes[i]).map(|r| r.0))
        .into_iter()
        .collect::<Result<_>>()?;
    let names = class_names();
    let group = CyclicGroup::new(model.group.order().max(scenes.first().map_or(1, |s| s.group_order)))?;
    let mut tables = Vec::new();
    let mut curves = Vec::new();
    let mut orientation_accuracy = None;
    for (ti, &thr) in thresholds.iter().enumerate() {
        let mut per_class: Vec<(Vec<bool>, Vec<f64>, usize)> = vec![(Vec::new(), Vec::new(), 0); names.len()];
        let (mut correct, mut matched) = (0usize, 0usize);
        for (scene, sd) in scenes.iter().zip(&dets) {
            for (c, entry) in per_class.iter_mut().enumerate() {
                let gts: Vec<OrientedBox> = scene.gt_boxes.iter().filter(|b| b.class_id == c).cloned().collect();
                let ds: Vec<OrientedBox> = sd.iter().filter(|d| d.bbox.class_id == c).map(|d| d.bbox.clone()).collect();
                let m = match_detections(&ds, &gts, thr);
                for (d, k) in ds.iter().zip(&m) {
                    entry.0.push(k.is_some());
                    entry.1.push(d.score);
                    if let Some(k) = k {
                        matched += 1;
                        if group.angle_to_bin(d.yaw)? == group.angle_to_bin(gts[*k].yaw)? {
                            correct += 1;
                        }
                    }
                }
                entry.2 += gts.len();
            }
        }
        if ti == 0 && matched > 0 {
            orientation_accuracy = Some(correct as f64 / matched as f64);
        }
        let classes: Vec<ClassAp> = per_class
            .iter()
            .enumerate()
            .map(|(c, (flags, scores, num_gt))| {
                curves.push(PrCurve {
                    class_name: names[c].clone(),
                    threshold: thr,
                    points: pr_curve(flags, scores, *num_gt),
                });
                ClassAp {
                    class_id: c,
                    class_name: names[c].clone(),
                    ap: average_precision(flags, scores, *num_gt),
                    num_gt: *num_gt,
                    num_detections: flags.len(),
                    true_positives: flags.iter().filter(|f| **f).count(),
                }
            })
            .collect();
        // classes without ground truth in the split do not enter the mean
        let present: Vec<f64> = classes.iter().filter(|c| c.num_gt > 0).map(|c| c.ap).collect();
        let map = if present.is_empty() {
            classes.iter().map(|c| c.ap).sum::<f64>() / classes.len().max(1) as f64
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        tables.push(ApTable {
            threshold: thr,
            classes,
            map,
        });
    }
    Ok(EvalReport {
        variant: model.cfg.variant,
        group_order: model.group.order(),
        num_scenes: scenes.len(),
        num_gt: scenes.iter().map(|s| s.gt_boxes.len()).sum(),
        num_detections: dets.iter().map(Vec::len).sum(),
        tables,
        orientation_accuracy,
        parameter_count: model.parameter_count(),
        median_forward_seconds: None,
        probe: None,
        pr_curves: curves,
    })
}

/// Median single-scene inference time over `runs` repetitions.
pub fn median_forward_seconds<T: Real>(model: &Model<T>, scene: &Scene, runs: usize) -> f64 {
    measure_forward_time(runs, || {
        let _ = run_variant(model, scene);
    })
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("threshold,class_id,class,ap,num_gt,num_detections,true_positives\n");
    for t in &report.tables {
        for c in &t.classes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t.threshold, c.class_id, c.class_name, c.ap, c.num_gt, c.num_detections, c.true_positives
            ));
        }
        out.push_str(&format!("{},,mAP,{},,,\n", t.threshold, t.map));
    }
    out
}

fn plot_err(e: impl std::fmt::Display) -> EonError {
    EonError::InvalidArgument(format!("plot rendering failed: {e}"))
}

/// Axes and curve only: no font backend is linked, so no text is drawn.
/// Recall runs along x over [0, 1], precision along y.
pub fn plot_pr_curve(path: &Path, curve: &PrCurve) -> Result<()> {
    let root = BitMapBackend::new(path, (480, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(40)
        .build_cartesian_2d(0f64..1f64, 0f64..1.05f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(0)
        .y_labels(0)
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(curve.points.iter().copied(), &BLUE))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Total loss against epoch, drawn without text like [`plot_pr_curve`].
pub fn plot_losses(path: &Path, log: &[EpochLog]) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_epoch = log.iter().map(|e| e.epoch).max().unwrap_or(1).max(1) as f64;
    let max_loss = log
        .iter()
        .map(|e| e.total)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..max_epoch, 0f64..max_loss * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(0)
        .y_labels(0)
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(log.iter().map(|e| (e.epoch as f64, e.total)), &RED))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Writes `report.json`, `report.csv`, PR plots and the loss plot.
pub fn write_report(dir: &Path, report: &EvalReport, log: &[EpochLog]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| EonError::io(dir, e))?;
    let json = serde_json::to_vec_pretty(report).map_err(|e| EonError::parse("report.json", e.to_string()))?;
    let p = dir.join("report.json");
    fs::write(&p, json).map_err(|e| EonError::io(&p, e))?;
    let p = dir.join("report.csv");
    fs::write(&p, report_csv(report)).map_err(|e| EonError::io(&p, e))?;
    for c in &report.pr_curves {
        plot_pr_curve(&dir.join(format!("pr_{}_{}.png", c.class_name, c.threshold)), c)?;
    }
    plot_losses(&dir.join("loss.png"), log)
}

/// Per-threshold per-class AP rows keyed for comparisons.
pub fn ap_by_class(report: &EvalReport) -> BTreeMap<(String, String), f64> {
    let mut m = BTreeMap::new();
    for t in &report.tables {
        for c in &t.classes {
            m.insert((format!("{}", t.threshold), c.class_name.clone()), c.ap);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: f64) -> OrientedBox {
        OrientedBox::new([x, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0).unwrap()
    }

    #[test]
    fn matching_examples() {
        let gt = vec![unit(0.0)];
        assert_eq!(match_detections(&[unit(0.0).with_score(0.5)], &gt, 0.25), vec![Some(0)]);
        let dup = [unit(0.0).with_score(0.4), unit(0.0).with_score(0.9)];
        assert_eq!(match_detections(&dup, &gt, 0.25), vec![None, Some(0)]);
        // IoU of two unit cubes offset by 0.5385 is about 0.3
        let d = unit(1.0 - 2.0 * 0.3 / 1.3).with_score(1.0);
        let iou = rotated_iou(&d, &gt[0]);
        assert!((iou - 0.3).abs() < 1e-9);
        assert_eq!(match_detections(&[d], &gt, 0.5), vec![None]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true], &[0.9, 0.8], 2), 1.0);
        assert_eq!(average_precision(&[], &[], 3), 0.0);
        let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[], &[], 0), 1.0);
        assert_eq!(average_precision(&[false], &[0.3], 0), 0.0);
    }

    #[test]
    fn ap_ignores_input_order() {
        let a = average_precision(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.1], 3);
        let b = average_precision(&[false, true, false, true], &[0.1, 0.7, 0.8, 0.9], 3);
        assert_eq!(a, b);
    }
}
