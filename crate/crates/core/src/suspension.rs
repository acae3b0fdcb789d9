//! Splits seed orbits into an orientation hypothesis and an invariant
//! object-frame feature, and picks one orientation per region.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::eqvnet::OrbitFeature;
use crate::error::{EonError, Result};
use crate::rotgroup::{CyclicGroup, GroupElement};
use crate::scenegen::{derive_labels, Scene, SceneLabels};

/// Per-seed result of the suspension. `orientation[p]` is `Some` exactly
/// where `foreground[p]` holds.
#[derive(Clone, Debug)]
pub struct DecomposedSeeds {
    /// `[P × C]` on the tape.
    pub f_inv: Var,
    pub orientation: Vec<Option<GroupElement>>,
    /// `[P × N]` orientation scores, row-major.
    pub orientation_scores: Vec<f64>,
    pub foreground: Vec<bool>,
}

impl DecomposedSeeds {
    pub fn len(&self) -> usize {
        self.foreground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty()
    }

    /// Score of point `p` at its chosen slot, zero for background.
    pub fn chosen_score(&self, p: usize, order: usize) -> f64 {
        match self.orientation[p] {
            Some(g) => self.orientation_scores[p * order + g.index()],
            None => 0.0,
        }
    }
}

/// First index of the maximum.
pub fn argmax_slot<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `f_inv = orbit(p, g̃)` where an orientation is given, slot-wise max otherwise.
pub fn suspend_features<T: Real>(
    tape: &mut Tape<T>,
    orbit: &OrbitFeature,
    orientation: &[Option<GroupElement>],
) -> Result<Var> {
    let n = orbit.order();
    if orientation.len() != orbit.len() {
        return Err(EonError::Shape(format!(
            "{} orientations for {} orbit points",
            orientation.len(),
            orbit.len()
        )));
    }
    let segments: Vec<Vec<usize>> = orientation
        .iter()
        .enumerate()
        .map(|(p, o)| match o {
            Some(g) => vec![p * n + g.index()],
            None => (p * n..(p + 1) * n).collect(),
        })
        .collect();
    Ok(tape.segment_max(orbit.var, &segments))
}

pub fn decompose<T: Real>(
    tape: &mut Tape<T>,
    orbit: &OrbitFeature,
    scores: &Tensor<T>,
    foreground: &[bool],
) -> Result<DecomposedSeeds> {
    let n = orbit.order();
    if (scores.rows, scores.cols) != (orbit.len(), n) || foreground.len() != orbit.len() {
        return Err(EonError::Shape(format!(
            "decompose: orbit has {} points × {n} slots, scores are {}×{}, mask has {}",
            orbit.len(),
            scores.rows,
            scores.cols,
            foreground.len()
        )));
    }
    let orientation: Vec<Option<GroupElement>> = foreground
        .iter()
        .enumerate()
        .map(|(p, fg)| fg.then(|| orbit.group.element_mod(argmax_slot(scores.row(p)) as i64)))
        .collect();
    let f_inv = suspend_features(tape, orbit, &orientation)?;
    Ok(DecomposedSeeds {
        f_inv,
        orientation,
        orientation_scores: scores.data.iter().map(|v| v.as_f64()).collect(),
        foreground: foreground.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionRule {
    #[default]
    Mode,
    CentralPoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMember {
    /// `None` for background members.
    pub orientation: Option<GroupElement>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionOrientation {
    pub element: GroupElement,
    pub low_confidence: bool,
}

/// Mode rule: most frequent foreground bin, ties by larger summed score, then
/// smaller index. Central-point rule: the designated member's orientation.
/// No usable foreground member gives the identity with the flag set.
pub fn region_orientation(
    group: &CyclicGroup,
    members: &[RegionMember],
    rule: RegionRule,
    central: Option<usize>,
) -> Result<RegionOrientation> {
    let fallback = RegionOrientation {
        element: group.identity(),
        low_confidence: true,
    };
    match rule {
        RegionRule::CentralPoint => {
            let c = central.ok_or_else(|| EonError::Config("central_point rule needs a central member".into()))?;
            let m = members
                .get(c)
                .ok_or_else(|| EonError::InvalidArgument(format!("central member {c} out of range")))?;
            Ok(match m.orientation {
                Some(element) => RegionOrientation {
                    element,
                    low_confidence: false,
                },
                None => fallback,
            })
        }
        RegionRule::Mode => {
            let n = group.order();
            let mut counts = vec![0usize; n];
            let mut sums = vec![0.0f64; n];
            for m in members {
                if let Some(g) = m.orientation {
                    if g.order() != n {
                        return Err(EonError::GroupMismatch {
                            expected: n,
                            found: g.order(),
                        });
                    }
                    counts[g.index()] += 1;
                    sums[g.index()] += m.score;
                }
            }
            let mut best: Option<usize> = None;
            for k in 0..n {
                if counts[k] == 0 {
                    continue;
                }
                best = match best {
                    None => Some(k),
                    Some(b) if counts[k] > counts[b] || (counts[k] == counts[b] && sums[k] > sums[b]) => Some(k),
                    keep => keep,
                };
            }
            Ok(match best {
                Some(k) => RegionOrientation {
                    element: group.element_mod(k as i64),
                    low_confidence: false,
                },
                None => fallback,
            })
        }
    }
}

/// Scene labels with orientation bins expressed in `group`.
pub fn labels_for_group<'a>(scene: &'a Scene, group: &CyclicGroup) -> Result<Cow<'a, SceneLabels>> {
    let n = scene.points.len();
    let l = &scene.labels;
    if l.foreground.len() != n || l.orientation_bin.len() != n || l.vote_target.len() != n {
        return Err(EonError::Config("oracle mode needs per-point scene labels".into()));
    }
    if scene.group_order == group.order() {
        Ok(Cow::Borrowed(l))
    } else {
        derive_labels(&scene.points, &scene.object_id, &scene.gt_boxes, group).map(Cow::Owned)
    }
}

/// Replaces predicted foreground and/or orientation with ground truth and
/// re-slices `f_inv` to match.
pub fn oracle_overrides<T: Real>(
    tape: &mut Tape<T>,
    decomposed: &DecomposedSeeds,
    orbit: &OrbitFeature,
    scene: &Scene,
    use_gt_orientation: bool,
    use_gt_segmentation: bool,
) -> Result<DecomposedSeeds> {
    if !use_gt_orientation && !use_gt_segmentation {
        return Ok(decomposed.clone());
    }
    let labels = labels_for_group(scene, &orbit.group)?;
    let n = orbit.order();
    let mut out = decomposed.clone();
    for (p, &src) in orbit.source.iter().enumerate() {
        if use_gt_segmentation {
            out.foreground[p] = labels.foreground[src];
        }
        let gt_bin = labels.orientation_bin[src];
        out.orientation[p] = if !out.foreground[p] {
            None
        } else if use_gt_orientation && gt_bin >= 0 {
            Some(orbit.group.element_mod(gt_bin))
        } else {
            let row = &decomposed.orientation_scores[p * n..(p + 1) * n];
            Some(orbit.group.element_mod(argmax_slot(row) as i64))
        };
    }
    out.f_inv = suspend_features(tape, orbit, &out.orientation)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotgroup::shift_orbit;

    fn orbit_of(tape: &mut Tape<f64>, points: usize, order: usize, channels: usize, data: Vec<f64>) -> OrbitFeature {
        let var = tape.constant(Tensor::from_vec(points * order, channels, data));
        OrbitFeature {
            var,
            group: CyclicGroup::new(order).unwrap(),
            channels,
            positions: vec![[0.0; 3]; points],
            source: (0..points).collect(),
            parent: (0..points).collect(),
        }
    }

    #[test]
    fn foreground_takes_argmax_slot() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let orbit = orbit_of(&mut t, 1, 4, 2, data);
        let scores = Tensor::from_vec(1, 4, vec![0.1, 2.0, -1.0, 0.5]);
        let d = decompose(&mut t, &orbit, &scores, &[true]).unwrap();
        assert_eq!(d.orientation[0].unwrap().index(), 1);
        assert_eq!(t.value(d.f_inv).data, vec![2.0, 3.0]);
    }

    #[test]
    fn background_takes_slotwise_max() {
        let mut t = Tape::new();
        // channel 0 = [1, 3], channel 1 = [5, 2] over the two slots
        let orbit = orbit_of(&mut t, 1, 2, 2, vec![1.0, 5.0, 3.0, 2.0]);
        let scores = Tensor::from_vec(1, 2, vec![0.0, 0.0]);
        let d = decompose(&mut t, &orbit, &scores, &[false]).unwrap();
        assert_eq!(d.orientation[0], None);
        assert_eq!(t.value(d.f_inv).data, vec![3.0, 5.0]);
    }

    #[test]
    fn trivial_group_returns_orbit() {
        let mut t = Tape::new();
        let orbit = orbit_of(&mut t, 2, 1, 2, vec![1.0, -2.0, 0.5, 4.0]);
        let scores = Tensor::from_vec(2, 1, vec![0.3, -0.3]);
        let d = decompose(&mut t, &orbit, &scores, &[true, false]).unwrap();
        assert_eq!(t.value(d.f_inv).data, vec![1.0, -2.0, 0.5, 4.0]);
        assert!(d.orientation[0].unwrap().is_identity());
    }

    #[test]
    fn mode_rule_examples() {
        let g = CyclicGroup::new(4).unwrap();
        let m = |k: usize, s: f64| RegionMember {
            orientation: Some(g.element(k).unwrap()),
            score: s,
        };
        let r = region_orientation(&g, &[m(1, 0.0), m(1, 0.0), m(3, 0.0), m(1, 0.0), m(2, 0.0)], RegionRule::Mode, None).unwrap();
        assert_eq!(r.element.index(), 1);
        assert!(!r.low_confidence);
        let r = region_orientation(&g, &[m(1, 0.4), m(2, 0.9)], RegionRule::Mode, None).unwrap();
        assert_eq!(r.element.index(), 2);
        let r = region_orientation(&g, &[m(3, 0.5), m(2, 0.5)], RegionRule::Mode, None).unwrap();
        assert_eq!(r.element.index(), 2);
        let bg = RegionMember {
            orientation: None,
            score: 9.0,
        };
        let r = region_orientation(&g, &[bg], RegionRule::Mode, None).unwrap();
        assert!(r.element.is_identity() && r.low_confidence);
        let r = region_orientation(&g, &[bg, m(3, 0.1)], RegionRule::CentralPoint, Some(1)).unwrap();
        assert_eq!(r.element.index(), 3);
        assert!(region_orientation(&g, &[bg], RegionRule::CentralPoint, None).is_err());
    }

    #[test]
    fn shifted_orbit_composes_orientation() {
        let mut t = Tape::new();
        let group = CyclicGroup::new(4).unwrap();
        let data = vec![0.3, 1.0, -0.2, 0.7, 0.9, 0.1, 0.4, -1.0];
        let scores = vec![0.1, 2.0, -1.0, 0.5];
        let k0 = group.element(3).unwrap();
        let rows: Vec<[f64; 2]> = data.chunks(2).map(|c| [c[0], c[1]]).collect();
        let shifted_rows = shift_orbit(&rows, &k0).unwrap();
        let shifted_scores = shift_orbit(&scores, &k0).unwrap();
        let a = orbit_of(&mut t, 1, 4, 2, data);
        let b = orbit_of(&mut t, 1, 4, 2, shifted_rows.concat());
        let da = decompose(&mut t, &a, &Tensor::from_vec(1, 4, scores), &[true]).unwrap();
        let db = decompose(&mut t, &b, &Tensor::from_vec(1, 4, shifted_scores), &[true]).unwrap();
        assert_eq!(db.orientation[0].unwrap(), k0.compose(&da.orientation[0].unwrap()).unwrap());
        assert_eq!(t.value(da.f_inv), t.value(db.f_inv));
    }
}
