#![allow(dead_code, clippy::needless_range_loop)]

use eon_core::detector::{DetectorConfig, Variant};
use eon_core::eqvnet::{BackboneConfig, StageConfig};
use eon_core::geometry::OrientedBox;
use eon_core::scenegen::{generate_scene, Scene, SceneGenConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Detector small enough for finite differences over every parameter.
pub fn tiny_config(variant: Variant) -> DetectorConfig {
    DetectorConfig {
        variant,
        backbone: BackboneConfig {
            stage1: StageConfig { samples: 24, radius: 0.35, max_neighbors: 6, hidden: 3, width: 3 },
            stage2: StageConfig { samples: 10, radius: 0.7, max_neighbors: 6, hidden: 3, width: 4 },
            kernel_width: 3,
            depthwise: true,
        },
        vote_hidden: 3,
        num_regions: 3,
        region_hidden: 3,
        region_width: 3,
        proposal_hidden: 3,
        precision: eon_core::detector::Precision::F64,
        ..DetectorConfig::default()
    }
}

/// A sparse one-or-two object scene for cheap end-to-end runs.
pub fn small_scene(seed: u64) -> Scene {
    generate_scene(&small_scene_config(), seed).unwrap()
}

pub fn small_scene_config() -> SceneGenConfig {
    SceneGenConfig {
        min_objects: 1,
        max_objects: 2,
        area: [4.0, 4.0],
        points_per_object: 32,
        floor_density: 2.0,
        wall_points: 8,
        ..SceneGenConfig::default()
    }
}

/// Tiny detector on small scenes with three training and two test scenes.
pub fn small_run_config() -> eon_core::cli::RunConfig {
    let mut detector = tiny_config(Variant::Eon);
    detector.epochs = 1;
    eon_core::cli::RunConfig {
        scene: small_scene_config(),
        detector,
        splits: [("train".to_string(), 3), ("test".to_string(), 2)].into(),
        timing_runs: 1,
        ..Default::default()
    }
}

/// Grid-yaw scenes whose objects sit farther apart than every receptive
/// and vote-cluster radius of the default detector.
pub fn isolated_scene(seed: u64) -> Scene {
    let gap = DetectorConfig::default().influence_radius() + 0.5;
    generate_scene(&SceneGenConfig::isolated(4, gap), seed).unwrap()
}

/// Volume fraction estimate: uniform samples in the union's bounding cube.
pub fn monte_carlo_iou(a: &OrientedBox, b: &OrientedBox, samples: usize, seed: u64) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in a.corners().iter().chain(b.corners().iter()) {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let mut r = rng(seed);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [
            r.random_range(lo[0]..hi[0]),
            r.random_range(lo[1]..hi[1]),
            r.random_range(lo[2]..hi[2]),
        ];
        let (ia, ib) = (a.contains(p), b.contains(p));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

/// AP by enumerating every ranked prefix: precision envelope at each
/// recall increment, summed and divided by the ground-truth count.
pub fn brute_force_ap(flags: &[bool], scores: &[f64], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut idx: Vec<usize> = (0..flags.len()).collect();
    // insertion sort: score descending, ties by index
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (idx[j - 1], idx[j]);
            let before = scores[b] > scores[a] || (scores[b] == scores[a] && b < a);
            if !before {
                break;
            }
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    let prefix = |k: usize| {
        let tp = idx[..k].iter().filter(|&&i| flags[i]).count();
        tp as f64 / k as f64
    };
    let mut total = 0.0;
    for k in 1..=idx.len() {
        if flags[idx[k - 1]] {
            let envelope = (k..=idx.len()).map(prefix).fold(f64::NEG_INFINITY, f64::max);
            total += envelope;
        }
    }
    total / num_gt as f64
}

pub fn random_box(r: &mut ChaCha8Rng) -> OrientedBox {
    OrientedBox::new(
        [r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), r.random_range(-0.3..0.3)],
        [r.random_range(0.2..1.5), r.random_range(0.2..1.5), r.random_range(0.2..1.0)],
        r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        0,
    )
    .unwrap()
}

/// One random multi-point orbit with scores, checked against its copy shifted
/// by a random `k0`: foreground orientations compose with `k0`, `f_inv` is
/// bitwise equal, and background `f_inv` is the same slot-wise max.
pub fn check_random_orbit(seed: u64) -> Result<(), String> {
    use eon_core::autograd::{Tape, Tensor};
    use eon_core::eqvnet::OrbitFeature;
    use eon_core::rotgroup::{shift_orbit, CyclicGroup};
    use eon_core::suspension::decompose;

    let mut r = rng(seed);
    let order = [1usize, 2, 3, 4, 6, 8][r.random_range(0..6)];
    let group = CyclicGroup::new(order).unwrap();
    let points = r.random_range(1..6);
    let channels = r.random_range(1..5);
    let k0 = group.element(r.random_range(0..order)).unwrap();
    let fg: Vec<bool> = (0..points).map(|_| r.random_bool(0.6)).collect();
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    for _ in 0..points {
        let orbit: Vec<Vec<f64>> = (0..order)
            .map(|_| (0..channels).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        // distinct scores so the argmax is unique
        let mut s: Vec<f64> = (0..order).map(|k| k as f64 + r.random_range(0.0..0.5)).collect();
        for i in (1..order).rev() {
            s.swap(i, r.random_range(0..=i));
        }
        rows.push(orbit);
        scores.push(s);
    }
    let flatten = |rows: &[Vec<Vec<f64>>]| rows.iter().flatten().flatten().copied().collect::<Vec<f64>>();
    let shifted_rows: Vec<Vec<Vec<f64>>> = rows.iter().map(|o| shift_orbit(o, &k0).unwrap()).collect();
    let shifted_scores: Vec<Vec<f64>> = scores.iter().map(|s| shift_orbit(s, &k0).unwrap()).collect();

    let mut tape = Tape::<f64>::new();
    let mut orbit = |data: Vec<f64>| OrbitFeature {
        var: tape.constant(Tensor::from_vec(points * order, channels, data)),
        group,
        channels,
        positions: vec![[0.0; 3]; points],
        source: (0..points).collect(),
        parent: (0..points).collect(),
    };
    let a = orbit(flatten(&rows));
    let b = orbit(flatten(&shifted_rows));
    let sa = Tensor::from_vec(points, order, scores.concat());
    let sb = Tensor::from_vec(points, order, shifted_scores.concat());
    let da = decompose(&mut tape, &a, &sa, &fg).map_err(|e| e.to_string())?;
    let db = decompose(&mut tape, &b, &sb, &fg).map_err(|e| e.to_string())?;
    for p in 0..points {
        match (da.orientation[p], db.orientation[p]) {
            (Some(ga), Some(gb)) => {
                if gb != k0.compose(&ga).unwrap() {
                    return Err(format!("point {p}: {gb:?} != {k0:?} ∘ {ga:?}"));
                }
            }
            (None, None) if !fg[p] => {}
            other => return Err(format!("point {p}: foreground mismatch {other:?}")),
        }
        if !fg[p] {
            for c in 0..channels {
                let max = (0..order).map(|g| rows[p][g][c]).fold(f64::NEG_INFINITY, f64::max);
                if tape.value(da.f_inv).at(p, c) != max {
                    return Err(format!("point {p}: background f_inv is not the slot-wise max"));
                }
            }
        }
    }
    if tape.value(da.f_inv) != tape.value(db.f_inv) {
        return Err("f_inv differs under the orbit shift".into());
    }
    Ok(())
}

/// Random ranked detections with frequent score ties; `num_gt` is at least
/// the number of true positives.
pub fn random_ap_case(seed: u64) -> (Vec<bool>, Vec<f64>, usize) {
    let mut r = rng(seed);
    let n = r.random_range(0..25);
    let flags: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64 / 8.0).collect();
    let tp = flags.iter().filter(|&&f| f).count();
    let num_gt = tp + r.random_range(0..5);
    (flags, scores, num_gt)
}
