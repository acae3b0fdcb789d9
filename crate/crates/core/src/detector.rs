//! Voting detector in five variants, its losses, training loop and
//! checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{safe_atan2, sigmoid, Gradients, ParamId, Real, Tensor, Var};
use crate::eqvnet::{
    ball_query, component_fps, count_parameters, decode_params_into, encode_params, orientation_head, read_file,
    seeded_rng, segmentation_head, write_file, Backbone, BackboneConfig, Graph, LayerSpec, Mlp2, OrbitFeature,
    ParamIndexEntry, ParamStore,
};
use crate::error::{EonError, Result};
use crate::geometry::{box_to_scene_frame, dist2, rotated_iou, OrientedBox, Vec3};
use crate::parallel::run_indexed;
use crate::rotgroup::{wrap_angle, CyclicGroup, GroupElement};
use crate::scenegen::{default_templates, object_rotation_augment, Scene};
use crate::suspension::{
    argmax_slot, decompose, labels_for_group, oracle_overrides, region_orientation, suspend_features,
    DecomposedSeeds, RegionMember, RegionOrientation, RegionRule,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Log-size outputs are clamped to this magnitude when assembling boxes.
const MAX_LOG_SIZE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Eon,
    PreEon,
    FullEon,
    Ion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Eon,
        Variant::PreEon,
        Variant::FullEon,
        Variant::Ion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Eon => "eon",
            Variant::PreEon => "pre_eon",
            Variant::FullEon => "full_eon",
            Variant::Ion => "ion",
        }
    }

    /// Whether the variant retains an orientation hypothesis.
    pub fn suspends(&self) -> bool {
        matches!(self, Variant::Eon | Variant::PreEon | Variant::FullEon)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent with momentum.
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub vote: f64,
    pub segmentation: f64,
    pub orientation: f64,
    pub objectness: f64,
    pub center: f64,
    pub size: f64,
    pub yaw: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vote: 1.0,
            segmentation: 0.5,
            orientation: 0.5,
            objectness: 0.5,
            center: 1.0,
            size: 1.0,
            yaw: 0.5,
            class: 0.2,
        }
    }
}

impl LossWeights {
    fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("vote", self.vote),
            ("segmentation", self.segmentation),
            ("orientation", self.orientation),
            ("objectness", self.objectness),
            ("center", self.center),
            ("size", self.size),
            ("yaw", self.yaw),
            ("class", self.class),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub variant: Variant,
    pub group_order: usize,
    pub region_rule: RegionRule,
    pub use_gt_orientation: bool,
    pub use_gt_segmentation: bool,
    pub backbone: BackboneConfig,
    pub vote_hidden: usize,
    pub num_regions: usize,
    pub cluster_radius: f64,
    pub max_region_members: usize,
    pub region_hidden: usize,
    pub region_width: usize,
    pub proposal_hidden: usize,
    pub proposals_per_region: usize,
    pub nms_iou: f64,
    /// Foreground when the segmentation logit exceeds this value.
    pub foreground_logit: f64,
    pub positive_radius: f64,
    pub negative_radius: f64,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiply the step size by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Global gradient-norm clip; zero disables clipping.
    pub max_grad_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Object rotation augmentation range in degrees; zero disables it.
    pub objaug_degrees: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Eon,
            group_order: 4,
            region_rule: RegionRule::Mode,
            use_gt_orientation: false,
            use_gt_segmentation: false,
            backbone: BackboneConfig::default(),
            vote_hidden: 64,
            num_regions: 48,
            cluster_radius: 0.6,
            max_region_members: 32,
            region_hidden: 64,
            region_width: 64,
            proposal_hidden: 64,
            proposals_per_region: 1,
            nms_iou: 0.25,
            foreground_logit: 0.0,
            positive_radius: 0.3,
            negative_radius: 0.6,
            loss_weights: LossWeights::default(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            momentum: 0.9,
            lr_decay: 0.3,
            lr_decay_every: 30,
            max_grad_norm: 10.0,
            epochs: 40,
            batch_size: 1,
            seed: 7,
            precision: Precision::F32,
            objaug_degrees: 0.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EonError::Config(m.to_string()));
        if self.group_order == 0 {
            return bad("group_order must be at least 1");
        }
        self.backbone.validate()?;
        if !(self.cluster_radius > 0.0) || !(self.positive_radius > 0.0) || !(self.negative_radius > 0.0) {
            return bad("radii must be positive");
        }
        if self.positive_radius >= self.negative_radius {
            return bad("positive_radius must be smaller than negative_radius");
        }
        if self.loss_weights.entries().iter().any(|(_, w)| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if self.proposals_per_region != 1 {
            return bad("exactly one proposal per region is supported");
        }
        if self.num_regions == 0 || self.max_region_members == 0 || self.batch_size == 0 {
            return bad("num_regions, max_region_members and batch_size must be positive");
        }
        if [self.vote_hidden, self.region_hidden, self.region_width, self.proposal_hidden].contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be positive and momentum in [0, 1)");
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return bad("lr_decay must be positive and lr_decay_every at least 1");
        }
        if !(self.objaug_degrees >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return bad("objaug_degrees and max_grad_norm must be non-negative");
        }
        if !(self.nms_iou >= 0.0 && self.nms_iou <= 1.0) {
            return bad("nms_iou must lie in [0, 1]");
        }
        Ok(())
    }

    /// Group order actually carried by the network.
    pub fn model_order(&self) -> usize {
        if self.variant == Variant::Baseline {
            1
        } else {
            self.group_order
        }
    }

    pub fn uses_oracle(&self) -> bool {
        self.use_gt_orientation || self.use_gt_segmentation
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Reach of the backbone plus the vote-cluster radius.
    pub fn influence_radius(&self) -> f64 {
        self.backbone.receptive_radius() + self.cluster_radius
    }
}

/// Box sizes of the shape templates, indexed by class.
pub fn class_template_sizes() -> Vec<Vec3> {
    let mut t = default_templates();
    t.sort_by_key(|s| s.class_id);
    t.iter().map(|s| s.box_size).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub backbone: Backbone,
    pub seg_head: Mlp2,
    pub orient_head: Option<Mlp2>,
    pub vote_mlp: Mlp2,
    pub region_mlp: Mlp2,
    pub proposal_mlp: Mlp2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    pub cfg: DetectorConfig,
    pub store: ParamStore<T>,
    pub net: Network,
    pub group: CyclicGroup,
    pub templates: Vec<Vec3>,
}

/// Output columns of the proposal head.
pub struct ProposalLayout {
    pub classes: usize,
}

impl ProposalLayout {
    pub const CENTER: usize = 0;
    pub const LOG_SIZE: usize = 3;
    pub const SIN_COS: usize = 6;
    pub const CLASS: usize = 8;

    pub fn objectness(&self) -> usize {
        Self::CLASS + self.classes
    }

    pub fn width(&self) -> usize {
        Self::CLASS + self.classes + 1
    }
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let group = CyclicGroup::new(cfg.model_order())?;
        let trivial = CyclicGroup::new(1)?;
        let group2 = if cfg.variant == Variant::PreEon { trivial } else { group };
        let templates = class_template_sizes();
        let layout = ProposalLayout {
            classes: templates.len(),
        };
        let mut rng = seeded_rng(cfg.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg.backbone, group, group2, &mut rng)?;
        let c1 = cfg.backbone.stage1.width;
        let c2 = cfg.backbone.stage2.width;
        let head_width = if cfg.variant == Variant::PreEon { c1 } else { c2 };
        let seg_head = Mlp2::new(&mut store, "seg_head", [head_width, head_width, 1], false, &mut rng);
        let orient_head = match cfg.variant {
            Variant::Eon | Variant::PreEon if group.order() > 1 => Some(Mlp2::new(
                &mut store,
                "orient_head",
                [head_width, head_width, 1],
                false,
                &mut rng,
            )),
            Variant::FullEon if group.order() > 1 => Some(Mlp2::new(
                &mut store,
                "orient_head",
                [cfg.region_width, cfg.region_width, 1],
                false,
                &mut rng,
            )),
            _ => None,
        };
        let vote_mlp = Mlp2::new(&mut store, "vote", [c2, cfg.vote_hidden, 3 + c2], false, &mut rng);
        let region_mlp = Mlp2::new(
            &mut store,
            "region",
            [3 + c2, cfg.region_hidden, cfg.region_width],
            true,
            &mut rng,
        );
        let proposal_mlp = Mlp2::new(
            &mut store,
            "proposal",
            [cfg.region_width, cfg.proposal_hidden, layout.width()],
            false,
            &mut rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            store,
            net: Network {
                backbone,
                seg_head,
                orient_head,
                vote_mlp,
                region_mlp,
                proposal_mlp,
            },
            group,
            templates,
        })
    }

    pub fn layout(&self) -> ProposalLayout {
        ProposalLayout {
            classes: self.templates.len(),
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.net.backbone.specs()
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.store)
    }

    /// Checks that a scene can be fed to this model.
    pub fn check_scene(&self, scene: &Scene) -> Result<()> {
        let needs_bins = self.cfg.variant.suspends() && self.group.order() > 1;
        if needs_bins && scene.group_order != self.group.order() {
            return Err(EonError::GroupMismatch {
                expected: self.group.order(),
                found: scene.group_order,
            });
        }
        Ok(())
    }
}

/// One region of grouped votes.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// Seed index whose vote is the region center.
    pub center_seed: usize,
    pub members: Vec<usize>,
    pub center: Vec3,
    pub orientation: RegionOrientation,
}

/// Where the orientation logits of a forward pass live.
#[derive(Clone, Debug)]
pub enum OrientationRows {
    /// One row per listed scene point.
    Points(Vec<usize>),
    /// One row per region.
    Regions,
}

/// Everything a forward pass records for losses, detections and probes.
pub struct ForwardOutput {
    /// Scene indices of the seeds.
    pub seed_source: Vec<usize>,
    pub seed_positions: Vec<Vec3>,
    /// Seed orbit before suspension (absent in pre-suspended variants).
    pub seed_orbit: Option<OrbitFeature>,
    pub seg_logits: Var,
    /// Scene indices of the segmentation rows.
    pub seg_rows: Vec<usize>,
    pub orientation_scores: Option<(Var, OrientationRows)>,
    /// Per-seed foreground and orientation after suspension.
    pub seed_foreground: Vec<bool>,
    pub seed_orientation: Vec<Option<GroupElement>>,
    /// `[S × 3]` scene-frame votes (slot means for per-slot voting).
    pub votes: Var,
    /// `[S·N × 3]` per-slot votes when voting is carried per slot.
    pub slot_votes: Option<Var>,
    pub regions: Vec<Region>,
    /// `[R × width]` raw proposal outputs and `[R × 3]` region centers.
    pub proposals: Option<Var>,
    pub region_centers: Option<Var>,
}

fn rotations_of<T: Real>(elements: impl Iterator<Item = Option<GroupElement>>, inverse: bool) -> Vec<(T, T)> {
    elements
        .map(|e| match e {
            Some(g) => {
                let (c, s) = g.cos_sin();
                (T::of(c), T::of(if inverse { -s } else { s }))
            }
            None => (T::one(), T::zero()),
        })
        .collect()
}

fn positions_tensor<T: Real>(positions: &[Vec3]) -> Tensor<T> {
    Tensor::from_vec(
        positions.len(),
        3,
        positions.iter().flat_map(|p| p.iter().map(|v| T::of(*v))).collect(),
    )
}

fn rows_as_vec3<T: Real>(t: &Tensor<T>) -> Vec<Vec3> {
    (0..t.rows)
        .map(|i| [t.at(i, 0).as_f64(), t.at(i, 1).as_f64(), t.at(i, 2).as_f64()])
        .collect()
}

/// Region centers by farthest-point sampling over votes, members by radius.
pub fn group_regions(votes: &[Vec3], count: usize, radius: f64, max_members: usize) -> Vec<(usize, Vec<usize>)> {
    if votes.is_empty() {
        return Vec::new();
    }
    let centers = component_fps(votes, count, radius);
    let center_pos: Vec<Vec3> = centers.iter().map(|&i| votes[i]).collect();
    let members = ball_query(&center_pos, votes, radius, votes.len());
    centers
        .into_iter()
        .zip(members)
        .map(|(c, mut m)| {
            if m.len() > max_members {
                // keep the center and the nearest others, listed by index
                let mut by_dist: Vec<usize> = m.clone();
                by_dist.sort_by(|&a, &b| dist2(votes[a], votes[c]).total_cmp(&dist2(votes[b], votes[c])).then(a.cmp(&b)));
                by_dist.truncate(max_members);
                if !by_dist.contains(&c) {
                    by_dist.pop();
                    by_dist.push(c);
                }
                by_dist.sort_unstable();
                m = by_dist;
            }
            (c, m)
        })
        .collect()
}

fn foreground_from_logits<T: Real>(logits: &Tensor<T>, threshold: f64) -> Vec<bool> {
    logits.data.iter().map(|v| v.as_f64() > threshold).collect()
}

/// Forward pass of any variant on one scene.
pub fn forward<T: Real>(model: &Model<T>, g: &mut Graph<'_, T>, scene: &Scene) -> Result<ForwardOutput> {
    let cfg = &model.cfg;
    let net = &model.net;
    let n = model.group.order();
    let stage1 = net.backbone.stage1(g, &scene.points)?;

    // Seed features, segmentation, and suspension.
    let seeds;
    let seg_logits;
    let seg_rows;
    let mut orientation_scores = None;
    let mut seed_orbit = None;
    let seed_feat: Var;
    let seed_fg: Vec<bool>;
    let seed_ori: Vec<Option<GroupElement>>;
    let seed_score: Vec<f64>;
    match cfg.variant {
        Variant::PreEon => {
            seg_logits = segmentation_head(g, &net.seg_head, &stage1)?;
            seg_rows = stage1.source.clone();
            let dec = suspend_orbit(model, g, &stage1, seg_logits, scene, &mut orientation_scores)?;
            let inv = OrbitFeature {
                var: dec.f_inv,
                group: net.backbone.group2,
                channels: stage1.channels,
                positions: stage1.positions.clone(),
                source: stage1.source.clone(),
                parent: (0..stage1.len()).collect(),
            };
            let frames: Vec<GroupElement> = dec
                .orientation
                .iter()
                .map(|o| o.unwrap_or_else(|| model.group.identity()))
                .collect();
            seeds = net.backbone.stage2(g, &inv, Some(&frames))?;
            seed_feat = seeds.var;
            seed_fg = seeds.parent.iter().map(|&p| dec.foreground[p]).collect();
            seed_ori = seeds.parent.iter().map(|&p| dec.orientation[p]).collect();
            seed_score = seeds.parent.iter().map(|&p| dec.chosen_score(p, n)).collect();
        }
        Variant::Baseline | Variant::Eon => {
            seeds = net.backbone.stage2(g, &stage1, None)?;
            seg_logits = segmentation_head(g, &net.seg_head, &seeds)?;
            seg_rows = seeds.source.clone();
            let dec = suspend_orbit(model, g, &seeds, seg_logits, scene, &mut orientation_scores)?;
            seed_feat = dec.f_inv;
            seed_score = (0..seeds.len()).map(|p| dec.chosen_score(p, n)).collect();
            seed_fg = dec.foreground;
            seed_ori = dec.orientation;
            seed_orbit = Some(seeds.clone());
        }
        Variant::Ion | Variant::FullEon => {
            seeds = net.backbone.stage2(g, &stage1, None)?;
            seg_logits = segmentation_head(g, &net.seg_head, &seeds)?;
            seg_rows = seeds.source.clone();
            let mut fg = foreground_from_logits(g.value(seg_logits), cfg.foreground_logit);
            if cfg.use_gt_segmentation {
                let labels = labels_for_group(scene, &model.group)?;
                fg = seeds.source.iter().map(|&s| labels.foreground[s]).collect();
            }
            seed_fg = fg;
            seed_ori = vec![None; seeds.len()];
            seed_score = vec![0.0; seeds.len()];
            seed_feat = if cfg.variant == Variant::Ion {
                g.tape.group_max(seeds.var, n)
            } else {
                seeds.var
            };
            seed_orbit = Some(seeds.clone());
        }
    }
    let s = seeds.len();
    let seed_positions = seeds.positions.clone();
    let c2 = cfg.backbone.stage2.width;

    // Voting.
    let per_slot = cfg.variant == Variant::FullEon;
    let vote_out = net.vote_mlp.forward(g, seed_feat);
    let delta = g.tape.slice_cols(vote_out, 0, 3);
    let residual = g.tape.slice_cols(vote_out, 3, c2);
    let vote_feat = g.tape.add(seed_feat, residual);
    let (votes, slot_votes) = if per_slot {
        let rot = rotations_of::<T>((0..s * n).map(|r| Some(model.group.element_mod((r % n) as i64))), false);
        let delta = g.tape.rotate_xy(delta, rot);
        let base: Vec<Vec3> = seed_positions.iter().flat_map(|p| std::iter::repeat_n(*p, n)).collect();
        let base = g.tape.constant(positions_tensor(&base));
        let slot_votes = g.tape.add(base, delta);
        let mut avg = Tensor::zeros(s, s * n);
        let w = T::one() / T::of(n as f64);
        for i in 0..s {
            for k in 0..n {
                avg.data[i * s * n + i * n + k] = w;
            }
        }
        let avg = g.tape.constant(avg);
        (g.tape.matmul(avg, slot_votes), Some(slot_votes))
    } else {
        let rot = rotations_of::<T>(seed_ori.iter().copied(), false);
        let delta = g.tape.rotate_xy(delta, rot);
        let base = g.tape.constant(positions_tensor(&seed_positions));
        (g.tape.add(base, delta), None)
    };

    // Grouping.
    let vote_pos = rows_as_vec3(g.value(votes));
    let grouped = group_regions(&vote_pos, cfg.num_regions, cfg.cluster_radius, cfg.max_region_members);
    let mut regions: Vec<Region> = Vec::with_capacity(grouped.len());
    for (center_seed, members) in grouped {
        let orientation = if cfg.variant.suspends() && !per_slot {
            let list: Vec<RegionMember> = members
                .iter()
                .map(|&m| RegionMember {
                    orientation: seed_ori[m],
                    score: seed_score[m],
                })
                .collect();
            let central = members.iter().position(|&m| m == center_seed);
            region_orientation(&model.group, &list, cfg.region_rule, central)?
        } else {
            RegionOrientation {
                element: model.group.identity(),
                low_confidence: false,
            }
        };
        regions.push(Region {
            center_seed,
            center: vote_pos[center_seed],
            members,
            orientation,
        });
    }
    if regions.is_empty() {
        return Ok(ForwardOutput {
            seed_source: seeds.source.clone(),
            seed_positions,
            seed_orbit,
            seg_logits,
            seg_rows,
            orientation_scores,
            seed_foreground: seed_fg,
            seed_orientation: seed_ori,
            votes,
            slot_votes,
            regions,
            proposals: None,
            region_centers: None,
        });
    }
    let r = regions.len();
    let centers_idx: Vec<usize> = regions.iter().map(|x| x.center_seed).collect();
    let region_centers = g.tape.gather(votes, centers_idx);
    let inv_radius = T::of(1.0 / cfg.cluster_radius);

    // Region aggregation.
    let region_feat = if per_slot {
        let slot_votes = slot_votes.expect("per-slot votes");
        let mut member_rows = Vec::new();
        let mut center_rows = Vec::new();
        let mut rot_elems = Vec::new();
        let mut segments = Vec::with_capacity(r * n);
        for (ri, region) in regions.iter().enumerate() {
            for slot in 0..n {
                let mut seg = Vec::with_capacity(region.members.len());
                for &m in &region.members {
                    seg.push(member_rows.len());
                    member_rows.push(m * n + slot);
                    center_rows.push(ri);
                    rot_elems.push(Some(model.group.element_mod(slot as i64)));
                }
                segments.push(seg);
            }
        }
        let mv = g.tape.gather(slot_votes, member_rows.clone());
        let cv = g.tape.gather(region_centers, center_rows);
        let rel = g.tape.sub(mv, cv);
        let rel = g.tape.rotate_xy(rel, rotations_of::<T>(rot_elems.into_iter(), true));
        let rel = g.tape.scale(rel, inv_radius);
        let feats = g.tape.gather(vote_feat, member_rows);
        let x = g.tape.concat_cols(rel, feats);
        let h = net.region_mlp.forward(g, x);
        let orbit_var = g.tape.segment_max(h, &segments);
        let region_orbit = OrbitFeature {
            var: orbit_var,
            group: model.group,
            channels: cfg.region_width,
            positions: regions.iter().map(|x| x.center).collect(),
            source: centers_idx_of(&regions),
            parent: (0..r).collect(),
        };
        // Suspension at the proposal stage.
        let scores_var = match &net.orient_head {
            Some(head) => Some(orientation_head(g, head, &region_orbit)?),
            None => None,
        };
        let labels = if cfg.use_gt_orientation {
            Some(labels_for_group(scene, &model.group)?)
        } else {
            None
        };
        let mut chosen = Vec::with_capacity(r);
        for (ri, region) in regions.iter_mut().enumerate() {
            let any_fg = region.members.iter().any(|&m| seed_fg[m]);
            region.orientation = if !any_fg {
                RegionOrientation {
                    element: model.group.identity(),
                    low_confidence: true,
                }
            } else if let Some(labels) = &labels {
                let list: Vec<RegionMember> = region
                    .members
                    .iter()
                    .map(|&m| {
                        let bin = labels.orientation_bin[seeds.source[m]];
                        RegionMember {
                            orientation: (seed_fg[m] && bin >= 0).then(|| model.group.element_mod(bin)),
                            score: 0.0,
                        }
                    })
                    .collect();
                region_orientation(&model.group, &list, RegionRule::Mode, None)?
            } else {
                let k = scores_var.map(|v| argmax_slot(g.value(v).row(ri))).unwrap_or(0);
                RegionOrientation {
                    element: model.group.element_mod(k as i64),
                    low_confidence: false,
                }
            };
            chosen.push((!region.orientation.low_confidence).then_some(region.orientation.element));
        }
        if let Some(v) = scores_var {
            orientation_scores = Some((v, OrientationRows::Regions));
        }
        suspend_features(&mut g.tape, &region_orbit, &chosen)?
    } else {
        let mut member_rows = Vec::new();
        let mut center_rows = Vec::new();
        let mut rots = Vec::new();
        let mut segments = Vec::with_capacity(r);
        for (ri, region) in regions.iter().enumerate() {
            let mut seg = Vec::with_capacity(region.members.len());
            for &m in &region.members {
                seg.push(member_rows.len());
                member_rows.push(m);
                center_rows.push(ri);
                rots.push(Some(region.orientation.element));
            }
            segments.push(seg);
        }
        let mv = g.tape.gather(votes, member_rows.clone());
        let cv = g.tape.gather(region_centers, center_rows);
        let rel = g.tape.sub(mv, cv);
        let rel = g.tape.rotate_xy(rel, rotations_of::<T>(rots.into_iter(), true));
        let rel = g.tape.scale(rel, inv_radius);
        let feats = g.tape.gather(vote_feat, member_rows);
        let x = g.tape.concat_cols(rel, feats);
        let h = net.region_mlp.forward(g, x);
        g.tape.segment_max(h, &segments)
    };
    let proposals = net.proposal_mlp.forward(g, region_feat);

    Ok(ForwardOutput {
        seed_source: seeds.source.clone(),
        seed_positions,
        seed_orbit,
        seg_logits,
        seg_rows,
        orientation_scores,
        seed_foreground: seed_fg,
        seed_orientation: seed_ori,
        votes,
        slot_votes,
        regions,
        proposals: Some(proposals),
        region_centers: Some(region_centers),
    })
}

fn centers_idx_of(regions: &[Region]) -> Vec<usize> {
    regions.iter().map(|r| r.center_seed).collect()
}

/// Orientation scores, foreground decision, decomposition and oracle
/// overrides on one orbit.
fn suspend_orbit<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    orbit: &OrbitFeature,
    seg_logits: Var,
    scene: &Scene,
    scores_out: &mut Option<(Var, OrientationRows)>,
) -> Result<DecomposedSeeds> {
    let n = orbit.order();
    let scores = match &model.net.orient_head {
        Some(head) => {
            let v = orientation_head(g, head, orbit)?;
            *scores_out = Some((v, OrientationRows::Points(orbit.source.clone())));
            g.value(v).clone()
        }
        None => Tensor::zeros(orbit.len(), n),
    };
    let fg = foreground_from_logits(g.value(seg_logits), model.cfg.foreground_logit);
    let dec = decompose(&mut g.tape, orbit, &scores, &fg)?;
    oracle_overrides(
        &mut g.tape,
        &dec,
        orbit,
        scene,
        model.cfg.use_gt_orientation,
        model.cfg.use_gt_segmentation,
    )
}

/// Scene-frame detection with its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub low_confidence: bool,
    pub region: usize,
    /// Region orientation used to assemble the box.
    pub orientation: GroupElement,
    pub yaw_inv: f64,
}

/// Object-frame boxes turned into scene-frame detections.
pub fn assemble_detections<T: Real>(model: &Model<T>, out: &ForwardOutput, proposals: &Tensor<T>) -> Result<Vec<Detection>> {
    let layout = model.layout();
    let mut dets = Vec::with_capacity(out.regions.len());
    for (ri, region) in out.regions.iter().enumerate() {
        let row: Vec<f64> = proposals.row(ri).iter().map(|v| v.as_f64()).collect();
        let class_scores = &row[ProposalLayout::CLASS..ProposalLayout::CLASS + layout.classes];
        let class_id = argmax_slot(class_scores);
        let tpl = model.templates[class_id];
        let mut size = [0.0; 3];
        for k in 0..3 {
            size[k] = tpl[k] * row[ProposalLayout::LOG_SIZE + k].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
        }
        let yaw_inv = safe_atan2(row[ProposalLayout::SIN_COS], row[ProposalLayout::SIN_COS + 1]);
        let c = ProposalLayout::CENTER;
        let boxed = OrientedBox::new([row[c], row[c + 1], row[c + 2]], size, yaw_inv, class_id)?;
        let h = region.orientation.element;
        let scene_box = box_to_scene_frame(&boxed, &h, region.center).with_score(sigmoid(row[layout.objectness()]));
        dets.push(Detection {
            bbox: scene_box,
            low_confidence: region.orientation.low_confidence,
            region: ri,
            orientation: h,
            yaw_inv,
        });
    }
    Ok(dets)
}

/// Greedy suppression in order of (score desc, confident first, index).
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .bbox
            .score
            .total_cmp(&dets[a].bbox.score)
            .then(dets[a].low_confidence.cmp(&dets[b].low_confidence))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| rotated_iou(&k.bbox, &dets[i].bbox) <= iou_threshold) {
            kept.push(dets[i].clone());
        }
    }
    kept
}

/// Detections after suppression, and the forward record.
pub fn run_variant<T: Real>(model: &Model<T>, scene: &Scene) -> Result<(Vec<Detection>, ForwardOutput, Vec<f64>)> {
    model.check_scene(scene)?;
    let mut g = Graph::new(&model.store);
    let out = forward(model, &mut g, scene)?;
    let dets = match out.proposals {
        Some(p) => nms(&assemble_detections(model, &out, g.value(p))?, model.cfg.nms_iou),
        None => Vec::new(),
    };
    let seed_orbit = out
        .seed_orbit
        .as_ref()
        .map(|o| g.value(o.var).data.iter().map(|v| v.as_f64()).collect())
        .unwrap_or_default();
    Ok((dets, out, seed_orbit))
}

pub fn detect<T: Real>(model: &Model<T>, scene: &Scene) -> Result<Vec<Detection>> {
    run_variant(model, scene).map(|(d, _, _)| d)
}

/// Loss values by name plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

fn nearest_gt(p: Vec3, scene: &Scene) -> Option<(usize, f64)> {
    scene
        .gt_boxes
        .iter()
        .enumerate()
        .map(|(k, b)| (k, dist2(p, b.center).sqrt()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Named losses of a forward pass and the tape scalar of their weighted sum.
pub fn compute_losses<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    out: &ForwardOutput,
    scene: &Scene,
) -> Result<(Var, LossValues)> {
    let cfg = &model.cfg;
    let n = model.group.order();
    let labels = labels_for_group(scene, &model.group)?;
    let zero = T::zero();
    let mut terms: Vec<(&'static str, Option<Var>)> = Vec::new();
    let inv = |k: usize| if k == 0 { zero } else { T::one() / T::of(k as f64) };

    // Votes.
    let fg_seeds: Vec<usize> = (0..out.seed_source.len())
        .filter(|&i| labels.foreground[out.seed_source[i]])
        .collect();
    let vote_loss = if fg_seeds.is_empty() {
        None
    } else {
        let (src, slots) = match out.slot_votes {
            Some(v) => (v, n),
            None => (out.votes, 1),
        };
        let rows: Vec<usize> = fg_seeds.iter().flat_map(|&i| (0..slots).map(move |k| i * slots + k)).collect();
        let mut target = Vec::with_capacity(rows.len() * 3);
        for &i in &fg_seeds {
            let p = scene.points[out.seed_source[i]];
            let t = labels.vote_target[out.seed_source[i]];
            for _ in 0..slots {
                target.extend([T::of(p[0] + t[0]), T::of(p[1] + t[1]), T::of(p[2] + t[2])]);
            }
        }
        let v = g.tape.gather(src, rows.clone());
        let w = inv(rows.len());
        Some(g.tape.l1_loss(
            v,
            Tensor::from_vec(rows.len(), 3, target),
            Tensor::from_vec(rows.len(), 3, vec![w; rows.len() * 3]),
        ))
    };
    terms.push(("vote", vote_loss));

    // Segmentation over every row.
    let seg_t: Vec<T> = out
        .seg_rows
        .iter()
        .map(|&s| if labels.foreground[s] { T::one() } else { zero })
        .collect();
    let w = inv(seg_t.len());
    let seg = g.tape.bce_logits(out.seg_logits, seg_t.clone(), vec![w; seg_t.len()]);
    terms.push(("segmentation", Some(seg)));

    // Regions: positives, negatives, matches.
    let mut obj_targets = Vec::new();
    let mut obj_weights = Vec::new();
    let mut matches: Vec<Option<usize>> = Vec::new();
    for region in &out.regions {
        let near = nearest_gt(region.center, scene);
        let (t, w, m) = match near {
            Some((k, d)) if d <= cfg.positive_radius => (T::one(), T::one(), Some(k)),
            Some((_, d)) if d <= cfg.negative_radius => (zero, zero, None),
            _ => (zero, T::one(), None),
        };
        obj_targets.push(t);
        obj_weights.push(w);
        matches.push(m);
    }
    let positives: Vec<usize> = (0..matches.len()).filter(|&i| matches[i].is_some()).collect();

    // Orientation.
    let orient = match &out.orientation_scores {
        None => None,
        Some((scores, OrientationRows::Points(rows))) => {
            let targets: Vec<usize> = rows
                .iter()
                .map(|&s| labels.orientation_bin[s].max(0) as usize)
                .collect();
            let fg: Vec<bool> = rows.iter().map(|&s| labels.foreground[s]).collect();
            let count = fg.iter().filter(|f| **f).count();
            let w = inv(count);
            let weights = fg.iter().map(|f| if *f { w } else { zero }).collect();
            (count > 0).then(|| g.tape.softmax_ce(*scores, targets, weights))
        }
        Some((scores, OrientationRows::Regions)) => {
            let group = &model.group;
            let mut targets = vec![0usize; matches.len()];
            for &i in &positives {
                let k = matches[i].expect("positive");
                targets[i] = group.angle_to_bin(scene.gt_boxes[k].yaw)?.index();
            }
            let w = inv(positives.len());
            let weights = matches.iter().map(|m| if m.is_some() { w } else { zero }).collect();
            (!positives.is_empty()).then(|| g.tape.softmax_ce(*scores, targets, weights))
        }
    };
    terms.push(("orientation", orient));

    let (mut objectness, mut center, mut size, mut yaw, mut class) = (None, None, None, None, None);
    if let (Some(props), Some(centers)) = (out.proposals, out.region_centers) {
        let layout = model.layout();
        let obj_logit = g.tape.slice_cols(props, layout.objectness(), 1);
        let active = obj_weights.iter().filter(|w| **w != zero).count();
        if active > 0 {
            let w = inv(active);
            let weights = obj_weights.iter().map(|x| *x * w).collect();
            objectness = Some(g.tape.bce_logits(obj_logit, obj_targets, weights));
        }
        if !positives.is_empty() {
            let p = positives.len();
            let w = inv(p);
            let gt: Vec<&OrientedBox> = positives
                .iter()
                .map(|&i| &scene.gt_boxes[matches[i].expect("positive")])
                .collect();
            let rows = g.tape.gather(props, positives.clone());
            let rc = g.tape.gather(centers, positives.clone());
            let c_inv = g.tape.slice_cols(rows, ProposalLayout::CENTER, 3);
            let rot = rotations_of::<T>(positives.iter().map(|&i| Some(out.regions[i].orientation.element)), false);
            let c_scene = g.tape.rotate_xy(c_inv, rot);
            let c_scene = g.tape.add(rc, c_scene);
            let tgt: Vec<T> = gt.iter().flat_map(|b| b.center.map(T::of)).collect();
            center = Some(g.tape.l1_loss(
                c_scene,
                Tensor::from_vec(p, 3, tgt),
                Tensor::from_vec(p, 3, vec![w; 3 * p]),
            ));

            let ls = g.tape.slice_cols(rows, ProposalLayout::LOG_SIZE, 3);
            let es = g.tape.exp(ls);
            let tpl: Vec<T> = gt.iter().flat_map(|b| model.templates[b.class_id].map(T::of)).collect();
            let sz = g.tape.mul_const(es, Tensor::from_vec(p, 3, tpl));
            let tgt: Vec<T> = gt.iter().flat_map(|b| b.size.map(T::of)).collect();
            size = Some(g.tape.l1_loss(sz, Tensor::from_vec(p, 3, tgt), Tensor::from_vec(p, 3, vec![w; 3 * p])));

            let sc = g.tape.slice_cols(rows, ProposalLayout::SIN_COS, 2);
            let offsets = positives
                .iter()
                .map(|&i| T::of(out.regions[i].orientation.element.angle()))
                .collect();
            let targets = gt.iter().map(|b| T::of(b.yaw)).collect();
            yaw = Some(g.tape.angular_l1(sc, offsets, targets, vec![w; p]));

            let cls = g.tape.slice_cols(rows, ProposalLayout::CLASS, layout.classes);
            class = Some(g.tape.softmax_ce(cls, gt.iter().map(|b| b.class_id).collect(), vec![w; p]));
        }
    }
    terms.push(("objectness", objectness));
    terms.push(("center", center));
    terms.push(("size", size));
    terms.push(("yaw", yaw));
    terms.push(("class", class));

    let weights: BTreeMap<&str, f64> = cfg.loss_weights.entries().into_iter().collect();
    let mut values = LossValues::default();
    let mut weighted = Vec::new();
    for (name, var) in terms {
        let v = var.map(|v| g.value(v).data[0].as_f64()).unwrap_or(0.0);
        values.terms.insert(name.to_string(), v);
        if let Some(var) = var {
            weighted.push((var, T::of(weights[name])));
        }
    }
    let total = if weighted.is_empty() {
        let z = g.tape.constant(Tensor::scalar(zero));
        g.tape.sum_all(z)
    } else {
        g.tape.weighted_sum(weighted)
    };
    values.total = g.value(total).data[0].as_f64();
    Ok((total, values))
}

/// Loss values and parameter gradients for one scene.
pub fn scene_gradients<T: Real>(model: &Model<T>, scene: &Scene) -> Result<(LossValues, Gradients<T>)> {
    let mut g = Graph::new(&model.store);
    let out = forward(model, &mut g, scene)?;
    let (total, values) = compute_losses(model, &mut g, &out, scene)?;
    let grads = g.backward(total)?;
    Ok((values, grads))
}

pub fn scene_loss<T: Real>(model: &Model<T>, scene: &Scene) -> Result<LossValues> {
    let mut g = Graph::new(&model.store);
    let out = forward(model, &mut g, scene)?;
    compute_losses(model, &mut g, &out, scene).map(|(_, v)| v)
}

/// Largest analytic-vs-numeric gradient disagreement over all parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub entries: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Central differences of the total loss with step `h`; relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(model: &Model<f64>, scene: &Scene, h: f64, floor: f64) -> Result<GradientCheck> {
    let (_, grads) = scene_gradients(model, scene)?;
    let mut probe = model.clone();
    let mut report = GradientCheck {
        entries: 0,
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    let ids: Vec<(ParamId, String, usize)> = model.store.iter().map(|(id, name, t)| (id, name.to_string(), t.len())).collect();
    for (id, name, len) in ids {
        for k in 0..len {
            let original = probe.store.get(id).data[k];
            probe.store.get_mut(id).data[k] = original + h;
            let plus = scene_loss(&probe, scene)?.total;
            probe.store.get_mut(id).data[k] = original - h;
            let minus = scene_loss(&probe, scene)?.total;
            probe.store.get_mut(id).data[k] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.by_param[id.0].as_ref().map_or(0.0, |g| g.data[k]);
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
            report.entries += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}

/// First-order optimizer state, one slot per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T: Real> {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: ParamStore<T>,
    pub second: Option<ParamStore<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ParamStore<T>) -> Self {
        let zeros = |prefix: &str| {
            let mut s = ParamStore::new();
            for (_, name, t) in params.iter() {
                s.add(format!("{prefix}.{name}"), Tensor::zeros(t.rows, t.cols));
            }
            s
        };
        Self {
            kind,
            step: 0,
            first: zeros("m"),
            second: (kind == OptimizerKind::Adam).then(|| zeros("v")),
        }
    }

    /// Applies averaged gradients at step size `lr`.
    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, momentum: f64) {
        self.step += 1;
        let lr = T::of(lr);
        let mu = T::of(momentum);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let Some(gr) = &grads[id.0] else { continue };
            let p = params.get_mut(id);
            let m = self.first.get_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((pv, mv), gv) in p.data.iter_mut().zip(m.data.iter_mut()).zip(&gr.data) {
                        *mv = mu * *mv + *gv;
                        *pv -= lr * *mv;
                    }
                }
                OptimizerKind::Adam => {
                    let b1 = mu;
                    let b2 = T::of(0.999);
                    let eps = T::of(1e-8);
                    let t = self.step as i32;
                    let c1 = T::one() - b1.powi(t);
                    let c2 = T::one() - b2.powi(t);
                    let v = self.second.as_mut().expect("adam state").get_mut(id);
                    for (((pv, mv), vv), gv) in p.data.iter_mut().zip(m.data.iter_mut()).zip(v.data.iter_mut()).zip(&gr.data) {
                        *mv = b1 * *mv + (T::one() - b1) * *gv;
                        *vv = b2 * *vv + (T::one() - b2) * *gv * *gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub step: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub state: BTreeMap<String, ParamIndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub variant: Variant,
    pub group_order: usize,
    pub seed: u64,
    pub epochs_completed: usize,
    pub parameter_count: usize,
    pub layer_specs: Vec<LayerSpec>,
    pub config: DetectorConfig,
    pub optimizer: OptimizerMeta,
    pub params: BTreeMap<String, ParamIndexEntry>,
}

pub fn save_checkpoint<T: Real>(
    dir: &Path,
    model: &Model<T>,
    opt: &Optimizer<T>,
    epochs_completed: usize,
    lr: f64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| EonError::io(dir, e))?;
    let (bytes, index) = encode_params(&model.store);
    let mut state = opt.first.clone();
    if let Some(v) = &opt.second {
        for (_, name, t) in v.iter() {
            state.add(name.to_string(), t.clone());
        }
    }
    let (opt_bytes, opt_index) = encode_params(&state);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        variant: model.cfg.variant,
        group_order: model.group.order(),
        seed: model.cfg.seed,
        epochs_completed,
        parameter_count: model.parameter_count(),
        layer_specs: model.layer_specs(),
        config: model.cfg.clone(),
        optimizer: OptimizerMeta {
            kind: opt.kind,
            step: opt.step,
            learning_rate: lr,
            momentum: model.cfg.momentum,
            state: opt_index,
        },
        params: index,
    };
    // Write data first so a readable manifest always points at complete files.
    write_file(&dir.join("params.bin"), &bytes)?;
    write_file(&dir.join("optimizer.bin"), &opt_bytes)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| EonError::parse("manifest.json", e.to_string()))?;
    write_file(&dir.join("manifest.json"), &json)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| EonError::parse(path.display().to_string(), e.to_string()))
}

/// Model, optimizer and manifest restored from a checkpoint directory.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(Model<T>, Optimizer<T>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(EonError::parse(
            "manifest.json",
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let mut model = Model::<T>::new(&manifest.config)?;
    if model.group.order() != manifest.group_order || model.cfg.variant != manifest.variant {
        return Err(EonError::Config("manifest metadata disagrees with its config".into()));
    }
    let bytes = read_file(&dir.join("params.bin"))?;
    decode_params_into(&mut model.store, &bytes, &manifest.params)?;
    let mut opt = Optimizer::new(manifest.optimizer.kind, &model.store);
    opt.step = manifest.optimizer.step;
    let opt_bytes = read_file(&dir.join("optimizer.bin"))?;
    let mut state = opt.first.clone();
    if let Some(v) = &opt.second {
        for (_, name, t) in v.iter() {
            state.add(name.to_string(), t.clone());
        }
    }
    decode_params_into(&mut state, &opt_bytes, &manifest.optimizer.state)?;
    let k = opt.first.len();
    for (i, (_, _, t)) in state.iter().enumerate() {
        if i < k {
            *opt.first.get_mut(ParamId(i)) = t.clone();
        } else if let Some(v) = opt.second.as_mut() {
            *v.get_mut(ParamId(i - k)) = t.clone();
        }
    }
    if !model.store.is_finite() {
        return Err(EonError::NonFinite {
            tensor: "checkpoint parameters".into(),
        });
    }
    Ok((model, opt, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochLog>,
}

/// Mean loss values over scenes, reduced in scene order.
pub fn mean_losses(values: &[LossValues]) -> LossValues {
    let mut out = LossValues::default();
    if values.is_empty() {
        return out;
    }
    let k = values.len() as f64;
    for v in values {
        for (name, x) in &v.terms {
            *out.terms.entry(name.clone()).or_insert(0.0) += x / k;
        }
        out.total += v.total / k;
    }
    out
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1));
    order.shuffle(&mut rng);
    order
}

fn augmented(cfg: &DetectorConfig, scene: &Scene, epoch: usize, index: usize) -> Result<Scene> {
    if cfg.objaug_degrees > 0.0 {
        let seed = cfg
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add((epoch as u64) << 32)
            .wrapping_add(index as u64);
        object_rotation_augment(scene, cfg.objaug_degrees, seed)
    } else {
        Ok(scene.clone())
    }
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| EonError::io(path, e))?;
    let line = serde_json::to_string(entry).map_err(|e| EonError::parse("train_log.jsonl", e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| EonError::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| EonError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EonError::parse(path.display().to_string(), e.to_string())))
        .collect()
}

/// Runs `epochs` more epochs starting from `model`/`opt` at `start_epoch`.
/// The checkpoint lands in `out_dir/checkpoint` after every epoch and the
/// log in `out_dir/train_log.jsonl`.
pub fn train_from<T: Real>(
    mut model: Model<T>,
    mut opt: Optimizer<T>,
    start_epoch: usize,
    scenes: &[Scene],
    out_dir: &Path,
    workers: usize,
) -> Result<TrainOutcome> {
    let cfg = model.cfg.clone();
    for s in scenes {
        model.check_scene(s)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| EonError::io(out_dir, e))?;
    let ckpt = out_dir.join("checkpoint");
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = Vec::new();
    if start_epoch == 0 {
        let t0 = Instant::now();
        let losses = run_indexed(workers, scenes.len(), |i| scene_loss(&model, &scenes[i]));
        let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
        let mean = mean_losses(&losses);
        if !mean.total.is_finite() {
            return Err(EonError::NonFinite {
                tensor: "initial loss".into(),
            });
        }
        let entry = EpochLog {
            epoch: 0,
            losses: mean.terms,
            total: mean.total,
            learning_rate: cfg.learning_rate_at(0),
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        let _ = fs::remove_file(&log_path);
        append_log(&log_path, &entry)?;
        log.push(entry);
        save_checkpoint(&ckpt, &model, &opt, 0, cfg.learning_rate_at(0))?;
    }
    for epoch in start_epoch..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.learning_rate_at(epoch);
        let order = epoch_order(cfg.seed, epoch, scenes.len());
        let mut step_losses = Vec::with_capacity(scenes.len());
        for batch in order.chunks(cfg.batch_size) {
            let results = run_indexed(workers, batch.len(), |b| {
                let scene = augmented(&cfg, &scenes[batch[b]], epoch, batch[b])?;
                scene_gradients(&model, &scene)
            });
            let mut sum: Vec<Option<Tensor<T>>> = vec![None; model.store.len()];
            for r in results {
                let (values, grads) = r?;
                step_losses.push(values);
                for (acc, gr) in sum.iter_mut().zip(grads.by_param) {
                    match (acc.as_mut(), gr) {
                        (Some(a), Some(gr)) => a.add_assign(&gr),
                        (None, Some(gr)) => *acc = Some(gr),
                        _ => {}
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut sq = 0.0;
            for t in sum.iter_mut().flatten() {
                t.scale(T::of(scale));
                sq += t.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
            if !sq.is_finite() {
                return Err(EonError::NonFinite {
                    tensor: "gradient".into(),
                });
            }
            let norm = sq.sqrt();
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                let k = T::of(cfg.max_grad_norm / norm);
                sum.iter_mut().flatten().for_each(|t| t.scale(k));
            }
            opt.apply(&mut model.store, &sum, lr, cfg.momentum);
            if !model.store.is_finite() {
                return Err(EonError::NonFinite {
                    tensor: "parameters after update".into(),
                });
            }
        }
        let mean = mean_losses(&step_losses);
        let entry = EpochLog {
            epoch: epoch + 1,
            losses: mean.terms,
            total: mean.total,
            learning_rate: lr,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        append_log(&log_path, &entry)?;
        log.push(entry);
        save_checkpoint(&ckpt, &model, &opt, epoch + 1, lr)?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

pub fn train<T: Real>(cfg: &DetectorConfig, scenes: &[Scene], out_dir: &Path, workers: usize) -> Result<TrainOutcome> {
    let model = Model::<T>::new(cfg)?;
    let opt = Optimizer::new(cfg.optimizer, &model.store);
    train_from(model, opt, 0, scenes, out_dir, workers)
}

/// Continues training from `out_dir/checkpoint` up to `epochs` total.
pub fn resume<T: Real>(out_dir: &Path, epochs: usize, scenes: &[Scene], workers: usize) -> Result<TrainOutcome> {
    let (mut model, opt, manifest) = load_checkpoint::<T>(&out_dir.join("checkpoint"))?;
    model.cfg.epochs = epochs;
    train_from(model, opt, manifest.epochs_completed, scenes, out_dir, workers)
}

/// Yaw of a scene-frame box relative to its object-frame yaw.
pub fn assembled_yaw(yaw_inv: f64, h: &GroupElement) -> f64 {
    wrap_angle(yaw_inv + h.angle())
}
