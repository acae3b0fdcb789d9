//! Equivariant backbone over the cyclic yaw group.
//!
//! An orbit feature stores one row per `(point, slot)` at row `p * N + g`.
//! Slot `g` holds the features computed on the input rotated by `g⁻¹`, so
//! rotating the input by `g₀` moves the value of slot `g` to slot `g₀ ∘ g`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamId, Real, Tape, Tensor, Var};
use crate::error::{EonError, Result};
use crate::geometry::{dist2, Vec3};
use crate::rotgroup::{CyclicGroup, GroupElement};

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

pub fn count_parameters<T: Real>(params: &ParamStore<T>) -> usize {
    params.values.iter().map(Tensor::len).sum()
}

/// A tape bound to a parameter store; each parameter enters the tape once.
pub struct Graph<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(id, self.store.get(id), self.store.name(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let n = self.store.len();
        self.tape.backward(loss, n)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, fan_in, rng);
        let b = store.add_uniform(format!("{name}.bias"), 1, fan_out, fan_in, rng);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.p(self.w);
        let b = g.p(self.b);
        let y = g.tape.matmul(x, w);
        g.tape.add_bias(y, b)
    }
}

/// Affine, ReLU, affine, and an optional trailing ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
    pub final_relu: bool,
}

impl Mlp2 {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: [usize; 3],
        final_relu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            l2: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
            final_relu,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.tape.relu(h);
        let y = self.l2.forward(g, h);
        if self.final_relu {
            g.tape.relu(y)
        } else {
            y
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    SetAbstraction,
    GroupConv,
    Pointwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_width: usize,
    pub out_width: usize,
    #[serde(default)]
    pub hidden_width: usize,
    #[serde(default)]
    pub radius: f64,
    #[serde(default)]
    pub max_neighbors: usize,
    #[serde(default)]
    pub samples: usize,
    #[serde(default)]
    pub kernel_width: usize,
    #[serde(default)]
    pub depthwise: bool,
}

impl LayerSpec {
    pub fn set_abstraction(
        in_width: usize,
        hidden_width: usize,
        out_width: usize,
        samples: usize,
        radius: f64,
        max_neighbors: usize,
    ) -> Self {
        Self {
            kind: LayerKind::SetAbstraction,
            in_width,
            out_width,
            hidden_width,
            radius,
            max_neighbors,
            samples,
            kernel_width: 0,
            depthwise: false,
        }
    }

    pub fn group_conv(width: usize, kernel_width: usize, depthwise: bool) -> Self {
        Self {
            kind: LayerKind::GroupConv,
            in_width: width,
            out_width: width,
            hidden_width: 0,
            radius: 0.0,
            max_neighbors: 0,
            samples: 0,
            kernel_width,
            depthwise,
        }
    }

    pub fn pointwise(in_width: usize, out_width: usize) -> Self {
        Self {
            kind: LayerKind::Pointwise,
            in_width,
            out_width,
            hidden_width: 0,
            radius: 0.0,
            max_neighbors: 0,
            samples: 0,
            kernel_width: 0,
            depthwise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_width == 0 || self.out_width == 0 {
            return Err(EonError::Config("layer widths must be positive".into()));
        }
        match self.kind {
            LayerKind::SetAbstraction => {
                if !(self.radius > 0.0 && self.radius.is_finite()) {
                    return Err(EonError::Config("set abstraction radius must be positive".into()));
                }
                if self.hidden_width == 0 || self.max_neighbors == 0 || self.samples == 0 {
                    return Err(EonError::Config(
                        "set abstraction needs positive hidden width, neighbors and samples".into(),
                    ));
                }
            }
            LayerKind::GroupConv => {
                if self.kernel_width.is_multiple_of(2) {
                    return Err(EonError::Config("group kernel width must be odd".into()));
                }
                if self.in_width != self.out_width {
                    return Err(EonError::Config("group conv keeps the channel width".into()));
                }
            }
            LayerKind::Pointwise => {}
        }
        Ok(())
    }
}

/// Largest odd kernel width not exceeding either `requested` or `order`.
pub fn effective_kernel_width(requested: usize, order: usize) -> usize {
    let w = requested.min(order).max(1);
    if w.is_multiple_of(2) {
        w - 1
    } else {
        w
    }
}

/// Per-point orbit feature block. The tape value has `points * N` rows.
#[derive(Clone, Debug)]
pub struct OrbitFeature {
    pub var: Var,
    pub group: CyclicGroup,
    pub channels: usize,
    pub positions: Vec<Vec3>,
    /// Index of each anchor in the original point cloud.
    pub source: Vec<usize>,
    /// Index of each anchor among the previous layer's points.
    pub parent: Vec<usize>,
}

impl OrbitFeature {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn order(&self) -> usize {
        self.group.order()
    }

    /// Channel vector of point `p` at slot `g`.
    pub fn slot<'t, T: Real>(&self, tape: &'t Tape<T>, p: usize, g: usize) -> &'t [T] {
        tape.value(self.var).row(p * self.order() + g)
    }
}

/// Constant `[1, z]` channels replicated across every slot.
pub fn lift_inputs<T: Real>(g: &mut Graph<'_, T>, points: &[Vec3], group: CyclicGroup) -> Result<OrbitFeature> {
    if points.is_empty() {
        return Err(EonError::InvalidArgument("cannot lift an empty point set".into()));
    }
    let n = group.order();
    let mut data = Vec::with_capacity(points.len() * n * 2);
    for p in points {
        for _ in 0..n {
            data.push(T::one());
            data.push(T::of(p[2]));
        }
    }
    let var = g.tape.constant(Tensor::from_vec(points.len() * n, 2, data));
    Ok(OrbitFeature {
        var,
        group,
        channels: 2,
        positions: points.to_vec(),
        source: (0..points.len()).collect(),
        parent: (0..points.len()).collect(),
    })
}

/// Connected components under single linkage at `linkage`, each listed in
/// ascending index order and ordered by their smallest index.
pub fn linkage_components(points: &[Vec3], linkage: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let r2 = linkage * linkage;
    for i in 0..n {
        for j in i + 1..n {
            if dist2(points[i], points[j]) <= r2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        by_root.entry(r).or_default().push(i);
    }
    let mut comps: Vec<Vec<usize>> = by_root.into_values().collect();
    comps.sort_by_key(|c| c[0]);
    comps
}

/// Farthest-point sampling over `subset`, starting at its first entry; ties
/// go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], subset: &[usize], count: usize) -> Vec<usize> {
    let count = count.min(subset.len());
    if count == 0 {
        return Vec::new();
    }
    let mut picked = Vec::with_capacity(count);
    let mut best = vec![f64::INFINITY; subset.len()];
    let mut current = 0usize;
    for _ in 0..count {
        picked.push(subset[current]);
        let c = points[subset[current]];
        let mut arg = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (k, &i) in subset.iter().enumerate() {
            let d = dist2(points[i], c);
            if d < best[k] {
                best[k] = d;
            }
            if best[k] > far {
                far = best[k];
                arg = k;
            }
        }
        current = arg;
    }
    picked
}

/// Farthest-point sampling run per linkage component with the sample budget
/// split in proportion to component size (largest remainder, ties by
/// component order). Sampling `count ≥ len` returns every index in order.
pub fn component_fps(points: &[Vec3], count: usize, linkage: f64) -> Vec<usize> {
    let n = points.len();
    if count >= n {
        return (0..n).collect();
    }
    let comps = linkage_components(points, linkage);
    let mut alloc: Vec<usize> = comps.iter().map(|c| count * c.len() / n).collect();
    let mut left = count - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = count * comps[a].len() % n;
        let rb = count * comps[b].len() % n;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &c in &order {
        if left == 0 {
            break;
        }
        if alloc[c] < comps[c].len() {
            alloc[c] += 1;
            left -= 1;
        }
    }
    comps
        .iter()
        .zip(&alloc)
        .flat_map(|(c, &k)| farthest_point_sample(points, c, k))
        .collect()
}

/// Indices of the first `max_k` points (by index) within `radius` of each
/// center.
pub fn ball_query(centers: &[Vec3], points: &[Vec3], radius: f64, max_k: usize) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    centers
        .iter()
        .map(|c| {
            let mut nb = Vec::with_capacity(max_k);
            for (j, p) in points.iter().enumerate() {
                if dist2(*p, *c) <= r2 {
                    nb.push(j);
                    if nb.len() == max_k {
                        break;
                    }
                }
            }
            nb
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetAbstraction {
    pub spec: LayerSpec,
    pub mlp: Mlp2,
}

impl SetAbstraction {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        if spec.kind != LayerKind::SetAbstraction {
            return Err(EonError::Config(format!("{name}: expected a set abstraction spec")));
        }
        let mlp = Mlp2::new(
            store,
            name,
            [3 + spec.in_width, spec.hidden_width, spec.out_width],
            true,
            rng,
        );
        Ok(Self { spec, mlp })
    }
}

/// `out(i,:,g) = max_j sharedMap(R_g⁻¹ (x_j − x_i) / r ⊕ in(j,:,g))`.
///
/// `frames`, when given, additionally expresses each anchor's neighborhood
/// in that anchor's own frame before the slot rotation.
pub fn set_abstraction_layer<T: Real>(
    g: &mut Graph<'_, T>,
    layer: &SetAbstraction,
    input: &OrbitFeature,
    frames: Option<&[GroupElement]>,
) -> Result<OrbitFeature> {
    let spec = &layer.spec;
    if input.channels != spec.in_width {
        return Err(EonError::Shape(format!(
            "set abstraction expects {} input channels, got {}",
            spec.in_width, input.channels
        )));
    }
    if let Some(f) = frames {
        if f.len() != input.len() {
            return Err(EonError::Shape("one frame per input point required".into()));
        }
    }
    let n = input.order();
    let anchors = component_fps(&input.positions, spec.samples, spec.radius);
    let centers: Vec<Vec3> = anchors.iter().map(|&i| input.positions[i]).collect();
    let neighbors = ball_query(&centers, &input.positions, spec.radius, spec.max_neighbors);
    let slot_rot: Vec<(f64, f64)> = input.group.elements().map(|e| e.inverse().cos_sin()).collect();
    let inv_r = 1.0 / spec.radius;

    let total: usize = neighbors.iter().map(Vec::len).sum::<usize>() * n;
    let mut gather = Vec::with_capacity(total);
    let mut rel = Vec::with_capacity(total * 3);
    let mut segments = Vec::with_capacity(anchors.len() * n);
    let mut row = 0usize;
    for (a, (&ai, nb)) in anchors.iter().zip(&neighbors).enumerate() {
        let xi = input.positions[ai];
        let frame = frames.map(|f| f[ai].inverse().cos_sin());
        for (slot, &(c, s)) in slot_rot.iter().enumerate() {
            let mut seg = Vec::with_capacity(nb.len());
            for &j in nb {
                let xj = input.positions[j];
                let (mut dx, mut dy) = (xj[0] - xi[0], xj[1] - xi[1]);
                if let Some((fc, fs)) = frame {
                    (dx, dy) = (fc * dx - fs * dy, fs * dx + fc * dy);
                }
                let (rx, ry) = (c * dx - s * dy, s * dx + c * dy);
                rel.push(T::of(rx * inv_r));
                rel.push(T::of(ry * inv_r));
                rel.push(T::of((xj[2] - xi[2]) * inv_r));
                gather.push(j * n + slot);
                seg.push(row);
                row += 1;
            }
            segments.push(seg);
        }
        debug_assert_eq!(segments.len(), (a + 1) * n);
    }
    let rel = g.tape.constant(Tensor::from_vec(row, 3, rel));
    let feats = g.tape.gather(input.var, gather);
    let x = g.tape.concat_cols(rel, feats);
    let h = layer.mlp.forward(g, x);
    let var = g.tape.segment_max(h, &segments);
    Ok(OrbitFeature {
        var,
        group: input.group,
        channels: spec.out_width,
        positions: centers,
        source: anchors.iter().map(|&i| input.source[i]).collect(),
        parent: anchors,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupConv {
    pub spec: LayerSpec,
    pub taps: Vec<ParamId>,
    pub bias: ParamId,
}

impl GroupConv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        if spec.kind != LayerKind::GroupConv {
            return Err(EonError::Config(format!("{name}: expected a group conv spec")));
        }
        let c = spec.in_width;
        let fan_in = if spec.depthwise { spec.kernel_width } else { spec.kernel_width * c };
        let taps = (0..spec.kernel_width)
            .map(|d| {
                let rows = if spec.depthwise { 1 } else { c };
                store.add_uniform(format!("{name}.tap{d}"), rows, c, fan_in, rng)
            })
            .collect();
        let bias = store.add_uniform(format!("{name}.bias"), 1, c, fan_in, rng);
        Ok(Self { spec, taps, bias })
    }
}

/// Circular cross-correlation along the slot axis, before the nonlinearity:
/// `out(p,g) = Σ_d in(p, g + d − w/2) · W_d + b`.
pub fn group_conv1d_linear<T: Real>(g: &mut Graph<'_, T>, layer: &GroupConv, input: &OrbitFeature) -> Result<Var> {
    let n = input.order();
    let w = layer.spec.kernel_width;
    if w.is_multiple_of(2) || w > n {
        return Err(EonError::InvalidArgument(format!(
            "group kernel width {w} must be odd and at most the group order {n}"
        )));
    }
    if input.channels != layer.spec.in_width {
        return Err(EonError::Shape(format!(
            "group conv expects {} channels, got {}",
            layer.spec.in_width, input.channels
        )));
    }
    let half = w / 2;
    let mut acc: Option<Var> = None;
    for (d, &tap) in layer.taps.iter().enumerate() {
        let idx: Vec<usize> = (0..input.len() * n)
            .map(|r| {
                let (p, slot) = (r / n, r % n);
                p * n + (slot + n + d - half) % n
            })
            .collect();
        let shifted = g.tape.gather(input.var, idx);
        let wv = g.p(tap);
        let term = if layer.spec.depthwise {
            g.tape.mul_row(shifted, wv)
        } else {
            g.tape.matmul(shifted, wv)
        };
        acc = Some(match acc {
            Some(a) => g.tape.add(a, term),
            None => term,
        });
    }
    let b = g.p(layer.bias);
    Ok(g.tape.add_bias(acc.expect("kernel width ≥ 1"), b))
}

pub fn group_conv1d<T: Real>(g: &mut Graph<'_, T>, layer: &GroupConv, input: &OrbitFeature) -> Result<OrbitFeature> {
    let pre = group_conv1d_linear(g, layer, input)?;
    let var = g.tape.relu(pre);
    Ok(OrbitFeature { var, ..input.clone() })
}

/// Shared pointwise affine map plus ReLU on every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointwise {
    pub spec: LayerSpec,
    pub linear: Linear,
}

impl Pointwise {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let linear = Linear::new(store, name, spec.in_width, spec.out_width, rng);
        Ok(Self { spec, linear })
    }
}

pub fn pointwise_layer<T: Real>(g: &mut Graph<'_, T>, layer: &Pointwise, input: &OrbitFeature) -> Result<OrbitFeature> {
    if input.channels != layer.spec.in_width {
        return Err(EonError::Shape("pointwise width mismatch".into()));
    }
    let y = layer.linear.forward(g, input.var);
    let var = g.tape.relu(y);
    Ok(OrbitFeature {
        var,
        channels: layer.spec.out_width,
        ..input.clone()
    })
}

/// Per-slot two-layer scorer: `[P × N]` orientation scores.
pub fn orientation_head<T: Real>(g: &mut Graph<'_, T>, head: &Mlp2, input: &OrbitFeature) -> Result<Var> {
    if input.channels != head.l1.fan_in || head.l2.fan_out != 1 {
        return Err(EonError::Shape("orientation head width mismatch".into()));
    }
    let s = head.forward(g, input.var);
    Ok(g.tape.reshape(s, input.len(), input.order()))
}

/// Two-layer foreground scorer on the slot-wise maximum: `[P × 1]` logits.
pub fn segmentation_head<T: Real>(g: &mut Graph<'_, T>, head: &Mlp2, input: &OrbitFeature) -> Result<Var> {
    if input.channels != head.l1.fan_in || head.l2.fan_out != 1 {
        return Err(EonError::Shape("segmentation head width mismatch".into()));
    }
    let pooled = g.tape.group_max(input.var, input.order());
    Ok(head.forward(g, pooled))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub samples: usize,
    pub radius: f64,
    pub max_neighbors: usize,
    pub hidden: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub kernel_width: usize,
    pub depthwise: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig {
                samples: 256,
                radius: 0.3,
                max_neighbors: 16,
                hidden: 24,
                width: 32,
            },
            stage2: StageConfig {
                samples: 96,
                radius: 0.6,
                max_neighbors: 16,
                hidden: 48,
                width: 64,
            },
            kernel_width: 3,
            depthwise: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        self.layer_specs(1, 1).into_iter().try_for_each(|s| s.validate())
    }

    /// Specs of `[sa1, conv1, sa2, conv2]` for the given stage group orders.
    pub fn layer_specs(&self, order1: usize, order2: usize) -> Vec<LayerSpec> {
        let (s1, s2) = (&self.stage1, &self.stage2);
        vec![
            LayerSpec::set_abstraction(2, s1.hidden, s1.width, s1.samples, s1.radius, s1.max_neighbors),
            LayerSpec::group_conv(s1.width, effective_kernel_width(self.kernel_width, order1), self.depthwise),
            LayerSpec::set_abstraction(s1.width, s2.hidden, s2.width, s2.samples, s2.radius, s2.max_neighbors),
            LayerSpec::group_conv(s2.width, effective_kernel_width(self.kernel_width, order2), self.depthwise),
        ]
    }

    /// Sum of the set-abstraction radii: the backbone's receptive reach.
    pub fn receptive_radius(&self) -> f64 {
        self.stage1.radius + self.stage2.radius
    }
}

/// Two set-abstraction stages, each followed by a group convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub sa1: SetAbstraction,
    pub conv1: GroupConv,
    pub sa2: SetAbstraction,
    pub conv2: GroupConv,
    pub group1: CyclicGroup,
    pub group2: CyclicGroup,
}

impl Backbone {
    /// `group2` is the group carried through the second stage; it differs
    /// from `group1` only when equivariance is suspended between stages.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &BackboneConfig,
        group1: CyclicGroup,
        group2: CyclicGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let specs = cfg.layer_specs(group1.order(), group2.order());
        Ok(Self {
            sa1: SetAbstraction::new(store, "backbone.sa1", specs[0].clone(), rng)?,
            conv1: GroupConv::new(store, "backbone.conv1", specs[1].clone(), rng)?,
            sa2: SetAbstraction::new(store, "backbone.sa2", specs[2].clone(), rng)?,
            conv2: GroupConv::new(store, "backbone.conv2", specs[3].clone(), rng)?,
            group1,
            group2,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        vec![
            self.sa1.spec.clone(),
            self.conv1.spec.clone(),
            self.sa2.spec.clone(),
            self.conv2.spec.clone(),
        ]
    }

    pub fn stage1<T: Real>(&self, g: &mut Graph<'_, T>, points: &[Vec3]) -> Result<OrbitFeature> {
        let lifted = lift_inputs(g, points, self.group1)?;
        let f = set_abstraction_layer(g, &self.sa1, &lifted, None)?;
        group_conv1d(g, &self.conv1, &f)
    }

    pub fn stage2<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        input: &OrbitFeature,
        frames: Option<&[GroupElement]>,
    ) -> Result<OrbitFeature> {
        let f = set_abstraction_layer(g, &self.sa2, input, frames)?;
        group_conv1d(g, &self.conv2, &f)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, points: &[Vec3]) -> Result<(OrbitFeature, OrbitFeature)> {
        let s1 = self.stage1(g, points)?;
        let s2 = self.stage2(g, &s1, None)?;
        Ok((s1, s2))
    }
}

/// Median wall-clock seconds of `runs` (at least five) invocations.
pub fn measure_forward_time<F: FnMut()>(runs: usize, mut f: F) -> f64 {
    let mut times: Vec<f64> = (0..runs.max(5))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamIndexEntry {
    pub shape: [usize; 2],
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub dtype: String,
}

/// Row-major little-endian concatenation plus the name index.
pub fn encode_params<T: Real>(store: &ParamStore<T>) -> (Vec<u8>, BTreeMap<String, ParamIndexEntry>) {
    let mut bytes = Vec::with_capacity(count_parameters(store) * T::BYTES);
    let mut index = BTreeMap::new();
    for (_, name, t) in store.iter() {
        index.insert(
            name.to_string(),
            ParamIndexEntry {
                shape: [t.rows, t.cols],
                offset: bytes.len(),
                dtype: T::DTYPE.to_string(),
            },
        );
        for v in &t.data {
            v.write_le(&mut bytes);
        }
    }
    (bytes, index)
}

fn read_entry<T: Real>(bytes: &[u8], name: &str, e: &ParamIndexEntry) -> Result<Tensor<T>> {
    let n = e.shape[0] * e.shape[1];
    let width = match e.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(EonError::parse("params.bin", format!("{name}: unknown dtype {other}"))),
    };
    let end = e.offset + n * width;
    if end > bytes.len() {
        return Err(EonError::parse("params.bin", format!("{name}: data past end of file")));
    }
    let data = bytes[e.offset..end]
        .chunks_exact(width)
        .map(|c| if width == 4 { T::of(f32::read_le(c) as f64) } else { T::of(f64::read_le(c)) })
        .collect();
    Ok(Tensor::from_vec(e.shape[0], e.shape[1], data))
}

/// Overwrites every tensor of `store` from encoded bytes, matching by name
/// and shape.
pub fn decode_params_into<T: Real>(
    store: &mut ParamStore<T>,
    bytes: &[u8],
    index: &BTreeMap<String, ParamIndexEntry>,
) -> Result<()> {
    if index.len() != store.len() {
        return Err(EonError::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            index.len(),
            store.len()
        )));
    }
    for i in 0..store.len() {
        let name = store.names[i].clone();
        let entry = index
            .get(&name)
            .ok_or_else(|| EonError::Config(format!("checkpoint lacks parameter {name}")))?;
        let t = read_entry::<T>(bytes, &name, entry)?;
        let cur = &store.values[i];
        if (t.rows, t.cols) != (cur.rows, cur.cols) {
            return Err(EonError::Config(format!(
                "parameter {name} has shape {:?}, model expects [{}, {}]",
                entry.shape, cur.rows, cur.cols
            )));
        }
        store.values[i] = t;
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| EonError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| EonError::io(path, e))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect()
    }

    fn rotate_exact(points: &[Vec3], e: &GroupElement) -> Vec<Vec3> {
        let (c, s) = e.cos_sin();
        points.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]).collect()
    }

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            stage1: StageConfig {
                samples: 24,
                radius: 0.6,
                max_neighbors: 8,
                hidden: 6,
                width: 5,
            },
            stage2: StageConfig {
                samples: 8,
                radius: 1.2,
                max_neighbors: 8,
                hidden: 6,
                width: 7,
            },
            kernel_width: 3,
            depthwise: false,
        }
    }

    #[test]
    fn fps_starts_at_zero_and_breaks_ties_low() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.5, 0.0]];
        assert_eq!(farthest_point_sample(&pts, &[0, 1, 2, 3], 3), vec![0, 1, 2]);
        assert_eq!(component_fps(&pts, 9, 0.1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn component_fps_splits_budget_by_size() {
        let mut pts = Vec::new();
        for i in 0..6 {
            pts.push([i as f64 * 0.1, 0.0, 0.0]);
        }
        for i in 0..3 {
            pts.push([10.0 + i as f64 * 0.1, 0.0, 0.0]);
        }
        let picks = component_fps(&pts, 3, 0.15);
        assert_eq!(picks, vec![0, 5, 6]);
    }

    #[test]
    fn ball_query_takes_first_k_by_index() {
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0], [0.2, 0.0, 0.0]];
        assert_eq!(ball_query(&[[0.0, 0.0, 0.0]], &pts, 0.5, 2), vec![vec![0, 1]]);
        assert_eq!(ball_query(&[[0.0, 0.0, 0.0]], &pts, 0.5, 8), vec![vec![0, 1, 3]]);
    }

    #[test]
    fn lift_replicates_invariant_channels() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let pts = vec![[0.3, 0.1, 0.37], [1.0, 2.0, 0.0]];
        let f = lift_inputs(&mut g, &pts, CyclicGroup::new(4).unwrap()).unwrap();
        for slot in 0..4 {
            assert_eq!(f.slot(&g.tape, 0, slot), &[1.0, 0.37]);
        }
        assert!(lift_inputs(&mut g, &[], CyclicGroup::new(1).unwrap()).is_err());
    }

    #[test]
    fn linear_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        Linear::new(&mut store, "l", 7, 3, &mut seeded_rng(0));
        assert_eq!(count_parameters(&store), 7 * 3 + 3);
    }

    fn backbone_orbits(points: &[Vec3], order: usize) -> (Vec<f64>, Vec<Vec3>, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let group = CyclicGroup::new(order).unwrap();
        let bb = Backbone::new(&mut store, &small_cfg(), group, group, &mut seeded_rng(3)).unwrap();
        let mut g = Graph::new(&store);
        let (_, seeds) = bb.forward(&mut g, points).unwrap();
        (g.value(seeds.var).data.clone(), seeds.positions.clone(), store.clone())
    }

    #[test]
    fn whole_cloud_rotation_shifts_backbone_orbits() {
        let pts = cloud(11, 60);
        let group = CyclicGroup::new(4).unwrap();
        let (base, base_pos, _) = backbone_orbits(&pts, 4);
        let c = 7;
        for g0 in group.elements() {
            let (rot, rot_pos, _) = backbone_orbits(&rotate_exact(&pts, &g0), 4);
            for (p, q) in base_pos.iter().zip(&rot_pos) {
                let (cs, sn) = g0.cos_sin();
                assert_eq!([cs * p[0] - sn * p[1], sn * p[0] + cs * p[1], p[2]], *q);
            }
            for p in 0..base_pos.len() {
                for slot in 0..4 {
                    let moved = (g0.index() + slot) % 4;
                    for ch in 0..c {
                        let a = base[(p * 4 + slot) * c + ch];
                        let b = rot[(p * 4 + moved) * c + ch];
                        assert!((a - b).abs() <= 1e-12, "g0={g0} p={p} slot={slot}");
                    }
                }
            }
        }
    }

    #[test]
    fn group_conv_commutes_with_shift_and_delta_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let conv = GroupConv::new(&mut store, "c", LayerSpec::group_conv(3, 3, false), &mut seeded_rng(5)).unwrap();
        let group = CyclicGroup::new(4).unwrap();
        let mut rng = seeded_rng(9);
        let data: Vec<f64> = (0..2 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |data: Vec<f64>, store: &ParamStore<f64>| {
            let mut g = Graph::new(store);
            let var = g.tape.constant(Tensor::from_vec(8, 3, data));
            let f = OrbitFeature {
                var,
                group,
                channels: 3,
                positions: vec![[0.0; 3]; 2],
                source: vec![0, 1],
                parent: vec![0, 1],
            };
            let out = group_conv1d(&mut g, &conv, &f).unwrap();
            g.value(out.var).data.clone()
        };
        let base = run(data.clone(), &store);
        let k0 = 3;
        let mut shifted = vec![0.0; data.len()];
        for p in 0..2 {
            for slot in 0..4 {
                for ch in 0..3 {
                    shifted[(p * 4 + (slot + k0) % 4) * 3 + ch] = data[(p * 4 + slot) * 3 + ch];
                }
            }
        }
        let out = run(shifted, &store);
        for p in 0..2 {
            for slot in 0..4 {
                for ch in 0..3 {
                    let a = base[(p * 4 + slot) * 3 + ch];
                    let b = out[(p * 4 + (slot + k0) % 4) * 3 + ch];
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }

        let mut delta = store.clone();
        for (i, tap) in conv.taps.iter().enumerate() {
            let t = delta.get_mut(*tap);
            t.data.fill(0.0);
            if i == 1 {
                for ch in 0..3 {
                    t.data[ch * 3 + ch] = 1.0;
                }
            }
        }
        delta.get_mut(conv.bias).data.fill(0.0);
        let mut g = Graph::new(&delta);
        let var = g.tape.constant(Tensor::from_vec(8, 3, data.clone()));
        let f = OrbitFeature {
            var,
            group,
            channels: 3,
            positions: vec![[0.0; 3]; 2],
            source: vec![0, 1],
            parent: vec![0, 1],
        };
        let pre = group_conv1d_linear(&mut g, &conv, &f).unwrap();
        assert_eq!(g.value(pre).data, data);
    }

    #[test]
    fn group_conv_rejects_wide_kernel() {
        let mut store = ParamStore::<f64>::new();
        let conv = GroupConv::new(&mut store, "c", LayerSpec::group_conv(2, 3, true), &mut seeded_rng(5)).unwrap();
        let mut g = Graph::new(&store);
        let var = g.tape.constant(Tensor::zeros(2, 2));
        let f = OrbitFeature {
            var,
            group: CyclicGroup::new(2).unwrap(),
            channels: 2,
            positions: vec![[0.0; 3]],
            source: vec![0],
            parent: vec![0],
        };
        assert!(matches!(group_conv1d(&mut g, &conv, &f), Err(EonError::InvalidArgument(_))));
    }

    #[test]
    fn heads_respect_slot_structure() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(1);
        let oh = Mlp2::new(&mut store, "o", [3, 4, 1], false, &mut rng);
        let sh = Mlp2::new(&mut store, "s", [3, 4, 1], false, &mut rng);
        let group = CyclicGroup::new(4).unwrap();
        let data: Vec<f64> = (0..12).map(|i| ((i * 5) % 7) as f64 * 0.3 - 1.0).collect();
        let mut shifted = vec![0.0; 12];
        for slot in 0..4 {
            for ch in 0..3 {
                shifted[((slot + 1) % 4) * 3 + ch] = data[slot * 3 + ch];
            }
        }
        let eval = |d: Vec<f64>| {
            let mut g = Graph::new(&store);
            let var = g.tape.constant(Tensor::from_vec(4, 3, d));
            let f = OrbitFeature {
                var,
                group,
                channels: 3,
                positions: vec![[0.0; 3]],
                source: vec![0],
                parent: vec![0],
            };
            let o = orientation_head(&mut g, &oh, &f).unwrap();
            let s = segmentation_head(&mut g, &sh, &f).unwrap();
            (g.value(o).data.clone(), g.value(s).data[0])
        };
        let (o1, s1) = eval(data);
        let (o2, s2) = eval(shifted);
        assert_eq!(s1, s2);
        for slot in 0..4 {
            assert_eq!(o1[slot], o2[(slot + 1) % 4]);
        }
    }

    #[test]
    fn params_round_trip_through_bytes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(2);
        Mlp2::new(&mut store, "m", [3, 4, 2], false, &mut rng);
        let (bytes, index) = encode_params(&store);
        let mut other = store.clone();
        other.values_mut().for_each(|t| t.data.fill(0.0));
        decode_params_into(&mut other, &bytes, &index).unwrap();
        assert_eq!(other, store);
        let f32_store: ParamStore<f32> = store.cast();
        let (b32, i32_) = encode_params(&f32_store);
        let mut back = store.clone();
        decode_params_into(&mut back, &b32, &i32_).unwrap();
        let restored: ParamStore<f32> = back.cast();
        assert_eq!(restored, f32_store);
    }
}
