//! Forward models for the three NeRF families: plain MLP, tri-plane + MLP,
//! and multi-resolution hash table + MLP, all mapping (x,y,z) to (r,g,b,σ).
//!
//! Color goes through a sigmoid head and density through softplus, so
//! outputs are bounded regardless of parameters. All samplers clamp
//! coordinates to the grid, and the same interpolation plans drive both the
//! value-space samplers and the differentiable tape path.

use adkernel::{Activation, ComboTerm, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

use crate::ngc::Container;
use crate::{Error, Result};

pub const SPATIAL_HASH_PRIMES: [u32; 3] = [1, 2654435761, 805459861];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "TRI")]
    Tri,
    #[serde(rename = "HASH")]
    Hash,
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::Mlp => "MLP",
            Family::Tri => "TRI",
            Family::Hash => "HASH",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MlpActivation {
    ReLU,
    Sine,
}

/// Full specification of one NeRF architecture. Family-specific fields are
/// present exactly when the family uses them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub family: Family,
    pub mlp_hidden_layers: usize,
    pub mlp_hidden_dim: usize,
    pub activation: MlpActivation,
    pub frequency_encoding: bool,
    /// Number of sin/cos frequency bands when `frequency_encoding` is on;
    /// input width is `6 * num_freqs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_freqs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tri_resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tri_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_levels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_table_size_log2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_features_per_entry: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_min_resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_max_resolution: Option<usize>,
}

impl ArchDescriptor {
    pub fn num_freqs(&self) -> usize {
        self.num_freqs.unwrap_or(0)
    }

    pub fn hash_table_size(&self) -> usize {
        1usize << self.hash_table_size_log2.unwrap_or(0)
    }

    /// Width of the MLP input layer: MLP `6F`, TRI `6F + C`, HASH `N*F`.
    pub fn mlp_input_width(&self) -> usize {
        match self.family {
            Family::Mlp => 6 * self.num_freqs(),
            Family::Tri => 6 * self.num_freqs() + self.tri_channels.unwrap_or(0),
            Family::Hash => self.hash_levels.unwrap_or(0) * self.hash_features_per_entry.unwrap_or(0),
        }
    }

    /// `[input, hidden.., 4]`.
    pub fn mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![self.mlp_input_width()];
        w.extend(std::iter::repeat(self.mlp_hidden_dim).take(self.mlp_hidden_layers));
        w.push(4);
        w
    }

    /// Per-level hash grid resolutions, geometric between min and max.
    pub fn hash_resolutions(&self) -> Vec<usize> {
        let n = self.hash_levels.unwrap_or(0);
        let lo = self.hash_min_resolution.unwrap_or(16) as f64;
        let hi = self.hash_max_resolution.unwrap_or(128) as f64;
        if n <= 1 {
            return vec![lo as usize; n];
        }
        let growth = (hi / lo).powf(1.0 / (n - 1) as f64);
        (0..n).map(|l| (lo * growth.powi(l as i32)).floor().max(1.0) as usize).collect()
    }

    /// Family constraints: MLP/TRI carry a frequency encoding and TRI uses
    /// sine activations; HASH takes the table output alone through ReLU.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(format!("arch {:?}: {msg}", self.family)));
        let tri_set = self.tri_resolution.is_some() || self.tri_channels.is_some();
        let hash_set = self.hash_levels.is_some()
            || self.hash_table_size_log2.is_some()
            || self.hash_features_per_entry.is_some()
            || self.hash_min_resolution.is_some()
            || self.hash_max_resolution.is_some();
        match self.family {
            Family::Mlp => {
                if !self.frequency_encoding || self.num_freqs() == 0 {
                    return fail("MLP family requires frequency encoding".into());
                }
                if self.activation != MlpActivation::ReLU {
                    return fail("MLP family uses ReLU".into());
                }
                if tri_set || hash_set {
                    return fail("unexpected tri/hash fields".into());
                }
            }
            Family::Tri => {
                if !self.frequency_encoding || self.num_freqs() == 0 {
                    return fail("TRI family requires frequency encoding".into());
                }
                if self.activation != MlpActivation::Sine {
                    return fail("TRI family uses sine".into());
                }
                if self.tri_resolution.unwrap_or(0) == 0 || self.tri_channels.unwrap_or(0) == 0 {
                    return fail("TRI family requires tri_resolution and tri_channels".into());
                }
                if hash_set {
                    return fail("unexpected hash fields".into());
                }
            }
            Family::Hash => {
                if self.frequency_encoding || self.num_freqs.is_some() {
                    return fail("HASH family takes no frequency encoding".into());
                }
                if self.activation != MlpActivation::ReLU {
                    return fail("HASH family uses ReLU".into());
                }
                if self.hash_levels.unwrap_or(0) == 0
                    || self.hash_table_size_log2.is_none()
                    || self.hash_features_per_entry.unwrap_or(0) == 0
                {
                    return fail("HASH family requires levels, table size and features per entry".into());
                }
                if self.hash_min_resolution.unwrap_or(0) == 0 || self.hash_max_resolution.unwrap_or(0) == 0 {
                    return fail("HASH family requires min/max grid resolution".into());
                }
                if tri_set {
                    return fail("unexpected tri fields".into());
                }
            }
        }
        if self.mlp_hidden_layers == 0 || self.mlp_hidden_dim == 0 {
            return fail("MLP must have hidden layers".into());
        }
        Ok(())
    }

    /// Expected tensor directory: grid tensors first, then MLP layers.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.family {
            Family::Mlp => {}
            Family::Tri => {
                let r = self.tri_resolution.unwrap();
                let c = self.tri_channels.unwrap();
                for plane in ["xy", "xz", "yz"] {
                    out.push((format!("tri.plane_{plane}"), vec![r, r, c]));
                }
            }
            Family::Hash => {
                let t = self.hash_table_size();
                let f = self.hash_features_per_entry.unwrap();
                for l in 0..self.hash_levels.unwrap() {
                    out.push((format!("hash.level{l}.table"), vec![t, f]));
                }
            }
        }
        let widths = self.mlp_widths();
        for (i, w) in widths.windows(2).enumerate() {
            out.push((format!("mlp.layer{i}.weight"), vec![w[1], w[0]]));
            out.push((format!("mlp.layer{i}.bias"), vec![w[1]]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.expected_tensors().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

// ─── presets ─────────────────────────────────────────────────────────

fn base(family: Family, layers: usize, dim: usize) -> ArchDescriptor {
    let (activation, freq) = match family {
        Family::Tri => (MlpActivation::Sine, true),
        _ => (MlpActivation::ReLU, family == Family::Mlp),
    };
    ArchDescriptor {
        family,
        mlp_hidden_layers: layers,
        mlp_hidden_dim: dim,
        activation,
        frequency_encoding: freq,
        num_freqs: if freq { Some(24) } else { None },
        tri_resolution: None,
        tri_channels: None,
        hash_levels: None,
        hash_table_size_log2: None,
        hash_features_per_entry: None,
        hash_min_resolution: None,
        hash_max_resolution: None,
    }
}

/// The 13 reference architectures (3 training + 10 unseen variants).
pub fn paper_preset(name: &str) -> Option<ArchDescriptor> {
    let tri = |layers, dim, res, ch| {
        let mut a = base(Family::Tri, layers, dim);
        a.tri_resolution = Some(res);
        a.tri_channels = Some(ch);
        a
    };
    let hash = |layers, dim, levels, log2t| {
        let mut a = base(Family::Hash, layers, dim);
        a.hash_levels = Some(levels);
        a.hash_table_size_log2 = Some(log2t);
        a.hash_features_per_entry = Some(2);
        a.hash_min_resolution = Some(16);
        a.hash_max_resolution = Some(128);
        a
    };
    Some(match name {
        "MLP" => base(Family::Mlp, 3, 64),
        "TRI" => tri(3, 64, 32, 16),
        "HASH" => hash(3, 64, 4, 12),
        "MLP-2L" => base(Family::Mlp, 2, 64),
        "MLP-32H" => base(Family::Mlp, 3, 32),
        "TRI-2L" => tri(2, 64, 32, 16),
        "TRI-32H" => tri(3, 32, 32, 16),
        "TRI-16W" => tri(3, 64, 16, 16),
        "TRI-8C" => tri(3, 64, 32, 8),
        "HASH-2L" => hash(2, 64, 4, 12),
        "HASH-32H" => hash(3, 32, 4, 12),
        "HASH-3N" => hash(3, 64, 3, 12),
        "HASH-11T" => hash(3, 64, 4, 11),
        _ => return None,
    })
}

/// Desk-scale architectures used for dataset generation, mirroring the
/// reference families at a budget a single CPU can fit quickly.
pub fn desk_preset(name: &str) -> Option<ArchDescriptor> {
    Some(match name {
        "MLP" => {
            let mut a = base(Family::Mlp, 2, 64);
            a.num_freqs = Some(8);
            a
        }
        "TRI" => {
            let mut a = base(Family::Tri, 2, 32);
            a.num_freqs = Some(8);
            a.tri_resolution = Some(16);
            a.tri_channels = Some(8);
            a
        }
        "HASH" => {
            let mut a = base(Family::Hash, 2, 32);
            a.hash_levels = Some(4);
            a.hash_table_size_log2 = Some(9);
            a.hash_features_per_entry = Some(2);
            a.hash_min_resolution = Some(4);
            a.hash_max_resolution = Some(32);
            a
        }
        // Unseen-architecture analogues: one fewer hidden layer, half the
        // hidden width, one fewer hash level.
        "MLP-1L" => {
            let mut a = desk_preset("MLP").unwrap();
            a.mlp_hidden_layers -= 1;
            a
        }
        "TRI-16H" => {
            let mut a = desk_preset("TRI").unwrap();
            a.mlp_hidden_dim /= 2;
            a
        }
        "HASH-3N" => {
            let mut a = desk_preset("HASH").unwrap();
            a.hash_levels = Some(3);
            a
        }
        _ => return None,
    })
}

pub fn preset(set: &str, name: &str) -> Option<ArchDescriptor> {
    match set {
        "paper" => paper_preset(name),
        "desk" => desk_preset(name),
        _ => None,
    }
}

// ─── checkpoint ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub scene_id: String,
    pub class_label: String,
    /// Preset key the checkpoint was fitted under (e.g. "MLP", "HASH-3N").
    pub family: String,
    pub train_loss: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone)]
pub struct NerfCheckpoint<T> {
    pub arch: ArchDescriptor,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub meta: CheckpointMeta,
}

impl<T: adkernel::Real> NerfCheckpoint<T> {
    /// Random initialization following each family's conventions.
    pub fn init(arch: &ArchDescriptor, meta: CheckpointMeta, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in arch.expected_tensors() {
            let t = if name.starts_with("tri.plane") {
                Tensor::uniform(&shape, 0.1, rng)
            } else if name.starts_with("hash.") {
                Tensor::uniform(&shape, 1e-2, rng)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                // [out, in] weight
                Tensor::kaiming(shape[0], shape[1], rng)
            };
            tensors.push((name, t));
        }
        Ok(Self { arch: arch.clone(), tensors, meta })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let expected = self.arch.expected_tensors();
        if expected.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "checkpoint {}: {} tensors, expected {}",
                self.meta.scene_id,
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&self.tensors) {
            if name != got_name || shape != got.shape() {
                return Err(Error::Invalid(format!(
                    "checkpoint {}: tensor {got_name} {:?}, expected {name} {:?}",
                    self.meta.scene_id,
                    got.shape(),
                    shape
                )));
            }
            if !got.all_finite() {
                return Err(Error::Invalid(format!("checkpoint {}: non-finite values in {name}", self.meta.scene_id)));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }
}

impl NerfCheckpoint<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new("NERF");
        c.arch = Some(self.arch.clone());
        c.metadata = serde_json::to_value(&self.meta)?;
        c.tensors = self.tensors.clone();
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != "NERF" {
            return Err(Error::Format(format!("{}: kind {} is not NERF", path.display(), c.kind)));
        }
        let arch = c.arch.ok_or_else(|| Error::Format(format!("{}: missing arch", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_value(c.metadata.clone())?;
        let ckpt = Self { arch, tensors: c.tensors, meta };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

// ─── frequency encoding ──────────────────────────────────────────────

/// `[sin(2^k π p_d), cos(2^k π p_d)]` for k = 0..K, d in x,y,z; length 6K.
pub fn freq_encode(p: [f64; 3], num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * num_freqs);
    for k in 0..num_freqs {
        let scale = (1u64 << k) as f64 * std::f64::consts::PI;
        for d in 0..3 {
            let arg = scale * p[d];
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

fn freq_features<T: adkernel::Real>(points: &[[f64; 3]], num_freqs: usize) -> Tensor<T> {
    let cols = 6 * num_freqs;
    let mut data = Vec::with_capacity(points.len() * cols);
    for &p in points {
        data.extend(freq_encode(p, num_freqs).into_iter().map(T::from_f64));
    }
    Tensor::from_vec(data, &[points.len(), cols]).expect("freq feature shape")
}

// ─── interpolation plans ─────────────────────────────────────────────

/// Precomputed gather indices and weights for one batch of points.
pub struct InterpPlan {
    pub idx: Vec<u32>,
    pub w: Vec<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneAxis {
    Xy,
    Xz,
    Yz,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::Xy, PlaneAxis::Xz, PlaneAxis::Yz];

    fn coords(&self, p: [f64; 3]) -> (f64, f64) {
        match self {
            PlaneAxis::Xy => (p[0], p[1]),
            PlaneAxis::Xz => (p[0], p[2]),
            PlaneAxis::Yz => (p[1], p[2]),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlaneAxis::Xy => "xy",
            PlaneAxis::Xz => "xz",
            PlaneAxis::Yz => "yz",
        }
    }
}

fn grid_pos(c: f64, r: usize) -> (usize, f64) {
    if r <= 1 {
        return (0, 0.0);
    }
    let g = ((c + 1.0) / 2.0).clamp(0.0, 1.0) * (r - 1) as f64;
    let i0 = (g.floor() as usize).min(r - 2);
    (i0, g - i0 as f64)
}

/// Bilinear plan on one R x R plane; rows index `[a * R + b]`.
pub fn triplane_plan(resolution: usize, points: &[[f64; 3]], plane: PlaneAxis) -> InterpPlan {
    let r = resolution;
    let mut idx = Vec::with_capacity(points.len() * 4);
    let mut w = Vec::with_capacity(points.len() * 4);
    for &p in points {
        let (u, v) = plane.coords(p);
        let (a0, fa) = grid_pos(u, r);
        let (b0, fb) = grid_pos(v, r);
        let a1 = (a0 + 1).min(r - 1);
        let b1 = (b0 + 1).min(r - 1);
        idx.extend_from_slice(&[
            (a0 * r + b0) as u32,
            (a1 * r + b0) as u32,
            (a0 * r + b1) as u32,
            (a1 * r + b1) as u32,
        ]);
        w.extend_from_slice(&[(1.0 - fa) * (1.0 - fb), fa * (1.0 - fb), (1.0 - fa) * fb, fa * fb]);
    }
    InterpPlan { idx, w, k: 4 }
}

pub fn spatial_hash(i: u32, j: u32, k: u32, table_size: usize) -> usize {
    let h = i
        .wrapping_mul(SPATIAL_HASH_PRIMES[0])
        ^ j.wrapping_mul(SPATIAL_HASH_PRIMES[1])
        ^ k.wrapping_mul(SPATIAL_HASH_PRIMES[2]);
    (h as usize) % table_size
}

/// Trilinear plan on one hash level with `res` cells per axis.
pub fn hash_plan(res: usize, table_size: usize, points: &[[f64; 3]]) -> InterpPlan {
    let mut idx = Vec::with_capacity(points.len() * 8);
    let mut w = Vec::with_capacity(points.len() * 8);
    for &p in points {
        let mut i0 = [0usize; 3];
        let mut f = [0f64; 3];
        for d in 0..3 {
            let u = ((p[d] + 1.0) / 2.0).clamp(0.0, 1.0) * res as f64;
            let c = (u.floor() as usize).min(res.saturating_sub(1));
            i0[d] = c;
            f[d] = u - c as f64;
        }
        for dk in 0..2usize {
            for dj in 0..2usize {
                for di in 0..2usize {
                    let (i, j, k) = ((i0[0] + di) as u32, (i0[1] + dj) as u32, (i0[2] + dk) as u32);
                    idx.push(spatial_hash(i, j, k, table_size) as u32);
                    let wx = if di == 0 { 1.0 - f[0] } else { f[0] };
                    let wy = if dj == 0 { 1.0 - f[1] } else { f[1] };
                    let wz = if dk == 0 { 1.0 - f[2] } else { f[2] };
                    w.push(wx * wy * wz);
                }
            }
        }
    }
    InterpPlan { idx, w, k: 8 }
}

fn apply_plan<T: adkernel::Real>(plan: &InterpPlan, table: &Tensor<T>, cols: usize, out: &mut [T]) {
    let tv = table.data();
    let points = plan.idx.len() / plan.k;
    for pi in 0..points {
        for j in 0..plan.k {
            let wj = T::from_f64(plan.w[pi * plan.k + j]);
            let row = plan.idx[pi * plan.k + j] as usize * cols;
            for c in 0..cols {
                out[pi * cols + c] = out[pi * cols + c] + wj * tv[row + c];
            }
        }
    }
}

/// Per-plane bilinear samples, summed over the three planes.
pub fn triplane_sample<T: adkernel::Real>(planes: &[&Tensor<T>; 3], p: [f64; 3]) -> Vec<T> {
    let r = planes[0].shape()[0];
    let c = planes[0].shape()[2];
    let mut out = vec![T::zero(); c];
    for (plane, axis) in planes.iter().zip(PlaneAxis::ALL) {
        let plan = triplane_plan(r, &[p], axis);
        apply_plan(&plan, plane, c, &mut out);
    }
    out
}

/// Trilinear per-level samples concatenated: length `N * F`.
pub fn hash_sample<T: adkernel::Real>(tables: &[&Tensor<T>], p: [f64; 3], arch: &ArchDescriptor) -> Vec<T> {
    let f = arch.hash_features_per_entry.unwrap_or(0);
    let t = arch.hash_table_size();
    let mut out = vec![T::zero(); tables.len() * f];
    for (l, (table, res)) in tables.iter().zip(arch.hash_resolutions()).enumerate() {
        let plan = hash_plan(res, t, &[p]);
        apply_plan(&plan, table, f, &mut out[l * f..(l + 1) * f]);
    }
    out
}

// ─── differentiable forward ──────────────────────────────────────────

/// Checkpoint tensors registered on a tape, in checkpoint order.
pub struct FieldVars {
    pub vars: Vec<(String, Var)>,
}

impl FieldVars {
    pub fn var(&self, name: &str) -> Var {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v).expect("field tensor")
    }
}

pub fn register_field<T: adkernel::Real>(
    g: &mut Graph<T>,
    ckpt: &NerfCheckpoint<T>,
    trainable: bool,
) -> FieldVars {
    let vars = ckpt.tensors.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable))).collect();
    FieldVars { vars }
}

fn act_of(a: MlpActivation) -> Activation {
    match a {
        MlpActivation::ReLU => Activation::Relu,
        MlpActivation::Sine => Activation::Sine,
    }
}

/// Raw 4-wide MLP output for prepared first-layer terms.
fn mlp_tail<T: adkernel::Real>(
    g: &mut Graph<T>,
    vars: &FieldVars,
    arch: &ArchDescriptor,
    first_terms: &[ComboTerm],
) -> Result<Var> {
    let act = act_of(arch.activation);
    let nlayers = arch.mlp_hidden_layers + 1;
    let b0 = vars.var("mlp.layer0.bias");
    let b0r = {
        let len = g.value(b0).numel();
        g.reshape(b0, &[1, len])?
    };
    let mut h = g.linear_combo(first_terms, Some(b0r), act)?;
    for l in 1..nlayers {
        let w = vars.var(&format!("mlp.layer{l}.weight"));
        let b = vars.var(&format!("mlp.layer{l}.bias"));
        let blen = g.value(b).numel();
        let br = g.reshape(b, &[1, blen])?;
        let layer_act = if l == nlayers - 1 { Activation::None } else { act };
        h = g.linear(h, w, Some(br), layer_act)?;
    }
    Ok(h)
}

/// Batched field evaluation: returns (color `[P,3]`, sigma `[P,1]`),
/// differentiable with respect to every registered tensor.
pub fn field_forward<T: adkernel::Real>(
    g: &mut Graph<T>,
    vars: &FieldVars,
    arch: &ArchDescriptor,
    points: &[[f64; 3]],
) -> Result<(Var, Var)> {
    if points.is_empty() {
        return Err(Error::Invalid("field_forward: empty point batch".into()));
    }
    let w0 = vars.var("mlp.layer0.weight");
    let raw = match arch.family {
        Family::Mlp => {
            let feats = g.constant(freq_features(points, arch.num_freqs()));
            mlp_tail(g, vars, arch, &[ComboTerm { x: feats, gather: None, weight: w0 }])?
        }
        Family::Tri => {
            let r = arch.tri_resolution.unwrap();
            let c = arch.tri_channels.unwrap();
            let f6 = 6 * arch.num_freqs();
            let feats = g.constant(freq_features(points, arch.num_freqs()));
            let mut tri_feat = None;
            for axis in PlaneAxis::ALL {
                let plane = vars.var(&format!("tri.plane_{}", axis.name()));
                let mat = g.reshape(plane, &[r * r, c])?;
                let plan = triplane_plan(r, points, axis);
                let w: Vec<T> = plan.w.iter().map(|&x| T::from_f64(x)).collect();
                let s = g.weighted_gather_rows(mat, Arc::new(plan.idx), Arc::new(w), plan.k)?;
                tri_feat = Some(match tri_feat {
                    None => s,
                    Some(prev) => g.add(prev, s)?,
                });
            }
            let w0_freq = g.slice_cols(w0, 0, f6)?;
            let w0_tri = g.slice_cols(w0, f6, c)?;
            mlp_tail(
                g,
                vars,
                arch,
                &[
                    ComboTerm { x: feats, gather: None, weight: w0_freq },
                    ComboTerm { x: tri_feat.unwrap(), gather: None, weight: w0_tri },
                ],
            )?
        }
        Family::Hash => {
            let f = arch.hash_features_per_entry.unwrap();
            let t = arch.hash_table_size();
            let mut terms = Vec::new();
            for (l, res) in arch.hash_resolutions().into_iter().enumerate() {
                let table = vars.var(&format!("hash.level{l}.table"));
                let mat = g.reshape(table, &[t, f])?;
                let plan = hash_plan(res, t, points);
                let w: Vec<T> = plan.w.iter().map(|&x| T::from_f64(x)).collect();
                let s = g.weighted_gather_rows(mat, Arc::new(plan.idx), Arc::new(w), plan.k)?;
                let wl = g.slice_cols(w0, l * f, f)?;
                terms.push(ComboTerm { x: s, gather: None, weight: wl });
            }
            mlp_tail(g, vars, arch, &terms)?
        }
    };
    let color_raw = g.slice_cols(raw, 0, 3)?;
    let sigma_raw = g.slice_cols(raw, 3, 1)?;
    let color = g.sigmoid(color_raw);
    let sigma = g.softplus(sigma_raw);
    Ok((color, sigma))
}

/// Single-point dispatch: color in (0,1)^3, nonnegative density.
pub fn nerf_forward<T: adkernel::Real>(ckpt: &NerfCheckpoint<T>, p: [f64; 3]) -> Result<([T; 3], T)> {
    ckpt.validate()?;
    let mut g = Graph::new();
    let vars = register_field(&mut g, ckpt, false);
    let (color, sigma) = field_forward(&mut g, &vars, &ckpt.arch, &[p])?;
    let c = g.value(color).data();
    Ok(([c[0], c[1], c[2]], g.value(sigma).data()[0]))
}

/// Batched no-grad evaluation into plain vectors.
pub fn eval_field<T: adkernel::Real>(
    ckpt: &NerfCheckpoint<T>,
    points: &[[f64; 3]],
) -> Result<(Vec<[T; 3]>, Vec<T>)> {
    let mut g = Graph::new();
    let vars = register_field(&mut g, ckpt, false);
    let (color, sigma) = field_forward(&mut g, &vars, &ckpt.arch, points)?;
    let c = g.value(color).data();
    let colors = (0..points.len()).map(|i| [c[i * 3], c[i * 3 + 1], c[i * 3 + 2]]).collect();
    Ok((colors, g.value(sigma).data().to_vec()))
}
