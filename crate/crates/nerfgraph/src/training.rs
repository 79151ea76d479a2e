//! End-to-end framework training: cross-architecture pair batches, the
//! rendering objective (decoder output against the input NeRF's own
//! renders), the pairwise sigmoid contrastive objective with learnable
//! temperature and bias, and their weighted combination.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use adkernel::{onecycle_lr, AdamW, AdamWConfig, Graph, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::decoder::{decode_batch, register_decoder, DecoderConfig, DecoderParams};
use crate::fields::NerfCheckpoint;
use crate::gmn::{encode, graph_tensors, register_gmn, EncoderConfig, GmnParams, GraphTensors};
use crate::ngc::Container;
use crate::paramgraph::checkpoint_to_graph;
use crate::renderer::{
    composite_rays, ray_sphere_span, render_loss, sample_rays, stratified_ts, Image, LossSplit,
    SCENE_RADIUS,
};
use crate::scenes::BG_COLOR;
use crate::{mix, rng_stream, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "r")]
    R,
    #[serde(rename = "rc")]
    RC,
    #[serde(rename = "c")]
    C,
}

impl LossMode {
    pub fn uses_rendering(&self) -> bool {
        !matches!(self, LossMode::C)
    }

    pub fn uses_contrastive(&self) -> bool {
        !matches!(self, LossMode::R)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LossMode::R => "r",
            LossMode::RC => "rc",
            LossMode::C => "c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(LossMode::R),
            "rc" => Ok(LossMode::RC),
            "c" => Ok(LossMode::C),
            other => Err(Error::Config(format!("unknown loss mode {other:?} (expected r, rc or c)"))),
        }
    }
}

/// Learnable contrastive scalars.
#[derive(Debug, Clone)]
pub struct SigLipState<T> {
    pub t: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> SigLipState<T> {
    pub fn init() -> Self {
        Self { t: Tensor::scalar(T::from_f64(10.0)), b: Tensor::scalar(T::from_f64(-10.0)) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    /// Rays per NeRF per step, from one randomly chosen view.
    pub rays_per_nerf: usize,
    pub samples_per_ray: usize,
    pub w_fg: f64,
    pub w_bg: f64,
    pub val_every_epochs: usize,
    pub encoder: EncoderConfig,
    pub decoder_hidden_dim: usize,
    pub decoder_hidden_layers: usize,
    pub decoder_freq_dim: usize,
    pub decoder_skip_into_layer: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::RC,
            epochs: 100,
            batch_size: 8,
            max_lr: 1e-4,
            weight_decay: 1e-2,
            lambda: 2e-2,
            rays_per_nerf: 512,
            samples_per_ray: 48,
            w_fg: 0.8,
            w_bg: 0.2,
            val_every_epochs: 10,
            encoder: EncoderConfig::desk(),
            decoder_hidden_dim: 256,
            decoder_hidden_layers: 4,
            decoder_freq_dim: 144,
            decoder_skip_into_layer: 2,
        }
    }
}

impl TrainConfig {
    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            freq_dim: self.decoder_freq_dim,
            hidden_dim: self.decoder_hidden_dim,
            hidden_layers: self.decoder_hidden_layers,
            skip_into_layer: self.decoder_skip_into_layer,
            embed_dim: self.encoder.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        self.encoder.validate()?;
        self.decoder_config().validate()
    }
}

/// One batch entry: a scene paired across two different families.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedScene {
    pub scene_idx: usize,
    pub family_a: String,
    pub family_b: String,
}

/// Uniformly pick a family pair per scene from the three unordered
/// combinations; scene ids within a batch are distinct by construction.
pub fn sample_pairs(
    scene_indices: &[usize],
    families: &[String],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<PairedScene>>> {
    if families.len() < 2 {
        return Err(Error::Config(
            "pair sampling needs at least two architecture families (single-architecture datasets support mode r only)"
                .into(),
        ));
    }
    let mut combos = Vec::new();
    for i in 0..families.len() {
        for j in i + 1..families.len() {
            combos.push((families[i].clone(), families[j].clone()));
        }
    }
    let mut order = scene_indices.to_vec();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let batch = chunk
            .iter()
            .map(|&scene_idx| {
                let (a, b) = combos[rng.random_range(0..combos.len())].clone();
                PairedScene { scene_idx, family_a: a, family_b: b }
            })
            .collect();
        batches.push(batch);
    }
    Ok(batches)
}

/// SigLIP loss over L2-normalized row embeddings:
/// `-(1/|B|) sum_jk ln sigmoid(l_jk (t u_j . v_k + b))`, `l_jk = 1` on the
/// diagonal and `-1` elsewhere. Gradients flow to U, V, t and b.
pub fn siglip_loss<T: Real>(g: &mut Graph<T>, u: Var, v: Var, t: Var, b: Var) -> Result<Var> {
    let (bu, _du) = g.value(u).dims2().map_err(crate::Error::from)?;
    let (bv, _dv) = g.value(v).dims2().map_err(crate::Error::from)?;
    if bu != bv {
        return Err(Error::Invalid(format!("siglip_loss: {bu} vs {bv} rows")));
    }
    for (name, var) in [("u", u), ("v", v)] {
        let val = g.value(var);
        let (rows, dim) = val.dims2().map_err(crate::Error::from)?;
        for r in 0..rows {
            let norm: f64 = val.data()[r * dim..(r + 1) * dim].iter().map(|&x| Real::to_f64(x).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::Invalid(format!("siglip_loss: {name} row {r} has norm {norm}, expected 1")));
            }
        }
    }
    let logits = g.matmul_nt(u, v)?;
    let scaled = g.mul_scalar(logits, t)?;
    let shifted = g.add_scalar(scaled, b)?;
    let sign = Tensor::from_fn(&[bu, bu], |i| if i / bu == i % bu { T::one() } else { -T::one() });
    let signed = g.mul_const(shifted, &sign)?;
    // -ln sigmoid(z) = softplus(-z)
    let neg = g.affine(signed, -1.0, 0.0);
    let terms = g.softplus(neg);
    let total = g.sum_all(terms);
    Ok(g.affine(total, 1.0 / bu as f64, 0.0))
}

/// L2-normalize rows of a `[B, D]` matrix on the tape.
pub fn l2_normalize_rows<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let sums = g.sum_axis1(sq)?;
    let eps = g.affine(sums, 1.0, 1e-24);
    let norms = g.sqrt(eps);
    let inv = g.recip(norms);
    Ok(g.mul_col(x, inv)?)
}

/// Everything cached per checkpoint for the training loop.
pub struct CachedNerf {
    pub scene_idx: usize,
    pub family: String,
    pub ckpt: NerfCheckpoint<f32>,
    pub graph: GraphTensors<f32>,
}

/// Dataset loaded into memory for training: checkpoints, parameter-graph
/// tensors, and per-view foreground masks.
pub struct TrainData {
    pub dataset: Dataset,
    pub families: Vec<String>,
    /// (scene_idx, family) -> cache slot
    pub index: BTreeMap<(usize, String), usize>,
    pub nerfs: Vec<CachedNerf>,
    pub gt_views: Vec<Vec<Image>>,
}

impl TrainData {
    pub fn load(dataset: Dataset) -> Result<Self> {
        let families = dataset.manifest.families.clone();
        let mut nerfs = Vec::new();
        let mut index = BTreeMap::new();
        for (si, scene) in dataset.manifest.scenes.iter().enumerate() {
            for fam in &families {
                let ckpt = dataset.checkpoint(scene, fam)?;
                let graph = graph_tensors(&checkpoint_to_graph(&ckpt)?);
                index.insert((si, fam.clone()), nerfs.len());
                nerfs.push(CachedNerf { scene_idx: si, family: fam.clone(), ckpt, graph });
            }
        }
        let gt_views = adkernel::par::map_indexed(dataset.manifest.scenes.len(), |si| {
            let spec = &dataset.manifest.scenes[si].spec;
            spec.camera_rig().iter().map(|pose| crate::scenes::render_gt(spec, pose)).collect()
        });
        Ok(Self { dataset, families, index, nerfs, gt_views })
    }

    pub fn nerf(&self, scene_idx: usize, family: &str) -> &CachedNerf {
        &self.nerfs[self.index[&(scene_idx, family.to_string())]]
    }
}

/// Model bundle that trains as one unit.
pub struct FrameworkModel {
    pub encoder: GmnParams<f32>,
    pub decoder: DecoderParams<f32>,
    pub siglip: SigLipState<f32>,
}

impl FrameworkModel {
    pub fn init(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: GmnParams::init(&cfg.encoder, &mut rng_stream(seed, mix(&[0xE4C])))?,
            decoder: DecoderParams::init(&cfg.decoder_config(), &mut rng_stream(seed, mix(&[0xDEC])))?,
            siglip: SigLipState::init(),
        })
    }

    fn save(&self, path: &Path, kind: &str, metadata: serde_json::Value, opt: Option<&AdamW<f32>>) -> Result<()> {
        let mut c = Container::new(kind);
        c.metadata = metadata;
        for (n, t) in &self.encoder.tensors {
            c.tensors.push((format!("enc.{n}"), t.clone()));
        }
        for (n, t) in &self.decoder.tensors {
            c.tensors.push((format!("dec.{n}"), t.clone()));
        }
        c.tensors.push(("siglip.t".into(), self.siglip.t.clone()));
        c.tensors.push(("siglip.b".into(), self.siglip.b.clone()));
        if let Some(opt) = opt {
            let (step, moments) = opt.export_state();
            c.metadata["opt_step"] = serde_json::json!(step);
            for (i, (m, v)) in moments.into_iter().enumerate() {
                let len = m.len();
                c.tensors.push((format!("opt.m{i}"), Tensor::from_vec(m, &[len]).map_err(crate::Error::from)?));
                c.tensors.push((format!("opt.v{i}"), Tensor::from_vec(v, &[len]).map_err(crate::Error::from)?));
            }
        }
        c.write(path)
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<(Self, serde_json::Value, Option<(u64, Vec<(Vec<f32>, Vec<f32>)>)>)> {
        let c = Container::read(path)?;
        let mut model = FrameworkModel::init(cfg, 0)?;
        for (n, t) in model.encoder.tensors.iter_mut() {
            let loaded = c
                .tensor(&format!("enc.{n}"))
                .ok_or_else(|| Error::Format(format!("{}: missing enc.{n}", path.display())))?;
            *t = loaded.reshape(t.shape()).map_err(crate::Error::from)?;
        }
        for (n, t) in model.decoder.tensors.iter_mut() {
            let loaded = c
                .tensor(&format!("dec.{n}"))
                .ok_or_else(|| Error::Format(format!("{}: missing dec.{n}", path.display())))?;
            *t = loaded.reshape(t.shape()).map_err(crate::Error::from)?;
        }
        model.siglip.t = c.tensor("siglip.t").cloned().unwrap_or_else(|| Tensor::scalar(10.0)).reshape(&[1, 1])?;
        model.siglip.b = c.tensor("siglip.b").cloned().unwrap_or_else(|| Tensor::scalar(-10.0)).reshape(&[1, 1])?;
        let opt_state = c.metadata.get("opt_step").and_then(|v| v.as_u64()).map(|step| {
            let mut moments = Vec::new();
            let mut i = 0;
            while let (Some(m), Some(v)) = (c.tensor(&format!("opt.m{i}")), c.tensor(&format!("opt.v{i}"))) {
                moments.push((m.data().to_vec(), v.data().to_vec()));
                i += 1;
            }
            (step, moments)
        });
        Ok((model, c.metadata.clone(), opt_state))
    }
}

/// Decoder-rendered colors for a set of rays of one NeRF, plus the targets
/// rendered from the NeRF itself over the same sample points.
struct NerfRenderPlan {
    hit_rows: Vec<usize>,
    points: Vec<[f64; 3]>,
    deltas: Vec<f64>,
    targets: Vec<[f32; 3]>,
    fg: Vec<bool>,
    /// Miss rays predict background exactly and cost nothing.
    n_rays: usize,
}

fn plan_nerf_rays(
    data: &TrainData,
    nerf: &CachedNerf,
    rays_per_nerf: usize,
    samples: usize,
    rng: &mut impl Rng,
    fixed_jitter_seed: u64,
) -> Result<NerfRenderPlan> {
    let scene = &data.dataset.manifest.scenes[nerf.scene_idx];
    let rig = scene.spec.camera_rig();
    let view = rng.random_range(0..rig.len());
    let img = &data.gt_views[nerf.scene_idx][view];
    let batch = sample_rays(img, &rig[view], rays_per_nerf.min(img.rgb.len()), rng)?;
    // fixed per-(scene, view) jitter keeps target renders and decoder
    // renders on identical sample points
    let mut jitter = rng_stream(fixed_jitter_seed, mix(&[nerf.scene_idx as u64, view as u64]));
    let mut plan = NerfRenderPlan {
        hit_rows: Vec::new(),
        points: Vec::new(),
        deltas: Vec::new(),
        targets: Vec::new(),
        fg: batch.fg.clone(),
        n_rays: batch.len(),
    };
    for i in 0..batch.len() {
        let (o, d) = (batch.origins[i], batch.dirs[i]);
        if let Some((t0, t1)) = ray_sphere_span(o, d, SCENE_RADIUS) {
            let (ts, dl) = stratified_ts(t0, t1, samples, &mut jitter);
            plan.hit_rows.push(i);
            for &t in &ts {
                plan.points.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
            }
            plan.deltas.extend_from_slice(&dl);
        }
    }
    // target colors: volume-render the input NeRF itself along the same rays
    if !plan.hit_rows.is_empty() {
        let mut g = Graph::<f32>::new();
        let vars = crate::fields::register_field(&mut g, &nerf.ckpt, false);
        let (color, sigma) = crate::fields::field_forward(&mut g, &vars, &nerf.ckpt.arch, &plan.points)?;
        let rows = plan.hit_rows.len();
        let sig = g.reshape(sigma, &[rows, samples])?;
        let dl = Tensor::from_vec(plan.deltas.iter().map(|&d| d as f32).collect(), &[rows, samples])?;
        let pred = composite_rays(&mut g, sig, color, &dl, BG_COLOR)?;
        let pd = g.value(pred).data();
        plan.targets = (0..rows).map(|r| [pd[r * 3], pd[r * 3 + 1], pd[r * 3 + 2]]).collect();
    }
    Ok(plan)
}

/// Per-step losses as plain numbers.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLosses {
    pub total: f64,
    pub render: f64,
    pub contrastive: f64,
}

pub struct TrainOutcome {
    pub model: FrameworkModel,
    pub log_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub final_losses: StepLosses,
    pub steps_run: usize,
}

struct StepResult {
    losses: StepLosses,
    grads: Vec<Tensor<f32>>,
    t_value: f64,
    b_value: f64,
}

/// One optimization step over a pair batch; pure function of
/// (model, batch, rng seeds), returning gradients in `param_names` order.
fn framework_step(
    data: &TrainData,
    model: &FrameworkModel,
    cfg: &TrainConfig,
    batch: &[PairedScene],
    step_seed: u64,
    jitter_seed: u64,
) -> Result<StepResult> {
    let mut g = Graph::<f32>::new();
    let enc_vars = register_gmn(&mut g, &model.encoder, true);
    let dec_vars = register_decoder(&mut g, &model.decoder, cfg.mode.uses_rendering());
    let t_var = g.leaf(model.siglip.t.clone(), cfg.mode.uses_contrastive());
    let b_var = g.leaf(model.siglip.b.clone(), cfg.mode.uses_contrastive());

    // encode all 2|B| checkpoints
    let mut embs_a = Vec::with_capacity(batch.len());
    let mut embs_b = Vec::with_capacity(batch.len());
    for pair in batch {
        let na = data.nerf(pair.scene_idx, &pair.family_a);
        let nb = data.nerf(pair.scene_idx, &pair.family_b);
        embs_a.push(encode(&mut g, &enc_vars, &cfg.encoder, &na.graph)?);
        embs_b.push(encode(&mut g, &enc_vars, &cfg.encoder, &nb.graph)?);
    }

    let mut render_term: Option<Var> = None;
    if cfg.mode.uses_rendering() {
        // batch all rays of all 2|B| NeRFs through one decoder pass
        let all_embs: Vec<Var> = embs_a.iter().chain(&embs_b).copied().collect();
        let emb_matrix = g.concat_rows(&all_embs)?;
        let nerfs: Vec<&CachedNerf> = batch
            .iter()
            .map(|p| data.nerf(p.scene_idx, &p.family_a))
            .chain(batch.iter().map(|p| data.nerf(p.scene_idx, &p.family_b)))
            .collect();
        let mut plans = Vec::with_capacity(nerfs.len());
        for (k, nerf) in nerfs.iter().enumerate() {
            let mut rng = rng_stream(step_seed, mix(&[0x4A75, k as u64]));
            plans.push(plan_nerf_rays(data, nerf, cfg.rays_per_nerf, cfg.samples_per_ray, &mut rng, jitter_seed)?);
        }
        let mut points = Vec::new();
        let mut point_to_emb = Vec::new();
        for (k, plan) in plans.iter().enumerate() {
            points.extend_from_slice(&plan.points);
            point_to_emb.extend(std::iter::repeat(k as u32).take(plan.points.len()));
        }
        if !points.is_empty() {
            let (color, sigma) = decode_batch(
                &mut g,
                &dec_vars,
                &cfg.decoder_config(),
                &points,
                emb_matrix,
                Arc::new(point_to_emb),
            )?;
            // composite and score per NeRF
            let mut row_off = 0usize;
            for plan in &plans {
                let rows = plan.hit_rows.len();
                if rows == 0 {
                    continue;
                }
                let sig_rows = g.slice_rows(sigma, row_off * cfg.samples_per_ray, rows * cfg.samples_per_ray)?;
                let col_rows = g.slice_rows(color, row_off * cfg.samples_per_ray, rows * cfg.samples_per_ray)?;
                let sig = g.reshape(sig_rows, &[rows, cfg.samples_per_ray])?;
                let dl = Tensor::from_vec(
                    plan.deltas.iter().map(|&d| d as f32).collect(),
                    &[rows, cfg.samples_per_ray],
                )?;
                let pred = composite_rays(&mut g, sig, col_rows, &dl, BG_COLOR)?;
                // miss rays match the background target exactly: they
                // only enlarge the partition counts
                let split = LossSplit {
                    gt: &plan.targets_padded(),
                    fg: &plan.fg,
                    hit_rows: &plan.hit_rows,
                    miss_fg_sum: 0.0,
                    miss_bg_sum: 0.0,
                };
                let term = render_loss(&mut g, pred, &split, cfg.w_fg, cfg.w_bg)?;
                render_term = Some(match render_term {
                    None => term,
                    Some(prev) => g.add(prev, term)?,
                });
                row_off += rows;
            }
        }
        if let Some(t) = render_term {
            render_term = Some(g.affine(t, 1.0 / (2.0 * batch.len() as f64), 0.0));
        }
    }

    let mut contrastive_term: Option<Var> = None;
    if cfg.mode.uses_contrastive() {
        let u_rows = g.concat_rows(&embs_a)?;
        let v_rows = g.concat_rows(&embs_b)?;
        let u = l2_normalize_rows(&mut g, u_rows)?;
        let v = l2_normalize_rows(&mut g, v_rows)?;
        contrastive_term = Some(siglip_loss(&mut g, u, v, t_var, b_var)?);
    }

    let loss = match (render_term, contrastive_term) {
        (Some(r), Some(c)) => {
            let scaled = g.affine(c, cfg.lambda, 0.0);
            g.add(r, scaled)?
        }
        (Some(r), None) => r,
        (None, Some(c)) => c,
        (None, None) => return Err(Error::Invalid("no loss term produced".into())),
    };
    let losses = StepLosses {
        total: Real::to_f64(g.scalar_value(loss)),
        render: render_term.map(|v| Real::to_f64(g.scalar_value(v))).unwrap_or(0.0),
        contrastive: contrastive_term.map(|v| Real::to_f64(g.scalar_value(v))).unwrap_or(0.0),
    };
    let mut grads = g.backward(loss)?;
    let mut grad_list = Vec::new();
    for (n, t) in &model.encoder.tensors {
        let v = enc_vars.var(n);
        grad_list.push(grads.take(v).map(|x| x.reshape(t.shape()).unwrap()).unwrap_or_else(|| Tensor::zeros(t.shape())));
    }
    if cfg.mode.uses_rendering() {
        for (n, t) in &model.decoder.tensors {
            let v = dec_vars.var(n);
            grad_list.push(grads.take(v).map(|x| x.reshape(t.shape()).unwrap()).unwrap_or_else(|| Tensor::zeros(t.shape())));
        }
    }
    if cfg.mode.uses_contrastive() {
        grad_list.push(grads.take(t_var).unwrap_or_else(|| Tensor::zeros(&[1, 1])));
        grad_list.push(grads.take(b_var).unwrap_or_else(|| Tensor::zeros(&[1, 1])));
    }
    Ok(StepResult {
        losses,
        grads: grad_list,
        t_value: Real::to_f64(model.siglip.t.data()[0]),
        b_value: Real::to_f64(model.siglip.b.data()[0]),
    })
}

impl NerfRenderPlan {
    /// Targets aligned to full-batch ray indices (misses map to background
    /// and are never read through `hit_rows`).
    fn targets_padded(&self) -> Vec<[f32; 3]> {
        let mut out = vec![[BG_COLOR[0] as f32, BG_COLOR[1] as f32, BG_COLOR[2] as f32]; self.n_rays];
        for (r, &row) in self.hit_rows.iter().enumerate() {
            out[row] = self.targets[r];
        }
        out
    }
}

fn apply_grads(
    model: &mut FrameworkModel,
    cfg: &TrainConfig,
    opt: &mut AdamW<f32>,
    grads: &[Tensor<f32>],
    lr: f64,
) -> Result<()> {
    let mut params: Vec<&mut Tensor<f32>> = Vec::new();
    for (_, t) in model.encoder.tensors.iter_mut() {
        params.push(t);
    }
    if cfg.mode.uses_rendering() {
        for (_, t) in model.decoder.tensors.iter_mut() {
            params.push(t);
        }
    }
    if cfg.mode.uses_contrastive() {
        params.push(&mut model.siglip.t);
        params.push(&mut model.siglip.b);
    }
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    opt.step(&mut params, &grad_refs, lr)?;
    Ok(())
}

/// Deterministic validation loss over the val split (one pass, fixed rng).
fn validation_loss(data: &TrainData, model: &FrameworkModel, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let val = data.dataset.split_scene_indices("val");
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = rng_stream(seed, mix(&[0x7A1]));
    let batches = sample_pairs(&val, &data.families, cfg.batch_size, &mut rng)?;
    let mut total = 0.0;
    let mut count = 0;
    for (bi, batch) in batches.iter().enumerate() {
        let res = framework_step(data, model, cfg, batch, mix(&[seed, 0x7A1, bi as u64]), seed)?;
        total += res.losses.total;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// Train the encoder/decoder framework. Writes a JSONL log, a best-val
/// checkpoint and a resumable last checkpoint under `out_dir`.
pub fn train_framework(
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: &Path,
    seed: u64,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode.uses_contrastive() && data.families.len() < 2 {
        return Err(Error::Config(
            "contrastive modes require a multi-architecture dataset: no positive pairs exist with a single family"
                .into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let log_path = out_dir.join("log.jsonl");
    let best_path = out_dir.join("best.ngc");
    let last_path = out_dir.join("last.ngc");

    let train_scenes = data.dataset.split_scene_indices("train");
    if train_scenes.is_empty() {
        return Err(Error::Invalid("no training scenes in dataset".into()));
    }
    let steps_per_epoch = train_scenes.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut model;
    let mut opt = AdamW::<f32>::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let mut start_step = 0usize;
    let mut best_val = f64::INFINITY;
    if resume && last_path.exists() {
        let (m, meta, opt_state) = FrameworkModel::load(&last_path, cfg)?;
        model = m;
        if let Some((step, moments)) = opt_state {
            opt.import_state(step, moments);
            start_step = step as usize;
        }
        best_val = meta.get("best_val").and_then(|v| v.as_f64()).unwrap_or(f64::INFINITY);
    } else {
        model = FrameworkModel::init(cfg, seed)?;
    }

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(Error::io(&log_path))?;

    let mut last_losses = StepLosses { total: f64::NAN, render: f64::NAN, contrastive: f64::NAN };
    let started = std::time::Instant::now();
    let mut step = start_step;
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = rng_stream(seed, mix(&[0xE60C4, epoch as u64]));
        let batches = sample_pairs(&train_scenes, &data.families, cfg.batch_size, &mut rng)?;
        for (bi, batch) in batches.iter().enumerate() {
            let global = epoch * steps_per_epoch + bi;
            if global < start_step {
                continue;
            }
            let step_seed = mix(&[seed, 0x57E6, global as u64]);
            let res = framework_step(data, &model, cfg, batch, step_seed, seed)?;
            if !res.losses.total.is_finite() {
                model.save(
                    &last_path,
                    "TRAIN",
                    serde_json::json!({"step": step, "aborted": true, "best_val": best_val}),
                    Some(&opt),
                )?;
                return Err(Error::TrainAborted { step: global, last_good: last_path });
            }
            let lr = onecycle_lr(global, total_steps, cfg.max_lr)?;
            apply_grads(&mut model, cfg, &mut opt, &res.grads, lr)?;
            last_losses = res.losses;
            step = global + 1;
            let line = serde_json::json!({
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "loss": res.losses.total,
                "loss_r": res.losses.render,
                "loss_c": res.losses.contrastive,
                "t": res.t_value,
                "b": res.b_value,
                "wall_ms": started.elapsed().as_millis() as u64,
            });
            writeln!(log, "{line}").map_err(Error::io(&log_path))?;
        }
        let at_val_epoch = cfg.val_every_epochs > 0
            && ((epoch + 1) % cfg.val_every_epochs == 0 || epoch + 1 == cfg.epochs);
        if at_val_epoch {
            let vl = validation_loss(data, &model, cfg, seed)?;
            let line = serde_json::json!({"step": step, "epoch": epoch, "val_loss": vl});
            writeln!(log, "{line}").map_err(Error::io(&log_path))?;
            if vl.is_finite() && vl < best_val {
                best_val = vl;
                model.save(&best_path, "GMN", serde_json::json!({"step": step, "val_loss": vl}), None)?;
            }
        }
        if step >= total_steps {
            break 'epochs;
        }
    }
    model.save(
        &last_path,
        "TRAIN",
        serde_json::json!({"step": step, "best_val": best_val}),
        Some(&opt),
    )?;
    if !best_path.exists() {
        model.save(&best_path, "GMN", serde_json::json!({"step": step}), None)?;
    }
    Ok(TrainOutcome { model, log_path, best_path, last_path, final_losses: last_losses, steps_run: step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(data: Vec<f64>, rows: usize, dim: usize) -> Tensor<f64> {
        let mut d = data;
        for r in 0..rows {
            let norm: f64 = d[r * dim..(r + 1) * dim].iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut d[r * dim..(r + 1) * dim] {
                *x /= norm;
            }
        }
        Tensor::from_vec(d, &[rows, dim]).unwrap()
    }

    fn siglip_value(u: Tensor<f64>, v: Tensor<f64>, t: f64, b: f64) -> f64 {
        let mut g = Graph::new();
        let uv = g.leaf(u, false);
        let vv = g.leaf(v, false);
        let tv = g.leaf(Tensor::scalar(t), false);
        let bv = g.leaf(Tensor::scalar(b), false);
        let loss = siglip_loss(&mut g, uv, vv, tv, bv).unwrap();
        g.scalar_value(loss)
    }

    #[test]
    fn test_siglip_matched_unit_pair_is_ln2() {
        // |B|=1, u.v=1, t=10, b=-10: -ln sigmoid(0) = ln 2
        let u = unit_rows(vec![0.6, 0.8], 1, 2);
        let l = siglip_value(u.clone(), u.clone(), 10.0, -10.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9, "{l}");
    }

    #[test]
    fn test_siglip_saturated_positive_approaches_zero() {
        let u = unit_rows(vec![1.0, 0.0], 1, 2);
        let l = siglip_value(u.clone(), u.clone(), 200.0, 0.0);
        assert!(l < 1e-9, "{l}");
    }

    #[test]
    fn test_siglip_orthonormal_two_batch_hand_value() {
        // |B|=2 with u_j . v_k = delta_jk at (t=10, b=-10):
        // diagonal: 2 * ln(1 + e^0); off-diagonal: 2 * ln(1 + e^-10); / 2
        let u = unit_rows(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let l = siglip_value(u.clone(), u.clone(), 10.0, -10.0);
        let expect = (2.0 * (1.0f64 + 1.0).ln() + 2.0 * (1.0 + (-10.0f64).exp()).ln()) / 2.0;
        assert!((l - expect).abs() < 1e-9, "{l} vs {expect}");
        assert!((expect - 0.69319258).abs() < 1e-8);
    }

    #[test]
    fn test_siglip_rejects_unnormalized_rows() {
        let u = Tensor::from_vec(vec![2.0, 0.0], &[1, 2]).unwrap();
        let mut g = Graph::new();
        let uv = g.leaf(u.clone(), false);
        let tv = g.leaf(Tensor::scalar(10.0), false);
        let bv = g.leaf(Tensor::scalar(-10.0), false);
        assert!(siglip_loss(&mut g, uv, uv, tv, bv).is_err());
    }

    #[test]
    fn test_siglip_symmetric_under_joint_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let dim = 6;
        let rows = 4;
        let data: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data2: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = unit_rows(data, rows, dim);
        let v = unit_rows(data2, rows, dim);
        let base = siglip_value(u.clone(), v.clone(), 7.0, -3.0);
        // permute both row sets identically
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor<f64>| {
            let mut d = vec![0.0; rows * dim];
            for (new, &old) in perm.iter().enumerate() {
                d[new * dim..(new + 1) * dim].copy_from_slice(&t.data()[old * dim..(old + 1) * dim]);
            }
            Tensor::from_vec(d, &[rows, dim]).unwrap()
        };
        let p = siglip_value(permute(&u), permute(&v), 7.0, -3.0);
        assert!((base - p).abs() < 1e-12);
    }

    #[test]
    fn test_siglip_gradients_match_finite_differences_incl_t_b() {
        use adkernel::fdcheck;
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            use rand::Rng;
            let (rows, dim) = (3usize, 4usize);
            // parameters: raw u rows ++ raw v rows ++ [t, b]; normalization
            // happens inside the loss path so gradients flow through it
            let n = 2 * rows * dim + 2;
            let mut params: Vec<f64> = (0..n - 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            params.push(rng.random_range(2.0..12.0));
            params.push(rng.random_range(-11.0..-1.0));
            let eval = |p: &[f64]| {
                let mut g = Graph::new();
                let u = g.leaf(Tensor::from_vec(p[..rows * dim].to_vec(), &[rows, dim]).unwrap(), true);
                let v = g.leaf(Tensor::from_vec(p[rows * dim..2 * rows * dim].to_vec(), &[rows, dim]).unwrap(), true);
                let t = g.leaf(Tensor::scalar(p[n - 2]), true);
                let b = g.leaf(Tensor::scalar(p[n - 1]), true);
                let un = l2_normalize_rows(&mut g, u).unwrap();
                let vn = l2_normalize_rows(&mut g, v).unwrap();
                let loss = siglip_loss(&mut g, un, vn, t, b).unwrap();
                (g, u, v, t, b, loss)
            };
            let (mut g, u, v, t, b, loss) = eval(&params);
            let mut grads = g.backward(loss).unwrap();
            let mut analytic = Vec::new();
            analytic.extend(grads.take(u).unwrap().data());
            analytic.extend(grads.take(v).unwrap().data());
            analytic.extend(grads.take(t).unwrap().data());
            analytic.extend(grads.take(b).unwrap().data());
            let f = |p: &[f64]| {
                let (g, _, _, _, _, loss) = eval(p);
                g.scalar_value(loss)
            };
            let coords = fdcheck::spread_coords(n, 10);
            fdcheck::assert_grads_match(f, &params, &analytic, &coords, 1e-5, 1e-6, 1e-9);
        }
    }

    #[test]
    fn test_sample_pairs_constraints() {
        let fams = vec!["MLP".to_string(), "TRI".to_string(), "HASH".to_string()];
        let scenes: Vec<usize> = (0..13).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = sample_pairs(&scenes, &fams, 4, &mut rng).unwrap();
        // every scene appears exactly once per epoch
        let mut seen: Vec<usize> = batches.iter().flatten().map(|p| p.scene_idx).collect();
        seen.sort_unstable();
        assert_eq!(seen, scenes);
        for batch in &batches {
            let mut ids: Vec<usize> = batch.iter().map(|p| p.scene_idx).collect();
            ids.dedup();
            assert_eq!(ids.len(), batch.len());
            for p in batch {
                assert_ne!(p.family_a, p.family_b);
            }
        }
        // single-family dataset refuses pair sampling
        assert!(sample_pairs(&scenes, &fams[..1].to_vec(), 4, &mut rng).is_err());
    }
}
