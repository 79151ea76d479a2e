//! Dataset production: per-scene NeRF fitting for every architecture
//! family, scene-level splits, and the on-disk manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adkernel::{onecycle_lr, AdamW, AdamWConfig, Graph, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::fields::{field_forward, register_field, ArchDescriptor, CheckpointMeta, Family, NerfCheckpoint};
use crate::renderer::{
    composite_rays, ray_sphere_span, render_loss, sample_rays, smooth_l1_rgb, stratified_ts, CameraPose, Image,
    LossSplit, SCENE_RADIUS,
};
use crate::scenes::{render_gt, SceneSpec, BG_COLOR};
use crate::{mix, rng_stream, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub rays_per_step: usize,
    pub samples_per_ray: usize,
    /// One-cycle peak learning rates per family.
    pub max_lr_mlp: f64,
    pub max_lr_tri: f64,
    pub max_lr_hash: f64,
    pub weight_decay: f64,
    pub w_fg: f64,
    pub w_bg: f64,
    /// Held-out-view PSNR a fit must reach; one retry, then the scene is
    /// dropped.
    pub psnr_gate_db: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 1600,
            rays_per_step: 288,
            samples_per_ray: 32,
            max_lr_mlp: 1e-2,
            max_lr_tri: 1e-2,
            max_lr_hash: 1e-2,
            weight_decay: 1e-6,
            w_fg: 0.8,
            w_bg: 0.2,
            psnr_gate_db: 22.0,
        }
    }
}

impl FitConfig {
    fn max_lr(&self, family: Family) -> f64 {
        match family {
            Family::Mlp => self.max_lr_mlp,
            Family::Tri => self.max_lr_tri,
            Family::Hash => self.max_lr_hash,
        }
    }
}

/// Rays of one batch split into scene-sphere hits (to be integrated) and
/// misses (exact background).
struct RaySplit {
    hit_rows: Vec<usize>,
    points: Vec<[f64; 3]>,
    deltas: Vec<f64>,
    miss_fg_sum: f64,
    miss_bg_sum: f64,
}

fn split_rays(
    batch: &crate::renderer::RayBatch,
    samples: usize,
    rng: &mut impl rand::Rng,
) -> RaySplit {
    let mut s = RaySplit {
        hit_rows: Vec::new(),
        points: Vec::new(),
        deltas: Vec::new(),
        miss_fg_sum: 0.0,
        miss_bg_sum: 0.0,
    };
    for i in 0..batch.len() {
        let (o, d) = (batch.origins[i], batch.dirs[i]);
        match ray_sphere_span(o, d, SCENE_RADIUS) {
            Some((t0, t1)) => {
                let (ts, deltas) = stratified_ts(t0, t1, samples, rng);
                s.hit_rows.push(i);
                for &t in &ts {
                    s.points.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
                }
                s.deltas.extend_from_slice(&deltas);
            }
            None => {
                let gt = [batch.gt_rgb[i][0] as f64, batch.gt_rgb[i][1] as f64, batch.gt_rgb[i][2] as f64];
                let sl1 = smooth_l1_rgb(BG_COLOR, gt);
                if batch.fg[i] {
                    s.miss_fg_sum += sl1;
                } else {
                    s.miss_bg_sum += sl1;
                }
            }
        }
    }
    s
}

fn fit_once<T: Real>(
    scene: &SceneSpec,
    gt_views: &[Image],
    arch: &ArchDescriptor,
    family_key: &str,
    cfg: &FitConfig,
    seed: u64,
) -> Result<NerfCheckpoint<T>> {
    let rig = scene.camera_rig();
    let holdout = rig.len() - 1;
    let meta = CheckpointMeta {
        scene_id: scene.id.clone(),
        class_label: scene.class_label.clone(),
        family: family_key.to_string(),
        train_loss: f64::NAN,
        psnr_db: f64::NAN,
    };
    let mut ckpt = NerfCheckpoint::<T>::init(arch, meta, &mut rng_stream(seed, mix(&[0xF17])))?;
    let mut opt = AdamW::<T>::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let max_lr = cfg.max_lr(arch.family);
    let mut last_loss = f64::NAN;

    for step in 0..cfg.steps {
        let mut rng = rng_stream(seed, mix(&[0x57E9, step as u64]));
        let view = rand::Rng::random_range(&mut rng, 0..holdout);
        let img = &gt_views[view];
        let batch = sample_rays(img, &rig[view], cfg.rays_per_step.min(img.rgb.len()), &mut rng)?;
        let split = split_rays(&batch, cfg.samples_per_ray, &mut rng);
        if split.hit_rows.is_empty() {
            continue;
        }
        let rays = split.hit_rows.len();
        let mut g = Graph::<T>::new();
        let vars = register_field(&mut g, &ckpt, true);
        let (color, sigma) = field_forward(&mut g, &vars, arch, &split.points)?;
        let sigma_rows = g.reshape(sigma, &[rays, cfg.samples_per_ray])?;
        let deltas = Tensor::from_vec(split.deltas.iter().map(|&d| T::from_f64(d)).collect(), &[rays, cfg.samples_per_ray])?;
        let pred = composite_rays(&mut g, sigma_rows, color, &deltas, BG_COLOR)?;
        let loss_split = LossSplit {
            gt: &batch.gt_rgb,
            fg: &batch.fg,
            hit_rows: &split.hit_rows,
            miss_fg_sum: split.miss_fg_sum,
            miss_bg_sum: split.miss_bg_sum,
        };
        let loss = render_loss(&mut g, pred, &loss_split, cfg.w_fg, cfg.w_bg)?;
        last_loss = Real::to_f64(g.scalar_value(loss));
        if !last_loss.is_finite() {
            return Err(Error::Invalid(format!(
                "fit {}/{family_key}: non-finite loss at step {step}",
                scene.id
            )));
        }
        let mut grads = g.backward(loss)?;
        let grad_tensors: Vec<Tensor<T>> = ckpt
            .tensors
            .iter()
            .zip(&vars.vars)
            .map(|((_, t), (_, v))| {
                grads
                    .take(*v)
                    .map(|gt| gt.reshape(t.shape()).expect("grad shape"))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        drop(g);
        let lr = onecycle_lr(step, cfg.steps, max_lr)?;
        let mut params: Vec<&mut Tensor<T>> = ckpt.tensors.iter_mut().map(|(_, t)| t).collect();
        let grad_refs: Vec<&Tensor<T>> = grad_tensors.iter().collect();
        opt.step(&mut params, &grad_refs, lr)?;
    }

    let pred = render_nerf_image(&ckpt, &rig[holdout], cfg.samples_per_ray, mix(&[seed, 0x9A9A]))?;
    let psnr = psnr_db(&pred, &gt_views[holdout]);
    ckpt.meta.train_loss = last_loss;
    ckpt.meta.psnr_db = psnr;
    Ok(ckpt)
}

/// Fit one NeRF to a scene; retries once with a fresh seed if the
/// held-out-view quality gate fails.
pub fn fit_nerf<T: Real>(
    scene: &SceneSpec,
    gt_views: &[Image],
    arch: &ArchDescriptor,
    family_key: &str,
    cfg: &FitConfig,
    seed: u64,
) -> Result<NerfCheckpoint<T>> {
    let first = fit_once::<T>(scene, gt_views, arch, family_key, cfg, seed)?;
    if first.meta.psnr_db >= cfg.psnr_gate_db {
        return Ok(first);
    }
    let retry = fit_once::<T>(scene, gt_views, arch, family_key, cfg, mix(&[seed, 0xDEAD]))?;
    if retry.meta.psnr_db >= cfg.psnr_gate_db {
        return Ok(retry);
    }
    Err(Error::QualityGate {
        scene: scene.id.clone(),
        family: family_key.to_string(),
        psnr: retry.meta.psnr_db.max(first.meta.psnr_db),
        gate: cfg.psnr_gate_db,
    })
}

/// Deterministic full-frame render of a fitted field.
pub fn render_nerf_image<T: Real>(
    ckpt: &NerfCheckpoint<T>,
    pose: &CameraPose,
    samples: usize,
    jitter_seed: u64,
) -> Result<Image> {
    let mut img = Image::new(pose.width, pose.height);
    let n = pose.width * pose.height;
    const CHUNK: usize = 4096;
    let mut pix = 0;
    while pix < n {
        let count = CHUNK.min(n - pix);
        let mut rng = rng_stream(jitter_seed, mix(&[pix as u64]));
        let mut points = Vec::with_capacity(count * samples);
        let mut deltas = Vec::with_capacity(count * samples);
        let mut hit = Vec::with_capacity(count);
        for k in 0..count {
            let p = pix + k;
            let (o, d) = pose.ray(p % pose.width, p / pose.width);
            if let Some((t0, t1)) = ray_sphere_span(o, d, SCENE_RADIUS) {
                let (ts, dl) = stratified_ts(t0, t1, samples, &mut rng);
                hit.push(p);
                for &t in &ts {
                    points.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
                }
                deltas.extend_from_slice(&dl);
            } else {
                img.rgb[p] = [BG_COLOR[0] as f32, BG_COLOR[1] as f32, BG_COLOR[2] as f32];
            }
        }
        if !hit.is_empty() {
            let mut g = Graph::<T>::new();
            let vars = register_field(&mut g, ckpt, false);
            let (color, sigma) = field_forward(&mut g, &vars, &ckpt.arch, &points)?;
            let rows = hit.len();
            let sig = g.reshape(sigma, &[rows, samples])?;
            let dl = Tensor::from_vec(deltas.iter().map(|&d| T::from_f64(d)).collect(), &[rows, samples])?;
            let pred = composite_rays(&mut g, sig, color, &dl, BG_COLOR)?;
            let pd = g.value(pred).data();
            for (row, &p) in hit.iter().enumerate() {
                img.rgb[p] = [
                    Real::to_f64(pd[row * 3]) as f32,
                    Real::to_f64(pd[row * 3 + 1]) as f32,
                    Real::to_f64(pd[row * 3 + 2]) as f32,
                ];
            }
        }
        pix += count;
    }
    Ok(img)
}

pub fn psnr_db(pred: &Image, gt: &Image) -> f64 {
    let mut mse = 0.0f64;
    let n = (pred.rgb.len() * 3) as f64;
    for (a, b) in pred.rgb.iter().zip(&gt.rgb) {
        for d in 0..3 {
            let e = a[d] as f64 - b[d] as f64;
            mse += e * e;
        }
    }
    mse /= n;
    if mse <= 1e-12 {
        return 120.0;
    }
    -10.0 * mse.log10()
}

// ─── dataset ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestScene {
    pub id: String,
    pub class_label: String,
    pub split: String,
    pub spec: SceneSpec,
    /// Family key -> relative checkpoint path (includes variant families
    /// when generated).
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub classes: Vec<String>,
    pub families: Vec<String>,
    pub variant_families: Vec<String>,
    pub archs: BTreeMap<String, ArchDescriptor>,
    pub image_size: usize,
    pub views: usize,
    pub camera_distance: f64,
    pub scenes: Vec<ManifestScene>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Largest-remainder allocation of `n` into fractions.
fn largest_remainder(n: usize, fracs: &[f64]) -> Vec<usize> {
    let mut base: Vec<usize> = fracs.iter().map(|f| (n as f64 * f).floor() as usize).collect();
    let assigned: usize = base.iter().sum();
    let mut order: Vec<usize> = (0..fracs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = n as f64 * fracs[a] - base[a] as f64;
        let rb = n as f64 * fracs[b] - base[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..n - assigned {
        base[order[i % order.len()]] += 1;
    }
    base
}

/// Scene-level stratified split: per-class counts stay within 1 of exact
/// stratification and split totals match the largest-remainder targets.
pub fn assign_splits(class_of: &[usize], num_classes: usize, fracs: [f64; 3], seed: u64) -> Vec<usize> {
    let n = class_of.len();
    let totals = largest_remainder(n, &fracs);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in class_of.iter().enumerate() {
        per_class[c].push(i);
    }
    for (c, members) in per_class.iter_mut().enumerate() {
        use rand::seq::SliceRandom;
        members.shuffle(&mut rng_stream(seed, mix(&[0x5B117, c as u64])));
    }
    // per-(class, split) quotas: floor everywhere, then hand out one-unit
    // extras so each cell stays within 1 of exact stratification while the
    // split totals land on target; a swap pass untangles dead ends
    let mut floor_q = vec![[0usize; 3]; num_classes];
    let mut extra = vec![[false; 3]; num_classes];
    let mut rem = vec![0usize; num_classes];
    let mut need = totals.clone();
    for (c, members) in per_class.iter().enumerate() {
        for s in 0..3 {
            floor_q[c][s] = (members.len() as f64 * fracs[s]).floor() as usize;
            need[s] = need[s].saturating_sub(floor_q[c][s]);
        }
        rem[c] = members.len() - floor_q[c].iter().sum::<usize>();
    }
    for (c, members) in per_class.iter().enumerate() {
        while rem[c] > 0 {
            let mut best: Option<(usize, f64)> = None;
            for s in 0..3 {
                if need[s] == 0 || extra[c][s] {
                    continue;
                }
                let frac_rem = members.len() as f64 * fracs[s] - floor_q[c][s] as f64;
                if best.map(|(_, f)| frac_rem > f).unwrap_or(true) {
                    best = Some((s, frac_rem));
                }
            }
            match best {
                Some((s, _)) => {
                    extra[c][s] = true;
                    need[s] -= 1;
                    rem[c] -= 1;
                }
                None => break,
            }
        }
    }
    // repair: class c still owes a unit but every needy split already holds
    // its extra; relocate another class's extra to free a slot
    loop {
        let Some(c) = (0..num_classes).find(|&c| rem[c] > 0) else { break };
        let s = (0..3).find(|&s| need[s] > 0).expect("need matches remainder");
        let mut swapped = false;
        'swap: for c2 in 0..num_classes {
            if c2 == c || extra[c2][s] {
                continue;
            }
            for s2 in 0..3 {
                if extra[c2][s2] && !extra[c][s2] {
                    extra[c2][s2] = false;
                    extra[c2][s] = true;
                    extra[c][s2] = true;
                    rem[c] -= 1;
                    need[s] -= 1;
                    swapped = true;
                    break 'swap;
                }
            }
        }
        if !swapped {
            // no 1-swap available: accept a second unit in the needy split
            floor_q[c][s] += 1;
            rem[c] -= 1;
            need[s] -= 1;
        }
    }
    let mut quota = vec![[0usize; 3]; num_classes];
    for c in 0..num_classes {
        for s in 0..3 {
            quota[c][s] = floor_q[c][s] + extra[c][s] as usize;
        }
    }
    let mut out = vec![0usize; n];
    for (c, members) in per_class.iter().enumerate() {
        let mut cursor = 0;
        for s in 0..3 {
            for _ in 0..quota[c][s] {
                out[members[cursor]] = s;
                cursor += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BuildRequest {
    pub num_scenes: usize,
    pub classes: Vec<String>,
    pub views: usize,
    pub image_size: usize,
    pub camera_distance: f64,
    pub splits: [f64; 3],
    /// Family key -> descriptor for the training families.
    pub families: Vec<(String, ArchDescriptor)>,
    /// Additional unseen-architecture variants to fit.
    pub variants: Vec<(String, ArchDescriptor)>,
    pub fit: FitConfig,
    pub seed: u64,
    pub save_gt_pngs: bool,
}

pub struct BuildSummary {
    pub manifest: Manifest,
    pub fitted: usize,
    pub excluded_scenes: Vec<String>,
    pub mean_psnr: f64,
}

/// Generate scenes, fit one checkpoint per family (the ALL property), and
/// persist everything under `out_dir`.
pub fn build_dataset(out_dir: &Path, req: &BuildRequest) -> Result<BuildSummary> {
    if req.classes.len() < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if req.views < 8 {
        return Err(Error::Config("need at least 8 views".into()));
    }
    let frac_sum: f64 = req.splits.iter().sum();
    if (frac_sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("splits must sum to 1, got {frac_sum}")));
    }
    for (name, arch) in req.families.iter().chain(&req.variants) {
        arch.validate().map_err(|e| Error::Config(format!("family {name}: {e}")))?;
    }

    // scenes, stratified over classes
    let k = req.classes.len();
    let mut scenes = Vec::with_capacity(req.num_scenes);
    let mut class_of = Vec::with_capacity(req.num_scenes);
    for i in 0..req.num_scenes {
        let c = i % k;
        let spec = crate::scenes::generate_scene(
            &format!("scene_{i:04}"),
            &req.classes[c],
            req.views,
            req.image_size,
            req.camera_distance,
            &mut rng_stream(req.seed, mix(&[0x5CE4E, i as u64])),
        )?;
        scenes.push(spec);
        class_of.push(c);
    }
    let split_idx = assign_splits(&class_of, k, req.splits, req.seed);

    // ground-truth views per scene
    let gt: Vec<Vec<Image>> = adkernel::par::map_indexed(scenes.len(), |i| {
        let rig = scenes[i].camera_rig();
        rig.iter().map(|pose| render_gt(&scenes[i], pose)).collect()
    });

    if req.save_gt_pngs {
        for (scene, views) in scenes.iter().zip(&gt) {
            for (v, img) in views.iter().enumerate() {
                img.save_png(&out_dir.join("scenes").join(&scene.id).join(format!("view{v:02}.png")))?;
            }
        }
    }

    // fit every (scene, family) pair; unseen variants are inference-time
    // only and cover just the val/test scenes
    let all_families: Vec<(String, ArchDescriptor)> =
        req.families.iter().chain(&req.variants).cloned().collect();
    let n_base = req.families.len();
    let tasks: Vec<(usize, usize)> = (0..scenes.len())
        .flat_map(|s| (0..all_families.len()).map(move |f| (s, f)))
        .filter(|&(s, f)| f < n_base || split_idx[s] != 0)
        .collect();
    let results: Vec<Result<NerfCheckpoint<f32>>> = adkernel::par::map_indexed(tasks.len(), |t| {
        let (si, fi) = tasks[t];
        let (fname, arch) = &all_families[fi];
        fit_nerf::<f32>(
            &scenes[si],
            &gt[si],
            arch,
            fname,
            &req.fit,
            mix(&[req.seed, 0xF17BA5E, si as u64, fi as u64]),
        )
    });

    let mut excluded = std::collections::BTreeSet::new();
    for ((si, _), res) in tasks.iter().zip(&results) {
        if let Err(Error::QualityGate { scene, family, psnr, gate }) = res {
            eprintln!("excluding {scene}: {family} reached {psnr:.2} dB < {gate:.2} dB");
            excluded.insert(*si);
        } else if let Err(e) = res {
            return Err(Error::Invalid(format!("fit failed: {e}")));
        }
    }

    let mut manifest = Manifest {
        seed: req.seed,
        classes: req.classes.clone(),
        families: req.families.iter().map(|(n, _)| n.clone()).collect(),
        variant_families: req.variants.iter().map(|(n, _)| n.clone()).collect(),
        archs: all_families.iter().cloned().collect(),
        image_size: req.image_size,
        views: req.views,
        camera_distance: req.camera_distance,
        scenes: Vec::new(),
    };
    let mut fitted = 0;
    let mut psnr_sum = 0.0;
    for (si, scene) in scenes.iter().enumerate() {
        if excluded.contains(&si) {
            continue;
        }
        let mut entry = ManifestScene {
            id: scene.id.clone(),
            class_label: scene.class_label.clone(),
            split: SPLITS[split_idx[si]].to_string(),
            spec: scene.clone(),
            checkpoints: BTreeMap::new(),
        };
        for ((ti, _), res) in tasks.iter().zip(&results).filter(|((s, _), _)| *s == si) {
            let ckpt = res.as_ref().expect("checked above");
            let rel = format!("checkpoints/{}__{}.ngc", scene.id, ckpt.meta.family);
            ckpt.save(&out_dir.join(&rel))?;
            entry.checkpoints.insert(ckpt.meta.family.clone(), rel);
            fitted += 1;
            psnr_sum += ckpt.meta.psnr_db;
            let _ = ti;
        }
        manifest.scenes.push(entry);
    }
    save_manifest(out_dir, &manifest)?;
    Ok(BuildSummary {
        manifest,
        fitted,
        excluded_scenes: excluded.iter().map(|&i| scenes[i].id.clone()).collect(),
        mean_psnr: if fitted > 0 { psnr_sum / fitted as f64 } else { 0.0 },
    })
}

pub fn save_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, json).map_err(Error::io(path))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact {
        path: path.clone(),
        hint: "run `nerfgraph gen --config <cfg>` first".into(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// A manifest plus lazy checkpoint access rooted at its directory.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        Ok(Self { root: root.to_path_buf(), manifest: load_manifest(root)? })
    }

    pub fn checkpoint(&self, scene: &ManifestScene, family: &str) -> Result<NerfCheckpoint<f32>> {
        let rel = scene.checkpoints.get(family).ok_or_else(|| Error::MissingArtifact {
            path: self.root.join(format!("checkpoints/{}__{}.ngc", scene.id, family)),
            hint: format!("family {family} missing for scene {}; run `nerfgraph fit`", scene.id),
        })?;
        NerfCheckpoint::load(&self.root.join(rel))
    }

    pub fn split_scene_indices(&self, split: &str) -> Vec<usize> {
        self.manifest
            .scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| split == "all" || s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}
