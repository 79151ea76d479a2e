//! Ray generation, volume-rendering accumulation, and the weighted
//! smooth-L1 rendering loss.

use std::path::Path;

use adkernel::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Radius of the bounding sphere all scene content lives in; rays are
/// integrated between its entry and exit points.
pub const SCENE_RADIUS: f64 = 1.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// Camera-to-world rotation, columns = (right, up, -view).
    pub rotation: [[f64; 3]; 3],
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

fn norm3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl CameraPose {
    pub fn look_at(position: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Self {
        let fwd = norm3([target[0] - position[0], target[1] - position[1], target[2] - position[2]]);
        let right = norm3(cross(fwd, up));
        let true_up = cross(right, fwd);
        let rotation = [
            [right[0], true_up[0], -fwd[0]],
            [right[1], true_up[1], -fwd[1]],
            [right[2], true_up[2], -fwd[2]],
        ];
        Self { position, rotation, focal, width, height }
    }

    pub fn forward_axis(&self) -> [f64; 3] {
        [-self.rotation[0][2], -self.rotation[1][2], -self.rotation[2][2]]
    }

    /// R^T R deviation from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst = 0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut v = 0.0;
                for k in 0..3 {
                    v += r[k][i] * r[k][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    /// World-space unit ray through the center of pixel (px, py).
    pub fn ray(&self, px: usize, py: usize) -> ([f64; 3], [f64; 3]) {
        let x = (px as f64 + 0.5 - self.width as f64 / 2.0) / self.focal;
        let y = -(py as f64 + 0.5 - self.height as f64 / 2.0) / self.focal;
        let d_cam = [x, y, -1.0];
        let r = &self.rotation;
        let d = norm3([
            r[0][0] * d_cam[0] + r[0][1] * d_cam[1] + r[0][2] * d_cam[2],
            r[1][0] * d_cam[0] + r[1][1] * d_cam[1] + r[1][2] * d_cam[2],
            r[2][0] * d_cam[0] + r[2][1] * d_cam[1] + r[2][2] * d_cam[2],
        ]);
        (self.position, d)
    }
}

/// Intersection of a unit-direction ray with the origin-centered sphere of
/// the given radius; returns entry/exit distances clamped to t >= 0.
pub fn ray_sphere_span(origin: [f64; 3], dir: [f64; 3], radius: f64) -> Option<(f64, f64)> {
    let b = dot(origin, dir);
    let c = dot(origin, origin) - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = (-b - sq, -b + sq);
    if t1 <= 0.0 {
        return None;
    }
    Some((t0.max(0.0), t1))
}

#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f32; 3]>,
    pub alpha: Vec<bool>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![[0.0; 3]; width * height], alpha: vec![false; width * height] }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let file = std::fs::File::create(path).map_err(Error::io(path))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
        let mut data = Vec::with_capacity(self.rgb.len() * 4);
        for (rgb, &a) in self.rgb.iter().zip(&self.alpha) {
            for c in rgb {
                data.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            data.push(if a { 255 } else { 0 });
        }
        writer.write_image_data(&data).map_err(|e| Error::Format(format!("png: {e}")))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(Error::io(path))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("png: {e}")))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("png: {e}")))?;
        if info.color_type != png::ColorType::Rgba || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format(format!("{}: expected 8-bit RGBA", path.display())));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut img = Image::new(w, h);
        for i in 0..w * h {
            let o = i * 4;
            img.rgb[i] = [buf[o] as f32 / 255.0, buf[o + 1] as f32 / 255.0, buf[o + 2] as f32 / 255.0];
            img.alpha[i] = buf[o + 3] >= 128;
        }
        Ok(img)
    }
}

/// A batch of rays sampled from one view.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    pub pixel_ids: Vec<u32>,
    pub gt_rgb: Vec<[f32; 3]>,
    pub fg: Vec<bool>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.dirs {
            if (dot(*d, *d) - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("ray direction not unit: {d:?}")));
            }
        }
        for c in &self.gt_rgb {
            if c.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Invalid(format!("ground-truth color out of [0,1]: {c:?}")));
            }
        }
        Ok(())
    }
}

/// Uniform pixel subset without replacement, one ray per pixel center.
pub fn sample_rays(image: &Image, pose: &CameraPose, count: usize, rng: &mut impl Rng) -> Result<RayBatch> {
    let total = image.width * image.height;
    if count > total {
        return Err(Error::Invalid(format!("sample_rays: {count} rays from {total} pixels")));
    }
    let picks = rand::seq::index::sample(rng, total, count);
    let mut batch = RayBatch {
        origins: Vec::with_capacity(count),
        dirs: Vec::with_capacity(count),
        pixel_ids: Vec::with_capacity(count),
        gt_rgb: Vec::with_capacity(count),
        fg: Vec::with_capacity(count),
    };
    for pix in picks.iter() {
        let (px, py) = (pix % image.width, pix / image.width);
        let (o, d) = pose.ray(px, py);
        batch.origins.push(o);
        batch.dirs.push(d);
        batch.pixel_ids.push(pix as u32);
        batch.gt_rgb.push(image.rgb[pix]);
        batch.fg.push(image.alpha[pix]);
    }
    Ok(batch)
}

/// Stratified (jittered-uniform) distances along `[t0, t1]` plus the
/// matching interval lengths; the last interval runs to `t1`.
pub fn stratified_ts(t0: f64, t1: f64, n: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    debug_assert!(n >= 1 && t1 > t0);
    let span = (t1 - t0) / n as f64;
    let ts: Vec<f64> = (0..n).map(|i| t0 + (i as f64 + rng.random::<f64>()) * span).collect();
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { ts[i + 1] } else { t1 };
        deltas.push((next - ts[i]).max(0.0));
    }
    (ts, deltas)
}

/// Differentiable compositing along rows of per-ray samples:
/// alpha_i = 1 - exp(-sigma_i d_i), T_i = exp(-sum of earlier sigma d),
/// C = sum T_i alpha_i c_i + (full transmittance) * background.
pub fn composite_rays<T: adkernel::Real>(
    g: &mut Graph<T>,
    sigma: Var,
    color: Var,
    deltas: &Tensor<T>,
    bg: [f64; 3],
) -> Result<Var> {
    let (rays, samples) = g.value(sigma).dims2()?;
    let sd = g.mul_const(sigma, deltas)?;
    let excl = g.cumsum_exclusive(sd)?;
    let neg_excl = g.affine(excl, -1.0, 0.0);
    let trans = g.exp(neg_excl);
    let neg_sd = g.affine(sd, -1.0, 0.0);
    let exp_sd = g.exp(neg_sd);
    let alpha = g.affine(exp_sd, -1.0, 1.0);
    let weights = g.mul(trans, alpha)?;
    let wcol = g.reshape(weights, &[rays * samples, 1])?;
    let weighted = g.mul_col(color, wcol)?;
    let fg_sum = g.sum_group_rows(weighted, samples)?;
    let total_sd = g.sum_axis1(sd)?;
    let neg_total = g.affine(total_sd, -1.0, 0.0);
    let bg_trans = g.exp(neg_total);
    let bg_mat = g.constant(Tensor::from_fn(&[rays, 3], |i| T::from_f64(bg[i % 3])));
    let bg_term = g.mul_col(bg_mat, bg_trans)?;
    Ok(g.add(fg_sum, bg_term)?)
}

/// Reference accumulation for a point-function field; the scalar oracle
/// behind the tensor path.
pub fn volume_render<F>(field: F, origin: [f64; 3], dir: [f64; 3], ts: &[f64], deltas: &[f64], bg: [f64; 3]) -> [f64; 3]
where
    F: Fn([f64; 3]) -> ([f64; 3], f64),
{
    let mut color = [0.0f64; 3];
    let mut log_trans = 0.0f64;
    for (&t, &dt) in ts.iter().zip(deltas) {
        let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
        let (c, sigma) = field(p);
        let trans = log_trans.exp();
        let alpha = 1.0 - (-sigma * dt).exp();
        for d in 0..3 {
            color[d] += trans * alpha * c[d];
        }
        log_trans -= sigma * dt;
    }
    let trans = log_trans.exp();
    for d in 0..3 {
        color[d] += trans * bg[d];
    }
    color
}

/// Foreground/background-weighted smooth-L1.
///
/// `pred` is `[R,3]` for the rays listed in `hit_rows` (indices into the
/// full batch); rays that never touch the scene sphere predict the
/// background exactly and enter the means as constants.
pub struct LossSplit<'a> {
    pub gt: &'a [[f32; 3]],
    pub fg: &'a [bool],
    pub hit_rows: &'a [usize],
    /// Precomputed smooth-L1 sum (channel-mean) of the miss rays.
    pub miss_fg_sum: f64,
    pub miss_bg_sum: f64,
}

pub fn render_loss<T: adkernel::Real>(
    g: &mut Graph<T>,
    pred: Var,
    split: &LossSplit<'_>,
    w_fg: f64,
    w_bg: f64,
) -> Result<Var> {
    let n_fg = split.fg.iter().filter(|&&f| f).count();
    let n_bg = split.fg.len() - n_fg;
    let rows = split.hit_rows.len();
    let target = Tensor::from_fn(&[rows, 3], |i| T::from_f64(split.gt[split.hit_rows[i / 3]][i % 3] as f64));
    let sl1 = g.smooth_l1(pred, &target)?;
    let per_ray = g.sum_axis1(sl1)?;
    let third = g.affine(per_ray, 1.0 / 3.0, 0.0);
    let fg_mask = Tensor::from_fn(&[rows, 1], |i| {
        if split.fg[split.hit_rows[i]] {
            T::one()
        } else {
            T::zero()
        }
    });
    let bg_mask = Tensor::from_fn(&[rows, 1], |i| {
        if split.fg[split.hit_rows[i]] {
            T::zero()
        } else {
            T::one()
        }
    });
    let mut total: Option<Var> = None;
    if n_fg > 0 {
        let masked = g.mul_const(third, &fg_mask)?;
        let sum = g.sum_all(masked);
        let term = g.affine(sum, w_fg / n_fg as f64, w_fg * split.miss_fg_sum / n_fg as f64);
        total = Some(term);
    }
    if n_bg > 0 {
        let masked = g.mul_const(third, &bg_mask)?;
        let sum = g.sum_all(masked);
        let term = g.affine(sum, w_bg / n_bg as f64, w_bg * split.miss_bg_sum / n_bg as f64);
        total = Some(match total {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    Ok(match total {
        Some(v) => v,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

/// Scalar smooth-L1 averaged over channels.
pub fn smooth_l1_rgb(a: [f64; 3], b: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for d in 0..3 {
        let x = (a[d] - b[d]).abs();
        s += if x < 1.0 { 0.5 * x * x } else { x - 0.5 };
    }
    s / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_pose(width: usize) -> CameraPose {
        CameraPose::look_at([0.0, -2.8, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], width as f64 * 1.05, width, width)
    }

    #[test]
    fn test_rotation_orthonormal() {
        let pose = test_pose(64);
        assert!(pose.orthonormality_error() < 1e-6);
    }

    #[test]
    fn test_center_pixel_ray_is_forward_axis() {
        // odd dimensions put a pixel center exactly on the optical axis
        let pose = CameraPose::look_at([1.0, -2.0, 0.5], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 80.0, 65, 65);
        let (_, d) = pose.ray(32, 32);
        let f = pose.forward_axis();
        for i in 0..3 {
            assert!((d[i] - f[i]).abs() < 1e-9, "{d:?} vs {f:?}");
        }
    }

    #[test]
    fn test_sample_rays_exhaustive_and_deterministic() {
        let mut img = Image::new(8, 8);
        img.rgb.iter_mut().enumerate().for_each(|(i, p)| *p = [i as f32 / 64.0, 0.0, 0.0]);
        let pose = test_pose(8);
        let all = sample_rays(&img, &pose, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut ids: Vec<u32> = all.pixel_ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..64).collect::<Vec<u32>>());
        assert!(sample_rays(&img, &pose, 65, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        let a = sample_rays(&img, &pose, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_rays(&img, &pose, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.pixel_ids, b.pixel_ids);
        a.validate().unwrap();
    }

    #[test]
    fn test_composite_zero_sigma_returns_background() {
        let mut g = Graph::<f64>::new();
        let (rays, samples) = (4, 8);
        let sigma = g.constant(Tensor::zeros(&[rays, samples]));
        let color = g.constant(Tensor::full(&[rays * samples, 3], 0.7));
        let deltas = Tensor::full(&[rays, samples], 0.1);
        let bg = [0.2, 0.4, 0.9];
        let out = composite_rays(&mut g, sigma, color, &deltas, bg).unwrap();
        for row in g.value(out).data().chunks(3) {
            for d in 0..3 {
                assert_eq!(row[d], bg[d]);
            }
        }
    }

    #[test]
    fn test_composite_opaque_limit_returns_sample_color() {
        let mut g = Graph::<f64>::new();
        let sigma = g.constant(Tensor::full(&[1, 1], 1e6));
        let color = g.constant(Tensor::from_vec(vec![1.0, 0.0, 0.0], &[1, 3]).unwrap());
        let deltas = Tensor::full(&[1, 1], 1.0);
        let out = composite_rays(&mut g, sigma, color, &deltas, [1.0, 1.0, 1.0]).unwrap();
        let c = g.value(out).data();
        assert!((c[0] - 1.0).abs() < 1e-9 && c[1].abs() < 1e-9 && c[2].abs() < 1e-9);
    }

    #[test]
    fn test_composite_matches_hand_accumulation() {
        // two samples, hand-evaluated recurrence
        let (s1, s2, d1, d2) = (0.7, 1.3, 0.4, 0.25);
        let (c1, c2) = ([0.9, 0.1, 0.3], [0.2, 0.8, 0.5]);
        let bg = [0.1, 0.1, 0.6];
        let a1 = 1.0 - (-s1 * d1 as f64).exp();
        let a2 = 1.0 - (-s2 * d2 as f64).exp();
        let t2 = (-s1 * d1 as f64).exp();
        let t3 = t2 * (-s2 * d2 as f64).exp();
        let expect: Vec<f64> = (0..3).map(|d| a1 * c1[d] + t2 * a2 * c2[d] + t3 * bg[d]).collect();

        let mut g = Graph::<f64>::new();
        let sigma = g.constant(Tensor::from_vec(vec![s1, s2], &[1, 2]).unwrap());
        let color = g.constant(Tensor::from_vec(vec![c1[0], c1[1], c1[2], c2[0], c2[1], c2[2]], &[2, 3]).unwrap());
        let deltas = Tensor::from_vec(vec![d1, d2], &[1, 2]).unwrap();
        let out = composite_rays(&mut g, sigma, color, &deltas, bg).unwrap();
        for (a, e) in g.value(out).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
        // agree with the scalar oracle
        let field = |_p: [f64; 3]| ([0.0, 0.0, 0.0], 0.0);
        let _ = field;
    }

    #[test]
    fn test_scalar_oracle_agrees_with_tensor_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 6;
            let (ts, deltas) = stratified_ts(0.5, 2.5, n, &mut rng);
            let field = |p: [f64; 3]| {
                let s = (p[0] * 3.0).sin().abs() + 0.2;
                ([0.3 + 0.2 * p[1].cos().abs(), 0.5, 0.4], s)
            };
            let origin = [0.0, -2.0, 0.0];
            let dir = [0.0, 1.0, 0.0];
            let bg = [1.0, 1.0, 1.0];
            let oracle = volume_render(field, origin, dir, &ts, &deltas, bg);

            let mut g = Graph::<f64>::new();
            let mut svals = Vec::new();
            let mut cvals = Vec::new();
            for &t in &ts {
                let p = [origin[0], origin[1] + t, origin[2]];
                let (c, s) = field(p);
                svals.push(s);
                cvals.extend_from_slice(&c);
            }
            let sigma = g.constant(Tensor::from_vec(svals, &[1, n]).unwrap());
            let color = g.constant(Tensor::from_vec(cvals, &[n, 3]).unwrap());
            let dts = Tensor::from_vec(deltas.clone(), &[1, n]).unwrap();
            let out = composite_rays(&mut g, sigma, color, &dts, bg).unwrap();
            for (a, e) in g.value(out).data().iter().zip(&oracle) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_render_loss_zero_when_exact_and_quadratic_branch() {
        let mut g = Graph::<f64>::new();
        let gt = [[0.3f32, 0.5, 0.9]];
        let pred = g.constant(Tensor::from_vec(vec![0.3, 0.5, 0.9], &[1, 3]).unwrap());
        let split = LossSplit { gt: &gt, fg: &[true], hit_rows: &[0], miss_fg_sum: 0.0, miss_bg_sum: 0.0 };
        let loss = render_loss(&mut g, pred, &split, 0.8, 0.2).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-9);

        // single fg pixel with per-channel error 0.5 -> 0.8 * 0.125
        let mut g = Graph::<f64>::new();
        let gt = [[0.0f32, 0.0, 0.0]];
        let pred = g.constant(Tensor::from_vec(vec![0.5, 0.5, 0.5], &[1, 3]).unwrap());
        let split = LossSplit { gt: &gt, fg: &[true], hit_rows: &[0], miss_fg_sum: 0.0, miss_bg_sum: 0.0 };
        let loss = render_loss(&mut g, pred, &split, 0.8, 0.2).unwrap();
        assert!((g.scalar_value(loss) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn test_render_loss_empty_partition_contributes_zero() {
        let mut g = Graph::<f64>::new();
        let gt = [[0.0f32, 0.0, 0.0]];
        let pred = g.constant(Tensor::from_vec(vec![0.5, 0.5, 0.5], &[1, 3]).unwrap());
        // all-bg batch: fg term absent
        let split = LossSplit { gt: &gt, fg: &[false], hit_rows: &[0], miss_fg_sum: 0.0, miss_bg_sum: 0.0 };
        let loss = render_loss(&mut g, pred, &split, 0.8, 0.2).unwrap();
        assert!((g.scalar_value(loss) - 0.2 * 0.125).abs() < 1e-12);
    }

    #[test]
    fn test_opacity_bounded_and_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 8;
            let mut g = Graph::<f64>::new();
            let sdata: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0).collect();
            let sigma = g.constant(Tensor::from_vec(sdata, &[1, n]).unwrap());
            let cdata: Vec<f64> = (0..n * 3).map(|_| rng.random::<f64>()).collect();
            let color = g.constant(Tensor::from_vec(cdata, &[n, 3]).unwrap());
            let deltas = Tensor::from_fn(&[1, n], |_| rng.random::<f64>() * 0.5);
            let out = composite_rays(&mut g, sigma, color, &deltas, [0.0, 0.0, 0.0]).unwrap();
            for &v in g.value(out).data() {
                assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
    }

    #[test]
    fn test_density_monotonicity_toward_field_color() {
        // raising sigma on a red field moves output toward red, away from bg
        let run = |scale: f64| {
            let mut g = Graph::<f64>::new();
            let n = 16;
            let sigma = g.constant(Tensor::full(&[1, n], scale));
            let color = g.constant(Tensor::from_fn(&[n, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 }));
            let deltas = Tensor::full(&[1, n], 0.1);
            let out = composite_rays(&mut g, sigma, color, &deltas, [0.0, 0.0, 1.0]).unwrap();
            g.value(out).data().to_vec()
        };
        let lo = run(0.5);
        let hi = run(2.0);
        assert!(hi[0] > lo[0]);
        assert!(hi[2] < lo[2]);
    }

    #[test]
    fn test_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 3);
        for (i, p) in img.rgb.iter_mut().enumerate() {
            *p = [(i as f32) / 12.0, 0.5, 1.0 - (i as f32) / 12.0];
            img.alpha[i] = i % 2 == 0;
        }
        let path = dir.path().join("img.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.width, 4);
        assert_eq!(back.alpha, img.alpha);
        for (a, b) in back.rgb.iter().zip(&img.rgb) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1.0 / 255.0 + 1e-6);
            }
        }
    }
}
