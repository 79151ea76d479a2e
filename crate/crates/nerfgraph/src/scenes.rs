//! Procedural synthetic scenes: primitive shapes with class labels,
//! deterministic camera rigs, and analytic ground-truth rendering with
//! exact foreground masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::renderer::{dot, CameraPose, Image};
use crate::{Error, Result};

pub const DEFAULT_CLASSES: [&str; 4] = ["sphere", "box", "torus", "two_spheres"];
const LIGHT_DIR: [f64; 3] = [0.45, -0.6, 0.66];
const AMBIENT: f64 = 0.3;
pub const BG_COLOR: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Torus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    /// Sphere: [radius, -, -]; box: half extents; torus: [major, minor, -].
    pub size: [f64; 3],
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub class_label: String,
    pub primitives: Vec<Primitive>,
    pub views: usize,
    pub image_size: usize,
    pub camera_distance: f64,
}

impl Primitive {
    fn sdf(&self, p: [f64; 3]) -> f64 {
        let q = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.kind {
            PrimitiveKind::Sphere => dot(q, q).sqrt() - self.size[0],
            PrimitiveKind::Box => {
                let d = [q[0].abs() - self.size[0], q[1].abs() - self.size[1], q[2].abs() - self.size[2]];
                let outside = [d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)];
                let inside = d[0].max(d[1]).max(d[2]).min(0.0);
                dot(outside, outside).sqrt() + inside
            }
            PrimitiveKind::Torus => {
                let ring = (q[0] * q[0] + q[1] * q[1]).sqrt() - self.size[0];
                (ring * ring + q[2] * q[2]).sqrt() - self.size[1]
            }
        }
    }

    fn max_reach(&self) -> f64 {
        let c = dot(self.center, self.center).sqrt();
        let r = match self.kind {
            PrimitiveKind::Sphere => self.size[0],
            PrimitiveKind::Box => dot(self.size, self.size).sqrt(),
            PrimitiveKind::Torus => self.size[0] + self.size[1],
        };
        c + r
    }
}

impl SceneSpec {
    /// Signed distance to the closest primitive plus its index.
    pub fn sdf(&self, p: [f64; 3]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, prim) in self.primitives.iter().enumerate() {
            let d = prim.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    pub fn inside_unit_sphere(&self) -> bool {
        self.primitives.iter().all(|p| p.max_reach() <= 0.98)
    }

    /// Deterministic rig: elevation rings swept in azimuth, looking at the
    /// origin.
    pub fn camera_rig(&self) -> Vec<CameraPose> {
        camera_rig(self.views, self.camera_distance, self.image_size)
    }
}

pub fn camera_rig(views: usize, distance: f64, image_size: usize) -> Vec<CameraPose> {
    let rings: &[(f64, usize)] = match views {
        v if v % 4 == 0 => &[(-25.0, 1), (5.0, 1), (35.0, 1), (60.0, 1)],
        _ => &[(0.0, 1), (40.0, 1)],
    };
    let per_ring = (views / rings.len()).max(1);
    let focal = image_size as f64 * 1.05;
    let mut poses = Vec::with_capacity(views);
    'outer: for (ri, &(elev_deg, _)) in rings.iter().enumerate() {
        for a in 0..per_ring {
            if poses.len() == views {
                break 'outer;
            }
            let az = (a as f64 + 0.5 * ri as f64) / per_ring as f64 * std::f64::consts::TAU;
            let el = elev_deg.to_radians();
            let pos = [distance * el.cos() * az.cos(), distance * el.cos() * az.sin(), distance * el.sin()];
            poses.push(CameraPose::look_at(pos, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], focal, image_size, image_size));
        }
    }
    while poses.len() < views {
        let az = poses.len() as f64 * 2.399963; // golden angle filler
        let pos = [distance * az.cos(), distance * az.sin(), distance * 0.35];
        poses.push(CameraPose::look_at(pos, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], focal, image_size, image_size));
    }
    poses
}

/// Randomized primitive parameters within class-specific ranges.
pub fn generate_scene(
    id: &str,
    class: &str,
    views: usize,
    image_size: usize,
    camera_distance: f64,
    rng: &mut impl Rng,
) -> Result<SceneSpec> {
    let albedo = |rng: &mut dyn rand::RngCore| {
        [
            rng.random_range(0.15..0.9),
            rng.random_range(0.15..0.9),
            rng.random_range(0.15..0.9),
        ]
    };
    let small_center = |rng: &mut dyn rand::RngCore, reach: f64| {
        let m = (0.9 - reach).max(0.0) * 0.6;
        [rng.random_range(-m..=m), rng.random_range(-m..=m), rng.random_range(-m..=m)]
    };
    let primitives = match class {
        "sphere" => {
            let r = rng.random_range(0.35..0.62);
            vec![Primitive { kind: PrimitiveKind::Sphere, center: small_center(rng, r), size: [r, 0.0, 0.0], albedo: albedo(rng) }]
        }
        "box" => {
            let h = [rng.random_range(0.25..0.5), rng.random_range(0.25..0.5), rng.random_range(0.25..0.5)];
            vec![Primitive { kind: PrimitiveKind::Box, center: small_center(rng, dot(h, h).sqrt()), size: h, albedo: albedo(rng) }]
        }
        "torus" => {
            let major = rng.random_range(0.38..0.55);
            let minor = rng.random_range(0.14..0.24);
            vec![Primitive {
                kind: PrimitiveKind::Torus,
                center: small_center(rng, major + minor),
                size: [major, minor, 0.0],
                albedo: albedo(rng),
            }]
        }
        "two_spheres" => {
            let r1 = rng.random_range(0.22..0.4);
            let r2 = rng.random_range(0.22..0.4);
            let off = rng.random_range(0.3..0.45);
            let dir = {
                let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64)];
                let n = dot(v, v).sqrt().max(1e-6);
                [v[0] / n, v[1] / n, v[2] / n]
            };
            vec![
                Primitive {
                    kind: PrimitiveKind::Sphere,
                    center: [dir[0] * off, dir[1] * off, dir[2] * off],
                    size: [r1, 0.0, 0.0],
                    albedo: albedo(rng),
                },
                Primitive {
                    kind: PrimitiveKind::Sphere,
                    center: [-dir[0] * off, -dir[1] * off, -dir[2] * off],
                    size: [r2, 0.0, 0.0],
                    albedo: albedo(rng),
                },
            ]
        }
        other => return Err(Error::Config(format!("unknown scene class {other:?}"))),
    };
    let spec = SceneSpec {
        id: id.to_string(),
        class_label: class.to_string(),
        primitives,
        views,
        image_size,
        camera_distance,
    };
    debug_assert!(spec.inside_unit_sphere(), "primitives escaped the unit sphere");
    Ok(spec)
}

fn normal_at(scene: &SceneSpec, p: [f64; 3]) -> [f64; 3] {
    let h = 1e-5;
    let mut n = [0.0; 3];
    for d in 0..3 {
        let mut hi = p;
        let mut lo = p;
        hi[d] += h;
        lo[d] -= h;
        n[d] = scene.sdf(hi).0 - scene.sdf(lo).0;
    }
    let len = dot(n, n).sqrt().max(1e-12);
    [n[0] / len, n[1] / len, n[2] / len]
}

/// Sphere-traced hit point along a ray, if any.
fn trace(scene: &SceneSpec, origin: [f64; 3], dir: [f64; 3], t0: f64, t1: f64) -> Option<(f64, usize)> {
    let mut t = t0;
    for _ in 0..192 {
        let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
        let (d, idx) = scene.sdf(p);
        if d < 5e-5 {
            return Some((t, idx));
        }
        t += d.max(1e-4);
        if t > t1 {
            return None;
        }
    }
    None
}

/// Shade one camera ray: Lambert-lit albedo on a hit, background on a miss.
fn shade_ray(scene: &SceneSpec, light: [f64; 3], origin: [f64; 3], dir: [f64; 3]) -> Option<[f64; 3]> {
    let span = crate::renderer::ray_sphere_span(origin, dir, crate::renderer::SCENE_RADIUS)?;
    let (t, idx) = trace(scene, origin, dir, span.0, span.1)?;
    let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
    let n = normal_at(scene, p);
    let lambert = dot(n, light).max(0.0);
    let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
    let a = scene.primitives[idx].albedo;
    Some([a[0] * shade, a[1] * shade, a[2] * shade])
}

/// Analytic ground truth, 2x2 supersampled so edges are band-limited the
/// way a volume rendering is; alpha marks pixels whose center subarea hits
/// any primitive.
pub fn render_gt(scene: &SceneSpec, pose: &CameraPose) -> Image {
    let light = {
        let n = dot(LIGHT_DIR, LIGHT_DIR).sqrt();
        [LIGHT_DIR[0] / n, LIGHT_DIR[1] / n, LIGHT_DIR[2] / n]
    };
    let mut img = Image::new(pose.width, pose.height);
    let pixels = adkernel::par::map_indexed(pose.width * pose.height, |pix| {
        let (px, py) = (pix % pose.width, pix / pose.width);
        let mut rgb = [0.0f64; 3];
        let mut hits = 0usize;
        for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
            let x = (px as f64 + 0.5 + ox - pose.width as f64 / 2.0) / pose.focal;
            let y = -(py as f64 + 0.5 + oy - pose.height as f64 / 2.0) / pose.focal;
            let d_cam = [x, y, -1.0];
            let r = &pose.rotation;
            let len = (x * x + y * y + 1.0).sqrt();
            let dir = [
                (r[0][0] * d_cam[0] + r[0][1] * d_cam[1] + r[0][2] * d_cam[2]) / len,
                (r[1][0] * d_cam[0] + r[1][1] * d_cam[1] + r[1][2] * d_cam[2]) / len,
                (r[2][0] * d_cam[0] + r[2][1] * d_cam[1] + r[2][2] * d_cam[2]) / len,
            ];
            match shade_ray(scene, light, pose.position, dir) {
                Some(c) => {
                    hits += 1;
                    for d in 0..3 {
                        rgb[d] += c[d];
                    }
                }
                None => {
                    for d in 0..3 {
                        rgb[d] += BG_COLOR[d];
                    }
                }
            }
        }
        ([rgb[0] as f32 / 4.0, rgb[1] as f32 / 4.0, rgb[2] as f32 / 4.0], hits >= 2)
    });
    for (i, (rgb, alpha)) in pixels.into_iter().enumerate() {
        img.rgb[i] = rgb;
        img.alpha[i] = alpha;
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(class: &str, seed: u64) -> SceneSpec {
        generate_scene("s0", class, 8, 64, 2.8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn test_generate_scene_deterministic() {
        let a = scene("torus", 5);
        let b = scene("torus", 5);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn test_class_construction() {
        assert_eq!(scene("sphere", 1).primitives.len(), 1);
        assert_eq!(scene("sphere", 1).primitives[0].kind, PrimitiveKind::Sphere);
        assert_eq!(scene("two_spheres", 2).primitives.len(), 2);
        assert!(generate_scene("x", "pyramid", 8, 32, 2.8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        for class in DEFAULT_CLASSES {
            assert!(scene(class, 9).inside_unit_sphere());
        }
    }

    #[test]
    fn test_render_gt_miss_and_hit() {
        let mut s = scene("sphere", 3);
        s.primitives[0].center = [0.0, 0.0, 0.0];
        s.primitives[0].size = [0.5, 0.0, 0.0];
        let rig = s.camera_rig();
        let img = render_gt(&s, &rig[0]);
        // corner pixel misses: white, alpha 0
        assert!(!img.alpha[0]);
        assert_eq!(img.rgb[0], [1.0, 1.0, 1.0]);
        // ray through the sphere center hits with the albedo tint
        let center_pix = (img.height / 2) * img.width + img.width / 2;
        assert!(img.alpha[center_pix]);
        let albedo = s.primitives[0].albedo;
        for d in 0..3 {
            assert!(img.rgb[center_pix][d] as f64 <= albedo[d] + 1e-6);
            assert!(img.rgb[center_pix][d] as f64 >= albedo[d] * AMBIENT - 1e-6);
        }
    }

    #[test]
    fn test_sphere_silhouette_area_matches_projection() {
        let mut s = scene("sphere", 4);
        s.primitives[0].center = [0.0, 0.0, 0.0];
        let r = 0.5;
        s.primitives[0].size = [r, 0.0, 0.0];
        let pose = &s.camera_rig()[0];
        let img = render_gt(&s, pose);
        let hits = img.alpha.iter().filter(|&&a| a).count() as f64;
        let d = dot(pose.position, pose.position).sqrt();
        // pinhole projection of a sphere: silhouette radius ~ f * r / sqrt(d^2 - r^2)
        let proj = pose.focal * r / (d * d - r * r).sqrt();
        let expect = std::f64::consts::PI * proj * proj;
        let ratio = hits / expect;
        assert!((0.9..1.1).contains(&ratio), "hits {hits}, expected {expect}");
    }

    #[test]
    fn test_camera_rig_counts_and_geometry() {
        let s = scene("box", 6);
        let rig = s.camera_rig();
        assert_eq!(rig.len(), 8);
        for pose in &rig {
            assert!(pose.orthonormality_error() < 1e-6);
            assert!((dot(pose.position, pose.position).sqrt() - 2.8).abs() < 1e-9);
        }
    }
}
