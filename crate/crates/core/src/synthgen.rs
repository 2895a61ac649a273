//! Procedural drives: a flat textured ground with scattered boxes and posts,
//! a vehicle moving on it with exact kinematics, and a software renderer for
//! the cameras mounted on the vehicle.
//!
//! The world is z-up. The vehicle frame has x forward, y left and z up with
//! its origin on the ground below the rear axle, which is the rotation
//! center of the vehicle.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{CameraId, CameraModel, PoseSE3, RigidTransform, Trajectory};
use crate::imaging::Rgb8Image;
use crate::nn::{derive_seed, rng_from};

/// Largest per-frame displacement a drive may contain.
pub const MAX_FRAME_DISPLACEMENT: f64 = 5.0;

pub type Color = [f32; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTexture {
    /// Edge length of the checker cells in meters.
    pub checker_size: f64,
    pub color_a: Color,
    pub color_b: Color,
    /// Lattice spacing of the value noise in meters.
    pub noise_scale: f64,
    /// Relative brightness modulation of the noise, in `[0, 1]`.
    pub noise_amplitude: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn corners(&self) -> [Vector3<f64>; 8] {
        let (a, b) = (self.min, self.max);
        core::array::from_fn(|k| Vector3::new(if k & 1 == 0 { a[0] } else { b[0] }, if k & 2 == 0 { a[1] } else { b[1] }, if k & 4 == 0 { a[2] } else { b[2] }))
    }

    fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// Entry distance along `origin + t * dir` and the axis of the face hit.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let (mut a, mut b) = ((self.min[k] - origin[k]) * inv, (self.max[k] - origin[k]) * inv);
            if a > b {
                core::mem::swap(&mut a, &mut b);
            }
            if a > t0 {
                t0 = a;
                axis = k;
            }
            t1 = t1.min(b);
        }
        (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub bounds: Aabb,
    pub color: Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub footprint: (f64, f64),
    pub height: (f64, f64),
}

/// Everything needed to build a scene; the scene depends on nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub map_tag: String,
    pub ground: GroundTexture,
    pub sky_color: Color,
    /// `(min_x, min_y, max_x, max_y)` of the populated area.
    pub extent: (f64, f64, f64, f64),
    /// Boxes per 100 m².
    pub box_density: f64,
    pub box_size: SizeRange,
    /// Posts per 100 m².
    pub post_density: f64,
    pub post_size: SizeRange,
    pub palette: Vec<Color>,
    /// Points (usually the vehicle path) that primitives keep away from.
    #[serde(default)]
    pub keep_out: Vec<[f64; 2]>,
    #[serde(default)]
    pub clearance: f64,
}

impl SceneSpec {
    pub fn area(&self) -> f64 {
        let (x0, y0, x1, y1) = self.extent;
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    pub fn box_count(&self) -> usize {
        libm::round(self.box_density * self.area() / 100.0) as usize
    }

    pub fn post_count(&self) -> usize {
        libm::round(self.post_density * self.area() / 100.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (x0, y0, x1, y1) = self.extent;
        if !(x1 > x0 && y1 > y0) {
            bail!(InvalidConfig, "scene extent is empty: {:?}", self.extent);
        }
        if !(self.ground.checker_size > 0.0 && self.ground.noise_scale > 0.0) {
            bail!(InvalidConfig, "ground texture scales must be positive");
        }
        if self.box_density < 0.0 || self.post_density < 0.0 || self.clearance < 0.0 {
            bail!(InvalidConfig, "densities and clearance must be nonnegative");
        }
        for r in [self.box_size, self.post_size] {
            if !(r.footprint.0 > 0.0 && r.footprint.0 <= r.footprint.1 && r.height.0 > 0.0 && r.height.0 <= r.height.1) {
                bail!(InvalidConfig, "invalid primitive size range {:?}", r);
            }
        }
        if self.palette.is_empty() {
            bail!(InvalidConfig, "palette is empty");
        }
        Ok(())
    }
}

/// An immutable scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub primitives: Vec<Primitive>,
}

fn too_close(spec: &SceneSpec, x: f64, y: f64, half: f64) -> bool {
    let r = spec.clearance + half;
    spec.keep_out.iter().any(|p| (p[0] - x) * (p[0] - x) + (p[1] - y) * (p[1] - y) < r * r)
}

fn place(spec: &SceneSpec, rng: &mut ChaCha8Rng, size: &SizeRange) -> Primitive {
    let (x0, y0, x1, y1) = spec.extent;
    let sx = rng.random_range(size.footprint.0..=size.footprint.1);
    let sy = rng.random_range(size.footprint.0..=size.footprint.1);
    let h = rng.random_range(size.height.0..=size.height.1);
    let color = spec.palette[rng.random_range(0..spec.palette.len())];
    let half = 0.5 * sx.max(sy) * core::f64::consts::SQRT_2;
    let (mut x, mut y) = (0.0, 0.0);
    // Rejection sampling; after many misses the last draw is kept so the
    // primitive count never depends on the keep-out set.
    for _ in 0..64 {
        x = rng.random_range(x0..x1);
        y = rng.random_range(y0..y1);
        if !too_close(spec, x, y, half) {
            break;
        }
    }
    Primitive {
        bounds: Aabb {
            min: [x - 0.5 * sx, y - 0.5 * sy, 0.0],
            max: [x + 0.5 * sx, y + 0.5 * sy, h],
        },
        color,
    }
}

pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_from(&[spec.seed, 0x5CE7E]);
    let mut primitives = Vec::with_capacity(spec.box_count() + spec.post_count());
    for _ in 0..spec.box_count() {
        primitives.push(place(spec, &mut rng, &spec.box_size));
    }
    for _ in 0..spec.post_count() {
        primitives.push(place(spec, &mut rng, &spec.post_size));
    }
    Ok(Scene { spec: spec.clone(), primitives })
}

/// Global appearance of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weather {
    pub tag: String,
    pub brightness: f32,
    /// Extinction per meter; color fades toward the sky with distance.
    pub haze_density: f64,
    pub sky_tint: Color,
}

impl Weather {
    pub fn clear() -> Self {
        Self {
            tag: "clear".into(),
            brightness: 1.0,
            haze_density: 0.004,
            sky_tint: [1.0, 1.0, 1.0],
        }
    }

    pub fn presets() -> Vec<Weather> {
        vec![
            Self::clear(),
            Weather {
                tag: "overcast".into(),
                brightness: 0.85,
                haze_density: 0.01,
                sky_tint: [0.8, 0.82, 0.85],
            },
            Weather {
                tag: "fog".into(),
                brightness: 0.95,
                haze_density: 0.03,
                sky_tint: [0.9, 0.9, 0.9],
            },
            Weather {
                tag: "dusk".into(),
                brightness: 0.65,
                haze_density: 0.006,
                sky_tint: [1.1, 0.8, 0.6],
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Samples per pixel along each axis.
    pub supersample: usize,
    /// Primitives farther than this are not drawn.
    pub max_distance: f64,
    /// Distance over which ground texture contrast fades out; suppresses
    /// aliasing of far checker cells.
    pub texture_fade_distance: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            supersample: 2,
            max_distance: 120.0,
            texture_fade_distance: 60.0,
        }
    }
}

fn hash2(seed: u64, ix: i64, iy: i64) -> f32 {
    (derive_seed(&[seed, ix as u64, iy as u64]) >> 40) as f32 / (1u64 << 24) as f32
}

fn value_noise(seed: u64, x: f64, y: f64) -> f32 {
    let (fx, fy) = (libm::floor(x), libm::floor(y));
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| (t * t * (3.0 - 2.0 * t)) as f32;
    let (sx, sy) = (smooth(x - fx), smooth(y - fy));
    let a = hash2(seed, ix, iy) + sx * (hash2(seed, ix + 1, iy) - hash2(seed, ix, iy));
    let b = hash2(seed, ix, iy + 1) + sx * (hash2(seed, ix + 1, iy + 1) - hash2(seed, ix, iy + 1));
    a + sy * (b - a)
}

fn mix(a: Color, b: Color, t: f32) -> Color {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

impl Scene {
    /// Ground color at a world point, before haze.
    pub fn ground_color(&self, x: f64, y: f64, distance: f64, opts: &RenderOptions) -> Color {
        let g = &self.spec.ground;
        let cell = (libm::floor(x / g.checker_size) as i64 + libm::floor(y / g.checker_size) as i64).rem_euclid(2);
        let base = if cell == 0 { g.color_a } else { g.color_b };
        let n = value_noise(self.spec.seed, x / g.noise_scale, y / g.noise_scale) - 0.5;
        let c = base.map(|v| v * (1.0 + g.noise_amplitude * n));
        let mean = mix(g.color_a, g.color_b, 0.5);
        let fade = (distance / opts.texture_fade_distance).clamp(0.0, 1.0) as f32;
        mix(c, mean, fade)
    }

    fn sky(&self, weather: &Weather) -> Color {
        let s = self.spec.sky_color;
        [s[0] * weather.sky_tint[0], s[1] * weather.sky_tint[1], s[2] * weather.sky_tint[2]]
    }
}

const FACE_SHADE: [f32; 3] = [0.8, 0.65, 1.0];

/// Renders the scene seen from `pose` through `camera`.
pub fn render_view(scene: &Scene, pose: &PoseSE3, camera: &CameraModel, weather: &Weather, opts: &RenderOptions) -> Result<Rgb8Image> {
    camera.validate()?;
    let s = opts.supersample.max(1);
    let sf = s as f64;
    // Sample grid: pixel u covers samples su in [u*s, u*s + s).
    let grid = CameraModel {
        focal_x: camera.focal_x * sf,
        focal_y: camera.focal_y * sf,
        principal_point: ((camera.principal_point.0 + 0.5) * sf - 0.5, (camera.principal_point.1 + 0.5) * sf - 0.5),
        image_size: (camera.width() * s, camera.height() * s),
    };
    let (gw, gh) = grid.image_size;
    let rot: Matrix3<f64> = pose.rotation;
    let origin = pose.translation;
    let to_cam = rot.transpose();

    let mut depth = vec![f64::INFINITY; gw * gh];
    let mut color = vec![[0f32; 3]; gw * gh];

    for prim in &scene.primitives {
        let center_dist = (prim.bounds.center() - origin).norm();
        if center_dist > opts.max_distance {
            continue;
        }
        let corners: Vec<Vector3<f64>> = prim.bounds.corners().iter().map(|c| to_cam * (c - origin)).collect();
        if corners.iter().all(|c| c.z <= 0.0) {
            continue;
        }
        let (mut u0, mut v0, mut u1, mut v1) = (0.0, 0.0, gw as f64 - 1.0, gh as f64 - 1.0);
        if corners.iter().all(|c| c.z > 1e-6) {
            let proj: Vec<(f64, f64)> = corners.iter().filter_map(|c| grid.project(c)).collect();
            u0 = libm::floor(proj.iter().map(|p| p.0).fold(f64::INFINITY, f64::min)).max(0.0);
            v0 = libm::floor(proj.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)).max(0.0);
            u1 = libm::ceil(proj.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)).min(gw as f64 - 1.0);
            v1 = libm::ceil(proj.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)).min(gh as f64 - 1.0);
            if u0 > u1 || v0 > v1 {
                continue;
            }
        }
        for v in v0 as usize..=v1 as usize {
            for u in u0 as usize..=u1 as usize {
                let dir = rot * grid.ray(u as f64, v as f64);
                if let Some((t, axis)) = prim.bounds.intersect(&origin, &dir) {
                    let k = v * gw + u;
                    if t < depth[k] {
                        depth[k] = t;
                        color[k] = prim.color.map(|c| c * FACE_SHADE[axis]);
                    }
                }
            }
        }
    }

    let sky = scene.sky(weather);
    for v in 0..gh {
        for u in 0..gw {
            let k = v * gw + u;
            let dir = rot * grid.ray(u as f64, v as f64);
            let norm = dir.norm();
            if dir.z < 0.0 {
                let t = -origin.z / dir.z;
                if t > 0.0 && t < depth[k] {
                    depth[k] = t;
                    let p = origin + dir * t;
                    color[k] = scene.ground_color(p.x, p.y, t * norm, opts);
                }
            }
            color[k] = if depth[k].is_finite() {
                let fog = 1.0 - libm::exp(-weather.haze_density * depth[k] * norm) as f32;
                mix(color[k], sky, fog)
            } else {
                sky
            };
        }
    }

    let (w, h) = camera.image_size;
    let mut img = Rgb8Image::new(w, h);
    let norm = 1.0 / (s * s) as f32;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for sy in 0..s {
                for sx in 0..s {
                    let c = color[(y * s + sy) * gw + x * s + sx];
                    acc.iter_mut().zip(c).for_each(|(a, c)| *a += c);
                }
            }
            img.put(x, y, acc.map(|a| libm::roundf((a * norm * weather.brightness).clamp(0.0, 1.0) * 255.0) as u8));
        }
    }
    Ok(img)
}

/// World point on the ground seen at pixel `(u, v)`, if any.
pub fn ground_hit(pose: &PoseSE3, camera: &CameraModel, u: f64, v: f64) -> Option<Vector3<f64>> {
    let dir = pose.rotation * camera.ray(u, v);
    if dir.z >= 0.0 {
        return None;
    }
    let t = -pose.translation.z / dir.z;
    (t > 0.0).then(|| pose.translation + dir * t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    /// Seconds.
    pub duration: f64,
    /// Speed at the start of the segment, m/s.
    pub speed: f64,
    /// Speed at the end; speed ramps linearly when set.
    #[serde(default)]
    pub end_speed: Option<f64>,
    /// rad/s, positive to the left.
    pub yaw_rate: f64,
}

impl MotionSegment {
    pub fn constant(duration: f64, speed: f64, yaw_rate: f64) -> Self {
        Self {
            duration,
            speed,
            end_speed: None,
            yaw_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub segments: Vec<MotionSegment>,
    /// Seconds between frames.
    pub frame_interval: f64,
    /// Standard deviation of a per-frame yaw-rate perturbation, rad/s.
    #[serde(default)]
    pub yaw_noise: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

impl MotionProfile {
    pub fn new(segments: Vec<MotionSegment>) -> Self {
        Self {
            segments,
            frame_interval: 0.1,
            yaw_noise: 0.0,
            noise_seed: 0,
        }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn frame_count(&self) -> usize {
        libm::floor(self.duration() / self.frame_interval + 1e-9) as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_interval > 0.0 && self.frame_interval.is_finite()) {
            bail!(InvalidConfig, "frame interval must be positive, got {}", self.frame_interval);
        }
        if self.segments.is_empty() {
            bail!(InvalidConfig, "motion profile has no segments");
        }
        if !(self.yaw_noise >= 0.0) {
            bail!(InvalidConfig, "yaw noise must be nonnegative");
        }
        for (k, s) in self.segments.iter().enumerate() {
            let end = s.end_speed.unwrap_or(s.speed);
            if !(s.duration > 0.0 && s.speed >= 0.0 && end >= 0.0 && s.yaw_rate.is_finite() && s.speed.is_finite() && end.is_finite()) {
                bail!(InvalidConfig, "segment {k} is invalid: {:?}", s);
            }
        }
        Ok(())
    }

    /// Speed and yaw rate at time `t`.
    pub fn command_at(&self, t: f64) -> (f64, f64) {
        let mut start = 0.0;
        for s in &self.segments {
            if t < start + s.duration {
                let frac = (t - start) / s.duration;
                let end = s.end_speed.unwrap_or(s.speed);
                return (s.speed + frac * (end - s.speed), s.yaw_rate);
            }
            start += s.duration;
        }
        let last = self.segments.last().expect("validated profile");
        (last.end_speed.unwrap_or(last.speed), last.yaw_rate)
    }
}

/// Planar vehicle state: position of the rear-axle ground point and heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub time: f64,
}

impl VehicleState {
    pub fn transform(&self) -> RigidTransform {
        let (s, c) = (libm::sin(self.yaw), libm::cos(self.yaw));
        RigidTransform {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::new(self.x, self.y, 0.0),
        }
    }
}

/// Integrated vehicle states, one per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Drive {
    pub states: Vec<VehicleState>,
}

/// Integrates the profile frame by frame. Each interval follows an exact
/// circular arc (or line) at the commanded speed and yaw rate of its
/// midpoint, so the rear axle never slips sideways.
pub fn integrate_motion(profile: &MotionProfile, start: VehicleState) -> Result<Drive> {
    profile.validate()?;
    let dt = profile.frame_interval;
    let n = profile.frame_count();
    let noise = Normal::new(0.0, profile.yaw_noise).map_err(|e| crate::Error::InvalidConfig(format!("{e}")))?;
    let mut rng = rng_from(&[profile.noise_seed, 0x4A3]);
    let mut states = Vec::with_capacity(n);
    let mut s = start;
    states.push(s);
    for k in 1..n {
        let t_mid = (k as f64 - 0.5) * dt;
        let (v, mut w) = profile.command_at(t_mid);
        if profile.yaw_noise > 0.0 {
            w += noise.sample(&mut rng);
        }
        if v * dt > MAX_FRAME_DISPLACEMENT {
            bail!(
                InvalidConfig,
                "frame {k} would move {:.3} m, more than {MAX_FRAME_DISPLACEMENT} m",
                v * dt
            );
        }
        let dyaw = w * dt;
        let (dx, dy) = if libm::fabs(dyaw) < 1e-12 {
            (v * dt * libm::cos(s.yaw), v * dt * libm::sin(s.yaw))
        } else {
            let r = v / w;
            (r * (libm::sin(s.yaw + dyaw) - libm::sin(s.yaw)), r * (libm::cos(s.yaw) - libm::cos(s.yaw + dyaw)))
        };
        s = VehicleState {
            x: s.x + dx,
            y: s.y + dy,
            yaw: s.yaw + dyaw,
            time: k as f64 * dt,
        };
        states.push(s);
    }
    Ok(Drive { states })
}

/// A camera rigidly mounted on the vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigCamera {
    pub id: CameraId,
    pub model: CameraModel,
    /// Vehicle-from-camera transform (`to_row_major_4x4` layout when exported).
    #[serde(skip, default = "RigidTransform::identity")]
    pub mount: RigidTransform,
}

/// Rotation taking camera axes (x right, y down, z forward) to vehicle axes
/// (x forward, y left, z up).
pub fn camera_to_vehicle_rotation() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Camera mounted at `(forward, left, up)` meters from the rear-axle ground
/// point, looking straight ahead.
pub fn mount_at(forward: f64, left: f64, up: f64) -> RigidTransform {
    RigidTransform {
        rotation: camera_to_vehicle_rotation(),
        translation: Vector3::new(forward, left, up),
    }
}

/// 320×140 camera with focal length 240 px; normalizing it to the
/// canonical camera needs no pixels outside the frame.
pub fn default_camera() -> CameraModel {
    CameraModel {
        focal_x: 240.0,
        focal_y: 240.0,
        principal_point: (160.0, 70.0),
        image_size: (320, 140),
    }
}

/// Stereo pair 0.54 m apart, 1.65 m above ground, 1.2 m ahead of the rear
/// axle.
pub fn default_rig() -> Vec<RigCamera> {
    vec![
        RigCamera {
            id: CameraId::Left,
            model: default_camera(),
            mount: mount_at(1.2, 0.27, 1.65),
        },
        RigCamera {
            id: CameraId::Right,
            model: default_camera(),
            mount: mount_at(1.2, -0.27, 1.65),
        },
    ]
}

impl Drive {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn camera_pose(&self, frame: usize, mount: &RigidTransform) -> PoseSE3 {
        let s = &self.states[frame];
        let t = s.transform().compose(mount);
        PoseSE3 {
            rotation: t.rotation,
            translation: t.translation,
            frame_index: frame as u64,
            timestamp: Some(s.time),
        }
    }

    pub fn camera_trajectory(&self, sequence_id: impl Into<String>, camera: &RigCamera) -> Result<Trajectory> {
        let poses = (0..self.len()).map(|k| self.camera_pose(k, &camera.mount)).collect();
        Trajectory::new(sequence_id, camera.id, poses)
    }

    /// Ground points of the rear axle.
    pub fn path(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(|s| [s.x, s.y]).collect()
    }
}

/// Appearance and layout statistics shared by all episodes of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPreset {
    pub tag: String,
    pub ground: GroundTexture,
    pub sky_color: Color,
    pub box_density: f64,
    pub box_size: SizeRange,
    pub post_density: f64,
    pub post_size: SizeRange,
    pub palette: Vec<Color>,
    /// Speed range of the drives, m/s.
    pub speed_range: (f64, f64),
    /// Largest absolute yaw rate, rad/s.
    pub max_yaw_rate: f64,
}

/// Number of built-in maps.
pub const MAP_COUNT: usize = 6;

/// Built-in map `index` (1-based).
pub fn map_preset(index: usize) -> Result<MapPreset> {
    let box_small = SizeRange {
        footprint: (1.0, 3.0),
        height: (1.0, 4.0),
    };
    let post = SizeRange {
        footprint: (0.15, 0.3),
        height: (2.0, 5.0),
    };
    let warm = vec![[0.75, 0.35, 0.25], [0.85, 0.7, 0.3], [0.5, 0.3, 0.2], [0.9, 0.85, 0.75]];
    let cool = vec![[0.25, 0.4, 0.7], [0.3, 0.6, 0.55], [0.55, 0.6, 0.65], [0.15, 0.2, 0.3]];
    let mixed = vec![[0.8, 0.2, 0.2], [0.2, 0.7, 0.3], [0.2, 0.3, 0.8], [0.9, 0.9, 0.2], [0.6, 0.6, 0.6]];
    let (ground, sky, boxes, box_size, posts, palette, speed, yaw) = match index {
        1 => (
            GroundTexture {
                checker_size: 2.0,
                color_a: [0.35, 0.35, 0.35],
                color_b: [0.55, 0.55, 0.5],
                noise_scale: 0.7,
                noise_amplitude: 0.5,
            },
            [0.6, 0.75, 0.95],
            0.6,
            box_small,
            0.4,
            mixed.clone(),
            (3.0, 15.0),
            0.25,
        ),
        2 => (
            GroundTexture {
                checker_size: 1.0,
                color_a: [0.3, 0.45, 0.25],
                color_b: [0.4, 0.55, 0.3],
                noise_scale: 0.4,
                noise_amplitude: 0.6,
            },
            [0.65, 0.8, 0.95],
            0.4,
            SizeRange {
                footprint: (0.8, 2.0),
                height: (0.8, 2.5),
            },
            1.0,
            cool.clone(),
            (3.0, 12.0),
            0.35,
        ),
        3 => (
            GroundTexture {
                checker_size: 3.0,
                color_a: [0.55, 0.45, 0.35],
                color_b: [0.65, 0.55, 0.4],
                noise_scale: 1.0,
                noise_amplitude: 0.7,
            },
            [0.75, 0.8, 0.9],
            0.9,
            SizeRange {
                footprint: (2.0, 5.0),
                height: (2.0, 8.0),
            },
            0.2,
            warm.clone(),
            (4.0, 15.0),
            0.2,
        ),
        4 => (
            GroundTexture {
                checker_size: 1.5,
                color_a: [0.25, 0.25, 0.3],
                color_b: [0.45, 0.45, 0.5],
                noise_scale: 0.5,
                noise_amplitude: 0.4,
            },
            [0.5, 0.6, 0.8],
            1.2,
            box_small,
            0.8,
            mixed,
            (3.0, 14.0),
            0.3,
        ),
        5 => (
            GroundTexture {
                checker_size: 2.5,
                color_a: [0.6, 0.6, 0.55],
                color_b: [0.45, 0.4, 0.35],
                noise_scale: 0.8,
                noise_amplitude: 0.45,
            },
            [0.7, 0.7, 0.75],
            0.5,
            SizeRange {
                footprint: (1.5, 4.0),
                height: (1.5, 6.0),
            },
            0.6,
            cool,
            (3.0, 15.0),
            0.25,
        ),
        6 => (
            GroundTexture {
                checker_size: 1.2,
                color_a: [0.4, 0.35, 0.3],
                color_b: [0.5, 0.5, 0.45],
                noise_scale: 0.6,
                noise_amplitude: 0.55,
            },
            [0.6, 0.7, 0.85],
            0.8,
            SizeRange {
                footprint: (1.0, 3.5),
                height: (1.0, 5.0),
            },
            0.5,
            warm,
            (3.0, 15.0),
            0.3,
        ),
        other => bail!(InvalidConfig, "unknown map preset {other}; maps are numbered 1 to {MAP_COUNT}"),
    };
    Ok(MapPreset {
        tag: format!("map{index}"),
        ground,
        sky_color: sky,
        box_density: boxes,
        box_size,
        post_density: posts,
        post_size: post,
        palette,
        speed_range: speed,
        max_yaw_rate: yaw,
    })
}

/// A generated episode: its scene, motion and appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub scene: Scene,
    pub drive: Drive,
    pub weather: Weather,
}

/// Smooth random profile: segments of 1.5 to 4 s, speed ramps between
/// random levels, yaw rate either zero or a random turn.
pub fn random_profile(map: &MapPreset, frames: usize, frame_interval: f64, rng: &mut ChaCha8Rng) -> MotionProfile {
    let total = (frames.max(1) - 1) as f64 * frame_interval;
    let mut segments = Vec::new();
    let mut elapsed = 0.0;
    let (lo, hi) = map.speed_range;
    let mut speed = rng.random_range(lo..=hi);
    while elapsed < total - 1e-9 {
        let duration = rng.random_range(1.5..4.0f64).min(total - elapsed).max(frame_interval);
        let end = rng.random_range(lo..=hi);
        let yaw_rate = if rng.random_bool(0.5) {
            0.0
        } else {
            rng.random_range(-map.max_yaw_rate..=map.max_yaw_rate)
        };
        segments.push(MotionSegment {
            duration,
            speed,
            end_speed: Some(end),
            yaw_rate,
        });
        speed = end;
        elapsed += duration;
    }
    if segments.is_empty() {
        segments.push(MotionSegment::constant(frame_interval, speed, 0.0));
    }
    // Pad so the rounding of the last frame time never drops a frame.
    segments.last_mut().unwrap().duration += 0.25 * frame_interval;
    MotionProfile {
        segments,
        frame_interval,
        yaw_noise: 0.02,
        noise_seed: rng.random(),
    }
}

fn episode_rng(map: &MapPreset, seed: u64, episode: usize, stream: u64) -> ChaCha8Rng {
    let map_hash = {
        use core::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(map.tag.as_bytes());
        h.finish()
    };
    rng_from(&[seed, map_hash, episode as u64, stream])
}

/// Builds episode `episode` of `map` with `frames` frames. The scene covers
/// the drive with a margin and keeps a corridor around the path clear.
pub fn generate_episode(map: &MapPreset, seed: u64, episode: usize, frames: usize) -> Result<Episode> {
    if frames < 2 {
        bail!(InvalidConfig, "an episode needs at least two frames, got {frames}");
    }
    let mut rng = episode_rng(map, seed, episode, 0xE915);
    let profile = random_profile(map, frames, 0.1, &mut rng);
    finish_episode(map, episode, &profile, frames, &mut rng)
}

/// Like [`generate_episode`], driving `profile` instead of a random one.
pub fn episode_with_profile(map: &MapPreset, seed: u64, episode: usize, profile: &MotionProfile) -> Result<Episode> {
    let frames = profile.frame_count();
    if frames < 2 {
        bail!(InvalidConfig, "an episode needs at least two frames, got {frames}");
    }
    let mut rng = episode_rng(map, seed, episode, 0xE916);
    finish_episode(map, episode, profile, frames, &mut rng)
}

fn finish_episode(map: &MapPreset, episode: usize, profile: &MotionProfile, frames: usize, rng: &mut ChaCha8Rng) -> Result<Episode> {
    let start = VehicleState {
        x: rng.random_range(-50.0..50.0),
        y: rng.random_range(-50.0..50.0),
        yaw: rng.random_range(-core::f64::consts::PI..core::f64::consts::PI),
        time: 0.0,
    };
    let mut drive = integrate_motion(profile, start)?;
    drive.states.truncate(frames);
    let weathers = Weather::presets();
    let weather = weathers[rng.random_range(0..weathers.len())].clone();
    let path = drive.path();
    let margin = 50.0;
    let min_x = path.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - margin;
    let max_x = path.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + margin;
    let min_y = path.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min) - margin;
    let max_y = path.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + margin;
    let spec = SceneSpec {
        seed: rng.random(),
        map_tag: map.tag.clone(),
        ground: map.ground.clone(),
        sky_color: map.sky_color,
        extent: (min_x, min_y, max_x, max_y),
        box_density: map.box_density,
        box_size: map.box_size,
        post_density: map.post_density,
        post_size: map.post_size,
        palette: map.palette.clone(),
        keep_out: path,
        clearance: 3.5,
    };
    Ok(Episode {
        id: format!("{}_ep{:03}", map.tag, episode),
        scene: build_scene(&spec)?,
        drive,
        weather,
    })
}
