//! Analytic toy-scene rendering and frame-to-event conversion under the
//! threshold model, plus Poisson noise injection.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{log_clamped, Event, EventStream, IntensityFrame, Thresholds, LOG_EPS};
use crate::field::geom::Vec3;

/// Pinhole camera: intrinsics in pixels, world-to-camera rigid transform
/// (`x_cam = R x_world + t`), +z looking forward.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// row-major 3x3 rotation
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: u16,
    pub height: u16,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        let r = &self.rotation;
        // rows must be orthonormal within 1e-6
        let rows = [
            Vec3::new(r[0], r[1], r[2]),
            Vec3::new(r[3], r[4], r[5]),
            Vec3::new(r[6], r[7], r[8]),
        ];
        for (i, a) in rows.iter().enumerate() {
            if (a.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("rotation row {i} is not unit length")));
            }
            for b in rows.iter().skip(i + 1) {
                if a.dot(*b).abs() > 1e-6 {
                    return Err(Error::invalid("rotation rows are not orthogonal"));
                }
            }
        }
        Ok(())
    }

    /// Camera looking at `target` from `eye`, with +y as the world up axis.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        fx: f64,
        fy: f64,
        width: u16,
        height: u16,
    ) -> CameraModel {
        let forward = (target - eye).normalized();
        let world_up = Vec3::new(0.0, 1.0, 0.0);
        let right = forward.cross(world_up).normalized();
        let down = forward.cross(right).normalized(); // +y in image space
        let rotation = [
            right.x, right.y, right.z,
            down.x, down.y, down.z,
            forward.x, forward.y, forward.z,
        ];
        let t = -Vec3::new(
            right.dot(eye),
            down.dot(eye),
            forward.dot(eye),
        );
        CameraModel {
            fx,
            fy,
            cx: f64::from(width) / 2.0,
            cy: f64::from(height) / 2.0,
            rotation: rotation.map(|v| v),
            translation: [t.x, t.y, t.z],
            width,
            height,
        }
    }

    pub fn center(&self) -> Vec3 {
        // origin = -R^T t
        let r = &self.rotation;
        let t = &self.translation;
        -Vec3::new(
            r[0] * t[0] + r[3] * t[1] + r[6] * t[2],
            r[1] * t[0] + r[4] * t[1] + r[7] * t[2],
            r[2] * t[0] + r[5] * t[1] + r[8] * t[2],
        )
    }

    /// World-space unit ray direction through pixel (x + ox, y + oy).
    pub fn ray_direction(&self, x: f64, y: f64) -> Vec3 {
        let dc = Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        let r = &self.rotation;
        Vec3::new(
            r[0] * dc.x + r[3] * dc.y + r[6] * dc.z,
            r[1] * dc.x + r[4] * dc.y + r[7] * dc.z,
            r[2] * dc.x + r[5] * dc.y + r[8] * dc.z,
        )
        .normalized()
    }

    /// Ray through pixel `(x + ox, y + oy)` at segment-local time `t`.
    pub fn pixel_ray(&self, x: u16, y: u16, ox: f64, oy: f64, view: usize, t: f64) -> crate::field::Ray {
        crate::field::Ray {
            origin: self.center(),
            direction: self.ray_direction(f64::from(x) + ox, f64::from(y) + oy),
            pixel: (x, y),
            view,
            t,
        }
    }

    /// Projects a world point to pixel coordinates (no bounds check).
    pub fn project(&self, p: Vec3) -> (f64, f64) {
        let r = &self.rotation;
        let cam = Vec3::new(
            r[0] * p.x + r[1] * p.y + r[2] * p.z + self.translation[0],
            r[3] * p.x + r[4] * p.y + r[5] * p.z + self.translation[1],
            r[6] * p.x + r[7] * p.y + r[8] * p.z + self.translation[2],
        );
        (self.fx * cam.x / cam.z + self.cx, self.fy * cam.y / cam.z + self.cy)
    }
}

/// Time-dependent placement of a scene object.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Static { position: [f64; 3] },
    /// position + velocity * t (t in seconds)
    Linear { position: [f64; 3], velocity: [f64; 3] },
    /// circle of `radius` around `center` in the XZ plane,
    /// angle = phase + omega * t (radians)
    Orbit {
        center: [f64; 3],
        radius: f64,
        omega: f64,
        phase: f64,
    },
}

impl Trajectory {
    pub fn position(&self, t_sec: f64) -> Vec3 {
        match self {
            Trajectory::Static { position } => Vec3::from(*position),
            Trajectory::Linear { position, velocity } => {
                Vec3::from(*position) + Vec3::from(*velocity) * t_sec
            }
            Trajectory::Orbit {
                center,
                radius,
                omega,
                phase,
            } => {
                let a = phase + omega * t_sec;
                Vec3::from(*center) + Vec3::new(radius * a.cos(), 0.0, radius * a.sin())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneObject {
    Sphere {
        trajectory: Trajectory,
        radius: f64,
        color: [f64; 3],
    },
    /// axis-aligned box of the given half extents, centered on its trajectory
    Box {
        trajectory: Trajectory,
        half_extents: [f64; 3],
        color: [f64; 3],
    },
}

/// A parametric dynamic scene: flat-colored objects on analytic
/// trajectories over per-view constant backgrounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyScene {
    pub objects: Vec<SceneObject>,
    /// per-view background color; view k uses backgrounds[k % len]
    pub backgrounds: Vec<[f64; 3]>,
    /// trajectory domain end, seconds
    pub t_end: f64,
}

impl ToyScene {
    pub fn background_color(&self, view: usize) -> [f64; 3] {
        self.backgrounds[view % self.backgrounds.len()]
    }

    pub fn background_frame(&self, view: usize, width: u16, height: u16) -> IntensityFrame {
        let c = self.background_color(view);
        let mut f = IntensityFrame::zeros(usize::from(width), usize::from(height), 3);
        for y in 0..f.height() {
            for x in 0..f.width() {
                for ch in 0..3 {
                    f.set(x, y, ch, c[ch]);
                }
            }
        }
        f
    }
}

/// Event simulator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub fps: f64,
    pub c_pos: f64,
    pub c_neg: f64,
    /// noise events per pixel per second
    #[serde(default)]
    pub noise_rate: f64,
    /// probability that a noise event has polarity +1
    #[serde(default = "default_half")]
    pub noise_p_pos: f64,
    pub seed: u64,
}

fn default_half() -> f64 {
    0.5
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        Thresholds::new(self.c_pos, self.c_neg)?;
        if self.noise_rate < 0.0 {
            return Err(Error::invalid("noise_rate must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.noise_p_pos) {
            return Err(Error::invalid("noise_p_pos must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds::new(self.c_pos, self.c_neg).expect("validated")
    }
}

fn ray_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.dot(oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

fn ray_aabb(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let (o, d, l, h) = (origin.get(axis), dir.get(axis), lo.get(axis), hi.get(axis));
        if d.abs() < 1e-15 {
            if o < l || o > h {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut a, mut b) = ((l - o) * inv, (h - o) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t_near = t_near.max(a);
        t_far = t_far.min(b);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 1e-9 {
        None
    } else if t_near > 1e-9 {
        Some(t_near)
    } else {
        Some(t_far)
    }
}

/// Color seen along a world-space ray at scene time `t_sec`, or the given
/// background if nothing is hit.
pub fn trace_ray(scene: &ToyScene, origin: Vec3, dir: Vec3, t_sec: f64, background: [f64; 3]) -> [f64; 3] {
    let mut best: Option<(f64, [f64; 3])> = None;
    for obj in &scene.objects {
        let hit = match obj {
            SceneObject::Sphere {
                trajectory,
                radius,
                color,
            } => ray_sphere(origin, dir, trajectory.position(t_sec), *radius).map(|d| (d, *color)),
            SceneObject::Box {
                trajectory,
                half_extents,
                color,
            } => {
                let c = trajectory.position(t_sec);
                let he = Vec3::from(*half_extents);
                ray_aabb(origin, dir, c - he, c + he).map(|d| (d, *color))
            }
        };
        if let Some((d, col)) = hit {
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, col));
            }
        }
    }
    best.map_or(background, |(_, c)| c)
}

/// Renders the scene from one camera at time `t_sec` (linear RGB, rays
/// through pixel centers).
pub fn render_frame(
    scene: &ToyScene,
    camera: &CameraModel,
    view: usize,
    t_sec: f64,
) -> Result<IntensityFrame> {
    if !(0.0..=scene.t_end).contains(&t_sec) {
        return Err(Error::invalid(format!(
            "t = {t_sec} outside scene domain [0, {}]",
            scene.t_end
        )));
    }
    let bg = scene.background_color(view);
    let origin = camera.center();
    let w = usize::from(camera.width);
    let h = usize::from(camera.height);
    let mut frame = IntensityFrame::zeros(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let dir = camera.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            let c = trace_ray(scene, origin, dir, t_sec, bg);
            for ch in 0..3 {
                frame.set(x, y, ch, c[ch]);
            }
        }
    }
    Ok(frame)
}

/// Converts a time-sorted sequence of mosaiced (single-channel) frames into
/// events: per pixel, a reference log intensity advances by whole
/// threshold quanta; each inter-frame step emits `floor(|dlog| / C)` events
/// with timestamps placed by constant-slope interpolation.
pub fn frames_to_events(
    frames: &[(u64, IntensityFrame)],
    thresholds: &Thresholds,
    eps: f64,
) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::invalid("need at least 2 frames"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be > 0"));
    }
    let (w, h) = (frames[0].1.width(), frames[0].1.height());
    for (i, (t, f)) in frames.iter().enumerate() {
        if f.channels() != 1 || f.width() != w || f.height() != h {
            return Err(Error::invalid(format!("frame {i} has mismatched shape")));
        }
        if i > 0 && *t < frames[i - 1].0 {
            return Err(Error::invalid(format!("frames not time-sorted at index {i}")));
        }
    }
    let mut reference: Vec<f64> = frames[0].1.data().iter().map(|&v| log_clamped(v, eps)).collect();
    let mut events: Vec<Event> = Vec::new();
    for pair in frames.windows(2) {
        let (t_a, _) = &pair[0];
        let (t_b, frame_b) = &pair[1];
        let dt = t_b - t_a;
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let target = log_clamped(frame_b.get(x, y, 0), eps);
                let diff = target - reference[idx];
                let (p, c) = if diff >= 0.0 {
                    (1i8, thresholds.c_pos)
                } else {
                    (-1i8, thresholds.c_neg)
                };
                let n = (diff.abs() / c).floor() as u64;
                if n == 0 {
                    continue;
                }
                // constant log slope from the reference level to the target:
                // the k-th quantum level is crossed at fraction k*C/|diff|
                for k in 1..=n {
                    let frac = k as f64 * c / diff.abs();
                    let t = t_a + (frac * dt as f64).round() as u64;
                    events.push(Event::new(t.min(*t_b), x as u16, y as u16, p));
                }
                reference[idx] += f64::from(p) * n as f64 * c;
            }
        }
    }
    let mut stream = EventStream::new(w as u16, h as u16, events);
    stream.sort();
    Ok(stream)
}

/// Merges Poisson-timed i.i.d. noise events into the stream over
/// `[0, duration_us)`. Per-pixel RNG streams derive from the seed, so the
/// result is deterministic regardless of iteration strategy.
pub fn inject_noise(stream: &EventStream, config: &SimConfig, duration_us: u64) -> Result<EventStream> {
    config.validate()?;
    if config.noise_rate == 0.0 || duration_us == 0 {
        return Ok(stream.clone());
    }
    let lambda = config.noise_rate * duration_us as f64 * 1e-6;
    let poisson = Poisson::new(lambda).map_err(|e| Error::invalid(format!("bad noise rate: {e}")))?;
    let mut merged = stream.events.clone();
    for y in 0..stream.height {
        for x in 0..stream.width {
            let px = u64::from(y) * u64::from(stream.width) + u64::from(x);
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ px.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x24_7F),
            );
            let n = poisson.sample(&mut rng) as u64;
            for _ in 0..n {
                let t = rng.gen_range(0..duration_us);
                let p = if rng.gen_bool(config.noise_p_pos) { 1 } else { -1 };
                merged.push(Event::new(t, x, y, p));
            }
        }
    }
    let mut out = EventStream::new(stream.width, stream.height, merged);
    out.sort();
    Ok(out)
}

/// Renders dense frames at `fps`, mosaics them with the Bayer pattern and
/// converts to an event stream covering `[0, t_end]`. Returns the stream
/// and the frame timestamps in microseconds.
pub fn simulate_view_events(
    scene: &ToyScene,
    camera: &CameraModel,
    view: usize,
    config: &SimConfig,
    pattern: &crate::events::BayerPattern,
) -> Result<EventStream> {
    config.validate()?;
    let n_frames = (scene.t_end * config.fps).round() as u64;
    if n_frames < 1 {
        return Err(Error::invalid("scene too short for the configured fps"));
    }
    let mut frames = Vec::with_capacity(n_frames as usize + 1);
    for i in 0..=n_frames {
        let t_sec = i as f64 / config.fps;
        let t_us = (t_sec * 1e6).round() as u64;
        let rgb = render_frame(scene, camera, view, t_sec.min(scene.t_end))?;
        let mono = crate::events::bayer_select(&rgb, pattern)?;
        frames.push((t_us, mono));
    }
    let stream = frames_to_events(&frames, &config.thresholds(), LOG_EPS)?;
    let duration = (scene.t_end * 1e6).round() as u64;
    inject_noise(&stream, config, duration)
}
