//! Minimal 3-vector math, rays and the cylinder reconstruction volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    #[inline]
    pub fn get(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// One camera ray: world origin and unit direction, source pixel and view,
/// segment-local time in [-1, 1].
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (u16, u16),
    pub view: usize,
    pub t: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, pixel: (u16, u16), view: usize, t: f64) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("ray direction must be unit length"));
        }
        Ok(Ray {
            origin,
            direction,
            pixel,
            view,
            t,
        })
    }
}

/// Vertical cylinder `x^2 + z^2 <= r^2`, `y_min <= y <= y_max`
/// approximating the intersection of all camera frustums.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderBounds {
    pub radius: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl CylinderBounds {
    pub fn new(radius: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid("cylinder radius must be positive"));
        }
        if !(y_max > y_min) {
            return Err(Error::invalid("cylinder needs y_max > y_min"));
        }
        Ok(CylinderBounds { radius, y_min, y_max })
    }

    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        p.x * p.x + p.z * p.z <= self.radius * self.radius && p.y >= self.y_min && p.y <= self.y_max
    }
}

/// Entry/exit depths of a ray through the capped cylinder, or `None` on a
/// miss. Depth is clamped to start at 0 for origins inside the volume.
pub fn clip_sample_range(ray: &Ray, bounds: &CylinderBounds) -> Option<(f64, f64)> {
    let (o, d) = (ray.origin, ray.direction);

    // radial part: |o_xz + t d_xz|^2 = r^2
    let a = d.x * d.x + d.z * d.z;
    let b = o.x * d.x + o.z * d.z;
    let c = o.x * o.x + o.z * o.z - bounds.radius * bounds.radius;
    let (mut t0, mut t1);
    if a < 1e-15 {
        // parallel to the axis: inside or outside for all t
        if c > 0.0 {
            return None;
        }
        t0 = f64::NEG_INFINITY;
        t1 = f64::INFINITY;
    } else {
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        t0 = (-b - sq) / a;
        t1 = (-b + sq) / a;
    }

    // y slab
    if d.y.abs() < 1e-15 {
        if o.y < bounds.y_min || o.y > bounds.y_max {
            return None;
        }
    } else {
        let inv = 1.0 / d.y;
        let (mut ya, mut yb) = ((bounds.y_min - o.y) * inv, (bounds.y_max - o.y) * inv);
        if ya > yb {
            std::mem::swap(&mut ya, &mut yb);
        }
        t0 = t0.max(ya);
        t1 = t1.min(yb);
    }

    t0 = t0.max(0.0);
    if t1 <= t0 {
        return None;
    }
    Some((t0, t1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray(origin: Vec3, dir: Vec3) -> Ray {
        Ray::new(origin, dir.normalized(), (0, 0), 0, 0.0).unwrap()
    }

    fn bounds() -> CylinderBounds {
        CylinderBounds::new(1.0, -1.0, 1.0).unwrap()
    }

    #[test]
    fn perpendicular_ray_through_axis_has_chord_2r() {
        let r = ray(Vec3::new(-5.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let (near, far) = clip_sample_range(&r, &bounds()).unwrap();
        assert!((far - near - 2.0).abs() < 1e-12);
        assert!((near - 4.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_ray_outside_misses() {
        let r = ray(Vec3::new(2.0, -5.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        assert!(clip_sample_range(&r, &bounds()).is_none());
    }

    #[test]
    fn origin_inside_clamps_entry_to_zero() {
        let r = ray(Vec3::new(0.2, 0.1, -0.1), Vec3::new(0.3, 0.1, 1.0));
        let (near, _) = clip_sample_range(&r, &bounds()).unwrap();
        assert_eq!(near, 0.0);
    }

    #[test]
    fn caps_limit_the_exit() {
        // straight down the axis: exit at the bottom cap
        let r = ray(Vec3::new(0.0, 5.0, 0.0), Vec3::new(0.0, -1.0, 0.0));
        let (near, far) = clip_sample_range(&r, &bounds()).unwrap();
        assert!((near - 4.0).abs() < 1e-12);
        assert!((far - 6.0).abs() < 1e-12);
    }

    #[test]
    fn ray_above_caps_misses() {
        let r = ray(Vec3::new(-5.0, 2.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        assert!(clip_sample_range(&r, &bounds()).is_none());
    }

    #[test]
    fn non_unit_direction_rejected() {
        assert!(Ray::new(Vec3::default(), Vec3::new(1.0, 1.0, 0.0), (0, 0), 0, 0.0).is_err());
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(CylinderBounds::new(0.0, -1.0, 1.0).is_err());
        assert!(CylinderBounds::new(1.0, 1.0, 1.0).is_err());
    }
}
