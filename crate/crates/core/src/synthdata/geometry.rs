//! Analytic primitives and ray intersection.

use serde::{Deserialize, Serialize};

use super::SynthError;

pub type Vec3 = [f64; 3];

/// Tolerance on `‖direction‖ = 1`.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Intersections closer than this are ignored.
const MIN_HIT: f64 = 1e-9;

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: Vec3, max: Vec3 },
}

impl Shape {
    /// Smallest positive intersection distance along a unit ray.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = sub(origin, center);
                let b = dot3(dir, oc);
                let c = dot3(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > MIN_HIT)
            }
            Shape::Cuboid { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for k in 0..3 {
                    if dir[k] == 0.0 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[k];
                    let (mut t0, mut t1) = ((min[k] - origin[k]) * inv, (max[k] - origin[k]) * inv);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                }
                if t_far < t_near || t_far <= MIN_HIT {
                    None
                } else if t_near > MIN_HIT {
                    Some(t_near)
                } else {
                    // Origin inside the box: the exit face is the first positive hit.
                    Some(t_far)
                }
            }
        }
    }

    /// Outward surface normal at a point on the surface.
    pub fn normal_at(&self, p: Vec3) -> Vec3 {
        match *self {
            Shape::Sphere { center, .. } => normalize(sub(p, center)),
            Shape::Cuboid { min, max } => {
                let mut best = (f64::INFINITY, [0.0, 0.0, 0.0]);
                for k in 0..3 {
                    for (plane, sign) in [(min[k], -1.0), (max[k], 1.0)] {
                        let d = (p[k] - plane).abs();
                        if d < best.0 {
                            let mut n = [0.0; 3];
                            n[k] = sign;
                            best = (d, n);
                        }
                    }
                }
                best.1
            }
        }
    }

    /// Centre and radius of a bounding circle in the ground (x, z) plane.
    pub fn footprint(&self) -> ([f64; 2], f64) {
        match *self {
            Shape::Sphere { center, radius } => ([center[0], center[2]], radius),
            Shape::Cuboid { min, max } => {
                let (hx, hz) = ((max[0] - min[0]) / 2.0, (max[2] - min[2]) / 2.0);
                ([min[0] + hx, min[2] + hz], (hx * hx + hz * hz).sqrt())
            }
        }
    }
}

/// A coloured, labelled scene object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub class_id: usize,
    pub color: Vec3,
}

pub(super) fn check_unit(direction: Vec3) -> Result<(), SynthError> {
    let n = norm(direction);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(SynthError::NonUnitDirection(n));
    }
    Ok(())
}

/// Nearest hit along the ray as `(distance, primitive index)`.
pub fn raycast_indexed(origin: Vec3, direction: Vec3, primitives: &[Primitive]) -> Result<Option<(f64, usize)>, SynthError> {
    check_unit(direction)?;
    Ok(primitives
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.shape.intersect(origin, direction).map(|t| (t, i)))
        .fold(None, |best: Option<(f64, usize)>, hit| match best {
            Some(b) if b.0 <= hit.0 => Some(b),
            _ => Some(hit),
        }))
}

/// Smallest positive intersection distance with any primitive.
pub fn raycast(origin: Vec3, direction: Vec3, primitives: &[Primitive]) -> Result<Option<f64>, SynthError> {
    Ok(raycast_indexed(origin, direction, primitives)?.map(|(t, _)| t))
}
