//! Pinhole camera model.

use serde::{Deserialize, Serialize};

use super::geometry::{add, dot3, Vec3};
use super::SynthError;
use crate::autodiff::Matrix;

/// Intrinsics plus the rigid world→camera transform `x_c = R·x_w + t`.
///
/// Camera axes: x right, y down, z forward. Pixel `(row, col)` is centred at
/// image coordinates `(v, u) = (row, col)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub focal: f64,
    /// `(u₀, v₀)` in pixels.
    pub principal_point: [f64; 2],
    /// `(H, W)`.
    pub image_size: [usize; 2],
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

/// A point that lands inside the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub index: usize,
    /// Sub-pixel row, `v`.
    pub row: f64,
    /// Sub-pixel column, `u`.
    pub col: f64,
    pub depth: f64,
}

impl Projected {
    /// Integer pixel containing the projection.
    pub fn pixel(&self) -> (usize, usize) {
        (self.row.round() as usize, self.col.round() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub visible: Vec<Projected>,
    /// Points behind the camera or outside the image.
    pub excluded: usize,
}

impl Calibration {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.focal > 0.0) {
            return Err(SynthError::InvalidCalibration(format!("focal {} must be positive", self.focal)));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(SynthError::InvalidCalibration("image size must be positive".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d = dot3(r[i], r[j]);
                let expected = if i == j { 1.0 } else { 0.0 };
                if (d - expected).abs() > 1e-9 {
                    return Err(SynthError::InvalidCalibration("rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidCalibration(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    /// Camera that sits at `center` looking along world direction
    /// `(sin yaw, 0, cos yaw)`, with world `+y` up.
    pub fn looking_horizontally(focal: f64, image_size: [usize; 2], center: Vec3, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let forward = [s, 0.0, c];
        let down = [0.0, -1.0, 0.0];
        // right = down × forward keeps the frame right-handed.
        let right = [-c, 0.0, s];
        let rotation = [right, down, forward];
        let translation = [-dot3(right, center), -dot3(down, center), -dot3(forward, center)];
        let principal_point = [(image_size[1] as f64 - 1.0) / 2.0, (image_size[0] as f64 - 1.0) / 2.0];
        Self { focal, principal_point, image_size, rotation, translation }
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        add([dot3(r[0], p), dot3(r[1], p), dot3(r[2], p)], self.translation)
    }

    /// Camera centre in world coordinates, `−Rᵀt`.
    pub fn center(&self) -> Vec3 {
        let (r, t) = (&self.rotation, self.translation);
        [0, 1, 2].map(|k| -(r[0][k] * t[0] + r[1][k] * t[1] + r[2][k] * t[2]))
    }

    /// World-frame unit direction through sub-pixel `(row, col)`.
    pub fn pixel_ray(&self, row: f64, col: f64) -> Vec3 {
        let dc = [(col - self.principal_point[0]) / self.focal, (row - self.principal_point[1]) / self.focal, 1.0];
        let n = dot3(dc, dc).sqrt();
        let dc = [dc[0] / n, dc[1] / n, dc[2] / n];
        let r = &self.rotation;
        [0, 1, 2].map(|k| r[0][k] * dc[0] + r[1][k] * dc[1] + r[2][k] * dc[2])
    }

    fn in_bounds(&self, row: f64, col: f64) -> bool {
        let (h, w) = (self.image_size[0] as f64, self.image_size[1] as f64);
        row >= -0.5 && row < h - 0.5 && col >= -0.5 && col < w - 0.5
    }
}

/// Pinhole projection of every row of an `N×3` point matrix.
///
/// `u = u₀ + f·x_c/z_c`, `v = v₀ + f·y_c/z_c`; points with `z_c ≤ 0` or
/// outside the image are dropped and counted.
pub fn project_points(points: &Matrix, calib: &Calibration) -> Projection {
    let mut visible = Vec::new();
    let mut excluded = 0;
    for (index, p) in points.iter_rows().enumerate() {
        let pc = calib.world_to_camera([p[0], p[1], p[2]]);
        if pc[2] <= 0.0 {
            excluded += 1;
            continue;
        }
        let col = calib.principal_point[0] + calib.focal * pc[0] / pc[2];
        let row = calib.principal_point[1] + calib.focal * pc[1] / pc[2];
        if calib.in_bounds(row, col) {
            visible.push(Projected { index, row, col, depth: pc[2] });
        } else {
            excluded += 1;
        }
    }
    Projection { visible, excluded }
}
