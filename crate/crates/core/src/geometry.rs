//! Deterministic multi-view geometry: pinhole cameras, plane-sweep
//! homographies, NDC parameterization of the reference frustum, reprojection,
//! and ray generation/sampling.
//!
//! Everything here is pure `f64` math with no learned state. Conventions:
//! world-to-camera poses (`x_cam = R x + t`), pixel (0, 0) at the top-left
//! pixel center, camera looks down +z.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("point behind camera (depth {0})")]
    BehindCamera(f64),
}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Result<Matrix3<f64>, GeometryError> {
        self.matrix()
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidCamera("non-invertible K".into()))
    }

    /// Intrinsics of the same camera at `1/s` resolution (feature-map space).
    pub fn scaled(&self, s: usize) -> CameraIntrinsics {
        let f = s as f64;
        CameraIntrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / s,
            height: self.height / s,
        }
    }
}

/// World-to-camera rigid pose: `x_cam = R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        CameraPose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        CameraPose::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        let err = (r * r.transpose() - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation not orthonormal (|RR^T - I| = {err:.2e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation determinant {} != 1",
                r.determinant()
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn camera_to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    /// Pose looking from `eye` toward `target` with the given up hint.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right).normalize();
        // rows of R are the camera axes expressed in world coordinates
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye;
        CameraPose::new(rotation, translation)
    }
}

/// One input image with calibration and depth bounds.
#[derive(Debug, Clone)]
pub struct CameraView {
    /// H x W x 3, values in [0, 1], row-major.
    pub image: ndarray::Array3<f32>,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub near: f64,
    pub far: f64,
}

impl CameraView {
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        if !(0.0 < self.near && self.near < self.far) {
            return Err(GeometryError::InvalidCamera(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        let (h, w, _c) = self.image.dim();
        if h != self.intrinsics.height || w != self.intrinsics.width {
            return Err(GeometryError::InvalidCamera(format!(
                "image {}x{} does not match intrinsics {}x{}",
                h, w, self.intrinsics.height, self.intrinsics.width
            )));
        }
        Ok(())
    }
}

/// A world-space ray with unit direction and depth bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

/// The depth planes swept in front of the reference view.
#[derive(Debug, Clone)]
pub struct SweepPlaneSet {
    pub reference_view: usize,
    pub depths: Vec<f64>,
    /// Unit plane normal in the reference camera frame.
    pub normal: Vector3<f64>,
}

impl SweepPlaneSet {
    /// `count` fronto-parallel planes placed uniformly in the inverse-depth
    /// NDC coordinate, endpoints at near and far.
    pub fn uniform(reference_view: usize, near: f64, far: f64, count: usize) -> Self {
        assert!(count >= 2, "need at least two sweep planes");
        let depths = (0..count)
            .map(|i| {
                let s = i as f64 / (count - 1) as f64;
                depth_from_ndc(s, near, far)
            })
            .collect();
        SweepPlaneSet {
            reference_view,
            depths,
            normal: Vector3::new(0.0, 0.0, 1.0),
        }
    }
}

/// NDC depth coordinate: inverse-depth linear with near -> 0, far -> 1.
pub fn ndc_from_depth(z: f64, near: f64, far: f64) -> f64 {
    (1.0 / z - 1.0 / near) / (1.0 / far - 1.0 / near)
}

pub fn depth_from_ndc(s: f64, near: f64, far: f64) -> f64 {
    1.0 / (1.0 / near + s * (1.0 / far - 1.0 / near))
}

/// Homography mapping homogeneous reference pixels to source pixels for the
/// fronto-parallel plane at depth `z` (reference camera frame).
///
/// With relative pose (R_rel, t_rel) of the source camera expressed in the
/// reference frame this is `K_i (R_rel + t_rel n^T / z) K_r^{-1}`.
pub fn homography_matrix(
    src_k: &CameraIntrinsics,
    src_pose: &CameraPose,
    ref_k: &CameraIntrinsics,
    ref_pose: &CameraPose,
    normal: &Vector3<f64>,
    z: f64,
) -> Result<Matrix3<f64>, GeometryError> {
    if z <= 0.0 {
        return Err(GeometryError::Domain(format!(
            "plane depth must be positive, got {z}"
        )));
    }
    let k_ref_inv = ref_k.inverse_matrix()?;
    src_k.inverse_matrix()?; // reject non-invertible source K as well
    let r_rel = src_pose.rotation * ref_pose.rotation.transpose();
    let t_rel = src_pose.translation - r_rel * ref_pose.translation;
    let h = src_k.matrix() * (r_rel + t_rel * normal.transpose() / z) * k_ref_inv;
    Ok(h)
}

/// Apply a homography to pixel (u, v); returns source pixel coordinates.
/// A vanishing denominator yields a far out-of-range coordinate, which
/// downstream samplers clamp to the image edge.
pub fn apply_homography(h: &Matrix3<f64>, u: f64, v: f64) -> [f64; 2] {
    let p = h * Vector3::new(u, v, 1.0);
    if p.z.abs() < 1e-12 || !p.z.is_finite() {
        return [f64::INFINITY, f64::INFINITY];
    }
    [p.x / p.z, p.y / p.z]
}

/// Source-pixel coordinates for every pixel of a `width x height` reference
/// grid under `h`, row-major.
pub fn warp_coords(h: &Matrix3<f64>, width: usize, height: usize) -> Vec<[f64; 2]> {
    let mut coords = Vec::with_capacity(width * height);
    for v in 0..height {
        for u in 0..width {
            coords.push(apply_homography(h, u as f64, v as f64));
        }
    }
    coords
}

/// Warp an H' x W' x C feature grid by `h` with edge padding: each output
/// pixel bilinearly samples the input at its homography image, clamped to the
/// input extent.
pub fn warp_feature_map(
    src: &ndarray::Array3<f32>,
    h: &Matrix3<f64>,
) -> ndarray::Array3<f32> {
    let (height, width, channels) = src.dim();
    let coords = warp_coords(h, width, height);
    let mut out = ndarray::Array3::<f32>::zeros((height, width, channels));
    for (i, &[x, y]) in coords.iter().enumerate() {
        let (pu, pv) = (i % width, i / width);
        let sample = bilinear_sample_grid(src, x, y);
        for c in 0..channels {
            out[(pv, pu, c)] = sample[c];
        }
    }
    out
}

/// Bilinear sample of an H x W x C grid at (x, y), clamped to the edge.
pub fn bilinear_sample_grid(grid: &ndarray::Array3<f32>, x: f64, y: f64) -> Vec<f32> {
    let (h, w, c) = grid.dim();
    let xc = if x.is_finite() { x } else { f64::MAX };
    let yc = if y.is_finite() { y } else { f64::MAX };
    let x = xc.clamp(0.0, (w - 1) as f64);
    let y = yc.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    (0..c)
        .map(|ci| {
            let v00 = grid[(y0, x0, ci)];
            let v10 = grid[(y0, x1, ci)];
            let v01 = grid[(y1, x0, ci)];
            let v11 = grid[(y1, x1, ci)];
            let a = v00 * (1.0 - fx) + v10 * fx;
            let b = v01 * (1.0 - fx) + v11 * fx;
            a * (1.0 - fy) + b * fy
        })
        .collect()
}

/// The reference frustum that the geometry volume is indexed by.
#[derive(Debug, Clone)]
pub struct NdcFrame {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub near: f64,
    pub far: f64,
}

impl NdcFrame {
    /// World point -> (u, v, z) in [0, 1]^3. u, v are pixel coordinates over
    /// (width-1, height-1); z is inverse-depth normalized so near -> 0,
    /// far -> 1.
    pub fn to_ndc(&self, x: &Vector3<f64>) -> Result<(f64, f64, f64), GeometryError> {
        let cam = self.pose.world_to_camera(x);
        if cam.z <= 0.0 {
            return Err(GeometryError::BehindCamera(cam.z));
        }
        let u = (self.intrinsics.fx * cam.x / cam.z + self.intrinsics.cx)
            / (self.intrinsics.width - 1) as f64;
        let v = (self.intrinsics.fy * cam.y / cam.z + self.intrinsics.cy)
            / (self.intrinsics.height - 1) as f64;
        Ok((u, v, ndc_from_depth(cam.z, self.near, self.far)))
    }

    pub fn from_ndc(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let depth = depth_from_ndc(z, self.near, self.far);
        let px = u * (self.intrinsics.width - 1) as f64;
        let py = v * (self.intrinsics.height - 1) as f64;
        let cam = Vector3::new(
            (px - self.intrinsics.cx) / self.intrinsics.fx * depth,
            (py - self.intrinsics.cy) / self.intrinsics.fy * depth,
            depth,
        );
        self.pose.camera_to_world(&cam)
    }
}

/// Project a world point into a view. `in_bounds` is true iff the pixel lies
/// inside [0, W-1] x [0, H-1] with positive camera-frame depth.
pub fn reproject_point(x: &Vector3<f64>, view: &CameraView) -> ([f64; 2], bool) {
    project_pinhole(x, &view.intrinsics, &view.pose)
}

pub fn project_pinhole(
    x: &Vector3<f64>,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> ([f64; 2], bool) {
    let cam = pose.world_to_camera(x);
    if cam.z <= 0.0 {
        return ([f64::NAN, f64::NAN], false);
    }
    let u = k.fx * cam.x / cam.z + k.cx;
    let v = k.fy * cam.y / cam.z + k.cy;
    let in_bounds =
        u >= 0.0 && u <= (k.width - 1) as f64 && v >= 0.0 && v <= (k.height - 1) as f64;
    ([u, v], in_bounds)
}

/// Unproject pixel (u, v) at camera-frame depth `z` back into world space.
pub fn unproject_pixel(
    u: f64,
    v: f64,
    z: f64,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Vector3<f64> {
    let cam = Vector3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
    pose.camera_to_world(&cam)
}

/// Rays through the given pixels of a target camera. Directions are unit
/// vectors in world space; near/far are copied from the caller.
pub fn generate_rays(
    k: &CameraIntrinsics,
    pose: &CameraPose,
    near: f64,
    far: f64,
    pixels: &[(f64, f64)],
) -> Vec<Ray> {
    let origin = pose.center();
    let r_t = pose.rotation.transpose();
    pixels
        .iter()
        .map(|&(u, v)| {
            let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let direction = (r_t * dir_cam).normalize();
            Ray {
                origin,
                direction,
                near,
                far,
            }
        })
        .collect()
}

/// Sample depths along a ray, uniformly in the inverse-depth NDC coordinate.
/// Without jitter the endpoints land exactly on near and far; with jitter
/// each depth is drawn uniformly from its stratum bin.
pub fn sample_ray(
    ray: &Ray,
    count: usize,
    jitter: Option<&mut dyn FnMut() -> f64>,
) -> Result<(Vec<f64>, Vec<Vector3<f64>>), GeometryError> {
    if count < 2 {
        return Err(GeometryError::Domain(format!(
            "need at least 2 samples per ray, got {count}"
        )));
    }
    let mut depths = Vec::with_capacity(count);
    match jitter {
        None => {
            for i in 0..count {
                let s = i as f64 / (count - 1) as f64;
                depths.push(depth_from_ndc(s, ray.near, ray.far));
            }
        }
        Some(draw) => {
            for i in 0..count {
                let s = (i as f64 + draw()) / count as f64;
                depths.push(depth_from_ndc(s, ray.near, ray.far));
            }
        }
    }
    let points = depths
        .iter()
        .map(|&z| ray.origin + ray.direction * z)
        .collect();
    Ok((depths, points))
}

/// Stratified jitter driver over an RNG, for use with [`sample_ray`].
pub fn stratified_jitter<R: Rng>(rng: &mut R) -> impl FnMut() -> f64 + '_ {
    move || rng.gen::<f64>()
}
