//! Variance-based plane-sweep cost volume and the encoded geometry volume.
//!
//! Source-view feature maps are warped onto fronto-parallel depth planes of
//! the reference view, the per-position variance across views forms the cost,
//! and the 3-D U-Net encodes it into the geometry volume V that the field
//! samples with trilinear interpolation.

use ndarray::{ArrayD, IxDyn};
use nalgebra::Vector3;

use crate::config::ModelConfig;
use crate::geometry::{
    homography_matrix, ndc_from_depth, warp_coords, CameraView, GeometryError, NdcFrame,
    SweepPlaneSet,
};
use crate::nn::{BoundParams, Unet3d};
use crate::tensor::{Scalar, Tape, Var};

/// Feature maps live at 1/4 of image resolution.
pub const FEATURE_SCALE: usize = 4;

/// Per-view warped feature stacks, each [D * H' * W', C] with plane-major row
/// order.
pub struct WarpedFeatureStack {
    pub per_view: Vec<Var>,
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// The encoded geometry volume on the tape, with the NDC frame it is indexed
/// by.
pub struct VolumeVar {
    pub var: Var,
    pub frame: NdcFrame,
    /// [C, D, H', W']
    pub shape: [usize; 4],
}

/// A frozen geometry volume (render-only runs, serialization).
#[derive(Debug, Clone)]
pub struct GeometryVolume {
    /// [C, D, H', W']
    pub values: ArrayD<f32>,
    pub frame: NdcFrame,
}

impl GeometryVolume {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Trilinear lookup at a world point (non-tape reference path). Points
    /// outside the frustum clamp to the boundary cell.
    pub fn sample(&self, x: &Vector3<f64>) -> Vec<f32> {
        let shape = self.values.shape();
        let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let coords = volume_coords(&self.frame, [d, h, w], x);
        let mut tape = Tape::<f32>::new();
        let vol = tape.leaf(self.values.clone());
        let pts = tape.leaf(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 3]),
                coords.iter().map(|&v| v as f32).collect(),
            )
            .unwrap(),
        );
        let out = tape.trilinear_sample(vol, pts);
        (0..c).map(|ci| tape.value(out)[[0, ci]]).collect()
    }
}

/// Voxel coordinates (d, y, x) of a world point in a volume's NDC frame.
/// Behind-camera points clamp to a large depth so the sampler lands on the
/// volume boundary.
pub fn volume_coords(frame: &NdcFrame, dims: [usize; 3], x: &Vector3<f64>) -> [f64; 3] {
    let [d, h, w] = dims;
    let cam = frame.pose.world_to_camera(x);
    let z = cam.z.max(frame.near * 1e-4);
    let inv_z = 1.0 / z;
    let u = frame.intrinsics.fx * cam.x * inv_z + frame.intrinsics.cx;
    let v = frame.intrinsics.fy * cam.y * inv_z + frame.intrinsics.cy;
    let z_ndc = ndc_from_depth(z, frame.near, frame.far);
    let _ = (h, w);
    [
        z_ndc * (d - 1) as f64,
        v / FEATURE_SCALE as f64,
        u / FEATURE_SCALE as f64,
    ]
}

/// Warp every view's feature map onto every sweep plane of the reference
/// view. `features[i]` is a [C, H', W'] tape var at 1/FEATURE_SCALE of the
/// image resolution.
pub fn build_plane_sweep<F: Scalar>(
    tape: &mut Tape<F>,
    features: &[Var],
    views: &[CameraView],
    planes: &SweepPlaneSet,
) -> Result<WarpedFeatureStack, GeometryError> {
    assert!(views.len() >= 2, "plane sweep needs at least two views");
    assert_eq!(features.len(), views.len());
    let r = planes.reference_view;
    assert!(r < views.len(), "reference view out of range");

    let fshape = tape.shape(features[0]).to_vec();
    assert_eq!(fshape.len(), 3, "features must be [C, H', W']");
    let (channels, height, width) = (fshape[0], fshape[1], fshape[2]);

    let ref_k = views[r].intrinsics.scaled(FEATURE_SCALE);
    let ref_pose = &views[r].pose;

    let mut per_view = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        let src_k = view.intrinsics.scaled(FEATURE_SCALE);
        let mut coords: Vec<[F; 2]> = Vec::with_capacity(planes.depths.len() * height * width);
        for &z in &planes.depths {
            let h = homography_matrix(&src_k, &view.pose, &ref_k, ref_pose, &planes.normal, z)?;
            for [x, y] in warp_coords(&h, width, height) {
                coords.push([F::from_f64(x), F::from_f64(y)]);
            }
        }
        per_view.push(tape.bilinear_sample(features[i], coords));
    }
    Ok(WarpedFeatureStack {
        per_view,
        planes: planes.depths.len(),
        height,
        width,
        channels,
    })
}

/// Per-position, per-channel population variance across the M views.
/// Computed in two passes (mean, then squared deviations) so the result is
/// non-negative by construction.
pub fn variance_cost<F: Scalar>(tape: &mut Tape<F>, stack: &WarpedFeatureStack) -> Var {
    let m = stack.per_view.len();
    assert!(m >= 2, "variance needs at least two views");
    let inv_m = F::from_f64(1.0 / m as f64);

    // order-canonical sums keep the cost exactly invariant under view
    // permutations
    let sum = tape.sum_ordered(&stack.per_view);
    let mean = tape.scale(sum, inv_m);

    let sq_devs: Vec<Var> = stack
        .per_view
        .iter()
        .map(|&v| {
            let diff = tape.sub(v, mean);
            tape.square(diff)
        })
        .collect();
    let total = tape.sum_ordered(&sq_devs);
    tape.scale(total, inv_m)
}

/// Run the U-Net over the cost and return the geometry volume var.
pub fn encode_volume<F: Scalar>(
    tape: &mut Tape<F>,
    unet: &Unet3d,
    bound: &BoundParams,
    cost: Var,
    stack_dims: (usize, usize, usize, usize),
    frame: NdcFrame,
) -> VolumeVar {
    let (d, h, w, c) = stack_dims;
    assert_eq!(tape.shape(cost), &[d * h * w, c], "cost shape mismatch");
    let x = tape.reshape(cost, &[d, h, w, c]);
    let x = tape.permute(x, &[3, 0, 1, 2]);
    let x = tape.reshape(x, &[1, c, d, h, w]);
    let v = unet.forward(tape, bound, x);
    let out_c = unet.out_channels;
    let var = tape.reshape(v, &[out_c, d, h, w]);
    VolumeVar {
        var,
        frame,
        shape: [out_c, d, h, w],
    }
}

/// Build the full geometry volume from per-view features (plane sweep +
/// variance + U-Net).
pub fn build_geometry_volume<F: Scalar>(
    tape: &mut Tape<F>,
    features: &[Var],
    views: &[CameraView],
    reference: usize,
    cfg: &ModelConfig,
    unet: &Unet3d,
    bound: &BoundParams,
) -> Result<VolumeVar, GeometryError> {
    let ref_view = &views[reference];
    let planes = SweepPlaneSet::uniform(reference, ref_view.near, ref_view.far, cfg.sweep_planes);
    let stack = build_plane_sweep(tape, features, views, &planes)?;
    let cost = variance_cost(tape, &stack);
    let frame = NdcFrame {
        intrinsics: ref_view.intrinsics.clone(),
        pose: ref_view.pose.clone(),
        near: ref_view.near,
        far: ref_view.far,
    };
    Ok(encode_volume(
        tape,
        unet,
        bound,
        cost,
        (stack.planes, stack.height, stack.width, stack.channels),
        frame,
    ))
}

/// Trilinear lookup of the on-tape volume at world points, differentiable
/// with respect to both the volume and the points.
pub fn sample_volume<F: Scalar>(tape: &mut Tape<F>, vol: &VolumeVar, points: Var) -> Var {
    let [_, d, _h, _w] = vol.shape;
    let frame = &vol.frame;
    let p = tape.shape(points)[0];
    assert_eq!(tape.shape(points), &[p, 3], "points must be [P, 3]");

    // world -> camera: row vectors times R^T plus t
    let rot = &frame.pose.rotation;
    let mut w_arr = ArrayD::<F>::zeros(IxDyn(&[3, 3]));
    for i in 0..3 {
        for j in 0..3 {
            w_arr[[i, j]] = F::from_f64(rot[(j, i)]);
        }
    }
    let t_arr = ArrayD::from_shape_vec(
        IxDyn(&[3]),
        (0..3)
            .map(|i| F::from_f64(frame.pose.translation[i]))
            .collect(),
    )
    .unwrap();
    let w_leaf = tape.leaf(w_arr);
    let t_leaf = tape.leaf(t_arr);
    let cam = tape.linear(points, w_leaf, t_leaf);

    let cx = tape.slice_last(cam, 0, 1);
    let cy = tape.slice_last(cam, 1, 1);
    let cz = tape.slice_last(cam, 2, 1);
    let z_safe = tape.clamp_min(cz, F::from_f64(frame.near * 1e-4));
    let inv_z = tape.recip(z_safe);

    let xn = tape.mul(cx, inv_z);
    let yn = tape.mul(cy, inv_z);
    let k = &frame.intrinsics;
    let scale_px = F::from_f64(1.0 / FEATURE_SCALE as f64);
    let u = tape.scale(xn, F::from_f64(k.fx));
    let u = tape.add_scalar(u, F::from_f64(k.cx));
    let vx = tape.scale(u, scale_px);
    let v = tape.scale(yn, F::from_f64(k.fy));
    let v = tape.add_scalar(v, F::from_f64(k.cy));
    let vy = tape.scale(v, scale_px);

    // inverse-depth NDC, scaled into voxel units
    let inv_near = 1.0 / frame.near;
    let denom = 1.0 / frame.far - inv_near;
    let zn = tape.add_scalar(inv_z, F::from_f64(-inv_near));
    let vz = tape.scale(zn, F::from_f64((d - 1) as f64 / denom));

    let coords = tape.concat(&[vz, vy, vx], 1);
    tape.trilinear_sample(vol.var, coords)
}
