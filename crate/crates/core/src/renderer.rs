//! Volume rendering: alpha compositing along rays and full-image synthesis.
//!
//! `rgb = sum_k T_k (1 - exp(-sigma_k delta_k)) c_k` with transmittance
//! `T_k = exp(-sum_{j<k} sigma_j delta_j)`; rendered depth uses the same
//! weights over the sample depths. Accumulation runs in ascending sample
//! order, and full images are rendered in fixed-size micro-batches so the
//! result is bitwise independent of the requested chunk size.

use ndarray::{Array2, Array3, ArrayD};

use crate::costvolume::{build_geometry_volume, GeometryVolume, VolumeVar};
use crate::field::{Model, RayBatch};
use crate::geometry::{generate_rays, CameraIntrinsics, CameraPose, CameraView, GeometryError};
use crate::nn::ParameterStore;
use crate::tensor::{Scalar, Tape, Var};

/// Rays per internal micro-batch; chunk sizes round up to a multiple of this.
pub const MICRO_BATCH: usize = 128;

/// Per-ray render results, still on the tape.
pub struct RenderVars {
    /// [R, 3]
    pub rgb: Var,
    /// [R, 1]
    pub depth: Var,
    /// [R, N]
    pub weights: Var,
    /// [R, N]
    pub transmittance: Var,
    /// [R, 1] accumulated opacity
    pub opacity: Var,
}

/// Composite per-sample densities and colors into per-ray outputs.
/// `sigma`: [R, N], `colors`: [R*N, 3]; depths/deltas come from the batch.
pub fn composite<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model,
    sigma: Var,
    colors: Var,
    batch: &RayBatch,
) -> RenderVars {
    let (weights, transmittance, depth) = model.render_depth(tape, sigma, batch);
    composite_with_weights(tape, model, weights, transmittance, depth, colors, batch)
}

/// Composite with precomputed weights (the training path, which already has
/// them from the rendered-depth query).
pub fn composite_with_weights<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model,
    weights: Var,
    transmittance: Var,
    depth: Var,
    colors: Var,
    batch: &RayBatch,
) -> RenderVars {
    let (r, n) = (batch.len(), batch.samples);
    assert_eq!(tape.shape(weights), &[r, n]);
    let w3 = tape.reshape(weights, &[r, 1, n]);
    let c3 = tape.reshape(colors, &[r, n, 3]);
    let rgb = tape.bmm(w3, c3);
    let mut rgb = tape.reshape(rgb, &[r, 3]);
    let opacity = tape.sum_last(weights);
    if model.cfg.white_background {
        let miss = tape.neg(opacity);
        let miss = tape.add_scalar(miss, F::one());
        let miss3 = tape.concat(&[miss, miss, miss], 1);
        rgb = tape.add(rgb, miss3);
    }
    RenderVars {
        rgb,
        depth,
        weights,
        transmittance,
        opacity,
    }
}

/// A rendered target view.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    /// H x W x 3 in [0, 1]
    pub rgb: Array3<f32>,
    /// H x W, rendered depth in scene units
    pub depth: Array2<f32>,
    /// H x W accumulated opacity
    pub opacity: Array2<f32>,
}

/// Frozen inputs for repeated ray evaluation against one set of source views.
pub struct FrozenScene {
    pub volume: GeometryVolume,
    pub features: Vec<ArrayD<f32>>,
    pub views: Vec<CameraView>,
}

/// Run the feature extractor and volume encoder once and freeze the results.
pub fn freeze_scene(
    model: &Model,
    store: &ParameterStore<f32>,
    views: &[CameraView],
    reference: usize,
) -> Result<FrozenScene, GeometryError> {
    for view in views {
        view.validate()?;
    }
    let mut tape = Tape::<f32>::new();
    let bound = store.bind(&mut tape);
    let features = model.extract_features(&mut tape, &bound, views);
    let volume = build_geometry_volume(
        &mut tape,
        &features,
        views,
        reference,
        &model.cfg,
        &model.g2,
        &bound,
    )?;
    Ok(FrozenScene {
        volume: GeometryVolume {
            values: tape.value(volume.var).clone(),
            frame: volume.frame.clone(),
        },
        features: features.iter().map(|&f| tape.value(f).clone()).collect(),
        views: views.to_vec(),
    })
}

/// Evaluate one micro-batch of rays against a frozen scene (no gradients).
pub fn render_rays(
    model: &Model,
    store: &ParameterStore<f32>,
    frozen: &FrozenScene,
    batch: &RayBatch,
) -> Result<(Vec<[f32; 3]>, Vec<f32>, Vec<f32>), GeometryError> {
    let mut tape = Tape::<f32>::new();
    let bound = store.bind(&mut tape);
    let volume = VolumeVar {
        var: tape.leaf(frozen.volume.values.clone()),
        frame: frozen.volume.frame.clone(),
        shape: {
            let s = frozen.volume.values.shape();
            [s[0], s[1], s[2], s[3]]
        },
    };
    let features: Vec<Var> = frozen
        .features
        .iter()
        .map(|f| tape.leaf(f.clone()))
        .collect();
    let field = model.forward_field(&mut tape, &bound, batch, &volume, &frozen.views, &features)?;
    let out = composite_with_weights(
        &mut tape,
        model,
        field.weights,
        field.transmittance,
        field.depth,
        field.colors,
        batch,
    );
    let rgb = tape.value(out.rgb);
    let depth = tape.value(out.depth);
    let opacity = tape.value(out.opacity);
    let r = batch.len();
    let mut rgb_out = Vec::with_capacity(r);
    let mut depth_out = Vec::with_capacity(r);
    let mut op_out = Vec::with_capacity(r);
    for i in 0..r {
        rgb_out.push([rgb[[i, 0]], rgb[[i, 1]], rgb[[i, 2]]]);
        depth_out.push(depth[[i, 0]]);
        op_out.push(opacity[[i, 0]]);
    }
    Ok((rgb_out, depth_out, op_out))
}

/// Render a full target view from the source views. The image is evaluated
/// in micro-batches of [`MICRO_BATCH`] rays at absolute ray offsets, so the
/// output is bitwise identical for any `chunk_size`; the chunk size only
/// bounds how much work is scheduled at once.
pub fn render_image(
    model: &Model,
    store: &ParameterStore<f32>,
    views: &[CameraView],
    target_k: &CameraIntrinsics,
    target_pose: &CameraPose,
    near: f64,
    far: f64,
    chunk_size: usize,
) -> Result<RenderedImage, GeometryError> {
    target_k.validate()?;
    target_pose.validate()?;
    let reference = 0;
    let frozen = freeze_scene(model, store, views, reference)?;

    let (h, w) = (target_k.height, target_k.width);
    let mut pixels = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            pixels.push((u as f64, v as f64));
        }
    }
    let rays = generate_rays(target_k, target_pose, near, far, &pixels);

    let mut rgb = Array3::<f32>::zeros((h, w, 3));
    let mut depth = Array2::<f32>::zeros((h, w));
    let mut opacity = Array2::<f32>::zeros((h, w));

    let micro = MICRO_BATCH;
    let _chunk = chunk_size.max(micro); // chunking is memory bounding only
    let mut start = 0;
    while start < rays.len() {
        let end = (start + micro).min(rays.len());
        let batch = RayBatch::sample(
            rays[start..end].to_vec(),
            model.cfg.samples_per_ray,
            None,
        )?;
        let (rgb_rows, depth_rows, op_rows) = render_rays(model, store, &frozen, &batch)?;
        for (i, idx) in (start..end).enumerate() {
            let (y, x) = (idx / w, idx % w);
            rgb[(y, x, 0)] = rgb_rows[i][0];
            rgb[(y, x, 1)] = rgb_rows[i][1];
            rgb[(y, x, 2)] = rgb_rows[i][2];
            depth[(y, x)] = depth_rows[i];
            opacity[(y, x)] = op_rows[i];
        }
        start = end;
    }
    Ok(RenderedImage {
        rgb,
        depth,
        opacity,
    })
}

/// Loop-based reference compositor used by oracle tests and kept independent
/// of the tape implementation.
pub fn composite_reference(
    sigma: &[f64],
    colors: &[[f64; 3]],
    z: &[f64],
    deltas: &[f64],
    white_background: bool,
) -> ([f64; 3], f64, Vec<f64>) {
    let n = sigma.len();
    let mut t = 1.0f64;
    let mut rgb = [0.0f64; 3];
    let mut depth = 0.0f64;
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        let alpha = 1.0 - (-sigma[k] * deltas[k]).exp();
        let w = t * alpha;
        weights.push(w);
        for c in 0..3 {
            rgb[c] += w * colors[k][c];
        }
        depth += w * z[k];
        t *= (-sigma[k] * deltas[k]).exp();
    }
    if white_background {
        let acc: f64 = weights.iter().sum();
        for c in rgb.iter_mut() {
            *c += 1.0 - acc;
        }
    }
    (rgb, depth, weights)
}
