//! The radiance field: density from volume features, rendered depth, the
//! depth+direction query, and the two attention rectification modules
//! (geometric, then appearance in the shipped order).
//!
//! Per ray the pipeline is: trilinear volume features s -> radiance features
//! F_r = M_1(E(x), s) -> density sigma = softplus(M_2(F_r)) -> rendered depth
//! D_hat -> query Q = M_3(E(D_hat) (+) E(d)) -> geometric rectification
//! (keys from s, values F_r) -> appearance rectification (keys from the mean
//! reprojected source-view features, values F_c) -> radiance
//! c = sigmoid(M_4(F, E(D_hat), E(d))).

use nalgebra::Vector3;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::config::{ModelConfig, QueryMode, RectifyOrder};
use crate::costvolume::{sample_volume, VolumeVar, FEATURE_SCALE};
use crate::geometry::{
    bilinear_sample_grid, reproject_point, sample_ray, CameraView, GeometryError, Ray,
};
use crate::nn::{
    frequency_embed, AttentionConfig, BoundParams, FeatureExtractor2d, FrequencyEmbeddingSpec,
    Mlp, MlpSpec, MultiHeadAttention, ParameterStore, Unet3d,
};
use crate::tensor::{Scalar, Tape, Var};

/// A batch of rays with stratifiable depth samples and their world points.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub samples: usize,
    /// [R, N] distances along each unit direction, strictly increasing.
    pub depths: Array2<f64>,
    /// [R, N] sample intervals (last one runs to the ray's far bound).
    pub deltas: Array2<f64>,
    /// [R*N, 3] world points, ray-major.
    pub points: Array2<f64>,
    /// [R, 3] unit directions.
    pub directions: Array2<f64>,
    pub near: f64,
    pub far: f64,
}

impl RayBatch {
    pub fn sample(
        rays: Vec<Ray>,
        samples: usize,
        mut jitter: Option<&mut dyn FnMut() -> f64>,
    ) -> Result<Self, GeometryError> {
        assert!(!rays.is_empty(), "empty ray batch");
        let r = rays.len();
        let (near, far) = (rays[0].near, rays[0].far);
        let mut depths = Array2::<f64>::zeros((r, samples));
        let mut deltas = Array2::<f64>::zeros((r, samples));
        let mut points = Array2::<f64>::zeros((r * samples, 3));
        let mut directions = Array2::<f64>::zeros((r, 3));
        for (i, ray) in rays.iter().enumerate() {
            let draw = jitter.as_mut().map(|j| &mut **j as &mut dyn FnMut() -> f64);
            let (z, pts) = sample_ray(ray, samples, draw)?;
            for k in 0..samples {
                depths[(i, k)] = z[k];
                deltas[(i, k)] = if k + 1 < samples {
                    z[k + 1] - z[k]
                } else {
                    (ray.far - z[k]).max(0.0)
                };
                for a in 0..3 {
                    points[(i * samples + k, a)] = pts[k][a];
                }
            }
            for a in 0..3 {
                directions[(i, a)] = ray.direction[a];
            }
        }
        Ok(RayBatch {
            rays,
            samples,
            depths,
            deltas,
            points,
            directions,
            near,
            far,
        })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Everything produced by a field forward pass, still on the tape.
pub struct FieldVars {
    /// s: [P, volume_channels]
    pub volume_feat: Var,
    /// F_r: [P, C_r]
    pub radiance_feat: Var,
    /// [R, N]
    pub sigma: Var,
    /// [R, N] compositing weights T_k (1 - exp(-sigma_k delta_k))
    pub weights: Var,
    /// [R, N] transmittance T_k
    pub transmittance: Var,
    /// [R, 1] rendered depth
    pub depth: Var,
    /// F after rectification (equals `radiance_feat` for the baseline)
    pub final_feat: Var,
    /// c: [P, 3] per-sample radiance in [0, 1]
    pub colors: Var,
}

/// Query vars shared by both rectification modules and the radiance head.
pub struct QueryVars {
    pub query: Var,
    pub depth_embed: Var,
    pub dir_embed: Var,
}

/// The learned model: feature nets plus field heads. Construction only
/// records names and dims; weights live in a [`ParameterStore`].
pub struct Model {
    pub cfg: ModelConfig,
    pub g1: FeatureExtractor2d,
    pub g2: Unet3d,
    m1: Mlp,
    m2: Mlp,
    m3: Mlp,
    m4: Mlp,
    key_geo: Mlp,
    key_app: Mlp,
    att_geo: MultiHeadAttention,
    att_app: MultiHeadAttention,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Self {
        cfg.validate().expect("invalid model config");
        let cr = cfg.radiance_dim;
        let hidden = cfg.mlp_hidden;
        let att_cfg = AttentionConfig::new(cfg.attention_heads, cr);
        Model {
            g1: FeatureExtractor2d::new("g1", cfg.extractor_channels),
            g2: Unet3d::new("g2", cfg.feat_channels, cfg.unet_base, cfg.volume_channels),
            m1: Mlp::new(
                "m1",
                MlpSpec::new(vec![cfg.position_dim() + cfg.volume_channels, hidden, cr]),
            ),
            m2: Mlp::new("m2", MlpSpec::new(vec![cr, hidden, 1])),
            m3: Mlp::new("m3", MlpSpec::new(vec![cfg.query_input_dim(), hidden, cr])),
            m4: Mlp::new(
                "m4",
                MlpSpec::new(vec![cr + cfg.depth_dim() + cfg.direction_dim(), hidden, 3]),
            ),
            key_geo: Mlp::new("key_geo", MlpSpec::new(vec![cfg.volume_channels, cr])),
            key_app: Mlp::new("key_app", MlpSpec::new(vec![cfg.feat_channels + 3, cr])),
            att_geo: MultiHeadAttention::new("att_geo", att_cfg, cr),
            att_app: MultiHeadAttention::new("att_app", att_cfg, cr),
            cfg,
        }
    }

    /// Parameter name prefixes, one per trainable group.
    pub fn parameter_groups() -> [&'static str; 10] {
        [
            "g1", "g2", "m1", "m2", "m3", "m4", "key_geo", "key_app", "att_geo", "att_app",
        ]
    }

    pub fn init_params<F: Scalar, R: Rng>(&self, rng: &mut R) -> ParameterStore<F> {
        let mut store = ParameterStore::new();
        self.g1.init(&mut store, rng);
        self.g2.init(&mut store, rng);
        self.m1.init(&mut store, rng);
        self.m2.init(&mut store, rng);
        self.m3.init(&mut store, rng);
        self.m4.init(&mut store, rng);
        self.key_geo.init(&mut store, rng);
        self.key_app.init(&mut store, rng);
        self.att_geo.init(&mut store, rng);
        self.att_app.init(&mut store, rng);
        store
    }

    pub fn position_spec(&self) -> FrequencyEmbeddingSpec {
        FrequencyEmbeddingSpec::new(3, self.cfg.position_freqs)
    }

    pub fn direction_spec(&self) -> FrequencyEmbeddingSpec {
        FrequencyEmbeddingSpec::new(3, self.cfg.direction_freqs)
    }

    pub fn depth_spec(&self) -> FrequencyEmbeddingSpec {
        FrequencyEmbeddingSpec::new(1, self.cfg.depth_freqs)
    }

    /// Run G_1 on each view image: [C_1, H/4, W/4] per view.
    pub fn extract_features<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        views: &[CameraView],
    ) -> Vec<Var> {
        views
            .iter()
            .map(|view| {
                let x = tape.leaf(image_to_nchw::<F>(&view.image));
                let f = self.g1.forward(tape, bound, x);
                let s = tape.shape(f).to_vec();
                tape.reshape(f, &[s[1], s[2], s[3]])
            })
            .collect()
    }

    /// F_r = M_1(E(x) (+) s) with s trilinearly sampled from the volume.
    /// Returns (s, F_r); differentiable in the points as well.
    pub fn radiance_features<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        points: Var,
        volume: &VolumeVar,
    ) -> (Var, Var) {
        let s = sample_volume(tape, volume, points);
        let e_x = frequency_embed(tape, points, &self.position_spec());
        let m1_in = tape.concat(&[e_x, s], 1);
        let f_r = self.m1.forward(tape, bound, m1_in);
        (s, f_r)
    }

    /// sigma = softplus(M_2(F_r)), reshaped to [R, N].
    pub fn density<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        f_r: Var,
        rays: usize,
        samples: usize,
    ) -> Var {
        let raw = self.m2.forward(tape, bound, f_r);
        let raw = tape.reshape(raw, &[rays, samples]);
        tape.softplus(raw)
    }

    /// Transmittance, weights, and rendered depth from per-sample densities.
    /// Weights are `T_k (1 - exp(-sigma_k delta_k))` with
    /// `T_k = exp(-sum_{j<k} sigma_j delta_j)`; in strict-paper mode the
    /// interval term is dropped (delta = 1).
    pub fn render_depth<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        sigma: Var,
        batch: &RayBatch,
    ) -> (Var, Var, Var) {
        let (r, n) = (batch.len(), batch.samples);
        assert_eq!(tape.shape(sigma), &[r, n], "sigma shape mismatch");
        let deltas: ArrayD<F> = if self.cfg.strict_paper_delta {
            ArrayD::ones(IxDyn(&[r, n]))
        } else {
            batch.deltas.mapv(F::from_f64).into_dyn()
        };
        let sigd = tape.mul_const(sigma, deltas);
        let accum = tape.cumsum_exclusive_last(sigd);
        let neg_accum = tape.neg(accum);
        let trans = tape.exp(neg_accum);
        let neg_sigd = tape.neg(sigd);
        let esd = tape.exp(neg_sigd);
        let neg_esd = tape.neg(esd);
        let alpha = tape.add_scalar(neg_esd, F::one());
        let weights = tape.mul(trans, alpha);
        let z_const = batch.depths.mapv(F::from_f64).into_dyn();
        let wz = tape.mul_const(weights, z_const);
        let depth = tape.sum_last(wz);
        (weights, trans, depth)
    }

    /// Q = M_3(E(normalized D_hat) (+) E(d)), or direction-only in V mode.
    pub fn build_query<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        depth_hat: Var,
        directions: Var,
        near: f64,
        far: f64,
    ) -> Result<QueryVars, GeometryError> {
        if far <= near {
            return Err(GeometryError::Domain(format!(
                "need near < far for depth normalization, got {near} >= {far}"
            )));
        }
        let shifted = tape.add_scalar(depth_hat, F::from_f64(-near));
        let scaled = tape.scale(shifted, F::from_f64(1.0 / (far - near)));
        let d_norm = tape.clamp01(scaled);
        let depth_embed = frequency_embed(tape, d_norm, &self.depth_spec());
        let dir_embed = frequency_embed(tape, directions, &self.direction_spec());
        let q_in = match self.cfg.query_mode {
            QueryMode::V => dir_embed,
            QueryMode::Vd => tape.concat(&[depth_embed, dir_embed], 1),
        };
        let query = self.m3.forward(tape, bound, q_in);
        Ok(QueryVars {
            query,
            depth_embed,
            dir_embed,
        })
    }

    /// Geometric rectification: the per-ray query is broadcast to one token
    /// per sample, keys are the lifted volume features s_k, values are the
    /// radiance features. Attention mixes across the N sample points.
    pub fn geometric_rectify<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        values: Var,
        volume_feat: Var,
        query: &QueryVars,
        rays: usize,
        samples: usize,
    ) -> Var {
        let keys = self.key_geo.forward(tape, bound, volume_feat);
        let q_rep = tape.repeat_rows(query.query, samples);
        self.att_geo
            .forward(tape, bound, q_rep, keys, values, rays, samples, samples)
    }

    /// Mean reprojected appearance features F_a: for each sample and view,
    /// reproject the point, bilinearly sample the view's feature map (at 1/4
    /// scale) and image, concatenate, and average over views. Out-of-bounds
    /// views contribute a zero vector.
    pub fn appearance_features<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        batch: &RayBatch,
        views: &[CameraView],
        features: &[Var],
    ) -> Var {
        let p = batch.points.nrows();
        let c1 = self.cfg.feat_channels;
        let m = views.len();
        let mut counts = vec![0u32; p];
        let mut per_view: Vec<Var> = Vec::with_capacity(m);
        for (view, &feat) in views.iter().zip(features) {
            let mut coords: Vec<[F; 2]> = Vec::with_capacity(p);
            let mut rgb = ArrayD::<F>::zeros(IxDyn(&[p, 3]));
            let mut mask = ArrayD::<F>::zeros(IxDyn(&[p, c1]));
            for i in 0..p {
                let x = Vector3::new(
                    batch.points[(i, 0)],
                    batch.points[(i, 1)],
                    batch.points[(i, 2)],
                );
                let ([u, v], in_bounds) = reproject_point(&x, view);
                if in_bounds {
                    counts[i] += 1;
                    coords.push([
                        F::from_f64(u / FEATURE_SCALE as f64),
                        F::from_f64(v / FEATURE_SCALE as f64),
                    ]);
                    let px = bilinear_sample_grid(&view.image, u, v);
                    for (ch, &val) in px.iter().enumerate() {
                        rgb[[i, ch]] = F::from_f64(val as f64);
                    }
                    for ch in 0..c1 {
                        mask[[i, ch]] = F::one();
                    }
                } else {
                    coords.push([F::zero(), F::zero()]);
                }
            }
            let sampled = tape.bilinear_sample(feat, coords);
            let masked = tape.mul_const(sampled, mask);
            let rgb_leaf = tape.leaf(rgb);
            per_view.push(tape.concat(&[masked, rgb_leaf], 1));
        }
        let mut sum = per_view[0];
        for &v in &per_view[1..] {
            sum = tape.add(sum, v);
        }
        if self.cfg.visibility_weighted_mean {
            let mut inv = ArrayD::<F>::zeros(IxDyn(&[p, c1 + 3]));
            for i in 0..p {
                let c = F::from_f64(1.0 / counts[i].max(1) as f64);
                for ch in 0..c1 + 3 {
                    inv[[i, ch]] = c;
                }
            }
            tape.mul_const(sum, inv)
        } else {
            tape.scale(sum, F::from_f64(1.0 / m as f64))
        }
    }

    /// Appearance rectification: same attention wiring with keys from the
    /// lifted mean appearance features and values from the input features.
    pub fn appearance_rectify<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        values: Var,
        appearance_feat: Var,
        query: &QueryVars,
        rays: usize,
        samples: usize,
    ) -> Var {
        let keys = self.key_app.forward(tape, bound, appearance_feat);
        let q_rep = tape.repeat_rows(query.query, samples);
        self.att_app
            .forward(tape, bound, q_rep, keys, values, rays, samples, samples)
    }

    /// c = sigmoid(M_4(F (+) E(D_hat) (+) E(d))), per sample.
    pub fn radiance<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        final_feat: Var,
        query: &QueryVars,
        samples: usize,
    ) -> Var {
        let e_depth = tape.repeat_rows(query.depth_embed, samples);
        let e_dir = tape.repeat_rows(query.dir_embed, samples);
        let m4_in = tape.concat(&[final_feat, e_depth, e_dir], 1);
        let raw = self.m4.forward(tape, bound, m4_in);
        tape.sigmoid(raw)
    }

    /// Full field pass over a ray batch.
    pub fn forward_field<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        batch: &RayBatch,
        volume: &VolumeVar,
        views: &[CameraView],
        features: &[Var],
    ) -> Result<FieldVars, GeometryError> {
        let (r, n) = (batch.len(), batch.samples);
        let points = tape.leaf_f64(&batch.points.clone().into_dyn());
        let directions = tape.leaf_f64(&batch.directions.clone().into_dyn());

        let (volume_feat, radiance_feat) =
            self.radiance_features(tape, bound, points, volume);
        let sigma = self.density(tape, bound, radiance_feat, r, n);
        let (weights, transmittance, depth) = self.render_depth(tape, sigma, batch);
        let query =
            self.build_query(tape, bound, depth, directions, batch.near, batch.far)?;

        let appearance = if self.cfg.app_rectify {
            Some(self.appearance_features(tape, batch, views, features))
        } else {
            None
        };

        let final_feat = match (self.cfg.geo_rectify, self.cfg.app_rectify, self.cfg.order) {
            (false, false, _) => radiance_feat,
            (true, false, _) => {
                self.geometric_rectify(tape, bound, radiance_feat, volume_feat, &query, r, n)
            }
            (false, true, _) => self.appearance_rectify(
                tape,
                bound,
                radiance_feat,
                appearance.unwrap(),
                &query,
                r,
                n,
            ),
            (true, true, RectifyOrder::GeometryFirst) => {
                let f_c = self.geometric_rectify(
                    tape,
                    bound,
                    radiance_feat,
                    volume_feat,
                    &query,
                    r,
                    n,
                );
                self.appearance_rectify(tape, bound, f_c, appearance.unwrap(), &query, r, n)
            }
            (true, true, RectifyOrder::AppearanceFirst) => {
                let f_c = self.appearance_rectify(
                    tape,
                    bound,
                    radiance_feat,
                    appearance.unwrap(),
                    &query,
                    r,
                    n,
                );
                self.geometric_rectify(tape, bound, f_c, volume_feat, &query, r, n)
            }
        };

        let colors = self.radiance(tape, bound, final_feat, &query, n);
        Ok(FieldVars {
            volume_feat,
            radiance_feat,
            sigma,
            weights,
            transmittance,
            depth,
            final_feat,
            colors,
        })
    }
}

/// [H, W, 3] image in [0, 1] -> [1, 3, H, W] tape array.
pub fn image_to_nchw<F: Scalar>(image: &ndarray::Array3<f32>) -> ArrayD<F> {
    let (h, w, c) = image.dim();
    assert_eq!(c, 3, "expected RGB image");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[1, 3, h, w]));
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[[0, ch, y, x]] = F::from_f64(image[(y, x, ch)] as f64);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::geometry::{generate_rays, CameraIntrinsics, CameraPose, NdcFrame};
    use crate::tensor::Tape;
    use ndarray::Array3;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = Config::tiny().model;
        cfg.sweep_planes = 8;
        cfg.samples_per_ray = 4;
        cfg
    }

    fn test_views(n: usize) -> Vec<CameraView> {
        let intr = CameraIntrinsics::new(40.0, 40.0, 15.5, 15.5, 32, 32);
        (0..n)
            .map(|i| {
                let angle = (i as f64 - (n as f64 - 1.0) / 2.0) * 0.15;
                let eye = Vector3::new(3.0 * angle.sin(), 0.0, -3.0 * angle.cos());
                let pose = CameraPose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0));
                let mut rng = StdRng::seed_from_u64(100 + i as u64);
                let image = Array3::from_shape_simple_fn((32, 32, 3), || rng.gen::<f32>());
                CameraView {
                    image,
                    intrinsics: intr.clone(),
                    pose,
                    near: 2.0,
                    far: 4.5,
                }
            })
            .collect()
    }

    fn test_volume<F: Scalar>(tape: &mut Tape<F>, cfg: &ModelConfig, view: &CameraView, seed: u64) -> VolumeVar {
        let mut rng = StdRng::seed_from_u64(seed);
        let shape = [cfg.volume_channels, cfg.sweep_planes, 8, 8];
        let values = ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
            F::from_f64(rng.gen::<f64>() - 0.5)
        });
        VolumeVar {
            var: tape.leaf(values),
            frame: NdcFrame {
                intrinsics: view.intrinsics.clone(),
                pose: view.pose.clone(),
                near: view.near,
                far: view.far,
            },
            shape,
        }
    }

    fn test_batch(views: &[CameraView], rays_n: usize, samples: usize) -> RayBatch {
        let target = &views[views.len() / 2];
        let pixels: Vec<(f64, f64)> = (0..rays_n)
            .map(|i| ((5 + 3 * i) as f64 % 31.0, (7 + 5 * i) as f64 % 31.0))
            .collect();
        let rays = generate_rays(
            &target.intrinsics,
            &target.pose,
            target.near,
            target.far,
            &pixels,
        );
        RayBatch::sample(rays, samples, None).unwrap()
    }

    struct Fixture {
        model: Model,
        store: ParameterStore<f64>,
        views: Vec<CameraView>,
    }

    fn fixture(cfg: ModelConfig, seed: u64) -> Fixture {
        let model = Model::new(cfg);
        let mut rng = StdRng::seed_from_u64(seed);
        let store = model.init_params::<f64, _>(&mut rng);
        Fixture {
            model,
            store,
            views: test_views(3),
        }
    }

    #[test]
    fn head_input_widths_match_shipped_dims() {
        let model = Model::new(ModelConfig::default());
        assert_eq!(model.m1.spec.input_dim(), 63 + 8);
        assert_eq!(model.m3.spec.input_dim(), 11 + 33);
        assert_eq!(model.m4.spec.input_dim(), 64 + 11 + 33);
        let mut v_cfg = ModelConfig::default();
        v_cfg.query_mode = QueryMode::V;
        let model_v = Model::new(v_cfg);
        assert_eq!(model_v.m3.spec.input_dim(), 33);
    }

    #[test]
    fn density_closed_forms_and_nonnegativity() {
        let fx = {
            let mut f = fixture(tiny_cfg(), 1);
            // zero M_2 so raw output equals its bias
            f.store.get_mut("m2.0.w").fill(0.0);
            f.store.get_mut("m2.0.b").fill(0.0);
            f.store.get_mut("m2.1.w").fill(0.0);
            f.store.get_mut("m2.1.b").fill(0.0);
            f
        };
        let cr = fx.model.cfg.radiance_dim;
        let run = |bias: f64, fx: &Fixture| {
            let mut store = fx.store.clone();
            store.get_mut("m2.1.b").fill(bias);
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape);
            let f_r = tape.leaf(ArrayD::zeros(IxDyn(&[8, cr])));
            let sigma = fx.model.density(&mut tape, &bound, f_r, 2, 4);
            tape.value(sigma).first().copied().unwrap()
        };
        assert!((run(0.0, &fx) - 2.0f64.ln()).abs() < 1e-12);
        let tiny = run(-20.0, &fx);
        assert!((tiny - 2.0611536e-9).abs() < 1e-12);
        assert!(tiny > 0.0);

        // softplus never goes negative over a wide raw range
        let mut rng = StdRng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let raws = tape.leaf(ArrayD::from_shape_simple_fn(IxDyn(&[100_000]), || {
            (rng.gen::<f64>() - 0.5) * 60.0
        }));
        let sig = tape.softplus(raws);
        assert!(tape.value(sig).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rendered_depth_single_opaque_sample() {
        let fx = fixture(tiny_cfg(), 3);
        let mut batch = test_batch(&fx.views, 1, 4);
        batch.depths = ndarray::arr2(&[[1.0, 2.0, 3.0, 4.0]]);
        batch.deltas = ndarray::arr2(&[[1.0, 1.0, 1.0, 1.0]]);
        let mut tape = Tape::<f64>::new();
        let sigma = tape.leaf(ndarray::arr2(&[[0.0, 30.0, 0.0, 0.0]]).into_dyn());
        let (w, t, d) = fx.model.render_depth(&mut tape, sigma, &batch);
        assert!((tape.value(d)[[0, 0]] - 2.0).abs() < 1e-9);
        assert!((tape.value(w)[[0, 1]] - 1.0).abs() < 1e-9);
        assert!((tape.value(t)[[0, 0]] - 1.0).abs() < 1e-12, "T_1 = 1");
    }

    #[test]
    fn rendered_depth_empty_space_is_zero() {
        let fx = fixture(tiny_cfg(), 4);
        let batch = test_batch(&fx.views, 2, 4);
        let mut tape = Tape::<f64>::new();
        let sigma = tape.leaf(ArrayD::zeros(IxDyn(&[2, 4])));
        let (w, _, d) = fx.model.render_depth(&mut tape, sigma, &batch);
        assert!(tape.value(d).iter().all(|&v| v == 0.0));
        assert!(tape.value(w).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rendered_depth_matches_loop_oracle() {
        let fx = fixture(tiny_cfg(), 5);
        let mut rng = StdRng::seed_from_u64(6);
        let n = 16;
        let mut batch = test_batch(&fx.views, 3, n);
        let mut tape = Tape::<f64>::new();
        let sigma_arr =
            ArrayD::from_shape_simple_fn(IxDyn(&[3, n]), || rng.gen::<f64>() * 2.0);
        let sigma = tape.leaf(sigma_arr.clone());
        // randomize deltas a little
        for v in batch.deltas.iter_mut() {
            *v *= 0.8 + 0.4 * rng.gen::<f64>();
        }
        let (w, _, d) = fx.model.render_depth(&mut tape, sigma, &batch);
        for r in 0..3 {
            let mut t = 1.0;
            let mut depth = 0.0;
            for k in 0..n {
                let sd = sigma_arr[[r, k]] * batch.deltas[(r, k)];
                let alpha = 1.0 - (-sd).exp();
                let wk = t * alpha;
                assert!((tape.value(w)[[r, k]] - wk).abs() < 1e-7);
                depth += wk * batch.depths[(r, k)];
                t *= (-sd).exp();
            }
            assert!((tape.value(d)[[r, 0]] - depth).abs() < 1e-7);
        }
    }

    #[test]
    fn query_depth_normalization_endpoints_and_width() {
        let fx = fixture(tiny_cfg(), 7);
        let batch = test_batch(&fx.views, 2, 4);
        let mut tape = Tape::<f64>::new();
        let bound = fx.store.bind(&mut tape);
        let dirs = tape.leaf_f64(&batch.directions.clone().into_dyn());
        // depth at near and far beyond bounds
        let d_hat = tape.leaf(ndarray::arr2(&[[batch.near], [batch.far + 10.0]]).into_dyn());
        let q = fx
            .model
            .build_query(&mut tape, &bound, d_hat, dirs, batch.near, batch.far)
            .unwrap();
        let dd = fx.model.cfg.depth_dim();
        let e = tape.value(q.depth_embed);
        assert_eq!(e.shape(), &[2, dd]);
        // normalized 0: [0, sin 0.., cos 0..] = [0, 0.., 1..]
        assert_eq!(e[[0, 0]], 0.0);
        for l in 0..fx.model.cfg.depth_freqs {
            assert_eq!(e[[0, 1 + 2 * l]], 0.0);
            assert_eq!(e[[0, 2 + 2 * l]], 1.0);
        }
        // overshoot clamps to 1 before embedding
        assert_eq!(e[[1, 0]], 1.0);
        // M_3 input width on the default config is 11 + 33
        let model_full = Model::new(ModelConfig::default());
        assert_eq!(model_full.m3.spec.input_dim(), 44);
    }

    #[test]
    fn geometric_rectify_single_sample_passes_value_through() {
        let mut cfg = tiny_cfg();
        cfg.attention_heads = 1;
        cfg.samples_per_ray = 2;
        let mut fx = fixture(cfg, 8);
        let cr = fx.model.cfg.radiance_dim;
        for which in ["wq", "wk", "wv", "wo"] {
            *fx.store.get_mut(&format!("att_geo.{which}")) =
                ndarray::Array2::<f64>::eye(cr).into_dyn();
        }
        let mut rng = StdRng::seed_from_u64(9);
        let mut tape = Tape::<f64>::new();
        let bound = fx.store.bind(&mut tape);
        let f_r = tape.leaf(ArrayD::from_shape_simple_fn(IxDyn(&[2, cr]), || {
            rng.gen::<f64>()
        }));
        let s = tape.leaf(ArrayD::from_shape_simple_fn(
            IxDyn(&[2, fx.model.cfg.volume_channels]),
            || rng.gen::<f64>(),
        ));
        let q = tape.leaf(ArrayD::from_shape_simple_fn(IxDyn(&[2, cr]), || {
            rng.gen::<f64>()
        }));
        let query = QueryVars {
            query: q,
            depth_embed: q,
            dir_embed: q,
        };
        // two rays, one sample each: N_kv = 1, so the single value row passes
        // through the (identity) projections untouched
        let f_c = fx
            .model
            .geometric_rectify(&mut tape, &bound, f_r, s, &query, 2, 1);
        for r in 0..2 {
            for c in 0..cr {
                assert!((tape.value(f_c)[[r, c]] - tape.value(f_r)[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_volume_features_give_uniform_mixture() {
        let mut cfg = tiny_cfg();
        cfg.attention_heads = 2;
        let mut fx = fixture(cfg, 10);
        let cr = fx.model.cfg.radiance_dim;
        *fx.store.get_mut("att_geo.wo") = ndarray::Array2::<f64>::eye(cr).into_dyn();
        let mut rng = StdRng::seed_from_u64(11);
        let (r, n) = (2usize, 5usize);
        let mut tape = Tape::<f64>::new();
        let bound = fx.store.bind(&mut tape);
        let f_r_arr = ArrayD::from_shape_simple_fn(IxDyn(&[r * n, cr]), || rng.gen::<f64>());
        let f_r = tape.leaf(f_r_arr.clone());
        // all s_k identical within each ray
        let s_row: Vec<f64> = (0..fx.model.cfg.volume_channels)
            .map(|_| rng.gen::<f64>())
            .collect();
        let s = tape.leaf(ArrayD::from_shape_fn(
            IxDyn(&[r * n, fx.model.cfg.volume_channels]),
            |ix| s_row[ix[1]],
        ));
        let q_arr = ArrayD::from_shape_simple_fn(IxDyn(&[r, cr]), || rng.gen::<f64>());
        let q = tape.leaf(q_arr);
        let query = QueryVars {
            query: q,
            depth_embed: q,
            dir_embed: q,
        };
        let f_c = fx
            .model
            .geometric_rectify(&mut tape, &bound, f_r, s, &query, r, n);
        // oracle: with identical keys the attention averages projected values
        let wv = fx.store.get("att_geo.wv");
        for ray in 0..r {
            let mut mean = vec![0.0f64; cr];
            for k in 0..n {
                for c in 0..cr {
                    for t in 0..cr {
                        mean[c] += f_r_arr[[ray * n + k, t]] * wv[[t, c]] / n as f64;
                    }
                }
            }
            for k in 0..n {
                for c in 0..cr {
                    assert!(
                        (tape.value(f_c)[[ray * n + k, c]] - mean[c]).abs() < 1e-9,
                        "ray {ray} sample {k} channel {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn rectification_is_invariant_to_joint_sample_permutation() {
        let fx = fixture(tiny_cfg(), 12);
        let cr = fx.model.cfg.radiance_dim;
        let vc = fx.model.cfg.volume_channels;
        let mut rng = StdRng::seed_from_u64(13);
        let (r, n) = (2usize, 6usize);
        let f_r_arr = ArrayD::from_shape_simple_fn(IxDyn(&[r * n, cr]), || rng.gen::<f64>());
        let s_arr = ArrayD::from_shape_simple_fn(IxDyn(&[r * n, vc]), || rng.gen::<f64>());
        let q_arr = ArrayD::from_shape_simple_fn(IxDyn(&[r, cr]), || rng.gen::<f64>());
        let perm = [4usize, 2, 0, 5, 1, 3];

        let run = |f_r_in: &ArrayD<f64>, s_in: &ArrayD<f64>| {
            let mut tape = Tape::<f64>::new();
            let bound = fx.store.bind(&mut tape);
            let f_r = tape.leaf(f_r_in.clone());
            let s = tape.leaf(s_in.clone());
            let q = tape.leaf(q_arr.clone());
            let query = QueryVars {
                query: q,
                depth_embed: q,
                dir_embed: q,
            };
            let out = fx
                .model
                .geometric_rectify(&mut tape, &bound, f_r, s, &query, r, n);
            tape.value(out).clone()
        };
        let base = run(&f_r_arr, &s_arr);
        let mut f_p = f_r_arr.clone();
        let mut s_p = s_arr.clone();
        for ray in 0..r {
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..cr {
                    f_p[[ray * n + dst, c]] = f_r_arr[[ray * n + src, c]];
                }
                for c in 0..vc {
                    s_p[[ray * n + dst, c]] = s_arr[[ray * n + src, c]];
                }
            }
        }
        let permuted = run(&f_p, &s_p);
        // queries are identical across tokens, so the output token rows are a
        // set function of (K, V): inverse-permuting reproduces the original
        for ray in 0..r {
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..cr {
                    assert!(
                        (permuted[[ray * n + dst, c]] - base[[ray * n + src, c]]).abs() < 1e-6
                    );
                }
            }
        }
    }

    #[test]
    fn appearance_features_zero_when_invisible_constant_when_shared() {
        let cfg = tiny_cfg();
        let fx = fixture(cfg, 14);
        let c1 = fx.model.cfg.feat_channels;
        // constant-color scene with constant feature maps
        let mut views = test_views(3);
        for view in &mut views {
            view.image.fill(0.25);
        }
        let mut batch = test_batch(&views, 2, 2);
        // point 0: far behind every camera (invisible); others: scene center
        batch.points = Array2::from_shape_fn((4, 3), |(i, a)| {
            if i == 0 {
                [0.0, 0.0, -500.0][a]
            } else {
                [0.05 * i as f64, 0.02, 0.1][a]
            }
        });
        let mut tape = Tape::<f64>::new();
        let feats: Vec<Var> = (0..3)
            .map(|_| tape.leaf(ArrayD::from_elem(IxDyn(&[c1, 8, 8]), 0.7)))
            .collect();
        let f_a = fx.model.appearance_features(&mut tape, &batch, &views, &feats);
        assert_eq!(tape.shape(f_a), &[4, c1 + 3]);
        // invisible point: zero vector
        for c in 0..c1 + 3 {
            assert_eq!(tape.value(f_a)[[0, c]], 0.0);
        }
        // fully visible points in a constant scene: the constant vector
        for i in 1..4 {
            for c in 0..c1 {
                assert!((tape.value(f_a)[[i, c]] - 0.7).abs() < 1e-9);
            }
            for c in c1..c1 + 3 {
                assert!((tape.value(f_a)[[i, c]] - 0.25).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn appearance_samples_match_projection_oracle() {
        let cfg = tiny_cfg();
        let fx = fixture(cfg, 15);
        let c1 = fx.model.cfg.feat_channels;
        let views = test_views(3);
        let mut batch = test_batch(&views, 2, 2);
        batch.points = Array2::from_shape_fn((4, 3), |(i, a)| {
            [0.04 * i as f64 - 0.05, 0.03 * i as f64 - 0.02, 0.05][a]
        });
        let mut rng = StdRng::seed_from_u64(16);
        let feat_arrays: Vec<ArrayD<f64>> = (0..3)
            .map(|_| ArrayD::from_shape_simple_fn(IxDyn(&[c1, 8, 8]), || rng.gen::<f64>()))
            .collect();
        let mut tape = Tape::<f64>::new();
        let feats: Vec<Var> = feat_arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let f_a = fx.model.appearance_features(&mut tape, &batch, &views, &feats);

        // per-point oracle: project with each camera, bilinear sample at 1/4
        // coords, average
        for i in 0..4 {
            let x = Vector3::new(
                batch.points[(i, 0)],
                batch.points[(i, 1)],
                batch.points[(i, 2)],
            );
            let mut acc = vec![0.0f64; c1 + 3];
            for (vi, view) in views.iter().enumerate() {
                let ([u, v], inb) = reproject_point(&x, view);
                if !inb {
                    continue;
                }
                // feature grid in [C, H, W]: sample channel-wise
                let (fu, fv) = (u / 4.0, v / 4.0);
                let grid = &feat_arrays[vi];
                let x0 = (fu.floor() as usize).min(6);
                let y0 = (fv.floor() as usize).min(6);
                let (fx_, fy_) = (fu - x0 as f64, fv - y0 as f64);
                for c in 0..c1 {
                    let v00 = grid[[c, y0, x0]];
                    let v10 = grid[[c, y0, x0 + 1]];
                    let v01 = grid[[c, y0 + 1, x0]];
                    let v11 = grid[[c, y0 + 1, x0 + 1]];
                    acc[c] += (v00 * (1.0 - fx_) + v10 * fx_) * (1.0 - fy_)
                        + (v01 * (1.0 - fx_) + v11 * fx_) * fy_;
                }
                let px = bilinear_sample_grid(&view.image, u, v);
                for c in 0..3 {
                    acc[c1 + c] += px[c] as f64;
                }
            }
            for v in acc.iter_mut() {
                *v /= 3.0;
            }
            for c in 0..c1 + 3 {
                assert!(
                    (tape.value(f_a)[[i, c]] - acc[c]).abs() < 1e-5,
                    "point {i} channel {c}: {} vs {}",
                    tape.value(f_a)[[i, c]],
                    acc[c]
                );
            }
        }
    }

    #[test]
    fn radiance_closed_forms() {
        let mut fx = fixture(tiny_cfg(), 17);
        for i in 0..2 {
            fx.store.get_mut(&format!("m4.{i}.w")).fill(0.0);
            fx.store.get_mut(&format!("m4.{i}.b")).fill(0.0);
        }
        let cr = fx.model.cfg.radiance_dim;
        let run = |bias: f64, fx: &Fixture| {
            let mut store = fx.store.clone();
            store.get_mut("m4.1.b").fill(bias);
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape);
            let f = tape.leaf(ArrayD::zeros(IxDyn(&[4, cr])));
            let e_d = tape.leaf(ArrayD::zeros(IxDyn(&[2, fx.model.cfg.depth_dim()])));
            let e_dir =
                tape.leaf(ArrayD::zeros(IxDyn(&[2, fx.model.cfg.direction_dim()])));
            let query = QueryVars {
                query: f,
                depth_embed: e_d,
                dir_embed: e_dir,
            };
            let c = fx.model.radiance(&mut tape, &bound, f, &query, 2);
            tape.value(c).first().copied().unwrap()
        };
        assert!((run(0.0, &fx) - 0.5).abs() < 1e-12);
        assert!((run(20.0, &fx) - 1.0).abs() < 1e-8);
        assert!(run(-20.0, &fx) < 1e-8);
    }

    #[test]
    fn baseline_wiring_skips_rectification_entirely() {
        let mut cfg = tiny_cfg();
        cfg.geo_rectify = false;
        cfg.app_rectify = false;
        let fx = fixture(cfg, 18);
        let views = fx.views.clone();
        let batch = test_batch(&views, 4, fx.model.cfg.samples_per_ray);
        let mut tape = Tape::<f64>::new();
        let bound = fx.store.bind(&mut tape);
        let volume = test_volume(&mut tape, &fx.model.cfg, &views[0], 19);
        let c1 = fx.model.cfg.feat_channels;
        let feats: Vec<Var> = (0..3)
            .map(|_| tape.leaf(ArrayD::zeros(IxDyn(&[c1, 8, 8]))))
            .collect();
        let out = fx
            .model
            .forward_field(&mut tape, &bound, &batch, &volume, &views, &feats)
            .unwrap();
        assert_eq!(out.final_feat, out.radiance_feat, "baseline passes F_r through");
    }

    #[test]
    fn module_order_changes_the_output() {
        let mut rng_imgs = StdRng::seed_from_u64(20);
        let views: Vec<CameraView> = test_views(3)
            .into_iter()
            .map(|mut v| {
                v.image = Array3::from_shape_simple_fn((32, 32, 3), || rng_imgs.gen::<f32>());
                v
            })
            .collect();
        let run = |order: RectifyOrder| {
            let mut cfg = tiny_cfg();
            cfg.order = order;
            let fx = fixture(cfg, 21);
            let batch = test_batch(&views, 4, fx.model.cfg.samples_per_ray);
            let mut tape = Tape::<f64>::new();
            let bound = fx.store.bind(&mut tape);
            let volume = test_volume(&mut tape, &fx.model.cfg, &views[0], 22);
            let mut rng = StdRng::seed_from_u64(23);
            let c1 = fx.model.cfg.feat_channels;
            let feats: Vec<Var> = (0..3)
                .map(|_| {
                    tape.leaf(ArrayD::from_shape_simple_fn(IxDyn(&[c1, 8, 8]), || {
                        rng.gen::<f64>()
                    }))
                })
                .collect();
            let out = fx
                .model
                .forward_field(&mut tape, &bound, &batch, &volume, &views, &feats)
                .unwrap();
            tape.value(out.colors).clone()
        };
        let ga = run(RectifyOrder::GeometryFirst);
        let ag = run(RectifyOrder::AppearanceFirst);
        assert!(ga.iter().all(|v| v.is_finite()));
        let max_diff = ga
            .iter()
            .zip(ag.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            max_diff > 1e-8,
            "GA and AG wiring should produce different outputs"
        );
    }

    #[test]
    fn radiance_features_gradcheck_wrt_points() {
        use crate::gradcheck::{check_gradients, GradCheckConfig};
        let fx = fixture(tiny_cfg(), 24);
        let views = fx.views.clone();
        let batch = test_batch(&views, 2, 3);
        let report = check_gradients(
            &[batch.points.clone().into_dyn()],
            &GradCheckConfig {
                step: 1e-5,
                ..Default::default()
            },
            |t, vs| {
                let bound = fx.store.bind(t);
                let volume = test_volume(t, &fx.model.cfg, &views[0], 25);
                let (_, f_r) = fx.model.radiance_features(t, &bound, vs[0], &volume);
                t.mean_all(f_r)
            },
        );
        assert!(report.passes(1e-3), "{:?}", report.worst);
    }
}
