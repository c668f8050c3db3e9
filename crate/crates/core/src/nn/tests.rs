use ndarray::{Array2, ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::gradcheck::{check_gradients, GradCheckConfig};
use crate::tensor::{Tape, Var};

fn randn(rng: &mut StdRng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen::<f64>() * 2.0 - 1.0)
}

fn spread_sum(tape: &mut Tape<f64>, x: Var) -> Var {
    let n = tape.value(x).len();
    let mut weights = ArrayD::from_elem(tape.value(x).raw_dim(), 0.0);
    for (i, w) in weights.iter_mut().enumerate() {
        *w = 0.25 + 0.75 * (i as f64) / (n.max(2) - 1) as f64;
    }
    let weighted = tape.mul_const(x, weights);
    tape.sum_all(weighted)
}

mod embedding_tests {
    use super::*;

    #[test]
    fn shipped_spec_dims() {
        assert_eq!(FrequencyEmbeddingSpec::position().output_dim(), 63);
        assert_eq!(FrequencyEmbeddingSpec::direction().output_dim(), 33);
        assert_eq!(FrequencyEmbeddingSpec::depth().output_dim(), 11);
    }

    #[test]
    fn zero_input_gives_zero_sins_one_coses() {
        let spec = FrequencyEmbeddingSpec::position();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
        let e = frequency_embed(&mut tape, x, &spec);
        assert_eq!(tape.shape(e), &[2, 63]);
        let v = tape.value(e);
        // layout: [x (3), sin (3), cos (3)] * L
        for row in 0..2 {
            for i in 0..3 {
                assert_eq!(v[[row, i]], 0.0);
            }
            for l in 0..10 {
                for i in 0..3 {
                    assert_eq!(v[[row, 3 + 6 * l + i]], 0.0, "sin slot");
                    assert_eq!(v[[row, 3 + 6 * l + 3 + i]], 1.0, "cos slot");
                }
            }
        }
    }

    #[test]
    fn scalar_half_l1_closed_form() {
        let spec = FrequencyEmbeddingSpec {
            input_dim: 1,
            num_frequencies: 1,
            include_input: true,
        };
        let out = frequency_embed_values(&[0.5f64], &spec);
        assert_eq!(out.len(), 3);
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-12); // sin(pi/2)
        assert!(out[2].abs() < 1e-12); // cos(pi/2)
    }

    #[test]
    fn tape_matches_value_path_and_dim_formula() {
        let mut rng = StdRng::seed_from_u64(1);
        for &(dim, l) in &[(1usize, 5usize), (3, 5), (3, 10), (2, 4)] {
            let spec = FrequencyEmbeddingSpec::new(dim, l);
            assert_eq!(spec.output_dim(), dim * (2 * l + 1));
            let rows = randn(&mut rng, &[4, dim]);
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(rows.clone());
            let e = frequency_embed(&mut tape, x, &spec);
            for r in 0..4 {
                let row: Vec<f64> = (0..dim).map(|c| rows[[r, c]]).collect();
                let want = frequency_embed_values(&row, &spec);
                for (c, w) in want.iter().enumerate() {
                    assert!((tape.value(e)[[r, c]] - w).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn embedding_gradients() {
        let mut rng = StdRng::seed_from_u64(2);
        let x = randn(&mut rng, &[3, 3]);
        let spec = FrequencyEmbeddingSpec::new(3, 4);
        let report = check_gradients(&[x], &GradCheckConfig::default(), |t, vs| {
            let e = frequency_embed(t, vs[0], &spec);
            spread_sum(t, e)
        });
        assert!(report.passes(1e-3), "{:?}", report.worst);
    }
}

mod mlp_tests {
    use super::*;

    #[test]
    fn zero_final_layer_outputs_bias() {
        let mlp = Mlp::new("f", MlpSpec::new(vec![4, 8, 3]));
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(3);
        mlp.init(&mut store, &mut rng);
        store.get_mut("f.1.w").fill(0.0);
        let bias = ndarray::arr1(&[0.3, -0.7, 2.0]).into_dyn();
        *store.get_mut("f.1.b") = bias.clone();
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(randn(&mut rng, &[5, 4]));
        let y = mlp.forward(&mut tape, &bound, x);
        for r in 0..5 {
            for c in 0..3 {
                assert_eq!(tape.value(y)[[r, c]], bias[[c]]);
            }
        }
    }

    #[test]
    fn identity_single_layer() {
        let mlp = Mlp::new("id", MlpSpec::new(vec![3, 3]));
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(4);
        mlp.init(&mut store, &mut rng);
        *store.get_mut("id.0.w") = ndarray::Array2::<f64>::eye(3).into_dyn();
        store.get_mut("id.0.b").fill(0.0);
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape);
        let x = randn(&mut rng, &[4, 3]);
        let v = tape.leaf(x.clone());
        let y = mlp.forward(&mut tape, &bound, v);
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn two_layer_gradients() {
        let mlp = Mlp::new("g", MlpSpec::new(vec![4, 6, 2]));
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(5);
        mlp.init(&mut store, &mut rng);
        let x = randn(&mut rng, &[5, 4]);
        let names: Vec<String> = store.names().cloned().collect();
        let mut inputs = vec![x];
        for n in &names {
            inputs.push(store.get(n).clone());
        }
        let report = check_gradients(&inputs, &GradCheckConfig::default(), |t, vs| {
            let map: std::collections::BTreeMap<String, Var> = names
                .iter()
                .cloned()
                .zip(vs[1..].iter().copied())
                .collect();
            let bound = BoundParams::from_map(map);
            let y = mlp.forward(t, &bound, vs[0]);
            spread_sum(t, y)
        });
        assert!(report.passes(1e-3), "{:?}", report.worst);
    }
}

mod attention_tests {
    use super::*;

    fn identity_attention(name: &str, heads: usize, d: usize) -> (MultiHeadAttention, ParameterStore<f64>) {
        let block = MultiHeadAttention::new(name, AttentionConfig::new(heads, d), d);
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(7);
        block.init(&mut store, &mut rng);
        for which in ["wq", "wk", "wv", "wo"] {
            *store.get_mut(&format!("{name}.{which}")) =
                Array2::<f64>::eye(d).into_dyn();
        }
        (block, store)
    }

    /// Explicit per-head loop oracle.
    fn loop_oracle(
        store: &ParameterStore<f64>,
        name: &str,
        heads: usize,
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
    ) -> Array2<f64> {
        let d = q.ncols();
        let dv = v.ncols();
        let (dk, dvh) = (d / heads, dv / heads);
        let wq = store.get(&format!("{name}.wq"));
        let wk = store.get(&format!("{name}.wk"));
        let wv = store.get(&format!("{name}.wv"));
        let wo = store.get(&format!("{name}.wo"));
        let matmul = |a: &Array2<f64>, b: &ArrayD<f64>| -> Array2<f64> {
            let bn = b.shape()[1];
            let mut out = Array2::zeros((a.nrows(), bn));
            for i in 0..a.nrows() {
                for j in 0..bn {
                    for s in 0..a.ncols() {
                        out[(i, j)] += a[(i, s)] * b[[s, j]];
                    }
                }
            }
            out
        };
        let qp = matmul(q, wq);
        let kp = matmul(k, wk);
        let vp = matmul(v, wv);
        let mut concat = Array2::<f64>::zeros((q.nrows(), dv));
        for h in 0..heads {
            for i in 0..q.nrows() {
                // logits over keys
                let mut logits = vec![0.0f64; k.nrows()];
                for (j, l) in logits.iter_mut().enumerate() {
                    for s in 0..dk {
                        *l += qp[(i, h * dk + s)] * kp[(j, h * dk + s)];
                    }
                    *l /= (dk as f64).sqrt();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..k.nrows() {
                    let w = exps[j] / denom;
                    for s in 0..dvh {
                        concat[(i, h * dvh + s)] += w * vp[(j, h * dvh + s)];
                    }
                }
            }
        }
        matmul(&concat, wo)
    }

    #[test]
    fn identical_keys_give_uniform_mean_of_projected_values() {
        let d = 6;
        let (block, mut store) = identity_attention("a", 1, d);
        let mut rng = StdRng::seed_from_u64(8);
        // random W_v, identity W_o: output = mean of projected V rows
        *store.get_mut("a.wv") = randn(&mut rng, &[d, d]);
        let q = randn(&mut rng, &[3, d]);
        let k_row = randn(&mut rng, &[1, d]);
        let mut k = ArrayD::zeros(IxDyn(&[4, d]));
        for r in 0..4 {
            for c in 0..d {
                k[[r, c]] = k_row[[0, c]];
            }
        }
        let v = randn(&mut rng, &[4, d]);

        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape);
        let (vq, vk, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v.clone()));
        let out = block.forward(&mut tape, &bound, vq, vk, vv, 1, 3, 4);

        // oracle: mean over rows of v @ wv
        let wv = store.get("a.wv");
        let mut mean = vec![0.0f64; d];
        for r in 0..4 {
            for c in 0..d {
                for s in 0..d {
                    mean[c] += v[[r, s]] * wv[[s, c]] / 4.0;
                }
            }
        }
        for i in 0..3 {
            for c in 0..d {
                assert!(
                    (tape.value(out)[[i, c]] - mean[c]).abs() < 1e-9,
                    "row {i} col {c}"
                );
            }
        }
    }

    #[test]
    fn single_key_value_passes_projected_value_through() {
        let d = 4;
        let (block, store) = identity_attention("b", 1, d);
        let mut rng = StdRng::seed_from_u64(9);
        let q = randn(&mut rng, &[5, d]);
        let k = randn(&mut rng, &[1, d]);
        let v = randn(&mut rng, &[1, d]);
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape);
        let (vq, vk, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v.clone()));
        let (out, weights) = block.forward_with_weights(&mut tape, &bound, vq, vk, vv, 1, 5, 1);
        for i in 0..5 {
            assert!((tape.value(weights)[[0, i, 0]] - 1.0).abs() < 1e-12);
            for c in 0..d {
                assert!((tape.value(out)[[i, c]] - v[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_identity_matches_plain_sdpa() {
        let d = 5;
        let (block, store) = identity_attention("c", 1, d);
        let mut rng = StdRng::seed_from_u64(10);
        let q = randn(&mut rng, &[4, d]);
        let k = randn(&mut rng, &[6, d]);
        let v = randn(&mut rng, &[6, d]);
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape);
        let q2 = q.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let k2 = k.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v2 = v.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (vq, vk, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v));
        let out = block.forward(&mut tape, &bound, vq, vk, vv, 1, 4, 6);
        let want = loop_oracle(&store, "c", 1, &q2, &k2, &v2);
        for i in 0..4 {
            for c in 0..d {
                assert!((tape.value(out)[[i, c]] - want[(i, c)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn multi_head_random_matches_loop_oracle() {
        let (heads, d) = (2, 8);
        let block = MultiHeadAttention::new("d", AttentionConfig::new(heads, d), d);
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(11);
        block.init(&mut store, &mut rng);
        for _ in 0..20 {
            let q2: Array2<f64> = Array2::from_shape_simple_fn((4, d), || rng.gen::<f64>() - 0.5);
            let k2: Array2<f64> = Array2::from_shape_simple_fn((4, d), || rng.gen::<f64>() - 0.5);
            let v2: Array2<f64> = Array2::from_shape_simple_fn((4, d), || rng.gen::<f64>() - 0.5);
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape);
            let (vq, vk, vv) = (
                tape.leaf(q2.clone().into_dyn()),
                tape.leaf(k2.clone().into_dyn()),
                tape.leaf(v2.clone().into_dyn()),
            );
            let out = block.forward(&mut tape, &bound, vq, vk, vv, 1, 4, 4);
            let want = loop_oracle(&store, "d", heads, &q2, &k2, &v2);
            for i in 0..4 {
                for c in 0..d {
                    assert!(
                        (tape.value(out)[[i, c]] - want[(i, c)]).abs() < 1e-6,
                        "mismatch at ({i}, {c})"
                    );
                }
            }
        }
    }

    #[test]
    fn weights_normalize_and_kv_permutation_is_noop() {
        let (heads, d) = (4, 8);
        let block = MultiHeadAttention::new("e", AttentionConfig::new(heads, d), d);
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(12);
        block.init(&mut store, &mut rng);
        let q = randn(&mut rng, &[6, d]);
        let k = randn(&mut rng, &[5, d]);
        let v = randn(&mut rng, &[5, d]);

        let run = |k: &ArrayD<f64>, v: &ArrayD<f64>| {
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape);
            let (vq, vk, vv) = (
                tape.leaf(q.clone()),
                tape.leaf(k.clone()),
                tape.leaf(v.clone()),
            );
            let (out, w) = block.forward_with_weights(&mut tape, &bound, vq, vk, vv, 1, 6, 5);
            (tape.value(out).clone(), tape.value(w).clone())
        };
        let (out, w) = run(&k, &v);
        for b in 0..heads {
            for i in 0..6 {
                let sum: f64 = (0..5).map(|j| w[[b, i, j]]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!((0..5).all(|j| w[[b, i, j]] >= 0.0));
            }
        }
        // permute (K, V) token rows jointly
        let perm = [3usize, 0, 4, 1, 2];
        let mut kp = ArrayD::zeros(IxDyn(&[5, d]));
        let mut vp = ArrayD::zeros(IxDyn(&[5, d]));
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..d {
                kp[[dst, c]] = k[[src, c]];
                vp[[dst, c]] = v[[src, c]];
            }
        }
        let (out_p, _) = run(&kp, &vp);
        for i in 0..6 {
            for c in 0..d {
                assert!((out[[i, c]] - out_p[[i, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_gradients() {
        let (heads, d) = (2, 4);
        let block = MultiHeadAttention::new("f", AttentionConfig::new(heads, d), d);
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(13);
        block.init(&mut store, &mut rng);
        let q = randn(&mut rng, &[6, d]);
        let k = randn(&mut rng, &[6, d]);
        let v = randn(&mut rng, &[6, d]);
        let names: Vec<String> = store.names().cloned().collect();
        let mut inputs = vec![q, k, v];
        for n in &names {
            inputs.push(store.get(n).clone());
        }
        let report = check_gradients(&inputs, &GradCheckConfig::default(), |t, vs| {
            let map: std::collections::BTreeMap<String, Var> = names
                .iter()
                .cloned()
                .zip(vs[3..].iter().copied())
                .collect();
            let bound = BoundParams::from_map(map);
            let out = block.forward(t, &bound, vs[0], vs[1], vs[2], 1, 6, 6);
            spread_sum(t, out)
        });
        assert!(report.passes(1e-3), "{:?}", report.worst);
    }
}

mod extractor_tests {
    use super::*;

    #[test]
    fn shape_contract_64_to_16() {
        let ext = FeatureExtractor2d::new("g1", [8, 16, 32]);
        let mut store = ParameterStore::<f32>::new();
        let mut rng = StdRng::seed_from_u64(14);
        ext.init(&mut store, &mut rng);
        let mut tape = Tape::<f32>::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 64, 64]), || {
            rng.gen::<f32>()
        }));
        let y = ext.forward(&mut tape, &bound, x);
        assert_eq!(tape.shape(y), &[1, 32, 16, 16]);
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let ext = FeatureExtractor2d::new("g1", [4, 8, 8]);
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(15);
        ext.init(&mut store, &mut rng);
        for (name, arr) in store.iter_mut() {
            if name.ends_with(".b") || name.ends_with(".beta") {
                arr.fill(0.0);
            }
        }
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 16, 16])));
        let y = ext.forward(&mut tape, &bound, x);
        assert!(tape.value(y).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn extractor_gradient_wrt_input() {
        let ext = FeatureExtractor2d::new("g1", [4, 4, 4]);
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(16);
        ext.init(&mut store, &mut rng);
        let x = randn(&mut rng, &[1, 3, 8, 8]);
        let report = check_gradients(&[x], &GradCheckConfig::default(), |t, vs| {
            let bound = store.bind(t);
            let y = ext.forward(t, &bound, vs[0]);
            t.mean_all(y)
        });
        assert!(report.passes(1e-3), "{:?}", report.worst);
    }
}

mod unet_tests {
    use super::*;

    #[test]
    fn tiny_volume_gradcheck_and_finiteness() {
        let unet = Unet3d::new("g2", 4, 2, 3);
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(17);
        unet.init(&mut store, &mut rng);
        let x = randn(&mut rng, &[1, 4, 8, 8, 8]);
        {
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape);
            let v = tape.leaf(x.clone());
            let y = unet.forward(&mut tape, &bound, v);
            assert_eq!(tape.shape(y), &[1, 3, 8, 8, 8]);
            assert!(tape.value(y).iter().all(|v| v.is_finite()));
        }
        // gradients w.r.t. input and a weight tensor
        let w0 = store.get("g2.enc0.w").clone();
        let report = check_gradients(&[x, w0], &GradCheckConfig::default(), |t, vs| {
            let mut st = store.clone();
            *st.get_mut("g2.enc0.w") = t.value(vs[1]).clone();
            // bind all except enc0.w, then use the leaf for it
            let mut map = std::collections::BTreeMap::new();
            for (name, arr) in st.iter() {
                if name == "g2.enc0.w" {
                    map.insert(name.clone(), vs[1]);
                } else {
                    map.insert(name.clone(), t.leaf(arr.clone()));
                }
            }
            let bound = bound_from_map(map);
            let y = unet.forward(t, &bound, vs[0]);
            t.mean_all(y)
        });
        assert!(report.passes(1e-3), "{:?}", report.worst);
    }

    fn bound_from_map(map: std::collections::BTreeMap<String, Var>) -> BoundParams {
        BoundParams::from_map(map)
    }

    #[test]
    fn rejects_indivisible_dims() {
        let unet = Unet3d::new("g2", 2, 2, 2);
        let mut store = ParameterStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(18);
        unet.init(&mut store, &mut rng);
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 2, 6, 8, 8])));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            unet.forward(&mut tape, &bound, x)
        }));
        assert!(result.is_err(), "6 is not divisible by 8; must reject");
    }
}
