use avsd_nn::layers::{self, attention_specs};
use avsd_nn::{Graph, NnError, ParameterStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn softmax_of_constant_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0; 4]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn layer_norm_of_constant_is_beta() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 5, vec![3.7; 5]).unwrap());
    let gamma = g.constant(Tensor::vector(vec![2.0, -1.0, 0.5, 4.0, 1.0]));
    let beta = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    for (a, b) in g.value(y).data().iter().zip([0.1, 0.2, 0.3, 0.4, 0.5]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn depthwise_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xt = random(&[6, 3], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let w = g.constant(Tensor::matrix(3, 3, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.0; 3]));
    let y = g.depthwise_conv1d(x, w, b).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn mean_std_pool_of_constant_sequence() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&vec![vec![0.1, -2.0, 5.5]; 7]).unwrap());
    let y = g.mean_std_pool(x).unwrap();
    let v = g.value(y).data();
    for (a, b) in v.iter().zip([0.1, -2.0, 5.5, 0.0, 0.0, 0.0]) {
        assert!((a - b).abs() < 1e-12, "{:?}", v);
    }
}

#[test]
fn conv1d_zero_pads_edges() {
    // kernel [1, 1, 1] on a single channel sums each sample with its neighbours
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.0]));
    let y = g.conv1d(x, w, b, 1).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 6.0, 9.0, 7.0]);
    let y2 = g.conv1d(x, w, b, 2).unwrap();
    assert_eq!(g.value(y2).data(), &[4.0, 6.0, 4.0, 6.0]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{}", msg);
}

#[test]
fn heads_must_divide_model_dim() {
    let store = ParameterStore::init(&attention_specs("a", 6), 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 6]));
    let r = layers::multi_head_attention(&mut g, &store, "a", x, x, x, 4);
    assert!(matches!(r, Err(NnError::Config(_))));
}

#[test]
fn identical_keys_give_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = ParameterStore::init(&attention_specs("a", 8), 1).unwrap();
    let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let q = g.constant(random(&[3, 8], &mut rng));
    let k = g.constant(Tensor::from_rows(&vec![row; 5]).unwrap());
    let v = g.constant(random(&[5, 8], &mut rng));
    let att = layers::multi_head_attention(&mut g, &store, "a", q, k, v, 2).unwrap();
    for w in att.weights {
        for &x in g.value(w).data() {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }
}

#[test]
fn single_key_output_ignores_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParameterStore::init(&attention_specs("a", 4), 1).unwrap();
    let kv = random(&[1, 4], &mut rng);
    let run = |q: Tensor| {
        let mut g = Graph::new();
        let q = g.constant(q);
        let k = g.constant(kv.clone());
        let att = layers::multi_head_attention(&mut g, &store, "a", q, k, k, 2).unwrap();
        for w in &att.weights {
            assert!(g.value(*w).data().iter().all(|&x| x == 1.0));
        }
        g.value(att.output).clone()
    };
    let a = run(random(&[3, 4], &mut rng));
    let b = run(random(&[3, 4], &mut rng));
    assert_eq!(a, b);
    // equals (v·Wv + bv)·Wo + bo
    let wv = store.get("a.wv.w").unwrap();
    let wo = store.get("a.wo.w").unwrap();
    let vproj: Vec<f64> = (0..4).map(|j| (0..4).map(|i| kv.data()[i] * wv.get2(i, j)).sum::<f64>()).collect();
    for j in 0..4 {
        let o: f64 = (0..4).map(|i| vproj[i] * wo.get2(i, j)).sum();
        assert!((a.get2(0, j) - o).abs() < 1e-12);
    }
}

/// Straight-line attention written without the tape or the gemm kernels.
fn attention_oracle(store: &ParameterStore, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<Vec<f64>> {
    let proj = |x: &Tensor, p: &str| -> Vec<Vec<f64>> {
        let w = store.get(&format!("a.{}.w", p)).unwrap();
        let b = store.get(&format!("a.{}.b", p)).unwrap();
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        (0..x.rows())
            .map(|r| {
                (0..d_out)
                    .map(|j| b.data()[j] + (0..d_in).map(|i| x.get2(r, i) * w.get2(i, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (qp, kp, vp) = (proj(q, "wq"), proj(k, "wk"), proj(v, "wv"));
    let d = q.cols();
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; q.rows()];
    for h in 0..heads {
        for (i, qi) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[i][h * dh + c] = e.iter().zip(&vp).map(|(w, vj)| w / z * vj[h * dh + c]).sum();
            }
        }
    }
    let cat = Tensor::from_rows(&cat).unwrap();
    proj(&cat, "wo")
}

#[test]
fn attention_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = ParameterStore::init(&attention_specs("a", 8), 7).unwrap();
    let (qt, kt, vt) = (random(&[3, 8], &mut rng), random(&[4, 8], &mut rng), random(&[4, 8], &mut rng));
    let mut g = Graph::new();
    let q = g.constant(qt.clone());
    let k = g.constant(kt.clone());
    let v = g.constant(vt.clone());
    let out = layers::multi_head_attention(&mut g, &store, "a", q, k, v, 2).unwrap().output;
    let oracle = attention_oracle(&store, &qt, &kt, &vt, 2);
    for (r, row) in oracle.iter().enumerate() {
        for (c, &o) in row.iter().enumerate() {
            assert!((g.value(out).get2(r, c) - o).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
        let y = g.softmax(x).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_invariant_to_joint_kv_permutation(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParameterStore::init(&attention_specs("a", 4), seed).unwrap();
        let (qt, kt, vt) = (random(&[2, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5, 4], &mut rng));
        let mut perm: Vec<usize> = (0..5).collect();
        for i in (1..5).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |k: Tensor, v: Tensor| {
            let mut g = Graph::new();
            let q = g.constant(qt.clone());
            let k = g.constant(k);
            let v = g.constant(v);
            let out = layers::multi_head_attention(&mut g, &store, "a", q, k, v, 2).unwrap().output;
            g.value(out).clone()
        };
        let a = run(kt.clone(), vt.clone());
        let b = run(permute(&kt), permute(&vt));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
