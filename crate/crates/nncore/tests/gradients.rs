//! Analytic gradients of every op against central finite differences.

use avsd_nn::gradcheck::{check_parameters, numeric_gradient, relative_error};
use avsd_nn::layers::{self, Activation};
use avsd_nn::{Graph, ParamSpec, ParameterStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces an op output to a scalar through fixed random weights so that
/// every output entry contributes a distinct slope.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Checks the gradient of `op` with respect to each of `inputs`.
fn check_op<F>(label: &str, inputs: Vec<Tensor>, op: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let y = op(&mut g, &vars).unwrap();
        let l = weighted_sum(&mut g, y, 99);
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = op(&mut g, &vars).unwrap();
    let l = weighted_sum(&mut g, y, 99);
    let grads = g.backward(l).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = numeric_gradient(&inputs[i], H, |probe| {
            let mut vals = inputs.clone();
            vals[i] = probe.clone();
            Ok(eval(&vals))
        })
        .unwrap();
        let err = relative_error(analytic.data(), numeric.data());
        assert!(err < TOL, "{} input {}: relative error {:e}", label, i, err);
    }
}

#[test]
fn elementwise_and_matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check_op("matmul", vec![random(&[3, 4], &mut rng), random(&[4, 5], &mut rng)], |g, v| g.matmul(v[0], v[1]));
    check_op("matmul_nt", vec![random(&[3, 4], &mut rng), random(&[6, 4], &mut rng)], |g, v| g.matmul_nt(v[0], v[1]));
    check_op("add", vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |g, v| g.add(v[0], v[1]));
    check_op("sub", vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |g, v| g.sub(v[0], v[1]));
    check_op("mul", vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |g, v| g.mul(v[0], v[1]));
    check_op("add_row", vec![random(&[5, 3], &mut rng), random(&[3], &mut rng)], |g, v| g.add_row(v[0], v[1]));
    check_op("mul_row", vec![random(&[5, 3], &mut rng), random(&[3], &mut rng)], |g, v| g.mul_row(v[0], v[1]));
    check_op("scale", vec![random(&[4, 2], &mut rng)], |g, v| Ok(g.scale(v[0], -1.7)));
    check_op("sigmoid", vec![random(&[4, 3], &mut rng)], |g, v| Ok(g.sigmoid(v[0])));
    check_op("swish", vec![random(&[4, 3], &mut rng)], |g, v| Ok(g.swish(v[0])));
    check_op("relu", vec![random(&[4, 3], &mut rng)], |g, v| Ok(g.relu(v[0])));
}

#[test]
fn normalization_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check_op("softmax", vec![random(&[4, 6], &mut rng)], |g, v| g.softmax(v[0]));
    check_op(
        "layer_norm",
        vec![random(&[4, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check_op("l2_normalize", vec![random(&[3, 5], &mut rng)], |g, v| g.l2_normalize(v[0]));
    check_op("l2_normalize_vec", vec![random(&[7], &mut rng)], |g, v| g.l2_normalize(v[0]));
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for dilation in [1, 2, 3] {
        check_op(
            "conv1d",
            vec![random(&[8, 3], &mut rng), random(&[3, 3, 4], &mut rng), random(&[4], &mut rng)],
            |g, v| g.conv1d(v[0], v[1], v[2], dilation),
        );
    }
    check_op(
        "conv1d_k5_short",
        vec![random(&[3, 2], &mut rng), random(&[5, 2, 3], &mut rng), random(&[3], &mut rng)],
        |g, v| g.conv1d(v[0], v[1], v[2], 1),
    );
    check_op(
        "depthwise_conv1d",
        vec![random(&[7, 4], &mut rng), random(&[5, 4], &mut rng), random(&[4], &mut rng)],
        |g, v| g.depthwise_conv1d(v[0], v[1], v[2]),
    );
}

#[test]
fn pooling_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check_op("mean_rows", vec![random(&[5, 3], &mut rng)], |g, v| g.mean_rows(v[0]));
    check_op("mean_std_pool", vec![random(&[6, 4], &mut rng)], |g, v| g.mean_std_pool(v[0]));
    check_op("concat_cols", vec![random(&[3, 2], &mut rng), random(&[3, 4], &mut rng)], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
    check_op("slice_cols", vec![random(&[3, 6], &mut rng)], |g, v| g.slice_cols(v[0], 2, 3));
    check_op("slice_rows", vec![random(&[6, 3], &mut rng)], |g, v| g.slice_rows(v[0], 1, 4));
    check_op("repeat_rows", vec![random(&[3, 2], &mut rng)], |g, v| g.repeat_rows(v[0], 4));
    check_op("broadcast_rows", vec![random(&[4], &mut rng)], |g, v| g.broadcast_rows(v[0], 5));
    check_op("reshape", vec![random(&[2, 6], &mut rng)], |g, v| g.reshape(v[0], &[3, 4]));
    check_op("mean", vec![random(&[2, 6], &mut rng)], |g, v| Ok(g.mean(v[0])));
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = Tensor::matrix(2, 5, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let logits = random(&[2, 5], &mut rng);
    let bce_labels = labels.clone();
    check_op("bce", vec![logits], move |g, v| {
        let p = g.sigmoid(v[0]);
        g.bce(p, &bce_labels)
    });
    check_op("cross_entropy", vec![random(&[4, 3], &mut rng)], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]));
}

fn block_check(specs: Vec<ParamSpec>, input: Tensor, f: impl Fn(&mut Graph, &ParameterStore, Var) -> Result<Var>) {
    let store = ParameterStore::init(&specs, 17).unwrap();
    let loss = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = f(&mut g, store, x)?;
        let l = weighted_sum(&mut g, y, 5);
        Ok(g.value(l).item().unwrap())
    };
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = f(&mut g, &store, x).unwrap();
    let l = weighted_sum(&mut g, y, 5);
    let grads = g.backward(l).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    let report = check_parameters(&store, &names, &grads, H, usize::MAX, loss).unwrap();
    assert!(report.max_rel_err < TOL, "worst {} rel err {:e}", report.worst, report.max_rel_err);
}

#[test]
fn composite_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    block_check(layers::attention_specs("mha", 8), random(&[5, 8], &mut rng), |g, s, x| {
        Ok(layers::multi_head_attention(g, s, "mha", x, x, x, 2)?.output)
    });
    block_check(layers::transformer_block_specs("blk", 8, 16), random(&[6, 8], &mut rng), |g, s, x| {
        layers::transformer_block(g, s, "blk", x, 2)
    });
    block_check(layers::squeeze_excite_specs("se", 6, 3), random(&[7, 6], &mut rng), |g, s, x| {
        layers::squeeze_excite(g, s, "se", x)
    });
    block_check(layers::feed_forward_specs("ff", 4, 6), random(&[3, 4], &mut rng), |g, s, x| {
        layers::feed_forward(g, s, "ff", x, Activation::Swish)
    });
}

#[test]
fn loss_on_sum_of_wx_gives_broadcast_x() {
    let store = ParameterStore::init(&[ParamSpec::weight("w", 3, 2), ParamSpec::weight("unused", 2, 2)], 1).unwrap();
    let x = Tensor::matrix(1, 3, vec![0.5, -2.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let w = g.param(&store, "w").unwrap();
    let y = g.matmul(xv, w).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    let gw = grads.param("w").unwrap();
    assert_eq!(gw.data(), &[0.5, 0.5, -2.0, -2.0, 3.0, 3.0]);
    assert!(grads.param("unused").is_none());
    let full = grads.complete(&store);
    assert!(full["unused"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let store = ParameterStore::init(&[ParamSpec::weight("w", 2, 2)], 3).unwrap();
    let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let w1 = g.param(&store, "w").unwrap();
    let w2 = g.param(&store, "w").unwrap();
    let a = g.matmul(xv, w1).unwrap();
    let b = g.matmul(xv, w2).unwrap();
    let s = g.add(a, b).unwrap();
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param("w").unwrap().data(), &[2.0, 2.0, 4.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err());
}
