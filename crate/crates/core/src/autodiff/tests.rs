use rand::Rng;

use super::gradcheck::{central_diff, relative_error};
use super::*;
use crate::rng::stream;
use crate::tensor::Tensor;

fn random_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor<f64> {
    let len: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
    let mut g = Graph::new();
    let _ = g.param(&store, w);
    let c = g.constant(Tensor::scalar(5.0));
    let grads = g.backward(c, &store);
    assert!(grads.grad(w).data().iter().all(|x| *x == 0.0));
}

#[test]
fn dot_gradient_is_the_other_vector() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::from_vec(&[3], vec![1.0, -1.0, 0.5]));
    let x = Tensor::from_vec(&[3], vec![2.0, 3.0, 4.0]);
    let mut g = Graph::new();
    let wn = g.param(&store, w);
    let xn = g.constant(x.clone());
    let loss = g.dot(wn, xn).unwrap();
    let grads = g.backward(loss, &store);
    assert_eq!(grads.grad(w).data(), x.data());
}

#[test]
fn repeated_param_nodes_accumulate() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let mut g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    let s = g.dot(a, b).unwrap();
    let grads = g.backward(s, &store);
    // d/dw (w . w) = 2w through two separate leaf instantiations.
    assert_eq!(grads.grad(w).data(), &[2.0, 4.0]);
}

#[test]
fn deconv_single_channel_example() {
    let m = Tensor::from_vec(&[1, 1, 1], vec![2.0]);
    let kernel = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
    let out = quad_deconv_forward(&m, &kernel).unwrap();
    assert_eq!(out.dims(), &[2, 2, 1]);
    assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn deconv_zero_kernel_gives_zeros() {
    let mut rng = stream(1);
    let m = random_tensor(&mut rng, &[2, 2, 3]);
    let kernel = Tensor::zeros(&[3, 2, 2, 3]);
    let out = quad_deconv_forward(&m, &kernel).unwrap();
    assert!(out.data().iter().all(|x| *x == 0.0));
}

/// Direct quadruple-loop evaluation of the deconvolution formula.
fn naive_deconv(m: &Tensor<f64>, kernel: &Tensor<f64>) -> Tensor<f64> {
    let (s, c_in) = (m.dims()[0], m.dims()[2]);
    let c_out = kernel.dims()[0];
    let mut out = Tensor::zeros(&[2 * s, 2 * s, c_out]);
    for x in 0..s {
        for y in 0..s {
            for dx in 0..2 {
                for dy in 0..2 {
                    for k in 0..c_out {
                        let mut acc = 0.0;
                        for kp in 0..c_in {
                            acc += kernel.at4(k, dx, dy, kp) * m.at3(x, y, kp);
                        }
                        out.set3(2 * x + dx, 2 * y + dy, k, acc);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn deconv_matches_naive_loop() {
    let mut rng = stream(2);
    for _ in 0..20 {
        let m = random_tensor(&mut rng, &[4, 4, 3]);
        let kernel = random_tensor(&mut rng, &[3, 2, 2, 3]);
        let fast = quad_deconv_forward(&m, &kernel).unwrap();
        let slow = naive_deconv(&m, &kernel);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn deconv_is_linear_in_input_and_kernel() {
    let mut rng = stream(3);
    let m1 = random_tensor(&mut rng, &[2, 2, 2]);
    let m2 = random_tensor(&mut rng, &[2, 2, 2]);
    let kernel = random_tensor(&mut rng, &[2, 2, 2, 2]);
    let (a, b) = (0.7, -1.3);
    let mut mixed = m1.clone();
    mixed.scale(a);
    mixed.axpy(b, &m2);
    let lhs = quad_deconv_forward(&mixed, &kernel).unwrap();
    let mut rhs = quad_deconv_forward(&m1, &kernel).unwrap();
    rhs.scale(a);
    rhs.axpy(b, &quad_deconv_forward(&m2, &kernel).unwrap());
    for (x, y) in lhs.data().iter().zip(rhs.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn deconv_rejects_shape_mismatch() {
    let m = Tensor::<f64>::zeros(&[2, 2, 3]);
    let kernel = Tensor::<f64>::zeros(&[3, 2, 2, 4]);
    assert!(quad_deconv_forward(&m, &kernel).is_err());
    assert!(DeconvKernel::new(Tensor::<f64>::zeros(&[3, 2, 3, 3])).is_err());
}

/// Register zero GRU weights of the standard shapes.
fn zero_gru(store: &mut ParamStore<f64>, n_in: usize, n_hidden: usize) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for name in ["wz", "wr", "wc"] {
        ids.push(store.register(name, Tensor::zeros(&[n_hidden, n_in])));
    }
    for name in ["uz", "ur", "uc"] {
        ids.push(store.register(name, Tensor::zeros(&[n_hidden, n_hidden])));
    }
    for name in ["bz", "br", "bc"] {
        ids.push(store.register(name, Tensor::zeros(&[n_hidden])));
    }
    ids
}

fn gru_nodes(g: &mut Graph<f64>, store: &ParamStore<f64>, ids: &[ParamId]) -> GruCellNodes {
    GruCellNodes {
        w_update: g.param(store, ids[0]),
        w_reset: g.param(store, ids[1]),
        w_cand: g.param(store, ids[2]),
        u_update: g.param(store, ids[3]),
        u_reset: g.param(store, ids[4]),
        u_cand: g.param(store, ids[5]),
        b_update: g.param(store, ids[6]),
        b_reset: g.param(store, ids[7]),
        b_cand: g.param(store, ids[8]),
    }
}

#[test]
fn gru_zero_weights_fixed_points() {
    let mut store = ParamStore::new();
    let ids = zero_gru(&mut store, 3, 4);

    // h_prev = 0 -> output 0.
    let mut g = Graph::new();
    let nodes = gru_nodes(&mut g, &store, &ids);
    let h0 = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
    let h1 = gru_cell(&mut g, &nodes, h0, x).unwrap();
    assert!(g.value(h1).data().iter().all(|v| *v == 0.0));

    // h_prev = v -> 0.5 v (update gate 0.5, candidate 0).
    let mut g = Graph::new();
    let nodes = gru_nodes(&mut g, &store, &ids);
    let v = vec![1.0, -2.0, 0.5, 4.0];
    let h0 = g.constant(Tensor::from_vec(&[4], v.clone()));
    let x = g.constant(Tensor::zeros(&[3]));
    let h1 = gru_cell(&mut g, &nodes, h0, x).unwrap();
    for (out, inp) in g.value(h1).data().iter().zip(&v) {
        assert!((out - 0.5 * inp).abs() < 1e-15);
    }
}

/// Plain-loop GRU on Vec-of-Vec weights, written independently of the graph.
#[allow(clippy::too_many_arguments)]
fn naive_gru(
    wz: &[Vec<f64>], uz: &[Vec<f64>], bz: &[f64],
    wr: &[Vec<f64>], ur: &[Vec<f64>], br: &[f64],
    wc: &[Vec<f64>], uc: &[Vec<f64>], bc: &[f64],
    h: &[f64], x: &[f64],
) -> Vec<f64> {
    let n = h.len();
    let mv = |w: &[Vec<f64>], v: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
    let zx = mv(wz, x);
    let zh = mv(uz, h);
    let z: Vec<f64> = (0..n).map(|i| sig(zx[i] + zh[i] + bz[i])).collect();
    let rx = mv(wr, x);
    let rh = mv(ur, h);
    let r: Vec<f64> = (0..n).map(|i| sig(rx[i] + rh[i] + br[i])).collect();
    let gated: Vec<f64> = (0..n).map(|i| r[i] * h[i]).collect();
    let cx = mv(wc, x);
    let ch = mv(uc, &gated);
    let c: Vec<f64> = (0..n).map(|i| (cx[i] + ch[i] + bc[i]).tanh()).collect();
    (0..n).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect()
}

#[test]
fn gru_matches_naive_loop() {
    let mut rng = stream(7);
    let (n_in, n_hidden) = (3, 5);
    let rand_mat = |rng: &mut rand_chacha::ChaCha12Rng, r: usize, c: usize| -> Vec<Vec<f64>> {
        (0..r)
            .map(|_| (0..c).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect()
    };
    for _ in 0..10 {
        let wz = rand_mat(&mut rng, n_hidden, n_in);
        let wr = rand_mat(&mut rng, n_hidden, n_in);
        let wc = rand_mat(&mut rng, n_hidden, n_in);
        let uz = rand_mat(&mut rng, n_hidden, n_hidden);
        let ur = rand_mat(&mut rng, n_hidden, n_hidden);
        let uc = rand_mat(&mut rng, n_hidden, n_hidden);
        let bz: Vec<f64> = (0..n_hidden).map(|_| rng.gen::<f64>() - 0.5).collect();
        let br: Vec<f64> = (0..n_hidden).map(|_| rng.gen::<f64>() - 0.5).collect();
        let bc: Vec<f64> = (0..n_hidden).map(|_| rng.gen::<f64>() - 0.5).collect();
        let h: Vec<f64> = (0..n_hidden).map(|_| rng.gen::<f64>() - 0.5).collect();
        let x: Vec<f64> = (0..n_in).map(|_| rng.gen::<f64>() - 0.5).collect();

        let flat = |m: &[Vec<f64>]| -> Vec<f64> { m.iter().flatten().copied().collect() };
        let mut store = ParamStore::new();
        let ids = [
            store.register("wz", Tensor::from_vec(&[n_hidden, n_in], flat(&wz))),
            store.register("wr", Tensor::from_vec(&[n_hidden, n_in], flat(&wr))),
            store.register("wc", Tensor::from_vec(&[n_hidden, n_in], flat(&wc))),
            store.register("uz", Tensor::from_vec(&[n_hidden, n_hidden], flat(&uz))),
            store.register("ur", Tensor::from_vec(&[n_hidden, n_hidden], flat(&ur))),
            store.register("uc", Tensor::from_vec(&[n_hidden, n_hidden], flat(&uc))),
            store.register("bz", Tensor::from_vec(&[n_hidden], bz.clone())),
            store.register("br", Tensor::from_vec(&[n_hidden], br.clone())),
            store.register("bc", Tensor::from_vec(&[n_hidden], bc.clone())),
        ];
        let mut g = Graph::new();
        let nodes = gru_nodes(&mut g, &store, &ids);
        let hn = g.constant(Tensor::from_vec(&[n_hidden], h.clone()));
        let xn = g.constant(Tensor::from_vec(&[n_in], x.clone()));
        let out = gru_cell(&mut g, &nodes, hn, xn).unwrap();

        let expect = naive_gru(&wz, &uz, &bz, &wr, &ur, &br, &wc, &uc, &bc, &h, &x);
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_values_match_closed_forms() {
    // Uniform logits over k classes -> ln k.
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::from_vec(&[5], vec![0.3; 5]));
    let ce = g.cross_entropy(logits, 2).unwrap();
    assert!((g.value(ce).item() - (5.0f64).ln()).abs() < 1e-12);

    // kl_div(p, p) = 0; kl_div((1,0), (0.5,0.5)) = ln 2.
    let p = [0.3f64, 0.7];
    assert!(kl_div(&p, &p).abs() < 1e-15);
    let v: f64 = kl_div(&[1.0, 0.0], &[0.5, 0.5]);
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    let inf: f64 = kl_div(&[0.5, 0.5], &[1.0, 0.0]);
    assert!(inf.is_infinite());

    // Graph KL against a fixed target agrees with kl_div after softmax.
    let mut g = Graph::<f64>::new();
    let logits_v = vec![0.2, -1.0, 0.7];
    let logits = g.constant(Tensor::from_vec(&[3], logits_v.clone()));
    let target = Tensor::from_vec(&[3], vec![0.2, 0.3, 0.5]);
    let node = g.kl_from_logits(target.clone(), logits).unwrap();
    let q = crate::tensor::softmax(&logits_v);
    assert!((g.value(node).item() - kl_div(target.data(), &q)).abs() < 1e-12);
}

#[test]
fn softmax_node_is_shift_invariant() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
    let b = g.constant(Tensor::from_vec(&[3], vec![101.0, 102.0, 103.0]));
    let pa = g.softmax(a);
    let pb = g.softmax(b);
    let sum: f64 = g.value(pa).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

/// Finite-difference check for a composite touching every operator.
#[test]
fn every_operator_passes_gradient_check() {
    let mut rng = stream(11);
    let mut store = ParamStore::new();
    let w = store.register("w", random_tensor(&mut rng, &[4, 6]));
    let b = store.register("b", random_tensor(&mut rng, &[4]));
    let m = store.register("m", random_tensor(&mut rng, &[2, 2, 2]));
    let kernel = store.register("k", random_tensor(&mut rng, &[2, 2, 2, 2]));
    let v = store.register("v", random_tensor(&mut rng, &[4]));
    let gru_ids = {
        let mut ids = Vec::new();
        ids.push(store.register("wz", random_tensor(&mut rng, &[3, 4])));
        ids.push(store.register("wr", random_tensor(&mut rng, &[3, 4])));
        ids.push(store.register("wc", random_tensor(&mut rng, &[3, 4])));
        ids.push(store.register("uz", random_tensor(&mut rng, &[3, 3])));
        ids.push(store.register("ur", random_tensor(&mut rng, &[3, 3])));
        ids.push(store.register("uc", random_tensor(&mut rng, &[3, 3])));
        ids.push(store.register("bz", random_tensor(&mut rng, &[3])));
        ids.push(store.register("br", random_tensor(&mut rng, &[3])));
        ids.push(store.register("bc", random_tensor(&mut rng, &[3])));
        ids
    };

    let build = |g: &mut Graph<f64>, store: &ParamStore<f64>| -> NodeId {
        // Deconv -> slices -> weighted sum -> concat with sigmoid/tanh pieces
        // -> affine -> GRU -> softmax pieces -> CE + KL + dot, all summed.
        let mn = g.param(store, m);
        let kn = g.param(store, kernel);
        let out = g.quad_deconv(mn, kn).unwrap(); // (4, 4, 2)
        let f1 = g.slice_vec(out, 0, 3).unwrap();
        let f2 = g.slice_vec(out, 2, 1).unwrap();
        let mix = g.weighted_sum(&[f1, f2], &[0.3, -1.2]).unwrap(); // (2)
        let sg = g.sigmoid(mix);
        let th = g.tanh(mix);
        let pair = g.concat(sg, th); // (4)
        let vn = g.param(store, v);
        let had = g.mul(pair, vn).unwrap();
        let shifted = g.scale_add(had, 1.5, -0.25);
        let sum_in = g.add(shifted, vn).unwrap(); // (4)
        let wn = g.param(store, w);
        // Build a length-6 input from gathered scalars.
        let d1 = g.dot(sum_in, vn).unwrap();
        let parts: Vec<NodeId> = (0..6).map(|_| d1).collect();
        let x6 = g.gather(&parts).unwrap();
        let bn = g.param(store, b);
        let act = g.affine(wn, x6, bn).unwrap(); // (4)
        let gru = GruCellNodes {
            w_update: g.param(store, gru_ids[0]),
            w_reset: g.param(store, gru_ids[1]),
            w_cand: g.param(store, gru_ids[2]),
            u_update: g.param(store, gru_ids[3]),
            u_reset: g.param(store, gru_ids[4]),
            u_cand: g.param(store, gru_ids[5]),
            b_update: g.param(store, gru_ids[6]),
            b_reset: g.param(store, gru_ids[7]),
            b_cand: g.param(store, gru_ids[8]),
        };
        let h0 = g.constant(Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]));
        let h1 = gru_cell(g, &gru, h0, act).unwrap(); // (3)
        let probs = g.softmax(h1);
        let onehot = g.constant(Tensor::from_vec(&[3], vec![0.0, 0.0, 1.0]));
        let picked = g.dot(probs, onehot).unwrap();
        let ce = g.cross_entropy(h1, 1).unwrap();
        let klt = Tensor::from_vec(&[3], vec![0.2, 0.5, 0.3]);
        let kl = g.kl_from_logits(klt, h1).unwrap();
        g.sum(&[ce, kl, picked]).unwrap()
    };

    let mut g = Graph::new();
    let loss = build(&mut g, &store);
    let grads = g.backward(loss, &store);

    let mut picks = Vec::new();
    for (pid, _, t) in store.iter() {
        for idx in 0..t.len().min(3) {
            picks.push((pid, idx));
        }
    }
    let fd = central_diff(&mut store, &picks, 1e-5, |s| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).item()
    });
    for (&(pid, idx), expect) in picks.iter().zip(&fd) {
        let got = grads.grad(pid).data()[idx];
        assert!(
            relative_error(got, *expect) < 1e-4,
            "param {:?}[{idx}]: analytic {got} vs fd {expect}",
            pid
        );
    }
}
