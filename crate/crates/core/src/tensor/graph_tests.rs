use proptest::prelude::*;

use super::*;

fn t64(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
    Tensor::from_fn(shape, f)
}

fn wave(seed: f64) -> impl Fn(usize) -> f64 {
    move |i| ((i as f64 + 1.0) * 0.731 + seed).sin() * 0.8
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(&Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let w = g.constant(&Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = g.constant(&Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, Some(b), 1, 0, 1).unwrap();
    assert_eq!(g.value(y), &[0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn conv_all_ones_center_and_corner() {
    // Hand summation: interior pixel sees 9 ones, a corner sees 4.
    let mut g = Graph::<f64>::new();
    let x = g.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert_eq!(g.value(y)[4], 9.0);
    assert_eq!(g.value(y)[0], 4.0);
    assert_eq!(g.value(y)[1], 6.0);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(&Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(&Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1, 1), Err(crate::Error::Shape(_))));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.param(&Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.item(s), 0.5);

    let x = g.param(&Tensor::scalar(-0.3));
    let r = g.relu(x);
    assert_eq!(g.item(r), 0.0);
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0]);

    let l = g.constant(&Tensor::full(&[1, 1, 4, 5], 0.5));
    let rr = g.constant(&Tensor::full(&[1, 3, 4, 5], 0.2));
    let p = g.mul(l, rr).unwrap();
    assert_eq!(g.shape(p), &[1, 3, 4, 5]);

    let bad = g.constant(&Tensor::zeros(&[1, 2, 4, 5]));
    assert!(g.mul(bad, rr).is_err());
}

#[test]
fn reduce_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::new(vec![3], vec![0.2, 0.4, 0.6]).unwrap());
    let m = g.mean(x).unwrap();
    assert!((g.item(m) - 0.4).abs() < 1e-15);
    g.backward(m).unwrap();
    for &d in g.grad(x).unwrap() {
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }

    let px = g.param(&Tensor::new(vec![1, 3, 1, 1], vec![0.1, 0.9, 0.5]).unwrap());
    let mx = g.max_over_channel(px).unwrap();
    assert_eq!(g.value(mx), &[0.9]);
    let s = g.sum(mx).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(px).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn channel_max_ties_go_to_lowest_index() {
    let mut g = Graph::<f64>::new();
    let px = g.param(&Tensor::new(vec![1, 3, 1, 1], vec![0.7, 0.7, 0.7]).unwrap());
    let mx = g.max_over_channel(px).unwrap();
    let s = g.sum(mx).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(px).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let w = g.param(&Tensor::scalar(2.0));
    let x = g.constant(&Tensor::scalar(3.0));
    let loss = g.mul(w, x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[3.0]);
    assert!(g.grad(x).is_none());

    // two calls without zeroing double the leaf gradient
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[6.0]);
    g.zero_grad();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[3.0]);

    let mut g = Graph::<f64>::new();
    let w = g.param(&Tensor::scalar(0.0));
    let s = g.sigmoid(w);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[0.25]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let w = g.param(&Tensor::zeros(&[2]));
    assert!(g.backward(w).is_err());
}

#[test]
fn shared_subexpression_matches_expanded_tree() {
    // DAG: s = sigmoid(w*x); loss = s*s + s
    let wv = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
    let xv = Tensor::new(vec![3], vec![0.5, 0.2, -0.4]).unwrap();

    let mut g = Graph::<f64>::new();
    let w = g.param(&wv);
    let x = g.constant(&xv);
    let wx = g.mul(w, x).unwrap();
    let s = g.sigmoid(wx);
    let ss = g.mul(s, s).unwrap();
    let t = g.add(ss, s).unwrap();
    let loss = g.sum(t).unwrap();
    g.backward(loss).unwrap();
    let dag = g.grad(w).unwrap().to_vec();

    // Same function with every use of `s` recomputed from scratch.
    let mut g = Graph::<f64>::new();
    let w = g.param(&wv);
    let x = g.constant(&xv);
    let mk = |g: &mut Graph<f64>| {
        let wx = g.mul(w, x).unwrap();
        g.sigmoid(wx)
    };
    let s1 = mk(&mut g);
    let s2 = mk(&mut g);
    let s3 = mk(&mut g);
    let ss = g.mul(s1, s2).unwrap();
    let t = g.add(ss, s3).unwrap();
    let loss = g.sum(t).unwrap();
    g.backward(loss).unwrap();
    let tree = g.grad(w).unwrap();
    for (a, b) in dag.iter().zip(tree) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&t64(&[2, 3, 4], wave(0.0)));
    let s = g.softmax_last(x).unwrap();
    for row in g.value(s).chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}

#[test]
fn sigmoid_gradcheck_linear_is_exact() {
    let w = t64(&[2, 3], wave(0.2));
    let x = t64(&[2, 3], wave(1.0));
    let r = finite_diff_check(
        |g, v| {
            let c = g.constant(&x);
            let p = g.mul(v[0], c)?;
            g.sum(p)
        },
        &[w],
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.max_rel_err < 1e-8);
}

#[test]
fn conv_sigmoid_gradcheck() {
    let x = t64(&[1, 2, 4, 4], wave(0.3));
    let w = t64(&[3, 2, 3, 3], wave(1.7));
    let b = t64(&[3], wave(2.5));
    let r = finite_diff_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
            let s = g.sigmoid(y);
            g.sum(s)
        },
        &[x, w, b],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

fn check(f: impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>, params: &[Tensor<f64>]) {
    let r = finite_diff_check(f, params, 1e-5, 1e-4).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn gradcheck_every_primitive() {
    let a = t64(&[2, 3, 3, 4], wave(0.1));
    let b = t64(&[2, 3, 3, 4], |i| 1.5 + wave(0.9)(i));
    let l1 = t64(&[2, 1, 3, 4], wave(2.2));

    check(|g, v| { let y = g.add(v[0], v[1])?; let y = g.sigmoid(y); g.sum(y) }, &[a.clone(), b.clone()]);
    check(|g, v| { let y = g.sub(v[0], v[1])?; let y = g.sigmoid(y); g.sum(y) }, &[a.clone(), b.clone()]);
    check(|g, v| { let y = g.mul(v[0], v[1])?; g.sum(y) }, &[l1.clone(), b.clone()]);
    check(|g, v| { let y = g.div(v[0], v[1])?; g.sum(y) }, &[a.clone(), b.clone()]);
    check(|g, v| { let y = g.add_scalar(v[0], 0.3); let y = g.scale(y, -1.7); let y = g.sigmoid(y); g.mean(y) }, &[a.clone()]);
    check(|g, v| { let y = g.max_scalar(v[0], 0.05); g.sum(y) }, &[a.clone()]);
    check(|g, v| { let y = g.abs(v[0]); g.sum(y) }, &[a.clone()]);
    check(|g, v| { let y = g.leaky_relu(v[0], 0.2); g.sum(y) }, &[a.clone()]);
    check(|g, v| { let y = g.softplus(v[0]); g.sum(y) }, &[a.clone()]);
    check(|g, v| { let y = g.gelu(v[0]); g.sum(y) }, &[a.clone()]);
    check(|g, v| { let y = g.softmax_last(v[0])?; let y = g.mul(y, v[1])?; g.sum(y) }, &[a.clone(), b.clone()]);
    check(|g, v| { let y = g.max_over_channel(v[0])?; let y = g.mul(y, v[1])?; g.sum(y) }, &[a.clone(), l1.clone()]);
    check(|g, v| { let y = g.concat_channels(&[v[0], v[1]])?; let y = g.sigmoid(y); let y = g.mul(y, y)?; g.sum(y) }, &[a.clone(), l1.clone()]);
    check(|g, v| { let y = g.reshape(v[0], &[6, 12])?; let y = g.softmax_last(y)?; let y = g.mul(y, y)?; g.sum(y) }, &[a.clone()]);
    check(|g, v| { let y = g.diff_x(v[0])?; let y = g.mul(y, y)?; g.mean(y) }, &[a.clone()]);
    check(|g, v| { let y = g.diff_y(v[0])?; let y = g.mul(y, y)?; g.mean(y) }, &[a.clone()]);
    let lw = t64(&[3], |i| 1.0 + 0.1 * i as f64);
    let lb = t64(&[3], wave(4.0));
    check(|g, v| { let y = g.layer_norm_channels(v[0], v[1], v[2], 1e-5)?; let y = g.mul(y, v[3])?; g.sum(y) }, &[a.clone(), lw, lb, b.clone()]);
    check(|g, v| { let y = g.l2_normalize_last(v[0], 1e-12)?; let y = g.mul(y, v[1])?; g.sum(y) }, &[a.clone(), b.clone()]);
    let q = t64(&[2, 2, 3, 5], wave(0.5));
    let k = t64(&[2, 2, 4, 5], wave(1.5));
    check(|g, v| { let y = g.bmm(v[0], v[1], true)?; let y = g.sigmoid(y); g.sum(y) }, &[q.clone(), k.clone()]);
    let m = t64(&[2, 2, 5, 4], wave(2.5));
    check(|g, v| { let y = g.bmm(v[0], v[1], false)?; let y = g.sigmoid(y); g.sum(y) }, &[q, m]);
    let dw = t64(&[3, 1, 3, 3], wave(3.5));
    check(|g, v| { let y = g.conv2d(v[0], v[1], None, 1, 1, 3)?; let y = g.sigmoid(y); g.sum(y) }, &[a.clone(), dw]);
    let sw = t64(&[2, 3, 3, 3], wave(0.8));
    check(|g, v| { let y = g.conv2d(v[0], v[1], None, 2, 1, 1)?; let y = g.sigmoid(y); g.sum(y) }, &[a.clone(), sw]);
    let pw = t64(&[4, 3, 1, 1], wave(0.6));
    let pb = t64(&[4], wave(0.4));
    check(|g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0, 1)?; let y = g.sigmoid(y); g.sum(y) }, &[a, pw, pb]);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let w = g.param(&Tensor::scalar(2.0));
    let d = g.detach(w);
    let y = g.mul(w, d).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sigmoid_and_relu_ranges(xs in proptest::collection::vec(-30.0f32..30.0, 1..64)) {
        let mut g = Graph::<f32>::new();
        let n = xs.len();
        let x = g.constant(&Tensor::new(vec![n], xs.clone()).unwrap());
        let s = g.sigmoid(x);
        let r = g.relu(x);
        for &v in g.value(r) {
            prop_assert!(v >= 0.0);
        }
        // strict (0,1) holds in f64 for |x| <= 30; f32 saturates sooner
        let x64: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let mut g64 = Graph::<f64>::new();
        let xv = g64.constant(&Tensor::new(vec![n], x64).unwrap());
        let s64 = g64.sigmoid(xv);
        for &v in g64.value(s64) {
            prop_assert!(v > 0.0 && v < 1.0);
        }
        prop_assert_eq!(g.value(s).len(), n);
    }

    #[test]
    fn broadcast_equals_explicit_replication(
        l in proptest::collection::vec(0.0f64..1.0, 16),
        r in proptest::collection::vec(0.0f64..1.0, 48),
    ) {
        let mut g = Graph::<f64>::new();
        let lt = Tensor::new(vec![1, 1, 4, 4], l.clone()).unwrap();
        let rt = Tensor::new(vec![1, 3, 4, 4], r.clone()).unwrap();
        let lv = g.constant(&lt);
        let rv = g.constant(&rt);
        let p = g.mul(lv, rv).unwrap();
        let rep: Vec<f64> = (0..3).flat_map(|_| l.iter().copied()).collect();
        let lr = g.constant(&Tensor::new(vec![1, 3, 4, 4], rep).unwrap());
        let q = g.mul(lr, rv).unwrap();
        prop_assert_eq!(g.value(p), g.value(q));
    }

    #[test]
    fn conv_gradients_match_finite_differences(
        b in 1usize..3, cin in 1usize..3, cout in 1usize..3, h in 2usize..5, w in 2usize..5, seed in 0.0f64..6.0,
    ) {
        let x = t64(&[b, cin, h, w], wave(seed));
        let k = t64(&[cout, cin, 3, 3], wave(seed + 1.0));
        let bias = t64(&[cout], wave(seed + 2.0));
        let r = finite_diff_check(
            |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?; let y = g.sigmoid(y); g.sum(y) },
            &[x, k, bias], 1e-5, 1e-4).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences(
        c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in 0.0f64..6.0,
    ) {
        let a = t64(&[1, c, h, w], wave(seed));
        let l = t64(&[1, 1, h, w], wave(seed + 3.0));
        let r = finite_diff_check(
            |g, v| {
                let p = g.mul(v[1], v[0])?;
                let s = g.softplus(p);
                let t = g.gelu(s);
                let u = g.sigmoid(t);
                g.mean(u)
            },
            &[a, l], 1e-5, 1e-4).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }
}
