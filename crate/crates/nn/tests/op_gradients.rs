use duotts_nn::gradcheck::{check, sample_coords};
use duotts_nn::layers::{GatedConv, Linear, Taps, TransformerBlock};
use duotts_nn::{Graph, Lookup, ParamId, Params, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reduces `v` to a scalar with fixed pseudo-random weights so every output
/// element contributes a distinct gradient.
fn probe(g: &mut Graph<f64>, v: Var) -> Var {
    let t = g.value(v).clone();
    let w: Vec<f64> = (0..t.len()).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.43).collect();
    let w = g.constant(Tensor::from_vec(t.shape(), w));
    let m = g.mul(v, w);
    g.sum(m)
}

fn run_check(params: &mut Params<f64>, build: impl Fn(&mut Graph<f64>, &Params<f64>) -> Var) {
    let mut g = Graph::new();
    let loss = build(&mut g, params);
    let grads = g.backward(loss);
    let analytic: Vec<(ParamId, Vec<f64>)> = params
        .ids()
        .map(|id| (id, grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; params.get(id).len()])))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coords = sample_coords(params, 200, &mut rng);
    let samples = check(
        params,
        &coords,
        1e-6,
        1e-4,
        |p| {
            let mut g = Graph::new();
            let l = build(&mut g, p);
            g.value(l).item()
        },
        |id, i| analytic[id.index()].1[i],
    );
    for s in &samples {
        assert!(s.rel_err < 1e-5, "{} [{}]: analytic {} numeric {} rel {}", s.param, s.index, s.analytic, s.numeric, s.rel_err);
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

#[test]
fn elementwise_and_reductions() {
    let mut r = rng();
    let mut p = Params::<f64>::new();
    let a = p.add_normal("a", &[5, 4], 1.0, &mut r);
    let b = p.add_normal("b", &[5, 4], 1.0, &mut r);
    let bias = p.add_normal("bias", &[4], 1.0, &mut r);
    run_check(&mut p, |g, p| {
        let a = g.param(p, a);
        let b = g.param(p, b);
        let bias = g.param(p, bias);
        let s = g.add(a, b);
        let d = g.sub(s, b);
        let m = g.mul(d, b);
        let t = g.tanh(m);
        let sg = g.sigmoid(b);
        let si = g.silu(a);
        let x = g.add(t, sg);
        let x = g.add(x, si);
        let x = g.add_bias(x, bias);
        let x = g.scale(x, 0.7);
        let sq = g.square(x);
        let ab = g.abs(x);
        let l1 = g.mean(sq);
        let l2 = probe(g, ab);
        g.add(l1, l2)
    });
}

#[test]
fn matmul_all_transposes() {
    let mut r = rng();
    let mut p = Params::<f64>::new();
    let a = p.add_normal("a", &[3, 4], 1.0, &mut r);
    let at = p.add_normal("at", &[4, 3], 1.0, &mut r);
    let b = p.add_normal("b", &[4, 5], 1.0, &mut r);
    let bt = p.add_normal("bt", &[5, 4], 1.0, &mut r);
    run_check(&mut p, |g, p| {
        let (a, at, b, bt) = (g.param(p, a), g.param(p, at), g.param(p, b), g.param(p, bt));
        let x1 = g.matmul_t(a, b, false, false);
        let x2 = g.matmul_t(at, b, true, false);
        let x3 = g.matmul_t(a, bt, false, true);
        let x4 = g.matmul_t(at, bt, true, true);
        let s = g.add(x1, x2);
        let s = g.add(s, x3);
        let s = g.add(s, x4);
        let s = g.tanh(s);
        probe(g, s)
    });
}

#[test]
fn shape_ops() {
    let mut r = rng();
    let mut p = Params::<f64>::new();
    let a = p.add_normal("a", &[6, 3], 1.0, &mut r);
    let b = p.add_normal("b", &[6, 2], 1.0, &mut r);
    let tables = [p.add_normal("t0", &[7, 5], 1.0, &mut r), p.add_normal("t1", &[4, 5], 1.0, &mut r)];
    run_check(&mut p, |g, p| {
        let (a, b) = (g.param(p, a), g.param(p, b));
        let c = g.concat_cols(&[a, b]);
        let c = g.tanh(c);
        let s = g.slice_cols(c, 1, 3);
        let u = g.unfold(s, &[-2, -1, 0, 1]);
        let rr = g.concat_rows(&[u, u]);
        let sr = g.slice_rows(rr, 2, 7);
        let sel = g.select_rows(sr, &[0, 3, 3, 6]);
        let re = g.reshape(sel, &[2, 24]);
        let t0 = g.param(p, tables[0]);
        let t1 = g.param(p, tables[1]);
        let lookups = vec![
            Lookup { pos: 0, table: 0, row: 3, weight: 0.5 },
            Lookup { pos: 0, table: 1, row: 2, weight: 0.5 },
            Lookup { pos: 1, table: 0, row: 3, weight: 1.0 },
            Lookup { pos: 2, table: 1, row: 0, weight: -2.0 },
        ];
        let e = g.embed_sum(&[t0, t1], lookups, 3);
        let e = g.square(e);
        let l1 = probe(g, re);
        let l2 = probe(g, e);
        g.add(l1, l2)
    });
}

#[test]
fn norm_rope_attention_cross_entropy() {
    let mut r = rng();
    let mut p = Params::<f64>::new();
    let x = p.add_normal("x", &[7, 8], 1.0, &mut r);
    let gain = p.add_normal("gain", &[8], 1.0, &mut r);
    let wq = p.add_normal("wq", &[8, 8], 0.5, &mut r);
    let wk = p.add_normal("wk", &[8, 8], 0.5, &mut r);
    let wv = p.add_normal("wv", &[8, 8], 0.5, &mut r);
    let head = p.add_normal("head", &[8, 6], 0.5, &mut r);
    run_check(&mut p, |g, p| {
        let x = g.param(p, x);
        let gain = g.param(p, gain);
        let h = g.rms_norm(x, gain, 1e-6);
        let (wq, wk, wv) = (g.param(p, wq), g.param(p, wk), g.param(p, wv));
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let pos = [0, 1, 2, 3, 0, 1, 2];
        let q = g.rope(q, &pos, 2, 10000.0);
        let k = g.rope(k, &pos, 2, 100.0);
        let a = g.attention(q, k, v, 2, &[(0, 4), (4, 3)]);
        let head = g.param(p, head);
        let logits = g.matmul(a, head);
        g.cross_entropy(logits, &[0, 5, 2, 2, 1, 3, 4])
    });
}

#[test]
fn layer_blocks() {
    let mut r = rng();
    let mut p = Params::<f64>::new();
    let x = p.add_normal("x", &[6, 8], 1.0, &mut r);
    let conv_c = GatedConv::new(&mut p, "cc", 8, 3, 1, Taps::Causal, &mut r);
    let conv_m = GatedConv::new(&mut p, "cm", 8, 3, 2, Taps::Centered, &mut r);
    let block = TransformerBlock::new(&mut p, "blk", 8, 2, 12, &mut r);
    let lin = Linear::new(&mut p, "lin", 8, 5, true, &mut r);
    run_check(&mut p, |g, p| {
        let x = g.param(p, x);
        let h = conv_c.forward(g, p, x);
        let h = conv_m.forward(g, p, h);
        let h = block.forward(g, p, h, &[0, 1, 2, 3, 4, 5], &[(0, 6)]);
        let o = lin.forward(g, p, h);
        g.cross_entropy(o, &[1, 2, 3, 4, 0, 1])
    });
}

#[test]
fn straight_through_passes_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(&[2], vec![0.3, -0.2]));
    let mut p = Params::<f64>::new();
    let id = p.add("x", Tensor::from_vec(&[2], vec![0.3, -0.2]));
    let xv = g.param(&p, id);
    let _ = x;
    let q = Tensor::from_vec(&[2], vec![1.0, 0.0]);
    let st = g.straight_through(xv, q.clone());
    assert_eq!(g.value(st), &q);
    let s = g.square(st);
    let l = g.sum(s);
    let grads = g.backward(l);
    assert_eq!(grads.param(id).unwrap().data(), &[2.0, 0.0]);
}

#[test]
fn transformer_step_matches_graph() {
    let mut r = rng();
    let mut p = Params::<f64>::new();
    let block = TransformerBlock::new(&mut p, "blk", 8, 2, 16, &mut r);
    let x = Tensor::from_vec(&[5, 8], (0..40).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pos: Vec<usize> = (3..8).collect();
    let y = block.forward(&mut g, &p, xv, &pos, &[(0, 5)]);
    let mut cache = Default::default();
    for t in 0..5 {
        let out = block.step(&p, x.row(t), pos[t], &mut cache);
        for (a, b) in out.iter().zip(g.value(y).row(t)) {
            assert!((a - b).abs() < 1e-12, "row {t}: {a} vs {b}");
        }
    }
}

#[test]
fn gated_conv_range_matches_graph() {
    let mut r = rng();
    let mut p = Params::<f32>::new();
    let conv = GatedConv::new(&mut p, "c", 4, 3, 2, Taps::Causal, &mut r);
    let x = Tensor::from_vec(&[9, 4], (0..36).map(|i| (i as f32 * 0.37).sin()).collect());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = conv.forward(&mut g, &p, xv);
    let full = conv.apply_range(&p, &x, 0, 0, 9);
    let tail = conv.apply_range(&p, &Tensor::from_vec(&[6, 4], x.data()[12..].to_vec()), 3, 7, 9);
    assert_eq!(&full.data()[28..], tail.data());
    for (a, b) in full.data().iter().zip(g.value(y).data()) {
        assert!((a - b).abs() < 1e-5);
    }
}
