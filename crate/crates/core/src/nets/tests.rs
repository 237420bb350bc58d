use rand::{Rng, SeedableRng};

use super::*;
use crate::tensor::{gradcheck, Adam, AdamConfig};

fn rng(seed: u64) -> crate::Rng {
    crate::Rng::seed_from_u64(seed)
}

fn random(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| r.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn tiny(d_model: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        heads,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (m, _) = t.dims2().unwrap();
    (0..m).map(|r| t.row(r).to_vec()).collect()
}

/// Per-head explicit loops over queries, keys and features.
fn mha_oracle(
    x_q: &Tensor,
    x_kv: &Tensor,
    ps: &ParamSet,
    m: &MultiHeadAttention,
    causal: bool,
) -> Vec<Vec<f64>> {
    let (q, k, v) = (
        matmul(&rows(x_q), &rows(ps.get(m.wq))),
        matmul(&rows(x_kv), &rows(ps.get(m.wk))),
        matmul(&rows(x_kv), &rows(ps.get(m.wv))),
    );
    let dk = m.d_model / m.heads;
    let mut cat = vec![vec![0.0; m.d_model]; q.len()];
    for h in 0..m.heads {
        for i in 0..q.len() {
            let visible = if causal { i + 1 } else { k.len() };
            let e: Vec<f64> = (0..visible)
                .map(|j| {
                    (0..dk)
                        .map(|c| q[i][h * dk + c] * k[j][h * dk + c])
                        .sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|x| (x - max).exp()).sum();
            for (j, ej) in e.iter().enumerate() {
                let a = (ej - max).exp() / z;
                for c in 0..dk {
                    cat[i][h * dk + c] += a * v[j][h * dk + c];
                }
            }
        }
    }
    matmul(&cat, &rows(ps.get(m.wo)))
}

fn run_mha(
    m: &MultiHeadAttention,
    ps: &ParamSet,
    xq: &Tensor,
    xkv: &Tensor,
    causal: bool,
    record: &mut Vec<AttentionMap>,
) -> Tensor {
    let mut g = Graph::new();
    let b = ps.bind(&mut g, false);
    let q = g.constant(xq.clone());
    let kv = g.constant(xkv.clone());
    let out = m
        .forward(
            &mut g,
            &b,
            q,
            kv,
            kv,
            causal,
            &mut Ctx::recording(record),
            ("test", 0),
        )
        .unwrap();
    g.value(out).clone()
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(5, 8).unwrap();
    for i in 0..4 {
        assert_eq!(pe.at(0, 2 * i), 0.0);
        assert_eq!(pe.at(0, 2 * i + 1), 1.0);
    }
    assert!((pe.at(1, 0) - 0.8415).abs() < 1e-4);
    assert!((pe.at(1, 1) - 0.5403).abs() < 1e-4);
    for pos in 0..5 {
        for i in 0..4 {
            let (s, c) = (pe.at(pos, 2 * i), pe.at(pos, 2 * i + 1));
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }
    assert!(matches!(positional_encoding(5, 7), Err(Error::Config(_))));
}

#[test]
fn attention_examples() {
    let mut r = rng(0);
    let mut ps = ParamSet::new();
    let m = MultiHeadAttention::new(&mut ps, "a", 4, 2, &mut r).unwrap();
    // T = 1: output is v W^V W^O.
    let x = random(&mut r, &[1, 4], 1.0);
    let out = run_mha(&m, &ps, &x, &x, false, &mut Vec::new());
    let expect = matmul(&matmul(&rows(&x), &rows(ps.get(m.wv))), &rows(ps.get(m.wo)));
    for c in 0..4 {
        assert!((out.at(0, c) - expect[0][c]).abs() < 1e-12);
    }
    // Equal rows give uniform weights.
    let same = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9, 0.1]; 5]).unwrap();
    let mut rec = Vec::new();
    run_mha(&m, &ps, &same, &same, false, &mut rec);
    assert_eq!(rec.len(), 2);
    for map in &rec {
        assert!(map.alpha.data().iter().all(|a| (a - 0.2).abs() < 1e-12));
    }
    assert!(matches!(
        MultiHeadAttention::new(&mut ps, "b", 6, 4, &mut r),
        Err(Error::Config(_))
    ));
}

#[test]
fn attention_matches_loop_oracle() {
    let mut r = rng(1);
    for trial in 0..25 {
        let heads = 1 + trial % 3;
        let d = heads * (1 + r.random_range(0..3));
        let t = 1 + r.random_range(0..6);
        let mut ps = ParamSet::new();
        let m = MultiHeadAttention::new(&mut ps, "a", d, heads, &mut r).unwrap();
        let xq = random(&mut r, &[t, d], 1.0);
        let xkv = random(&mut r, &[t, d], 1.0);
        for causal in [false, true] {
            let mut rec = Vec::new();
            let got = run_mha(&m, &ps, &xq, &xkv, causal, &mut rec);
            let want = mha_oracle(&xq, &xkv, &ps, &m, causal);
            for i in 0..t {
                for c in 0..d {
                    assert!((got.at(i, c) - want[i][c]).abs() <= 1e-10);
                }
            }
            for map in &rec {
                for i in 0..t {
                    let row = map.alpha.row(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(row.iter().all(|a| *a >= 0.0));
                }
            }
        }
    }
}

fn encoder_out(enc: &Encoder, ps: &ParamSet, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = ps.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = enc.forward(&mut g, &b, xv, &mut Ctx::eval()).unwrap();
    g.value(out).clone()
}

#[test]
fn encoder_permutation_equivariance() {
    let mut r = rng(2);
    let x = random(&mut r, &[6, 5], 1.0);
    let mut swapped = rows(&x);
    swapped.swap(1, 4);
    let swapped = Tensor::from_rows(&swapped).unwrap();
    for positional in [false, true] {
        let cfg = ModelConfig {
            positional_encoding: positional,
            ..tiny(8, 2)
        };
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "e", 5, &cfg, false, &mut r).unwrap();
        let a = encoder_out(&enc, &ps, &x);
        let b = encoder_out(&enc, &ps, &swapped);
        let mut a_rows = rows(&a);
        a_rows.swap(1, 4);
        let diff = Tensor::from_rows(&a_rows).unwrap().max_abs_diff(&b);
        if positional {
            assert!(diff > 1e-3);
        } else {
            assert!(diff < 1e-12);
        }
    }
    // Zero weights keep outputs finite and shaped.
    let cfg = tiny(8, 2);
    let mut ps = ParamSet::new();
    let enc = Encoder::new(&mut ps, "e", 5, &cfg, false, &mut r).unwrap();
    for t in ps.tensors_mut() {
        if t.rank() == 2 {
            t.data_mut().fill(0.0);
        }
    }
    let out = encoder_out(&enc, &ps, &x);
    assert_eq!(out.shape(), &[6, 8]);
    assert!(out.is_finite());
    let wrong = random(&mut r, &[6, 4], 1.0);
    let mut g = Graph::new();
    let b = ps.bind(&mut g, false);
    let w = g.constant(wrong);
    assert!(matches!(
        enc.forward(&mut g, &b, w, &mut Ctx::eval()),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn decoder_is_causal() {
    let mut r = rng(3);
    let cfg = tiny(8, 2);
    let mut ps = ParamSet::new();
    let dec = Decoder::new(&mut ps, "d", 3, &cfg, false, &mut r).unwrap();
    let memory = random(&mut r, &[7, 8], 1.0);
    let run = |tgt: &Tensor| {
        let mut g = Graph::new();
        let b = ps.bind(&mut g, false);
        let t = g.constant(tgt.clone());
        let m = g.constant(memory.clone());
        let out = dec.forward(&mut g, &b, t, m, &mut Ctx::eval()).unwrap();
        g.value(out).clone()
    };
    let tgt = random(&mut r, &[7, 3], 1.0);
    let base = run(&tgt);
    for k in 0..7 {
        let mut perturbed = tgt.clone();
        for v in &mut perturbed.data_mut()[(k + 1) * 3..] {
            *v = r.random_range(-5.0..5.0);
        }
        let out = run(&perturbed);
        for i in 0..=k {
            assert_eq!(out.row(i), base.row(i));
        }
    }
}

fn tiny_net(kind: ModelKind, d: usize, window: usize, seed: u64) -> Network {
    let cfg = NetConfig {
        model: kind,
        window,
        position: tiny(d, 2),
        attitude: tiny(d, 2),
        gru_hidden: 6,
        ..NetConfig::default()
    };
    Network::new(&cfg, &mut rng(seed)).unwrap()
}

#[test]
fn zero_head_returns_priors() {
    let mut r = rng(4);
    let net = tiny_net(ModelKind::Riot, 8, 6, 0);
    let imu = random(&mut r, &[6, 9], 1.0);
    let zeros = Tensor::zeros(&[6, 3]);
    assert_eq!(net.predict(&imu, &zeros, None).unwrap(), zeros);
    let prior = random(&mut r, &[6, 3], 3.0);
    assert_eq!(net.predict(&imu, &prior, None).unwrap(), prior);
}

fn randomize(ps: &mut ParamSet, r: &mut impl Rng) {
    for t in ps.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn position_nets_ignore_future_priors() {
    let mut r = rng(5);
    for kind in [ModelKind::Riot, ModelKind::Ariot, ModelKind::Gru] {
        let mut net = tiny_net(kind, 8, 6, 1);
        randomize(&mut net.params, &mut r);
        let imu = random(&mut r, &[6, 9], 1.0);
        let prior = random(&mut r, &[6, 3], 1.0);
        let base = net.predict(&imu, &prior, None).unwrap();
        for k in 0..6 {
            let mut p = prior.clone();
            for v in &mut p.data_mut()[(k + 1) * 3..] {
                *v = r.random_range(-9.0..9.0);
            }
            let out = net.predict(&imu, &p, None).unwrap();
            for i in 0..=k {
                assert_eq!(
                    out.row(i),
                    base.row(i),
                    "{kind:?} row {i} after perturbing rows > {k}"
                );
            }
        }
    }
}

#[test]
fn attitude_head_contract() {
    let mut r = rng(6);
    let net = tiny_net(ModelKind::Ariot, 8, 5, 2);
    let imu = random(&mut r, &[5, 9], 2.0);
    let q = net.predict_attitude(&imu).unwrap();
    assert_eq!(q.shape(), &[5, 4]);
    for i in 0..5 {
        let row = q.row(i);
        assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        assert!(row[0] >= 0.0);
    }
    // Oracle attitude mode and end-to-end shapes.
    let prior = random(&mut r, &[5, 3], 1.0);
    let truth_q = Tensor::new(&[5, 4], [1.0, 0.0, 0.0, 0.0].repeat(5)).unwrap();
    assert_eq!(
        net.predict(&imu, &prior, Some(&truth_q)).unwrap().shape(),
        &[5, 3]
    );
    assert_eq!(net.predict(&imu, &prior, None).unwrap().shape(), &[5, 3]);
    assert!(net.predict(&imu, &Tensor::zeros(&[4, 3]), None).is_err());
}

#[test]
fn parameter_count_closed_form() {
    let cfg = NetConfig::default();
    let net = Network::new(&cfg, &mut rng(0)).unwrap();
    assert_eq!(
        net.params.num_scalars(),
        position_transformer_params(9, &cfg.position)
    );
    let d = 224;
    let ff = 4 * d;
    let expected = 12 * d
        + d
        + 3 * d
        + d
        + 2 * (4 * d * d + 4 * d + 2 * d * ff + ff + d)
        + 2 * (8 * d * d + 6 * d + 2 * d * ff + ff + d)
        + 3 * d
        + 3;
    assert_eq!(net.params.num_scalars(), expected);
    let small = ModelConfig {
        d_model: 16,
        d_ff: Some(20),
        encoder_layers: 3,
        decoder_layers: 1,
        ..tiny(16, 4)
    };
    let mut ps = ParamSet::new();
    PositionTransformer::new(&mut ps, "p", 7, &small, &mut rng(0)).unwrap();
    assert_eq!(ps.num_scalars(), position_transformer_params(7, &small));
}

fn gru_oracle(layer: &GruLayer, ps: &ParamSet, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let h_dim = layer.hidden;
    let (wi, bi, wh, bh) = (
        ps.get(layer.w_in),
        ps.get(layer.b_in),
        ps.get(layer.w_hid),
        ps.get(layer.b_hid),
    );
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let leaky = |v: f64| if v >= 0.0 { v } else { 1e-3 * v };
    let mut h = vec![0.0; h_dim];
    let mut out = Vec::new();
    for xt in x {
        let pre = |gate: usize, j: usize| -> (f64, f64) {
            let col = gate * h_dim + j;
            let xi: f64 = xt
                .iter()
                .enumerate()
                .map(|(i, v)| v * wi.at(i, col))
                .sum::<f64>()
                + bi.data()[col];
            let hi: f64 = h
                .iter()
                .enumerate()
                .map(|(i, v)| v * wh.at(i, col))
                .sum::<f64>()
                + bh.data()[col];
            (xi, hi)
        };
        let next: Vec<f64> = (0..h_dim)
            .map(|j| {
                let (xr, hr) = pre(0, j);
                let (xz, hz) = pre(1, j);
                let (xn, hn) = pre(2, j);
                let r = sig(xr + hr);
                let z = sig(xz + hz);
                let n = leaky(xn + r * hn);
                (1.0 - z) * h[j] + z * n
            })
            .collect();
        h = next;
        out.push(h.clone());
    }
    out
}

#[test]
fn gru_matches_step_oracle() {
    let mut r = rng(7);
    let mut ps = ParamSet::new();
    let layer = GruLayer::new(&mut ps, "g", 4, 5, &mut r);
    randomize(&mut ps, &mut r);
    let x = random(&mut r, &[8, 4], 2.0);
    let mut g = Graph::new();
    let b = ps.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = layer.forward(&mut g, &b, xv).unwrap();
    let want = gru_oracle(&layer, &ps, &rows(&x));
    for t in 0..8 {
        for j in 0..5 {
            assert!((g.value(out).at(t, j) - want[t][j]).abs() <= 1e-10);
        }
    }
}

#[test]
fn gru_zero_parameters() {
    let mut ps = ParamSet::new();
    let layer = GruLayer::new(&mut ps, "g", 3, 4, &mut rng(0));
    for t in ps.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let b = ps.bind(&mut g, false);
    let x = g.constant(random(&mut rng(1), &[5, 3], 1.0));
    let out = layer.forward(&mut g, &b, x).unwrap();
    assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    let x = [vec![0.0; 3]];
    let oracle = gru_oracle(&layer, &ps, &x);
    assert_eq!(oracle[0], vec![0.0; 4]);
}

#[test]
fn gru_gates_stay_in_open_interval() {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut r = rng(8);
    for _ in 0..1000 {
        let v: f64 = r.random_range(-30.0..30.0);
        let s = sig(v);
        assert!(s > 0.0 && s < 1.0);
    }
}

#[test]
fn riot_gradient_matches_finite_differences() {
    let mut r = rng(9);
    let mut net = tiny_net(ModelKind::Riot, 8, 4, 3);
    randomize(&mut net.params, &mut r);
    let imu = random(&mut r, &[4, 9], 1.0);
    let prior = random(&mut r, &[4, 3], 0.5);
    let target = random(&mut r, &[4, 3], 0.5);
    let inputs: Vec<Tensor> = net.params.tensors().to_vec();
    let err = gradcheck::max_relative_error(&inputs, 1e-5, |g, vars| {
        let b = Bound::from_vars(vars.to_vec());
        let out = net.forward(g, &b, None, &imu, &prior, None, &mut Ctx::eval())?;
        let t = g.constant(target.clone());
        let d = g.sub(out, t)?;
        let sq = g.mul(d, d)?;
        Ok(g.mean(sq))
    })
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn riot_overfits_one_window() {
    let mut r = rng(10);
    let t = 12;
    let mut net = tiny_net(ModelKind::Riot, 16, t, 4);
    let imu = random(&mut r, &[t, 9], 1.0);
    let target: Vec<f64> = (0..t)
        .flat_map(|k| [0.05 * k as f64, 0.02 * (k as f64).sin(), 0.0])
        .collect();
    let target = Tensor::new(&[t, 3], target).unwrap();
    let mut prior = vec![0.0; 3];
    prior.extend_from_slice(&target.data()[..3 * (t - 1)]);
    let prior = Tensor::new(&[t, 3], prior).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), net.params.tensors()).unwrap();
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        let mut g = Graph::new();
        let b = net.params.bind(&mut g, true);
        let out = net
            .forward(&mut g, &b, None, &imu, &prior, None, &mut Ctx::eval())
            .unwrap();
        let tv = g.constant(target.clone());
        let d = g.sub(out, tv).unwrap();
        let sq = g.mul(d, d).unwrap();
        let s = g.sum_last(sq).unwrap();
        let l = g.mean(s);
        loss = g.value(l).item();
        g.backward(l).unwrap();
        let grads = net.params.grads(&g, &b);
        adam.step(net.params.tensors_mut(), &grads).unwrap();
    }
    assert!(loss < 1e-4, "{loss}");
}
