use mmtp::attention::{AgentAgentLayer, AgentMapLayer, MultiHeadAttention};
use mmtp::encoders::{AgentEncoder, MapEncoder};
use mmtp::tensor::nn::{Ctx, EngineRng};
use mmtp::tensor::{ParamId, ParamStore, Tensor};
use mmtp::{Error, Mask};
use rand::{Rng, SeedableRng};

fn rng(seed: u64) -> EngineRng {
    EngineRng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn set(store: &mut ParamStore<f64>, id: ParamId, data: &[f64]) {
    let t = store.get_mut(id);
    assert_eq!(t.len(), data.len());
    t.data_mut().copy_from_slice(data);
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

#[test]
fn agent_features_have_model_width() {
    let mut store = ParamStore::<f32>::new();
    let enc = AgentEncoder::new(&mut store, 256, &mut rng(0));
    let mut cx = Ctx::eval(&store);
    let x = cx.constant(random(&[11, 20, 5], 1).cast());
    let y = enc.forward(&mut cx, x).unwrap();
    assert_eq!(cx.value(y).shape(), &[11, 256]);
}

#[test]
fn agent_encoder_is_shared_across_slots() {
    let mut store = ParamStore::<f64>::new();
    let enc = AgentEncoder::new(&mut store, 16, &mut rng(0));
    let one = random(&[1, 20, 5], 2);
    let mut data = vec![0.0; 3 * 100];
    data[100..200].copy_from_slice(one.data());
    data[200..300].copy_from_slice(one.data());
    let mut cx = Ctx::eval(&store);
    let x = cx.constant(Tensor::new([3, 20, 5], data).unwrap());
    let y = enc.forward(&mut cx, x).unwrap();
    let y = cx.value(y).data();
    assert_eq!(&y[16..32], &y[32..48]);

    // All-zero histories give one constant vector in every slot.
    let mut cx = Ctx::eval(&store);
    let z = cx.constant(Tensor::zeros([4, 20, 5]));
    let z = enc.forward(&mut cx, z).unwrap();
    let z = cx.value(z).data();
    assert!((1..4).all(|i| z[i * 16..(i + 1) * 16] == z[..16]));
    assert_eq!(&z[..16], &y[..16]);
}

#[test]
fn agent_encoder_gradients_sum_over_agents() {
    let mut store = ParamStore::<f64>::new();
    let enc = AgentEncoder::new(&mut store, 8, &mut rng(3));
    let x = random(&[4, 20, 5], 4);
    let grads_of = |x: Tensor<f64>| {
        let mut cx = Ctx::eval(&store);
        let v = cx.constant(x);
        let y = enc.forward(&mut cx, v).unwrap();
        let loss = cx.tape.sum_all(y);
        let mut g = cx.tape.backward(loss).unwrap();
        cx.param_grads(&mut g).into_iter().map(|g| g.unwrap().into_data()).collect::<Vec<_>>()
    };
    let joint = grads_of(x.clone());
    let mut replay = vec![vec![0.0; 0]; joint.len()];
    for a in 0..4 {
        let one = Tensor::new([1, 20, 5], x.data()[a * 100..(a + 1) * 100].to_vec()).unwrap();
        for (acc, g) in replay.iter_mut().zip(grads_of(one)) {
            if acc.is_empty() {
                *acc = g;
            } else {
                acc.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
        }
    }
    for (j, r) in joint.iter().zip(&replay) {
        assert!(close(j, r, 1e-9));
    }
}

fn encode_map(
    enc: &MapEncoder,
    store: &ParamStore<f64>,
    wp: Tensor<f64>,
    attrs: Tensor<f64>,
) -> (Vec<f64>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut cx = Ctx::eval(store);
    let (w, a) = (cx.constant(wp), cx.constant(attrs));
    let e = enc.forward(&mut cx, w, a).unwrap();
    (
        cx.value(e.waypoints).to_f64_vec(),
        e.pooled.map(|p| cx.value(p).to_f64_vec()),
        e.lanes.map(|p| cx.value(p).to_f64_vec()),
    )
}

#[test]
fn map_features_have_model_width() {
    let mut store = ParamStore::<f32>::new();
    let enc = MapEncoder::new(&mut store, 256, false, &mut rng(0));
    let mut cx = Ctx::eval(&store);
    let w = cx.constant(random(&[40, 10, 3], 5).cast());
    let a = cx.constant(random(&[40, 7], 6).cast());
    let e = enc.forward(&mut cx, w, a).unwrap();
    let flat = cx.tape.reshape(e.waypoints, &[400, 256]).unwrap();
    assert_eq!(cx.value(flat).shape(), &[400, 256]);
}

#[test]
fn identical_waypoints_encode_identically() {
    let mut store = ParamStore::<f64>::new();
    let enc = MapEncoder::new(&mut store, 8, false, &mut rng(1));
    let mut wp = random(&[1, 10, 3], 7);
    let copy: Vec<f64> = wp.data()[6..9].to_vec();
    wp.data_mut()[15..18].copy_from_slice(&copy);
    let (out, _, _) = encode_map(&enc, &store, wp, random(&[1, 7], 8));
    assert_eq!(&out[16..24], &out[40..48]);
}

#[test]
fn permuting_waypoints_permutes_outputs_only() {
    let mut store = ParamStore::<f64>::new();
    let enc = MapEncoder::new(&mut store, 8, true, &mut rng(1));
    let wp = random(&[1, 10, 3], 9);
    let perm = [3, 7, 0, 9, 1, 8, 2, 5, 6, 4];
    let mut shuffled = vec![0.0; 30];
    for (dst, &src) in perm.iter().enumerate() {
        shuffled[dst * 3..dst * 3 + 3].copy_from_slice(&wp.data()[src * 3..src * 3 + 3]);
    }
    let attrs = random(&[1, 7], 10);
    let (a, pa, _) = encode_map(&enc, &store, wp, attrs.clone());
    let (b, pb, _) = encode_map(&enc, &store, Tensor::new([1, 10, 3], shuffled).unwrap(), attrs);
    for (dst, &src) in perm.iter().enumerate() {
        assert!(close(&b[dst * 8..dst * 8 + 8], &a[src * 8..src * 8 + 8], 1e-12));
    }
    assert!(close(&pa.unwrap(), &pb.unwrap(), 1e-12));
}

#[test]
fn lane_feature_is_max_over_waypoint_features() {
    let mut store = ParamStore::<f64>::new();
    let enc = MapEncoder::new(&mut store, 12, true, &mut rng(2));
    let (wp, pooled, lanes) = encode_map(&enc, &store, random(&[3, 10, 3], 11), random(&[3, 7], 12));
    let pooled = pooled.unwrap();
    for lane in 0..3 {
        for c in 0..12 {
            let mut best = f64::NEG_INFINITY;
            for w in 0..10 {
                let v = wp[(lane * 10 + w) * 12 + c];
                if v > best {
                    best = v;
                }
            }
            assert_eq!(pooled[lane * 12 + c], best);
        }
    }
    assert_eq!(lanes.unwrap().len(), 36);
}

#[test]
fn duplicated_waypoint_leaves_lane_feature_unchanged() {
    let mut store = ParamStore::<f64>::new();
    let enc = MapEncoder::new(&mut store, 8, true, &mut rng(2));
    let wp = random(&[1, 10, 3], 13);
    let mut dup = wp.data().to_vec();
    dup.extend_from_slice(&wp.data()[12..15]);
    let attrs = random(&[1, 7], 14);
    let (_, _, a) = encode_map(&enc, &store, wp, attrs.clone());
    let (_, _, b) = encode_map(&enc, &store, Tensor::new([1, 11, 3], dup).unwrap(), attrs);
    assert_eq!(a, b);
}

#[allow(clippy::too_many_arguments)]
/// Textbook multi-head attention for one query, evaluated scalar by
/// scalar: `Q = q W^Q_i`, `K = M W^K_i`, `V = M W^V_i`.
fn mha_oracle(
    q: &[f64],
    keys: &[Vec<f64>],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    h: usize,
    d: usize,
    dk: usize,
    dv: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let proj = |x: &[f64], w: &[f64], i: usize, out: usize| -> Vec<f64> {
        (0..out).map(|c| (0..d).map(|r| x[r] * w[(i * d + r) * out + c]).sum()).collect()
    };
    let mut heads = Vec::new();
    let mut scores = Vec::new();
    for i in 0..h {
        let qi = proj(q, wq, i, dk);
        let logits: Vec<f64> = keys
            .iter()
            .map(|m| {
                let k = proj(m, wk, i, dk);
                qi.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
            })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let a: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
        let mut head = vec![0.0; dv];
        for (aj, m) in a.iter().zip(keys) {
            let v = proj(m, wv, i, dv);
            head.iter_mut().zip(v).for_each(|(s, x)| *s += aj * x);
        }
        heads.push(head);
        scores.push(a);
    }
    (heads, scores)
}

fn run_mha(
    mha: &MultiHeadAttention,
    store: &ParamStore<f64>,
    q: &[f64],
    keys: &[f64],
    n: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut cx = Ctx::eval(store);
    let qv = cx.constant(Tensor::new([1, d], q.to_vec()).unwrap());
    let kv = cx.constant(Tensor::new([1, n, d], keys.to_vec()).unwrap());
    let (out, scores) = mha.forward(&mut cx, qv, kv, &Mask::all_valid([1, n])).unwrap();
    (cx.value(out).to_f64_vec(), cx.value(scores).to_f64_vec())
}

#[test]
fn identity_single_head_returns_the_only_value() {
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "t", 1, 3, 3, &mut rng(0));
    for id in [mha.proj.wq, mha.proj.wk, mha.proj.wv, mha.wo.w] {
        set(&mut store, id, &identity(3));
    }
    let (out, scores) = run_mha(&mha, &store, &[0.3, -1.0, 2.0], &[4.0, 5.0, -6.0], 1, 3);
    assert_eq!(out, vec![4.0, 5.0, -6.0]);
    assert_eq!(scores, vec![1.0]);
}

#[test]
fn uniform_keys_average_the_values() {
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "t", 2, 4, 3, &mut rng(1));
    let key = [0.5, -0.25, 1.0, 2.0];
    let keys: Vec<f64> = key.iter().copied().cycle().take(20).collect();
    let (a, _) = run_mha(&mha, &store, &[1.0, 2.0, 3.0, 4.0], &keys, 5, 4);
    let (b, _) = run_mha(&mha, &store, &[-7.0, 0.0, 0.5, 9.0], &key, 1, 4);
    assert!(close(&a, &b, 1e-12));
}

#[test]
fn two_head_toy_matches_oracle() {
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "t", 2, 2, 2, &mut rng(0));
    let wq = [0.5, -1.0, 2.0, 0.25, 1.0, 0.0, -0.5, 1.5];
    let wk = [1.0, 0.5, -0.75, 1.0, 0.0, 2.0, 1.0, -1.0];
    let wv = [2.0, 0.0, 1.0, -1.0, 0.5, 0.5, -2.0, 1.0];
    let wo = [1.0, 0.0, 0.0, 1.0, 0.5, -0.5, 2.0, 1.0];
    let bo = [0.1, -0.2];
    set(&mut store, mha.proj.wq, &wq);
    set(&mut store, mha.proj.wk, &wk);
    set(&mut store, mha.proj.wv, &wv);
    set(&mut store, mha.wo.w, &wo);
    set(&mut store, mha.wo.b, &bo);
    let q = [0.7, -1.3];
    let keys = vec![vec![1.0, 0.0], vec![-0.5, 2.0], vec![0.3, 0.3]];
    let (heads, scores) = mha_oracle(&q, &keys, &wq, &wk, &wv, 2, 2, 2, 2);
    let cat: Vec<f64> = heads.concat();
    let expected: Vec<f64> = (0..2).map(|c| bo[c] + (0..4).map(|r| cat[r] * wo[r * 2 + c]).sum::<f64>()).collect();
    let (out, got_scores) = run_mha(&mha, &store, &q, &keys.concat(), 3, 2);
    assert!(close(&out, &expected, 1e-12), "{out:?} vs {expected:?}");
    assert!(close(&got_scores, &scores.concat(), 1e-12));
}

#[test]
fn multimodal_heads_match_independent_single_heads() {
    let (d, dk, n) = (4, 3, 6);
    let mut store = ParamStore::<f64>::new();
    let layer = AgentMapLayer::multimodal(&mut store, d, 2, dk, 8, &mut rng(5));
    let q = random(&[1, d], 20);
    let keys = random(&[1, n, d], 21);
    let mut cx = Ctx::eval(&store);
    let (qv, kv) = (cx.constant(q.clone()), cx.constant(keys.clone()));
    let out = layer.proj.attend(&mut cx, qv, kv, &Mask::all_valid([1, n])).unwrap();
    let heads = cx.value(out.heads).to_f64_vec();
    let rows: Vec<Vec<f64>> = keys.data().chunks(d).map(<[f64]>::to_vec).collect();
    let (wq, wk, wv) =
        (store.get(layer.proj.wq).data(), store.get(layer.proj.wk).data(), store.get(layer.proj.wv).data());
    for i in 0..2 {
        // Each head alone, with only its own slice of the weights.
        let slice = |w: &[f64], width: usize| w[i * d * width..(i + 1) * d * width].to_vec();
        let (h, _) = mha_oracle(q.data(), &rows, &slice(wq, dk), &slice(wk, dk), &slice(wv, d), 1, d, dk, d);
        assert!(close(&heads[i * d..(i + 1) * d], &h[0], 1e-12));
    }
}

#[test]
fn identical_heads_give_identical_modes() {
    let (d, k) = (6, 3);
    let mut store = ParamStore::<f64>::new();
    let layer = AgentMapLayer::multimodal(&mut store, d, k, 4, 12, &mut rng(6));
    for id in [layer.proj.wq, layer.proj.wk, layer.proj.wv] {
        let t = store.get_mut(id);
        let per = t.len() / k;
        let first = t.data()[..per].to_vec();
        t.data_mut().chunks_mut(per).for_each(|c| c.copy_from_slice(&first));
    }
    let mut cx = Ctx::eval(&store);
    let q = cx.constant(random(&[1, d], 1));
    let m = cx.constant(random(&[1, 9, d], 2));
    let out = layer.forward(&mut cx, q, m, &Mask::all_valid([1, 9]), 0.0).unwrap();
    let f = cx.value(out.features).to_f64_vec();
    assert_eq!(cx.value(out.features).shape(), &[1, k, d]);
    assert!((1..k).all(|j| f[j * d..(j + 1) * d] == f[..d]));
}

#[test]
fn single_valid_key_gets_all_attention() {
    let (d, n) = (5, 7);
    let mut store = ParamStore::<f64>::new();
    let layer = AgentMapLayer::multimodal(&mut store, d, 3, 4, 10, &mut rng(7));
    let mut cx = Ctx::eval(&store);
    let q = cx.constant(random(&[1, d], 3));
    let m = cx.constant(random(&[1, n, d], 4));
    let mask = Mask::new([1, n], (0..n).map(|i| i == 4).collect()).unwrap();
    let out = layer.forward(&mut cx, q, m, &mask, 0.0).unwrap();
    let s = cx.value(out.scores).to_f64_vec();
    for h in 0..3 {
        let row = &s[h * n..(h + 1) * n];
        assert!(row.iter().enumerate().all(|(i, &v)| v == if i == 4 { 1.0 } else { 0.0 }));
    }
}

#[test]
fn attention_rows_sum_to_one_over_valid_keys() {
    let (d, n) = (6, 12);
    let mut store = ParamStore::<f64>::new();
    let layer = AgentMapLayer::multimodal(&mut store, d, 4, 3, 8, &mut rng(8));
    let mut cx = Ctx::eval(&store);
    let q = cx.constant(random(&[2, d], 5));
    let m = cx.constant(random(&[2, n, d], 6));
    let valid: Vec<bool> = (0..2 * n).map(|i| i % 3 != 1).collect();
    let mask = Mask::new([2, n], valid.clone()).unwrap();
    let out = layer.forward(&mut cx, q, m, &mask, 0.0).unwrap();
    let s = cx.value(out.scores).to_f64_vec();
    for b in 0..2 {
        for h in 0..4 {
            let row = &s[(b * 4 + h) * n..(b * 4 + h + 1) * n];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().zip(&valid[b * n..]).all(|(v, &ok)| ok || *v == 0.0));
        }
    }
}

#[test]
fn all_masked_keys_are_an_error() {
    let mut store = ParamStore::<f64>::new();
    let layer = AgentMapLayer::multimodal(&mut store, 4, 2, 2, 8, &mut rng(9));
    let mut cx = Ctx::eval(&store);
    let q = cx.constant(random(&[1, 4], 1));
    let m = cx.constant(random(&[1, 3, 4], 2));
    let r = layer.forward(&mut cx, q, m, &Mask::new([1, 3], vec![false; 3]).unwrap(), 0.0);
    assert!(matches!(r, Err(Error::DegenerateRow { .. })));
}

#[test]
fn duplicated_keys_leave_modes_unchanged() {
    let (d, n) = (6, 5);
    let mut store = ParamStore::<f64>::new();
    let layer = AgentMapLayer::multimodal(&mut store, d, 3, 4, 10, &mut rng(10));
    let keys = random(&[1, n, d], 7);
    let mut doubled = keys.data().to_vec();
    doubled.extend_from_slice(keys.data());
    let run = |m: Tensor<f64>, n: usize| {
        let mut cx = Ctx::eval(&store);
        let q = cx.constant(random(&[1, d], 8));
        let m = cx.constant(m);
        let out = layer.forward(&mut cx, q, m, &Mask::all_valid([1, n]), 0.0).unwrap();
        cx.value(out.features).to_f64_vec()
    };
    assert!(close(&run(keys, n), &run(Tensor::new([1, 2 * n, d], doubled).unwrap(), 2 * n), 1e-9));
}

#[test]
fn lone_target_attends_to_itself() {
    let (d, a) = (8, 11);
    let mut store = ParamStore::<f64>::new();
    let layer = AgentAgentLayer::new(&mut store, d, 2, 4, 16, &mut rng(11));
    let mut cx = Ctx::eval(&store);
    let agents = cx.constant(random(&[1, a, d], 9));
    let mask = Mask::new([1, a], (0..a).map(|i| i == 0).collect()).unwrap();
    let (out, scores) = layer.forward(&mut cx, agents, &mask, 0.0).unwrap();
    let s = cx.value(scores).to_f64_vec();
    for h in 0..2 {
        assert_eq!(s[h * a], 1.0);
        assert!(s[h * a + 1..(h + 1) * a].iter().all(|&v| v == 0.0));
    }
    assert_eq!(cx.value(out).shape(), &[1, d]);
}

#[test]
fn permuted_neighbors_give_the_same_interaction() {
    let (d, a) = (8, 6);
    let mut store = ParamStore::<f64>::new();
    let layer = AgentAgentLayer::new(&mut store, d, 3, 4, 16, &mut rng(12));
    let x = random(&[1, a, d], 10);
    let perm = [0, 4, 2, 5, 1, 3];
    let mut y = vec![0.0; a * d];
    for (dst, &src) in perm.iter().enumerate() {
        y[dst * d..(dst + 1) * d].copy_from_slice(&x.data()[src * d..(src + 1) * d]);
    }
    let run = |t: Tensor<f64>| {
        let mut cx = Ctx::eval(&store);
        let v = cx.constant(t);
        let (out, _) = layer.forward(&mut cx, v, &Mask::all_valid([1, a]), 0.0).unwrap();
        cx.value(out).to_f64_vec()
    };
    assert!(close(&run(x), &run(Tensor::new([1, a, d], y).unwrap()), 1e-12));
}

#[test]
fn zeroed_sublayer_reduces_to_layer_norm() {
    let (d, a) = (8, 4);
    let mut store = ParamStore::<f64>::new();
    let layer = AgentAgentLayer::new(&mut store, d, 2, 4, 16, &mut rng(13));
    let t = layer.tail;
    for id in [layer.mha.wo.w, layer.mha.wo.b, t.ffn.up.w, t.ffn.up.b, t.ffn.down.w, t.ffn.down.b] {
        let n = store.get(id).len();
        set(&mut store, id, &vec![0.0; n]);
    }
    let x = random(&[1, a, d], 11);
    let mut cx = Ctx::eval(&store);
    let v = cx.constant(x.clone());
    let (out, _) = layer.forward(&mut cx, v, &Mask::all_valid([1, a]), 0.0).unwrap();
    let q = &x.data()[..d];
    let mean = q.iter().sum::<f64>() / d as f64;
    let var = q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let ln: Vec<f64> = q.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
    assert!(close(&cx.value(out).to_f64_vec(), &ln, 1e-4));
}
