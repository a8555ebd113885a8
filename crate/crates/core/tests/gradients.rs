//! Analytic gradients against central finite differences.

use std::sync::Arc;

use sanlm_core::attention::{causal_mask, san_layer, single_block, AttentionConfig, SanLayerParams};
use sanlm_core::corpus::{make_mlm_instance, make_unilm_instance, Batch};
use sanlm_core::model::{Direction, LanguageModel, ModelConfig};
use sanlm_core::tensor::{AttnBlock, Graph, ParamId, ParamStore, RngState, Tensor, Var};

const H: f64 = 1e-5;

/// Central difference of `loss` with respect to every element of `id`.
fn numeric_grad(store: &mut ParamStore, id: ParamId, loss: &dyn Fn(&ParamStore) -> f64) -> Vec<f64> {
    let n = store.value(id).numel();
    (0..n)
        .map(|i| {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + H;
            let up = loss(store);
            store.get_mut(id).value.data_mut()[i] = orig - H;
            let down = loss(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) < 1e-12 {
        return diff;
    }
    diff / na.max(nb)
}

/// Checks every parameter of `store`; returns the worst relative error.
fn check_all(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Graph) -> Var,
) -> f64 {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss).unwrap()
    };
    let loss_fn = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = build(&mut g);
        g.value(l).item()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let numeric = numeric_grad(store, id, &loss_fn);
        let a = analytic
            .get(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numeric.len()]);
        let err = rel_error(&a, &numeric);
        assert!(
            err < 1e-3,
            "parameter {} relative error {err:e}",
            store.get(id).name
        );
        worst = worst.max(err);
    }
    worst
}

fn random_tensor(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn elementwise_and_matrix_ops() {
    let mut rng = RngState::new(1);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&[4, 5], &mut rng));
    let b = store.add("b", random_tensor(&[5, 3], &mut rng));
    let c = store.add("c", random_tensor(&[6, 3], &mut rng));
    let bias = store.add("bias", random_tensor(&[6], &mut rng));
    let gain = store.add("gain", random_tensor(&[6], &mut rng));
    let beta = store.add("beta", random_tensor(&[6], &mut rng));
    let weights = random_tensor(&[4, 6], &mut rng);

    check_all(&mut store, &|g| {
        let (a, b, c) = (g.param(a), g.param(b), g.param(c));
        let ab = g.matmul(a, b).unwrap(); // 4x3
        let abc = g.matmul_t(ab, c).unwrap(); // 4x6
        let bias = g.param(bias);
        let x = g.add_row(abc, bias).unwrap();
        let x = g.gelu(x);
        let (gain, beta) = (g.param(gain), g.param(beta));
        let x = g.layer_norm(x, gain, beta, 1e-6).unwrap();
        let s = g.softmax_rows(x);
        let s = g.scale(s, 3.0);
        let w = g.constant(weights.clone());
        let prod = g.matmul_t(s, w).unwrap();
        g.sum(prod)
    });
}

#[test]
fn log_softmax_nll_select_concat_embedding() {
    let mut rng = RngState::new(2);
    let mut store = ParamStore::new();
    let table = store.add("table", random_tensor(&[7, 3], &mut rng));
    let other = store.add("other", random_tensor(&[5, 2], &mut rng));
    let proj = store.add("proj", random_tensor(&[5, 7], &mut rng));
    check_all(&mut store, &|g| {
        let t = g.param(table);
        let e = g.embedding(t, &[3, 0, 3, 6, 1]).unwrap(); // 5x3
        let o = g.param(other);
        let cat = g.concat_cols(&[e, o]).unwrap(); // 5x5
        let sel = g.select_rows(cat, &[4, 1, 1, 0]).unwrap(); // 4x5
        let p = g.param(proj);
        let logits = g.matmul(sel, p).unwrap();
        let lp = g.log_softmax_rows(logits);
        g.nll(lp, &[(0, 2), (1, 6), (3, 0), (1, 1)]).unwrap()
    });
}

#[test]
fn dropout_with_fixed_mask() {
    let mut rng = RngState::new(3);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&[6, 6], &mut rng));
    check_all(&mut store, &|g| {
        let mut r = RngState::new(99);
        let xv = g.param(x);
        let y = g.dropout(xv, 0.3, &mut r, true).unwrap();
        let y = g.gelu(y);
        g.sum(y)
    });
}

#[test]
fn attention_blocks_with_masks() {
    let mut rng = RngState::new(4);
    let mut store = ParamStore::new();
    let q = store.add("q", random_tensor(&[7, 3], &mut rng));
    let k = store.add("k", random_tensor(&[7, 3], &mut rng));
    let v = store.add("v", random_tensor(&[7, 2], &mut rng));
    let w = random_tensor(&[7, 2], &mut rng);
    let blocks: Arc<[AttnBlock]> = Arc::from(vec![
        AttnBlock {
            offset: 0,
            len: 4,
            mask: Some(Arc::new(causal_mask(4).unwrap())),
        },
        AttnBlock {
            offset: 4,
            len: 3,
            mask: None,
        },
    ]);
    check_all(&mut store, &|g| {
        let (q, k, v) = (g.param(q), g.param(k), g.param(v));
        let o = g.attention(q, k, v, Arc::clone(&blocks)).unwrap();
        let wv = g.constant(w.clone());
        let prod = g.matmul_t(o, wv).unwrap();
        g.sum(prod)
    });
}

#[test]
fn full_san_layer() {
    let cfg = AttentionConfig {
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        dropout: 0.2,
    };
    let mut rng = RngState::new(5);
    let mut store = ParamStore::new();
    let params = SanLayerParams::init(&mut store, "l", &cfg, &mut rng);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.normal() * 0.3;
        }
    }
    let x = store.add("x", random_tensor(&[5, 8], &mut rng));
    let w = random_tensor(&[5, 8], &mut rng);
    for mask in [None, causal_mask(5).ok()] {
        let blocks = single_block(5, mask);
        check_all(&mut store, &|g| {
            let mut r = RngState::new(7);
            let xv = g.param(x);
            let out = san_layer(g, xv, &params, 0.2, &blocks, Some(&mut r)).unwrap();
            let wv = g.constant(w.clone());
            let prod = g.matmul_t(out, wv).unwrap();
            let s = g.softmax_rows(prod);
            let y = g.select_rows(s, &[0, 3]).unwrap();
            let y = g.gelu(y);
            g.sum(y)
        });
    }
}

fn noisy_model(mode: Direction, seed: u64) -> LanguageModel {
    let cfg = ModelConfig {
        mode,
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_len: 6,
        vocab_size: 12,
        dropout: 0.1,
    };
    let mut m = LanguageModel::new(cfg, seed).unwrap();
    let mut rng = RngState::new(seed + 1);
    for p in m.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.normal() * 0.2;
        }
    }
    m
}

#[test]
fn small_models_in_both_directions() {
    for mode in [Direction::Bidirectional, Direction::Unidirectional] {
        let model = noisy_model(mode, 11);
        let mut rng = RngState::new(12);
        let sentences = [vec![5, 6, 7, 8, 9], vec![10, 11]];
        let instances: Vec<_> = sentences
            .iter()
            .map(|s| match mode {
                Direction::Bidirectional => make_mlm_instance(s, 6, &mut rng).unwrap(),
                Direction::Unidirectional => make_unilm_instance(s, 6).unwrap(),
            })
            .collect();
        let batch = Batch::from_instances(&instances).unwrap();
        let mut store = model.store().clone();
        check_all(&mut store, &|g| {
            let mut r = RngState::new(13);
            model.batch_loss(g, &batch, Some(&mut r)).unwrap()
        });
    }
}

#[test]
fn tied_parameter_gradient_sums_both_paths() {
    let mut rng = RngState::new(21);
    let table = random_tensor(&[9, 4], &mut rng);
    let ids = [2, 5, 5, 8];
    let picks = [(0, 1), (1, 7), (2, 5), (3, 0)];

    let mut tied = ParamStore::new();
    let e = tied.add("e", table.clone());
    let g_tied = {
        let mut g = Graph::new(&tied);
        let ev = g.param(e);
        let h = g.embedding(ev, &ids).unwrap();
        let logits = g.matmul_t(h, ev).unwrap();
        let lp = g.log_softmax_rows(logits);
        let loss = g.nll(lp, &picks).unwrap();
        g.backward(loss).unwrap()
    };

    let mut split = ParamStore::new();
    let input = split.add("input", table.clone());
    let output = split.add("output", table);
    let g_split = {
        let mut g = Graph::new(&split);
        let iv = g.param(input);
        let ov = g.param(output);
        let h = g.embedding(iv, &ids).unwrap();
        let logits = g.matmul_t(h, ov).unwrap();
        let lp = g.log_softmax_rows(logits);
        let loss = g.nll(lp, &picks).unwrap();
        g.backward(loss).unwrap()
    };

    let total = g_tied.get(e).unwrap();
    let a = g_split.get(input).unwrap();
    let b = g_split.get(output).unwrap();
    for i in 0..total.numel() {
        assert!((total.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn sum_of_matmul_gradient_is_input_broadcast() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap());
    let x = Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap();
    let mut g = Graph::new(&store);
    let wv = g.param(w);
    let xv = g.constant(x.clone());
    let y = g.matmul(wv, xv).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let gw = grads.get(w).unwrap();
    for r in 0..2 {
        assert_eq!(gw.row(r), x.data());
    }
    assert!(g.backward(y).is_err());
}
