//! Windowed self-attention, cross-attention and the Swin block.

mod common;

use common::{rng, swin_store, uniform};
use dosediff::nn::{
    cross_attention_fuse, cross_attention_tokens, cyclic_shift, swin_block, time_embedding, window_attention_with_weights,
    window_merge, window_partition, AttentionParams, CrossAttentionParams, Init, SwinBlockParams,
};
use dosediff::optim::{BoundParams, ParamStore};
use dosediff::tensor::gradient_check;
use dosediff::Tensor;
use proptest::prelude::*;

const RANDOM: Init = common::WIDE_INIT;

fn row_sums_ok(weights: &Tensor) -> bool {
    let s = weights.shape();
    let n = *s.last().unwrap();
    weights.data().chunks(n).all(|row| (row.iter().sum::<f64>() - 1.0).abs() <= 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn self_attention_rows_sum_to_one(seed in 0u64..10_000, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let c = 8;
        let mut store = ParamStore::new();
        AttentionParams::init(&mut store, &mut rng(seed), "a", c, RANDOM).unwrap();
        let p = AttentionParams::bind(&store.bind(false), "a", heads).unwrap();
        let windows = uniform(&mut rng(seed + 3), &[3, 4, c], -3.0, 3.0);
        let (_, w) = window_attention_with_weights(&windows, &p).unwrap();
        prop_assert_eq!(w.shape(), &[3 * heads, 4, 4][..]);
        prop_assert!(row_sums_ok(&w));
    }

    #[test]
    fn cross_attention_rows_sum_to_one(seed in 0u64..10_000, n in 1usize..20) {
        let mut store = ParamStore::new();
        CrossAttentionParams::init(&mut store, &mut rng(seed), "x", 3, 5, RANDOM).unwrap();
        let p = CrossAttentionParams::bind(&store.bind(false), "x").unwrap();
        let mut r = rng(seed + 1);
        let a = uniform(&mut r, &[n, 3], -4.0, 4.0);
        let b = uniform(&mut r, &[n, 5], -4.0, 4.0);
        let (_, w) = cross_attention_tokens(&a, &b, &p).unwrap();
        prop_assert!(row_sums_ok(&w));
    }

    #[test]
    fn partition_then_merge_is_identity(
        c in 1usize..4,
        ny in 1usize..4,
        nx in 1usize..4,
        win in 1usize..5,
        seed in 0u64..1000,
    ) {
        let (h, w) = (ny * win, nx * win);
        let x = uniform(&mut rng(seed), &[c, h, w], -1.0, 1.0);
        let back = window_merge(&window_partition(&x, win).unwrap(), h, w).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn shift_then_unshift_is_identity(
        h in 1usize..9,
        w in 1usize..9,
        dy in -10isize..10,
        dx in -10isize..10,
        seed in 0u64..1000,
    ) {
        let x = uniform(&mut rng(seed), &[2, h, w], -1.0, 1.0);
        let back = cyclic_shift(&cyclic_shift(&x, dy, dx).unwrap(), -dy, -dx).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn cross_attention_argmax_ignores_key_scale(seed in 0u64..10_000, k in 0.01f64..50.0) {
        let mut store = ParamStore::new();
        CrossAttentionParams::init(&mut store, &mut rng(seed), "x", 4, 4, RANDOM).unwrap();
        let p = CrossAttentionParams::bind(&store.bind(false), "x").unwrap();
        let scaled = CrossAttentionParams { wk: p.wk.scale(k), ..p.clone() };
        let mut r = rng(seed + 2);
        let a = uniform(&mut r, &[9, 4], -1.0, 1.0);
        let b = uniform(&mut r, &[9, 4], -1.0, 1.0);
        let (_, w1) = cross_attention_tokens(&a, &b, &p).unwrap();
        let (_, w2) = cross_attention_tokens(&a, &b, &scaled).unwrap();
        let argmax = |row: &[f64]| row.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        for (r1, r2) in w1.data().chunks(9).zip(w2.data().chunks(9)) {
            prop_assert_eq!(argmax(r1), argmax(r2));
        }
    }

    #[test]
    fn cross_attention_is_permutation_equivariant(seed in 0u64..10_000) {
        let n = 6;
        let mut store = ParamStore::new();
        CrossAttentionParams::init(&mut store, &mut rng(seed), "x", 3, 4, RANDOM).unwrap();
        let p = CrossAttentionParams::bind(&store.bind(false), "x").unwrap();
        let mut r = rng(seed + 5);
        let a = uniform(&mut r, &[n, 3], -1.0, 1.0);
        let b = uniform(&mut r, &[n, 4], -1.0, 1.0);
        let perm: Vec<usize> = {
            let mut v: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            v.shuffle(&mut r);
            v
        };
        let permute = |t: &Tensor| {
            let c = t.shape()[1];
            let d: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * c..(i + 1) * c].to_vec()).collect();
            Tensor::new([n, c], d)
        };
        let (out, _) = cross_attention_tokens(&a, &b, &p).unwrap();
        let (out_p, _) = cross_attention_tokens(&permute(&a), &permute(&b), &p).unwrap();
        for (x, y) in permute(&out).data().iter().zip(out_p.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn swin_block_with_zeroed_branches_is_identity() {
    for (shift, time) in [(false, None), (true, None), (true, Some(8))] {
        let mut store = swin_store(4, time, 11);
        for (name, p) in store.iter_mut() {
            if name.starts_with("blk.attn.out.") || name.starts_with("blk.fc2.") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let p = SwinBlockParams::bind(&store.bind(false), "blk", 2, 2, shift, time.is_some()).unwrap();
        let x = uniform(&mut rng(12), &[4, 4, 4], -2.0, 2.0);
        let e = time.map(|d| time_embedding(5, d).unwrap().reshape([1, d]).unwrap());
        let y = swin_block(&x, &p, e.as_ref()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec(), "shift {shift}");
    }
}

#[test]
fn swin_block_mixes_neighbouring_windows_only_when_shifted() {
    let store = swin_store(4, None, 21);
    let x = uniform(&mut rng(22), &[4, 4, 4], -1.0, 1.0);
    let mut poked = x.to_vec();
    poked[0] += 1.0; // channel 0, pixel (0, 0): top-left window
    let poked = Tensor::new([4, 4, 4], poked);
    for shift in [false, true] {
        let p = SwinBlockParams::bind(&store.bind(false), "blk", 2, 2, shift, false).unwrap();
        let a = swin_block(&x, &p, None).unwrap();
        let b = swin_block(&poked, &p, None).unwrap();
        // pixel (3, 3) lies in the bottom-right window
        let far = |t: &Tensor| t.data()[3 * 4 + 3];
        assert_eq!(far(&a) != far(&b), shift);
    }
}

fn named_point(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store
        .iter()
        .map(|(n, p)| (n.to_string(), Tensor::new(p.shape.clone(), p.value.clone())))
        .unzip()
}

#[test]
fn swin_block_gradients() {
    let store = swin_store(4, Some(8), 31);
    let (names, mut point) = named_point(&store);
    point.push(uniform(&mut rng(32), &[4, 4, 4], -1.0, 1.0));
    point.push(uniform(&mut rng(33), &[1, 8], -1.0, 1.0));
    for shift in [false, true] {
        let f = |xs: &[Tensor]| {
            let k = names.len();
            let bound: BoundParams = names.iter().cloned().zip(xs[..k].iter().cloned()).collect();
            let p = SwinBlockParams::bind(&bound, "blk", 2, 2, shift, true).map_err(to_tensor)?;
            swin_block(&xs[k], &p, Some(&xs[k + 1])).map_err(to_tensor)
        };
        let err = gradient_check(f, &point, 1e-5, None).unwrap();
        assert!(err < 1e-4, "shift {shift}: {err:e}");
    }
}

#[test]
fn cross_attention_gradients() {
    let mut store = ParamStore::new();
    CrossAttentionParams::init(&mut store, &mut rng(41), "x", 3, 4, RANDOM).unwrap();
    let (names, mut point) = named_point(&store);
    point.push(uniform(&mut rng(42), &[3, 4, 4], -1.0, 1.0));
    point.push(uniform(&mut rng(43), &[4, 4, 4], -1.0, 1.0));
    let f = |xs: &[Tensor]| {
        let bound: BoundParams = names.iter().cloned().zip(xs[..3].iter().cloned()).collect();
        let p = CrossAttentionParams::bind(&bound, "x").map_err(to_tensor)?;
        cross_attention_fuse(&xs[3], &xs[4], &p).map_err(to_tensor)
    };
    let err = gradient_check(f, &point, 1e-5, None).unwrap();
    assert!(err < 1e-4, "{err:e}");
}

fn to_tensor(e: dosediff::Error) -> dosediff::TensorError {
    match e {
        dosediff::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn time_embeddings_are_bounded_and_distinct() {
    let embs: Vec<Vec<f64>> = (0..=50).map(|t| time_embedding(t, 8).unwrap().to_vec()).collect();
    for e in &embs {
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            assert_ne!(embs[i], embs[j], "t={i} and t={j}");
        }
    }
    let zero = &embs[0];
    assert!(zero[..4].iter().all(|&v| v == 0.0) && zero[4..].iter().all(|&v| v == 1.0));
}
