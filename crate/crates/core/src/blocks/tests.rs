use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::sample_coords;
use crate::tensor::{grad_check_finite_diff, Tape};

fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn set_scalar(store: &mut ParamStore<f64>, id: ParamId, v: f64) {
    store.set(id, Tensor::full(&[1], v)).unwrap();
}

fn block(store: &mut ParamStore<f64>, seed: u64, dim: usize, lrc: bool) -> TransformerBlockParams {
    let mut init = Initializer::new(store, seed);
    TransformerBlockParams::register(&mut init, "blk", dim, 2, 2.0, lrc).unwrap()
}

fn ctx(store: &ParamStore<f64>, seed: u64) -> Forward<'_, f64> {
    Forward::new(store, PermSource::sampled(seed))
}

#[test]
fn hidden_extent_rounds_to_nearest() {
    assert_eq!(hidden_extent(8, 3.6), 29);
    assert_eq!(hidden_extent(64, 3.6), 230);
    assert_eq!(hidden_extent(126, 3.0), 378);
}

#[test]
fn ffn_zero_weights_emit_bias() {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, 0);
    let p = FfnParams::register(&mut init, "ffn", 8, 3.6).unwrap();
    assert_eq!(p.hidden, 29);
    assert_eq!(p.param_count(), 8 * 29 + 29 + 29 * 8 + 8);
    assert_eq!(p.param_count(), 501);
    store.set(p.w1, Tensor::zeros(&[8, 29])).unwrap();
    store.set(p.w2, Tensor::zeros(&[29, 8])).unwrap();
    let b2 = input(&[8], 1);
    store.set(p.b2, b2.clone()).unwrap();
    let tape = Tape::new();
    let y = ffn_forward(&store, &p, tape.constant(input(&[2, 4, 8], 2))).unwrap();
    assert_eq!(y.shape(), vec![2, 4, 8]);
    for row in y.value().data().chunks(8) {
        assert_eq!(row, b2.data());
    }
}

#[test]
fn ffn_matches_loop_oracle() {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, 3);
    let p = FfnParams::register(&mut init, "ffn", 4, 1.5).unwrap();
    let x = input(&[3, 4], 4);
    let tape = Tape::new();
    let y = ffn_forward(&store, &p, tape.constant(x.clone())).unwrap().to_tensor();
    let (w1, b1, w2, b2) = (store.get(p.w1).data(), store.get(p.b1).data(), store.get(p.w2).data(), store.get(p.b2).data());
    let h = p.hidden;
    for r in 0..3 {
        let hid: Vec<f64> = (0..h)
            .map(|j| {
                let z = b1[j] + (0..4).map(|c| x.data()[r * 4 + c] * w1[c * h + j]).sum::<f64>();
                0.5 * z * (1.0 + libm::erf(z / 2f64.sqrt()))
            })
            .collect();
        for c in 0..4 {
            let want = b2[c] + (0..h).map(|j| hid[j] * w2[j * 4 + c]).sum::<f64>();
            assert!((y.data()[r * 4 + c] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn unit_coefficients_reproduce_plain_block_bitwise() {
    let mut with = ParamStore::new();
    let mut without = ParamStore::new();
    let a = block(&mut with, 5, 8, true);
    let b = block(&mut without, 5, 8, false);
    let x = input(&[2, 4, 8], 6);
    let (ta, tb) = (Tape::new(), Tape::new());
    let ya = block_forward(&mut ctx(&with, 1), &a, ta.constant(x.clone()), 2).unwrap();
    let yb = block_forward(&mut ctx(&without, 1), &b, tb.constant(x), 2).unwrap();
    assert_eq!(*ya.value(), *yb.value());
}

#[test]
fn zeroed_branches_make_identity() {
    let mut store = ParamStore::new();
    let p = block(&mut store, 7, 8, true);
    let lrc = p.lrc.clone().unwrap();
    set_scalar(&mut store, lrc.alpha, 0.0);
    set_scalar(&mut store, lrc.gamma, 0.0);
    let x = input(&[1, 4, 8], 8);
    let tape = Tape::new();
    let y = block_forward(&mut ctx(&store, 2), &p, tape.constant(x.clone()), 1).unwrap();
    assert_eq!(y.to_tensor(), x);
}

#[test]
fn nll_identity_and_size() {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, 9);
    let p = NllParams::register(&mut init, "nll", 64, 1.0, true).unwrap();
    assert_eq!(p.mlp.param_count(), 64 * 64 * 2 + 64 * 2);
    assert_eq!(p.mlp.param_count(), 8320);
    assert_eq!(store.count_trainable(), 8320 + 128 + 2);
    let lrc = p.lrc.clone().unwrap();
    set_scalar(&mut store, lrc.zeta, 0.0);
    let x = input(&[2, 3, 64], 10);
    let tape = Tape::new();
    let y = nll_forward(&ctx(&store, 0), &p, tape.constant(x.clone())).unwrap();
    assert_eq!(y.to_tensor(), x);
}

fn recursive(store: &mut ParamStore<f64>, groups: Vec<usize>, placement: NllPlacement) -> RecursiveBlockSpec {
    let mut init = Initializer::new(store, 11);
    let shared = TransformerBlockParams::register(&mut init, "rb", 8, 2, 2.0, true).unwrap();
    let nll = (0..placement.count(groups.len()))
        .map(|i| NllParams::register(&mut init, &format!("rb.nll{i}"), 8, 1.0, true).unwrap())
        .collect();
    RecursiveBlockSpec {
        shared,
        groups,
        nll,
        placement,
    }
}

#[test]
fn recursion_unrolls_to_manual_composition() {
    let mut store = ParamStore::new();
    let spec = recursive(&mut store, vec![2, 1], NllPlacement::PerRecursion);
    let x = input(&[2, 4, 8], 12);
    let tape = Tape::new();
    let y = recursive_block_forward(&mut ctx(&store, 3), &spec, tape.constant(x.clone())).unwrap();

    let mut c = ctx(&store, 3);
    let z = block_forward(&mut c, &spec.shared, tape.constant(x), 2).unwrap();
    let z = nll_forward(&c, &spec.nll[0], z).unwrap();
    let z = block_forward(&mut c, &spec.shared, z, 1).unwrap();
    let z = nll_forward(&c, &spec.nll[1], z).unwrap();
    assert_eq!(*y.value(), *z.value());
    assert_eq!(y.shape(), vec![2, 4, 8]);
}

#[test]
fn single_recursion_is_block_then_projection() {
    let mut store = ParamStore::new();
    let spec = recursive(&mut store, vec![1], NllPlacement::PerRecursion);
    let x = input(&[1, 4, 8], 13);
    let tape = Tape::new();
    let y = recursive_block_forward(&mut ctx(&store, 0), &spec, tape.constant(x.clone())).unwrap();
    let mut c = ctx(&store, 0);
    let z = block_forward(&mut c, &spec.shared, tape.constant(x), 1).unwrap();
    let z = nll_forward(&c, &spec.nll[0], z).unwrap();
    assert_eq!(*y.value(), *z.value());
}

#[test]
fn shared_weights_do_not_grow_with_recursions() {
    let count = |n: usize, placement| {
        let mut store = ParamStore::new();
        let spec = recursive(&mut store, vec![1; n], placement);
        let shared = store.count_trainable() - spec.nll.len() as u64 * (8 * 8 * 2 + 8 + 8 + 16 + 2);
        (shared, store.count_trainable())
    };
    let (s1, _) = count(1, NllPlacement::PerRecursion);
    let (s3, _) = count(3, NllPlacement::PerRecursion);
    assert_eq!(s1, s3);
    let (_, t1) = count(1, NllPlacement::None);
    let (_, t3) = count(3, NllPlacement::None);
    assert_eq!(t1, t3);
    assert_eq!(NllPlacement::Between.count(2), 1);
}

#[test]
fn malformed_spec_is_rejected() {
    let mut store = ParamStore::new();
    let mut spec = recursive(&mut store, vec![1, 1], NllPlacement::PerRecursion);
    spec.nll.pop();
    let tape = Tape::new();
    let x = tape.constant(input(&[1, 4, 8], 0));
    assert!(recursive_block_forward(&mut ctx(&store, 0), &spec, x).is_err());
}

#[test]
fn collapsed_block_without_projection_is_trivial() {
    let mut store = ParamStore::new();
    let spec = recursive(&mut store, vec![1, 1], NllPlacement::None);
    let lrc = spec.shared.lrc.clone().unwrap();
    set_scalar(&mut store, lrc.alpha, 0.0);
    set_scalar(&mut store, lrc.gamma, 0.0);
    let x = input(&[1, 4, 8], 14);
    let tape = Tape::new();
    let y = recursive_block_forward(&mut ctx(&store, 0), &spec, tape.constant(x.clone())).unwrap();
    assert_eq!(y.to_tensor(), x);
}

#[test]
fn block_coefficients_pass_gradcheck() {
    let mut store = ParamStore::new();
    let spec = recursive(&mut store, vec![2, 1], NllPlacement::PerRecursion);
    let x = input(&[2, 4, 8], 15);
    let coords: Vec<_> = store
        .entries()
        .filter(|(_, e)| e.name.contains(".lrc."))
        .map(|(id, _)| (id, 0))
        .collect();
    assert_eq!(coords.len(), 4 + 2 * 2);
    let r = grad_check_finite_diff(&mut store, &coords, 1e-5, |tape, s| {
        let y = recursive_block_forward(&mut ctx(s, 4), &spec, tape.constant(x.clone()))?;
        Ok(y.mul(y)?.mean())
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{:?}", r.worst());
}

#[test]
fn recursive_block_passes_gradcheck() {
    let mut store = ParamStore::new();
    let spec = recursive(&mut store, vec![2, 2], NllPlacement::PerRecursion);
    let x = input(&[2, 4, 8], 16);
    let coords = sample_coords(&store, 3, &mut ChaCha8Rng::seed_from_u64(0), |_| true);
    let r = grad_check_finite_diff(&mut store, &coords, 1e-5, |tape, s| {
        let y = recursive_block_forward(&mut ctx(s, 5), &spec, tape.constant(x.clone()))?;
        Ok(y.mul(y)?.mean())
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{:?}", r.worst());
}

fn mixer(store: &mut ParamStore<f64>) -> MixerBlockParams {
    let mut init = Initializer::new(store, 17);
    MixerBlockParams::register(&mut init, "mix", 16, 8, 6, 12).unwrap()
}

#[test]
fn mixer_recursion_is_repeated_application() {
    let mut store = ParamStore::new();
    let p = mixer(&mut store);
    let x = input(&[2, 16, 8], 18);
    let tape = Tape::new();
    let twice = mixer_block_forward(&store, &p, tape.constant(x.clone()), 2).unwrap();
    let once = mixer_block_forward(&store, &p, tape.constant(x), 1).unwrap();
    let again = mixer_block_forward(&store, &p, once, 1).unwrap();
    assert_eq!(*twice.value(), *again.value());
    assert_eq!(twice.shape(), vec![2, 16, 8]);
}

#[test]
fn zero_mixer_is_identity() {
    let mut store = ParamStore::new();
    let p = mixer(&mut store);
    for id in [p.token.w1, p.token.w2, p.channel.w1, p.channel.w2] {
        let z = Tensor::zeros(store.get(id).shape());
        store.set(id, z).unwrap();
    }
    let x = input(&[2, 16, 8], 19);
    let tape = Tape::new();
    let y = mixer_block_forward(&store, &p, tape.constant(x.clone()), 3).unwrap();
    assert_eq!(y.to_tensor(), x);
}

#[test]
fn mixer_passes_gradcheck() {
    let mut store = ParamStore::new();
    let p = mixer(&mut store);
    let x = input(&[2, 16, 8], 20);
    let coords = sample_coords(&store, 4, &mut ChaCha8Rng::seed_from_u64(1), |_| true);
    let r = grad_check_finite_diff(&mut store, &coords, 1e-5, |tape, s| {
        let y = mixer_block_forward(s, &p, tape.constant(x.clone()), 2)?;
        Ok(y.mul(y)?.mean())
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{:?}", r.worst());
}

fn block_list(store: &mut ParamStore<f64>, n: usize) -> Vec<TransformerBlockParams> {
    let mut init = Initializer::new(store, 21);
    (0..n)
        .map(|i| TransformerBlockParams::register(&mut init, &format!("b{i}"), 8, 2, 2.0, true).unwrap())
        .collect()
}

#[test]
fn single_external_loop_is_sequential() {
    let mut store = ParamStore::new();
    let blocks = block_list(&mut store, 3);
    let x = input(&[1, 4, 8], 22);
    let tape = Tape::new();
    let y = external_loop_forward(&mut ctx(&store, 6), &blocks, tape.constant(x.clone()), 1, &[2], &[]).unwrap();
    let mut c = ctx(&store, 6);
    let mut z = tape.constant(x);
    for b in &blocks {
        z = block_forward(&mut c, b, z, 2).unwrap();
    }
    assert_eq!(*y.value(), *z.value());
}

#[test]
fn external_loop_reuses_weights_across_cycles() {
    let mut store = ParamStore::new();
    let blocks = block_list(&mut store, 2);
    let before = store.len();
    let x = input(&[2, 4, 8], 23);
    let tape = Tape::new();
    let mut c = ctx(&store, 7);
    let y = external_loop_forward(&mut c, &blocks, tape.constant(x.clone()), 2, &[1, 2], &[]).unwrap();
    assert_eq!(c.applications, 4);
    assert_eq!(store.len(), before);
    assert_eq!(y.shape(), vec![2, 4, 8]);

    // the tape gradient (sum over cycles) agrees with central differences
    let w = blocks[0].attn.qkv_weight;
    let coords: Vec<_> = (0..10).map(|i| (w, i * 17)).collect();
    let r = grad_check_finite_diff(&mut store, &coords, 1e-5, |tape, s| {
        let y = external_loop_forward(&mut ctx(s, 7), &blocks, tape.constant(x.clone()), 2, &[1, 2], &[])?;
        Ok(y.mul(y)?.mean())
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{:?}", r.worst());
}

#[test]
fn stochastic_depth_keeps_or_drops_whole_samples() {
    let mut store = ParamStore::new();
    let p = block(&mut store, 24, 8, true);
    let x = input(&[8, 4, 8], 25);
    let tape = Tape::new();
    let mut c = ctx(&store, 8);
    c.drop_rng = Some(ChaCha8Rng::seed_from_u64(0));
    c.drop_schedule = vec![1.0 - 1e-12];
    let y = block_forward(&mut c, &p, tape.constant(x.clone()), 1).unwrap();
    // near-certain drop on both branches leaves the skip path only
    assert_eq!(y.to_tensor(), x);
}
