//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sret::accounting::{count_macs, count_params, verify_cost_equivalence};
use sret::attention::{sliced_group_mhsa, vanilla_mhsa, AttentionParams, PermSource, PermutationMode};
use sret::blocks::{mixer_block_forward, MixerBlockParams};
use sret::checkpoint::{decode, encode, Checkpoint};
use sret::config::RunConfig;
use sret::diagnostics::model_gradcheck;
use sret::init::Initializer;
use sret::model::{build_model, preset, ForwardOptions, ModelConfig};
use sret::tensor::gradcheck::sample_coords;
use sret::tensor::{grad_check_finite_diff, ParamStore, Permutation, Tape, Tensor};
use sret::train::{initial_loss, soft_distill_loss, train_loop, SynthDataset, TrainConfig, TrainState};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value / target - 1.0).abs() <= tol
}

fn params_of(c: &ModelConfig) -> u64 {
    count_params(&build_model::<f32>(c, 0).expect("preset builds"))
}

fn random_images(batch: usize, resolution: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[batch, 3, resolution, resolution], |_| rng.random_range(-1.0..1.0))
}

fn parameter_counts() -> Outcome {
    let targets = [("deit_t", 5.7e6, 0.02), ("sret_t", 4.76e6, 0.02), ("sret_tl", 4.99e6, 0.02), ("sret_s", 20.9e6, 0.03)];
    let mut report = Vec::new();
    for (name, target, tol) in targets {
        let c = preset(name).map_err(|e| e.to_string())?;
        let registry = params_of(&c);
        let symbolic = count_macs(&c, 224).map_err(|e| e.to_string())?.total_params();
        ensure(registry == symbolic, || format!("{name}: registry {registry} vs cost model {symbolic}"))?;
        ensure(within(registry as f64, target, tol), || format!("{name}: {registry} outside {target} ± {tol}"))?;
        report.push(format!("{name} {:.3}M", registry as f64 / 1e6));
    }
    Ok(report.join(", "))
}

fn recursion_invariance() -> Outcome {
    let base = preset("deit_t").map_err(|e| e.to_string())?;
    let counts: Vec<u64> = (1..=3).map(|n| params_of(&base.clone().with_recursions(n))).collect();
    ensure(counts.iter().all(|&c| c == counts[0]), || format!("counts differ: {counts:?}"))?;
    Ok(format!("deit_t 1x/2x/3x all {} parameters", counts[0]))
}

fn mac_counts() -> Outcome {
    let macs = |c: &ModelConfig| count_macs(c, 224).map(|r| r.total_macs() as f64).map_err(|e| e.to_string());
    let deit = macs(&preset("deit_t").map_err(|e| e.to_string())?)?;
    let sret = preset("sret_t").map_err(|e| e.to_string())?;
    let global = macs(&sret.clone().with_global_attention())?;
    let grouped = macs(&sret)?;
    ensure(within(deit, 1.3e9, 0.05), || format!("deit_t {deit} outside 1.3B ± 5%"))?;
    ensure(within(global, 1.38e9, 0.05), || format!("sret_t global {global} outside 1.38B ± 5%"))?;
    ensure(within(grouped, 1.12e9, 0.05), || format!("sret_t grouped {grouped} outside 1.12B ± 5%"))?;
    ensure(global - grouped >= 0.2e9, || format!("gap {} below 0.2B", global - grouped))?;
    Ok(format!(
        "deit_t {:.3}B, sret_t global {:.3}B, grouped {:.3}B",
        deit / 1e9,
        global / 1e9,
        grouped / 1e9
    ))
}

fn cost_equivalence() -> Outcome {
    let mut passed = 0;
    for n in [1usize, 2, 4, 8] {
        for g in [1usize, 2, 4, 8] {
            let t = verify_cost_equivalence(196, 64, n, g).map_err(|e| format!("N={n} G={g}: {e}"))?;
            ensure(t.holds && t.ratio == Ratio::new(n as u64, g as u64), || format!("N={n} G={g}: ratio {}", t.ratio))?;
            passed += 1;
        }
    }
    Ok(format!("{passed}/16 (N, G) pairs exact at L=196, D=64"))
}

/// Per-head loop attention in which token `i` may attend to `j` only when
/// both fall in the same block of `block` consecutive positions.
fn masked_attention(store: &ParamStore<f64>, p: &AttentionParams, x: &Tensor<f64>, block: usize) -> Tensor<f64> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (heads, dk) = (p.heads, d / p.heads);
    let (wqkv, bqkv) = (store.get(p.qkv_weight).data(), store.get(p.qkv_bias).data());
    let (wo, bo) = (store.get(p.proj_weight).data(), store.get(p.proj_bias).data());
    let xd = x.data();
    let proj = |bi: usize, i: usize, col: usize| -> f64 {
        bqkv[col] + (0..d).map(|c| xd[(bi * n + i) * d + c] * wqkv[c * 3 * d + col]).sum::<f64>()
    };
    let mut cat = vec![0.0; b * n * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<Option<f64>> = (0..n)
                    .map(|j| {
                        (i / block == j / block).then(|| {
                            (0..dk).map(|e| proj(bi, i, h * dk + e) * proj(bi, j, d + h * dk + e)).sum::<f64>()
                                / (dk as f64).sqrt()
                        })
                    })
                    .collect();
                let top = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - top).exp())).collect();
                let z: f64 = weights.iter().sum();
                for e in 0..dk {
                    cat[(bi * n + i) * d + h * dk + e] =
                        (0..n).map(|j| weights[j] / z * proj(bi, j, 2 * d + h * dk + e)).sum();
                }
            }
        }
    }
    Tensor::from_fn(&[b, n, d], |idx| {
        let (row, col) = (idx / d, idx % d);
        bo[col] + (0..d).map(|c| cat[row * d + c] * wo[c * d + col]).sum::<f64>()
    })
}

fn attention_setup(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> (ParamStore<f64>, AttentionParams) {
    let mut store = ParamStore::new();
    let p = AttentionParams::register(&mut Initializer::new(&mut store, rng.random()), "attn", dim, heads).expect("registers");
    // sharpen the attention so slices differ visibly from global attention
    for id in p.ids() {
        let t = store.get(id).map(|v| v * 20.0);
        store.set(id, t).expect("same shape");
    }
    (store, p)
}

fn attention_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_global = 0.0f64;
    for case in 0..100 {
        let heads = rng.random_range(1..=4);
        let dim = heads * rng.random_range(1..=6);
        let (b, n) = (rng.random_range(1..=3), rng.random_range(1..=24));
        let (store, p) = attention_setup(&mut rng, dim, heads);
        let x = Tensor::from_fn(&[b, n, dim], |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let vanilla = vanilla_mhsa(&store, &p, tape.constant(x.clone())).map_err(|e| e.to_string())?;
        let mut perms = PermSource::sampled(case);
        let sliced = sliced_group_mhsa(&store, &p, tape.constant(x), 1, PermutationMode::PermuteInverse, &mut perms)
            .map_err(|e| e.to_string())?;
        let diff = vanilla.value().max_abs_diff(&sliced.value()).map_err(|e| e.to_string())?;
        worst_global = worst_global.max(diff);
    }
    ensure(worst_global < 1e-6, || format!("groups=1 vs vanilla differs by {worst_global:e}"))?;
    let mut worst_masked = 0.0f64;
    let mut cases = 0;
    for n in 1..=16usize {
        for g in (1..=n).filter(|g| n % g == 0) {
            let heads = rng.random_range(1..=2);
            let dim = heads * rng.random_range(2..=4);
            let (store, p) = attention_setup(&mut rng, dim, heads);
            let x = Tensor::from_fn(&[2, n, dim], |_| rng.random_range(-1.0..1.0));
            let tape = Tape::new();
            let mut perms = PermSource::Fixed(Permutation::identity(n));
            let y = sliced_group_mhsa(&store, &p, tape.constant(x.clone()), g, PermutationMode::PermuteInverse, &mut perms)
                .map_err(|e| e.to_string())?;
            let want = masked_attention(&store, &p, &x, n / g);
            worst_masked = worst_masked.max(y.value().max_abs_diff(&want).map_err(|e| e.to_string())?);
            cases += 1;
        }
    }
    ensure(worst_masked < 1e-6, || format!("identity-permutation groups vs masked oracle differs by {worst_masked:e}"))?;
    Ok(format!(
        "100 global cases max {worst_global:.1e}; {cases} masked cases (n <= 16) max {worst_masked:.1e}"
    ))
}

fn permutation_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::<f64>::new();
    for i in 0..1000 {
        let n = if i == 0 { 784 } else { rng.random_range(1..=784) };
        let p = Permutation::random(n, &mut rng);
        let x = Tensor::from_fn(&[1, n, 3], |_| rng.random_range(-1.0..1.0));
        let there = tape.constant(x.clone()).gather_rows(&p).map_err(|e| e.to_string())?;
        let back = there.gather_rows(&p.inverse()).map_err(|e| e.to_string())?;
        let same = back.value().data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("round trip not bitwise for n={n}"))?;
    }
    Ok("1000 random permutations up to n=784 restore bitwise".into())
}

fn gradient_correctness() -> Outcome {
    let report = model_gradcheck(&preset("desk").map_err(|e| e.to_string())?, 0, 3, false).map_err(|e| e.to_string())?;
    ensure(report.coords >= 200, || format!("only {} coordinates", report.coords))?;
    for module in ["attention", "ffn", "nll", "lrc", "stem", "head"] {
        ensure(report.per_module.contains_key(module), || format!("no {module} coordinates sampled"))?;
    }
    ensure(report.max_rel_error < 1e-4, || format!("max relative error {:e} at {:?}", report.max_rel_error, report.worst))?;
    Ok(format!(
        "{} coordinates over {} modules, max relative error {:.2e}",
        report.coords,
        report.per_module.len(),
        report.max_rel_error
    ))
}

fn convergence_and_distillation() -> Outcome {
    let mut c = preset("desk").map_err(|e| e.to_string())?;
    c.num_classes = 4;
    let cfg = TrainConfig::default();
    let seed = 0;
    let synth = SynthDataset::new(seed, 4, c.input_resolution).map_err(|e| e.to_string())?;
    let (train, eval) = (synth.generate::<f32>(cfg.train_samples, 0), synth.generate::<f32>(cfg.eval_samples, 1));
    let mut model = build_model::<f32>(&c, seed).map_err(|e| e.to_string())?;
    let start = initial_loss(&model, &train, &cfg, seed, None).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(&cfg);
    let history = train_loop(&mut model, &train, &eval, &cfg, seed, None, &mut state, cfg.epochs).map_err(|e| e.to_string())?;
    let end = history.last().ok_or("no epochs ran")?.loss;
    ensure(history.len() <= 30, || format!("{} epochs", history.len()))?;
    ensure(end < 0.1 * start, || format!("final loss {end} not below 0.1 x initial {start}"))?;

    let student = build_model::<f64>(&c, 1).map_err(|e| e.to_string())?;
    let teacher = student.clone();
    let x = random_images(4, c.input_resolution, 2);
    let teacher_logits = teacher
        .forward(&Tape::new(), &x, ForwardOptions::eval())
        .map_err(|e| e.to_string())?
        .logits
        .to_tensor();
    let tape = Tape::new();
    let logits = student.forward(&tape, &x, ForwardOptions::eval()).map_err(|e| e.to_string())?.logits;
    let loss = soft_distill_loss(logits, &teacher_logits).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let g = grads.wrt(logits).ok_or("no gradient reached the logits")?;
    let largest = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(largest <= 1e-9, || format!("fixed-point logit gradient {largest:e}"))?;
    Ok(format!(
        "loss {start:.4} -> {end:.2e} in {} epochs; teacher == student logit gradient {largest:.1e}",
        history.len()
    ))
}

fn mixed_depth_consistency() -> Outcome {
    let mut model = build_model::<f64>(&preset("desk").map_err(|e| e.to_string())?, 3).map_err(|e| e.to_string())?;
    let (entries, params) = (model.store.len(), model.param_count());
    model.build_mixed_depth().map_err(|e| e.to_string())?;
    let (dim, classes) = (64u64, 10u64);
    ensure(model.store.len() == entries + 2, || format!("registry grew by {} entries", model.store.len() - entries))?;
    ensure(model.param_count() - params == dim * classes + classes, || {
        format!("registry grew by {} parameters", model.param_count() - params)
    })?;
    let tape = Tape::new();
    let out = model
        .forward(&tape, &random_images(2, 32, 4), ForwardOptions::train(7).with_mixed_depth())
        .map_err(|e| e.to_string())?;
    let unrolled = out.unrolled_logits.ok_or("no unrolled branch")?;
    let same = out.logits.value().data().iter().zip(unrolled.value().data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "branches differ".into())?;
    Ok(format!("branches bitwise equal; registry +1 head ({} parameters)", dim * classes + classes))
}

fn mixer_recursion() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let p = MixerBlockParams::register(&mut Initializer::new(&mut store, 8), "mix", 16, 12, 8, 24).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[2, 16, 12], |_| rng.random_range(-1.0..1.0));
    let tape = Tape::new();
    let twice = mixer_block_forward(&store, &p, tape.constant(x.clone()), 2).map_err(|e| e.to_string())?;
    let once = mixer_block_forward(&store, &p, tape.constant(x.clone()), 1).map_err(|e| e.to_string())?;
    let manual = mixer_block_forward(&store, &p, once, 1).map_err(|e| e.to_string())?;
    ensure(*twice.value() == *manual.value(), || "recursions=2 differs from two applications".into())?;

    let coords = sample_coords(&store, 6, &mut rng, |_| true);
    let block = grad_check_finite_diff(&mut store, &coords, 1e-5, |tape, s| {
        let y = mixer_block_forward(s, &p, tape.constant(x.clone()), 2)?;
        Ok(y.mul(y)?.mean())
    })
    .map_err(|e| e.to_string())?;
    ensure(block.max_rel_error < 1e-4, || format!("block gradient error {:e}", block.max_rel_error))?;

    let mut c = preset("mixer_b16_recursive").map_err(|e| e.to_string())?;
    c.stage_dims = vec![16];
    c.stage_blocks = vec![2];
    c.mixer_token_hidden = 8;
    c.patch_size = 8;
    c.input_resolution = 32;
    c.num_classes = 4;
    let model = model_gradcheck(&c, 1, 4, false).map_err(|e| e.to_string())?;
    ensure(model.max_rel_error < 1e-4, || format!("model gradient error {:e}", model.max_rel_error))?;
    Ok(format!(
        "recursions=2 bitwise equals two applications; gradient error block {:.1e}, desk mixer {:.1e}",
        block.max_rel_error, model.max_rel_error
    ))
}

fn checkpoint_round_trip() -> Outcome {
    let mut run = RunConfig::from_preset("desk").map_err(|e| e.to_string())?;
    run.model.num_classes = 4;
    run.train.epochs = 2;
    run.train.warmup_epochs = 0.0;
    run.train.mixed_depth = true;
    let synth = SynthDataset::new(1, 4, 32).map_err(|e| e.to_string())?;
    let (train, eval) = (synth.generate::<f32>(32, 0), synth.generate::<f32>(8, 1));
    let mut model = build_model::<f32>(&run.model, 1).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(&run.train);
    train_loop(&mut model, &train, &eval, &run.train, 1, None, &mut state, 1).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint {
        run,
        seed: 1,
        model,
        state: Some(state),
    };
    let bytes = encode(&ckpt).map_err(|e| e.to_string())?;
    let back: Checkpoint<f32> = decode(&bytes, Some(&ckpt.run.model)).map_err(|e| e.to_string())?;
    let mut tensors = 0;
    for ((_, a), (_, b)) in ckpt.model.store.entries().zip(back.model.store.entries()) {
        ensure(a.name == b.name, || format!("{} vs {}", a.name, b.name))?;
        let (x, y) = (&a.value, &b.value);
        let same = x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits());
        ensure(same, || format!("{} changed", a.name))?;
        tensors += 1;
    }
    ensure(ckpt.model.store.len() == back.model.store.len(), || "tensor count changed".into())?;
    ensure(back.state == ckpt.state, || "optimizer state changed".into())?;
    ensure(encode(&back).map_err(|e| e.to_string())? == bytes, || "re-encoding differs".into())?;
    ensure(decode::<f32>(&bytes[..bytes.len() - 1], None).is_err(), || "truncated file accepted".into())?;
    Ok(format!("{tensors} tensors and optimizer state restored bitwise, no network used"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("parameter counts", parameter_counts),
        ("recursion parameter invariance", recursion_invariance),
        ("multiply-accumulate counts at 224", mac_counts),
        ("group/recursion cost equivalence", cost_equivalence),
        ("sliced attention equivalence", attention_equivalence),
        ("permutation soundness", permutation_soundness),
        ("whole-model gradient check", gradient_correctness),
        ("desk convergence and distillation fixed point", convergence_and_distillation),
        ("mixed-depth consistency", mixed_depth_consistency),
        ("mixer recursion", mixer_recursion),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failures = 0;
    let mut out = std::io::stdout().lock();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(detail) => format!("criterion {:>2} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failures += 1;
                format!("criterion {:>2} FAIL {name} ({secs:.1}s): {why}", i + 1)
            }
        };
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out, "{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
