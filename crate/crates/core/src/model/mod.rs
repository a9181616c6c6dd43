//! Full networks: stem, stages of recursive blocks, conv-pooling between
//! stages, and a pooled linear classifier.

mod config;

pub use config::{preset, LoopMode, ModelConfig, Preset, Variant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::PermSource;
use crate::blocks::{
    block_forward, external_loop_forward, mixer_block_forward, nll_forward, recursive_block_forward, Forward,
    LayerNormParams, MixerBlockParams, NllParams, RecursiveBlockSpec, TransformerBlockParams,
};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::scalar::Scalar;
use crate::tensor::{conv2d_grouped, ParamId, ParamStore, Tape, Tensor, Var, NORM_EPS};

/// Running-statistics momentum of the stem's batch norms.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBnRelu {
    pub weight: ParamId,
    pub bn: BatchNormParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stem {
    /// Three stride-2 3×3 conv-BN-ReLU layers.
    Conv(Vec<ConvBnRelu>),
    /// Non-overlapping patch projection.
    Patch { weight: ParamId, bias: ParamId, patch: usize },
}

/// Grouped stride-2 3×3 convolution between stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvPool {
    pub weight: ParamId,
    pub bias: ParamId,
    pub from_dim: usize,
    pub to_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageBody {
    Internal(Vec<RecursiveBlockSpec>),
    External {
        blocks: Vec<TransformerBlockParams>,
        groups: Vec<usize>,
        nll: Vec<NllParams>,
    },
    Mixer {
        blocks: Vec<MixerBlockParams>,
        recursions: usize,
    },
}

/// One step of the fully unrolled block sequence.
enum Step<'a> {
    Block(&'a TransformerBlockParams, usize),
    Nll(&'a NllParams),
    Mixer(&'a MixerBlockParams),
}

impl StageBody {
    fn unrolled(&self) -> Vec<Step<'_>> {
        let mut steps = Vec::new();
        match self {
            StageBody::Internal(specs) => {
                for spec in specs {
                    let n = spec.recursions();
                    for (i, &g) in spec.groups.iter().enumerate() {
                        steps.push(Step::Block(&spec.shared, g));
                        if let Some(j) = spec.placement.after(i, n) {
                            steps.push(Step::Nll(&spec.nll[j]));
                        }
                    }
                }
            }
            StageBody::External { blocks, groups, nll } => {
                for (cycle, &g) in groups.iter().enumerate() {
                    steps.extend(blocks.iter().map(|b| Step::Block(b, g)));
                    if let Some(p) = nll.get(cycle) {
                        steps.push(Step::Nll(p));
                    }
                }
            }
            StageBody::Mixer { blocks, recursions } => {
                for b in blocks {
                    steps.extend((0..*recursions).map(|_| Step::Mixer(b)));
                }
            }
        }
        steps
    }
}

/// Parameter handles and wiring of a network; the values live in a
/// [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub stem: Stem,
    pub pos_embed: Option<ParamId>,
    pub stages: Vec<StageBody>,
    pub pools: Vec<ConvPool>,
    pub final_norm: Option<LayerNormParams>,
    pub head: HeadParams,
    /// Classifier of the unrolled branch in mixed-depth training.
    pub unrolled_head: Option<HeadParams>,
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct SretModel<T> {
    pub net: Network,
    pub store: ParamStore<T>,
}

/// Per-call forward settings.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Batch statistics in the stem and stochastic depth when true.
    pub train: bool,
    pub perms: PermSource,
    pub drop_seed: Option<u64>,
    /// Also run the unrolled branch through the second head.
    pub mixed_depth: bool,
}

impl ForwardOptions {
    /// Fresh permutations per attention call, drawn from `seed`.
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            perms: PermSource::sampled(seed),
            drop_seed: Some(seed ^ 0x9e37_79b9_7f4a_7c15),
            mixed_depth: false,
        }
    }

    /// Frozen statistics and no token shuffling.
    pub fn eval() -> Self {
        Self {
            train: false,
            perms: PermSource::Identity,
            drop_seed: None,
            mixed_depth: false,
        }
    }

    pub fn with_mixed_depth(mut self) -> Self {
        self.mixed_depth = true;
        self
    }
}

pub struct ForwardOutput<'t, T> {
    pub logits: Var<'t, T>,
    pub unrolled_logits: Option<Var<'t, T>>,
    /// New running-statistics values produced in training mode.
    pub running_stats: Vec<(ParamId, Tensor<T>)>,
}

fn register_bn<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str, c: usize) -> Result<BatchNormParams> {
    Ok(BatchNormParams {
        gain: init.ones(format!("{prefix}.gain"), &[c])?,
        bias: init.zeros(format!("{prefix}.bias"), &[c])?,
        running_mean: init.buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]))?,
        running_var: init.buffer(format!("{prefix}.running_var"), Tensor::ones(&[c]))?,
        channels: c,
    })
}

fn register_head<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str, dim: usize, classes: usize) -> Result<HeadParams> {
    Ok(HeadParams {
        weight: init.weight(format!("{prefix}.weight"), &[dim, classes])?,
        bias: init.zeros(format!("{prefix}.bias"), &[classes])?,
    })
}

/// Allocates every parameter of `config`, seeded by `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<SretModel<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, seed);
    let c = config;
    let tokens = c.tokens_per_stage()?;

    let stem = if c.stem_channels.is_empty() {
        let p = c.patch_size;
        Stem::Patch {
            weight: init.weight("stem.patch.weight", &[c.stage_dims[0], 3, p, p])?,
            bias: init.zeros("stem.patch.bias", &[c.stage_dims[0]])?,
            patch: p,
        }
    } else {
        let mut cin = 3;
        let mut layers = Vec::new();
        for (i, &cout) in c.stem_channels.iter().enumerate() {
            layers.push(ConvBnRelu {
                weight: init.conv(format!("stem.{i}.conv"), &[cout, cin, 3, 3])?,
                bn: register_bn(&mut init, &format!("stem.{i}.bn"), cout)?,
            });
            cin = cout;
        }
        Stem::Conv(layers)
    };
    let pos_embed = match c.pos_embed {
        true => Some(init.embedding("pos_embed", &[1, tokens[0], c.stage_dims[0]])?),
        false => None,
    };

    let rec = c.recursions_per_block;
    let mut stages = Vec::new();
    let mut pools = Vec::new();
    for s in 0..c.stages() {
        let dim = c.stage_dims[s];
        let heads = c.heads_per_stage[s];
        let groups = c.group_schedule.groups[s].clone();
        let body = match (c.variant, c.loop_mode) {
            (Variant::Mixer, _) => StageBody::Mixer {
                blocks: (0..c.stage_blocks[s])
                    .map(|b| {
                        let ch = crate::blocks::hidden_extent(dim, c.ffn_ratio);
                        MixerBlockParams::register(&mut init, &format!("s{s}.b{b}"), tokens[s], dim, c.mixer_token_hidden, ch)
                    })
                    .collect::<Result<_>>()?,
                recursions: rec,
            },
            (_, LoopMode::Internal) => StageBody::Internal(
                (0..c.stage_blocks[s])
                    .map(|b| {
                        let prefix = format!("s{s}.b{b}");
                        let shared = TransformerBlockParams::register(&mut init, &prefix, dim, heads, c.ffn_ratio, c.lrc)?;
                        let nll = (0..c.nll_placement.count(rec))
                            .map(|i| NllParams::register(&mut init, &format!("{prefix}.nll{i}"), dim, c.nll_ratio, c.lrc))
                            .collect::<Result<_>>()?;
                        Ok(RecursiveBlockSpec {
                            shared,
                            groups: groups.clone(),
                            nll,
                            placement: c.nll_placement,
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            (_, LoopMode::External) => {
                let blocks = (0..c.stage_blocks[s])
                    .map(|b| TransformerBlockParams::register(&mut init, &format!("s{s}.b{b}"), dim, heads, c.ffn_ratio, c.lrc))
                    .collect::<Result<_>>()?;
                let nll = (0..c.nll_placement.count(rec))
                    .map(|i| NllParams::register(&mut init, &format!("s{s}.nll{i}"), dim, c.nll_ratio, c.lrc))
                    .collect::<Result<_>>()?;
                StageBody::External { blocks, groups, nll }
            }
        };
        stages.push(body);
        if s + 1 < c.stages() {
            let (from_dim, to_dim) = (dim, c.stage_dims[s + 1]);
            pools.push(ConvPool {
                weight: init.conv(format!("pool{s}.weight"), &[to_dim, 1, 3, 3])?,
                bias: init.zeros(format!("pool{s}.bias"), &[to_dim])?,
                from_dim,
                to_dim,
            });
        }
    }
    let last = *c.stage_dims.last().expect("validated");
    let final_norm = match c.final_norm {
        true => Some(LayerNormParams::register(&mut init, "final_norm", last)?),
        false => None,
    };
    let head = register_head(&mut init, "head", last, c.num_classes)?;
    let net = Network {
        config: c.clone(),
        stem,
        pos_embed,
        stages,
        pools,
        final_norm,
        head,
        unrolled_head: None,
    };
    Ok(SretModel { net, store })
}

impl<T: Scalar> SretModel<T> {
    /// Adds the second classifier used by the unrolled branch, initialized
    /// as a copy of the main head.
    pub fn build_mixed_depth(&mut self) -> Result<()> {
        if self.net.unrolled_head.is_some() {
            return Err(Error::config("model already has an unrolled-branch head"));
        }
        if self.net.config.recursions_per_block < 2 {
            return Err(Error::config("mixed-depth training needs at least two recursions"));
        }
        let w = self.store.get(self.net.head.weight).clone();
        let b = self.store.get(self.net.head.bias).clone();
        self.net.unrolled_head = Some(HeadParams {
            weight: self.store.register("unrolled_head.weight", crate::tensor::ParamKind::Weight, w)?,
            bias: self.store.register("unrolled_head.bias", crate::tensor::ParamKind::NoDecay, b)?,
        });
        Ok(())
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, images: &Tensor<T>, opts: ForwardOptions) -> Result<ForwardOutput<'t, T>> {
        self.net.forward(&self.store, tape, images, opts)
    }

    /// Writes running statistics returned by a training-mode forward.
    pub fn apply_running_stats(&mut self, stats: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, value) in stats {
            self.store.set(id, value)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> u64 {
        self.store.count_trainable()
    }
}

fn batch_norm<'t, T: Scalar>(
    store: &ParamStore<T>,
    bn: &BatchNormParams,
    x: Var<'t, T>,
    train: bool,
    stats: &mut Vec<(ParamId, Tensor<T>)>,
) -> Result<Var<'t, T>> {
    let tape = x.tape();
    let c = bn.channels;
    let xhat = if train {
        let s = x.shape();
        let n = (s[0] * s[2] * s[3]) as f64;
        let (xhat, mean, var) = x.normalize_channels(T::from_f64_lossy(NORM_EPS))?;
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let unbias = T::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        let blend = |old: &Tensor<T>, new: &[T], scale: T| {
            Tensor::from_fn(&[c], |i| (T::one() - m) * old.data()[i] + m * new[i] * scale)
        };
        stats.push((bn.running_mean, blend(store.get(bn.running_mean), &mean, T::one())));
        stats.push((bn.running_var, blend(store.get(bn.running_var), &var, unbias)));
        xhat
    } else {
        let mean = store.get(bn.running_mean).reshape(&[c, 1, 1])?;
        let eps = T::from_f64_lossy(NORM_EPS);
        let rstd = store.get(bn.running_var).map(|v| (v + eps).sqrt().recip()).reshape(&[c, 1, 1])?;
        x.sub(tape.constant(mean))?.mul(tape.constant(rstd))?
    };
    let gain = tape.param(store, bn.gain).reshape(&[c, 1, 1])?;
    let bias = tape.param(store, bn.bias).reshape(&[c, 1, 1])?;
    xhat.mul(gain)?.add(bias)
}

/// `[b, c, h, w] -> [b, h·w, c]`.
fn to_tokens<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// `[b, n, d] -> [b, d, √n, √n]`.
fn to_map<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let edge = (s[1] as f64).sqrt().round() as usize;
    if edge * edge != s[1] {
        return Err(Error::config(format!("{} tokens do not form a square grid", s[1])));
    }
    x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], edge, edge])
}

/// Reshapes tokens to a map, applies the grouped stride-2 convolution with
/// one group per input channel, and flattens back.
pub fn conv_pool_forward<'t, T: Scalar>(store: &ParamStore<T>, p: &ConvPool, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let tape = x.tape();
    let map = to_map(x)?;
    let y = conv2d_grouped(
        map,
        tape.param(store, p.weight),
        Some(tape.param(store, p.bias)),
        2,
        p.from_dim,
        1,
    )?;
    to_tokens(y)
}

impl Network {
    /// Images `[b, 3, r, r]` to stage-1 tokens `[b, n, d]`, positional
    /// embedding included.
    pub fn stem_forward<'t, T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &'t Tape<T>,
        images: &Tensor<T>,
        train: bool,
        stats: &mut Vec<(ParamId, Tensor<T>)>,
    ) -> Result<Var<'t, T>> {
        let r = self.config.input_resolution;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::dim("stem", s, &[0, 3, r, r]));
        }
        let mut x = tape.constant(images.clone());
        match &self.stem {
            Stem::Conv(layers) => {
                for l in layers {
                    x = conv2d_grouped(x, tape.param(store, l.weight), None, 2, 1, 1)?;
                    x = batch_norm(store, &l.bn, x, train, stats)?.relu();
                }
            }
            Stem::Patch { weight, bias, patch } => {
                x = conv2d_grouped(x, tape.param(store, *weight), Some(tape.param(store, *bias)), *patch, 1, 0)?;
            }
        }
        let mut tokens = to_tokens(x)?;
        if let Some(pos) = self.pos_embed {
            tokens = tokens.add(tape.param(store, pos))?;
        }
        Ok(tokens)
    }

    fn make_ctx<'a, T: Scalar>(&self, store: &'a ParamStore<T>, opts: &ForwardOptions) -> Forward<'a, T> {
        let mut ctx = Forward::new(store, opts.perms.clone()).with_mode(self.config.group_schedule.permutation_mode);
        if let (true, Some(seed)) = (opts.train && self.config.drop_path > 0.0, opts.drop_seed) {
            let n = self.config.block_applications();
            let peak = self.config.drop_path;
            ctx.drop_rng = Some(ChaCha8Rng::seed_from_u64(seed));
            ctx.drop_schedule = (0..n).map(|i| peak * i as f64 / (n.max(2) - 1) as f64).collect();
        }
        ctx
    }

    fn stage_forward<'t, T: Scalar>(ctx: &mut Forward<'_, T>, body: &StageBody, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut z = x;
        match body {
            StageBody::Internal(specs) => {
                for spec in specs {
                    z = recursive_block_forward(ctx, spec, z)?;
                }
            }
            StageBody::External { blocks, groups, nll } => {
                z = external_loop_forward(ctx, blocks, z, groups.len(), groups, nll)?;
            }
            StageBody::Mixer { blocks, recursions } => {
                for b in blocks {
                    z = mixer_block_forward(ctx.store, b, z, *recursions)?;
                }
            }
        }
        Ok(z)
    }

    fn unrolled_stage_forward<'t, T: Scalar>(ctx: &mut Forward<'_, T>, body: &StageBody, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut z = x;
        for step in body.unrolled() {
            z = match step {
                Step::Block(p, g) => block_forward(ctx, p, z, g)?,
                Step::Nll(p) => nll_forward(ctx, p, z)?,
                Step::Mixer(p) => mixer_block_forward(ctx.store, p, z, 1)?,
            };
        }
        Ok(z)
    }

    fn trunk<'t, T: Scalar>(
        &self,
        ctx: &mut Forward<'_, T>,
        tokens: Var<'t, T>,
        unrolled: bool,
        head: &HeadParams,
    ) -> Result<Var<'t, T>> {
        let mut z = tokens;
        for (s, body) in self.stages.iter().enumerate() {
            z = match unrolled {
                false => Self::stage_forward(ctx, body, z)?,
                true => Self::unrolled_stage_forward(ctx, body, z)?,
            };
            if let Some(pool) = self.pools.get(s) {
                z = conv_pool_forward(ctx.store, pool, z)?;
            }
        }
        if let Some(norm) = &self.final_norm {
            z = norm.forward(ctx.store, z)?;
        }
        let pooled = z.mean_axis(1)?;
        pooled
            .matmul(ctx.p(&pooled, head.weight))?
            .add(ctx.p(&pooled, head.bias))
    }

    /// Logits `[b, num_classes]`; with mixed depth, also the unrolled
    /// branch's logits. Both branches share the stem output and draw
    /// permutations from identical copies of `opts.perms`.
    pub fn forward<'t, T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &'t Tape<T>,
        images: &Tensor<T>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'t, T>> {
        let mut running_stats = Vec::new();
        let tokens = self.stem_forward(store, tape, images, opts.train, &mut running_stats)?;
        let logits = self.trunk(&mut self.make_ctx(store, &opts), tokens, false, &self.head)?;
        let unrolled_logits = match (opts.mixed_depth, &self.unrolled_head) {
            (false, _) => None,
            (true, Some(head)) => Some(self.trunk(&mut self.make_ctx(store, &opts), tokens, true, head)?),
            (true, None) => return Err(Error::config("mixed-depth forward on a model without an unrolled head")),
        };
        Ok(ForwardOutput {
            logits,
            unrolled_logits,
            running_stats,
        })
    }

    /// Logits of the unrolled block sequence through the main head; equal to
    /// the recursive forward given the same permutations.
    pub fn forward_unrolled<'t, T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &'t Tape<T>,
        images: &Tensor<T>,
        opts: ForwardOptions,
    ) -> Result<Var<'t, T>> {
        let tokens = self.stem_forward(store, tape, images, opts.train, &mut Vec::new())?;
        self.trunk(&mut self.make_ctx(store, &opts), tokens, true, &self.head)
    }
}
