//! Composite layers: FFN, the residual-coefficient transformer block, the
//! non-linear projection layer between recursions, recursive blocks, the
//! recursive Mixer block and the external loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{sliced_group_mhsa, AttentionParams, PermSource, PermutationMode};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::scalar::Scalar;
use crate::tensor::{layer_norm, ParamId, ParamStore, Tensor, Var, NORM_EPS};

/// Hidden width of an MLP with a fractional ratio, rounded to nearest.
pub fn hidden_extent(dim: usize, ratio: f64) -> usize {
    (ratio * dim as f64).round().max(1.0) as usize
}

/// Where non-shared projection layers sit inside a recursive block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NllPlacement {
    /// One after every recursive application (N per block).
    #[default]
    PerRecursion,
    /// Only between consecutive applications (N − 1 per block).
    Between,
    /// No projection layers (naive recursion).
    None,
}

impl NllPlacement {
    pub fn count(self, recursions: usize) -> usize {
        match self {
            NllPlacement::PerRecursion => recursions,
            NllPlacement::Between => recursions.saturating_sub(1),
            NllPlacement::None => 0,
        }
    }

    /// Index of the projection layer applied after recursion `i`, if any.
    pub fn after(self, i: usize, recursions: usize) -> Option<usize> {
        match self {
            NllPlacement::PerRecursion => Some(i),
            NllPlacement::Between if i + 1 < recursions => Some(i),
            _ => None,
        }
    }
}

/// Mutable state threaded through one forward pass.
pub struct Forward<'a, T> {
    pub store: &'a ParamStore<T>,
    pub perms: PermSource,
    pub permutation_mode: PermutationMode,
    /// Present only when stochastic depth is active.
    pub drop_rng: Option<ChaCha8Rng>,
    /// Drop probability per block application, in application order.
    pub drop_schedule: Vec<f64>,
    pub(crate) applications: usize,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, perms: PermSource) -> Self {
        Self {
            store,
            perms,
            permutation_mode: PermutationMode::default(),
            drop_rng: None,
            drop_schedule: Vec::new(),
            applications: 0,
        }
    }

    pub fn with_mode(mut self, mode: PermutationMode) -> Self {
        self.permutation_mode = mode;
        self
    }

    pub fn p<'t>(&self, x: &Var<'t, T>, id: ParamId) -> Var<'t, T> {
        x.tape().param(self.store, id)
    }

    fn next_drop_rate(&mut self) -> f64 {
        let rate = self.drop_schedule.get(self.applications).copied().unwrap_or(0.0);
        self.applications += 1;
        rate
    }

    pub fn reset_applications(&mut self) {
        self.applications = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn register<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: init.ones(format!("{prefix}.gain"), &[dim])?,
            bias: init.zeros(format!("{prefix}.bias"), &[dim])?,
            dim,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        layer_norm(
            x,
            tape.param(store, self.gain),
            tape.param(store, self.bias),
            T::from_f64_lossy(NORM_EPS),
        )
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
    pub hidden: usize,
}

impl FfnParams {
    pub fn register<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str, dim: usize, ratio: f64) -> Result<Self> {
        if ratio <= 0.0 {
            return Err(Error::config(format!("mlp ratio {ratio} must be positive")));
        }
        Self::register_hidden(init, prefix, dim, hidden_extent(dim, ratio))
    }

    pub fn register_hidden<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: init.weight(format!("{prefix}.fc1.weight"), &[dim, hidden])?,
            b1: init.zeros(format!("{prefix}.fc1.bias"), &[hidden])?,
            w2: init.weight(format!("{prefix}.fc2.weight"), &[hidden, dim])?,
            b2: init.zeros(format!("{prefix}.fc2.bias"), &[dim])?,
            dim,
            hidden,
        })
    }

    pub fn param_count(&self) -> u64 {
        let (d, h) = (self.dim as u64, self.hidden as u64);
        2 * d * h + h + d
    }
}

/// `GELU(x·W₁ + b₁)·W₂ + b₂` over the last axis.
pub fn ffn_forward<'t, T: Scalar>(store: &ParamStore<T>, p: &FfnParams, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let last = *x.shape().last().unwrap_or(&0);
    if last != p.dim {
        return Err(Error::dim("ffn", &x.shape(), &[p.dim]));
    }
    let tape = x.tape();
    x.matmul(tape.param(store, p.w1))?
        .add(tape.param(store, p.b1))?
        .gelu()
        .matmul(tape.param(store, p.w2))?
        .add(tape.param(store, p.b2))
}

/// Residual coefficients of a transformer block, all initialized to 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLrc {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
    pub delta: ParamId,
}

/// Residual coefficients of a projection layer, initialized to 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NllLrc {
    pub zeta: ParamId,
    pub theta: ParamId,
}

fn coefficient<T: Scalar>(init: &mut Initializer<'_, T>, name: String) -> Result<ParamId> {
    init.ones(name, &[1])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerBlockParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
    pub lrc: Option<BlockLrc>,
}

impl TransformerBlockParams {
    pub fn register<T: Scalar>(
        init: &mut Initializer<'_, T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: f64,
        lrc: bool,
    ) -> Result<Self> {
        let norm1 = LayerNormParams::register(init, &format!("{prefix}.norm1"), dim)?;
        let attn = AttentionParams::register(init, &format!("{prefix}.attn"), dim, heads)?;
        let norm2 = LayerNormParams::register(init, &format!("{prefix}.norm2"), dim)?;
        let ffn = FfnParams::register(init, &format!("{prefix}.ffn"), dim, ffn_ratio)?;
        let lrc = if lrc {
            Some(BlockLrc {
                alpha: coefficient(init, format!("{prefix}.lrc.alpha"))?,
                beta: coefficient(init, format!("{prefix}.lrc.beta"))?,
                gamma: coefficient(init, format!("{prefix}.lrc.gamma"))?,
                delta: coefficient(init, format!("{prefix}.lrc.delta"))?,
            })
        } else {
            None
        };
        Ok(Self {
            norm1,
            attn,
            norm2,
            ffn,
            lrc,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim
    }
}

/// Layer norm, MLP and residual, with weights owned by one recursion slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NllParams {
    pub norm: LayerNormParams,
    pub mlp: FfnParams,
    pub lrc: Option<NllLrc>,
}

impl NllParams {
    pub fn register<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str, dim: usize, ratio: f64, lrc: bool) -> Result<Self> {
        let norm = LayerNormParams::register(init, &format!("{prefix}.norm"), dim)?;
        let mlp = FfnParams::register(init, &format!("{prefix}.mlp"), dim, ratio)?;
        let lrc = if lrc {
            Some(NllLrc {
                zeta: coefficient(init, format!("{prefix}.lrc.zeta"))?,
                theta: coefficient(init, format!("{prefix}.lrc.theta"))?,
            })
        } else {
            None
        };
        Ok(Self { norm, mlp, lrc })
    }
}

/// One physical block: shared weights applied `groups.len()` times, with a
/// projection layer after the recursions its placement selects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecursiveBlockSpec {
    pub shared: TransformerBlockParams,
    pub groups: Vec<usize>,
    pub nll: Vec<NllParams>,
    pub placement: NllPlacement,
}

impl RecursiveBlockSpec {
    pub fn recursions(&self) -> usize {
        self.groups.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.recursions();
        if n == 0 {
            return Err(Error::config("a recursive block needs at least one recursion"));
        }
        if self.nll.len() != self.placement.count(n) {
            return Err(Error::config(format!(
                "{} projection layers for {n} recursions with {:?} placement",
                self.nll.len(),
                self.placement
            )));
        }
        Ok(())
    }
}

/// Scales a residual branch by a per-sample keep mask when stochastic depth
/// is active for this application.
fn drop_path<'t, T: Scalar>(ctx: &mut Forward<'_, T>, branch: Var<'t, T>, rate: f64) -> Result<Var<'t, T>> {
    let Some(rng) = ctx.drop_rng.as_mut() else {
        return Ok(branch);
    };
    if rate <= 0.0 {
        return Ok(branch);
    }
    let shape = branch.shape();
    let keep = 1.0 - rate;
    let mut mask_shape = vec![1; shape.len()];
    mask_shape[0] = shape[0];
    let mask = Tensor::from_fn(&mask_shape, |_| {
        if rng.random::<f64>() < keep {
            T::from_f64_lossy(1.0 / keep)
        } else {
            T::zero()
        }
    });
    branch.mul(branch.tape().constant(mask))
}

/// `main·branch + skip·x`, or the plain sum without coefficients.
fn residual<'t, T: Scalar>(
    ctx: &Forward<'_, T>,
    branch: Var<'t, T>,
    x: Var<'t, T>,
    coeffs: Option<(ParamId, ParamId)>,
) -> Result<Var<'t, T>> {
    match coeffs {
        Some((main, skip)) => branch.mul(ctx.p(&x, main))?.add(x.mul(ctx.p(&x, skip))?),
        None => branch.add(x),
    }
}

/// `z′ = α·MHSA(LN(x)) + β·x`, then `γ·FFN(LN(z′)) + δ·z′`, where MHSA is
/// sliced group attention with `groups` slices.
pub fn block_forward<'t, T: Scalar>(
    ctx: &mut Forward<'_, T>,
    p: &TransformerBlockParams,
    x: Var<'t, T>,
    groups: usize,
) -> Result<Var<'t, T>> {
    let rate = ctx.next_drop_rate();
    let h = p.norm1.forward(ctx.store, x)?;
    let mode = ctx.permutation_mode;
    let a = sliced_group_mhsa(ctx.store, &p.attn, h, groups, mode, &mut ctx.perms)?;
    let a = drop_path(ctx, a, rate)?;
    let z = residual(ctx, a, x, p.lrc.as_ref().map(|c| (c.alpha, c.beta)))?;
    let f = ffn_forward(ctx.store, &p.ffn, p.norm2.forward(ctx.store, z)?)?;
    let f = drop_path(ctx, f, rate)?;
    residual(ctx, f, z, p.lrc.as_ref().map(|c| (c.gamma, c.delta)))
}

/// `ζ·MLP(LN(x)) + θ·x`.
pub fn nll_forward<'t, T: Scalar>(ctx: &Forward<'_, T>, p: &NllParams, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let m = ffn_forward(ctx.store, &p.mlp, p.norm.forward(ctx.store, x)?)?;
    residual(ctx, m, x, p.lrc.as_ref().map(|c| (c.zeta, c.theta)))
}

/// Internal loop: the shared block applied once per recursion, each
/// application followed by its own projection layer.
pub fn recursive_block_forward<'t, T: Scalar>(
    ctx: &mut Forward<'_, T>,
    spec: &RecursiveBlockSpec,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    spec.validate()?;
    let n = spec.recursions();
    let mut z = x;
    for (i, &g) in spec.groups.iter().enumerate() {
        z = block_forward(ctx, &spec.shared, z, g)?;
        if let Some(j) = spec.placement.after(i, n) {
            z = nll_forward(ctx, &spec.nll[j], z)?;
        }
    }
    Ok(z)
}

/// External loop: the whole ordered block list applied `loops` times with
/// shared weights. `groups[c]` is the slice count used on cycle `c`; `nll`
/// is either empty or holds one projection layer per cycle.
pub fn external_loop_forward<'t, T: Scalar>(
    ctx: &mut Forward<'_, T>,
    blocks: &[TransformerBlockParams],
    x: Var<'t, T>,
    loops: usize,
    groups: &[usize],
    nll: &[NllParams],
) -> Result<Var<'t, T>> {
    if loops == 0 || groups.len() != loops || !(nll.is_empty() || nll.len() == loops) {
        return Err(Error::config(format!(
            "external loop: {loops} loops, {} group counts, {} projection layers",
            groups.len(),
            nll.len()
        )));
    }
    let mut z = x;
    for cycle in 0..loops {
        for b in blocks {
            z = block_forward(ctx, b, z, groups[cycle])?;
        }
        if let Some(p) = nll.get(cycle) {
            z = nll_forward(ctx, p, z)?;
        }
    }
    Ok(z)
}

/// Token-mixing MLP over the sequence axis, channel-mixing MLP over features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixerBlockParams {
    pub norm1: LayerNormParams,
    pub token: FfnParams,
    pub norm2: LayerNormParams,
    pub channel: FfnParams,
    pub tokens: usize,
    pub channels: usize,
}

impl MixerBlockParams {
    pub fn register<T: Scalar>(
        init: &mut Initializer<'_, T>,
        prefix: &str,
        tokens: usize,
        channels: usize,
        token_hidden: usize,
        channel_hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::register(init, &format!("{prefix}.norm1"), channels)?,
            token: FfnParams::register_hidden(init, &format!("{prefix}.token_mix"), tokens, token_hidden)?,
            norm2: LayerNormParams::register(init, &format!("{prefix}.norm2"), channels)?,
            channel: FfnParams::register_hidden(init, &format!("{prefix}.channel_mix"), channels, channel_hidden)?,
            tokens,
            channels,
        })
    }
}

fn mixer_once<'t, T: Scalar>(store: &ParamStore<T>, p: &MixerBlockParams, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let t = p.norm1.forward(store, x)?.permute(&[0, 2, 1])?;
    let u = ffn_forward(store, &p.token, t)?.permute(&[0, 2, 1])?.add(x)?;
    let c = ffn_forward(store, &p.channel, p.norm2.forward(store, u)?)?;
    c.add(u)
}

/// One Mixer block `M` applied `recursions` times with the same weights.
pub fn mixer_block_forward<'t, T: Scalar>(
    store: &ParamStore<T>,
    p: &MixerBlockParams,
    x: Var<'t, T>,
    recursions: usize,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != p.tokens || s[2] != p.channels {
        return Err(Error::dim("mixer", &s, &[p.tokens, p.channels]));
    }
    let mut z = x;
    for _ in 0..recursions {
        z = mixer_once(store, p, z)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests;
