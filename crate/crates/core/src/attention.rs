//! Multi-head self-attention and its sliced-group approximation.
//!
//! Sliced group attention shares the global layer's weights. Tokens are
//! optionally shuffled by a random permutation, cut into `G` contiguous
//! slices, attended within each slice, and (in the `P+I` modes) restored to
//! their original order before the output projection. The attention core then
//! costs `1/G` of the global layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Var};

pub use crate::tensor::Permutation;

/// Where permutation layers are inserted around grouped attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PermutationMode {
    /// Permute only; token order is not restored.
    #[serde(rename = "P")]
    Permute,
    /// Permute, then apply the inverse after attention.
    #[serde(rename = "P+I")]
    PermuteInverse,
    /// As `P+I`, but skip both layers wherever the group count is 1.
    #[default]
    #[serde(rename = "P+I-L")]
    PermuteInverseSkipSingle,
}

impl PermutationMode {
    pub fn label(self) -> &'static str {
        match self {
            PermutationMode::Permute => "P",
            PermutationMode::PermuteInverse => "P+I",
            PermutationMode::PermuteInverseSkipSingle => "P+I-L",
        }
    }

    pub fn restores_order(self) -> bool {
        !matches!(self, PermutationMode::Permute)
    }

    /// Whether a permutation is drawn for an attention call with `groups` slices.
    pub fn permutes(self, groups: usize) -> bool {
        !(self == PermutationMode::PermuteInverseSkipSingle && groups == 1)
    }
}

impl std::str::FromStr for PermutationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(Self::Permute),
            "P+I" => Ok(Self::PermuteInverse),
            "P+I-L" => Ok(Self::PermuteInverseSkipSingle),
            other => Err(Error::config(format!("unknown permutation mode `{other}`"))),
        }
    }
}

/// Per-stage, per-recursion group counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSchedule {
    pub groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub permutation_mode: PermutationMode,
}

impl GroupSchedule {
    /// Every stage attends globally on every recursion.
    pub fn global(stages: usize, recursions: usize) -> Self {
        Self {
            groups: vec![vec![1; recursions]; stages],
            permutation_mode: PermutationMode::default(),
        }
    }

    /// Checks that each group count divides its stage's token count.
    pub fn validate(&self, tokens_per_stage: &[usize], recursions: usize) -> Result<()> {
        if self.groups.len() != tokens_per_stage.len() {
            return Err(Error::config(format!(
                "group schedule has {} stages, model has {}",
                self.groups.len(),
                tokens_per_stage.len()
            )));
        }
        for (s, (row, &n)) in self.groups.iter().zip(tokens_per_stage).enumerate() {
            if row.len() != recursions {
                return Err(Error::config(format!(
                    "stage {s}: {} group counts for {recursions} recursions",
                    row.len()
                )));
            }
            for &g in row {
                if g == 0 || n % g != 0 {
                    return Err(Error::config(format!(
                        "stage {s}: group count {g} does not divide {n} tokens"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Supplies the token permutation for each attention call.
#[derive(Debug, Clone)]
pub enum PermSource {
    /// Fresh uniform permutation per call (training).
    Sampled(ChaCha8Rng),
    /// No shuffling (evaluation).
    Identity,
    /// The same permutation every call; for tests and oracles.
    Fixed(Permutation),
}

impl PermSource {
    pub fn sampled(seed: u64) -> Self {
        PermSource::Sampled(ChaCha8Rng::seed_from_u64(seed))
    }

    /// `None` means leave the token order untouched.
    pub fn next(&mut self, n: usize) -> Result<Option<Permutation>> {
        match self {
            PermSource::Sampled(rng) => Ok(Some(make_permutation(n, rng))),
            PermSource::Identity => Ok(None),
            PermSource::Fixed(p) if p.len() == n => Ok(Some(p.clone())),
            PermSource::Fixed(p) => Err(Error::Permutation(format!(
                "fixed permutation of length {} used on {n} tokens",
                p.len()
            ))),
        }
    }
}

/// Uniformly random bijection on `0..n`, deterministic for a seeded rng.
pub fn make_permutation<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Permutation {
    Permutation::random(n, rng)
}

pub fn invert_permutation(p: &Permutation) -> Permutation {
    p.inverse()
}

/// Fused QKV projection `[d, 3d]`, output projection `[d, d]`, all with bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub qkv_weight: ParamId,
    pub qkv_bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn register<T: Scalar>(init: &mut Initializer<'_, T>, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv_weight: init.weight(format!("{prefix}.qkv.weight"), &[dim, 3 * dim])?,
            qkv_bias: init.zeros(format!("{prefix}.qkv.bias"), &[3 * dim])?,
            proj_weight: init.weight(format!("{prefix}.proj.weight"), &[dim, dim])?,
            proj_bias: init.zeros(format!("{prefix}.proj.bias"), &[dim])?,
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_count(&self) -> u64 {
        let d = self.dim as u64;
        4 * d * d + 4 * d
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.qkv_weight, self.qkv_bias, self.proj_weight, self.proj_bias]
    }
}

fn check_input<T: Scalar>(x: &Var<'_, T>, p: &AttentionParams, groups: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != p.dim {
        return Err(Error::dim("attention", &s, &[p.dim]));
    }
    if groups == 0 || !s[1].is_multiple_of(groups) {
        return Err(Error::config(format!(
            "group count {groups} does not divide {} tokens",
            s[1]
        )));
    }
    Ok((s[0], s[1]))
}

/// Per-slice multi-head attention before the output projection.
/// Returns the concatenated head outputs `[b, n, d]` and the attention
/// probabilities `[b·G, h, n/G, n/G]`.
fn attention_core<'t, T: Scalar>(
    store: &ParamStore<T>,
    p: &AttentionParams,
    x: Var<'t, T>,
    groups: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = x.tape();
    let (b, n) = check_input(&x, p, groups)?;
    let (d, h, dk) = (p.dim, p.heads, p.head_dim());
    let m = n / groups;
    let bg = b * groups;
    let qkv = x
        .reshape(&[bg, m, d])?
        .matmul(tape.param(store, p.qkv_weight))?
        .add(tape.param(store, p.qkv_bias))?
        .reshape(&[bg, m, 3, h, dk])?
        .permute(&[2, 0, 3, 1, 4])?;
    let take = |i: usize| -> Result<Var<'t, T>> { qkv.narrow(0, i, 1)?.reshape(&[bg, h, m, dk]) };
    let (q, k, v) = (take(0)?, take(1)?, take(2)?);
    let scale = T::from_usize(dk).expect("head dim").sqrt().recip();
    let probs = q.matmul(k.transpose_last()?)?.scale(scale).softmax()?;
    let out = probs
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, d])?;
    Ok((out, probs))
}

fn project<'t, T: Scalar>(store: &ParamStore<T>, p: &AttentionParams, h: Var<'t, T>) -> Result<Var<'t, T>> {
    let tape = h.tape();
    h.matmul(tape.param(store, p.proj_weight))?
        .add(tape.param(store, p.proj_bias))
}

/// Global multi-head self-attention: per head `softmax(QKᵀ/√d_k)·V`, heads
/// concatenated and projected.
pub fn vanilla_mhsa<'t, T: Scalar>(store: &ParamStore<T>, p: &AttentionParams, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let (h, _) = attention_core(store, p, x, 1)?;
    project(store, p, h)
}

/// Sliced group attention over `groups` slices with the given permutation mode.
pub fn sliced_group_mhsa<'t, T: Scalar>(
    store: &ParamStore<T>,
    p: &AttentionParams,
    x: Var<'t, T>,
    groups: usize,
    mode: PermutationMode,
    perms: &mut PermSource,
) -> Result<Var<'t, T>> {
    let (_, n) = check_input(&x, p, groups)?;
    let perm = if mode.permutes(groups) { perms.next(n)? } else { None };
    let x = match &perm {
        Some(pm) => x.gather_rows(pm)?,
        None => x,
    };
    let (h, _) = attention_core(store, p, x, groups)?;
    let h = match &perm {
        Some(pm) if mode.restores_order() => h.gather_rows(&pm.inverse())?,
        _ => h,
    };
    project(store, p, h)
}

/// Attention probabilities of each slice, `[b·G, h, n/G, n/G]`, without any
/// permutation. Exposed for inspection and tests.
pub fn slice_attention_weights<'t, T: Scalar>(
    store: &ParamStore<T>,
    p: &AttentionParams,
    x: Var<'t, T>,
    groups: usize,
) -> Result<Var<'t, T>> {
    Ok(attention_core(store, p, x, groups)?.1)
}
