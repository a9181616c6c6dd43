//! Exact parameter and multiply-accumulate counts, walked symbolically from
//! a configuration without allocating any tensors.
//!
//! One MAC is one multiply-accumulate. Convolutions count `k²·cin/g` per
//! output element, linear layers `din·dout` per token, and attention cores
//! `2·m²·d` per slice of `m` tokens. Normalization, softmax, activations and
//! bias additions are not counted as MACs; the softmax element count is
//! reported separately as auxiliary operations.

use std::fmt::Write as _;

use num_rational::Ratio;

use crate::blocks::hidden_extent;
use crate::error::{Error, Result};
use crate::model::{LoopMode, ModelConfig, SretModel, Variant};
use crate::scalar::Scalar;

/// Cost of one named layer, summed over every application of its weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// The part of `macs` spent in `QKᵀ` and `attn·V`.
    pub attention_core_macs: u64,
    /// Softmax elements, not included in `macs`.
    pub aux_ops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    fn push(&mut self, name: impl Into<String>, params: u64, macs: u64) {
        self.layers.push(LayerCost {
            name: name.into(),
            params,
            macs,
            attention_core_macs: 0,
            aux_ops: 0,
        });
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn attention_core_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.attention_core_macs).sum()
    }

    pub fn aux_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.aux_ops).sum()
    }

    /// `layer,params,macs` with one row per layer and no total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,macs\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{}", l.name, l.params, l.macs);
        }
        out
    }

    /// Aligned text table with a total line.
    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>12}  {:>16}  {:>14}\n", "layer", "params", "macs", "aux_ops");
        for l in &self.layers {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}  {:>14}", l.name, l.params, l.macs, l.aux_ops);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>16}  {:>14}",
            "total",
            self.total_params(),
            self.total_macs(),
            self.aux_ops()
        );
        let _ = writeln!(
            out,
            "params {:.3}M, MACs {:.3}B, attention core {:.3}B",
            self.total_params() as f64 / 1e6,
            self.total_macs() as f64 / 1e9,
            self.attention_core_macs() as f64 / 1e9
        );
        out
    }
}

fn check_groups(tokens: u64, groups: &[usize]) -> Result<()> {
    for &g in groups {
        if g == 0 || !tokens.is_multiple_of(g as u64) {
            return Err(Error::config(format!("group count {g} does not divide {tokens} tokens")));
        }
    }
    Ok(())
}

/// `Σᵢ gᵢ·(L/gᵢ)²·D·2`: query-key products plus the weighted value sum, for
/// one attention call per entry of `groups`.
pub fn attention_core_cost(tokens: u64, dim: u64, groups: &[usize]) -> Result<u64> {
    check_groups(tokens, groups)?;
    Ok(groups
        .iter()
        .map(|&g| {
            let m = tokens / g as u64;
            g as u64 * m * m * dim * 2
        })
        .sum())
}

/// Ratio of `N` grouped calls with `G` slices to one global call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostEquivalence {
    pub ratio: Ratio<u64>,
    pub expected: Ratio<u64>,
    pub holds: bool,
}

/// Cost of one `G`-slice call with the slice length `L/G` taken as a
/// rational: `G·(L/G)²·D·2 = 2·L²·D/G`. It must still be a whole number of
/// multiply-accumulates. When `G` divides `L` this is [`attention_core_cost`].
pub fn sliced_attention_cost(tokens: u64, dim: u64, groups: usize) -> Result<Ratio<u64>> {
    if groups == 0 {
        return Err(Error::config("group count must be positive"));
    }
    let g = groups as u64;
    let slice = Ratio::new(tokens, g);
    let cost = Ratio::from_integer(g) * slice * slice * Ratio::from_integer(dim * 2);
    if !cost.is_integer() {
        return Err(Error::config(format!(
            "group count {groups} does not divide the {} multiply-accumulates of global attention over {tokens} tokens",
            2 * tokens * tokens * dim
        )));
    }
    Ok(cost)
}

/// Checks that `N` recursions of `G`-slice attention cost exactly `N/G`
/// times one global attention over `L` tokens of width `D`.
pub fn verify_cost_equivalence(tokens: u64, dim: u64, recursions: usize, groups: usize) -> Result<CostEquivalence> {
    if recursions == 0 || dim == 0 || tokens == 0 {
        return Err(Error::config("L, D and N must be positive"));
    }
    let grouped = sliced_attention_cost(tokens, dim, groups)? * Ratio::from_integer(recursions as u64);
    let global = sliced_attention_cost(tokens, dim, 1)?;
    let ratio = grouped / global;
    let expected = Ratio::new(recursions as u64, groups as u64);
    Ok(CostEquivalence {
        ratio,
        expected,
        holds: ratio == expected,
    })
}

fn linear(report: &mut CostReport, name: String, tokens: u64, din: u64, dout: u64, applications: u64) {
    report.push(name, din * dout + dout, applications * tokens * din * dout);
}

fn norm(report: &mut CostReport, name: String, dim: u64) {
    report.push(name, 2 * dim, 0);
}

fn ffn(report: &mut CostReport, prefix: &str, tokens: u64, dim: u64, hidden: u64, applications: u64) {
    linear(report, format!("{prefix}.fc1"), tokens, dim, hidden, applications);
    linear(report, format!("{prefix}.fc2"), tokens, hidden, dim, applications);
}

fn block(report: &mut CostReport, c: &ModelConfig, prefix: &str, stage: usize, tokens: u64, groups: &[usize]) -> Result<()> {
    let d = c.stage_dims[stage] as u64;
    let heads = c.heads_per_stage[stage] as u64;
    let n = groups.len() as u64;
    norm(report, format!("{prefix}.norm1"), d);
    linear(report, format!("{prefix}.attn.qkv"), tokens, d, 3 * d, n);
    let core = attention_core_cost(tokens, d, groups)?;
    let softmax: u64 = groups.iter().map(|&g| heads * tokens * (tokens / g as u64)).sum();
    report.layers.push(LayerCost {
        name: format!("{prefix}.attn.core"),
        params: 0,
        macs: core,
        attention_core_macs: core,
        aux_ops: softmax,
    });
    linear(report, format!("{prefix}.attn.proj"), tokens, d, d, n);
    norm(report, format!("{prefix}.norm2"), d);
    ffn(report, &format!("{prefix}.ffn"), tokens, d, hidden_extent(d as usize, c.ffn_ratio) as u64, n);
    if c.lrc {
        report.push(format!("{prefix}.lrc"), 4, 0);
    }
    Ok(())
}

fn nll(report: &mut CostReport, c: &ModelConfig, prefix: &str, stage: usize, tokens: u64) {
    let d = c.stage_dims[stage] as u64;
    norm(report, format!("{prefix}.norm"), d);
    ffn(report, &format!("{prefix}.mlp"), tokens, d, hidden_extent(d as usize, c.nll_ratio) as u64, 1);
    if c.lrc {
        report.push(format!("{prefix}.lrc"), 2, 0);
    }
}

/// Per-layer costs of `config` at `resolution`.
pub fn count_macs(config: &ModelConfig, resolution: usize) -> Result<CostReport> {
    let mut c = config.clone();
    c.input_resolution = resolution;
    c.validate()?;
    let mut r = CostReport::default();
    let grids = c.grids_at(resolution)?;
    let rec = c.recursions_per_block;

    if c.stem_channels.is_empty() {
        let p = c.patch_size as u64;
        let d = c.stage_dims[0] as u64;
        let out = (grids[0] * grids[0]) as u64 * d;
        r.push("stem.patch", 3 * p * p * d + d, out * 3 * p * p);
    } else {
        let mut cin = 3u64;
        let mut edge = resolution;
        for (i, &cout) in c.stem_channels.iter().enumerate() {
            let cout = cout as u64;
            edge = (edge - 1) / 2 + 1;
            let out = (edge * edge) as u64 * cout;
            r.push(format!("stem.{i}.conv"), 9 * cin * cout, out * 9 * cin);
            r.push(format!("stem.{i}.bn"), 2 * cout, 0);
            cin = cout;
        }
    }
    if c.pos_embed {
        r.push("pos_embed", (grids[0] * grids[0] * c.stage_dims[0]) as u64, 0);
    }

    for s in 0..c.stages() {
        let tokens = (grids[s] * grids[s]) as u64;
        let groups = &c.group_schedule.groups[s];
        let d = c.stage_dims[s] as u64;
        match (c.variant, c.loop_mode) {
            (Variant::Mixer, _) => {
                let (ds, dc) = (c.mixer_token_hidden as u64, hidden_extent(d as usize, c.ffn_ratio) as u64);
                for b in 0..c.stage_blocks[s] {
                    let prefix = format!("s{s}.b{b}");
                    norm(&mut r, format!("{prefix}.norm1"), d);
                    // token mixing runs over the sequence axis, once per channel
                    ffn(&mut r, &format!("{prefix}.token_mix"), d, tokens, ds, rec as u64);
                    norm(&mut r, format!("{prefix}.norm2"), d);
                    ffn(&mut r, &format!("{prefix}.channel_mix"), tokens, d, dc, rec as u64);
                }
            }
            (_, LoopMode::Internal) => {
                for b in 0..c.stage_blocks[s] {
                    let prefix = format!("s{s}.b{b}");
                    block(&mut r, &c, &prefix, s, tokens, groups)?;
                    for i in 0..c.nll_placement.count(rec) {
                        nll(&mut r, &c, &format!("{prefix}.nll{i}"), s, tokens);
                    }
                }
            }
            (_, LoopMode::External) => {
                for b in 0..c.stage_blocks[s] {
                    block(&mut r, &c, &format!("s{s}.b{b}"), s, tokens, groups)?;
                }
                for i in 0..c.nll_placement.count(rec) {
                    nll(&mut r, &c, &format!("s{s}.nll{i}"), s, tokens);
                }
            }
        }
        if s + 1 < c.stages() {
            let to = c.stage_dims[s + 1] as u64;
            let out = (grids[s + 1] * grids[s + 1]) as u64 * to;
            // one input channel per group
            r.push(format!("pool{s}"), 9 * to + to, out * 9);
        }
    }
    let last = *c.stage_dims.last().expect("validated") as u64;
    if c.final_norm {
        norm(&mut r, "final_norm".into(), last);
    }
    linear(&mut r, "head".into(), 1, last, c.num_classes as u64, 1);
    Ok(r)
}

/// Trainable elements in a built model's registry; shared weights count once.
pub fn count_params<T: Scalar>(model: &SretModel<T>) -> u64 {
    model.param_count()
}
