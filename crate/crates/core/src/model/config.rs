use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::GroupSchedule;
use crate::blocks::NllPlacement;
use crate::error::{Error, Result};

/// Network family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Convolutional stem, spatial pyramid of recursive attention stages.
    Sret,
    /// Patch embedding and a single stage of plain attention blocks.
    DeitBaseline,
    /// Patch embedding and recursive token/channel mixing blocks.
    Mixer,
}

/// How recursion is laid out over the blocks of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    /// Each block repeats itself before the next block runs.
    #[default]
    Internal,
    /// The whole stage runs, then repeats.
    External,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_dims: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub heads_per_stage: Vec<usize>,
    pub recursions_per_block: usize,
    pub group_schedule: GroupSchedule,
    pub ffn_ratio: f64,
    pub nll_ratio: f64,
    #[serde(default)]
    pub nll_placement: NllPlacement,
    #[serde(default = "default_true")]
    pub lrc: bool,
    #[serde(default)]
    pub loop_mode: LoopMode,
    /// Output channels of the three stride-2 stem convolutions; empty for a
    /// patch-embedding stem.
    #[serde(default)]
    pub stem_channels: Vec<usize>,
    /// Patch edge of the patch-embedding stem; unused with a conv stem.
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default = "default_true")]
    pub pos_embed: bool,
    #[serde(default)]
    pub final_norm: bool,
    /// Token-mixing hidden width of Mixer blocks.
    #[serde(default)]
    pub mixer_token_hidden: usize,
    /// Peak stochastic-depth rate, reached on the last block application.
    #[serde(default)]
    pub drop_path: f64,
    pub num_classes: usize,
    pub input_resolution: usize,
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.stage_dims.len()
    }

    fn conv_stem(&self) -> bool {
        !self.stem_channels.is_empty()
    }

    /// Spatial edge of the stage-1 token grid at `resolution`.
    pub fn grid_at(&self, resolution: usize) -> Result<usize> {
        if self.conv_stem() {
            if resolution == 0 || !resolution.is_multiple_of(8) {
                return Err(Error::config(format!(
                    "input resolution {resolution} must be a positive multiple of 8"
                )));
            }
            Ok(resolution / 8)
        } else {
            if self.patch_size == 0 || resolution == 0 || !resolution.is_multiple_of(self.patch_size) {
                return Err(Error::config(format!(
                    "input resolution {resolution} is not a multiple of patch size {}",
                    self.patch_size
                )));
            }
            Ok(resolution / self.patch_size)
        }
    }

    /// Token-grid edge per stage; each conv-pooling halves it (rounding up).
    pub fn grids_at(&self, resolution: usize) -> Result<Vec<usize>> {
        let mut edge = self.grid_at(resolution)?;
        let mut out = Vec::with_capacity(self.stages());
        for s in 0..self.stages() {
            if s > 0 {
                edge = (edge - 1) / 2 + 1;
            }
            out.push(edge);
        }
        Ok(out)
    }

    pub fn tokens_per_stage(&self) -> Result<Vec<usize>> {
        Ok(self.grids_at(self.input_resolution)?.iter().map(|e| e * e).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n == 0 {
            return Err(Error::config("at least one stage is required"));
        }
        if self.stage_blocks.len() != n || self.heads_per_stage.len() != n || self.group_schedule.groups.len() != n {
            return Err(Error::config(format!(
                "stage lists disagree: dims {}, blocks {}, heads {}, group schedule {}",
                n,
                self.stage_blocks.len(),
                self.heads_per_stage.len(),
                self.group_schedule.groups.len()
            )));
        }
        if self.recursions_per_block == 0 {
            return Err(Error::config("recursions_per_block must be at least 1"));
        }
        for (s, (&d, &h)) in self.stage_dims.iter().zip(&self.heads_per_stage).enumerate() {
            if d == 0 || h == 0 || d % h != 0 {
                return Err(Error::config(format!("stage {s}: dim {d} not divisible by {h} heads")));
            }
        }
        if self.stage_blocks.contains(&0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        for w in self.stage_dims.windows(2) {
            if w[1] % w[0] != 0 {
                return Err(Error::config(format!(
                    "conv-pooling {} -> {} needs the output dim to be a multiple of the input dim",
                    w[0], w[1]
                )));
            }
        }
        if !(self.ffn_ratio > 0.0) || !(self.nll_ratio > 0.0) {
            return Err(Error::config("ffn_ratio and nll_ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("drop_path must lie in [0, 1)"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.conv_stem() {
            if self.stem_channels.len() != 3 {
                return Err(Error::config("stem_channels must list three widths"));
            }
            if self.stem_channels[2] != self.stage_dims[0] {
                return Err(Error::config(format!(
                    "stem ends at {} channels but stage 1 has dim {}",
                    self.stem_channels[2], self.stage_dims[0]
                )));
            }
        }
        match self.variant {
            Variant::Sret if !self.conv_stem() => {
                return Err(Error::config("the sret variant needs stem_channels"));
            }
            Variant::DeitBaseline | Variant::Mixer if self.conv_stem() || n != 1 => {
                return Err(Error::config("patch-embedding variants have one stage and no conv stem"));
            }
            Variant::Mixer if self.mixer_token_hidden == 0 => {
                return Err(Error::config("mixer_token_hidden must be positive"));
            }
            _ => {}
        }
        let tokens = self.tokens_per_stage()?;
        self.group_schedule.validate(&tokens, self.recursions_per_block)
    }

    /// Total block applications in one forward pass.
    pub fn block_applications(&self) -> usize {
        self.stage_blocks.iter().sum::<usize>() * self.recursions_per_block
    }

    /// Uses `recursions` everywhere, keeping each stage's first group count
    /// for the new recursions when lengthening the schedule.
    pub fn with_recursions(mut self, recursions: usize) -> Self {
        self.recursions_per_block = recursions;
        for row in &mut self.group_schedule.groups {
            let fill = row.last().copied().unwrap_or(1);
            row.resize(recursions, fill);
        }
        self
    }

    /// Replaces every group count by 1 (global attention everywhere).
    pub fn with_global_attention(mut self) -> Self {
        for row in &mut self.group_schedule.groups {
            row.iter_mut().for_each(|g| *g = 1);
        }
        self
    }
}

/// Named published and desk-scale configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    SretT,
    SretTl,
    SretS,
    DeitT,
    MixerB16Recursive,
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::SretT,
        Preset::SretTl,
        Preset::SretS,
        Preset::DeitT,
        Preset::MixerB16Recursive,
        Preset::Desk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SretT => "sret_t",
            Preset::SretTl => "sret_tl",
            Preset::SretS => "sret_s",
            Preset::DeitT => "deit_t",
            Preset::MixerB16Recursive => "mixer_b16_recursive",
            Preset::Desk => "desk",
        }
    }

    pub fn config(self) -> ModelConfig {
        match self {
            Preset::SretT => sret(vec![64, 128, 256], vec![32, 64, 64], 3.6, 1.0),
            Preset::SretTl => sret(vec![64, 128, 256], vec![32, 64, 64], 4.0, 1.0),
            Preset::SretS => sret(vec![126, 252, 504], vec![63, 126, 126], 3.0, 2.0),
            Preset::DeitT => ModelConfig {
                variant: Variant::DeitBaseline,
                stage_dims: vec![192],
                stage_blocks: vec![12],
                heads_per_stage: vec![3],
                recursions_per_block: 1,
                group_schedule: GroupSchedule::global(1, 1),
                ffn_ratio: 4.0,
                nll_ratio: 1.0,
                nll_placement: NllPlacement::None,
                lrc: false,
                loop_mode: LoopMode::Internal,
                stem_channels: Vec::new(),
                patch_size: 16,
                pos_embed: true,
                final_norm: true,
                mixer_token_hidden: 0,
                drop_path: 0.0,
                num_classes: 1000,
                input_resolution: 224,
            },
            Preset::MixerB16Recursive => ModelConfig {
                variant: Variant::Mixer,
                stage_dims: vec![768],
                stage_blocks: vec![12],
                heads_per_stage: vec![1],
                recursions_per_block: 2,
                group_schedule: GroupSchedule::global(1, 2),
                ffn_ratio: 4.0,
                nll_ratio: 1.0,
                nll_placement: NllPlacement::None,
                lrc: false,
                loop_mode: LoopMode::Internal,
                stem_channels: Vec::new(),
                patch_size: 16,
                pos_embed: false,
                final_norm: true,
                mixer_token_hidden: 384,
                drop_path: 0.0,
                num_classes: 1000,
                input_resolution: 224,
            },
            Preset::Desk => {
                let mut c = sret(vec![16, 32, 64], vec![8, 16, 16], 3.6, 1.0);
                c.stage_blocks = vec![1, 1, 1];
                c.heads_per_stage = vec![2, 4, 8];
                c.group_schedule.groups = vec![vec![4, 2], vec![2, 1], vec![1, 1]];
                c.num_classes = 10;
                c.input_resolution = 32;
                c
            }
        }
    }
}

fn sret(dims: Vec<usize>, stem: Vec<usize>, ffn_ratio: f64, nll_ratio: f64) -> ModelConfig {
    // head dim 32 where it divides; the 126-wide family uses 63
    let heads = dims.iter().map(|&d| if d % 32 == 0 { d / 32 } else { d / 63 }).collect();
    ModelConfig {
        variant: Variant::Sret,
        stage_dims: dims,
        stage_blocks: vec![2, 5, 3],
        heads_per_stage: heads,
        recursions_per_block: 2,
        group_schedule: GroupSchedule {
            groups: vec![vec![8, 2], vec![4, 1], vec![1, 1]],
            permutation_mode: Default::default(),
        },
        ffn_ratio,
        nll_ratio,
        nll_placement: NllPlacement::PerRecursion,
        lrc: true,
        loop_mode: LoopMode::Internal,
        stem_channels: stem,
        patch_size: 0,
        pos_embed: true,
        final_norm: false,
        mixer_token_hidden: 0,
        drop_path: 0.0,
        num_classes: 1000,
        input_resolution: 224,
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::config(format!("unknown preset `{s}` (known: {})", known.join(", ")))
            })
    }
}

/// The configuration registered under `name`.
pub fn preset(name: &str) -> Result<ModelConfig> {
    Ok(name.parse::<Preset>()?.config())
}
