//! Flat INI run configuration. Every key must be known; `preset` in
//! `[model]` picks the defaults the remaining keys override.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::attention::ArmConfig;
use crate::data::{GrammarConfig, RenderConfig};
use crate::error::{Error, Result};
use crate::metrics::SearchMode;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?} (valid: toy, paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    /// `None`: twice the longest training label plus two.
    pub max_len: Option<usize>,
    pub mode: SearchMode,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { beam: 10, max_len: None, mode: SearchMode::Joint }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grammar: GrammarConfig,
    pub render: RenderConfig,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub search: SearchConfig,
    /// Beam used when scoring ablation cells.
    pub ablate_beam: usize,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (model, train) = match p {
            Preset::Toy => (ModelConfig::toy(), TrainConfig::toy()),
            Preset::Paper => (ModelConfig::paper(), TrainConfig::paper()),
        };
        let train = TrainConfig { coverage: model.decoder.coverage, ..train };
        RunConfig {
            preset: p,
            model,
            train,
            grammar: GrammarConfig::default(),
            render: RenderConfig::default(),
            dataset_size: 2000,
            dataset_seed: 0,
            search: SearchConfig::default(),
            ablate_beam: 3,
        }
    }

    pub fn toy() -> Self {
        RunConfig::preset(Preset::Toy)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("ini syntax: {e}")))?;
        let mut pairs = Vec::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let section = section.ok_or_else(|| Error::Config(format!("key {k:?} must sit inside a section")))?;
                pairs.push((section.to_string(), k.to_string(), v.to_string()));
            }
        }
        let preset = pairs.iter().find(|(s, k, _)| s == "model" && k == "preset").map(|(_, _, v)| v.parse()).transpose()?.unwrap_or(Preset::Toy);
        let mut cfg = RunConfig::preset(preset);
        for (s, k, v) in &pairs {
            cfg.set(s, k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `section.key=value`.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (lhs, value) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not section.key=value")))?;
        let (section, key) = lhs.split_once('.').ok_or_else(|| Error::Config(format!("override {assignment:?} is not section.key=value")))?;
        self.set(section.trim(), key.trim(), value.trim())?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.grammar.validate()?;
        if self.search.beam == 0 || self.ablate_beam == 0 {
            return Err(Error::Config("beam widths must be at least 1".into()));
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        fn p<X: FromStr>(section: &str, key: &str, v: &str) -> Result<X> {
            v.trim().parse().map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {v:?}")))
        }
        let e = &mut self.model.encoder;
        let d = &mut self.model.decoder;
        let t = &mut self.train;
        let g = &mut self.grammar;
        match (section, key) {
            ("model", "preset") => {}
            ("model", "d_model") => d.d_model = p(section, key, v)?,
            ("model", "heads") => d.heads = p(section, key, v)?,
            ("model", "layers") => d.num_layers = p(section, key, v)?,
            ("model", "d_ff") => d.d_ff = p(section, key, v)?,
            ("model", "dropout") => d.dropout = p(section, key, v)?,
            ("model", "coverage") => {
                d.coverage = v.parse()?;
                t.coverage = d.coverage;
            }
            ("model", "arm_start_layer") => d.arm_start_layer = p(section, key, v)?,
            ("model", "arm_shared") => d.arm_shared = p(section, key, v)?,
            ("model", "scale_embedding") => d.scale_embedding = p(section, key, v)?,
            ("model", "arm_kernel") => d.arm = ArmConfig { kernel: p(section, key, v)?, ..d.arm },
            ("model", "arm_channels") => d.arm = ArmConfig { channels: p(section, key, v)?, ..d.arm },
            ("encoder", "blocks") => e.num_blocks = p(section, key, v)?,
            ("encoder", "layers_per_block") => e.layers_per_block = p(section, key, v)?,
            ("encoder", "growth_rate") => e.growth_rate = p(section, key, v)?,
            ("encoder", "transition_factor") => e.transition_factor = p(section, key, v)?,
            ("encoder", "transitions") => e.num_transitions = p(section, key, v)?,
            ("encoder", "dropout") => e.dropout = p(section, key, v)?,
            ("encoder", "stem_kernel") => e.stem.kernel = p(section, key, v)?,
            ("encoder", "stem_stride") => e.stem.stride = p(section, key, v)?,
            ("encoder", "stem_pool") => e.stem.max_pool = p(section, key, v)?,
            ("train", "lr") => t.lr = p(section, key, v)?,
            ("train", "momentum") => t.momentum = p(section, key, v)?,
            ("train", "weight_decay") => t.weight_decay = p(section, key, v)?,
            ("train", "epochs") => t.epochs = p(section, key, v)?,
            ("train", "batch_size") => t.batch_size = p(section, key, v)?,
            ("train", "seed") => t.seed = p(section, key, v)?,
            ("train", "precision") => t.precision = v.parse()?,
            ("train", "augment") => t.augment = p(section, key, v)?,
            ("train", "scale_min") => t.scale_min = p(section, key, v)?,
            ("train", "scale_max") => t.scale_max = p(section, key, v)?,
            ("train", "val_fraction") => t.val_fraction = p(section, key, v)?,
            ("dataset", "size") => self.dataset_size = p(section, key, v)?,
            ("dataset", "seed") => self.dataset_seed = p(section, key, v)?,
            ("dataset", "short_fraction") => g.short_fraction = p(section, key, v)?,
            ("dataset", "short_max") => g.short_max = p(section, key, v)?,
            ("dataset", "long_max") => g.long_max = p(section, key, v)?,
            ("dataset", "max_depth") => g.max_depth = p(section, key, v)?,
            ("dataset", "script_prob") => g.script_prob = p(section, key, v)?,
            ("dataset", "paren_prob") => g.paren_prob = p(section, key, v)?,
            ("dataset", "operator_prob") => g.operator_prob = p(section, key, v)?,
            ("dataset", "jitter") => self.render.jitter = p(section, key, v)?,
            ("dataset", "margin") => self.render.margin = p(section, key, v)?,
            ("search", "beam") => self.search.beam = p(section, key, v)?,
            ("search", "max_len") => {
                let n: usize = p(section, key, v)?;
                self.search.max_len = (n > 0).then_some(n);
            }
            ("search", "mode") => {
                self.search.mode = match v {
                    "joint" => SearchMode::Joint,
                    "l2r" => SearchMode::L2R,
                    _ => return Err(Error::Config(format!("[search] mode: {v:?} is not joint or l2r"))),
                }
            }
            ("ablate", "beam") => self.ablate_beam = p(section, key, v)?,
            _ => return Err(Error::Config(format!("unknown key [{section}] {key}"))),
        }
        Ok(())
    }

    /// Full configuration as INI; parsing it back gives an equal value.
    pub fn to_ini(&self) -> String {
        let (e, d, t, g) = (&self.model.encoder, &self.model.decoder, &self.train, &self.grammar);
        let mut s = String::new();
        let preset = match self.preset {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        };
        let _ = writeln!(s, "[model]\npreset = {preset}\nd_model = {}\nheads = {}\nlayers = {}\nd_ff = {}\ndropout = {}\ncoverage = {}\narm_start_layer = {}\narm_shared = {}\narm_kernel = {}\narm_channels = {}\nscale_embedding = {}\n",
            d.d_model, d.heads, d.num_layers, d.d_ff, d.dropout, d.coverage, d.arm_start_layer, d.arm_shared, d.arm.kernel, d.arm.channels, d.scale_embedding);
        let _ = writeln!(s, "[encoder]\nblocks = {}\nlayers_per_block = {}\ngrowth_rate = {}\ntransition_factor = {}\ntransitions = {}\ndropout = {}\nstem_kernel = {}\nstem_stride = {}\nstem_pool = {}\n",
            e.num_blocks, e.layers_per_block, e.growth_rate, e.transition_factor, e.num_transitions, e.dropout, e.stem.kernel, e.stem.stride, e.stem.max_pool);
        let _ = writeln!(s, "[train]\nlr = {}\nmomentum = {}\nweight_decay = {}\nepochs = {}\nbatch_size = {}\nseed = {}\nprecision = {}\naugment = {}\nscale_min = {}\nscale_max = {}\nval_fraction = {}\n",
            t.lr, t.momentum, t.weight_decay, t.epochs, t.batch_size, t.seed, t.precision, t.augment, t.scale_min, t.scale_max, t.val_fraction);
        let _ = writeln!(s, "[dataset]\nsize = {}\nseed = {}\nshort_fraction = {}\nshort_max = {}\nlong_max = {}\nmax_depth = {}\nscript_prob = {}\nparen_prob = {}\noperator_prob = {}\njitter = {}\nmargin = {}\n",
            self.dataset_size, self.dataset_seed, g.short_fraction, g.short_max, g.long_max, g.max_depth, g.script_prob, g.paren_prob, g.operator_prob, self.render.jitter, self.render.margin);
        let mode = match self.search.mode {
            SearchMode::Joint => "joint",
            SearchMode::L2R => "l2r",
        };
        let _ = writeln!(s, "[search]\nbeam = {}\nmax_len = {}\nmode = {mode}\n", self.search.beam, self.search.max_len.unwrap_or(0));
        let _ = write!(s, "[ablate]\nbeam = {}\n", self.ablate_beam);
        s
    }
}
