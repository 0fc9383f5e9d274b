//! Run configuration.
//!
//! Files are flat UTF-8 `key = value` lines with dotted section prefixes;
//! `#` starts a comment. Values given on the command line override the
//! file, which overrides the defaults. Every key is listed in [`RunConfig::to_kv`],
//! whose output parses back to the same configuration.
//!
//! ```text
//! seed = 7
//! grid.patch = 4
//! model.elev_bias = false
//! data.horizons = 12, 24, 48, 96
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fields::{GridSpec, INPUT_CHANNELS, OUTPUT_CHANNELS};
use crate::model::{ModelConfig, PosMode};
use crate::reorder::WindMean;
use crate::synthdata::{Archetype, Boundary, DatasetConfig, InitKind, PhysicsConfig, Source, WindDraw, WindShape};
use crate::topo_bias::BiasCombine;
use crate::train::{LossAverage, TrainConfig};

/// Parse `key = value` lines. Duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::Config(format!("line {}: bad key `{k}`", n + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Apply one `grid.*` or `model.*` key. Returns false for other keys.
fn apply_model(m: &mut ModelConfig, k: &str, v: &str) -> Result<bool> {
    let s = &mut m.spec;
    match k {
        "grid.height" => s.height = num(k, v)?,
        "grid.width" => s.width = num(k, v)?,
        "grid.patch" => s.patch = num(k, v)?,
        "grid.sector_cols" => s.sector_cols = num(k, v)?,
        "grid.sector_rows" => s.sector_rows = num(k, v)?,
        "model.d" => m.d = num(k, v)?,
        "model.layers" => m.layers = num(k, v)?,
        "model.heads" => m.heads = num(k, v)?,
        "model.mlp" => m.mlp = num(k, v)?,
        "model.dropout" => m.dropout = num(k, v)?,
        "model.v_in" => m.v_in = num(k, v)?,
        "model.v_out" => m.v_out = num(k, v)?,
        "model.horizons" => m.horizons = num(k, v)?,
        "model.wind_reorder" => m.wind_reorder = flag(k, v)?,
        "model.elev_bias" => m.elev_bias = flag(k, v)?,
        "model.wind_mean" => m.wind_mean = WindMean::parse(v)?,
        "model.bias_combine" => m.bias_combine = BiasCombine::parse(v)?,
        "model.pos_mode" => m.pos_mode = PosMode::parse(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn model_to_kv(m: &ModelConfig) -> Vec<(String, String)> {
    let s = &m.spec;
    [
        ("grid.height", s.height.to_string()),
        ("grid.width", s.width.to_string()),
        ("grid.patch", s.patch.to_string()),
        ("grid.sector_cols", s.sector_cols.to_string()),
        ("grid.sector_rows", s.sector_rows.to_string()),
        ("model.d", m.d.to_string()),
        ("model.layers", m.layers.to_string()),
        ("model.heads", m.heads.to_string()),
        ("model.mlp", m.mlp.to_string()),
        ("model.dropout", m.dropout.to_string()),
        ("model.v_in", m.v_in.to_string()),
        ("model.v_out", m.v_out.to_string()),
        ("model.horizons", m.horizons.to_string()),
        ("model.wind_reorder", m.wind_reorder.to_string()),
        ("model.elev_bias", m.elev_bias.to_string()),
        ("model.wind_mean", m.wind_mean.as_str().to_string()),
        ("model.bias_combine", m.bias_combine.as_str().to_string()),
        ("model.pos_mode", m.pos_mode.as_str().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn model_from_kv(kv: &[(String, String)]) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for (k, v) in kv {
        if !apply_model(&mut m, k, v)? {
            return Err(Error::Config(format!("unknown model key `{k}`")));
        }
    }
    m.validate()?;
    Ok(m)
}

/// Ablation variants, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Wind,
    Full,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "wind" => Ok(Variant::Wind),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!("unknown variant `{s}` (baseline|wind|full)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Wind => "wind",
            Variant::Full => "full",
        }
    }

    /// `(wind_reorder, elev_bias)`.
    pub fn toggles(&self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Wind => (true, false),
            Variant::Full => (true, true),
        }
    }
}

/// Sector size for the tile sweep: the whole grid, or `n x n` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tiles {
    Global,
    Square(usize),
}

impl Tiles {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "global" {
            return Ok(Tiles::Global);
        }
        let (a, b) = s
            .split_once('x')
            .ok_or_else(|| Error::Config(format!("bad tile size `{s}` (global or NxN)")))?;
        let (a, b): (usize, usize) = (num("ablate.tiles", a)?, num("ablate.tiles", b)?);
        if a != b || a == 0 {
            return Err(Error::Config(format!("tile size `{s}` must be square and nonzero")));
        }
        Ok(Tiles::Square(a))
    }

    pub fn label(&self) -> String {
        match self {
            Tiles::Global => "global".into(),
            Tiles::Square(n) => format!("{n}x{n}"),
        }
    }

    /// Grid with this sectorization.
    pub fn apply(&self, spec: &GridSpec) -> Result<GridSpec> {
        match self {
            Tiles::Global => spec.with_sectors(spec.patch_cols(), spec.patch_rows()),
            Tiles::Square(n) => spec.with_sectors(*n, *n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Empty skips the tile sweep.
    pub tiles: Vec<Tiles>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0, 1, 2, 3, 4],
            variants: vec![Variant::Baseline, Variant::Wind, Variant::Full],
            tiles: vec![Tiles::Global, Tiles::Square(2), Tiles::Square(4), Tiles::Square(8)],
        }
    }
}

/// Everything one invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub archetype: Archetype,
    pub wind_shape: WindShape,
    pub physics: PhysicsConfig,
    pub data: DatasetConfig,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    pub hist_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            archetype: Archetype::BasinRidge,
            wind_shape: WindShape::default(),
            physics: PhysicsConfig::default(),
            data: DatasetConfig::default(),
            val_fraction: 0.1,
            test_fraction: 0.1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
            hist_bins: 20,
        }
    }
}

fn init_name(i: InitKind) -> &'static str {
    match i {
        InitKind::Blobs => "blobs",
        InitKind::WhiteNoise => "white_noise",
        InitKind::Zero => "zero",
    }
}

fn parse_sources(key: &str, v: &str) -> Result<Vec<Source>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (c, r) = s
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("`{key}`: expected cell:rate, got `{s}`")))?;
            Ok(Source {
                cell: num(key, c.trim())?,
                rate: num(key, r.trim())?,
            })
        })
        .collect()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    /// Apply overrides in order, then validate.
    pub fn apply(&mut self, kv: &[(String, String)]) -> Result<()> {
        for (k, v) in kv {
            self.set(k, v)?;
        }
        self.sync();
        self.validate()
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        if matches!(k, "model.v_in" | "model.v_out" | "model.horizons") {
            return Err(Error::Config(format!("`{k}` is derived from the data section")));
        }
        if apply_model(&mut self.model, k, v)? {
            return Ok(());
        }
        let p = &mut self.physics;
        let d = &mut self.data;
        let t = &mut self.train;
        match k {
            "seed" => self.seed = num(k, v)?,
            "terrain.archetype" => self.archetype = Archetype::parse(v)?,
            "terrain.perturbation" => self.wind_shape.perturbation = num(k, v)?,
            "terrain.slope_scale" => self.wind_shape.slope_scale = num(k, v)?,
            "physics.diffusivity" => p.diffusivity = num(k, v)?,
            "physics.dt" => p.dt = num(k, v)?,
            "physics.dx" => p.dx = num(k, v)?,
            "physics.boundary" => p.boundary = Boundary::parse(v)?,
            "physics.sink" => p.sink = num(k, v)?,
            "physics.max_wind" => p.max_wind = num(k, v)?,
            "physics.sources" => p.sources = parse_sources(k, v)?,
            "data.count" => d.count = num(k, v)?,
            "data.horizons" => d.horizons = list(k, v)?,
            "data.hours_per_step" => d.hours_per_step = num(k, v)?,
            "data.init" => {
                d.init = match v {
                    "blobs" => InitKind::Blobs,
                    "white_noise" => InitKind::WhiteNoise,
                    "zero" => InitKind::Zero,
                    _ => return Err(Error::Config(format!("unknown data.init `{v}` (blobs|white_noise|zero)"))),
                }
            }
            "data.wind" => {
                d.wind = match v {
                    "fixed" => WindDraw::Fixed,
                    "random" => WindDraw::Random {
                        min_speed: 0.5,
                        max_speed: 2.0,
                    },
                    _ => return Err(Error::Config(format!("unknown data.wind `{v}` (fixed|random)"))),
                }
            }
            "data.min_speed" | "data.max_speed" => match &mut d.wind {
                WindDraw::Random { min_speed, max_speed } => {
                    let target = if k == "data.min_speed" { min_speed } else { max_speed };
                    *target = num(k, v)?;
                }
                WindDraw::Fixed => return Err(Error::Config(format!("`{k}` needs data.wind = random"))),
            },
            "data.random_sources" => d.random_sources = num(k, v)?,
            "data.source_rate" => d.random_source_rate = num(k, v)?,
            "data.val_fraction" => self.val_fraction = num(k, v)?,
            "data.test_fraction" => self.test_fraction = num(k, v)?,
            "train.lr_embedding" => t.lr_embedding = num(k, v)?,
            "train.lr_backbone" => t.lr_backbone = num(k, v)?,
            "train.lr_head" => t.lr_head = num(k, v)?,
            "train.lr_base" => t.lr_base = num(k, v)?,
            "train.weight_decay" => t.weight_decay = num(k, v)?,
            "train.warmup" => t.warmup = num(k, v)?,
            "train.total_steps" => t.total_steps = num(k, v)?,
            "train.eta_min" => t.eta_min = num(k, v)?,
            "train.clip" => t.clip = num(k, v)?,
            "train.beta1" => t.beta1 = num(k, v)?,
            "train.beta2" => t.beta2 = num(k, v)?,
            "train.eps" => t.eps = num(k, v)?,
            "train.batch" => t.batch = num(k, v)?,
            "train.epochs" => t.epochs = num(k, v)?,
            "train.patience" => t.patience = num(k, v)?,
            "train.val_interval" => t.val_interval = num(k, v)?,
            "train.loss_average" => t.loss_average = LossAverage::parse(v)?,
            "train.alpha_reset" => t.alpha_reset = if v == "none" { None } else { Some(num(k, v)?) },
            "train.stop_at" => t.stop_at = if v == "none" { None } else { Some(num(k, v)?) },
            "ablate.seeds" => self.ablate.seeds = list(k, v)?,
            "ablate.variants" => {
                self.ablate.variants = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Variant::parse)
                    .collect::<Result<_>>()?
            }
            "ablate.tiles" => {
                self.ablate.tiles = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "none")
                    .map(Tiles::parse)
                    .collect::<Result<_>>()?
            }
            "eval.hist_bins" => self.hist_bins = num(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// Propagate shared values: the seed, horizon count and channel counts.
    fn sync(&mut self) {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.model.horizons = self.data.horizons.len();
        self.model.v_in = INPUT_CHANNELS.len();
        self.model.v_out = OUTPUT_CHANNELS.len();
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.physics.validate()?;
        self.train.validate()?;
        self.data.step_plan(&self.physics)?;
        if let WindDraw::Random { min_speed, max_speed } = self.data.wind {
            if !(0.0 <= min_speed && min_speed <= max_speed && max_speed <= self.physics.max_wind) {
                return Err(Error::Config(format!(
                    "wind speeds must satisfy 0 ≤ min ≤ max ≤ physics.max_wind ({min_speed}, {max_speed}, {})",
                    self.physics.max_wind
                )));
            }
        }
        let (vf, tf) = (self.val_fraction, self.test_fraction);
        if !(vf > 0.0 && tf >= 0.0 && vf + tf < 1.0) {
            return Err(Error::Config(format!("bad split fractions val {vf}, test {tf}")));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must list at least one seed".into()));
        }
        if self.hist_bins == 0 {
            return Err(Error::Config("eval.hist_bins must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![("seed".into(), self.seed.to_string())];
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        push("terrain.archetype", self.archetype.as_str().into());
        push("terrain.perturbation", self.wind_shape.perturbation.to_string());
        push("terrain.slope_scale", self.wind_shape.slope_scale.to_string());
        let p = &self.physics;
        push("physics.diffusivity", p.diffusivity.to_string());
        push("physics.dt", p.dt.to_string());
        push("physics.dx", p.dx.to_string());
        push("physics.boundary", p.boundary.as_str().into());
        push("physics.sink", p.sink.to_string());
        push("physics.max_wind", p.max_wind.to_string());
        push(
            "physics.sources",
            p.sources.iter().map(|s| format!("{}:{}", s.cell, s.rate)).collect::<Vec<_>>().join(","),
        );
        let d = &self.data;
        push("data.count", d.count.to_string());
        push("data.horizons", join(&d.horizons));
        push("data.hours_per_step", d.hours_per_step.to_string());
        push("data.init", init_name(d.init).into());
        match d.wind {
            WindDraw::Fixed => push("data.wind", "fixed".into()),
            WindDraw::Random { min_speed, max_speed } => {
                push("data.wind", "random".into());
                push("data.min_speed", min_speed.to_string());
                push("data.max_speed", max_speed.to_string());
            }
        }
        push("data.random_sources", d.random_sources.to_string());
        push("data.source_rate", d.random_source_rate.to_string());
        push("data.val_fraction", self.val_fraction.to_string());
        push("data.test_fraction", self.test_fraction.to_string());
        for (k, v) in model_to_kv(&self.model) {
            if !matches!(k.as_str(), "model.v_in" | "model.v_out" | "model.horizons") {
                push(&k, v);
            }
        }
        let t = &self.train;
        push("train.lr_embedding", t.lr_embedding.to_string());
        push("train.lr_backbone", t.lr_backbone.to_string());
        push("train.lr_head", t.lr_head.to_string());
        push("train.lr_base", t.lr_base.to_string());
        push("train.weight_decay", t.weight_decay.to_string());
        push("train.warmup", t.warmup.to_string());
        push("train.total_steps", t.total_steps.to_string());
        push("train.eta_min", t.eta_min.to_string());
        push("train.clip", t.clip.to_string());
        push("train.beta1", t.beta1.to_string());
        push("train.beta2", t.beta2.to_string());
        push("train.eps", t.eps.to_string());
        push("train.batch", t.batch.to_string());
        push("train.epochs", t.epochs.to_string());
        push("train.patience", t.patience.to_string());
        push("train.val_interval", t.val_interval.to_string());
        push("train.loss_average", t.loss_average.as_str().into());
        push("train.alpha_reset", t.alpha_reset.map_or("none".into(), |s| s.to_string()));
        push("train.stop_at", t.stop_at.map_or("none".into(), |s| s.to_string()));
        push("ablate.seeds", join(&self.ablate.seeds));
        push(
            "ablate.variants",
            self.ablate.variants.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(","),
        );
        push(
            "ablate.tiles",
            if self.ablate.tiles.is_empty() {
                "none".into()
            } else {
                self.ablate.tiles.iter().map(|t| t.label()).collect::<Vec<_>>().join(",")
            },
        );
        push("eval.hist_bins", self.hist_bins.to_string());
        kv
    }

    /// The resolved configuration as file text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_kv_rules() {
        let kv = parse_kv("# comment\n a = 1 \n\nb.c = x y # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b.c".into(), "x y".into())]);
        assert!(parse_kv("a = 1\na = 2").is_err());
        assert!(parse_kv("novalue").is_err());
        assert!(parse_kv("a b = 1").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::from_text("seed = 9\ngrid.patch = 4\ngrid.sector_cols = 4\ngrid.sector_rows = 4\nmodel.elev_bias = off\ndata.horizons = 12,24\nablate.tiles = global,4x4").unwrap();
        assert_eq!(cfg.model.horizons, 2);
        assert_eq!(cfg.train.seed, 9);
        assert!(!cfg.model.elev_bias);
        assert_eq!(cfg.ablate.tiles, vec![Tiles::Global, Tiles::Square(4)]);
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        cfg.apply(&[("model.d".into(), "32".into())]).unwrap();
        assert_eq!(cfg.model.d, 32);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "model.d = sixty",
            "nope = 1",
            "model.heads = 3",
            "train.warmup = 5000",
            "model.horizons = 2",
            "data.horizons = 18",
        ] {
            let e = RunConfig::from_text(text).unwrap_err();
            assert!(matches!(e.exit_code(), 2), "{text}: {e:?}");
        }
        let e = RunConfig::from_text("physics.max_wind = 5").unwrap_err();
        assert!(matches!(e, Error::Stability(_)));
    }

    #[test]
    fn tile_labels() {
        let spec = GridSpec::new(32, 64, 2, 8, 8).unwrap();
        let g = Tiles::Global.apply(&spec).unwrap();
        assert_eq!(g.n_sectors(), 1);
        assert_eq!(Tiles::parse("4x4").unwrap().apply(&spec).unwrap().n_sectors(), 32);
        assert!(Tiles::parse("3x4").is_err());
    }
}
