//! Patch transformer forecaster.
//!
//! ```text
//! patchify → [wind reorder] → embed + B_pos → L × (LN → attn(+B_elev) → add, LN → MLP → add)
//!          → LN → two-layer head → [inverse reorder] → unpatchify
//! ```
//!
//! Tokens enter in canonical (sector-major) patch order. When wind
//! reordering is on, rows are permuted into wind order before the embedding
//! and the elevation bias is co-permuted so entry `(i, j)` keeps referring to
//! the same pair of patches. The positional embedding is indexed by sequence
//! slot by default ([`PosMode::Sequence`]), which is what lets the order carry
//! information; [`PosMode::Patch`] co-permutes it instead, making reordering
//! an exact no-op.
//!
//! The head emits `horizons · V_out · p²` values per token, so every lead time
//! comes out of one pass.

use ndarray::{s, Array2, ArrayView2, Axis, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{attend_backward, attend_forward, cast, AttentionCache, AttentionParams, PositionalEmbedding};
use crate::error::{Error, Result};
use crate::fields::{normalize, Field, GridSpec, LandMask, NormStats, Sample, OUTPUT_CHANNELS};
use crate::nn::{affine, dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, NormCache};
use crate::reorder::{build_permutation, SectorPermutation, WindMean};
use crate::seed::{self, derive};
use crate::topo_bias::{build_bias_with, patch_elevations, BiasCombine, ALPHA_INIT};

/// How the positional embedding follows the wind permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PosMode {
    /// Row `n` of the embedding goes to sequence slot `n`.
    #[default]
    Sequence,
    /// Row `n` belongs to canonical patch `n` and moves with it.
    Patch,
}

impl PosMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(PosMode::Sequence),
            "patch" => Ok(PosMode::Patch),
            _ => Err(Error::Config(format!("unknown pos_mode `{s}` (sequence|patch)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PosMode::Sequence => "sequence",
            PosMode::Patch => "patch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub spec: GridSpec,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
    pub dropout: f64,
    pub v_in: usize,
    pub v_out: usize,
    pub horizons: usize,
    pub wind_reorder: bool,
    pub elev_bias: bool,
    pub wind_mean: WindMean,
    pub bias_combine: BiasCombine,
    pub pos_mode: PosMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            spec: GridSpec::new(32, 64, 2, 8, 8).expect("default grid"),
            d: 64,
            layers: 2,
            heads: 4,
            mlp: 256,
            dropout: 0.1,
            v_in: crate::fields::INPUT_CHANNELS.len(),
            v_out: OUTPUT_CHANNELS.len(),
            horizons: 4,
            wind_reorder: true,
            elev_bias: true,
            wind_mean: WindMean::Weighted,
            bias_combine: BiasCombine::Identity,
            pos_mode: PosMode::Sequence,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.d, self.heads)));
        }
        if self.mlp == 0 || self.v_in == 0 || self.v_out == 0 || self.horizons == 0 {
            return Err(Error::Config("mlp, v_in, v_out and horizons must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn token_in(&self) -> usize {
        self.v_in * self.spec.patch * self.spec.patch
    }

    pub fn token_out(&self) -> usize {
        self.horizons * self.v_out * self.spec.patch * self.spec.patch
    }
}

/// Learning-rate groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// Patch and positional embeddings.
    Embedding,
    /// Transformer layers.
    Backbone,
    /// Final norm and prediction head.
    Head,
    /// The elevation scale α.
    Base,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Embedding, Group::Backbone, Group::Head, Group::Base];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Embedding => "embedding",
            Group::Backbone => "backbone",
            Group::Head => "head",
            Group::Base => "base",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Array2<T>,
    pub ln1_b: Array2<T>,
    pub attn: AttentionParams<T>,
    pub ln2_g: Array2<T>,
    pub ln2_b: Array2<T>,
    pub w1: Array2<T>,
    pub b1: Array2<T>,
    pub w2: Array2<T>,
    pub b2: Array2<T>,
}

/// Every trainable tensor. Vectors are stored as `1 x n` matrices and α as
/// `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub embed_w: Array2<T>,
    pub embed_b: Array2<T>,
    pub pos: PositionalEmbedding<T>,
    pub layers: Vec<LayerParams<T>>,
    pub norm_g: Array2<T>,
    pub norm_b: Array2<T>,
    pub head_w1: Array2<T>,
    pub head_b1: Array2<T>,
    pub head_w2: Array2<T>,
    pub head_b2: Array2<T>,
    pub alpha: Array2<T>,
}

const LAYER_TENSORS: [&str; 12] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2",
    "mlp.b2",
];

fn layer_tensors<T>(layer: &LayerParams<T>) -> [&Array2<T>; 12] {
    [
        &layer.ln1_g,
        &layer.ln1_b,
        &layer.attn.wq,
        &layer.attn.wk,
        &layer.attn.wv,
        &layer.attn.wo,
        &layer.ln2_g,
        &layer.ln2_b,
        &layer.w1,
        &layer.b1,
        &layer.w2,
        &layer.b2,
    ]
}

fn layer_tensors_mut<T>(layer: &mut LayerParams<T>) -> [&mut Array2<T>; 12] {
    [
        &mut layer.ln1_g,
        &mut layer.ln1_b,
        &mut layer.attn.wq,
        &mut layer.attn.wk,
        &mut layer.attn.wv,
        &mut layer.attn.wo,
        &mut layer.ln2_g,
        &mut layer.ln2_b,
        &mut layer.w1,
        &mut layer.b1,
        &mut layer.w2,
        &mut layer.b2,
    ]
}

impl<T: NdFloat> ParamStore<T> {
    /// Visit every tensor in a fixed order with its name and group.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, Group, &'a Array2<T>)) {
        f("embed.w", Group::Embedding, &self.embed_w);
        f("embed.b", Group::Embedding, &self.embed_b);
        f("pos.grid", Group::Embedding, &self.pos.grid);
        f("pos.proj", Group::Embedding, &self.pos.proj);
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer_tensors(layer)) {
                f(&format!("layer{l}.{name}"), Group::Backbone, t);
            }
        }
        f("norm.g", Group::Head, &self.norm_g);
        f("norm.b", Group::Head, &self.norm_b);
        f("head.w1", Group::Head, &self.head_w1);
        f("head.b1", Group::Head, &self.head_b1);
        f("head.w2", Group::Head, &self.head_w2);
        f("head.b2", Group::Head, &self.head_b2);
        f("alpha", Group::Base, &self.alpha);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, Group, &mut Array2<T>)) {
        f("embed.w", Group::Embedding, &mut self.embed_w);
        f("embed.b", Group::Embedding, &mut self.embed_b);
        f("pos.grid", Group::Embedding, &mut self.pos.grid);
        f("pos.proj", Group::Embedding, &mut self.pos.proj);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer_tensors_mut(layer)) {
                f(&format!("layer{l}.{name}"), Group::Backbone, t);
            }
        }
        f("norm.g", Group::Head, &mut self.norm_g);
        f("norm.b", Group::Head, &mut self.norm_b);
        f("head.w1", Group::Head, &mut self.head_w1);
        f("head.b1", Group::Head, &mut self.head_b1);
        f("head.w2", Group::Head, &mut self.head_w2);
        f("head.b2", Group::Head, &mut self.head_b2);
        f("alpha", Group::Base, &mut self.alpha);
    }

    /// Visit matching tensors of `self` and `other` pairwise.
    pub fn zip_mut(&mut self, other: &ParamStore<T>, mut f: impl FnMut(&str, Group, &mut Array2<T>, &Array2<T>)) {
        let mut theirs = Vec::new();
        other.visit(|_, _, t| theirs.push(t));
        let mut i = 0;
        self.visit_mut(|name, group, mine| {
            f(name, group, mine, theirs[i]);
            i += 1;
        });
    }

    pub fn names(&self) -> Vec<(String, Group)> {
        let mut out = Vec::new();
        self.visit(|n, g, _| out.push((n.to_string(), g)));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, _, t| t.fill(T::zero()));
        z
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, t| n += t.len());
        n
    }

    pub fn alpha(&self) -> T {
        self.alpha[(0, 0)]
    }

    /// Element type conversion, e.g. for 64-bit gradient checks.
    pub fn cast<U: NdFloat>(&self) -> ParamStore<U> {
        let c = |a: &Array2<T>| a.mapv(|x| cast::<U>(x.to_f64().expect("finite")));
        ParamStore {
            embed_w: c(&self.embed_w),
            embed_b: c(&self.embed_b),
            pos: PositionalEmbedding {
                grid: c(&self.pos.grid),
                proj: c(&self.pos.proj),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: c(&l.ln1_g),
                    ln1_b: c(&l.ln1_b),
                    attn: AttentionParams {
                        wq: c(&l.attn.wq),
                        wk: c(&l.attn.wk),
                        wv: c(&l.attn.wv),
                        wo: c(&l.attn.wo),
                        heads: l.attn.heads,
                    },
                    ln2_g: c(&l.ln2_g),
                    ln2_b: c(&l.ln2_b),
                    w1: c(&l.w1),
                    b1: c(&l.b1),
                    w2: c(&l.w2),
                    b2: c(&l.b2),
                })
                .collect(),
            norm_g: c(&self.norm_g),
            norm_b: c(&self.norm_b),
            head_w1: c(&self.head_w1),
            head_b1: c(&self.head_b1),
            head_w2: c(&self.head_w2),
            head_b2: c(&self.head_b2),
            alpha: c(&self.alpha),
        }
    }
}

/// Standard deviation of a unit normal truncated to [-2, 2].
const TRUNCATED_STD: f64 = 0.879_625_7;

/// Normal truncated at ±2 standard deviations, rescaled to variance `1/fan_in`.
fn truncated_normal<T: NdFloat>(shape: (usize, usize), fan_in: usize, rng: &mut impl Rng) -> Array2<T> {
    let std = 1.0 / ((fan_in as f64).sqrt() * TRUNCATED_STD);
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break cast::<T>(z * std);
        }
    })
}

/// Normalized coordinates of every canonical patch, centred on 0.
pub fn patch_coordinates(spec: &GridSpec) -> Array2<f64> {
    let (rows, cols) = (spec.patch_rows() as f64, spec.patch_cols() as f64);
    Array2::from_shape_fn((spec.n_patches(), 2), |(i, k)| {
        let (r, c) = spec.patch_position(i);
        if k == 0 {
            (c as f64 + 0.5) / cols - 0.5
        } else {
            (r as f64 + 0.5) / rows - 0.5
        }
    })
}

/// Truncated-normal weights with variance `1/fan_in`, zero biases, unit norm
/// gains, positional grid at the patch coordinates and α = 2.
pub fn init_params<T: NdFloat>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, seed::STREAM_INIT, 0));
    let (d, m) = (cfg.d, cfg.mlp);
    let zeros = |n: usize| Array2::<T>::zeros((1, n));
    let ones = |n: usize| Array2::<T>::ones((1, n));
    let embed_w = truncated_normal((cfg.token_in(), d), cfg.token_in(), &mut rng);
    let grid = patch_coordinates(&cfg.spec).mapv(cast::<T>);
    let proj = truncated_normal((2, d), 2, &mut rng);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let wq = truncated_normal((d, d), d, &mut rng);
        let wk = truncated_normal((d, d), d, &mut rng);
        let wv = truncated_normal((d, d), d, &mut rng);
        let wo = truncated_normal((d, d), d, &mut rng);
        layers.push(LayerParams {
            ln1_g: ones(d),
            ln1_b: zeros(d),
            attn: AttentionParams::new(wq, wk, wv, wo, cfg.heads)?,
            ln2_g: ones(d),
            ln2_b: zeros(d),
            w1: truncated_normal((d, m), d, &mut rng),
            b1: zeros(m),
            w2: truncated_normal((m, d), m, &mut rng),
            b2: zeros(d),
        });
    }
    Ok(ParamStore {
        embed_w,
        embed_b: zeros(d),
        pos: PositionalEmbedding { grid, proj },
        layers,
        norm_g: ones(d),
        norm_b: zeros(d),
        head_w1: truncated_normal((d, d), d, &mut rng),
        head_b1: zeros(d),
        head_w2: truncated_normal((d, cfg.token_out()), d, &mut rng),
        head_b2: zeros(cfg.token_out()),
        alpha: Array2::from_elem((1, 1), cast::<T>(ALPHA_INIT)),
    })
}

/// `N x (C·p²)` token matrix in canonical patch order; per token the layout
/// is channel, then row, then column inside the patch.
pub fn patchify(field: &Field) -> Array2<f32> {
    let spec = field.spec();
    let p = spec.patch;
    let c = field.n_channels();
    let mut out = Array2::<f32>::zeros((spec.n_patches(), c * p * p));
    for (idx, mut row) in out.rows_mut().into_iter().enumerate() {
        let (pr, pc) = spec.patch_position(idx);
        let mut k = 0;
        for ch in 0..c {
            let data = field.channel(ch);
            for r in pr * p..(pr + 1) * p {
                for col in pc * p..(pc + 1) * p {
                    row[k] = data[r * spec.width + col];
                    k += 1;
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: ArrayView2<'_, f32>, spec: GridSpec, channels: Vec<String>, units: Vec<String>) -> Result<Field> {
    let p = spec.patch;
    let c = channels.len();
    if tokens.dim() != (spec.n_patches(), c * p * p) {
        return Err(Error::Shape(format!(
            "tokens {:?} do not fit {} patches of {c} channels",
            tokens.dim(),
            spec.n_patches()
        )));
    }
    let mut data = vec![0f32; c * spec.cells()];
    for (idx, row) in tokens.rows().into_iter().enumerate() {
        let (pr, pc) = spec.patch_position(idx);
        let mut k = 0;
        for ch in 0..c {
            for r in pr * p..(pr + 1) * p {
                for col in pc * p..(pc + 1) * p {
                    data[ch * spec.cells() + r * spec.width + col] = row[k];
                    k += 1;
                }
            }
        }
    }
    Field::new(spec, channels, units, data)
}

/// A sample turned into model-ready tensors.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    /// Normalized input tokens, canonical order.
    pub tokens: Array2<T>,
    /// Normalized targets, `N x (horizons·V_out·p²)`, canonical order.
    pub targets: Array2<T>,
    /// Wind permutation from the physical winds; identity when reordering is off.
    pub perm: SectorPermutation,
    /// Mean patch elevations in metres.
    pub elevations: Vec<f64>,
}

/// Normalize, patchify and derive the wind permutation and patch elevations
/// from the raw (physical) input channels.
pub fn prepare<T: NdFloat>(sample: &Sample, stats: &NormStats, cfg: &ModelConfig) -> Result<Prepared<T>> {
    let spec = cfg.spec;
    if sample.spec().height != spec.height || sample.spec().width != spec.width {
        return Err(Error::Shape("sample and model grids differ".into()));
    }
    if sample.targets.len() != cfg.horizons {
        return Err(Error::Shape(format!(
            "sample has {} horizons, model expects {}",
            sample.targets.len(),
            cfg.horizons
        )));
    }
    if sample.input.n_channels() != cfg.v_in {
        return Err(Error::Shape(format!(
            "sample has {} input channels, model expects {}",
            sample.input.n_channels(),
            cfg.v_in
        )));
    }
    let regrid = |f: &Field| f.clone().into_data();
    let input = Field::new(spec, sample.input.channels().to_vec(), sample.input.units().to_vec(), regrid(&sample.input))?;
    let tokens = patchify(&normalize(&input, stats)?).mapv(|x| cast::<T>(x as f64));
    let p2 = spec.patch * spec.patch;
    let mut targets = Array2::<T>::zeros((spec.n_patches(), cfg.token_out()));
    for (h, t) in sample.targets.iter().enumerate() {
        let names: Vec<&str> = OUTPUT_CHANNELS[..cfg.v_out].to_vec();
        let sel = t.select(&names)?;
        let sel = Field::new(spec, sel.channels().to_vec(), sel.units().to_vec(), sel.into_data())?;
        let tok = patchify(&normalize(&sel, stats)?);
        let w = cfg.v_out * p2;
        targets
            .slice_mut(s![.., h * w..(h + 1) * w])
            .assign(&tok.mapv(|x| cast::<T>(x as f64)));
    }
    let perm = if cfg.wind_reorder {
        build_permutation(&spec, input.channel_by_name("u")?, input.channel_by_name("v")?, cfg.wind_mean)?
    } else {
        SectorPermutation::identity(spec)
    };
    let elevations = patch_elevations(input.channel_by_name("elevation")?, &spec)?;
    Ok(Prepared {
        tokens,
        targets,
        perm,
        elevations,
    })
}

/// Land mask laid out like the target tokens.
#[derive(Debug, Clone)]
pub struct TokenMask<T> {
    /// `N x (horizons·V_out·p²)` of zeros and ones.
    pub values: Array2<T>,
    /// ‖M‖₁, the number of masked-in cells.
    pub count: usize,
}

pub fn token_mask<T: NdFloat>(mask: &LandMask, cfg: &ModelConfig) -> Result<TokenMask<T>> {
    let spec = cfg.spec;
    if mask.spec().height != spec.height || mask.spec().width != spec.width {
        return Err(Error::Shape("mask and model grids differ".into()));
    }
    let p2 = spec.patch * spec.patch;
    let field = Field::new(spec, vec!["mask".into()], vec!["1".into()], mask.to_field().into_data())?;
    let tok = patchify(&field).mapv(|x| cast::<T>(x as f64));
    let mut values = Array2::<T>::zeros((spec.n_patches(), cfg.token_out()));
    for block in 0..cfg.horizons * cfg.v_out {
        values.slice_mut(s![.., block * p2..(block + 1) * p2]).assign(&tok);
    }
    Ok(TokenMask {
        values,
        count: mask.count(),
    })
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1: NormCache<T>,
    attn: AttentionCache<T>,
    drop1: Option<Array2<T>>,
    ln2: NormCache<T>,
    m: Array2<T>,
    u1: Array2<T>,
    g1: Array2<T>,
    drop2: Option<Array2<T>>,
}

/// Intermediates of [`forward`] needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    x_seq: Array2<T>,
    layers: Vec<LayerCache<T>>,
    lnf: NormCache<T>,
    hf: Array2<T>,
    hu: Array2<T>,
    hg: Array2<T>,
    /// `∂B/∂α` in sequence order, when the elevation bias is on.
    dbias_dalpha: Option<Array2<T>>,
}

impl<T: NdFloat> ForwardCache<T> {
    /// Head-averaged attention weights of every layer, sequence order.
    pub fn attention(&self) -> Vec<Array2<T>> {
        self.layers.iter().map(|l| l.attn.mean_weights()).collect()
    }
}

fn reordering<'a>(cfg: &ModelConfig, prep: &'a Prepared<impl NdFloat>) -> Option<&'a SectorPermutation> {
    (cfg.wind_reorder && !prep.perm.is_identity()).then_some(&prep.perm)
}

fn check_finite<T: NdFloat>(x: &Array2<T>, location: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(location, "non-finite activations"));
    }
    Ok(())
}

/// Elevation bias for the current α in sequence order, with its α-derivative.
pub fn sequence_bias<T: NdFloat>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    prep: &Prepared<T>,
) -> Result<Option<(Array2<T>, Array2<T>)>> {
    if !cfg.elev_bias {
        return Ok(None);
    }
    let alpha = params.alpha().to_f64().expect("finite alpha");
    let eb = build_bias_with(&prep.elevations, alpha, cfg.bias_combine)?;
    let b = eb.matrix().mapv(cast::<T>);
    let g = eb.gradient_alpha().mapv(cast::<T>);
    Ok(Some(match reordering(cfg, prep) {
        Some(perm) => (perm.apply_pairwise(b.view())?, perm.apply_pairwise(g.view())?),
        None => (b, g),
    }))
}

/// One forward pass. `dropout` supplies the random stream for dropout
/// masks; `None` runs in evaluation mode. Output is in canonical order.
pub fn forward<T: NdFloat, R: Rng>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    prep: &Prepared<T>,
    mut dropout: Option<&mut R>,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    let perm = reordering(cfg, prep);
    let x_seq = match perm {
        Some(p) => p.apply_rows(prep.tokens.view())?,
        None => prep.tokens.clone(),
    };
    let pos = params.pos.embedding();
    let pos_seq = match (perm, cfg.pos_mode) {
        (Some(p), PosMode::Patch) => p.apply_rows(pos.view())?,
        _ => pos,
    };
    let mut h = affine(x_seq.view(), &params.embed_w, &params.embed_b) + &pos_seq;
    check_finite(&h, "embedding")?;
    let bias = sequence_bias(params, cfg, prep)?;
    let (bias_view, dbias_dalpha) = match &bias {
        Some((b, g)) => (Some(b.view()), Some(g.clone())),
        None => (None, None),
    };
    let rate = cfg.dropout;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, lp) in params.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(h.view(), &lp.ln1_g, &lp.ln1_b);
        let (mut att, attn) = attend_forward(a.view(), &lp.attn, bias_view)
            .map_err(|e| relabel(e, &format!("layer {l} attention")))?;
        let drop1 = match (dropout.as_deref_mut(), rate > 0.0) {
            (Some(rng), true) => {
                let m = dropout_mask::<T>(att.dim(), rate, rng);
                att *= &m;
                Some(m)
            }
            _ => None,
        };
        h += &att;
        let (m, ln2) = layer_norm(h.view(), &lp.ln2_g, &lp.ln2_b);
        let u1 = affine(m.view(), &lp.w1, &lp.b1);
        let g1 = u1.mapv(gelu);
        let mut f = affine(g1.view(), &lp.w2, &lp.b2);
        let drop2 = match (dropout.as_deref_mut(), rate > 0.0) {
            (Some(rng), true) => {
                let mk = dropout_mask::<T>(f.dim(), rate, rng);
                f *= &mk;
                Some(mk)
            }
            _ => None,
        };
        h += &f;
        check_finite(&h, &format!("layer {l}"))?;
        layers.push(LayerCache {
            ln1,
            attn,
            drop1,
            ln2,
            m,
            u1,
            g1,
            drop2,
        });
    }
    let (hf, lnf) = layer_norm(h.view(), &params.norm_g, &params.norm_b);
    let hu = affine(hf.view(), &params.head_w1, &params.head_b1);
    let hg = hu.mapv(gelu);
    let out_seq = affine(hg.view(), &params.head_w2, &params.head_b2);
    check_finite(&out_seq, "head")?;
    let out = match perm {
        Some(p) => p.unapply_rows(out_seq.view())?,
        None => out_seq,
    };
    Ok((
        out,
        ForwardCache {
            x_seq,
            layers,
            lnf,
            hf,
            hu,
            hg,
            dbias_dalpha,
        },
    ))
}

fn relabel(e: Error, location: &str) -> Error {
    match e {
        Error::Numeric { reason, .. } => Error::Numeric {
            location: location.to_string(),
            reason,
        },
        other => other,
    }
}

fn row_sum<T: NdFloat>(x: &Array2<T>) -> Array2<T> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient at the (canonical-order) output.
pub fn backward<T: NdFloat>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    prep: &Prepared<T>,
    cache: &ForwardCache<T>,
    d_out: ArrayView2<'_, T>,
) -> Result<ParamStore<T>> {
    let perm = reordering(cfg, prep);
    let d_seq = match perm {
        Some(p) => p.apply_rows(d_out)?,
        None => d_out.to_owned(),
    };
    let mut g = params.zeros_like();
    g.head_w2 = cache.hg.t().dot(&d_seq);
    g.head_b2 = row_sum(&d_seq);
    let mut dhu = d_seq.dot(&params.head_w2.t());
    ndarray::Zip::from(&mut dhu).and(&cache.hu).for_each(|d, &u| *d *= gelu_grad(u));
    g.head_w1 = cache.hf.t().dot(&dhu);
    g.head_b1 = row_sum(&dhu);
    let dhf = dhu.dot(&params.head_w1.t());
    let (mut dh, dg, db) = layer_norm_backward(&cache.lnf, &params.norm_g, dhf.view());
    g.norm_g = dg;
    g.norm_b = db;
    let n = prep.tokens.nrows();
    let mut d_bias = Array2::<T>::zeros((n, n));
    for (l, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut g.layers[l];
        let mut df = dh.clone();
        if let Some(m) = &lc.drop2 {
            df *= m;
        }
        gl.w2 = lc.g1.t().dot(&df);
        gl.b2 = row_sum(&df);
        let mut du = df.dot(&lp.w2.t());
        ndarray::Zip::from(&mut du).and(&lc.u1).for_each(|d, &u| *d *= gelu_grad(u));
        gl.w1 = lc.m.t().dot(&du);
        gl.b1 = row_sum(&du);
        let dm = du.dot(&lp.w1.t());
        let (dx2, dg2, db2) = layer_norm_backward(&lc.ln2, &lp.ln2_g, dm.view());
        gl.ln2_g = dg2;
        gl.ln2_b = db2;
        dh += &dx2;
        let mut datt = dh.clone();
        if let Some(m) = &lc.drop1 {
            datt *= m;
        }
        let ag = attend_backward(&lc.attn, &lp.attn, datt.view());
        gl.attn = ag.params;
        d_bias += &ag.bias;
        let (dx1, dg1, db1) = layer_norm_backward(&lc.ln1, &lp.ln1_g, ag.x.view());
        gl.ln1_g = dg1;
        gl.ln1_b = db1;
        dh += &dx1;
    }
    g.embed_w = cache.x_seq.t().dot(&dh);
    g.embed_b = row_sum(&dh);
    let d_pos = match (perm, cfg.pos_mode) {
        (Some(p), PosMode::Patch) => p.unapply_rows(dh.view())?,
        _ => dh,
    };
    let (dgrid, dproj) = params.pos.backward(d_pos.view());
    g.pos.grid = dgrid;
    g.pos.proj = dproj;
    if let Some(dbda) = &cache.dbias_dalpha {
        g.alpha[(0, 0)] = (&d_bias * dbda).sum();
    }
    Ok(g)
}

/// Evaluation-mode prediction in normalized units, one field per horizon.
pub fn predict_normalized(params: &ParamStore<f32>, cfg: &ModelConfig, prep: &Prepared<f32>) -> Result<Vec<Field>> {
    let (out, _) = forward::<f32, ChaCha8Rng>(params, cfg, prep, None)?;
    split_horizons(out.view(), cfg)
}

/// Split canonical `N x (horizons·V_out·p²)` output into per-horizon fields.
pub fn split_horizons(out: ArrayView2<'_, f32>, cfg: &ModelConfig) -> Result<Vec<Field>> {
    let w = cfg.v_out * cfg.spec.patch * cfg.spec.patch;
    let names: Vec<String> = OUTPUT_CHANNELS[..cfg.v_out].iter().map(|s| s.to_string()).collect();
    (0..cfg.horizons)
        .map(|h| {
            unpatchify(
                out.slice(s![.., h * w..(h + 1) * w]),
                cfg.spec,
                names.clone(),
                vec!["ug/m3".to_string(); cfg.v_out],
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_terrain, make_dataset, Archetype, DatasetConfig, PhysicsConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            spec: GridSpec::new(8, 16, 2, 2, 2).unwrap(),
            d: 8,
            layers: 1,
            heads: 2,
            mlp: 16,
            dropout: 0.0,
            horizons: 2,
            ..ModelConfig::default()
        }
    }

    fn dataset(cfg: &ModelConfig, count: usize) -> (Vec<Sample>, NormStats) {
        let tw = gen_terrain(&cfg.spec, Archetype::BasinRidge, 3, 2.0).unwrap();
        let dcfg = DatasetConfig {
            horizons: vec![12, 24],
            count,
            seed: 9,
            ..DatasetConfig::default()
        };
        let samples = make_dataset(&tw, &PhysicsConfig::default(), &dcfg).unwrap();
        let stats = NormStats::fit(samples.iter().map(|s| &s.input)).unwrap();
        (samples, stats)
    }

    #[test]
    fn patchify_layout() {
        let spec = GridSpec::new(2, 2, 2, 1, 1).unwrap();
        let f = Field::scalar(spec, "a", "", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = patchify(&f);
        assert_eq!(t.dim(), (1, 4));
        assert_eq!(t.row(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let spec = GridSpec::new(4, 8, 2, 2, 2).unwrap();
        let data: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let f = Field::new(spec, vec!["a".into(), "b".into()], vec!["".into(), "".into()], data).unwrap();
        let t = patchify(&f);
        assert_eq!(t.nrows(), (4 / 2) * (8 / 2));
        let back = unpatchify(t.view(), spec, f.channels().to_vec(), f.units().to_vec()).unwrap();
        assert_eq!(back, f);
        assert!(unpatchify(t.view(), spec, vec!["a".into()], vec!["".into()]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let cfg = ModelConfig::default();
        let a = init_params::<f32>(&cfg, 4).unwrap();
        assert_eq!(a, init_params::<f32>(&cfg, 4).unwrap());
        assert_ne!(a, init_params::<f32>(&cfg, 5).unwrap());
        assert_eq!(a.alpha(), 2.0);
        let w = &a.layers[0].w1;
        let var = w.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 1.0 / cfg.d as f64;
        assert!((var - expected).abs() / expected < 0.1, "{var} vs {expected}");
        let mut names = std::collections::HashSet::new();
        a.visit(|name, _, _| {
            assert!(names.insert(name.to_string()), "duplicate {name}");
        });
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let cfg = ModelConfig {
            layers: 0,
            wind_reorder: false,
            elev_bias: false,
            ..tiny()
        };
        let (samples, stats) = dataset(&cfg, 1);
        let prep = prepare::<f64>(&samples[0], &stats, &cfg).unwrap();
        let mut p = init_params::<f64>(&cfg, 1).unwrap();
        p.head_w2.fill(0.0);
        p.head_b2.fill(0.0);
        let (out, _) = forward::<f64, ChaCha8Rng>(&p, &cfg, &prep, None).unwrap();
        assert_eq!(out.dim(), (cfg.spec.n_patches(), cfg.token_out()));
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn patch_mode_reordering_changes_nothing() {
        let base = ModelConfig {
            elev_bias: false,
            pos_mode: PosMode::Patch,
            wind_reorder: false,
            ..tiny()
        };
        let with = ModelConfig {
            wind_reorder: true,
            ..base.clone()
        };
        let (samples, stats) = dataset(&base, 2);
        let p = init_params::<f32>(&base, 3).unwrap();
        for s in &samples {
            let a = prepare::<f32>(s, &stats, &base).unwrap();
            let b = prepare::<f32>(s, &stats, &with).unwrap();
            assert!(!b.perm.is_identity());
            let (oa, _) = forward::<f32, ChaCha8Rng>(&p, &base, &a, None).unwrap();
            let (ob, _) = forward::<f32, ChaCha8Rng>(&p, &with, &b, None).unwrap();
            let dev = (&oa - &ob).iter().fold(0f32, |m, v| m.max(v.abs()));
            assert!(dev < 1e-5, "{dev}");
        }
    }

    #[test]
    fn dropout_is_inactive_in_eval_and_seeded_in_training() {
        let cfg = ModelConfig { dropout: 0.2, ..tiny() };
        let (samples, stats) = dataset(&cfg, 1);
        let prep = prepare::<f32>(&samples[0], &stats, &cfg).unwrap();
        let p = init_params::<f32>(&cfg, 3).unwrap();
        let (e1, _) = forward::<f32, ChaCha8Rng>(&p, &cfg, &prep, None).unwrap();
        let (e2, _) = forward::<f32, ChaCha8Rng>(&p, &cfg, &prep, None).unwrap();
        assert_eq!(e1, e2);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let (t1, _) = forward(&p, &cfg, &prep, Some(&mut r1)).unwrap();
        let (t2, _) = forward(&p, &cfg, &prep, Some(&mut r2)).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, e1);
    }

    #[test]
    fn prepare_rejects_mismatched_grids() {
        let cfg = tiny();
        let (samples, stats) = dataset(&cfg, 1);
        let other = ModelConfig {
            spec: GridSpec::new(8, 8, 2, 2, 2).unwrap(),
            ..tiny()
        };
        assert!(matches!(prepare::<f32>(&samples[0], &stats, &other), Err(Error::Shape(_))));
    }
}
