//! Gridded fields and the metadata that travels with them.
//!
//! Every tensor the pipeline touches (inputs, targets, terrain, winds, masks)
//! is a [`Field`]: named channels over a [`GridSpec`], stored row-major and
//! channel-major as 32-bit reals.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Fixed channel order for model inputs: meteorology, pollutants,
/// coordinates, statics, then temporal encodings.
pub const INPUT_CHANNELS: [&str; 10] = [
    "u",
    "v",
    "tracer",
    "lat",
    "lon",
    "elevation",
    "hour_sin",
    "hour_cos",
    "doy_sin",
    "doy_cos",
];

pub const INPUT_UNITS: [&str; 10] = [
    "m/s", "m/s", "ug/m3", "deg", "deg", "m", "1", "1", "1", "1",
];

/// Output (pollutant) channels predicted by the model.
pub const OUTPUT_CHANNELS: [&str; 1] = ["tracer"];

/// Grid geometry: cell counts, patch edge and sector shape in patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub sector_cols: usize,
    pub sector_rows: usize,
}

impl GridSpec {
    pub fn new(
        height: usize,
        width: usize,
        patch: usize,
        sector_cols: usize,
        sector_rows: usize,
    ) -> Result<Self> {
        let spec = GridSpec {
            height,
            width,
            patch,
            sector_cols,
            sector_rows,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let GridSpec {
            height: h,
            width: w,
            patch: p,
            sector_cols: c,
            sector_rows: r,
        } = *self;
        if h == 0 || w == 0 || p == 0 || c == 0 || r == 0 {
            return Err(Error::Config(format!("grid dimensions must be positive: {self:?}")));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "grid {h}x{w} not divisible by patch size {p}"
            )));
        }
        if (h / p) % r != 0 || (w / p) % c != 0 {
            return Err(Error::Config(format!(
                "patch grid {}x{} not divisible into {c}x{r} sectors",
                h / p,
                w / p
            )));
        }
        Ok(())
    }

    /// Same grid with a different sector shape.
    pub fn with_sectors(&self, sector_cols: usize, sector_rows: usize) -> Result<Self> {
        GridSpec::new(self.height, self.width, self.patch, sector_cols, sector_rows)
    }

    /// A plain `rows x cols` grid with unit patches and one cell per sector,
    /// used for matrices and flat tensors stored in the same container.
    pub fn matrix(rows: usize, cols: usize) -> Result<Self> {
        GridSpec::new(rows, cols, 1, 1, 1)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn patch_cols(&self) -> usize {
        self.width / self.patch
    }

    /// Patch count N.
    pub fn n_patches(&self) -> usize {
        self.patch_rows() * self.patch_cols()
    }

    /// Patches per sector M.
    pub fn patches_per_sector(&self) -> usize {
        self.sector_cols * self.sector_rows
    }

    /// Sector count K.
    pub fn n_sectors(&self) -> usize {
        self.n_patches() / self.patches_per_sector()
    }

    pub fn sectors_across(&self) -> usize {
        self.patch_cols() / self.sector_cols
    }

    pub fn sectors_down(&self) -> usize {
        self.patch_rows() / self.sector_rows
    }

    /// Canonical patch index of the patch at `(prow, pcol)`.
    ///
    /// Patches are numbered sector by sector (sectors in raster order), and
    /// in raster order inside each sector, so every sector owns the
    /// contiguous index range `s*M .. (s+1)*M`. With a single sector this is
    /// plain raster order.
    pub fn patch_index(&self, prow: usize, pcol: usize) -> usize {
        let (sr, lr) = (prow / self.sector_rows, prow % self.sector_rows);
        let (sc, lc) = (pcol / self.sector_cols, pcol % self.sector_cols);
        let sector = sr * self.sectors_across() + sc;
        sector * self.patches_per_sector() + lr * self.sector_cols + lc
    }

    /// Inverse of [`GridSpec::patch_index`]: `(prow, pcol)`.
    pub fn patch_position(&self, index: usize) -> (usize, usize) {
        let m = self.patches_per_sector();
        let (sector, local) = (index / m, index % m);
        let (sr, sc) = (sector / self.sectors_across(), sector % self.sectors_across());
        let (lr, lc) = (local / self.sector_cols, local % self.sector_cols);
        (sr * self.sector_rows + lr, sc * self.sector_cols + lc)
    }
}

/// Named channels over a grid, row-major within a channel, channel-major overall.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    spec: GridSpec,
    channels: Vec<String>,
    units: Vec<String>,
    data: Vec<f32>,
}

impl Field {
    pub fn new(
        spec: GridSpec,
        channels: Vec<String>,
        units: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        spec.validate()?;
        if channels.is_empty() {
            return Err(Error::Shape("field needs at least one channel".into()));
        }
        if units.len() != channels.len() {
            return Err(Error::Shape(format!(
                "{} units for {} channels",
                units.len(),
                channels.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &channels {
            if !seen.insert(name.as_str()) {
                return Err(Error::Input(format!("duplicate channel name `{name}`")));
            }
        }
        let expected = channels.len() * spec.cells();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} != channels x H x W = {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            let ch = pos / spec.cells();
            return Err(Error::Input(format!(
                "non-finite value in channel `{}` at cell {}",
                channels[ch],
                pos % spec.cells()
            )));
        }
        Ok(Field {
            spec,
            channels,
            units,
            data,
        })
    }

    /// Single-channel convenience constructor.
    pub fn scalar(spec: GridSpec, name: &str, unit: &str, data: Vec<f32>) -> Result<Self> {
        Field::new(spec, vec![name.to_string()], vec![unit.to_string()], data)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn channel(&self, index: usize) -> &[f32] {
        let n = self.spec.cells();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn channel_by_name(&self, name: &str) -> Result<&[f32]> {
        self.channel_index(name)
            .map(|i| self.channel(i))
            .ok_or_else(|| Error::Input(format!("missing channel `{name}`")))
    }

    /// Copy of a subset of channels, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Field> {
        let mut data = Vec::with_capacity(names.len() * self.spec.cells());
        let mut units = Vec::with_capacity(names.len());
        for name in names {
            let i = self
                .channel_index(name)
                .ok_or_else(|| Error::Input(format!("missing channel `{name}`")))?;
            data.extend_from_slice(self.channel(i));
            units.push(self.units[i].clone());
        }
        Field::new(
            self.spec,
            names.iter().map(|s| s.to_string()).collect(),
            units,
            data,
        )
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same metadata, new values. Used by elementwise transforms.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Result<Field> {
        Field::new(self.spec, self.channels.clone(), self.units.clone(), data)
    }
}

/// Binary region mask restricting loss and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandMask {
    spec: GridSpec,
    mask: Vec<bool>,
}

impl LandMask {
    pub fn new(spec: GridSpec, mask: Vec<bool>) -> Result<Self> {
        spec.validate()?;
        if mask.len() != spec.cells() {
            return Err(Error::Shape(format!(
                "mask length {} != H x W = {}",
                mask.len(),
                spec.cells()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateMask);
        }
        Ok(LandMask { spec, mask })
    }

    pub fn full(spec: GridSpec) -> Result<Self> {
        LandMask::new(spec, vec![true; spec.cells()])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn cells(&self) -> &[bool] {
        &self.mask
    }

    /// ‖M‖₁.
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.mask.len() as f64
    }

    pub fn to_field(&self) -> Field {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Field::scalar(self.spec, "mask", "1", data).expect("mask field is well formed")
    }

    pub fn from_field(field: &Field) -> Result<Self> {
        if field.channels() != ["mask"] {
            return Err(Error::Input(format!(
                "land mask must have the single channel `mask`, got {:?}",
                field.channels()
            )));
        }
        let mut mask = Vec::with_capacity(field.spec().cells());
        for &x in field.data() {
            if x == 1.0 {
                mask.push(true);
            } else if x == 0.0 {
                mask.push(false);
            } else {
                return Err(Error::Input(format!("mask value {x} is not 0 or 1")));
            }
        }
        LandMask::new(*field.spec(), mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    ZScore { mean: f64, std: f64 },
    MinMax { lo: f64, hi: f64 },
    Identity,
}

impl NormKind {
    fn validate(&self, channel: &str) -> Result<()> {
        let bad = |reason: String| Error::InvalidStats {
            channel: channel.to_string(),
            reason,
        };
        match *self {
            NormKind::ZScore { mean, std } => {
                if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
                    return Err(bad(format!("zscore needs finite mean and std > 0, got ({mean}, {std})")));
                }
            }
            NormKind::MinMax { lo, hi } => {
                if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                    return Err(bad(format!("minmax needs hi > lo, got ({lo}, {hi})")));
                }
            }
            NormKind::Identity => {}
        }
        Ok(())
    }

    pub fn forward(&self, x: f64) -> f64 {
        match *self {
            NormKind::ZScore { mean, std } => (x - mean) / std,
            NormKind::MinMax { lo, hi } => (x - lo) / (hi - lo),
            NormKind::Identity => x,
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        match *self {
            NormKind::ZScore { mean, std } => y * std + mean,
            NormKind::MinMax { lo, hi } => y * (hi - lo) + lo,
            NormKind::Identity => y,
        }
    }

    /// Multiplicative factor from normalized to physical units.
    pub fn scale(&self) -> f64 {
        match *self {
            NormKind::ZScore { std, .. } => std,
            NormKind::MinMax { lo, hi } => hi - lo,
            NormKind::Identity => 1.0,
        }
    }
}

/// Which normalization family a channel uses before statistics are known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPolicy {
    ZScore,
    MinMax,
    Identity,
}

/// Default policy for the fixed input channel order.
pub fn default_policy(channel: &str) -> NormPolicy {
    match channel {
        "elevation" | "population" => NormPolicy::MinMax,
        "hour_sin" | "hour_cos" | "doy_sin" | "doy_cos" | "mask" => NormPolicy::Identity,
        _ => NormPolicy::ZScore,
    }
}

/// Per-channel normalization statistics, keyed by channel name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormStats {
    entries: Vec<(String, NormKind)>,
}

impl NormStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, channel: &str, kind: NormKind) -> Result<()> {
        kind.validate(channel)?;
        match self.entries.iter_mut().find(|(c, _)| c == channel) {
            Some(slot) => slot.1 = kind,
            None => self.entries.push((channel.to_string(), kind)),
        }
        Ok(())
    }

    pub fn get(&self, channel: &str) -> Option<&NormKind> {
        self.entries
            .iter()
            .find(|(c, _)| c == channel)
            .map(|(_, k)| k)
    }

    pub fn entries(&self) -> &[(String, NormKind)] {
        &self.entries
    }

    /// Estimate statistics from training fields using [`default_policy`].
    /// Accumulates in f64; std is the population standard deviation.
    pub fn fit<'a>(fields: impl IntoIterator<Item = &'a Field>) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut acc: Vec<(f64, f64, f64, f64, u64)> = Vec::new();
        for field in fields {
            for (ci, name) in field.channels().iter().enumerate() {
                let slot = match names.iter().position(|n| n == name) {
                    Some(i) => i,
                    None => {
                        names.push(name.clone());
                        acc.push((0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY, 0));
                        names.len() - 1
                    }
                };
                let a = &mut acc[slot];
                for &x in field.channel(ci) {
                    let x = x as f64;
                    a.0 += x;
                    a.1 += x * x;
                    a.2 = a.2.min(x);
                    a.3 = a.3.max(x);
                    a.4 += 1;
                }
            }
        }
        if names.is_empty() {
            return Err(Error::Input("cannot fit normalization stats on no data".into()));
        }
        let mut stats = NormStats::new();
        for (name, (sum, sumsq, lo, hi, n)) in names.iter().zip(acc) {
            let kind = match default_policy(name) {
                NormPolicy::ZScore => {
                    let mean = sum / n as f64;
                    let var = (sumsq / n as f64 - mean * mean).max(0.0);
                    NormKind::ZScore {
                        mean,
                        std: var.sqrt(),
                    }
                }
                NormPolicy::MinMax => NormKind::MinMax { lo, hi },
                NormPolicy::Identity => NormKind::Identity,
            };
            stats.insert(name, kind)?;
        }
        Ok(stats)
    }

    /// One line per channel: `name kind a b`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, kind) in &self.entries {
            let _ = match kind {
                NormKind::ZScore { mean, std } => writeln!(out, "{name} zscore {mean:e} {std:e}"),
                NormKind::MinMax { lo, hi } => writeln!(out, "{name} minmax {lo:e} {hi:e}"),
                NormKind::Identity => writeln!(out, "{name} none"),
            };
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut stats = NormStats::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("stats line {}: cannot parse `{line}`", lineno + 1));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let kind = match parts.as_slice() {
                [_, "zscore", a, b] => NormKind::ZScore {
                    mean: num(a)?,
                    std: num(b)?,
                },
                [_, "minmax", a, b] => NormKind::MinMax {
                    lo: num(a)?,
                    hi: num(b)?,
                },
                [_, "none"] => NormKind::Identity,
                _ => return Err(bad()),
            };
            stats.insert(parts[0], kind)?;
        }
        Ok(stats)
    }

    fn kinds_for(&self, field: &Field) -> Result<Vec<NormKind>> {
        field
            .channels()
            .iter()
            .map(|name| {
                let kind = self.get(name).ok_or_else(|| {
                    Error::Config(format!("no normalization stats for channel `{name}`"))
                })?;
                kind.validate(name)?;
                Ok(*kind)
            })
            .collect()
    }
}

fn map_channels(field: &Field, kinds: &[NormKind], f: impl Fn(&NormKind, f64) -> f64) -> Result<Field> {
    let n = field.spec().cells();
    let mut data = Vec::with_capacity(field.data().len());
    for (ci, kind) in kinds.iter().enumerate() {
        data.extend(field.data()[ci * n..(ci + 1) * n].iter().map(|&x| f(kind, x as f64) as f32));
    }
    field.with_data(data)
}

/// z-score, min-max or identity per channel.
pub fn normalize(field: &Field, stats: &NormStats) -> Result<Field> {
    let kinds = stats.kinds_for(field)?;
    map_channels(field, &kinds, NormKind::forward)
}

/// Exact inverse of [`normalize`].
pub fn denormalize(field: &Field, stats: &NormStats) -> Result<Field> {
    let kinds = stats.kinds_for(field)?;
    map_channels(field, &kinds, NormKind::inverse)
}

/// Sinusoidal hour-of-day and day-of-year encoding:
/// `[sin(2πh/24), cos(2πh/24), sin(2πd/365), cos(2πd/365)]`.
pub fn temporal_encoding(hour: u32, doy: u32) -> Result<[f64; 4]> {
    if hour > 23 {
        return Err(Error::Input(format!("hour {hour} outside 0..=23")));
    }
    if !(1..=365).contains(&doy) {
        return Err(Error::Input(format!("day of year {doy} outside 1..=365")));
    }
    let ph = 2.0 * PI * hour as f64 / 24.0;
    let pd = 2.0 * PI * doy as f64 / 365.0;
    Ok([ph.sin(), ph.cos(), pd.sin(), pd.cos()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timestamp {
    pub hour: u32,
    pub doy: u32,
}

/// One forecasting example: input channels plus one target field per lead time.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Field,
    pub targets: Vec<Field>,
    pub lead_times: Vec<u32>,
    pub timestamp: Timestamp,
    pub seed: u64,
}

impl Sample {
    pub fn new(
        input: Field,
        targets: Vec<Field>,
        lead_times: Vec<u32>,
        timestamp: Timestamp,
        seed: u64,
    ) -> Result<Self> {
        if targets.len() != lead_times.len() {
            return Err(Error::Shape(format!(
                "{} targets for {} lead times",
                targets.len(),
                lead_times.len()
            )));
        }
        if lead_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input(format!(
                "lead times must be strictly increasing: {lead_times:?}"
            )));
        }
        if let Some(t) = targets.iter().find(|t| t.spec() != input.spec()) {
            return Err(Error::Shape(format!(
                "target grid {:?} differs from input grid {:?}",
                t.spec(),
                input.spec()
            )));
        }
        temporal_encoding(timestamp.hour, timestamp.doy)?;
        Ok(Sample {
            input,
            targets,
            lead_times,
            timestamp,
            seed,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        self.input.spec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec22() -> GridSpec {
        GridSpec::new(2, 2, 1, 1, 1).unwrap()
    }

    #[test]
    fn grid_spec_counts() {
        let s = GridSpec::new(32, 64, 2, 8, 8).unwrap();
        assert_eq!(s.n_patches(), 16 * 32);
        assert_eq!(s.patches_per_sector(), 64);
        assert_eq!(s.n_sectors(), 8);
        assert!(GridSpec::new(32, 64, 3, 1, 1).is_err());
        assert!(GridSpec::new(32, 64, 2, 5, 8).is_err());
    }

    #[test]
    fn field_rejects_non_finite_and_duplicates() {
        let s = spec22();
        assert!(matches!(
            Field::scalar(s, "a", "1", vec![0.0, f32::NAN, 0.0, 0.0]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            Field::new(
                s,
                vec!["a".into(), "a".into()],
                vec!["1".into(), "1".into()],
                vec![0.0; 8]
            ),
            Err(Error::Input(_))
        ));
        assert!(matches!(Field::scalar(s, "a", "1", vec![0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn normalize_examples() {
        let s = spec22();
        let f = Field::scalar(s, "tracer", "ug/m3", vec![10.0, 12.0, 14.0, 6.0]).unwrap();
        let mut stats = NormStats::new();
        stats.insert("tracer", NormKind::ZScore { mean: 10.0, std: 4.0 }).unwrap();
        let n = normalize(&f, &stats).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0, -1.0]);
        let back = denormalize(&n, &stats).unwrap();
        assert_eq!(back.data()[1], 12.0);

        let e = Field::scalar(s, "elevation", "m", vec![0.0, 5698.0, 2849.0, 0.0]).unwrap();
        let mut ms = NormStats::new();
        ms.insert("elevation", NormKind::MinMax { lo: 0.0, hi: 5698.0 }).unwrap();
        let n = normalize(&e, &ms).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 1.0);
        let one = Field::scalar(s, "elevation", "m", vec![1.0; 4]).unwrap();
        assert_eq!(denormalize(&one, &ms).unwrap().data()[0], 5698.0);
    }

    #[test]
    fn normalize_errors() {
        let f = Field::scalar(spec22(), "tracer", "1", vec![1.0; 4]).unwrap();
        assert!(matches!(normalize(&f, &NormStats::new()), Err(Error::Config(_))));
        let mut stats = NormStats::new();
        assert!(matches!(
            stats.insert("tracer", NormKind::ZScore { mean: 0.0, std: 0.0 }),
            Err(Error::InvalidStats { .. })
        ));
        assert!(matches!(
            stats.insert("tracer", NormKind::MinMax { lo: 1.0, hi: 1.0 }),
            Err(Error::InvalidStats { .. })
        ));
    }

    #[test]
    fn temporal_encoding_examples() {
        let e = temporal_encoding(0, 365).unwrap();
        assert_eq!(e[0], 0.0);
        assert_eq!(e[1], 1.0);
        assert!(e[2].abs() < 1e-12);
        assert!((e[3] - 1.0).abs() < 1e-12);
        let six = temporal_encoding(6, 1).unwrap();
        assert!((six[0] - 1.0).abs() < 1e-15);
        assert!(six[1].abs() < 1e-15);
        let three = temporal_encoding(3, 1).unwrap();
        let half_sqrt2 = 2f64.sqrt() / 2.0;
        assert!((three[0] - half_sqrt2).abs() < 1e-15);
        assert!((three[1] - half_sqrt2).abs() < 1e-15);
        assert!(temporal_encoding(24, 1).is_err());
        assert!(temporal_encoding(0, 0).is_err());
        assert!(temporal_encoding(0, 366).is_err());
    }

    #[test]
    fn stats_text_round_trip() {
        let mut stats = NormStats::new();
        stats.insert("u", NormKind::ZScore { mean: 0.1, std: 3.7 }).unwrap();
        stats.insert("elevation", NormKind::MinMax { lo: 26.0, hi: 5698.0 }).unwrap();
        stats.insert("hour_sin", NormKind::Identity).unwrap();
        assert_eq!(NormStats::from_text(&stats.to_text()).unwrap(), stats);
    }

    #[test]
    fn sample_validation() {
        let s = spec22();
        let f = Field::scalar(s, "tracer", "1", vec![0.0; 4]).unwrap();
        let ts = Timestamp { hour: 0, doy: 1 };
        assert!(Sample::new(f.clone(), vec![f.clone(), f.clone()], vec![12, 12], ts, 0).is_err());
        assert!(Sample::new(f.clone(), vec![f.clone()], vec![12], ts, 0).is_ok());
        let other = Field::scalar(GridSpec::new(4, 4, 1, 1, 1).unwrap(), "tracer", "1", vec![0.0; 16]).unwrap();
        assert!(Sample::new(f, vec![other], vec![12], ts, 0).is_err());
    }

    #[test]
    fn mask_rejects_empty() {
        assert!(matches!(LandMask::new(spec22(), vec![false; 4]), Err(Error::DegenerateMask)));
        let m = LandMask::new(spec22(), vec![true, false, true, true]).unwrap();
        assert_eq!(m.count(), 3);
        assert_eq!(LandMask::from_field(&m.to_field()).unwrap(), m);
    }
}
