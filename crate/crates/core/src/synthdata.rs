//! Synthetic terrain, winds and tracer transport.
//!
//! The tracer obeys `∂c/∂t + u·∇c = κ∇²c + Q − D c`, integrated with a
//! flux-form first-order upwind scheme for advection, central differences
//! for diffusion and explicit Euler in time. Sources add `Q·Δt` per step and
//! the sink is applied as the multiplicative decay `exp(−D·Δt)`.
//!
//! Grid axes follow [`crate::reorder`]: `u` moves mass toward larger column
//! index, `v` toward larger row index.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::{temporal_encoding, Field, GridSpec, LandMask, Sample, Timestamp, INPUT_CHANNELS, INPUT_UNITS};
use crate::reorder::patch_wind_direction;
use crate::seed::{self, derive};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    Periodic,
    /// Zero-gradient ghost cells: outflow leaves, inflow carries the edge value.
    #[default]
    Clamped,
}

impl Boundary {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "periodic" => Ok(Boundary::Periodic),
            "clamped" => Ok(Boundary::Clamped),
            _ => Err(Error::Config(format!("unknown boundary `{s}` (periodic|clamped)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Boundary::Periodic => "periodic",
            Boundary::Clamped => "clamped",
        }
    }
}

/// Point emission: `rate` concentration units per second into one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Source {
    pub cell: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsConfig {
    /// κ, m²/s.
    pub diffusivity: f64,
    /// Δt, s.
    pub dt: f64,
    /// Δx, m.
    pub dx: f64,
    pub boundary: Boundary,
    pub sources: Vec<Source>,
    /// D, 1/s.
    pub sink: f64,
    /// Largest wind component the configuration admits, m/s.
    pub max_wind: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            diffusivity: 500.0,
            dt: 3600.0,
            dx: 15_000.0,
            boundary: Boundary::Clamped,
            sources: Vec::new(),
            sink: 2e-6,
            max_wind: 2.0,
        }
    }
}

impl PhysicsConfig {
    /// Validate and return the config; enforces the advective and diffusive
    /// CFL limits.
    pub fn new(
        diffusivity: f64,
        dt: f64,
        dx: f64,
        boundary: Boundary,
        sources: Vec<Source>,
        sink: f64,
        max_wind: f64,
    ) -> Result<Self> {
        let cfg = PhysicsConfig {
            diffusivity,
            dt,
            dx,
            boundary,
            sources,
            sink,
            max_wind,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dx > 0.0) {
            return Err(Error::Config(format!("dt and dx must be positive ({}, {})", self.dt, self.dx)));
        }
        if !(self.diffusivity >= 0.0 && self.sink >= 0.0 && self.max_wind >= 0.0) {
            return Err(Error::Config("diffusivity, sink and max_wind must be non-negative".into()));
        }
        if self.sources.iter().any(|s| !(s.rate >= 0.0) || !s.rate.is_finite()) {
            return Err(Error::Config("source rates must be finite and non-negative".into()));
        }
        let adv = self.max_wind * self.dt / self.dx;
        if adv > 0.5 {
            return Err(Error::Stability(format!("advective CFL number {adv:.4} exceeds 0.5")));
        }
        let diff = self.diffusivity * self.dt / (self.dx * self.dx);
        if diff > 0.25 {
            return Err(Error::Stability(format!("diffusive number {diff:.4} exceeds 0.25")));
        }
        Ok(())
    }

    fn with_extra_sources(&self, extra: &[Source]) -> PhysicsConfig {
        let mut cfg = self.clone();
        cfg.sources.extend_from_slice(extra);
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    Flat,
    Ridge,
    Basin,
    /// A basin in the western half and a ridge in the eastern half.
    BasinRidge,
}

impl Archetype {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Archetype::Flat),
            "ridge" => Ok(Archetype::Ridge),
            "basin" => Ok(Archetype::Basin),
            "basin_ridge" => Ok(Archetype::BasinRidge),
            _ => Err(Error::Config(format!(
                "unknown terrain archetype `{s}` (flat|ridge|basin|basin_ridge)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Archetype::Flat => "flat",
            Archetype::Ridge => "ridge",
            Archetype::Basin => "basin",
            Archetype::BasinRidge => "basin_ridge",
        }
    }
}

/// Knobs for the wind generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindShape {
    /// Relative amplitude of the divergence-free perturbation.
    pub perturbation: f64,
    /// Along-wind terrain gradient (m per cell, either sign) at which wind
    /// speed drops by `1/e`.
    pub slope_scale: f64,
}

impl Default for WindShape {
    fn default() -> Self {
        WindShape {
            perturbation: 0.2,
            slope_scale: 300.0,
        }
    }
}

/// Elevation (m) and winds (m/s) on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainWind {
    pub spec: GridSpec,
    pub archetype: Archetype,
    pub elevation: Vec<f32>,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub seed: u64,
    pub max_wind: f64,
    pub shape: WindShape,
}

fn gaussian(x: f64) -> f64 {
    (-x * x).exp()
}

struct BasinGeom {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

fn basin_height(g: &BasinGeom, r: f64, c: f64) -> f64 {
    let rho = (((c - g.cx) / g.rx).powi(2) + ((r - g.cy) / g.ry).powi(2)).sqrt();
    600.0 + 2500.0 * gaussian((rho - 1.0) / 0.25) - 400.0 * (1.0 - rho * rho).max(0.0)
}

/// Ridge along the line through `(r0, c0)` with direction angle `phi`.
fn ridge_height(r0: f64, c0: f64, phi: f64, peak: f64, width: f64, r: f64, c: f64) -> f64 {
    let dist = (c - c0) * phi.sin() - (r - r0) * phi.cos();
    peak * gaussian(dist / width)
}

/// Deterministic terrain for an archetype, plus a prevailing wind drawn from
/// the same seed.
pub fn gen_terrain(spec: &GridSpec, archetype: Archetype, seed: u64, max_wind: f64) -> Result<TerrainWind> {
    gen_terrain_shaped(spec, archetype, seed, max_wind, WindShape::default())
}

/// As [`gen_terrain`] with explicit wind-perturbation settings.
pub fn gen_terrain_shaped(
    spec: &GridSpec,
    archetype: Archetype,
    seed: u64,
    max_wind: f64,
    shape: WindShape,
) -> Result<TerrainWind> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, seed::STREAM_TERRAIN, 0));
    let (h, w) = (spec.height as f64, spec.width as f64);
    let elevation: Vec<f32> = match archetype {
        Archetype::Flat => vec![0.0; spec.cells()],
        Archetype::Ridge => {
            let phi = PI / 2.0 + rng.random_range(-0.5..0.5);
            let c0 = w * rng.random_range(0.35..0.65);
            let peak = rng.random_range(2500.0..4000.0);
            let width = (w / 16.0).max(1.5);
            grid_map(spec, |r, c| ridge_height(h / 2.0, c0, phi, peak, width, r, c))
        }
        Archetype::Basin => {
            let g = BasinGeom {
                cx: w * rng.random_range(0.4..0.6),
                cy: h * rng.random_range(0.4..0.6),
                rx: w * rng.random_range(0.25..0.35),
                ry: h * rng.random_range(0.25..0.35),
            };
            grid_map(spec, |r, c| basin_height(&g, r, c))
        }
        Archetype::BasinRidge => {
            let g = BasinGeom {
                cx: w * rng.random_range(0.2..0.3),
                cy: h * rng.random_range(0.4..0.6),
                rx: w * rng.random_range(0.13..0.18),
                ry: h * rng.random_range(0.25..0.35),
            };
            let phi = PI / 2.0 + rng.random_range(-0.4..0.4);
            let c0 = w * rng.random_range(0.65..0.8);
            let peak = rng.random_range(2500.0..4000.0);
            let width = (w / 20.0).max(1.5);
            grid_map(spec, |r, c| {
                basin_height(&g, r, c).max(ridge_height(h / 2.0, c0, phi, peak, width, r, c))
            })
        }
    };
    let angle = rng.random_range(0.0..2.0 * PI);
    let speed = 0.75 * max_wind;
    let mut tw = TerrainWind {
        spec: *spec,
        archetype,
        elevation,
        u: Vec::new(),
        v: Vec::new(),
        seed,
        max_wind,
        shape,
    };
    tw.set_prevailing(angle, speed, seed);
    Ok(tw)
}

fn grid_map(spec: &GridSpec, f: impl Fn(f64, f64) -> f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(spec.cells());
    for r in 0..spec.height {
        for c in 0..spec.width {
            out.push(f(r as f64 + 0.5, c as f64 + 0.5) as f32);
        }
    }
    out
}

impl TerrainWind {
    /// Same terrain, uniform wind everywhere (no perturbation, no damping).
    pub fn with_uniform_wind(&self, u: f32, v: f32) -> TerrainWind {
        let mut tw = self.clone();
        tw.u = vec![u; self.spec.cells()];
        tw.v = vec![v; self.spec.cells()];
        tw
    }

    /// Same terrain, new wind: prevailing flow of `speed` m/s toward `angle`,
    /// a divergence-free perturbation seeded by `seed`, then damped where it
    /// crosses steep terrain (up or down) and capped at `max_wind` per component.
    pub fn with_prevailing(&self, angle: f64, speed: f64, seed: u64) -> TerrainWind {
        let mut tw = self.clone();
        tw.set_prevailing(angle, speed, seed);
        tw
    }

    fn set_prevailing(&mut self, angle: f64, speed: f64, seed: u64) {
        let spec = self.spec;
        let (hh, ww) = (spec.height, spec.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57494e44);
        // Streamfunction ψ = Σ a sin(kx x + ky y + φ); u' = ∂ψ/∂y, v' = -∂ψ/∂x.
        let modes: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let kx = 2.0 * PI * rng.random_range(1..=2) as f64 / ww as f64;
                let ky = 2.0 * PI * rng.random_range(1..=2) as f64 / hh as f64;
                let amp = rng.random_range(-1.0..1.0);
                (kx, ky, rng.random_range(0.0..2.0 * PI), amp)
            })
            .collect();
        let pert_scale = self.shape.perturbation * speed;
        let norm = modes
            .iter()
            .map(|&(kx, ky, _, a)| a.abs() * kx.hypot(ky))
            .sum::<f64>()
            .max(1e-12);
        let (u0, v0) = (speed * angle.cos(), speed * angle.sin());
        let grad = elevation_gradient(&spec, &self.elevation);
        let cap = self.max_wind;
        let mut u = Vec::with_capacity(spec.cells());
        let mut v = Vec::with_capacity(spec.cells());
        for r in 0..hh {
            for c in 0..ww {
                let (x, y) = (c as f64, r as f64);
                let (mut pu, mut pv) = (0.0, 0.0);
                for &(kx, ky, ph, a) in &modes {
                    let cosarg = (kx * x + ky * y + ph).cos();
                    pu += a * ky * cosarg;
                    pv -= a * kx * cosarg;
                }
                let mut wu = u0 + pert_scale * pu / norm;
                let mut wv = v0 + pert_scale * pv / norm;
                let mag = wu.hypot(wv);
                if mag > 0.0 {
                    let (gx, gy) = grad[r * ww + c];
                    let slope = (wu * gx + wv * gy) / mag;
                    let damp = (-slope.abs() / self.shape.slope_scale).exp();
                    wu *= damp;
                    wv *= damp;
                }
                u.push(wu.clamp(-cap, cap) as f32);
                v.push(wv.clamp(-cap, cap) as f32);
            }
        }
        self.u = u;
        self.v = v;
    }

    pub fn max_component(&self) -> f64 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0f64, |m, &x| m.max((x as f64).abs()))
    }
}

/// Central-difference elevation gradient in metres per cell, `(∂h/∂x, ∂h/∂y)`.
fn elevation_gradient(spec: &GridSpec, h: &[f32]) -> Vec<(f64, f64)> {
    let (hh, ww) = (spec.height, spec.width);
    let at = |r: usize, c: usize| h[r * ww + c] as f64;
    let mut out = Vec::with_capacity(spec.cells());
    for r in 0..hh {
        for c in 0..ww {
            let (cl, cr) = (c.saturating_sub(1), (c + 1).min(ww - 1));
            let (ru, rd) = (r.saturating_sub(1), (r + 1).min(hh - 1));
            let gx = if cr > cl { (at(r, cr) - at(r, cl)) / (cr - cl) as f64 } else { 0.0 };
            let gy = if rd > ru { (at(rd, c) - at(ru, c)) / (rd - ru) as f64 } else { 0.0 };
            out.push((gx, gy));
        }
    }
    out
}

/// Per-cell fraction of mass leaving in one step; positivity needs ≤ 1.
fn outflow_fraction(spec: &GridSpec, u: &[f32], v: &[f32], cfg: &PhysicsConfig) -> Vec<f64> {
    let (hh, ww) = (spec.height, spec.width);
    let a = cfg.dt / cfg.dx;
    let k = cfg.diffusivity * cfg.dt / (cfg.dx * cfg.dx);
    let periodic = cfg.boundary == Boundary::Periodic;
    let mut out = vec![0.0f64; spec.cells()];
    for r in 0..hh {
        for c in 0..ww {
            let i = r * ww + c;
            let mut f = 0.0;
            // right and left x faces, down and up y faces
            for (vel, next, prev) in [
                (u, neighbour(c, ww, 1, periodic).map(|n| r * ww + n), neighbour(c, ww, -1, periodic).map(|n| r * ww + n)),
                (v, neighbour(r, hh, 1, periodic).map(|n| n * ww + c), neighbour(r, hh, -1, periodic).map(|n| n * ww + c)),
            ] {
                let here = vel[i] as f64;
                let fwd = next.map_or(here, |j| 0.5 * (here + vel[j] as f64));
                let back = prev.map_or(here, |j| 0.5 * (here + vel[j] as f64));
                f += a * (fwd.max(0.0) + (-back).max(0.0));
                f += k * (next.is_some() as u8 + prev.is_some() as u8) as f64;
            }
            out[i] = f;
        }
    }
    out
}

fn neighbour(i: usize, n: usize, delta: isize, periodic: bool) -> Option<usize> {
    let j = i as isize + delta;
    if j >= 0 && (j as usize) < n {
        Some(j as usize)
    } else if periodic {
        Some(j.rem_euclid(n as isize) as usize)
    } else {
        None
    }
}

/// Checks the advective CFL limit on the actual winds and the per-cell
/// positivity bound of the scheme.
fn check_stability(spec: &GridSpec, u: &[f32], v: &[f32], cfg: &PhysicsConfig) -> Result<()> {
    let umax = u.iter().chain(v).fold(0.0f64, |m, &x| m.max((x as f64).abs()));
    let courant = umax * cfg.dt / cfg.dx;
    if courant > 0.5 {
        return Err(Error::Stability(format!("advective CFL number {courant:.4} exceeds 0.5")));
    }
    let worst = outflow_fraction(spec, u, v, cfg)
        .into_iter()
        .fold(0.0f64, f64::max);
    if worst > 1.0 + 1e-12 {
        return Err(Error::Stability(format!(
            "cell outflow fraction {worst:.4} exceeds 1; positivity not guaranteed"
        )));
    }
    Ok(())
}

/// One explicit transport step on raw `f64` concentrations.
fn advance(spec: &GridSpec, c: &[f64], u: &[f32], v: &[f32], cfg: &PhysicsConfig, out: &mut Vec<f64>) {
    let (hh, ww) = (spec.height, spec.width);
    let a = cfg.dt / cfg.dx;
    let k = cfg.diffusivity * cfg.dt / (cfg.dx * cfg.dx);
    let periodic = cfg.boundary == Boundary::Periodic;
    out.clear();
    out.extend_from_slice(c);
    let face = |i: usize, j: Option<usize>, vel: &[f32], out: &mut Vec<f64>| match j {
        Some(j) => {
            let vf = 0.5 * (vel[i] as f64 + vel[j] as f64);
            let upwind = if vf > 0.0 { c[i] } else { c[j] };
            let flux = a * vf * upwind - k * (c[j] - c[i]);
            out[i] -= flux;
            out[j] += flux;
        }
        None => {
            // open boundary face after cell i, ghost value = c[i]
            out[i] -= a * vel[i] as f64 * c[i];
        }
    };
    for r in 0..hh {
        for col in 0..ww {
            let i = r * ww + col;
            face(i, neighbour(col, ww, 1, periodic).map(|n| r * ww + n), u, out);
            if !periodic && col == 0 {
                out[i] += a * u[i] as f64 * c[i];
            }
        }
    }
    for r in 0..hh {
        for col in 0..ww {
            let i = r * ww + col;
            face(i, neighbour(r, hh, 1, periodic).map(|n| n * ww + col), v, out);
            if !periodic && r == 0 {
                out[i] += a * v[i] as f64 * c[i];
            }
        }
    }
    for s in &cfg.sources {
        out[s.cell] += cfg.dt * s.rate;
    }
    if cfg.sink > 0.0 {
        let decay = (-cfg.sink * cfg.dt).exp();
        out.iter_mut().for_each(|x| *x *= decay);
    }
}

fn check_sources(spec: &GridSpec, cfg: &PhysicsConfig) -> Result<()> {
    if let Some(s) = cfg.sources.iter().find(|s| s.cell >= spec.cells()) {
        return Err(Error::Config(format!("source cell {} outside the grid", s.cell)));
    }
    Ok(())
}

/// Advance a single-channel concentration field by one step.
pub fn step(c: &Field, tw: &TerrainWind, cfg: &PhysicsConfig) -> Result<Field> {
    if c.n_channels() != 1 {
        return Err(Error::Shape(format!("step expects one channel, got {}", c.n_channels())));
    }
    if c.spec() != &tw.spec {
        return Err(Error::Shape("concentration and terrain grids differ".into()));
    }
    cfg.validate()?;
    check_sources(&tw.spec, cfg)?;
    check_stability(&tw.spec, &tw.u, &tw.v, cfg)?;
    let raw: Vec<f64> = c.data().iter().map(|&x| x as f64).collect();
    let mut next = Vec::with_capacity(raw.len());
    advance(&tw.spec, &raw, &tw.u, &tw.v, cfg, &mut next);
    if let Some(x) = next.iter().find(|x| !x.is_finite()) {
        return Err(Error::numeric("transport step", format!("produced {x}")));
    }
    c.with_data(next.into_iter().map(|x| x as f32).collect())
}

/// Run `steps` steps in `f64`, calling `visit(step_index, state)` after each.
pub fn integrate(
    c0: &[f64],
    tw: &TerrainWind,
    cfg: &PhysicsConfig,
    steps: usize,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_sources(&tw.spec, cfg)?;
    check_stability(&tw.spec, &tw.u, &tw.v, cfg)?;
    let mut cur = c0.to_vec();
    let mut next = Vec::with_capacity(cur.len());
    for s in 0..steps {
        advance(&tw.spec, &cur, &tw.u, &tw.v, cfg, &mut next);
        std::mem::swap(&mut cur, &mut next);
        visit(s + 1, &cur);
    }
    if let Some(x) = cur.iter().find(|x| !x.is_finite()) {
        return Err(Error::numeric("transport integration", format!("produced {x}")));
    }
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// Background plus a handful of Gaussian puffs.
    Blobs,
    /// Independent uniform values per cell.
    WhiteNoise,
    /// Empty field; only sources create tracer.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindDraw {
    /// Use the winds stored in the [`TerrainWind`] for every sample.
    Fixed,
    /// Per sample: uniform direction, speed uniform in the range.
    Random { min_speed: f64, max_speed: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// Forecast lead times in hours, strictly increasing.
    pub horizons: Vec<u32>,
    /// Hours represented by one horizon step.
    pub hours_per_step: f64,
    pub count: usize,
    pub seed: u64,
    pub init: InitKind,
    pub wind: WindDraw,
    /// Extra point sources drawn per sample.
    pub random_sources: usize,
    /// Upper bound of the per-sample source rates (units/s).
    pub random_source_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            horizons: vec![12, 24, 48, 96],
            hours_per_step: 12.0,
            count: 100,
            seed: 0,
            init: InitKind::Blobs,
            wind: WindDraw::Random {
                min_speed: 0.5,
                max_speed: 2.0,
            },
            random_sources: 0,
            random_source_rate: 1e-3,
        }
    }
}

impl DatasetConfig {
    /// Integrator steps per horizon step, and horizon step counts.
    pub fn step_plan(&self, cfg: &PhysicsConfig) -> Result<(usize, Vec<usize>)> {
        if self.horizons.is_empty() || self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("horizons must be strictly increasing: {:?}", self.horizons)));
        }
        let per = self.hours_per_step * 3600.0 / cfg.dt;
        let sub = per.round();
        if !(self.hours_per_step > 0.0) || sub < 1.0 || (per - sub).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "hours_per_step {} is not a whole number of {}s integrator steps",
                self.hours_per_step, cfg.dt
            )));
        }
        let mut steps = Vec::with_capacity(self.horizons.len());
        for &h in &self.horizons {
            let n = h as f64 / self.hours_per_step;
            if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
                return Err(Error::Config(format!(
                    "horizon {h} h is not a positive multiple of {} h",
                    self.hours_per_step
                )));
            }
            steps.push(n.round() as usize * sub as usize);
        }
        Ok((sub as usize, steps))
    }
}

/// Latitude and longitude of every cell, north at row 0.
pub fn coordinates(spec: &GridSpec) -> (Vec<f32>, Vec<f32>) {
    let mut lat = Vec::with_capacity(spec.cells());
    let mut lon = Vec::with_capacity(spec.cells());
    for r in 0..spec.height {
        for c in 0..spec.width {
            lat.push((54.0 - 36.0 * (r as f64 + 0.5) / spec.height as f64) as f32);
            lon.push((73.0 + 62.0 * (c as f64 + 0.5) / spec.width as f64) as f32);
        }
    }
    (lat, lon)
}

/// Assemble model inputs in the fixed channel order.
pub fn assemble_input(tracer: &[f32], tw: &TerrainWind, timestamp: Timestamp) -> Result<Field> {
    let spec = tw.spec;
    let n = spec.cells();
    if tracer.len() != n {
        return Err(Error::Shape(format!("tracer of length {} for {n} cells", tracer.len())));
    }
    let (lat, lon) = coordinates(&spec);
    let enc = temporal_encoding(timestamp.hour, timestamp.doy)?;
    let mut data = Vec::with_capacity(INPUT_CHANNELS.len() * n);
    data.extend_from_slice(&tw.u);
    data.extend_from_slice(&tw.v);
    data.extend_from_slice(tracer);
    data.extend_from_slice(&lat);
    data.extend_from_slice(&lon);
    data.extend_from_slice(&tw.elevation);
    for e in enc {
        data.extend(std::iter::repeat_n(e as f32, n));
    }
    Field::new(
        spec,
        INPUT_CHANNELS.iter().map(|s| s.to_string()).collect(),
        INPUT_UNITS.iter().map(|s| s.to_string()).collect(),
        data,
    )
}

fn initial_field(spec: &GridSpec, init: InitKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        InitKind::Zero => vec![0.0; spec.cells()],
        InitKind::WhiteNoise => (0..spec.cells()).map(|_| rng.random_range(0.0..100.0)).collect(),
        InitKind::Blobs => {
            let background = rng.random_range(10.0..30.0);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(3..=6))
                .map(|_| {
                    (
                        rng.random_range(0.0..spec.height as f64),
                        rng.random_range(0.0..spec.width as f64),
                        rng.random_range(2.0..(spec.width as f64 / 8.0).max(2.5)),
                        rng.random_range(30.0..120.0),
                    )
                })
                .collect();
            let mut out = Vec::with_capacity(spec.cells());
            for r in 0..spec.height {
                for c in 0..spec.width {
                    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                    let mut val = background;
                    for &(br, bc, sigma, amp) in &blobs {
                        let d2 = (y - br).powi(2) + (x - bc).powi(2);
                        val += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                    out.push(val);
                }
            }
            out
        }
    }
}

/// Seed of sample `index` under `root`.
pub fn sample_seed(root: u64, index: usize) -> u64 {
    derive(root, seed::STREAM_SAMPLE, index as u64)
}

/// Generate one sample; depends only on `(tw, cfg, dcfg, index)`.
pub fn make_sample(tw: &TerrainWind, cfg: &PhysicsConfig, dcfg: &DatasetConfig, index: usize) -> Result<Sample> {
    let spec = tw.spec;
    let (_, steps) = dcfg.step_plan(cfg)?;
    let s = sample_seed(dcfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let tw_i = match dcfg.wind {
        WindDraw::Fixed => tw.clone(),
        WindDraw::Random { min_speed, max_speed } => {
            let angle = rng.random_range(0.0..2.0 * PI);
            let speed = if max_speed > min_speed {
                rng.random_range(min_speed..max_speed)
            } else {
                min_speed
            };
            tw.with_prevailing(angle, speed, s)
        }
    };
    let timestamp = Timestamp {
        hour: rng.random_range(0..24),
        doy: rng.random_range(1..=365),
    };
    let c0 = initial_field(&spec, dcfg.init, &mut rng);
    let extra: Vec<Source> = (0..dcfg.random_sources)
        .map(|_| Source {
            cell: rng.random_range(0..spec.cells()),
            rate: rng.random_range(0.0..dcfg.random_source_rate),
        })
        .collect();
    let cfg_i = cfg.with_extra_sources(&extra);
    let last = *steps.last().expect("at least one horizon");
    let mut snapshots: Vec<Vec<f32>> = Vec::with_capacity(steps.len());
    integrate(&c0, &tw_i, &cfg_i, last, |k, state| {
        if steps.contains(&k) {
            snapshots.push(state.iter().map(|&x| x as f32).collect());
        }
    })?;
    let tracer0: Vec<f32> = c0.iter().map(|&x| x as f32).collect();
    let input = assemble_input(&tracer0, &tw_i, timestamp)?;
    let targets = snapshots
        .into_iter()
        .map(|d| Field::scalar(spec, "tracer", "ug/m3", d))
        .collect::<Result<Vec<_>>>()?;
    Sample::new(input, targets, dcfg.horizons.clone(), timestamp, s)
}

pub fn make_dataset(tw: &TerrainWind, cfg: &PhysicsConfig, dcfg: &DatasetConfig) -> Result<Vec<Sample>> {
    make_dataset_threaded(tw, cfg, dcfg, 1)
}

/// As [`make_dataset`], spread over `threads` workers. Output is identical
/// for every thread count.
pub fn make_dataset_threaded(
    tw: &TerrainWind,
    cfg: &PhysicsConfig,
    dcfg: &DatasetConfig,
    threads: usize,
) -> Result<Vec<Sample>> {
    dcfg.step_plan(cfg)?;
    let threads = threads.max(1).min(dcfg.count.max(1));
    if threads == 1 {
        return (0..dcfg.count).map(|i| make_sample(tw, cfg, dcfg, i)).collect();
    }
    let results: Vec<Vec<(usize, Result<Sample>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    (t..dcfg.count)
                        .step_by(threads)
                        .map(|i| (i, make_sample(tw, cfg, dcfg, i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut slots: Vec<Option<Sample>> = (0..dcfg.count).map(|_| None).collect();
    for (i, r) in results.into_iter().flatten() {
        slots[i] = Some(r?);
    }
    Ok(slots.into_iter().map(|s| s.expect("every index generated")).collect())
}

/// Irregular region covering 45% of the grid, deterministic per seed.
pub fn gen_mask(spec: &GridSpec, seed: u64) -> Result<LandMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, seed::STREAM_MASK, 0));
    let modes: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                2.0 * PI * rng.random_range(0.5..2.0) / spec.width as f64,
                2.0 * PI * rng.random_range(0.5..2.0) / spec.height as f64,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let (cy, cx) = (spec.height as f64 / 2.0, spec.width as f64 / 2.0);
    let score: Vec<f64> = (0..spec.cells())
        .map(|i| {
            let (r, c) = ((i / spec.width) as f64, (i % spec.width) as f64);
            let radial = ((r - cy) / cy).powi(2) + ((c - cx) / cx).powi(2);
            let wobble: f64 = modes.iter().map(|&(kx, ky, ph, a)| a * (kx * c + ky * r + ph).sin()).sum();
            -radial + 0.25 * wobble
        })
        .collect();
    let mut sorted = score.clone();
    sorted.sort_by(f64::total_cmp);
    let keep = ((0.45 * spec.cells() as f64).round() as usize).max(1);
    let threshold = sorted[spec.cells() - keep];
    LandMask::new(*spec, score.iter().map(|&s| s >= threshold).collect())
}

/// Exponential fit of covariance decay along and across the mean wind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceFit {
    /// Decay length along the wind, cells.
    pub along: f64,
    /// Decay length across the wind, cells.
    pub cross: f64,
    /// Root-mean-square residual of the log-linear fits.
    pub residual: f64,
    /// `‖u‖·τ` with τ the longest lead time, metres.
    pub advective_length: f64,
    /// Covariance at lag zero.
    pub variance: f64,
}

const MAX_LAG: usize = 6;

/// Ensemble covariance of the last-horizon tracer at cell offset `(dr, dc)`.
pub fn lag_covariance(anomalies: &[Vec<f64>], spec: &GridSpec, dr: isize, dc: isize) -> f64 {
    let (hh, ww) = (spec.height as isize, spec.width as isize);
    let mut sum = 0.0;
    let mut n = 0usize;
    for a in anomalies {
        for r in 0..hh {
            let r2 = r + dr;
            if r2 < 0 || r2 >= hh {
                continue;
            }
            for c in 0..ww {
                let c2 = c + dc;
                if c2 < 0 || c2 >= ww {
                    continue;
                }
                sum += a[(r * ww + c) as usize] * a[(r2 * ww + c2) as usize];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-cell anomalies of the last-horizon tracer about the ensemble mean.
pub fn tracer_anomalies(samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let fields: Vec<&[f32]> = samples
        .iter()
        .map(|s| {
            let t = s.targets.last().ok_or_else(|| Error::Input("sample has no targets".into()))?;
            t.channel_by_name("tracer")
        })
        .collect::<Result<_>>()?;
    let n = fields[0].len();
    let mut mean = vec![0.0f64; n];
    for f in &fields {
        for (m, &x) in mean.iter_mut().zip(f.iter()) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= fields.len() as f64);
    Ok(fields
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
        .collect())
}

fn fit_direction(anomalies: &[Vec<f64>], spec: &GridSpec, theta: f64, c0: f64) -> (f64, f64) {
    let floor = c0 * 1e-9;
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(MAX_LAG + 1);
    let mut last = None;
    for k in 0..=MAX_LAG {
        let dc = (k as f64 * theta.cos()).round() as isize;
        let dr = (k as f64 * theta.sin()).round() as isize;
        if last == Some((dr, dc)) {
            continue;
        }
        last = Some((dr, dc));
        let dist = ((dr * dr + dc * dc) as f64).sqrt();
        let cov = lag_covariance(anomalies, spec, dr, dc).abs().max(floor);
        pts.push((dist, cov.ln()));
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let length = if slope < 0.0 { -1.0 / slope } else { f64::INFINITY };
    (length, (sse / n).sqrt())
}

/// Least-squares fit of `ln|Cov(lag)| = ln C − lag/ℓ` along the mean wind
/// direction of `tw` and perpendicular to it.
pub fn fit_covariance_decay(samples: &[Sample], tw: &TerrainWind) -> Result<CovarianceFit> {
    if samples.len() < 32 {
        return Err(Error::Fit(format!("need at least 32 samples, got {}", samples.len())));
    }
    let spec = tw.spec;
    if samples.iter().any(|s| s.spec() != &spec) {
        return Err(Error::Shape("samples and terrain grids differ".into()));
    }
    let anomalies = tracer_anomalies(samples)?;
    let c0 = lag_covariance(&anomalies, &spec, 0, 0);
    if !(c0 > 0.0) {
        return Err(Error::Fit("tracer fields have no variance".into()));
    }
    let theta = patch_wind_direction(&tw.u, &tw.v);
    let (along, ra) = fit_direction(&anomalies, &spec, theta, c0);
    let (cross, rc) = fit_direction(&anomalies, &spec, theta + PI / 2.0, c0);
    let speed = tw
        .u
        .iter()
        .zip(&tw.v)
        .map(|(&u, &v)| (u as f64).hypot(v as f64))
        .sum::<f64>()
        / spec.cells() as f64;
    let tau = samples[0].lead_times.last().copied().unwrap_or(0) as f64 * 3600.0;
    Ok(CovarianceFit {
        along,
        cross,
        residual: (0.5 * (ra * ra + rc * rc)).sqrt(),
        advective_length: speed * tau,
        variance: c0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::new(16, 32, 2, 4, 4).unwrap()
    }

    fn periodic(kappa: f64) -> PhysicsConfig {
        PhysicsConfig {
            diffusivity: kappa,
            boundary: Boundary::Periodic,
            sink: 0.0,
            ..PhysicsConfig::default()
        }
    }

    #[test]
    fn config_enforces_cfl() {
        assert!(PhysicsConfig::new(0.0, 3600.0, 15_000.0, Boundary::Periodic, vec![], 0.0, 2.0).is_ok());
        assert!(matches!(
            PhysicsConfig::new(0.0, 3600.0, 15_000.0, Boundary::Periodic, vec![], 0.0, 3.0),
            Err(Error::Stability(_))
        ));
        assert!(matches!(
            PhysicsConfig::new(20_000.0, 3600.0, 15_000.0, Boundary::Periodic, vec![], 0.0, 1.0),
            Err(Error::Stability(_))
        ));
    }

    #[test]
    fn step_rejects_fast_winds() {
        let tw = gen_terrain(&spec(), Archetype::Flat, 1, 2.0).unwrap().with_uniform_wind(3.0, 0.0);
        let c = Field::scalar(spec(), "tracer", "", vec![1.0; spec().cells()]).unwrap();
        assert!(matches!(step(&c, &tw, &periodic(0.0)), Err(Error::Stability(_))));
    }

    #[test]
    fn no_dynamics_is_identity() {
        let tw = gen_terrain(&spec(), Archetype::Flat, 1, 2.0).unwrap().with_uniform_wind(0.0, 0.0);
        let data: Vec<f32> = (0..spec().cells()).map(|i| (i % 7) as f32).collect();
        let c = Field::scalar(spec(), "tracer", "", data).unwrap();
        let cfg = PhysicsConfig {
            diffusivity: 0.0,
            sink: 0.0,
            ..PhysicsConfig::default()
        };
        assert_eq!(step(&c, &tw, &cfg).unwrap(), c);
    }

    #[test]
    fn periodic_transport_conserves_mass() {
        let tw = gen_terrain(&spec(), Archetype::BasinRidge, 3, 2.0).unwrap();
        let cfg = periodic(800.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c0 = initial_field(&spec(), InitKind::Blobs, &mut rng);
        let m0: f64 = c0.iter().sum();
        let end = integrate(&c0, &tw, &cfg, 100, |_, _| {}).unwrap();
        let m1: f64 = end.iter().sum();
        assert!(((m1 - m0) / m0).abs() < 1e-12);
    }

    #[test]
    fn transport_keeps_concentration_non_negative() {
        let tw = gen_terrain(&spec(), Archetype::Ridge, 5, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c0 = initial_field(&spec(), InitKind::WhiteNoise, &mut rng);
        let cfg = PhysicsConfig {
            sources: vec![Source { cell: 40, rate: 1e-3 }],
            ..PhysicsConfig::default()
        };
        integrate(&c0, &tw, &cfg, 50, |_, s| {
            assert!(s.iter().all(|&x| x >= 0.0));
        })
        .unwrap();
    }

    #[test]
    fn terrain_archetypes() {
        let s = GridSpec::new(32, 64, 2, 8, 8).unwrap();
        let flat = gen_terrain(&s, Archetype::Flat, 0, 2.0).unwrap();
        assert!(flat.elevation.iter().all(|&h| h == 0.0));
        let basin = gen_terrain(&s, Archetype::Basin, 7, 2.0).unwrap();
        let (r, c) = (s.height / 2, s.width / 2);
        let centre = basin.elevation[r * s.width + c];
        let rim = basin.elevation.iter().cloned().fold(f32::MIN, f32::max);
        assert!(centre < rim);
        assert_eq!(gen_terrain(&s, Archetype::BasinRidge, 11, 2.0).unwrap(), gen_terrain(&s, Archetype::BasinRidge, 11, 2.0).unwrap());
        assert!(basin.max_component() <= 2.0);
    }

    #[test]
    fn upslope_wind_is_damped() {
        let s = GridSpec::new(32, 64, 2, 8, 8).unwrap();
        let ridge = gen_terrain(&s, Archetype::Ridge, 2, 2.0).unwrap();
        let east = ridge.with_prevailing(0.0, 1.5, 1);
        let flat = gen_terrain(&s, Archetype::Flat, 2, 2.0).unwrap().with_prevailing(0.0, 1.5, 1);
        let slow: f32 = east.u.iter().sum();
        let fast: f32 = flat.u.iter().sum();
        assert!(slow < fast);
    }

    #[test]
    fn dataset_plan_and_determinism() {
        let tw = gen_terrain(&spec(), Archetype::Basin, 1, 2.0).unwrap();
        let cfg = PhysicsConfig::default();
        let dcfg = DatasetConfig {
            count: 3,
            seed: 42,
            ..DatasetConfig::default()
        };
        assert_eq!(dcfg.step_plan(&cfg).unwrap(), (12, vec![12, 24, 48, 96]));
        let a = make_dataset(&tw, &cfg, &dcfg).unwrap();
        let b = make_dataset_threaded(&tw, &cfg, &dcfg, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].input.channels().len(), INPUT_CHANNELS.len());
        let empty = make_dataset(&tw, &cfg, &DatasetConfig { count: 0, ..dcfg.clone() }).unwrap();
        assert!(empty.is_empty());
        let bad = DatasetConfig {
            horizons: vec![18],
            ..dcfg
        };
        assert!(matches!(bad.step_plan(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_dynamics_target_equals_input() {
        let tw = gen_terrain(&spec(), Archetype::Flat, 1, 2.0).unwrap();
        let cfg = PhysicsConfig {
            diffusivity: 0.0,
            sink: 0.0,
            ..PhysicsConfig::default()
        };
        let dcfg = DatasetConfig {
            horizons: vec![12],
            count: 2,
            wind: WindDraw::Random {
                min_speed: 0.0,
                max_speed: 0.0,
            },
            ..DatasetConfig::default()
        };
        for s in make_dataset(&tw, &cfg, &dcfg).unwrap() {
            assert_eq!(s.targets[0].data(), s.input.channel_by_name("tracer").unwrap());
        }
    }

    #[test]
    fn mask_covers_forty_five_percent() {
        let s = GridSpec::new(32, 64, 2, 8, 8).unwrap();
        let m = gen_mask(&s, 3).unwrap();
        assert!((m.coverage() - 0.45).abs() < 0.01);
        assert_eq!(m, gen_mask(&s, 3).unwrap());
    }

    #[test]
    fn covariance_at_lag_zero_is_variance() {
        let tw = gen_terrain(&spec(), Archetype::Flat, 1, 2.0).unwrap().with_uniform_wind(1.0, 0.0);
        let cfg = PhysicsConfig::default();
        let dcfg = DatasetConfig {
            horizons: vec![12],
            count: 32,
            wind: WindDraw::Fixed,
            init: InitKind::WhiteNoise,
            ..DatasetConfig::default()
        };
        let samples = make_dataset(&tw, &cfg, &dcfg).unwrap();
        let fit = fit_covariance_decay(&samples, &tw).unwrap();
        // direct population variance per cell, averaged over cells
        let n = spec().cells();
        let mut var = 0.0;
        for i in 0..n {
            let xs: Vec<f64> = samples.iter().map(|s| s.targets[0].data()[i] as f64).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            var += xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        }
        var /= n as f64;
        assert!((fit.variance - var).abs() / var < 1e-9);
        assert!(fit_covariance_decay(&samples[..10], &tw).is_err());
    }
}
