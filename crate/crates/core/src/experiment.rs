//! Training on a dataset, component ablations and the tile sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{RunConfig, Tiles, Variant};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{prepare, token_mask, ModelConfig, Prepared};
use crate::synthdata::{gen_mask, gen_terrain_shaped, make_dataset_threaded, TerrainWind};
use crate::train::{fit, FitResult, RunFiles, Start, TrainConfig};

/// Terrain and prevailing winds for a run configuration.
pub fn terrain(cfg: &RunConfig) -> Result<TerrainWind> {
    gen_terrain_shaped(&cfg.model.spec, cfg.archetype, cfg.seed, cfg.physics.max_wind, cfg.wind_shape)
}

/// Generate the configured dataset in memory, split it and fit
/// normalization on the train part.
pub fn generate(cfg: &RunConfig, threads: usize) -> Result<(TerrainWind, Dataset)> {
    let tw = terrain(cfg)?;
    let samples = make_dataset_threaded(&tw, &cfg.physics, &cfg.data, threads)?;
    let mask = gen_mask(&cfg.model.spec, cfg.seed)?;
    let data = Dataset::new(samples, mask, cfg.val_fraction, cfg.test_fraction)?;
    Ok((tw, data))
}

pub fn prepare_split(data: &Dataset, which: Split, mcfg: &ModelConfig) -> Result<Vec<Prepared<f32>>> {
    data.split(which)
        .into_iter()
        .map(|s| prepare::<f32>(s, &data.stats, mcfg))
        .collect()
}

/// Train on the train split, validating on the val split.
pub fn train_on(
    data: &Dataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    start: Start,
    files: Option<&RunFiles>,
) -> Result<FitResult> {
    let train = prepare_split(data, Split::Train, mcfg)?;
    let val = prepare_split(data, Split::Val, mcfg)?;
    let mask = token_mask::<f32>(&data.mask, mcfg)?;
    fit(&train, &val, &mask, mcfg, tcfg, start, files)
}

/// Final and best validation loss of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub best_val: f64,
    pub final_val: f64,
    pub steps: u64,
}

fn run_one(data: &Dataset, cfg: &RunConfig, mcfg: &ModelConfig, seed: u64) -> Result<(f64, f64, u64)> {
    let tcfg = TrainConfig {
        seed,
        stop_at: None,
        ..cfg.train.clone()
    };
    let res = train_on(data, mcfg, &tcfg, Start::fresh(mcfg, &tcfg)?, None)?;
    let last = res
        .log
        .last()
        .ok_or_else(|| Error::Input("training produced no validation".into()))?;
    Ok((res.state.best_val, last.val_loss, res.state.step))
}

/// Train every variant with every seed. `progress` sees each row as it
/// finishes.
pub fn ablation_run(
    data: &Dataset,
    cfg: &RunConfig,
    seeds: &[u64],
    variants: &[Variant],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &variant in variants {
        let (wind_reorder, elev_bias) = variant.toggles();
        let mcfg = ModelConfig {
            wind_reorder,
            elev_bias,
            ..cfg.model.clone()
        };
        for &seed in seeds {
            let (best_val, final_val, steps) = run_one(data, cfg, &mcfg, seed)?;
            let row = AblationRow {
                variant,
                seed,
                best_val,
                final_val,
                steps,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median best validation loss of a variant.
pub fn median_best(rows: &[AblationRow], variant: Variant) -> f64 {
    let xs: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.best_val).collect();
    median(&xs)
}

/// Full-scale values quoted for the three variants, shown for orientation.
pub fn reference_loss(variant: Variant) -> f64 {
    match variant {
        Variant::Baseline => 0.264,
        Variant::Wind => 0.257,
        Variant::Full => 0.249,
    }
}

fn variants_in(rows: &[AblationRow]) -> Vec<Variant> {
    let mut out = Vec::new();
    for r in rows {
        if !out.contains(&r.variant) {
            out.push(r.variant);
        }
    }
    out
}

/// Component table: one row per variant with per-seed best losses, medians
/// and the change against the baseline when it was run.
pub fn component_table(rows: &[AblationRow]) -> String {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let base = rows
        .iter()
        .any(|r| r.variant == Variant::Baseline)
        .then(|| median_best(rows, Variant::Baseline));
    let mut out = format!("{:<10}", "variant");
    for s in &seeds {
        let _ = write!(out, " {:>10}", format!("seed{s}"));
    }
    let _ = writeln!(out, " {:>12} {:>12} {:>9} {:>10}", "median_best", "median_final", "delta", "reference");
    for v in variants_in(rows) {
        let _ = write!(out, "{:<10}", v.as_str());
        for s in &seeds {
            match rows.iter().find(|r| r.variant == v && r.seed == *s) {
                Some(r) => write!(out, " {:>10.6}", r.best_val),
                None => write!(out, " {:>10}", "-"),
            }
            .ok();
        }
        let finals: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.final_val).collect();
        let mb = median_best(rows, v);
        let delta = base.map_or("-".to_string(), |b| format!("{:+.2}%", 100.0 * (mb - b) / b));
        let _ = writeln!(
            out,
            " {:>12.6} {:>12.6} {:>9} {:>10.3}",
            mb,
            median(&finals),
            delta,
            reference_loss(v)
        );
    }
    out.push_str("\nreference: full-scale values for orientation only; desk-scale losses are not comparable.\n");
    out
}

pub fn component_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,best_val,final_val,steps\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:e},{:e},{}", r.variant.as_str(), r.seed, r.best_val, r.final_val, r.steps);
    }
    out
}

/// One sector size of the tile sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRow {
    pub tiles: Tiles,
    pub sectors: usize,
    /// Median best validation loss over seeds.
    pub loss: f64,
}

/// Train the given variant under each sector size.
pub fn tile_sweep(
    data: &Dataset,
    cfg: &RunConfig,
    variant: Variant,
    seeds: &[u64],
    mut progress: impl FnMut(&Tiles, &AblationRow),
) -> Result<Vec<TileRow>> {
    let (wind_reorder, elev_bias) = variant.toggles();
    let mut out = Vec::new();
    for tiles in &cfg.ablate.tiles {
        let spec = tiles.apply(&cfg.model.spec)?;
        let mcfg = ModelConfig {
            spec,
            wind_reorder,
            elev_bias,
            ..cfg.model.clone()
        };
        let mut best = Vec::new();
        for &seed in seeds {
            let (best_val, final_val, steps) = run_one(data, cfg, &mcfg, seed)?;
            progress(
                tiles,
                &AblationRow {
                    variant,
                    seed,
                    best_val,
                    final_val,
                    steps,
                },
            );
            best.push(best_val);
        }
        out.push(TileRow {
            tiles: *tiles,
            sectors: spec.n_sectors(),
            loss: median(&best),
        });
    }
    Ok(out)
}

fn strategy(t: &Tiles) -> &'static str {
    match t {
        Tiles::Global => "global",
        Tiles::Square(_) => "tiled",
    }
}

fn tile_delta(rows: &[TileRow], r: &TileRow) -> String {
    match rows.iter().find(|x| x.tiles == Tiles::Global) {
        Some(g) => format!("{:+.2}%", 100.0 * (r.loss - g.loss) / g.loss),
        None => "-".into(),
    }
}

/// Sweep table with columns strategy, tiles, loss, Δ vs global.
pub fn tile_table(rows: &[TileRow]) -> String {
    let mut out = format!("{:<9} {:>7} {:>8} {:>10} {:>9}\n", "strategy", "tiles", "sectors", "loss", "delta");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<9} {:>7} {:>8} {:>10.6} {:>9}",
            strategy(&r.tiles),
            r.tiles.label(),
            r.sectors,
            r.loss,
            tile_delta(rows, r)
        );
    }
    out
}

pub fn tile_csv(rows: &[TileRow]) -> String {
    let mut out = String::from("strategy,tiles,loss,delta\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:e},{}", strategy(&r.tiles), r.tiles.label(), r.loss, tile_delta(rows, r));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, seed: u64, best: f64) -> AblationRow {
        AblationRow {
            variant,
            seed,
            best_val: best,
            final_val: best + 0.01,
            steps: 10,
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn component_table_has_one_row_per_variant() {
        let rows = vec![row(Variant::Baseline, 0, 0.5), row(Variant::Full, 0, 0.4)];
        let t = component_table(&rows);
        let body: Vec<&str> = t.lines().skip(1).take_while(|l| !l.is_empty()).collect();
        assert_eq!(body.len(), 2);
        assert!(body[1].starts_with("full") && body[1].contains("-20.00%"), "{t}");
        assert!(body[1].contains("0.249"));
    }

    #[test]
    fn tile_table_schema() {
        let rows = vec![
            TileRow {
                tiles: Tiles::Global,
                sectors: 1,
                loss: 0.5,
            },
            TileRow {
                tiles: Tiles::Square(4),
                sectors: 8,
                loss: 0.45,
            },
        ];
        let csv = tile_csv(&rows);
        assert_eq!(
            csv,
            "strategy,tiles,loss,delta\nglobal,global,5e-1,+0.00%\ntiled,4x4,4.5e-1,-10.00%\n"
        );
    }
}
