//! Parameter checkpoints in the `.gfd` container.
//!
//! A checkpoint is a `1 x W` grid with one channel per parameter tensor,
//! where `W` is the largest tensor size; shorter tensors are zero-padded and
//! the unit tag of each channel records the true shape as `ROWSxCOLS`. A
//! text sidecar next to it (same stem, `.txt`) lists the groups, the model
//! configuration, the seed and the step.
//!
//! Resumable runs also keep `last.gfd`, the two moment stores and
//! `state.txt`, which holds floating-point counters as raw bit patterns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::config::{model_from_kv, model_to_kv, parse_kv};
use crate::error::{Error, Result};
use crate::fields::{Field, GridSpec};
use crate::gfd::{read_grid, write_grid};
use crate::model::{init_params, Group, ModelConfig, ParamStore};
use crate::train::{read_log, Start, TrainState};

pub fn params_to_field(params: &ParamStore<f32>) -> Result<Field> {
    let mut width = 1;
    params.visit(|_, _, t| width = width.max(t.len()));
    let mut names = Vec::new();
    let mut units = Vec::new();
    let mut data = Vec::new();
    params.visit(|name, _, t| {
        names.push(name.to_string());
        units.push(format!("{}x{}", t.nrows(), t.ncols()));
        let start = data.len();
        data.extend(t.iter().copied());
        data.resize(start + width, 0.0);
    });
    Field::new(GridSpec::matrix(1, width)?, names, units, data)
}

/// Fill a store shaped like `template` from a checkpoint grid.
pub fn params_from_field(field: &Field, template: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let expected = template.names();
    if field.channels().len() != expected.len() {
        return Err(Error::Input(format!(
            "checkpoint has {} tensors, model expects {}",
            field.channels().len(),
            expected.len()
        )));
    }
    let mut out = template.clone();
    let mut err = None;
    let mut i = 0;
    out.visit_mut(|name, _, t| {
        if err.is_some() {
            return;
        }
        let shape = format!("{}x{}", t.nrows(), t.ncols());
        if field.channels()[i] != name || field.units()[i] != shape {
            err = Some(Error::Input(format!(
                "checkpoint tensor {i} is {} [{}], model expects {name} [{shape}]",
                field.channels()[i],
                field.units()[i]
            )));
            return;
        }
        let values = &field.channel(i)[..t.len()];
        match Array2::from_shape_vec(t.raw_dim(), values.to_vec()) {
            Ok(a) => *t = a,
            Err(e) => err = Some(Error::Shape(e.to_string())),
        }
        i += 1;
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

fn sidecar_text(params: &ParamStore<f32>, mcfg: &ModelConfig, seed: u64, step: u64, echo: &str) -> String {
    let mut text = String::from("# topoflow checkpoint\n");
    let _ = writeln!(text, "seed = {seed}");
    let _ = writeln!(text, "step = {step}");
    for g in Group::ALL {
        let names: Vec<String> = params.names().into_iter().filter(|(_, gg)| *gg == g).map(|(n, _)| n).collect();
        let _ = writeln!(text, "group.{} = {}", g.as_str(), names.join(","));
    }
    for (k, v) in model_to_kv(mcfg) {
        let _ = writeln!(text, "{k} = {v}");
    }
    if !echo.is_empty() {
        text.push_str("# resolved run configuration\n");
        for line in echo.lines() {
            let _ = writeln!(text, "# {line}");
        }
    }
    text
}

/// Write `path` and its sidecar.
pub fn save(params: &ParamStore<f32>, path: &Path, mcfg: &ModelConfig, seed: u64, step: u64, echo: &str) -> Result<()> {
    write_grid(&params_to_field(params)?, path)?;
    let side = sidecar_path(path);
    fs::write(&side, sidecar_text(params, mcfg, seed, step, echo)).map_err(|e| Error::io(&side, e))
}

/// Checkpoint metadata read back from a sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Meta {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let kv = parse_kv(&text)?;
    let get = |key: &str| -> Result<u64> {
        kv.iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::Input(format!("{} lacks `{key}`", side.display())))?
            .1
            .parse()
            .map_err(|_| Error::Input(format!("{}: bad `{key}`", side.display())))
    };
    let model_kv: Vec<(String, String)> = kv.iter().filter(|(k, _)| k.starts_with("model.") || k.starts_with("grid.")).cloned().collect();
    Ok(Meta {
        model: model_from_kv(&model_kv)?,
        seed: get("seed")?,
        step: get("step")?,
    })
}

/// Load parameters and metadata.
pub fn load(path: &Path) -> Result<(ParamStore<f32>, Meta)> {
    let meta = read_meta(path)?;
    let template = init_params::<f32>(&meta.model, 0)?;
    let params = params_from_field(&read_grid(path)?, &template)?;
    Ok((params, meta))
}

fn state_text(state: &TrainState) -> String {
    format!(
        "step = {}\nbest_val = {:016x}\nbest_step = {}\nbad_validations = {}\nstopped_early = {}\nrunning_loss = {:016x}\nrunning_count = {}\n",
        state.step,
        state.best_val.to_bits(),
        state.best_step,
        state.bad_validations,
        state.stopped_early,
        state.running_loss.to_bits(),
        state.running_count
    )
}

/// Everything needed to continue a run from `dir`.
pub fn save_resume(
    dir: &Path,
    params: &ParamStore<f32>,
    best: &ParamStore<f32>,
    state: &TrainState,
    mcfg: &ModelConfig,
    seed: u64,
    echo: &str,
) -> Result<()> {
    save(params, &dir.join("last.gfd"), mcfg, seed, state.step, echo)?;
    save(best, &dir.join("best.gfd"), mcfg, seed, state.best_step, echo)?;
    write_grid(&params_to_field(&state.m)?, dir.join("moments_m.gfd"))?;
    write_grid(&params_to_field(&state.v)?, dir.join("moments_v.gfd"))?;
    let path = dir.join("state.txt");
    fs::write(&path, state_text(state)).map_err(|e| Error::io(&path, e))
}

/// Rebuild the starting point of an interrupted run.
pub fn load_resume(dir: &Path, mcfg: &ModelConfig) -> Result<Start> {
    let (params, meta) = load(&dir.join("last.gfd"))?;
    if &meta.model != mcfg {
        return Err(Error::Config("resumed checkpoint was trained with a different model config".into()));
    }
    let (best, _) = load(&dir.join("best.gfd"))?;
    let m = params_from_field(&read_grid(dir.join("moments_m.gfd"))?, &params)?;
    let v = params_from_field(&read_grid(dir.join("moments_v.gfd"))?, &params)?;
    let path = dir.join("state.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_kv(&text)?;
    let field = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Input(format!("{} lacks `{key}`", path.display())))
    };
    let bad = |key: &str| Error::Input(format!("{}: malformed `{key}`", path.display()));
    let int = |key: &str| -> Result<u64> { field(key)?.parse().map_err(|_| bad(key)) };
    let bits = |key: &str| -> Result<f64> {
        u64::from_str_radix(field(key)?, 16)
            .map(f64::from_bits)
            .map_err(|_| bad(key))
    };
    let state = TrainState {
        step: int("step")?,
        m,
        v,
        best_val: bits("best_val")?,
        best_step: int("best_step")?,
        bad_validations: int("bad_validations")?,
        stopped_early: field("stopped_early")?.parse().map_err(|_| bad("stopped_early"))?,
        running_loss: bits("running_loss")?,
        running_count: int("running_count")?,
    };
    let log_path = dir.join("loss_log.txt");
    let log = if log_path.exists() { read_log(&log_path)? } else { Vec::new() };
    Ok(Start {
        params,
        best,
        state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_through_a_grid() {
        let cfg = ModelConfig {
            spec: GridSpec::new(4, 8, 2, 2, 1).unwrap(),
            d: 8,
            layers: 1,
            heads: 2,
            mlp: 16,
            horizons: 2,
            ..ModelConfig::default()
        };
        let p = init_params::<f32>(&cfg, 3).unwrap();
        let f = params_to_field(&p).unwrap();
        assert_eq!(f.spec().height, 1);
        assert_eq!(f.units()[0], format!("{}x8", cfg.token_in()));
        assert_eq!(params_from_field(&f, &p).unwrap(), p);
        let other = init_params::<f32>(&ModelConfig { d: 4, ..cfg }, 3).unwrap();
        assert!(params_from_field(&f, &other).is_err());
    }

    #[test]
    fn sidecar_restores_model_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            spec: GridSpec::new(4, 8, 2, 2, 1).unwrap(),
            d: 8,
            layers: 1,
            heads: 2,
            mlp: 16,
            horizons: 2,
            elev_bias: false,
            ..ModelConfig::default()
        };
        let p = init_params::<f32>(&cfg, 3).unwrap();
        let path = dir.path().join("ck.gfd");
        save(&p, &path, &cfg, 3, 17, "seed = 3").unwrap();
        let (q, meta) = load(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(meta.model, cfg);
        assert_eq!((meta.seed, meta.step), (3, 17));
    }
}
