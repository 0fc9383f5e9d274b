use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::ChaCha8Rng;

use topoflow::checkpoint;
use topoflow::config::{parse_kv, RunConfig, Variant};
use topoflow::dataset::{read_dataset, read_terrain, write_dataset, Split, CONFIG_ECHO};
use topoflow::evalkit::{attn_diagnostics, report};
use topoflow::experiment::{self, ablation_run, component_csv, component_table, tile_csv, tile_sweep, tile_table};
use topoflow::fields::{Field, GridSpec};
use topoflow::gfd::write_grid;
use topoflow::model::{forward, prepare};
use topoflow::reorder::build_permutation;
use topoflow::topo_bias::{build_bias_with, patch_elevations, ALPHA_INIT};
use topoflow::train::{RunFiles, Start};
use topoflow::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "topoflow", version, about = "Physics-guided attention for gridded transport forecasting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; overrides the file.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Extra overrides, e.g. `--set model.d=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Turn wind-guided reordering on or off.
    #[arg(long, global = true, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    wind_reorder: Option<bool>,
    /// Turn the elevation bias on or off.
    #[arg(long, global = true, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    elev_bias: Option<bool>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into `--out`.
    Gen,
    /// Train on a dataset; writes checkpoints and the loss log into `--out`.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Continue the run stored in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Component ablation and tile sweep.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Skip the tile sweep.
        #[arg(long)]
        no_tiles: bool,
    },
    /// Write debugging artifacts.
    Dump {
        #[arg(value_enum)]
        what: DumpKind,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Uniform wind `U,V` in m/s for `perm`, instead of a sample's winds.
        #[arg(long, value_name = "U,V", allow_hyphen_values = true)]
        wind: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DumpKind {
    Attn,
    Bias,
    Perm,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut kv = match &common.config {
        Some(path) => parse_kv(&fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)?,
        None => Vec::new(),
    };
    if let Some(s) = common.seed {
        kv.push(("seed".into(), s.to_string()));
    }
    if let Some(b) = common.wind_reorder {
        kv.push(("model.wind_reorder".into(), b.to_string()));
    }
    if let Some(b) = common.elev_bias {
        kv.push(("model.elev_bias".into(), b.to_string()));
    }
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut cfg = RunConfig::default();
    cfg.apply(&kv)?;
    Ok(cfg)
}

fn threads() -> Result<usize> {
    match std::env::var("TOPOFLOW_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("TOPOFLOW_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    experiment::write_text(path, text)
}

fn echo(dir: &Path, cfg: &RunConfig) -> Result<String> {
    let text = cfg.to_text();
    write(&dir.join(CONFIG_ECHO), &text)?;
    Ok(text)
}

fn cmd_gen(common: &Common, cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(common)?;
    let (tw, data) = experiment::generate(cfg, threads()?)?;
    write_dataset(&dir, &data, &tw, &cfg.to_text())?;
    eprintln!("wrote {} samples to {}", data.samples.len(), dir.display());
    Ok(())
}

fn cmd_train(common: &Common, cfg: &RunConfig, data_dir: &Path, resume: bool) -> Result<()> {
    let dir = out_dir(common)?;
    let data = read_dataset(data_dir)?;
    let text = echo(&dir, cfg)?;
    let start = if resume {
        checkpoint::load_resume(&dir, &cfg.model)?
    } else {
        Start::fresh(&cfg.model, &cfg.train)?
    };
    let files = RunFiles {
        dir: dir.clone(),
        config_echo: text,
    };
    let res = experiment::train_on(&data, &cfg.model, &cfg.train, start, Some(&files))?;
    eprintln!(
        "step {}: best validation loss {:.6} at step {}{}",
        res.state.step,
        res.state.best_val,
        res.state.best_step,
        if res.state.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn cmd_eval(common: &Common, cfg: &RunConfig, data_dir: &Path, ck: &Path, split: Split) -> Result<()> {
    let dir = out_dir(common)?;
    let data = read_dataset(data_dir)?;
    let (params, meta) = checkpoint::load(ck)?;
    echo(&dir, cfg)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Input(format!("the {} split is empty", split.as_str())));
    }
    let rep = report(&params, &meta.model, &samples, &data.stats, &data.mask)?;
    rep.write(&dir)?;
    print!("{}", rep.to_text());
    Ok(())
}

fn cmd_ablate(common: &Common, cfg: &RunConfig, data_dir: &Path, no_tiles: bool) -> Result<()> {
    let dir = out_dir(common)?;
    let data = read_dataset(data_dir)?;
    echo(&dir, cfg)?;
    let rows = ablation_run(&data, cfg, &cfg.ablate.seeds, &cfg.ablate.variants, |r| {
        eprintln!("{} seed {}: best {:.6}, final {:.6}", r.variant.as_str(), r.seed, r.best_val, r.final_val)
    })?;
    let table = component_table(&rows);
    write(&dir.join("ablation.txt"), &table)?;
    write(&dir.join("ablation.csv"), &component_csv(&rows))?;
    print!("{table}");
    if !no_tiles && !cfg.ablate.tiles.is_empty() {
        let sweep = tile_sweep(&data, cfg, Variant::Wind, &cfg.ablate.seeds, |t, r| {
            eprintln!("tiles {} seed {}: best {:.6}", t.label(), r.seed, r.best_val)
        })?;
        let t = tile_table(&sweep);
        write(&dir.join("tiles.txt"), &t)?;
        write(&dir.join("tiles.csv"), &tile_csv(&sweep))?;
        print!("\n{t}");
    }
    Ok(())
}

fn parse_wind(s: &str) -> Result<(f32, f32)> {
    let bad = || Error::Config(format!("--wind expects U,V, got `{s}`"));
    let (u, v) = s.split_once(',').ok_or_else(bad)?;
    Ok((u.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("dump {what} needs --{flag}")))
}

fn matrix_field(m: &ndarray::Array2<f64>, names: Vec<String>, unit: &str) -> Result<Field> {
    let spec = GridSpec::matrix(m.nrows(), m.ncols())?;
    Field::new(spec, names, vec![unit.to_string()], m.iter().map(|&x| x as f32).collect())
}

fn cmd_dump(common: &Common, cfg: &RunConfig, what: DumpKind, dump: &DumpArgs) -> Result<()> {
    let dir = out_dir(common)?;
    echo(&dir, cfg)?;
    let spec = cfg.model.spec;
    match what {
        DumpKind::Perm => {
            let (u, v) = match &dump.wind {
                Some(w) => {
                    let (u, v) = parse_wind(w)?;
                    (vec![u; spec.cells()], vec![v; spec.cells()])
                }
                None => {
                    let data = read_dataset(need(&dump.data, "data", "perm")?)?;
                    let s = data
                        .samples
                        .get(dump.sample)
                        .ok_or_else(|| Error::Input(format!("no sample {}", dump.sample)))?;
                    (s.input.channel_by_name("u")?.to_vec(), s.input.channel_by_name("v")?.to_vec())
                }
            };
            let perm = build_permutation(&spec, &u, &v, cfg.model.wind_mean)?;
            let m = spec.patches_per_sector();
            let mut text = String::from("# sector angle_rad forward order (canonical patch indices, upwind first)\n");
            for s in 0..spec.n_sectors() {
                let order: Vec<String> = perm.forward()[s * m..(s + 1) * m].iter().map(|i| i.to_string()).collect();
                text.push_str(&format!("{s} {:.6} {}\n", perm.angles()[s], order.join(",")));
            }
            write(&dir.join("perm.txt"), &text)?;
            print!("{text}");
        }
        DumpKind::Bias => {
            let data_dir = need(&dump.data, "data", "bias")?;
            let terrain = read_terrain(data_dir)?;
            let alpha = match &dump.checkpoint {
                Some(ck) => checkpoint::load(ck)?.0.alpha() as f64,
                None => ALPHA_INIT,
            };
            let elev = patch_elevations(terrain.channel_by_name("elevation")?, &spec)?;
            let b = build_bias_with(&elev, alpha, cfg.model.bias_combine)?;
            write_grid(&matrix_field(b.matrix(), vec!["bias".into()], "logit")?, dir.join("bias.gfd"))?;
            let m = b.matrix();
            let zeros = m.iter().filter(|&&x| x == 0.0).count();
            let text = format!(
                "alpha = {alpha}\npatches = {}\nmin = {}\nmax = {}\nzero_fraction = {:.6}\n",
                m.nrows(),
                m.iter().cloned().fold(f64::INFINITY, f64::min),
                m.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                zeros as f64 / m.len() as f64
            );
            write(&dir.join("bias.txt"), &text)?;
            print!("{text}");
        }
        DumpKind::Attn => {
            let data = read_dataset(need(&dump.data, "data", "attn")?)?;
            let (params, meta) = checkpoint::load(need(&dump.checkpoint, "checkpoint", "attn")?)?;
            let s = data
                .samples
                .get(dump.sample)
                .ok_or_else(|| Error::Input(format!("no sample {}", dump.sample)))?;
            let prep = prepare::<f32>(s, &data.stats, &meta.model)?;
            let (_, cache) = forward::<f32, ChaCha8Rng>(&params, &meta.model, &prep, None)?;
            let weights: Vec<ndarray::Array2<f64>> =
                cache.attention().iter().map(|w| w.mapv(|x| x as f64)).collect();
            let n = prep.tokens.nrows();
            let names: Vec<String> = (0..weights.len()).map(|l| format!("layer{l}")).collect();
            let mut flat = Vec::with_capacity(weights.len() * n * n);
            for w in &weights {
                flat.extend(w.iter().map(|&x| x as f32));
            }
            let units = vec!["1".to_string(); weights.len()];
            write_grid(&Field::new(GridSpec::matrix(n, n)?, names, units, flat)?, dir.join("attn.gfd"))?;
            let diag = attn_diagnostics(&weights, cfg.hist_bins)?;
            diag.write(&dir)?;
            print!("{}", diag.to_text());
        }
    }
    Ok(())
}

struct DumpArgs {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    sample: usize,
    wind: Option<String>,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let c = &cli.common;
    match cli.command {
        Command::Gen => cmd_gen(c, &cfg),
        Command::Train { data, resume } => cmd_train(c, &cfg, &data, resume),
        Command::Eval { data, checkpoint, split } => cmd_eval(c, &cfg, &data, &checkpoint, split.into()),
        Command::Ablate { data, no_tiles } => cmd_ablate(c, &cfg, &data, no_tiles),
        Command::Dump {
            what,
            data,
            checkpoint,
            sample,
            wind,
        } => cmd_dump(
            c,
            &cfg,
            what,
            &DumpArgs {
                data,
                checkpoint,
                sample,
                wind,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
