//! Command-line front end: `generate`, `fit`, `predict` and `eval`.
//!
//! Settings come from built-in defaults, then an optional flat `key = value` config
//! file, then command-line flags. Unknown config keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::datagen::{generate, split};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::exec::Exec;
use crate::gibbs::{run_chains, SamplerConfig};
use crate::io::{self, ChainHeader, ComponentRecord, CHAIN_SCHEMA, CHAIN_VERSION};
use crate::model::{ComponentId, Hyperparams};
use crate::predict::{predict_batch, Mode, DEFAULT_MC_DRAWS};

#[derive(Debug, Parser)]
#[command(name = "immgp", version, about = "Infinite mixtures of multi-output Gaussian processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset and split it into train and test files.
    Generate(GenerateArgs),
    /// Run the sampler on a training file and write the chain.
    Fit(FitArgs),
    /// Average predictions over a chain for the rows of a test file.
    Predict(PredictArgs),
    /// Compute RMSE of predictions and of the reference predictors.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Number of training rows; the rest go to the test file.
    #[arg(long = "train", alias = "n-train")]
    pub n_train: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training CSV (default: <out>/train.csv).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sweeps: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub hmc_step: Option<f64>,
    #[arg(long)]
    pub hmc_leapfrog: Option<usize>,
    #[arg(long)]
    pub mh_tries: Option<usize>,
    #[arg(long)]
    pub alpha_scale: Option<f64>,
    /// Independent chains, one output file each.
    #[arg(long)]
    pub chains: Option<usize>,
    /// `inference` (centered on the training inputs) or `generation`.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    /// Chain file (default: <out>/chain.jsonl).
    #[arg(long)]
    pub chain: Option<PathBuf>,
    /// Training CSV the chain was fitted to (default: <out>/train.csv).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Test CSV (default: <out>/test.csv).
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub mc_draws: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Predictions CSV (default: <out>/predictions.csv).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

/// Every setting any command reads.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub chains: usize,
    pub preset: Preset,
    pub overrides: BTreeMap<String, f64>,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub n_train: Option<usize>,
    pub mode: Mode,
    pub mc_draws: usize,
    pub parallel: bool,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub chain: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Generation,
    Inference,
}

const HYPER_KEYS: [&str; 10] = ["a0", "b0", "nu0", "a1", "b1", "nu1", "mu1", "r1", "a2", "b2"];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            chains: 1,
            preset: Preset::Inference,
            overrides: BTreeMap::new(),
            n: 500,
            d: 2,
            m: 2,
            n_train: None,
            mode: Mode::Immgp1,
            mc_draws: DEFAULT_MC_DRAWS,
            parallel: cfg!(feature = "parallel"),
            out: PathBuf::from("."),
            data: None,
            test: None,
            chain: None,
            predictions: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("`{value}` is not a valid value for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.sampler;
        match key {
            "n_sweeps" | "sweeps" => s.n_sweeps = parse_value(key, value)?,
            "burn_in" => s.burn_in = parse_value(key, value)?,
            "hmc_step" => s.hmc_step = parse_value(key, value)?,
            "hmc_leapfrog" => s.hmc_leapfrog = parse_value(key, value)?,
            "mh_tries_per_param" => s.mh_tries_per_param = parse_value(key, value)?,
            "alpha_proposal_scale" => s.alpha_proposal_scale = parse_value(key, value)?,
            "seed" => s.seed = parse_value(key, value)?,
            "chains" => self.chains = parse_value(key, value)?,
            "preset" => {
                self.preset = match value {
                    "generation" => Preset::Generation,
                    "inference" => Preset::Inference,
                    _ => return Err(Error::InvalidConfig(format!("unknown preset `{value}`"))),
                }
            }
            "n" => self.n = parse_value(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            "m" => self.m = parse_value(key, value)?,
            "n_train" => self.n_train = Some(parse_value(key, value)?),
            "mode" => self.mode = value.parse()?,
            "mc_draws" => self.mc_draws = parse_value(key, value)?,
            "parallel" => self.parallel = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data" => self.data = Some(PathBuf::from(value)),
            "test" => self.test = Some(PathBuf::from(value)),
            "chain" => self.chain = Some(PathBuf::from(value)),
            "predictions" => self.predictions = Some(PathBuf::from(value)),
            k if HYPER_KEYS.contains(&k) => {
                self.overrides.insert(k.to_string(), parse_value(key, value)?);
            }
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("{}:{}: expected key = value", path.display(), k + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.chains == 0 {
            return Err(Error::InvalidConfig("chains must be at least 1".into()));
        }
        if self.mc_draws == 0 {
            return Err(Error::InvalidConfig("mc_draws must be at least 1".into()));
        }
        if self.n == 0 || self.d == 0 || self.m == 0 {
            return Err(Error::InvalidConfig("n, d and m must be positive".into()));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::default()
        } else {
            Exec::Sequential
        }
    }

    fn apply_overrides(&self, hp: &mut Hyperparams) {
        for (k, v) in &self.overrides {
            let slot = match k.as_str() {
                "a0" => &mut hp.a0,
                "b0" => &mut hp.b0,
                "nu0" => &mut hp.nu0,
                "a1" => &mut hp.a1,
                "b1" => &mut hp.b1,
                "nu1" => &mut hp.nu1,
                "mu1" => &mut hp.mu1,
                "r1" => &mut hp.r1,
                "a2" => &mut hp.a2,
                _ => &mut hp.b2,
            };
            *slot = *v;
        }
    }

    fn path_or(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out.join(name))
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.apply_file(p)?;
    }
    if let Some(s) = common.seed {
        cfg.sampler.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn set_opt<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

/// Resolves the settings of a command from defaults, config file and flags.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let mut cfg = match command {
        Command::Generate(a) => {
            let mut cfg = base_config(&a.common)?;
            set_opt(&mut cfg.n, &a.n);
            set_opt(&mut cfg.d, &a.d);
            set_opt(&mut cfg.m, &a.m);
            if a.n_train.is_some() {
                cfg.n_train = a.n_train;
            }
            cfg
        }
        Command::Fit(a) => {
            let mut cfg = base_config(&a.common)?;
            let s = &mut cfg.sampler;
            set_opt(&mut s.n_sweeps, &a.sweeps);
            set_opt(&mut s.burn_in, &a.burn_in);
            set_opt(&mut s.hmc_step, &a.hmc_step);
            set_opt(&mut s.hmc_leapfrog, &a.hmc_leapfrog);
            set_opt(&mut s.mh_tries_per_param, &a.mh_tries);
            set_opt(&mut s.alpha_proposal_scale, &a.alpha_scale);
            set_opt(&mut cfg.chains, &a.chains);
            if let Some(p) = &a.preset {
                cfg.set("preset", p)?;
            }
            if a.data.is_some() {
                cfg.data = a.data.clone();
            }
            cfg
        }
        Command::Predict(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(m) = &a.mode {
                cfg.mode = m.parse()?;
            }
            set_opt(&mut cfg.mc_draws, &a.mc_draws);
            for (slot, v) in [
                (&mut cfg.chain, &a.chain),
                (&mut cfg.data, &a.data),
                (&mut cfg.test, &a.test),
            ] {
                if v.is_some() {
                    *slot = v.clone();
                }
            }
            cfg
        }
        Command::Eval(a) => {
            let mut cfg = base_config(&a.common)?;
            for (slot, v) in [
                (&mut cfg.predictions, &a.predictions),
                (&mut cfg.data, &a.data),
                (&mut cfg.test, &a.test),
            ] {
                if v.is_some() {
                    *slot = v.clone();
                }
            }
            cfg
        }
    };
    if matches!(command, Command::Generate(_)) && cfg.n_train.is_none() {
        cfg.n_train = Some((cfg.n * 4 / 5).min(cfg.n.saturating_sub(1)));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    settings: BTreeMap<&'a str, String>,
    /// SHA-256 of every written file.
    files: BTreeMap<String, String>,
}

fn write_manifest(
    dir: &Path,
    name: &str,
    command: &str,
    seed: u64,
    settings: BTreeMap<&str, String>,
    outputs: &[PathBuf],
) -> Result<()> {
    let mut files = BTreeMap::new();
    for p in outputs {
        let key = p
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        files.insert(key, io::file_digest(p)?);
    }
    io::write_json(
        &dir.join(name),
        &Manifest {
            command,
            seed,
            settings,
            files,
        },
    )
}

#[derive(Serialize)]
struct Truth {
    seed: u64,
    alpha: f64,
    n_components: usize,
    assignments: Vec<ComponentId>,
    components: Vec<ComponentRecord>,
    train_rows: Vec<usize>,
    test_rows: Vec<usize>,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let seed = cfg.sampler.seed;
    let n_train = cfg.n_train.unwrap_or(0);
    let mut hp = Hyperparams::generation_preset(cfg.d, cfg.m);
    cfg.apply_overrides(&mut hp);
    let gs = generate(cfg.n, cfg.d, cfg.m, &hp, seed)?;
    let sp = split(&gs.dataset, n_train, seed.wrapping_add(1))?;
    ensure_dir(&cfg.out)?;
    let paths = [
        cfg.out.join("data.csv"),
        cfg.out.join("train.csv"),
        cfg.out.join("test.csv"),
        cfg.out.join("truth.json"),
    ];
    io::write_dataset(&paths[0], &gs.dataset)?;
    io::write_dataset(&paths[1], &sp.train)?;
    io::write_dataset(&paths[2], &sp.test)?;
    let truth = Truth {
        seed,
        alpha: gs.true_state.alpha,
        n_components: gs.true_state.num_components(),
        assignments: gs.true_assignments.clone(),
        components: gs
            .true_state
            .components
            .iter()
            .map(|(id, c)| ComponentRecord::new(*id, c))
            .collect(),
        train_rows: sp.train_rows,
        test_rows: sp.test_rows,
    };
    io::write_json(&paths[3], &truth)?;
    let settings = BTreeMap::from([
        ("preset", "generation".to_string()),
        ("n", cfg.n.to_string()),
        ("d", cfg.d.to_string()),
        ("m", cfg.m.to_string()),
        ("n_train", n_train.to_string()),
    ]);
    write_manifest(&cfg.out, "manifest.json", "generate", seed, settings, &paths)?;
    Ok(paths.to_vec())
}

fn chain_file_names(k: usize, j: usize) -> (String, String) {
    if k == 1 {
        ("chain.jsonl".into(), "diagnostics.csv".into())
    } else {
        (format!("chain_{j}.jsonl"), format!("diagnostics_{j}.csv"))
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data_path = cfg.path_or(&cfg.data, "train.csv");
    let data = io::read_dataset(&data_path)?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training data has no rows".into()));
    }
    let mut hp = match cfg.preset {
        Preset::Inference => Hyperparams::inference_preset(&data)?,
        Preset::Generation => Hyperparams::generation_preset(data.input_dim(), data.output_dim()),
    };
    cfg.apply_overrides(&mut hp);
    hp.validate()?;
    let train_sha256 = io::file_digest(&data_path)?;
    let chains = run_chains(&data, &hp, &cfg.sampler, cfg.chains, cfg.exec())?;
    ensure_dir(&cfg.out)?;
    let mut outputs = Vec::new();
    for (j, chain) in chains.iter().enumerate() {
        let (cname, dname) = chain_file_names(cfg.chains, j);
        let header = ChainHeader {
            schema: CHAIN_SCHEMA.into(),
            version: CHAIN_VERSION,
            input_dim: data.input_dim(),
            output_dim: data.output_dim(),
            n_train: data.len(),
            train_sha256: train_sha256.clone(),
            seed: cfg.sampler.seed,
            chain: j,
            hyperparams: (&hp).into(),
        };
        let cpath = cfg.out.join(cname);
        let dpath = cfg.out.join(dname);
        io::write_chain(&cpath, &header, &chain.samples)?;
        io::write_diagnostics(&dpath, &chain.diagnostics)?;
        outputs.push(cpath);
        outputs.push(dpath);
    }
    let s = &cfg.sampler;
    let settings = BTreeMap::from([
        ("n_sweeps", s.n_sweeps.to_string()),
        ("burn_in", s.burn_in.to_string()),
        ("hmc_step", s.hmc_step.to_string()),
        ("hmc_leapfrog", s.hmc_leapfrog.to_string()),
        ("mh_tries_per_param", s.mh_tries_per_param.to_string()),
        ("alpha_proposal_scale", s.alpha_proposal_scale.to_string()),
        ("chains", cfg.chains.to_string()),
        ("train_sha256", train_sha256),
    ]);
    write_manifest(&cfg.out, "fit_manifest.json", "fit", s.seed, settings, &outputs)?;
    Ok(outputs)
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let chain_path = cfg.path_or(&cfg.chain, "chain.jsonl");
    let data_path = cfg.path_or(&cfg.data, "train.csv");
    let test_path = cfg.path_or(&cfg.test, "test.csv");
    let (header, samples) = io::read_chain(&chain_path)?;
    let data = io::read_dataset(&data_path)?;
    let test = io::read_dataset(&test_path)?;
    for (what, dim) in [
        ("training", (data.input_dim(), data.output_dim())),
        ("test", (test.input_dim(), test.output_dim())),
    ] {
        if dim != (header.input_dim, header.output_dim) {
            return Err(Error::SchemaMismatch(format!(
                "{what} data has D={}, M={}, chain has D={}, M={}",
                dim.0, dim.1, header.input_dim, header.output_dim
            )));
        }
    }
    if io::file_digest(&data_path)? != header.train_sha256 {
        return Err(Error::SchemaMismatch(
            "training data differs from the file the chain was fitted to".into(),
        ));
    }
    let hp = header.hyperparams.to_hyperparams()?;
    let pred = predict_batch(
        &test.xs,
        &samples,
        &data,
        &hp,
        cfg.mode,
        cfg.mc_draws,
        cfg.sampler.seed,
        cfg.exec(),
    )?;
    ensure_dir(&cfg.out)?;
    let out = cfg.out.join("predictions.csv");
    io::write_predictions(&out, &pred.means, data.output_dim())?;
    let mut outputs = vec![out];
    if cfg.mode == Mode::Immgp2 {
        let p = cfg.out.join("new_density.csv");
        write_new_density(&p, &pred.new_density)?;
        outputs.push(p);
    }
    let settings = BTreeMap::from([
        ("mode", cfg.mode.to_string()),
        ("mc_draws", cfg.mc_draws.to_string()),
        ("samples", samples.len().to_string()),
    ]);
    write_manifest(
        &cfg.out,
        "predict_manifest.json",
        "predict",
        cfg.sampler.seed,
        settings,
        &outputs,
    )?;
    Ok(outputs)
}

fn write_new_density(path: &Path, est: &[Option<crate::predict::McEstimate>]) -> Result<()> {
    let mut text = String::from("row,log_density,rel_std_error\n");
    for (i, e) in est.iter().enumerate() {
        if let Some(e) = e {
            text.push_str(&format!(
                "{i},{},{}\n",
                io::fmt_f64(e.log_mean),
                io::fmt_f64(e.rel_std_error)
            ));
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let pred = io::read_predictions(&cfg.path_or(&cfg.predictions, "predictions.csv"))?;
    let train = io::read_dataset(&cfg.path_or(&cfg.data, "train.csv"))?;
    let test = io::read_dataset(&cfg.path_or(&cfg.test, "test.csv"))?;
    let metrics = evaluate(&pred, &train, &test)?;
    ensure_dir(&cfg.out)?;
    let out = cfg.out.join("metrics.json");
    io::write_json(&out, &metrics)?;
    Ok(vec![out])
}

/// Runs a parsed command, returning the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = resolve(&cli.command)?;
    match &cli.command {
        Command::Generate(_) => cmd_generate(&cfg),
        Command::Fit(_) => cmd_fit(&cfg),
        Command::Predict(_) => cmd_predict(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
    }
}
