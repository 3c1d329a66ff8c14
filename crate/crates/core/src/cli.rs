//! Command-line front end. Every command that writes artifacts also writes a
//! run manifest with the parameters, seed and SHA-256 of inputs and outputs.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use ndarray::{Array2, Array3, ArrayD, Axis, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adjoint::{fd_gradient_oracle, misfit_and_gradient};
use crate::calibration::{calibrate_source, condition_trace, GateParams, Trace};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, PulseKind, SourcePulse};
use crate::fwi::{admm_fwi, FwiConfig, DEFAULT_BOUNDS};
use crate::grid::{ChannelData, Grid2D, SosMap};
use crate::metrics::{classify_edema, detection_scores, dice, image_metrics, lmse, DetectionScores};
use crate::nn::NetworkSpec;
use crate::phantoms::arm::SKIN;
use crate::phantoms::dataset::{
    generate_samples, read_dataset, read_sample, sample_dirs, write_dataset, DatasetOptions, PhantomKind, CD_FILE,
};
use crate::phantoms::idx::read_idx_images;
use crate::phantoms::noise::add_noise;
use crate::raster::{read_f64_2d, read_f64_3d, Raster};
use crate::render::write_heatmap;
use crate::setup::{Setup, SIM_DT};
use crate::unfold::{initial_estimate, load_unfolded, train_unfolded, unfold_infer, Pair, TrainOptions, UnfoldPlan, DEFAULT_LRS};

pub const SETUP_FILE: &str = "setup.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
const HEATMAP_SCALE: usize = 4;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INVALID: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

const EXIT_CODES: &str = "Exit codes: 0 success, 2 usage error, 3 missing input or I/O failure, \
4 invalid argument or violated invariant, 5 numerical failure (blow-up, divergence, NaN loss).";

#[derive(Parser, Debug)]
#[command(name = "fwi-lab", version, about = "Ring-array ultrasound SoS inversion toolkit", after_help = EXIT_CODES)]
pub struct Cli {
    /// TOML file of defaults: top-level `seed`/`jobs`, a `[setup]` table and
    /// one table per subcommand keyed by flag name, or a run manifest of the
    /// same subcommand. Explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Master seed.
    #[arg(long, global = true, env = "FWI_LAB_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset with simulated channel data.
    GenData(GenDataArgs),
    /// Simulate channel data for an SoS map.
    Forward(ForwardArgs),
    /// Adjoint-state misfit gradient.
    Grad(GradArgs),
    /// Compare the adjoint gradient with central differences.
    GradCheck(GradCheckArgs),
    /// ADMM-TV full-waveform inversion.
    Fwi(FwiArgs),
    /// Block-wise training of the unfolded update networks.
    DufwiTrain(TrainArgs),
    /// Unfolded inference with trained networks.
    DufwiInfer(InferArgs),
    /// Estimate the hardware source pulse from simulated and measured receives.
    Calibrate(CalibrateArgs),
    /// Score reconstructions against a ground-truth dataset.
    Evaluate(EvaluateArgs),
    /// Add white Gaussian noise at a given SNR.
    Noise(NoiseArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct ModelArgs {
    /// Setup TOML (grid, damping layer, ring, pulse).
    #[arg(long)]
    geom: Option<PathBuf>,
    /// Grid override `nx,nz,dx,dt,nt`.
    #[arg(long)]
    grid: Option<String>,
    /// Source pulse override: gaussian or dgauss.
    #[arg(long)]
    pulse: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    /// Phantom family: mnist, arm or rods.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// IDX image file for the digit family; synthetic glyphs otherwise.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Rod diameter, m.
    #[arg(long, default_value_t = crate::phantoms::rods::ROD_DIAMETER)]
    rod_diameter: f64,
}

#[derive(Args, Debug, Serialize)]
struct ForwardArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    sos: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write every N-th wavefield of each transmission.
    #[arg(long, default_value_t = 0)]
    snapshot_every: usize,
}

#[derive(Args, Debug, Serialize)]
struct GradArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    sos: PathBuf,
    /// Channel data raster or dataset sample directory.
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip the damping-layer and element mask.
    #[arg(long)]
    unmasked: bool,
}

#[derive(Args, Debug, Serialize)]
struct GradCheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    sos: PathBuf,
    #[arg(long)]
    obs: PathBuf,
    /// Number of random interior cells.
    #[arg(long, default_value_t = 20)]
    cells: usize,
    /// Central-difference step, m/s.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
}

#[derive(Args, Debug, Serialize)]
struct FwiArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    obs: PathBuf,
    /// `water` or an SoS raster.
    #[arg(long, default_value = "water")]
    init: String,
    #[arg(long, default_value_t = 200)]
    outer: usize,
    #[arg(long, default_value_t = 5)]
    inner: usize,
    /// Inner L-BFGS step scale.
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// `lo,hi` in m/s.
    #[arg(long)]
    bounds: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Misfit CSV; defaults to `misfit.csv` beside the output.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    heatmap: bool,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "K", default_value_t = 5)]
    #[serde(rename = "K")]
    k: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// One learning rate per block, comma separated.
    #[arg(long)]
    lrs: Option<String>,
    /// Layer widths `a,b,c,d,e`.
    #[arg(long, default_value = "64,128,256,128,64")]
    widths: String,
    #[arg(long)]
    bounds: Option<String>,
    /// Add noise to the training observations at this SNR.
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    /// Channel data raster or dataset sample directory.
    #[arg(long, conflicts_with = "data")]
    obs: Option<PathBuf>,
    /// Dataset directory; reconstructs every sample.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// `water` or an SoS raster.
    #[arg(long, default_value = "water")]
    init: String,
    /// Single-sample outputs are `<prefix>_<k>.fwir`.
    #[arg(long, default_value = "c_iter")]
    out_prefix: PathBuf,
    /// Output directory in dataset mode.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add noise to the observations at this SNR first.
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    bounds: Option<String>,
    #[arg(long)]
    heatmap: bool,
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    /// Simulated source pulse, 1-D raster.
    #[arg(long)]
    sim_pulse: PathBuf,
    /// Simulated receive: 1-D, (channel, t) or (transmission, receiver, t).
    #[arg(long)]
    sim_rx: PathBuf,
    /// Measured receive, laid out like the simulated one.
    #[arg(long)]
    hw_rx: PathBuf,
    /// `lo,hi` passband, Hz.
    #[arg(long, default_value = "1e5,7e5")]
    band: String,
    /// Simulation sampling rate, Hz.
    #[arg(long, default_value_t = 1.0 / SIM_DT)]
    sim_fs: f64,
    /// Hardware sampling rate; when given the measured traces are gated,
    /// smoothed, resampled and bandpassed first.
    #[arg(long)]
    hw_fs: Option<f64>,
    #[arg(long, default_value_t = 400)]
    zero_prefix: usize,
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    shift: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    /// Directory of `<sample>.fwir` files or `<sample>/` directories.
    #[arg(long)]
    recon: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Iteration to score when sample directories hold `c_iter_<k>.fwir`; last by default.
    #[arg(long)]
    iter: Option<usize>,
    #[arg(long)]
    heatmap: bool,
}

#[derive(Args, Debug, Serialize)]
struct NoiseArgs {
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    snr_db: f64,
    #[arg(long)]
    out: PathBuf,
    /// Sampling interval stored with the traces, s.
    #[arg(long, default_value_t = SIM_DT)]
    dt: f64,
}

struct Ctx {
    seed: u64,
    config_setup: Option<Setup>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Numeric(_) | Error::BlowUp { .. } | Error::Divergence { .. } | Error::NanLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_INVALID,
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let mut config_setup = None;
    if let Some(path) = config_arg(&argv) {
        let names = subcommand_names();
        let command = argv.iter().skip(1).filter_map(|a| a.to_str()).find(|a| names.iter().any(|n| n == a)).map(str::to_string);
        match apply_config(&argv, &path, command.as_deref().unwrap_or_default()) {
            Ok((args, setup)) => {
                argv = args;
                config_setup = setup;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return exit_code(&e);
            }
        }
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => return clap_exit(e),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_INVALID;
        }
    };
    let ctx = Ctx { seed: cli.seed, config_setup };
    match pool.install(|| execute(&cli.command, &ctx)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn config_arg(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1).filter_map(|a| a.to_str());
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn clap_exit(e: clap::Error) -> i32 {
    let _ = e.print();
    if e.use_stderr() {
        EXIT_USAGE
    } else {
        EXIT_OK
    }
}

fn config_token(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(_) => None,
        toml::Value::Array(a) => Some(a.iter().filter_map(config_token).collect::<Vec<_>>().join(",")),
        _ => None,
    }
}

/// Inserts config defaults after the subcommand for every flag the user did
/// not pass explicitly.
fn apply_config(argv: &[OsString], path: &Path, command: &str) -> Result<(Vec<OsString>, Option<Setup>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let given: BTreeSet<String> = argv
        .iter()
        .filter_map(|a| a.to_str())
        .filter(|a| a.starts_with("--"))
        .map(|a| a.trim_start_matches("--").split('=').next().unwrap_or_default().to_string())
        .collect();
    let mut extra: Vec<OsString> = Vec::new();
    let mut push = |key: &str, value: &toml::Value| {
        let flag = key.replace('_', "-");
        if given.contains(&flag) {
            return;
        }
        match value {
            toml::Value::Boolean(true) => extra.push(format!("--{flag}").into()),
            toml::Value::Boolean(false) => {}
            v => {
                if let Some(tok) = config_token(v) {
                    extra.push(format!("--{flag}").into());
                    extra.push(tok.into());
                }
            }
        }
    };
    for key in ["seed", "jobs"] {
        if let Some(v) = table.get(key) {
            push(key, v);
        }
    }
    let from_manifest = table.get("command").and_then(|c| c.as_str()) == Some(command);
    let section = if from_manifest { table.get("params") } else { table.get(command) };
    if let Some(toml::Value::Table(t)) = section {
        for (k, v) in t {
            push(k, v);
        }
    }
    let setup = match table.get("setup") {
        Some(v) => {
            let mut base = toml::Value::try_from(Setup::desk()).map_err(|e| Error::Format(e.to_string()))?;
            merge(&mut base, v);
            Some(base.try_into::<Setup>().map_err(|e| Error::Format(format!("{} [setup]: {e}", path.display())))?)
        }
        None => None,
    };
    let pos = argv.iter().skip(1).position(|a| a.to_str() == Some(command)).map(|p| p + 2).unwrap_or(argv.len());
    let mut out = argv[..pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos..]);
    Ok((out, setup))
}

/// Overlays `patch` onto `base`, table by table.
fn merge(base: &mut toml::Value, patch: &toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn execute(cmd: &Command, ctx: &Ctx) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, ctx),
        Command::Forward(a) => forward(a, ctx),
        Command::Grad(a) => grad(a, ctx),
        Command::GradCheck(a) => grad_check(a, ctx),
        Command::Fwi(a) => fwi(a, ctx),
        Command::DufwiTrain(a) => dufwi_train(a, ctx),
        Command::DufwiInfer(a) => dufwi_infer(a, ctx),
        Command::Calibrate(a) => calibrate(a, ctx),
        Command::Evaluate(a) => evaluate(a, ctx),
        Command::Noise(a) => noise(a, ctx),
    }
}

impl ModelArgs {
    /// Explicit `--geom`, then `fallback_dir/setup.toml`, then the config
    /// `[setup]` table, then the desk setup; `--grid`/`--pulse` override.
    fn setup(&self, ctx: &Ctx, fallback_dir: Option<&Path>) -> Result<Setup> {
        let mut s = if let Some(p) = &self.geom {
            Setup::load(p)?
        } else if let Some(p) = fallback_dir.map(|d| d.join(SETUP_FILE)).filter(|p| p.is_file()) {
            Setup::load(p)?
        } else if let Some(s) = ctx.config_setup {
            s
        } else {
            Setup::desk()
        };
        if let Some(g) = &self.grid {
            s.grid = Grid2D::parse(g)?;
        }
        if let Some(p) = &self.pulse {
            s.pulse.kind = p.parse::<PulseKind>()?;
        }
        Ok(s)
    }
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    let v = parse_list(s, what)?;
    if v.len() != 2 {
        return Err(Error::InvalidArgument(format!("{what} needs two values, got '{s}'")));
    }
    Ok((v[0], v[1]))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| Error::InvalidArgument(format!("bad {what} '{s}'"))))
        .collect()
}

fn bounds(s: &Option<String>) -> Result<(f64, f64)> {
    s.as_deref().map(|b| parse_pair(b, "bounds")).transpose().map(|b| b.unwrap_or(DEFAULT_BOUNDS))
}

fn read_sos(path: &Path, model: &ForwardModel) -> Result<SosMap> {
    SosMap::new(model.grid, read_f64_2d(path)?)
}

/// Observation raster and the setup directory implied by a sample directory.
fn resolve_obs(path: &Path) -> (PathBuf, Option<PathBuf>) {
    if path.is_dir() {
        (path.join(CD_FILE), path.parent().map(Path::to_path_buf))
    } else {
        (path.to_path_buf(), None)
    }
}

fn read_obs(path: &Path, model: &ForwardModel) -> Result<ChannelData> {
    let cd = ChannelData::new(read_f64_3d(path)?, model.grid.dt)?;
    let want = (model.geometry.transmissions(), model.geometry.n_r, model.grid.nt);
    if cd.shape() != want {
        return Err(Error::Shape(format!("channel data {:?} does not match the setup {want:?}", cd.shape())));
    }
    Ok(cd)
}

fn initial_map(init: &str, model: &ForwardModel) -> Result<SosMap> {
    if init == "water" {
        initial_estimate(model)
    } else {
        read_sos(Path::new(init), model)
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a, P: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    params: &'a P,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn display(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Writes `manifest` recording `inputs` as given and `outputs` relative to the
/// manifest's own directory.
fn write_manifest<P: Serialize>(manifest: &Path, command: &str, ctx: &Ctx, params: &P, inputs: &[&Path], outputs: &[PathBuf]) -> Result<()> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut outs: Vec<FileHash> = outputs
        .iter()
        .filter(|p| p.as_path() != manifest)
        .map(|p| Ok(FileHash { path: display(p.strip_prefix(base).unwrap_or(p)), sha256: hash_file(p)? }))
        .collect::<Result<_>>()?;
    outs.sort_by(|a, b| a.path.cmp(&b.path));
    let ins = inputs.iter().map(|p| Ok(FileHash { path: display(p), sha256: hash_file(p)? })).collect::<Result<_>>()?;
    let m = RunManifest { command, version: env!("CARGO_PKG_VERSION"), seed: ctx.seed, params, inputs: ins, outputs: outs };
    let text = toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
    write_text(manifest, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn dir_manifest<P: Serialize>(dir: &Path, command: &str, ctx: &Ctx, params: &P, inputs: &[&Path]) -> Result<()> {
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    write_manifest(&dir.join(MANIFEST_FILE), command, ctx, params, inputs, &files)
}

fn gen_data(a: &GenDataArgs, ctx: &Ctx) -> Result<()> {
    let setup = a.model.setup(ctx, None)?;
    let model = setup.model()?;
    let kind: PhantomKind = a.kind.parse()?;
    let mut opts = DatasetOptions::new(kind, a.n, ctx.seed);
    opts.rod_diameter = a.rod_diameter;
    if let Some(p) = &a.images {
        opts.images = Some(read_idx_images(p)?);
    }
    let samples = generate_samples(&opts, &model)?;
    create_dir(&a.out)?;
    write_dataset(&a.out, &samples)?;
    setup.save(a.out.join(SETUP_FILE))?;
    let inputs: Vec<&Path> = a.images.iter().map(PathBuf::as_path).chain(a.model.geom.iter().map(PathBuf::as_path)).collect();
    dir_manifest(&a.out, "gen-data", ctx, a, &inputs)?;
    println!("wrote {} {} samples to {}", samples.len(), a.kind, a.out.display());
    Ok(())
}

fn forward(a: &ForwardArgs, ctx: &Ctx) -> Result<()> {
    let model = a.model.setup(ctx, None)?.model()?;
    let c = read_sos(&a.sos, &model)?;
    let cd = model.simulate_all(&c)?;
    ensure_parent(&a.out)?;
    Raster::F64(cd.traces.into_dyn()).write(&a.out)?;
    let mut outputs = vec![a.out.clone()];
    if a.snapshot_every > 0 {
        let dir = sidecar(&a.out, ".snapshots");
        create_dir(&dir)?;
        for p in 0..model.geometry.transmissions() {
            let (_, snaps) = model.run_transmission(&c, p, a.snapshot_every)?;
            for (i, s) in snaps.into_iter().enumerate() {
                let path = dir.join(format!("p{p:03}_t{:05}.fwir", i * a.snapshot_every));
                Raster::F64(s.into_dyn()).write(&path)?;
                outputs.push(path);
            }
        }
    }
    write_manifest(&sidecar(&a.out, ".manifest.toml"), "forward", ctx, a, &[&a.sos], &outputs)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn grad(a: &GradArgs, ctx: &Ctx) -> Result<()> {
    let (obs_path, dir) = resolve_obs(&a.obs);
    let model = a.model.setup(ctx, dir.as_deref())?.model()?;
    let c = read_sos(&a.sos, &model)?;
    let obs = read_obs(&obs_path, &model)?;
    let (misfit, g) = misfit_and_gradient(&model, &c, &obs, !a.unmasked)?;
    ensure_parent(&a.out)?;
    Raster::F64(g.values.into_dyn()).write(&a.out)?;
    write_manifest(&sidecar(&a.out, ".manifest.toml"), "grad", ctx, a, &[&a.sos, &obs_path], &[a.out.clone()])?;
    println!("misfit {misfit:e}");
    Ok(())
}

fn grad_check(a: &GradCheckArgs, ctx: &Ctx) -> Result<()> {
    let (obs_path, dir) = resolve_obs(&a.obs);
    let setup = a.model.setup(ctx, dir.as_deref())?;
    let model = setup.model()?;
    let c = read_sos(&a.sos, &model)?;
    let obs = read_obs(&obs_path, &model)?;
    let (_, g) = misfit_and_gradient(&model, &c, &obs, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let margin = setup.pml.thickness;
    let (nx, nz) = model.grid.shape();
    if nx <= 2 * margin || nz <= 2 * margin {
        return Err(Error::InvalidArgument("grid has no interior cells".into()));
    }
    let cells: Vec<(usize, usize)> =
        (0..a.cells).map(|_| (rng.random_range(margin..nx - margin), rng.random_range(margin..nz - margin))).collect();
    let fd = fd_gradient_oracle(&model, &c, &obs, &cells, a.eps)?;
    let mut worst = 0.0f64;
    for (&(ix, iz), d) in cells.iter().zip(&fd) {
        let adj = g.values[[ix, iz]];
        let rel = (adj - d).abs() / d.abs().max(f64::MIN_POSITIVE);
        println!("cell {ix},{iz} adjoint {adj:e} fd {d:e} rel {rel:e}");
        worst = worst.max(rel);
    }
    println!("max relative error: {worst:e}");
    Ok(())
}

fn write_map(path: &Path, c: &SosMap, heatmap: bool, outputs: &mut Vec<PathBuf>) -> Result<()> {
    ensure_parent(path)?;
    Raster::F64(c.values.clone().into_dyn()).write(path)?;
    outputs.push(path.to_path_buf());
    if heatmap {
        outputs.push(write_heatmap(&path.with_extension(""), &c.values, HEATMAP_SCALE, &[])?);
    }
    Ok(())
}

fn fwi(a: &FwiArgs, ctx: &Ctx) -> Result<()> {
    let (obs_path, dir) = resolve_obs(&a.obs);
    let model = a.model.setup(ctx, dir.as_deref())?.model()?;
    let obs = read_obs(&obs_path, &model)?;
    let c0 = initial_map(&a.init, &model)?;
    let cfg =
        FwiConfig { outer_iters: a.outer, inner_lbfgs_iters: a.inner, inner_lr: a.lr, lambda: a.lambda, rho: a.rho, bounds: bounds(&a.bounds)? };
    let res = admm_fwi(&model, &obs, &c0, &cfg)?;
    let mut outputs = Vec::new();
    write_map(&a.out, &res.sos, a.heatmap, &mut outputs)?;
    let log = a.log.clone().unwrap_or_else(|| a.out.with_file_name("misfit.csv"));
    let mut csv = String::from("iteration,misfit\n");
    for (i, m) in res.misfit_log.iter().enumerate() {
        csv.push_str(&format!("{i},{m:e}\n"));
    }
    write_text(&log, &csv)?;
    outputs.push(log);
    let mut inputs: Vec<&Path> = vec![&obs_path];
    if a.init != "water" {
        inputs.push(Path::new(&a.init));
    }
    write_manifest(&sidecar(&a.out, ".manifest.toml"), "fwi", ctx, a, &inputs, &outputs)?;
    println!(
        "misfit {:e} -> {:e} (rho {:e}, lambda {:e})",
        res.misfit_log[0],
        res.misfit_log.last().copied().unwrap_or(f64::NAN),
        res.rho,
        res.lambda
    );
    Ok(())
}

fn parse_widths(s: &str) -> Result<NetworkSpec> {
    let w: Vec<usize> = parse_list(s, "widths")?;
    if w.len() != 5 {
        return Err(Error::InvalidArgument(format!("widths needs five values, got '{s}'")));
    }
    let spec = NetworkSpec { stage1: [w[0], w[1], w[2]], stage2: [w[3], w[4]] };
    spec.validate()?;
    Ok(spec)
}

/// Noise seed of sample `index`, independent of the generator streams.
fn noise_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    rng.set_stream(index as u64);
    rng.random()
}

fn dufwi_train(a: &TrainArgs, ctx: &Ctx) -> Result<()> {
    let setup = a.model.setup(ctx, Some(&a.data))?;
    let model = setup.model()?;
    let lrs: Vec<f64> = match &a.lrs {
        Some(s) => parse_list(s, "learning rates")?,
        None if a.k <= DEFAULT_LRS.len() => DEFAULT_LRS[..a.k].to_vec(),
        None => return Err(Error::InvalidArgument(format!("--lrs is required for K = {}", a.k))),
    };
    let plan = UnfoldPlan { k: a.k, lrs, epochs: a.epochs, batch_size: a.batch };
    let mut opts = TrainOptions::new(plan, parse_widths(&a.widths)?, ctx.seed);
    opts.bounds = bounds(&a.bounds)?;
    let mut samples = read_dataset(&a.data, &model)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no samples", a.data.display())));
    }
    if let Some(snr) = a.snr_db {
        for s in &mut samples {
            s.cd = add_noise(&s.cd, snr, noise_seed(ctx.seed, s.meta.index));
        }
    }
    let pairs: Vec<Pair> = samples.iter().map(|s| (&s.cd, &s.sos)).collect();
    create_dir(&a.out)?;
    let (_, manifest) = train_unfolded(&model, &pairs, &opts, Some(&a.out))?;
    setup.save(a.out.join(SETUP_FILE))?;
    let inputs: Vec<PathBuf> = sample_dirs(&a.data)?.iter().map(|d| d.join(CD_FILE)).collect();
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    dir_manifest(&a.out, "dufwi-train", ctx, a, &inputs)?;
    for (k, l) in manifest.losses.iter().enumerate() {
        println!("block {k}: loss {:e} -> {:e}", l.first().copied().unwrap_or(f64::NAN), l.last().copied().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn dufwi_infer(a: &InferArgs, ctx: &Ctx) -> Result<()> {
    let (nets, _) = load_unfolded(&a.ckpt)?;
    let model = a.model.setup(ctx, Some(&a.ckpt))?.model()?;
    let b = bounds(&a.bounds)?;
    let c0 = initial_map(&a.init, &model)?;
    match (&a.obs, &a.data) {
        (Some(obs_path), None) => {
            let (obs_path, _) = resolve_obs(obs_path);
            let mut obs = read_obs(&obs_path, &model)?;
            if let Some(snr) = a.snr_db {
                obs = add_noise(&obs, snr, noise_seed(ctx.seed, 0));
            }
            let out = unfold_infer(&model, &obs, &c0, &nets, b)?;
            let mut outputs = Vec::new();
            for (k, c) in out.iter().enumerate() {
                write_map(&sidecar(&a.out_prefix, &format!("_{}.fwir", k + 1)), c, a.heatmap, &mut outputs)?;
            }
            write_manifest(&sidecar(&a.out_prefix, ".manifest.toml"), "dufwi-infer", ctx, a, &[&obs_path], &outputs)?;
            println!("wrote {} iterates with prefix {}", out.len(), a.out_prefix.display());
        }
        (None, Some(data)) => {
            let out_dir = a.out.clone().ok_or_else(|| Error::InvalidArgument("--out is required with --data".into()))?;
            let samples = read_dataset(data, &model)?;
            create_dir(&out_dir)?;
            let recons: Vec<Vec<SosMap>> = {
                use rayon::prelude::*;
                samples
                    .par_iter()
                    .map(|s| {
                        let obs = match a.snr_db {
                            Some(snr) => add_noise(&s.cd, snr, noise_seed(ctx.seed, s.meta.index)),
                            None => s.cd.clone(),
                        };
                        unfold_infer(&model, &obs, &c0, &nets, b)
                    })
                    .collect::<Result<_>>()?
            };
            let mut outputs = Vec::new();
            for (s, iters) in samples.iter().zip(&recons) {
                let dir = out_dir.join(format!("sample_{:06}", s.meta.index));
                create_dir(&dir)?;
                for (k, c) in iters.iter().enumerate() {
                    write_map(&dir.join(format!("c_iter_{}.fwir", k + 1)), c, a.heatmap, &mut outputs)?;
                }
            }
            let inputs: Vec<PathBuf> = sample_dirs(data)?.iter().map(|d| d.join(CD_FILE)).collect();
            let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            write_manifest(&out_dir.join(MANIFEST_FILE), "dufwi-infer", ctx, a, &inputs, &outputs)?;
            println!("reconstructed {} samples into {}", samples.len(), out_dir.display());
        }
        _ => return Err(Error::InvalidArgument("exactly one of --obs or --data is required".into())),
    }
    Ok(())
}

fn traces(path: &Path, fs: f64) -> Result<Vec<Trace>> {
    let a: ArrayD<f64> = Raster::read(path)?.into_f64()?;
    let rows: Array2<f64> = match a.ndim() {
        1 => a.into_dimensionality::<Ix1>().map_err(|e| Error::Format(e.to_string()))?.insert_axis(Axis(0)),
        2 => a.into_dimensionality::<Ix2>().map_err(|e| Error::Format(e.to_string()))?,
        3 => {
            let (p, r, t) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            a.into_shape_with_order((p * r, t)).map_err(|e| Error::Format(e.to_string()))?
        }
        r => return Err(Error::Shape(format!("{}: expected a raster of rank 1 to 3, got rank {r}", path.display()))),
    };
    rows.outer_iter().map(|r| Trace::new(r.to_vec(), fs)).collect()
}

fn calibrate(a: &CalibrateArgs, ctx: &Ctx) -> Result<()> {
    let band = parse_pair(&a.band, "band")?;
    let pulse_rows = traces(&a.sim_pulse, a.sim_fs)?;
    if pulse_rows.len() != 1 {
        return Err(Error::Shape("the simulated pulse must be a single trace".into()));
    }
    let pulse = SourcePulse::from_samples(pulse_rows[0].samples.clone(), 1.0 / a.sim_fs)?;
    let sim = traces(&a.sim_rx, a.sim_fs)?;
    let hw = traces(&a.hw_rx, a.hw_fs.unwrap_or(a.sim_fs))?;
    if sim.len() != hw.len() {
        return Err(Error::Shape(format!("{} simulated vs {} measured channels", sim.len(), hw.len())));
    }
    let gate = GateParams { zero_prefix: a.zero_prefix, window: a.window, shift: a.shift };
    let n = pulse.samples.len();
    let mut out = Array2::zeros((sim.len(), n));
    for (i, (rs, rh)) in sim.iter().zip(&hw).enumerate() {
        let rh = match a.hw_fs {
            Some(_) => condition_trace(rh, gate, a.sim_fs, n, band)?,
            None => rh.clone(),
        };
        let cal = calibrate_source(&pulse, rs, &rh, band)?;
        println!("channel {i}: {} ill-conditioned bins", cal.ill_conditioned_bins);
        out.row_mut(i).assign(&ndarray::Array1::from(cal.pulse.samples));
    }
    let raster = if out.nrows() == 1 { Raster::F64(out.row(0).to_owned().into_dyn()) } else { Raster::F64(out.into_dyn()) };
    ensure_parent(&a.out)?;
    raster.write(&a.out)?;
    write_manifest(&sidecar(&a.out, ".manifest.toml"), "calibrate", ctx, a, &[&a.sim_pulse, &a.sim_rx, &a.hw_rx], &[a.out.clone()])?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn recon_path(root: &Path, name: &str, iter: Option<usize>) -> Result<PathBuf> {
    let flat = root.join(format!("{name}.fwir"));
    if flat.is_file() {
        return Ok(flat);
    }
    let dir = root.join(name);
    if let Some(k) = iter {
        return Ok(dir.join(format!("c_iter_{k}.fwir")));
    }
    let mut best: Option<(usize, PathBuf)> = None;
    if dir.is_dir() {
        for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            let k = p
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("c_iter_"))
                .and_then(|n| n.strip_suffix(".fwir"))
                .and_then(|n| n.parse::<usize>().ok());
            if let Some(k) = k {
                if best.as_ref().is_none_or(|(b, _)| k > *b) {
                    best = Some((k, p));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or_else(|| dir.join("sos.fwir")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    samples: usize,
    mean_ssim: f64,
    mean_psnr_db: Option<f64>,
    mean_nmse_db: f64,
    mean_lmse: Option<f64>,
    mean_dice_true_positive: Option<f64>,
    detection: Option<DetectionScores>,
}

fn evaluate(a: &EvaluateArgs, ctx: &Ctx) -> Result<()> {
    let setup = ModelArgs { geom: None, grid: None, pulse: None }.setup(ctx, Some(&a.gt))?;
    let model = setup.model()?;
    let dirs = sample_dirs(&a.gt)?;
    let mut csv = String::from("sample,ssim,psnr_db,nmse_db,lmse,dice,decision,truth\n");
    let (mut ssim, mut psnr, mut nmse, mut lm, mut dices) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut decisions, mut truths) = (vec![], vec![]);
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let heat_dir = a.report.with_file_name("heatmaps");
    if a.heatmap {
        create_dir(&heat_dir)?;
    }
    for d in &dirs {
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let gt = read_sample(d, &model)?;
        let path = recon_path(&a.recon, &name, a.iter)?;
        let recon = read_sos(&path, &model)?;
        inputs.push(path);
        let m = image_metrics(&recon, &gt.sos)?;
        let edema = gt.edema_mask();
        let truth = edema.iter().any(|&e| e);
        let l = if truth { Some(lmse(recon.values.view(), gt.sos.values.view(), edema.view())?) } else { None };
        let tissue = gt.labels.iter().any(|&v| v == SKIN);
        let det = if tissue { Some(classify_edema(&recon, &gt.bone_mask(), &gt.skin_mask())?) } else { None };
        let dc = match &det {
            Some(det) if det.positive && truth => Some(dice(det.mask.view(), edema.view())?),
            _ => None,
        };
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            m.ssim,
            m.psnr_db,
            m.nmse_db,
            fmt_opt(l),
            fmt_opt(dc),
            det.as_ref().map(|d| (d.positive as u8).to_string()).unwrap_or_default(),
            if tissue { (truth as u8).to_string() } else { String::new() }
        ));
        ssim.push(m.ssim);
        if m.psnr_db.is_finite() {
            psnr.push(m.psnr_db);
        }
        nmse.push(m.nmse_db);
        lm.extend(l);
        dices.extend(dc);
        if let Some(det) = &det {
            decisions.push(det.positive);
            truths.push(truth);
        }
        if a.heatmap {
            let contours = det.map(|d| d.contours).unwrap_or_default();
            outputs.push(write_heatmap(&heat_dir.join(format!("{name}_recon")), &recon.values, HEATMAP_SCALE, &contours)?);
            outputs.push(write_heatmap(&heat_dir.join(format!("{name}_gt")), &gt.sos.values, HEATMAP_SCALE, &[])?);
        }
    }
    let summary = EvalSummary {
        samples: dirs.len(),
        mean_ssim: mean(&ssim).unwrap_or(f64::NAN),
        mean_psnr_db: mean(&psnr),
        mean_nmse_db: mean(&nmse).unwrap_or(f64::NAN),
        mean_lmse: mean(&lm),
        mean_dice_true_positive: mean(&dices),
        detection: if decisions.is_empty() { None } else { Some(detection_scores(&decisions, &truths)?) },
    };
    csv.push_str(&format!(
        "mean,{},{},{},{},{},,\n",
        summary.mean_ssim,
        fmt_opt(summary.mean_psnr_db),
        summary.mean_nmse_db,
        fmt_opt(summary.mean_lmse),
        fmt_opt(summary.mean_dice_true_positive)
    ));
    write_text(&a.report, &csv)?;
    outputs.push(a.report.clone());
    let summary_path = sidecar(&a.report, ".summary.toml");
    write_text(&summary_path, &toml::to_string(&summary).map_err(|e| Error::Format(e.to_string()))?)?;
    outputs.push(summary_path);
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&sidecar(&a.report, ".manifest.toml"), "evaluate", ctx, a, &inputs, &outputs)?;
    println!("mean SSIM {:.4}, mean NMSE {:.2} dB over {} samples", summary.mean_ssim, summary.mean_nmse_db, summary.samples);
    if let Some(s) = summary.detection {
        println!(
            "accuracy {:.1}%, precision {}, recall {}",
            s.accuracy,
            s.precision.map(|v| format!("{v:.1}%")).unwrap_or_else(|| "undefined".into()),
            s.recall.map(|v| format!("{v:.1}%")).unwrap_or_else(|| "undefined".into())
        );
    }
    Ok(())
}

fn noise(a: &NoiseArgs, ctx: &Ctx) -> Result<()> {
    let traces: Array3<f64> = read_f64_3d(&a.input)?;
    let cd = ChannelData::new(traces, a.dt)?;
    let noisy = add_noise(&cd, a.snr_db, ctx.seed);
    ensure_parent(&a.out)?;
    Raster::F64(noisy.traces.into_dyn()).write(&a.out)?;
    write_manifest(&sidecar(&a.out, ".manifest.toml"), "noise", ctx, a, &[&a.input], &[a.out.clone()])?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Usage text of every subcommand, for documentation checks.
pub fn subcommand_names() -> Vec<String> {
    Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect()
}
