//! Deep-unfolded inversion: `C_{k+1} = C_k + N_k(C_k, g_k)` with each network
//! trained on its own precomputed block of `(C_k, g_k, C_gt)` tuples.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::compute_gradient;
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::fwi::{clamp_values, DEFAULT_BOUNDS};
use crate::grid::{require_cfl, ChannelData, SosMap};
use crate::nn::checkpoint::{load_network, save_network};
use crate::nn::{train_step, AdamState, NetworkSpec, NormSpec, TrainSample, UpdateNetwork};
use crate::phantoms::WATER_SOS;
use crate::raster::{read_f64_3d, Raster};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_LRS: [f64; DEFAULT_K] = [1e-4, 1e-4, 5e-5, 1e-5, 1e-5];
pub const DEFAULT_EPOCHS: usize = 40;
pub const DEFAULT_BATCH: usize = 32;
pub const PLAN_FILE: &str = "unfold.toml";
pub const BLOCK_FILE: &str = "block.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfoldPlan {
    pub k: usize,
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for UnfoldPlan {
    fn default() -> Self {
        Self { k: DEFAULT_K, lrs: DEFAULT_LRS.to_vec(), epochs: DEFAULT_EPOCHS, batch_size: DEFAULT_BATCH }
    }
}

impl UnfoldPlan {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if self.lrs.len() != self.k {
            return Err(Error::InvalidArgument(format!("{} learning rates for K = {}", self.lrs.len(), self.k)));
        }
        if self.lrs.iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) {
            return Err(Error::InvalidArgument(format!("invalid learning rates {:?}", self.lrs)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Elementwise clamp to `[lo, hi]`.
pub fn clamp_sos(c: &SosMap, bounds: (f64, f64)) -> SosMap {
    SosMap { grid: c.grid, values: clamp_values(&c.values, bounds) }
}

/// Homogeneous water starting map.
pub fn initial_estimate(model: &ForwardModel) -> Result<SosMap> {
    SosMap::homogeneous(model.grid, WATER_SOS)
}

fn check_bounds(model: &ForwardModel, bounds: (f64, f64)) -> Result<()> {
    if !(bounds.0 > 0.0 && bounds.0 < bounds.1) {
        return Err(Error::InvalidArgument(format!("invalid SoS bounds {bounds:?}")));
    }
    require_cfl(&model.grid, bounds.1)
}

/// One unfolded iteration from an in-bounds `c`; the result is clamped.
pub fn unfold_step(model: &ForwardModel, obs: &ChannelData, c: &SosMap, net: &UpdateNetwork<f32>, bounds: (f64, f64)) -> Result<SosMap> {
    let g = compute_gradient(model, c, obs)?;
    let h = net.predict_update(&c.values, &g.values)?;
    Ok(SosMap { grid: c.grid, values: clamp_values(&(&c.values + &h), bounds) })
}

/// Runs every network in turn from `c0` and returns `C_1..C_K`.
pub fn unfold_infer(
    model: &ForwardModel,
    obs: &ChannelData,
    c0: &SosMap,
    nets: &[UpdateNetwork<f32>],
    bounds: (f64, f64),
) -> Result<Vec<SosMap>> {
    check_bounds(model, bounds)?;
    let mut c = clamp_sos(c0, bounds);
    let mut out = Vec::with_capacity(nets.len());
    for net in nets {
        c = unfold_step(model, obs, &c, net, bounds)?;
        out.push(c.clone());
    }
    Ok(out)
}

/// Training tuples for one iteration index.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDataset {
    pub k: usize,
    /// Position of each tuple in the source sample list.
    pub ids: Vec<usize>,
    pub samples: Vec<TrainSample>,
    /// Samples whose propagation failed, with the reason.
    pub skipped: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockIndex {
    k: usize,
    ids: Vec<usize>,
    skipped: Vec<SkipEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SkipEntry {
    id: usize,
    reason: String,
}

fn stack(maps: impl Iterator<Item = Array2<f64>>, shape: (usize, usize), n: usize) -> Array3<f64> {
    let mut out = Array3::zeros((n, shape.0, shape.1));
    for (i, m) in maps.enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&m);
    }
    out
}

impl BlockDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `c.fwir`, `g.fwir`, `c_gt.fwir` stacks and a `block.toml` index.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.samples.len();
        let shape = self.samples.first().map(|s| s.c.dim()).unwrap_or((0, 0));
        for (name, get) in [("c", 0), ("g", 1), ("c_gt", 2)] {
            let maps = self.samples.iter().map(|s| match get {
                0 => s.c.clone(),
                1 => s.g.clone(),
                _ => s.c_gt.clone(),
            });
            Raster::F64(stack(maps, shape, n).into_dyn()).write(dir.join(format!("{name}.fwir")))?;
        }
        let index = BlockIndex {
            k: self.k,
            ids: self.ids.clone(),
            skipped: self.skipped.iter().map(|(id, r)| SkipEntry { id: *id, reason: r.clone() }).collect(),
        };
        let text = toml::to_string(&index).map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join(BLOCK_FILE);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BLOCK_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: BlockIndex = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let c = read_f64_3d(dir.join("c.fwir"))?;
        let g = read_f64_3d(dir.join("g.fwir"))?;
        let gt = read_f64_3d(dir.join("c_gt.fwir"))?;
        if c.dim() != g.dim() || c.dim() != gt.dim() || c.dim().0 != index.ids.len() {
            return Err(Error::Format(format!("block shards in {} disagree", dir.display())));
        }
        let samples = (0..c.dim().0)
            .map(|i| TrainSample {
                c: c.index_axis(Axis(0), i).to_owned(),
                g: g.index_axis(Axis(0), i).to_owned(),
                c_gt: gt.index_axis(Axis(0), i).to_owned(),
            })
            .collect();
        Ok(Self { k: index.k, ids: index.ids, samples, skipped: index.skipped.into_iter().map(|s| (s.id, s.reason)).collect() })
    }
}

/// Observation and ground truth of one training sample.
pub type Pair<'a> = (&'a ChannelData, &'a SosMap);

fn block_from(k: usize, results: Vec<Result<(SosMap, Array2<f64>)>>, pairs: &[Pair], ids: &[usize]) -> Result<BlockDataset> {
    let mut ds = BlockDataset { k, ids: Vec::new(), samples: Vec::new(), skipped: Vec::new() };
    for (r, &id) in results.into_iter().zip(ids) {
        match r {
            Ok((c, g)) => {
                ds.ids.push(id);
                ds.samples.push(TrainSample { c: c.values, g, c_gt: pairs[id].1.values.clone() });
            }
            Err(e @ (Error::BlowUp { .. } | Error::Numeric(_))) => ds.skipped.push((id, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(ds)
}

/// Rolls `nets` from the water map for every sample and pairs the resulting
/// `C_k` with its gradient. Samples whose propagation blows up are skipped.
pub fn prepare_block_dataset(
    model: &ForwardModel,
    pairs: &[Pair],
    nets: &[UpdateNetwork<f32>],
    bounds: (f64, f64),
) -> Result<BlockDataset> {
    check_bounds(model, bounds)?;
    let c0 = initial_estimate(model)?;
    let ids: Vec<usize> = (0..pairs.len()).collect();
    let results: Vec<_> = pairs
        .par_iter()
        .map(|(obs, _)| {
            let mut c = c0.clone();
            for net in nets {
                c = unfold_step(model, obs, &c, net, bounds)?;
            }
            let g = compute_gradient(model, &c, obs)?;
            Ok((c, g.values))
        })
        .collect();
    block_from(nets.len(), results, pairs, &ids)
}

/// Block `k+1` from block `k` and its trained network, without replaying
/// earlier networks.
pub fn advance_block_dataset(
    model: &ForwardModel,
    pairs: &[Pair],
    prev: &BlockDataset,
    net: &UpdateNetwork<f32>,
    bounds: (f64, f64),
) -> Result<BlockDataset> {
    check_bounds(model, bounds)?;
    let results: Vec<_> = prev
        .ids
        .par_iter()
        .zip(&prev.samples)
        .map(|(&id, s)| {
            let obs = pairs[id].0;
            let h = net.predict_update(&s.c, &s.g)?;
            let c = SosMap { grid: model.grid, values: clamp_values(&(&s.c + &h), bounds) };
            let g = compute_gradient(model, &c, obs)?;
            Ok((c, g.values))
        })
        .collect();
    let mut ds = block_from(prev.k + 1, results, pairs, &prev.ids)?;
    let mut skipped = prev.skipped.clone();
    skipped.extend(ds.skipped);
    ds.skipped = skipped;
    Ok(ds)
}

/// Shuffled mini-batch Adam for `epochs` epochs; returns the final network
/// and the mean training loss of each epoch.
pub fn train_block(
    ds: &BlockDataset,
    spec: &NetworkSpec,
    norm: NormSpec,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(UpdateNetwork<f32>, Vec<f64>)> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!("block {} dataset is empty", ds.k)));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    spec.validate()?;
    norm.validate()?;
    let mut net = UpdateNetwork::<f32>::init(spec.clone(), norm, seed.wrapping_add(ds.k as u64));
    // A zero output layer starts every block at the identity update.
    if let Some(last) = net.layers.last_mut() {
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }
    let mut adam = AdamState::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ds.k as u64);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let loss = train_step(&mut net, &batch, &mut adam, lr).map_err(|e| match e {
                Error::NanLoss { .. } => Error::NanLoss { epoch, batch: b },
                other => other,
            })?;
            total += loss * chunk.len() as f64;
        }
        losses.push(total / ds.len() as f64);
    }
    Ok((net, losses))
}

/// SHA-256 over the sorted file names and contents of `dir`.
pub fn directory_digest(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn block_dir(ckpt: &Path, k: usize) -> PathBuf {
    ckpt.join(format!("block_{k}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfoldManifest {
    pub plan: UnfoldPlan,
    pub spec: NetworkSpec,
    pub norm: NormSpec,
    pub bounds: (f64, f64),
    pub seed: u64,
    /// Digest of each block checkpoint directory.
    pub digests: Vec<String>,
    /// Mean training loss per epoch for each block.
    pub losses: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub plan: UnfoldPlan,
    pub spec: NetworkSpec,
    pub norm: NormSpec,
    pub bounds: (f64, f64),
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(plan: UnfoldPlan, spec: NetworkSpec, seed: u64) -> Self {
        Self { plan, spec, norm: NormSpec::default(), bounds: DEFAULT_BOUNDS, seed }
    }
}

/// Block-wise training of all K networks. With `ckpt`, each block dataset is
/// materialised under `ckpt/data_k`, each network saved to `ckpt/block_k` and
/// reloaded for the next block, and earlier checkpoints are verified unchanged.
pub fn train_unfolded(model: &ForwardModel, pairs: &[Pair], opts: &TrainOptions, ckpt: Option<&Path>) -> Result<(Vec<UpdateNetwork<f32>>, UnfoldManifest)> {
    opts.plan.validate()?;
    let mut manifest = UnfoldManifest {
        plan: opts.plan.clone(),
        spec: opts.spec.clone(),
        norm: opts.norm,
        bounds: opts.bounds,
        seed: opts.seed,
        digests: Vec::new(),
        losses: Vec::new(),
    };
    let mut nets: Vec<UpdateNetwork<f32>> = Vec::with_capacity(opts.plan.k);
    let mut ds = prepare_block_dataset(model, pairs, &[], opts.bounds)?;
    for k in 0..opts.plan.k {
        if k > 0 {
            ds = advance_block_dataset(model, pairs, &ds, &nets[k - 1], opts.bounds)?;
        }
        if let Some(root) = ckpt {
            let data = root.join(format!("data_{k}"));
            ds.save(&data)?;
            ds = BlockDataset::load(&data)?;
        }
        let (mut net, losses) =
            train_block(&ds, &opts.spec, opts.norm, opts.plan.lrs[k], opts.plan.epochs, opts.plan.batch_size, opts.seed)?;
        if let Some(root) = ckpt {
            let dir = block_dir(root, k);
            save_network(&net, &dir)?;
            net = load_network(&dir)?;
            for (j, want) in manifest.digests.iter().enumerate() {
                if &directory_digest(&block_dir(root, j))? != want {
                    return Err(Error::InvalidArgument(format!("checkpoint block_{j} changed while training block {k}")));
                }
            }
            manifest.digests.push(directory_digest(&dir)?);
        }
        manifest.losses.push(losses);
        nets.push(net);
    }
    if let Some(root) = ckpt {
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let path = root.join(PLAN_FILE);
        fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok((nets, manifest))
}

/// Loads every block of a checkpoint written by [`train_unfolded`].
pub fn load_unfolded(ckpt: &Path) -> Result<(Vec<UpdateNetwork<f32>>, UnfoldManifest)> {
    let path = ckpt.join(PLAN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: UnfoldManifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let nets = (0..manifest.plan.k).map(|k| load_network(block_dir(ckpt, k))).collect::<Result<Vec<_>>>()?;
    for (k, want) in manifest.digests.iter().enumerate() {
        if &directory_digest(&block_dir(ckpt, k))? != want {
            return Err(Error::Format(format!("checkpoint block_{k} does not match its recorded digest")));
        }
    }
    Ok((nets, manifest))
}
