//! On-disk datasets: one `sample_%06d/` directory per sample holding the SoS
//! map, tissue labels, simulated channel data and a metadata file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Ix2};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arm::{arm_phantom, ArmConfig, ArmParams, BONE, EDEMA, SKIN};
use super::digits::synthetic_digits;
use super::mnist::{mnist_sos_map, AugmentDraw, AugmentSpec};
use super::rods::{random_rods, rod_phantom, RodSpec, ROD_DIAMETER};
use super::{sample_rng, TissueMap};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::grid::{ChannelData, SosMap};
use crate::raster::{read_f64_2d, read_f64_3d, Raster};

pub const SOS_FILE: &str = "sos.fwir";
pub const LABELS_FILE: &str = "labels.fwir";
pub const CD_FILE: &str = "cd.fwir";
pub const META_FILE: &str = "meta.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    Mnist,
    Arm,
    Rods,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "arm" => Ok(Self::Arm),
            "rods" => Ok(Self::Rods),
            other => Err(Error::InvalidArgument(format!("unknown phantom kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub kind: PhantomKind,
    pub index: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub with_edema: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub digit: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub augment: Option<AugmentDraw>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub arm: Option<ArmParams>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rods: Option<Vec<RodSpec>>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub sos: SosMap,
    pub labels: Array2<u8>,
    pub cd: ChannelData,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn mask(&self, label: u8) -> Array2<bool> {
        self.labels.mapv(|l| l == label)
    }

    pub fn bone_mask(&self) -> Array2<bool> {
        self.mask(BONE)
    }

    pub fn skin_mask(&self) -> Array2<bool> {
        self.mask(SKIN)
    }

    pub fn edema_mask(&self) -> Array2<bool> {
        self.mask(EDEMA)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub kind: PhantomKind,
    pub n: usize,
    pub seed: u64,
    pub augment: AugmentSpec,
    pub arm: ArmConfig,
    pub rod_diameter: f64,
    /// Source images for the digit kind; synthetic glyphs when absent.
    pub images: Option<Array3<u8>>,
}

impl DatasetOptions {
    pub fn new(kind: PhantomKind, n: usize, seed: u64) -> Self {
        Self { kind, n, seed, augment: AugmentSpec::default(), arm: ArmConfig::default(), rod_diameter: ROD_DIAMETER, images: None }
    }
}

/// Edema is present in every odd-indexed arm sample, giving a 1:1 ratio.
pub fn has_edema(index: usize) -> bool {
    index % 2 == 1
}

fn phantom(opts: &DatasetOptions, images: &Array3<u8>, model: &ForwardModel, index: usize) -> Result<(TissueMap, SampleMeta)> {
    let mut rng: ChaCha8Rng = sample_rng(opts.seed, index as u64);
    let grid = &model.grid;
    let diameter = model.geometry.diameter;
    let mut meta = SampleMeta {
        kind: opts.kind,
        index,
        seed: opts.seed,
        with_edema: None,
        digit: None,
        augment: None,
        arm: None,
        rods: None,
    };
    let map = match opts.kind {
        PhantomKind::Mnist => {
            if images.dim().0 == 0 {
                return Err(Error::InvalidArgument("image set is empty".into()));
            }
            let img = images.index_axis(ndarray::Axis(0), index % images.dim().0);
            let (sos, draw) = mnist_sos_map(img, &opts.augment, grid, diameter, &mut rng)?;
            meta.augment = Some(draw);
            meta.digit = Some((index % 10) as u8).filter(|_| opts.images.is_none());
            TissueMap { labels: Array2::zeros(grid.shape()), sos, arm: None, rods: None }
        }
        PhantomKind::Arm => {
            let edema = has_edema(index);
            let t = arm_phantom(&mut rng, edema, grid, diameter, &opts.arm)?;
            meta.with_edema = Some(edema);
            meta.arm = t.arm.clone();
            t
        }
        PhantomKind::Rods => {
            let count = rand::Rng::random_range(&mut rng, 1..=3usize);
            let rods = random_rods(&mut rng, count, opts.rod_diameter, diameter, 5000)?;
            let t = rod_phantom(&rods, grid, diameter)?;
            meta.rods = Some(rods);
            t
        }
    };
    Ok((map, meta))
}

/// Generates sample `index` including its simulated channel data.
pub fn generate_sample(opts: &DatasetOptions, model: &ForwardModel, index: usize) -> Result<Sample> {
    let images = source_images(opts);
    generate_with(opts, &images, model, index)
}

fn source_images(opts: &DatasetOptions) -> Array3<u8> {
    match (&opts.images, opts.kind) {
        (Some(imgs), _) => imgs.clone(),
        (None, PhantomKind::Mnist) => synthetic_digits(opts.n.max(1), opts.seed).0,
        _ => Array3::zeros((0, 0, 0)),
    }
}

fn generate_with(opts: &DatasetOptions, images: &Array3<u8>, model: &ForwardModel, index: usize) -> Result<Sample> {
    let (map, meta) = phantom(opts, images, model, index)?;
    let cd = model.simulate_all(&map.sos)?;
    Ok(Sample { sos: map.sos, labels: map.labels, cd, meta })
}

/// All samples in index order, generated in parallel.
pub fn generate_samples(opts: &DatasetOptions, model: &ForwardModel) -> Result<Vec<Sample>> {
    let images = source_images(opts);
    (0..opts.n).into_par_iter().map(|i| generate_with(opts, &images, model, i)).collect()
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:06}"))
}

pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Raster::F64(sample.sos.values.clone().into_dyn()).write(dir.join(SOS_FILE))?;
    Raster::U8(sample.labels.clone().into_dyn()).write(dir.join(LABELS_FILE))?;
    Raster::F64(sample.cd.traces.clone().into_dyn()).write(dir.join(CD_FILE))?;
    let meta = toml::to_string(&sample.meta).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(META_FILE);
    fs::write(&path, meta).map_err(|e| Error::io(path, e))
}

/// Reads a sample written by [`write_sample`] on the grid of `model`.
pub fn read_sample(dir: &Path, model: &ForwardModel) -> Result<Sample> {
    let sos = SosMap::new(model.grid, read_f64_2d(dir.join(SOS_FILE))?)?;
    let labels = Raster::read(dir.join(LABELS_FILE))?
        .into_u8()?
        .into_dimensionality::<Ix2>()
        .map_err(|e| Error::Format(e.to_string()))?;
    let cd = ChannelData::new(read_f64_3d(dir.join(CD_FILE))?, model.grid.dt)?;
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(Sample { sos, labels, cd, meta })
}

pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        write_sample(&sample_dir(root, s.meta.index), s)?;
    }
    Ok(())
}

/// `sample_*` subdirectories of `root`, sorted by name.
pub fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("sample_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_dataset(root: &Path, model: &ForwardModel) -> Result<Vec<Sample>> {
    sample_dirs(root)?.iter().map(|d| read_sample(d, model)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setup::Setup;

    fn quick_model() -> ForwardModel {
        let mut s = Setup::desk();
        s.grid.nt = 40;
        s.model().unwrap()
    }

    #[test]
    fn balanced_arm_dataset() {
        let edema = (0..100).filter(|&i| has_edema(i)).count();
        assert_eq!(edema, 50);
    }

    #[test]
    fn samples_round_trip_through_disk() {
        let model = quick_model();
        let dir = tempfile::tempdir().unwrap();
        for kind in [PhantomKind::Mnist, PhantomKind::Arm, PhantomKind::Rods] {
            let opts = DatasetOptions { rod_diameter: 0.006, ..DatasetOptions::new(kind, 2, 7) };
            let samples = generate_samples(&opts, &model).unwrap();
            let root = dir.path().join(format!("{kind:?}"));
            write_dataset(&root, &samples).unwrap();
            let back = read_dataset(&root, &model).unwrap();
            assert_eq!(back.len(), 2);
            for (a, b) in samples.iter().zip(&back) {
                assert_eq!(a.sos.values, b.sos.values);
                assert_eq!(a.labels, b.labels);
                assert_eq!(a.cd.traces, b.cd.traces);
                assert_eq!(a.meta, b.meta);
            }
        }
    }

    #[test]
    fn generation_is_replayable() {
        let model = quick_model();
        let opts = DatasetOptions::new(PhantomKind::Arm, 3, 11);
        let a = generate_sample(&opts, &model, 2).unwrap();
        let b = generate_samples(&opts, &model).unwrap().remove(2);
        assert_eq!(a.sos.values, b.sos.values);
        assert_eq!(a.cd.traces, b.cd.traces);
    }
}
