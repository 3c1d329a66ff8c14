//! Network checkpoints: a `network.toml` manifest plus one f32 raster per
//! parameter tensor.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array4, Ix1, Ix4};
use serde::{Deserialize, Serialize};

use super::conv::{ConvLayer, KERNEL};
use super::network::{NetworkSpec, NormSpec, UpdateNetwork};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const MANIFEST: &str = "network.toml";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerEntry {
    in_channels: usize,
    out_channels: usize,
    activation: String,
    weight: String,
    bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    spec: NetworkSpec,
    norm: NormSpec,
    layers: Vec<LayerEntry>,
}

pub fn save_network(net: &UpdateNetwork<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let weight = format!("layer{i}_weight.fwir");
        let bias = format!("layer{i}_bias.fwir");
        Raster::F32(layer.weight.clone().into_dyn()).write(dir.join(&weight))?;
        Raster::F32(layer.bias.clone().into_dyn()).write(dir.join(&bias))?;
        layers.push(LayerEntry {
            in_channels: layer.in_channels(),
            out_channels: layer.out_channels(),
            activation: if layer.relu { "relu" } else { "none" }.into(),
            weight,
            bias,
        });
    }
    let manifest = Manifest { format: FORMAT_VERSION, spec: net.spec.clone(), norm: net.norm, layers };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_network(dir: impl AsRef<Path>) -> Result<UpdateNetwork<f32>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint format {}", manifest.format)));
    }
    manifest.spec.validate()?;
    manifest.norm.validate()?;
    let expected = manifest.spec.layer_shapes();
    if manifest.layers.len() != expected.len() {
        return Err(Error::Format(format!("checkpoint lists {} layers, expected {}", manifest.layers.len(), expected.len())));
    }
    let mut layers = Vec::with_capacity(expected.len());
    for (entry, &(c_in, c_out, relu)) in manifest.layers.iter().zip(&expected) {
        let act_ok = matches!((entry.activation.as_str(), relu), ("relu", true) | ("none", false));
        if entry.in_channels != c_in || entry.out_channels != c_out || !act_ok {
            return Err(Error::Format(format!("layer entry {entry:?} disagrees with the network spec")));
        }
        let weight: Array4<f32> = Raster::read(dir.join(&entry.weight))?
            .into_f32()?
            .into_dimensionality::<Ix4>()
            .map_err(|e| Error::Format(e.to_string()))?;
        let bias: Array1<f32> = Raster::read(dir.join(&entry.bias))?
            .into_f32()?
            .into_dimensionality::<Ix1>()
            .map_err(|e| Error::Format(e.to_string()))?;
        if weight.dim() != (c_out, c_in, KERNEL, KERNEL) || bias.len() != c_out {
            return Err(Error::Format(format!("tensor shapes in {} do not match the spec", entry.weight)));
        }
        layers.push(ConvLayer { weight, bias, relu });
    }
    Ok(UpdateNetwork { spec: manifest.spec, norm: manifest.norm, layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = UpdateNetwork::<f32>::init(NetworkSpec { stage1: [3, 4, 5], stage2: [4, 2] }, NormSpec::default(), 9);
        save_network(&net, dir.path()).unwrap();
        assert_eq!(load_network(dir.path()).unwrap(), net);
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("offset = 1400.0"), "{text}");
    }

    #[test]
    fn mismatched_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec { stage1: [2, 2, 2], stage2: [2, 2] };
        save_network(&UpdateNetwork::<f32>::zeros(spec, NormSpec::default()), dir.path()).unwrap();
        Raster::F32(Array1::<f32>::zeros(7).into_dyn()).write(dir.path().join("layer0_bias.fwir")).unwrap();
        assert!(matches!(load_network(dir.path()), Err(Error::Format(_))));
    }
}
