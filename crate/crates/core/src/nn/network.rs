//! Two-stage update network: three widening conv layers whose activations
//! are concatenated and fed to three narrowing layers ending in one channel.

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::{ConvGrads, ConvLayer};
use crate::error::{Error, Result};

/// Input maps: normalised SoS and normalised gradient.
pub const INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    /// Subtracted from SoS, m/s.
    pub offset: f64,
    /// SoS divisor and update multiplier, m/s.
    pub scale: f64,
}

impl Default for NormSpec {
    fn default() -> Self {
        Self { offset: 1400.0, scale: 666.0 }
    }
}

impl NormSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite() && self.offset.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid normalisation {self:?}")));
        }
        Ok(())
    }

    pub fn normalize_sos(&self, c: &Array2<f64>) -> Array2<f64> {
        c.mapv(|v| (v - self.offset) / self.scale)
    }

    /// Per-sample max-abs scaling; an all-zero gradient stays zero.
    pub fn normalize_gradient(&self, g: &Array2<f64>) -> Array2<f64> {
        let m = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > 0.0 {
            g.mapv(|v| v / m)
        } else {
            g.clone()
        }
    }

    pub fn denormalize_update(&self, h: &Array2<f64>) -> Array2<f64> {
        h.mapv(|v| v * self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Output widths of the three feature layers.
    pub stage1: [usize; 3],
    /// Output widths of the two hidden fusion layers; the last layer has one channel.
    pub stage2: [usize; 2],
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { stage1: [64, 128, 256], stage2: [128, 64] }
    }
}

impl NetworkSpec {
    pub fn concat_channels(&self) -> usize {
        self.stage1.iter().sum()
    }

    /// `(in, out, relu)` per layer in evaluation order.
    pub fn layer_shapes(&self) -> [(usize, usize, bool); 6] {
        let [a, b, c] = self.stage1;
        let [d, e] = self.stage2;
        [
            (INPUT_CHANNELS, a, true),
            (a, b, true),
            (b, c, true),
            (a + b + c, d, true),
            (d, e, true),
            (e, 1, false),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1.iter().chain(&self.stage2).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateNetwork<T> {
    pub spec: NetworkSpec,
    pub norm: NormSpec,
    pub layers: Vec<ConvLayer<T>>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    input: Array3<T>,
    acts: Vec<Array3<T>>,
    concat: Array3<T>,
}

pub type NetGrads<T> = Vec<ConvGrads<T>>;

impl<T: NdFloat> UpdateNetwork<T> {
    pub fn zeros(spec: NetworkSpec, norm: NormSpec) -> Self {
        let layers = spec.layer_shapes().iter().map(|&(i, o, r)| ConvLayer::zeros(i, o, r)).collect();
        Self { spec, norm, layers }
    }

    pub fn init(spec: NetworkSpec, norm: NormSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec.layer_shapes().iter().map(|&(i, o, r)| ConvLayer::init(i, o, r, &mut rng)).collect();
        Self { spec, norm, layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn cast<U: NdFloat>(&self) -> UpdateNetwork<U> {
        UpdateNetwork { spec: self.spec.clone(), norm: self.norm, layers: self.layers.iter().map(|l| l.cast()).collect() }
    }

    /// `H` for a `(2, h, w)` input, keeping intermediates.
    pub fn forward_cached(&self, input: Array3<T>) -> Result<(Array2<T>, Cache<T>)> {
        if input.dim().0 != INPUT_CHANNELS {
            return Err(Error::Shape(format!("network expects 2 input channels, got {}", input.dim().0)));
        }
        let a1 = self.layers[0].forward(input.view())?;
        let a2 = self.layers[1].forward(a1.view())?;
        let a3 = self.layers[2].forward(a2.view())?;
        let concat = concatenate(Axis(0), &[a1.view(), a2.view(), a3.view()]).expect("equal spatial dims");
        let b1 = self.layers[3].forward(concat.view())?;
        let b2 = self.layers[4].forward(b1.view())?;
        let out = self.layers[5].forward(b2.view())?;
        let h = out.index_axis(Axis(0), 0).to_owned();
        Ok((h, Cache { input, acts: vec![a1, a2, a3, b1, b2, out], concat }))
    }

    pub fn forward(&self, input: Array3<T>) -> Result<Array2<T>> {
        self.forward_cached(input).map(|(h, _)| h)
    }

    /// Parameter gradients and `∂L/∂input` from `dh = ∂L/∂H`.
    pub fn backward(&self, cache: &Cache<T>, dh: ArrayView2<T>) -> Result<(NetGrads<T>, Array3<T>)> {
        let acts = &cache.acts;
        let mut grads: Vec<Option<ConvGrads<T>>> = vec![None; 6];
        let dout = dh.insert_axis(Axis(0)).to_owned();
        let (db2, g) = self.layers[5].backward(acts[4].view(), acts[5].view(), dout.view())?;
        grads[5] = Some(g);
        let (db1, g) = self.layers[4].backward(acts[3].view(), acts[4].view(), db2.view())?;
        grads[4] = Some(g);
        let (dcat, g) = self.layers[3].backward(cache.concat.view(), acts[3].view(), db1.view())?;
        grads[3] = Some(g);
        let [w1, w2, _] = self.spec.stage1;
        let da3 = dcat.slice(s![w1 + w2.., .., ..]).to_owned();
        let mut da2 = dcat.slice(s![w1..w1 + w2, .., ..]).to_owned();
        let mut da1 = dcat.slice(s![..w1, .., ..]).to_owned();
        let (d, g) = self.layers[2].backward(acts[1].view(), acts[2].view(), da3.view())?;
        grads[2] = Some(g);
        da2 += &d;
        let (d, g) = self.layers[1].backward(acts[0].view(), acts[1].view(), da2.view())?;
        grads[1] = Some(g);
        da1 += &d;
        let (dinput, g) = self.layers[0].backward(cache.input.view(), acts[0].view(), da1.view())?;
        grads[0] = Some(g);
        Ok((grads.into_iter().map(|g| g.expect("filled")).collect(), dinput))
    }

    pub fn zero_grads(&self) -> NetGrads<T> {
        self.layers.iter().map(ConvGrads::zeros_like).collect()
    }

    /// Stacks `(C - offset)/scale` and the max-abs normalised gradient.
    pub fn prepare_input(&self, c: &Array2<f64>, g: &Array2<f64>) -> Result<Array3<T>> {
        if c.dim() != g.dim() {
            return Err(Error::Shape(format!("SoS {:?} vs gradient {:?}", c.dim(), g.dim())));
        }
        if c.iter().chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        let cn = self.norm.normalize_sos(c);
        let gn = self.norm.normalize_gradient(g);
        let (h, w) = c.dim();
        let mut x = Array3::zeros((INPUT_CHANNELS, h, w));
        for ((i, j), v) in cn.indexed_iter() {
            x[[0, i, j]] = T::from(*v).expect("cast");
            x[[1, i, j]] = T::from(gn[[i, j]]).expect("cast");
        }
        Ok(x)
    }

    /// SoS update in m/s: `scale · H(norm(C), norm(g))`.
    pub fn predict_update(&self, c: &Array2<f64>, g: &Array2<f64>) -> Result<Array2<f64>> {
        let h = self.forward(self.prepare_input(c, g)?)?;
        Ok(self.norm.denormalize_update(&h.mapv(|v| v.to_f64().expect("cast"))))
    }
}

/// One training tuple: current estimate, its gradient, and the target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub c: Array2<f64>,
    pub g: Array2<f64>,
    pub c_gt: Array2<f64>,
}

/// Squared-error loss `‖C_gt - (C + scale·H)‖²` of one sample with its
/// parameter gradients.
pub fn sample_loss_and_grads<T: NdFloat>(net: &UpdateNetwork<T>, sample: &TrainSample) -> Result<(f64, NetGrads<T>)> {
    if sample.c_gt.dim() != sample.c.dim() {
        return Err(Error::Shape("target and estimate shapes differ".into()));
    }
    let (h, cache) = net.forward_cached(net.prepare_input(&sample.c, &sample.g)?)?;
    let scale = net.norm.scale;
    let mut loss = 0.0;
    let mut dh = Array2::<T>::zeros(h.dim());
    for (((d, hv), c), gt) in dh.iter_mut().zip(h.iter()).zip(sample.c.iter()).zip(sample.c_gt.iter()) {
        let r = gt - (c + scale * hv.to_f64().expect("cast"));
        loss += r * r;
        *d = T::from(-2.0 * scale * r).expect("cast");
    }
    let (grads, _) = net.backward(&cache, dh.view())?;
    Ok((loss, grads))
}

/// Mean loss and mean gradients over a batch. Samples are evaluated in
/// parallel and reduced in input order.
pub fn batch_loss_and_grads<T: NdFloat>(net: &UpdateNetwork<T>, batch: &[&TrainSample]) -> Result<(f64, NetGrads<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts: Vec<(f64, NetGrads<T>)> = batch.par_iter().map(|s| sample_loss_and_grads(net, s)).collect::<Result<_>>()?;
    let inv = T::from(1.0 / batch.len() as f64).expect("cast");
    let mut total = 0.0;
    let mut acc = net.zero_grads();
    for (loss, g) in &parts {
        total += loss;
        for (a, b) in acc.iter_mut().zip(g) {
            a.add_assign(b);
        }
    }
    for a in acc.iter_mut() {
        a.weight.mapv_inplace(|v| v * inv);
        a.bias.mapv_inplace(|v| v * inv);
    }
    Ok((total / batch.len() as f64, acc))
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: NetGrads<T>,
    v: NetGrads<T>,
}

impl<T: NdFloat> AdamState<T> {
    pub fn new(net: &UpdateNetwork<T>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: net.zero_grads(), v: net.zero_grads() }
    }

    /// Bias-corrected Adam update in place.
    pub fn update(&mut self, net: &mut UpdateNetwork<T>, grads: &NetGrads<T>, lr: f64) {
        self.step += 1;
        let b1 = T::from(self.beta1).unwrap();
        let b2 = T::from(self.beta2).unwrap();
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step = T::from(lr / c1).unwrap();
        let c2s = T::from(c2.sqrt()).unwrap();
        let eps = T::from(self.eps).unwrap();
        let apply = |p: &mut T, g: T, m: &mut T, v: &mut T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step * *m / (v.sqrt() / c2s + eps);
        };
        for (((layer, g), m), v) in net.layers.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            ndarray::Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
        }
    }
}

/// One Adam step on the batch loss; returns the loss before the update.
pub fn train_step<T: NdFloat>(net: &mut UpdateNetwork<T>, batch: &[&TrainSample], adam: &mut AdamState<T>, lr: f64) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(net, batch)?;
    if !loss.is_finite() {
        return Err(Error::NanLoss { epoch: 0, batch: 0 });
    }
    if lr != 0.0 {
        adam.update(net, &grads, lr);
    }
    Ok(loss)
}
