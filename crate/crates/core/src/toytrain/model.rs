//! A small two-stream network with hand-written backpropagation.
//!
//! Every layer acts per pixel (a 1x1 convolution): a modality-specific stream
//! block, then two shared fusion blocks producing the fused map `F^d`. From
//! `F^d` the model derives the global feature (average pool), the enhanced
//! global feature (BN-weighted residual), and stripe features (horizontal max
//! pool followed by a shared linear projection), each with its own classifier.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::enhancement::{bn_weight_vector, bn_weight_vector_backward, BatchStats, BnParams, BnWeightMode};
use crate::error::{Error, Result};
use crate::losses::{LabeledBatch, LossGradients};
use crate::numerics::{band_ranges, FeatureMap};
use crate::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stream_channels: usize,
    pub fusion_hidden: usize,
    pub embed_dim: usize,
    pub local_dim: usize,
    pub parts: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.height,
            self.width,
            self.stream_channels,
            self.fusion_hidden,
            self.embed_dim,
            self.local_dim,
            self.parts,
            self.classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.parts > self.height {
            return Err(Error::PartsExceedHeight { parts: self.parts, height: self.height });
        }
        Ok(())
    }
}

/// Learning-rate group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Stream and fusion layers.
    Backbone,
    /// BN, local projection and classifiers.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self { weight: Array2::zeros((out, inp)), bias: Array1::zeros(out) }
    }

    fn random<R: Rng + ?Sized>(rng: &mut R, out: usize, inp: usize, std: f64) -> Self {
        let weight = Array2::from_shape_fn((out, inp), |_| std * rng.sample::<f64, _>(StandardNormal));
        Self { weight, bias: Array1::zeros(out) }
    }

    /// Row-wise `x W^T + b`.
    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>, acc: &mut Dense) -> Array2<f64> {
        acc.weight += &grad_out.t().dot(&x);
        acc.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }
}

/// All trainable tensors. Also used as the gradient and momentum container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub vmn: Dense,
    pub tmn: Dense,
    pub fmn: [Dense; 2],
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    /// `local_dim x embed_dim`, shared by all stripes.
    pub local_proj: Array2<f64>,
    pub cls_global: Dense,
    pub cls_enhanced: Dense,
    pub cls_local: Vec<Dense>,
}

/// A named flat view of one parameter tensor.
pub struct ParamSlice<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamSliceMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a mut [f64],
}

macro_rules! param_list {
    ($self:ident, $as_slice:ident, $wrap:ident) => {{
        use ParamGroup::{Backbone, Head};
        let Params { vmn, tmn, fmn, bn_gamma, bn_beta, local_proj, cls_global, cls_enhanced, cls_local } = $self;
        let [fmn1, fmn2] = fmn;
        let mut out = Vec::new();
        for (name, group, dense) in [
            ("vmn", Backbone, vmn),
            ("tmn", Backbone, tmn),
            ("fmn1", Backbone, fmn1),
            ("fmn2", Backbone, fmn2),
            ("cls_global", Head, cls_global),
            ("cls_enhanced", Head, cls_enhanced),
        ] {
            out.push($wrap!(format!("{name}.weight"), group, dense.weight, $as_slice));
            out.push($wrap!(format!("{name}.bias"), group, dense.bias, $as_slice));
        }
        out.push($wrap!("bn.gamma".to_string(), Head, *bn_gamma, $as_slice));
        out.push($wrap!("bn.beta".to_string(), Head, *bn_beta, $as_slice));
        out.push($wrap!("local_proj".to_string(), Head, *local_proj, $as_slice));
        for (j, dense) in cls_local.into_iter().enumerate() {
            out.push($wrap!(format!("cls_local{j}.weight"), Head, dense.weight, $as_slice));
            out.push($wrap!(format!("cls_local{j}.bias"), Head, dense.bias, $as_slice));
        }
        out
    }};
}

macro_rules! wrap_ref {
    ($name:expr, $group:expr, $t:expr, $as_slice:ident) => {
        ParamSlice {
            name: $name,
            group: $group,
            shape: $t.shape().to_vec(),
            data: $t.$as_slice().expect("parameters are contiguous"),
        }
    };
}

macro_rules! wrap_mut {
    ($name:expr, $group:expr, $t:expr, $as_slice:ident) => {
        ParamSliceMut { name: $name, group: $group, data: $t.$as_slice().expect("parameters are contiguous") }
    };
}

impl Params {
    pub fn zeros(shape: &ModelShape) -> Self {
        Self {
            vmn: Dense::zeros(shape.stream_channels, shape.in_channels),
            tmn: Dense::zeros(shape.stream_channels, shape.in_channels),
            fmn: [
                Dense::zeros(shape.fusion_hidden, shape.stream_channels),
                Dense::zeros(shape.embed_dim, shape.fusion_hidden),
            ],
            bn_gamma: Array1::zeros(shape.embed_dim),
            bn_beta: Array1::zeros(shape.embed_dim),
            local_proj: Array2::zeros((shape.local_dim, shape.embed_dim)),
            cls_global: Dense::zeros(shape.classes, shape.embed_dim),
            cls_enhanced: Dense::zeros(shape.classes, shape.embed_dim),
            cls_local: (0..shape.parts).map(|_| Dense::zeros(shape.classes, shape.local_dim)).collect(),
        }
    }

    pub fn slices(&self) -> Vec<ParamSlice<'_>> {
        param_list!(self, as_slice, wrap_ref)
    }

    pub fn slices_mut(&mut self) -> Vec<ParamSliceMut<'_>> {
        param_list!(self, as_slice_mut, wrap_mut)
    }

    pub fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.data.len()).sum()
    }
}

/// Whether BN uses batch statistics (training) or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub shape: ModelShape,
    pub params: Params,
    pub running: BatchStats,
    pub bn_mode: BnWeightMode,
    pub eps: f64,
}

/// Model outputs for a list of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub global: Array2<f64>,
    pub enhanced: Array2<f64>,
    /// `n x parts x local_dim`
    pub stripes: Array3<f64>,
    pub logits_global: Array2<f64>,
    pub logits_enhanced: Array2<f64>,
    /// `parts x n x classes`
    pub logits_local: Array3<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    modality: Vec<Modality>,
    inputs: Vec<Array2<f64>>,
    stream: Vec<Array2<f64>>,
    hidden: Vec<Array2<f64>>,
    fused: Vec<Array2<f64>>,
    pooled_max: Array3<f64>,
    argmax: Vec<Vec<Vec<usize>>>,
    normalized: Array2<f64>,
    stats: BatchStats,
    v_bn: Array1<f64>,
    pub outputs: Embeddings,
    height: usize,
    width: usize,
}

impl ForwardCache {
    /// The fused map `F^d` of sample `n` as a `D x H x W` tensor.
    pub fn feature_map(&self, n: usize) -> Result<FeatureMap> {
        let fused = &self.fused[n];
        let d = fused.ncols();
        let data = fused.t().as_standard_layout().into_owned().into_shape_with_order((d, self.height, self.width));
        FeatureMap::new(data.map_err(|e| Error::ShapeMismatch(e.to_string()))?)
    }

    /// Batch statistics used by the enhancement branch.
    pub fn stats(&self) -> &BatchStats {
        &self.stats
    }
}

fn relu(x: Array2<f64>) -> Array2<f64> {
    x.mapv_into(|v| v.max(0.0))
}

fn relu_backward(grad: &mut Array2<f64>, activated: &Array2<f64>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// `C x H x W` map as a `pixels x C` matrix.
fn to_pixels(map: &FeatureMap) -> Array2<f64> {
    let (c, h, w) = map.shape();
    map.data()
        .view()
        .into_shape_with_order((c, h * w))
        .expect("feature maps are contiguous")
        .t()
        .to_owned()
}

impl ToyModel {
    /// He-style initialisation for the ReLU layers, small classifier weights,
    /// `gamma = 1`, `beta = 0`.
    pub fn new<R: Rng + ?Sized>(
        shape: ModelShape,
        bn_mode: BnWeightMode,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let vmn = Dense::random(rng, shape.stream_channels, shape.in_channels, he(shape.in_channels));
        let tmn = Dense::random(rng, shape.stream_channels, shape.in_channels, he(shape.in_channels));
        let fmn1 = Dense::random(rng, shape.fusion_hidden, shape.stream_channels, he(shape.stream_channels));
        let fmn2 = Dense::random(rng, shape.embed_dim, shape.fusion_hidden, he(shape.fusion_hidden));
        let proj_std = (1.0 / shape.embed_dim as f64).sqrt();
        let local_proj =
            Array2::from_shape_fn((shape.local_dim, shape.embed_dim), |_| proj_std * rng.sample::<f64, _>(StandardNormal));
        let cls_global = Dense::random(rng, shape.classes, shape.embed_dim, 0.01);
        let cls_enhanced = Dense::random(rng, shape.classes, shape.embed_dim, 0.01);
        let cls_local = (0..shape.parts).map(|_| Dense::random(rng, shape.classes, shape.local_dim, 0.01)).collect();
        let params = Params {
            vmn,
            tmn,
            fmn: [fmn1, fmn2],
            bn_gamma: Array1::ones(shape.embed_dim),
            bn_beta: Array1::zeros(shape.embed_dim),
            local_proj,
            cls_global,
            cls_enhanced,
            cls_local,
        };
        Ok(Self { shape, params, running: BatchStats::unit(shape.embed_dim), bn_mode, eps })
    }

    pub fn bn_params(&self) -> Result<BnParams> {
        BnParams::new(self.params.bn_gamma.clone(), self.params.bn_beta.clone(), self.eps)
    }

    fn stream(&self, m: Modality) -> &Dense {
        match m {
            Modality::Visible => &self.params.vmn,
            Modality::Thermal => &self.params.tmn,
        }
    }

    pub fn forward(&self, images: &[&FeatureMap], modality: &[Modality], mode: Mode) -> Result<ForwardCache> {
        let shape = self.shape;
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if images.len() != modality.len() {
            return Err(Error::ShapeMismatch(format!("{} images, {} modality flags", images.len(), modality.len())));
        }
        let expected = (shape.in_channels, shape.height, shape.width);
        if let Some(bad) = images.iter().find(|m| m.shape() != expected) {
            return Err(Error::ShapeMismatch(format!("image {:?}, model expects {expected:?}", bad.shape())));
        }
        let n = images.len();
        let pix = shape.pixels();
        let bands = band_ranges(shape.height, shape.parts)?;

        let mut inputs = Vec::with_capacity(n);
        let mut stream = Vec::with_capacity(n);
        let mut hidden = Vec::with_capacity(n);
        let mut fused = Vec::with_capacity(n);
        let mut global = Array2::zeros((n, shape.embed_dim));
        let mut pooled_max = Array3::zeros((n, shape.parts, shape.embed_dim));
        let mut argmax = Vec::with_capacity(n);
        for (i, (img, &m)) in images.iter().zip(modality).enumerate() {
            let x = to_pixels(img);
            let a0 = relu(self.stream(m).apply(x.view()));
            let a1 = relu(self.params.fmn[0].apply(a0.view()));
            let fd = relu(self.params.fmn[1].apply(a1.view()));
            global.row_mut(i).assign(&(fd.sum_axis(Axis(0)) / pix as f64));
            let mut sample_arg = Vec::with_capacity(shape.parts);
            for (j, band) in bands.iter().enumerate() {
                let rows = band.start * shape.width..band.end * shape.width;
                let mut arg = vec![rows.start; shape.embed_dim];
                for c in 0..shape.embed_dim {
                    let mut best = f64::NEG_INFINITY;
                    for p in rows.clone() {
                        if fd[[p, c]] > best {
                            best = fd[[p, c]];
                            arg[c] = p;
                        }
                    }
                    pooled_max[[i, j, c]] = best;
                }
                sample_arg.push(arg);
            }
            argmax.push(sample_arg);
            inputs.push(x);
            stream.push(a0);
            hidden.push(a1);
            fused.push(fd);
        }

        let stats = match mode {
            Mode::Train => {
                let count = (n * pix) as f64;
                let mean = global.sum_axis(Axis(0)) / n as f64;
                let mut var = Array1::<f64>::zeros(shape.embed_dim);
                for fd in &fused {
                    for row in fd.outer_iter() {
                        var += &(&row - &mean).mapv(|x| x * x);
                    }
                }
                BatchStats { mean, var: var / count }
            }
            Mode::Eval => self.running.clone(),
        };
        let bn = self.bn_params()?;
        let v_bn = bn_weight_vector(&bn, self.bn_mode)?;
        let inv_std = stats.var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let normalized = (&global - &stats.mean) * &inv_std;
        let enhanced = &global + &((&normalized * &bn.gamma + &bn.beta) * &v_bn);

        let stripes_flat = pooled_max
            .view()
            .into_shape_with_order((n * shape.parts, shape.embed_dim))
            .expect("contiguous")
            .dot(&self.params.local_proj.t());
        let stripes = stripes_flat.into_shape_with_order((n, shape.parts, shape.local_dim)).expect("contiguous");

        let logits_global = self.params.cls_global.apply(global.view());
        let logits_enhanced = self.params.cls_enhanced.apply(enhanced.view());
        let mut logits_local = Array3::zeros((shape.parts, n, shape.classes));
        for (j, cls) in self.params.cls_local.iter().enumerate() {
            logits_local.index_axis_mut(Axis(0), j).assign(&cls.apply(stripes.index_axis(Axis(1), j)));
        }

        Ok(ForwardCache {
            modality: modality.to_vec(),
            inputs,
            stream,
            hidden,
            fused,
            pooled_max,
            argmax,
            normalized,
            stats,
            v_bn,
            outputs: Embeddings { global, enhanced, stripes, logits_global, logits_enhanced, logits_local },
            height: shape.height,
            width: shape.width,
        })
    }

    /// Inference-mode outputs.
    pub fn embed(&self, images: &[&FeatureMap], modality: &[Modality]) -> Result<Embeddings> {
        Ok(self.forward(images, modality, Mode::Eval)?.outputs)
    }

    /// Gradients of the loss with respect to every parameter, given loss
    /// gradients for the outputs of a training-mode forward pass.
    pub fn backward(&self, cache: &ForwardCache, grads: &LossGradients) -> Result<Params> {
        let shape = self.shape;
        let n = cache.inputs.len();
        let pix = shape.pixels() as f64;
        let out = &cache.outputs;
        let expected_dim = (n, shape.embed_dim);
        if grads.global.dim() != expected_dim
            || grads.enhanced.dim() != expected_dim
            || grads.stripes.dim() != out.stripes.dim()
            || grads.logits_local.dim() != out.logits_local.dim()
        {
            return Err(Error::ShapeMismatch("loss gradients do not match the forward pass".into()));
        }
        let p = &self.params;
        let mut acc = Params::zeros(&shape);

        // classifier heads
        let mut g_global = grads.global.clone()
            + p.cls_global.backward(out.global.view(), grads.logits_global.view(), &mut acc.cls_global);
        let g_enh = grads.enhanced.clone()
            + p.cls_enhanced.backward(out.enhanced.view(), grads.logits_enhanced.view(), &mut acc.cls_enhanced);
        let mut g_stripes = grads.stripes.clone();
        for (j, cls) in p.cls_local.iter().enumerate() {
            let gin = cls.backward(
                out.stripes.index_axis(Axis(1), j),
                grads.logits_local.index_axis(Axis(0), j),
                &mut acc.cls_local[j],
            );
            let mut dst = g_stripes.index_axis_mut(Axis(1), j);
            dst += &gin;
        }

        // local projection
        let flat_g = g_stripes.into_shape_with_order((n * shape.parts, shape.local_dim)).expect("contiguous");
        let flat_m = cache
            .pooled_max
            .view()
            .into_shape_with_order((n * shape.parts, shape.embed_dim))
            .expect("contiguous");
        acc.local_proj += &flat_g.t().dot(&flat_m);
        let g_max = flat_g.dot(&p.local_proj).into_shape_with_order((n, shape.parts, shape.embed_dim)).expect("contiguous");

        // enhancement: enh = glo + v * (gamma * z + beta), z = (glo - mu) / sqrt(var + eps)
        let gamma = &p.bn_gamma;
        let beta = &p.bn_beta;
        let v = &cache.v_bn;
        let z = &cache.normalized;
        g_global += &g_enh;
        let g_scaled = &g_enh * v; // dL/d(gamma * z + beta)
        acc.bn_beta += &g_scaled.sum_axis(Axis(0));
        acc.bn_gamma += &(&g_scaled * z).sum_axis(Axis(0));
        let g_v = (&g_enh * &(z * gamma + beta)).sum_axis(Axis(0));
        acc.bn_gamma += &bn_weight_vector_backward(gamma, self.bn_mode, &g_v)?;
        // elementwise BN backward, upstream per element u = g_scaled * gamma / pix
        let inv_std = cache.stats.var.mapv(|x| 1.0 / (x + self.eps).sqrt());
        let g_z = &g_scaled * gamma;
        let count = n as f64 * pix;
        let mean_u = g_z.sum_axis(Axis(0)) / count;
        let mean_uy = (&g_z * z).sum_axis(Axis(0)) / count;

        for i in 0..n {
            let fd = &cache.fused[i];
            let u_row = g_z.row(i).mapv(|x| x / pix);
            let glo_share = g_global.row(i).mapv(|x| x / pix);
            let y = (fd - &cache.stats.mean) * &inv_std;
            // d/dx of BN terms + average-pool path
            let mut g_fd = ((&y * &(-&mean_uy)) + &(&u_row - &mean_u)) * &inv_std + &glo_share;
            for (j, arg) in cache.argmax[i].iter().enumerate() {
                for (c, &pixel) in arg.iter().enumerate() {
                    g_fd[[pixel, c]] += g_max[[i, j, c]];
                }
            }
            relu_backward(&mut g_fd, fd);
            let mut g_a1 = p.fmn[1].backward(cache.hidden[i].view(), g_fd.view(), &mut acc.fmn[1]);
            relu_backward(&mut g_a1, &cache.hidden[i]);
            let mut g_a0 = p.fmn[0].backward(cache.stream[i].view(), g_a1.view(), &mut acc.fmn[0]);
            relu_backward(&mut g_a0, &cache.stream[i]);
            let (layer, slot) = match cache.modality[i] {
                Modality::Visible => (&p.vmn, &mut acc.vmn),
                Modality::Thermal => (&p.tmn, &mut acc.tmn),
            };
            layer.backward(cache.inputs[i].view(), g_a0.view(), slot);
        }
        Ok(acc)
    }
}

/// Builds the labelled batch the loss consumes from a forward pass.
pub fn labeled_batch(cache: &ForwardCache, classes: &[usize]) -> LabeledBatch {
    let o = &cache.outputs;
    LabeledBatch {
        global: o.global.clone(),
        enhanced: o.enhanced.clone(),
        stripes: o.stripes.clone(),
        logits_global: o.logits_global.clone(),
        logits_enhanced: o.logits_enhanced.clone(),
        logits_local: o.logits_local.clone(),
        identity: classes.to_vec(),
        modality: cache.modality.clone(),
    }
}
