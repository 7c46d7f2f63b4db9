//! Text-conditional DC-GAN generator and discriminator.
//!
//! Both networks keep their weights in a [`ParamSet`] of named tensors so
//! checkpoints, optimizers and gradient checks can address parameters
//! uniformly. A forward pass binds the weights onto a [`Tape`] once and can
//! then run the network several times against the same bindings, which is
//! how the three discriminator terms of one loss share gradients.
//!
//! Layout for an `s x s` image with `n = log2(s / 4)` stages:
//!
//! | network | path |
//! |---|---|
//! | G | `phi -> affine+lrelu -> [z, r] -> affine -> 4x4xC0 -> n deconv(4,2,1) -> tanh` |
//! | D | `x -> n conv(4,2,1) -> 4x4xCl ++ tile(affine+lrelu(phi)) -> conv(4,1,0) -> sigmoid` |
//!
//! Generator stages halve the channel count and use batchnorm plus leaky
//! ReLU except on the output stage. Discriminator stages double it and skip
//! batchnorm on the input stage. Layers followed by batchnorm carry no bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{BatchMoments, Gradients, Mode, Tape, Tensor, Var, AdamConfig, AdamState, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
/// Slack allowed on discriminator inputs outside `[-1, 1]`.
pub const IMAGE_RANGE_TOLERANCE: f64 = 1e-4;

/// Distribution of the generator noise vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `U(0, 1)`.
    #[default]
    Unit,
    /// `U(-1, 1)`.
    Symmetric,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(NoiseKind::Unit),
            "symmetric" => Ok(NoiseKind::Symmetric),
            other => Err(Error::contract(format!("noise must be unit or symmetric, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Length `T` of the caption embedding.
    pub text_dim: usize,
    /// Length `Z` of the noise vector.
    pub noise_dim: usize,
    /// Width of the text reduction in both networks.
    pub reduced_text_dim: usize,
    /// Channels of the generator's 4x4 projection.
    pub g_channels: usize,
    /// Channels after the discriminator's first stage.
    pub d_channels: usize,
    /// Width of an optional 1x1 conv + leaky ReLU over the joined image and
    /// text features. Zero scores them with the final conv alone, which
    /// makes the logit a sum of an image term and a text term.
    pub joint_channels: usize,
    pub noise: NoiseKind,
    pub init_std: f64,
}

impl ModelConfig {
    /// The 64x64 network with 512 projected channels.
    pub fn full(text_dim: usize) -> Self {
        ModelConfig {
            image_size: 64,
            text_dim,
            noise_dim: 100,
            reduced_text_dim: 256,
            g_channels: 512,
            d_channels: 64,
            joint_channels: 0,
            noise: NoiseKind::Unit,
            init_std: 0.02,
        }
    }

    /// The 16x16 network trained on the synthetic faces.
    pub fn desk(text_dim: usize) -> Self {
        ModelConfig {
            image_size: 16,
            g_channels: 64,
            d_channels: 32,
            joint_channels: 64,
            ..Self::full(text_dim)
        }
    }

    /// A 16x16 network small enough for exhaustive finite differences.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            text_dim: 8,
            noise_dim: 4,
            reduced_text_dim: 4,
            g_channels: 4,
            d_channels: 2,
            joint_channels: 3,
            noise: NoiseKind::Unit,
            init_std: 0.2,
        }
    }

    /// Number of stride-2 stages between 4x4 and the image size.
    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || s % 16 != 0 || !(s / 4).is_power_of_two() {
            return Err(Error::contract(format!("image size {s} must be 4 times a power of two and at least 16")));
        }
        if self.text_dim == 0 || self.noise_dim == 0 || self.reduced_text_dim == 0 || self.d_channels == 0 {
            return Err(Error::contract("model widths must be positive"));
        }
        if self.g_channels >> (self.stages() - 1) == 0 {
            return Err(Error::contract(format!(
                "g_channels {} cannot be halved {} times",
                self.g_channels,
                self.stages() - 1
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::contract("init_std must be positive"));
        }
        Ok(())
    }

    /// Length of `[z, reduced phi]`.
    pub fn theta_dim(&self) -> usize {
        self.noise_dim + self.reduced_text_dim
    }

    /// Draws an `[n, Z]` noise batch.
    pub fn sample_noise<S: Scalar>(&self, n: usize, rng: &mut impl Rng) -> Tensor<S> {
        let (lo, hi) = match self.noise {
            NoiseKind::Unit => (0.0, 1.0),
            NoiseKind::Symmetric => (-1.0, 1.0),
        };
        Tensor::<f64>::uniform(vec![n, self.noise_dim], lo, hi, rng).cast()
    }
}

/// Whether a parameter is optimized or only carried along (running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors. Order is fixed at construction and
/// is the order used by checkpoints and optimizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>, kind: ParamKind) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, tensor, kind });
        self.params.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.params[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.params[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.params[i].tensor
    }

    /// Total number of trainable scalars.
    pub fn weight_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.tensor.len()).sum()
    }

    /// Records every weight on the tape. With `trainable` false the weights
    /// become constants and no gradient flows into them.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::Weight => {
                    let mut t = p.tensor.clone();
                    t.set_requires_grad(trainable);
                    Some(tape.leaf(&t))
                }
                ParamKind::Buffer => None,
            })
            .collect();
        Bound { vars }
    }

    /// Replaces every tensor with the same-named tensor of `other`, which
    /// must have identical names, kinds and shapes.
    pub fn load_from(&mut self, other: &ParamSet<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::contract(format!("expected {} tensors, got {}", self.len(), other.len())));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.kind != theirs.kind || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::contract(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }
}

/// Tape handles of one binding of a [`ParamSet`], indexed like the set.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i].expect("buffers are not bound")
    }

    pub fn get(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }
}

/// One Adam state per weight tensor of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<S> {
    /// `None` for buffers.
    pub states: Vec<Option<AdamState<S>>>,
    pub lr: f64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(params: &ParamSet<S>, config: AdamConfig, lr: f64) -> Result<Self> {
        config.validate()?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        let states = params
            .iter()
            .map(|p| (p.kind == ParamKind::Weight).then(|| AdamState::new(p.tensor.len(), config)))
            .collect();
        Ok(Optimizer { states, lr })
    }

    /// Applies one update to every weight bound in `bound`. Weights the
    /// loss does not reach receive a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &Gradients<S>, bound: &Bound) -> Result<()> {
        for (i, state) in self.states.iter_mut().enumerate() {
            let Some(state) = state else { continue };
            let tensor = params.tensor_mut(i);
            match grads.get(bound.var(i)) {
                Some(g) => state.step(tensor.data_mut(), g, self.lr)?,
                None => {
                    let zeros = vec![S::zero(); tensor.len()];
                    state.step(tensor.data_mut(), &zeros, self.lr)?
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct NormSlots {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    kernel: usize,
    bias: Option<usize>,
    norm: Option<NormSlots>,
}

/// Batch moments collected by one train-mode forward, keyed by stage.
#[derive(Clone, Debug, Default)]
pub struct StageMoments<S> {
    moments: Vec<(usize, BatchMoments<S>)>,
}

fn weight<S: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::<f64>::randn(shape, std, rng).cast()
}

fn push_norm<S: Scalar>(params: &mut ParamSet<S>, prefix: &str, c: usize) -> NormSlots {
    NormSlots {
        gamma: params.push(format!("{prefix}.gamma"), Tensor::full(vec![c], S::one()), ParamKind::Weight),
        beta: params.push(format!("{prefix}.beta"), Tensor::zeros(vec![c]), ParamKind::Weight),
        mean: params.push(format!("{prefix}.running_mean"), Tensor::zeros(vec![c]), ParamKind::Buffer),
        var: params.push(format!("{prefix}.running_var"), Tensor::full(vec![c], S::one()), ParamKind::Buffer),
    }
}

fn normalize<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    slots: NormSlots,
    x: Var,
    mode: Mode,
    stage: usize,
    moments: &mut StageMoments<S>,
) -> Result<Var> {
    let (g, b) = (bound.var(slots.gamma), bound.var(slots.beta));
    match mode {
        Mode::Train => {
            let (out, m) = tape.batchnorm_train(x, g, b)?;
            moments.moments.push((stage, m));
            Ok(out)
        }
        Mode::Infer => {
            tape.batchnorm_infer(x, g, b, params.tensor(slots.mean).data(), params.tensor(slots.var).data())
        }
    }
}

fn fold_moments<S: Scalar>(params: &mut ParamSet<S>, stages: &[Stage], moments: &StageMoments<S>) {
    for (stage, m) in &moments.moments {
        let slots = stages[*stage].norm.expect("moments only come from normalized stages");
        let mut mean = params.tensor(slots.mean).data().to_vec();
        let mut var = params.tensor(slots.var).data().to_vec();
        m.update_running(&mut mean, &mut var);
        params.tensor_mut(slots.mean).data_mut().copy_from_slice(&mean);
        params.tensor_mut(slots.var).data_mut().copy_from_slice(&var);
    }
}

fn expect_shape<S: Scalar>(tape: &Tape<S>, v: Var, want: &[usize], what: &str) -> Result<()> {
    if tape.shape(v) != want {
        return Err(Error::contract(format!("{what}: expected shape {want:?}, got {:?}", tape.shape(v))));
    }
    Ok(())
}

/// Affine text reduction followed by leaky ReLU.
fn reduce_text<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, w: usize, b: usize, phi: Var) -> Result<Var> {
    let r = tape.affine(phi, bound.var(w), Some(bound.var(b)))?;
    tape.leaky_relu(r, LEAKY_SLOPE)
}

/// Output of one network evaluation.
#[derive(Debug)]
pub struct Forward<S> {
    pub output: Var,
    pub moments: StageMoments<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<S> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
    reduce_w: usize,
    reduce_b: usize,
    proj_w: usize,
    proj_b: usize,
    stages: Vec<Stage>,
}

impl<S: Scalar> Generator<S> {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let mut p = ParamSet::new();
        let r = config.reduced_text_dim;
        let reduce_w = p.push("g.reduce.w", weight(vec![config.text_dim, r], std, rng), ParamKind::Weight);
        let reduce_b = p.push("g.reduce.b", Tensor::zeros(vec![r]), ParamKind::Weight);
        let proj = 16 * config.g_channels;
        let proj_w = p.push("g.proj.w", weight(vec![config.theta_dim(), proj], std, rng), ParamKind::Weight);
        let proj_b = p.push("g.proj.b", Tensor::zeros(vec![proj]), ParamKind::Weight);
        let n = config.stages();
        let mut stages = Vec::with_capacity(n);
        let mut cin = config.g_channels;
        for i in 0..n {
            let last = i + 1 == n;
            let cout = if last { 3 } else { cin / 2 };
            let kernel = p.push(
                format!("g.deconv{i}.kernel"),
                weight(vec![cin, cout, KERNEL, KERNEL], std, rng),
                ParamKind::Weight,
            );
            let (bias, norm) = if last {
                (Some(p.push(format!("g.deconv{i}.bias"), Tensor::zeros(vec![cout]), ParamKind::Weight)), None)
            } else {
                (None, Some(push_norm(&mut p, &format!("g.bn{i}"), cout)))
            };
            stages.push(Stage { kernel, bias, norm });
            cin = cout;
        }
        Ok(Generator {
            config: config.clone(),
            params: p,
            reduce_w,
            reduce_b,
            proj_w,
            proj_b,
            stages,
        })
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Maps `z[n,Z]` and `phi[n,T]` to images `[n,3,s,s]` in `(-1, 1)`.
    pub fn forward(&self, tape: &mut Tape<S>, bound: &Bound, z: Var, phi: Var, mode: Mode) -> Result<Forward<S>> {
        let c = &self.config;
        let n = tape.shape(z).first().copied().unwrap_or(0);
        expect_shape(tape, z, &[n, c.noise_dim], "generator noise")?;
        expect_shape(tape, phi, &[n, c.text_dim], "generator text embedding")?;
        let r = reduce_text(tape, bound, self.reduce_w, self.reduce_b, phi)?;
        let theta = tape.concat(&[z, r])?;
        let proj = tape.affine(theta, bound.var(self.proj_w), Some(bound.var(self.proj_b)))?;
        let mut h = tape.reshape(proj, vec![n, c.g_channels, 4, 4])?;
        let mut moments = StageMoments::default();
        for (i, st) in self.stages.iter().enumerate() {
            h = tape.deconv2d(h, bound.var(st.kernel), st.bias.map(|b| bound.var(b)), STRIDE, PAD)?;
            h = match st.norm {
                Some(slots) => {
                    let y = normalize(tape, &self.params, bound, slots, h, mode, i, &mut moments)?;
                    tape.leaky_relu(y, LEAKY_SLOPE)?
                }
                None => tape.tanh(h)?,
            };
        }
        Ok(Forward { output: h, moments })
    }

    /// Folds train-mode batch moments into the running statistics.
    pub fn update_running_stats(&mut self, moments: &StageMoments<S>) {
        fold_moments(&mut self.params, &self.stages, moments);
    }

    /// Infer-mode generation of one image per row.
    pub fn generate(&self, z: &Tensor<S>, phi: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (zv, pv) = (tape.leaf(z), tape.leaf(phi));
        let out = self.forward(&mut tape, &bound, zv, pv, Mode::Infer)?;
        let s = self.config.image_size;
        let per = 3 * s * s;
        let data = tape.value(out.output);
        Ok(data
            .chunks(per)
            .map(|c| Tensor::new(vec![3, s, s], c.to_vec()).expect("generator output is finite"))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<S> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
    stages: Vec<Stage>,
    reduce_w: usize,
    reduce_b: usize,
    joint: Option<(usize, usize)>,
    final_kernel: usize,
    final_bias: usize,
}

/// Discriminator evaluation: logits, probabilities and the last image feature map.
#[derive(Debug)]
pub struct Scores<S> {
    pub logits: Var,
    pub probs: Var,
    /// The `[n, Cl, 4, 4]` image features before the text is joined.
    pub gamma: Var,
    pub moments: StageMoments<S>,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let mut p = ParamSet::new();
        let n = config.stages();
        let mut stages = Vec::with_capacity(n);
        let mut cin = 3;
        let mut cout = config.d_channels;
        for i in 0..n {
            let kernel = p.push(
                format!("d.conv{i}.kernel"),
                weight(vec![cout, cin, KERNEL, KERNEL], std, rng),
                ParamKind::Weight,
            );
            let (bias, norm) = if i == 0 {
                (Some(p.push(format!("d.conv{i}.bias"), Tensor::zeros(vec![cout]), ParamKind::Weight)), None)
            } else {
                (None, Some(push_norm(&mut p, &format!("d.bn{i}"), cout)))
            };
            stages.push(Stage { kernel, bias, norm });
            cin = cout;
            cout *= 2;
        }
        let r = config.reduced_text_dim;
        let reduce_w = p.push("d.reduce.w", weight(vec![config.text_dim, r], std, rng), ParamKind::Weight);
        let reduce_b = p.push("d.reduce.b", Tensor::zeros(vec![r]), ParamKind::Weight);
        let joint = match config.joint_channels {
            0 => None,
            j => Some((
                p.push("d.joint.kernel", weight(vec![j, cin + r, 1, 1], std, rng), ParamKind::Weight),
                p.push("d.joint.bias", Tensor::zeros(vec![j]), ParamKind::Weight),
            )),
        };
        let head_in = if config.joint_channels == 0 { cin + r } else { config.joint_channels };
        let final_kernel = p.push("d.final.kernel", weight(vec![1, head_in, 4, 4], std, rng), ParamKind::Weight);
        let final_bias = p.push("d.final.bias", Tensor::zeros(vec![1]), ParamKind::Weight);
        Ok(Discriminator {
            config: config.clone(),
            params: p,
            stages,
            reduce_w,
            reduce_b,
            joint,
            final_kernel,
            final_bias,
        })
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Scores `image[n,3,s,s]` against `phi[n,T]`; one probability per row.
    pub fn forward(&self, tape: &mut Tape<S>, bound: &Bound, image: Var, phi: Var, mode: Mode) -> Result<Scores<S>> {
        let c = &self.config;
        let s = c.image_size;
        let n = tape.shape(image).first().copied().unwrap_or(0);
        expect_shape(tape, image, &[n, 3, s, s], "discriminator image")?;
        expect_shape(tape, phi, &[n, c.text_dim], "discriminator text embedding")?;
        let lim = 1.0 + IMAGE_RANGE_TOLERANCE;
        if let Some(v) = tape.value(image).iter().map(|v| v.as_f64()).find(|v| v.abs() > lim) {
            return Err(Error::contract(format!("discriminator input {v} lies outside [-1, 1]")));
        }
        let mut h = image;
        let mut moments = StageMoments::default();
        for (i, st) in self.stages.iter().enumerate() {
            h = tape.conv2d(h, bound.var(st.kernel), st.bias.map(|b| bound.var(b)), STRIDE, PAD)?;
            if let Some(slots) = st.norm {
                h = normalize(tape, &self.params, bound, slots, h, mode, i, &mut moments)?;
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let gamma = h;
        let r = reduce_text(tape, bound, self.reduce_w, self.reduce_b, phi)?;
        let tiled = tape.tile_spatial(r, 4, 4)?;
        let mut joined = tape.concat(&[gamma, tiled])?;
        if let Some((k, b)) = self.joint {
            let h = tape.conv2d(joined, bound.var(k), Some(bound.var(b)), 1, 0)?;
            joined = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let out = tape.conv2d(joined, bound.var(self.final_kernel), Some(bound.var(self.final_bias)), 1, 0)?;
        let logits = tape.reshape(out, vec![n, 1])?;
        let probs = tape.sigmoid(logits)?;
        Ok(Scores {
            logits,
            probs,
            gamma,
            moments,
        })
    }

    pub fn update_running_stats(&mut self, moments: &StageMoments<S>) {
        fold_moments(&mut self.params, &self.stages, moments);
    }
}

/// Initializes both networks from one seed, generator first.
pub fn init_params<S: Scalar>(seed: u64, config: &ModelConfig) -> Result<(Generator<S>, Discriminator<S>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Generator::new(config, &mut rng)?;
    let d = Discriminator::new(config, &mut rng)?;
    Ok((g, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_parameter_shapes() {
        let (g, d) = init_params::<f32>(0, &ModelConfig::full(4800)).unwrap();
        assert_eq!(g.config.theta_dim(), 356);
        assert_eq!(g.params.get("g.proj.w").unwrap().shape(), &[356, 8192]);
        let chans: Vec<usize> = (0..4).map(|i| g.params.get(&format!("g.deconv{i}.kernel")).unwrap().shape()[1]).collect();
        assert_eq!(chans, vec![256, 128, 64, 3]);
        let chans: Vec<usize> = (0..4).map(|i| d.params.get(&format!("d.conv{i}.kernel")).unwrap().shape()[0]).collect();
        assert_eq!(chans, vec![64, 128, 256, 512]);
        assert_eq!(d.params.get("d.final.kernel").unwrap().shape(), &[1, 768, 4, 4]);
        assert!(g.params.get("g.bn3.gamma").is_none());
        assert!(d.params.get("d.bn0.gamma").is_none());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params::<f64>(3, &ModelConfig::tiny()).unwrap();
        let b = init_params::<f64>(3, &ModelConfig::tiny()).unwrap();
        let c = init_params::<f64>(4, &ModelConfig::tiny()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn rejects_bad_sizes() {
        for s in [8, 24, 48] {
            let cfg = ModelConfig {
                image_size: s,
                ..ModelConfig::tiny()
            };
            assert!(cfg.validate().is_err(), "{s}");
        }
    }
}
