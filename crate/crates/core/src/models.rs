//! Network construction: the DCGAN generator/discriminator template, the
//! stability-guideline validator, and the auxiliary architectures used by
//! the evaluation pipelines (MLP baselines, the dedup autoencoder).
//!
//! Architectures are described as a [`NetworkSpec`], an ordered list of
//! [`LayerSpec`] descriptors that chains shapes exactly. A [`Network`] binds
//! a spec to parameter tensors and batchnorm running statistics. Generator
//! and discriminator specs must additionally satisfy the DCGAN stability
//! guidelines, enforced by [`validate_guidelines`] with a named
//! [`Guideline`] per rejection.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{self, BatchNormState, BnBatchStats, Mode};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Momentum for folding batch statistics into running estimates.
pub const BN_MOMENTUM: f64 = 0.1;
/// Epsilon inside the batchnorm denominator.
pub const BN_EPS: f64 = 1e-5;
/// Negative slope of every discriminator rectifier.
pub const LEAK_SLOPE: f64 = 0.2;
/// Standard deviation of weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Matrix multiply on `[n, in_dim]`, optional bias.
    Dense {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    /// Per-sample reshape to `[c, h, w]`.
    Reshape { shape: Vec<usize> },
    /// Strided convolution, kernel `[out_ch, in_ch, k, k]`.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    /// Fractionally-strided convolution, kernel `[in_ch, out_ch, k, k]`.
    ConvTranspose {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
    },
    BatchNorm { channels: usize, affine: bool },
    Activation(Activation),
    /// Windowed max pooling. Constructible so that pooling architectures can
    /// be expressed and then rejected by the guideline validator.
    MaxPool { kernel: usize, stride: usize },
    Dropout { rate: f64 },
    Flatten,
}

/// What the network is for; decides which guideline checks apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkRole {
    Generator,
    Discriminator,
    /// Permutation-invariant baseline generator (dense layers only).
    MlpGenerator,
    /// Permutation-invariant baseline discriminator.
    MlpDiscriminator,
    /// Denoising autoencoder for semantic hashing.
    Autoencoder,
}

impl NetworkRole {
    fn as_str(self) -> &'static str {
        match self {
            NetworkRole::Generator => "generator",
            NetworkRole::Discriminator => "discriminator",
            NetworkRole::MlpGenerator => "mlp_generator",
            NetworkRole::MlpDiscriminator => "mlp_discriminator",
            NetworkRole::Autoencoder => "autoencoder",
        }
    }

    fn from_str(s: &str) -> Option<NetworkRole> {
        Some(match s {
            "generator" => NetworkRole::Generator,
            "discriminator" => NetworkRole::Discriminator,
            "mlp_generator" => NetworkRole::MlpGenerator,
            "mlp_discriminator" => NetworkRole::MlpDiscriminator,
            "autoencoder" => NetworkRole::Autoencoder,
            _ => return None,
        })
    }
}

/// The DCGAN stability guidelines a spec can violate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guideline {
    /// Pooling layers are replaced by strided convolutions.
    NoPooling,
    /// Batchnorm everywhere eligible, except the generator output and the
    /// discriminator input.
    UseBatchNorm,
    /// No fully connected hidden layers.
    NoFullyConnectedHidden,
    /// Generator uses ReLU, with tanh on the output only.
    GeneratorActivations,
    /// Discriminator uses LeakyReLU throughout.
    DiscriminatorActivations,
}

impl fmt::Display for Guideline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Guideline::NoPooling => "replace pooling with strided convolutions",
            Guideline::UseBatchNorm => "use batchnorm (except generator output / discriminator input)",
            Guideline::NoFullyConnectedHidden => "remove fully connected hidden layers",
            Guideline::GeneratorActivations => "generator activations: ReLU with tanh output",
            Guideline::DiscriminatorActivations => "discriminator activations: LeakyReLU",
        };
        f.write_str(name)
    }
}

/// A rejected architecture: which guideline, and where.
#[derive(Debug, Clone)]
pub struct GuidelineViolation {
    pub guideline: Guideline,
    pub layer_index: usize,
    pub detail: String,
}

impl fmt::Display for GuidelineViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer {}: {} (guideline: {})",
            self.layer_index, self.detail, self.guideline
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub role: NetworkRole,
    /// Per-sample input shape: `[z_dim]` for generators, `[c, h, w]` for
    /// image discriminators.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Per-sample output shape; errors if consecutive layers do not chain.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = shape_after(layer, &shape)
                .map_err(|e| Error::config(format!("{} layer {i}: {e}", self.name)))?;
        }
        Ok(shape)
    }

    /// Per-sample shape of each hidden-stage activation, in the order
    /// [`Network::forward_full`] records them (every activation layer except
    /// the network's final one).
    pub fn stage_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let final_act = last_feature_layer(self)
            .filter(|&i| matches!(self.layers[i], LayerSpec::Activation(_)));
        let mut shape = self.input_shape.clone();
        let mut stages = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = shape_after(layer, &shape)
                .map_err(|e| Error::config(format!("{} layer {i}: {e}", self.name)))?;
            if matches!(layer, LayerSpec::Activation(_)) && Some(i) != final_act {
                stages.push(shape.clone());
            }
        }
        Ok(stages)
    }

    /// Serializes to the line-oriented text format stored in checkpoints.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("network {}\n", self.name));
        out.push_str(&format!("role {}\n", self.role.as_str()));
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("input {}\n", dims.join(",")));
        for layer in &self.layers {
            out.push_str("layer ");
            match layer {
                LayerSpec::Dense {
                    in_dim,
                    out_dim,
                    bias,
                } => out.push_str(&format!("dense in={in_dim} out={out_dim} bias={bias}")),
                LayerSpec::Reshape { shape } => {
                    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                    out.push_str(&format!("reshape dims={}", dims.join(",")));
                }
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                    bias,
                } => out.push_str(&format!(
                    "conv in={in_ch} out={out_ch} kernel={kernel} stride={stride} pad={pad} bias={bias}"
                )),
                LayerSpec::ConvTranspose {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                    out_pad,
                    bias,
                } => out.push_str(&format!(
                    "conv_transpose in={in_ch} out={out_ch} kernel={kernel} stride={stride} pad={pad} out_pad={out_pad} bias={bias}"
                )),
                LayerSpec::BatchNorm { channels, affine } => {
                    out.push_str(&format!("batchnorm channels={channels} affine={affine}"))
                }
                LayerSpec::Activation(act) => match act {
                    Activation::Relu => out.push_str("activation kind=relu"),
                    Activation::LeakyRelu { slope } => {
                        out.push_str(&format!("activation kind=leaky_relu slope={slope}"))
                    }
                    Activation::Tanh => out.push_str("activation kind=tanh"),
                    Activation::Sigmoid => out.push_str("activation kind=sigmoid"),
                },
                LayerSpec::MaxPool { kernel, stride } => {
                    out.push_str(&format!("maxpool kernel={kernel} stride={stride}"))
                }
                LayerSpec::Dropout { rate } => out.push_str(&format!("dropout rate={rate}")),
                LayerSpec::Flatten => out.push_str("flatten"),
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    /// Parses the [`Self::to_text`] format back.
    pub fn from_text(text: &str) -> Result<NetworkSpec> {
        let mut name = None;
        let mut role = None;
        let mut input_shape = None;
        let mut layers = Vec::new();
        let mut saw_end = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::data(format!("spec text line {}: {msg}", lineno + 1));
            let (head, rest) = match line.split_once(' ') {
                Some((h, r)) => (h, r.trim()),
                None => (line, ""),
            };
            match head {
                "network" => name = Some(rest.to_string()),
                "role" => {
                    role = Some(
                        NetworkRole::from_str(rest)
                            .ok_or_else(|| err(format!("unknown role {rest:?}")))?,
                    )
                }
                "input" => input_shape = Some(parse_dims(rest).map_err(err)?),
                "layer" => layers.push(parse_layer(rest).map_err(err)?),
                "end" => {
                    saw_end = true;
                    break;
                }
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        if !saw_end {
            return Err(Error::data("spec text missing end marker"));
        }
        Ok(NetworkSpec {
            name: name.ok_or_else(|| Error::data("spec text missing network name"))?,
            role: role.ok_or_else(|| Error::data("spec text missing role"))?,
            input_shape: input_shape.ok_or_else(|| Error::data("spec text missing input shape"))?,
            layers,
        })
    }
}

fn parse_dims(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad dimension {p:?}"))
        })
        .collect()
}

fn parse_fields(rest: &str) -> std::result::Result<Vec<(&str, &str)>, String> {
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| format!("expected key=value, got {kv:?}"))
        })
        .collect()
}

fn parse_layer(rest: &str) -> std::result::Result<LayerSpec, String> {
    let (kind, rest) = match rest.split_once(' ') {
        Some((k, r)) => (k, r),
        None => (rest, ""),
    };
    let fields = parse_fields(rest)?;
    let get = |key: &str| -> std::result::Result<&str, String> {
        fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| format!("{kind} layer missing {key}="))
    };
    let get_usize = |key: &str| -> std::result::Result<usize, String> {
        get(key)?
            .parse()
            .map_err(|_| format!("{kind} layer: bad {key}"))
    };
    let get_bool = |key: &str| -> std::result::Result<bool, String> {
        get(key)?
            .parse()
            .map_err(|_| format!("{kind} layer: bad {key}"))
    };
    let get_f64 = |key: &str| -> std::result::Result<f64, String> {
        get(key)?
            .parse()
            .map_err(|_| format!("{kind} layer: bad {key}"))
    };
    Ok(match kind {
        "dense" => LayerSpec::Dense {
            in_dim: get_usize("in")?,
            out_dim: get_usize("out")?,
            bias: get_bool("bias")?,
        },
        "reshape" => LayerSpec::Reshape {
            shape: parse_dims(get("dims")?)?,
        },
        "conv" => LayerSpec::Conv {
            in_ch: get_usize("in")?,
            out_ch: get_usize("out")?,
            kernel: get_usize("kernel")?,
            stride: get_usize("stride")?,
            pad: get_usize("pad")?,
            bias: get_bool("bias")?,
        },
        "conv_transpose" => LayerSpec::ConvTranspose {
            in_ch: get_usize("in")?,
            out_ch: get_usize("out")?,
            kernel: get_usize("kernel")?,
            stride: get_usize("stride")?,
            pad: get_usize("pad")?,
            out_pad: get_usize("out_pad")?,
            bias: get_bool("bias")?,
        },
        "batchnorm" => LayerSpec::BatchNorm {
            channels: get_usize("channels")?,
            affine: get_bool("affine")?,
        },
        "activation" => LayerSpec::Activation(match get("kind")? {
            "relu" => Activation::Relu,
            "leaky_relu" => Activation::LeakyRelu {
                slope: get_f64("slope")?,
            },
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            other => return Err(format!("unknown activation {other:?}")),
        }),
        "maxpool" => LayerSpec::MaxPool {
            kernel: get_usize("kernel")?,
            stride: get_usize("stride")?,
        },
        "dropout" => LayerSpec::Dropout {
            rate: get_f64("rate")?,
        },
        "flatten" => LayerSpec::Flatten,
        other => return Err(format!("unknown layer kind {other:?}")),
    })
}

/// Shape transition of one layer; errors on any mismatch.
fn shape_after(layer: &LayerSpec, shape: &[usize]) -> std::result::Result<Vec<usize>, String> {
    match layer {
        LayerSpec::Dense { in_dim, out_dim, .. } => {
            if shape != [*in_dim] {
                return Err(format!("dense expects [{in_dim}], got {shape:?}"));
            }
            Ok(vec![*out_dim])
        }
        LayerSpec::Reshape { shape: to } => {
            let have: usize = shape.iter().product();
            let want: usize = to.iter().product();
            if have != want {
                return Err(format!("cannot reshape {shape:?} to {to:?}"));
            }
            Ok(to.clone())
        }
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            ..
        } => {
            let [c, h, w] = three(shape).ok_or_else(|| format!("conv expects [c,h,w], got {shape:?}"))?;
            if c != *in_ch {
                return Err(format!("conv expects {in_ch} channels, got {c}"));
            }
            let oh = nn::conv_output_dim(h, *kernel, *stride, *pad).map_err(|e| e.to_string())?;
            let ow = nn::conv_output_dim(w, *kernel, *stride, *pad).map_err(|e| e.to_string())?;
            Ok(vec![*out_ch, oh, ow])
        }
        LayerSpec::ConvTranspose {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            out_pad,
            ..
        } => {
            let [c, h, w] =
                three(shape).ok_or_else(|| format!("conv_transpose expects [c,h,w], got {shape:?}"))?;
            if c != *in_ch {
                return Err(format!("conv_transpose expects {in_ch} channels, got {c}"));
            }
            let oh = nn::transpose_output_dim(h, *kernel, *stride, *pad, *out_pad)
                .map_err(|e| e.to_string())?;
            let ow = nn::transpose_output_dim(w, *kernel, *stride, *pad, *out_pad)
                .map_err(|e| e.to_string())?;
            Ok(vec![*out_ch, oh, ow])
        }
        LayerSpec::BatchNorm { channels, .. } => {
            if shape.first() != Some(channels) {
                return Err(format!("batchnorm over {channels} channels, got {shape:?}"));
            }
            Ok(shape.to_vec())
        }
        LayerSpec::Activation(_) | LayerSpec::Dropout { .. } => Ok(shape.to_vec()),
        LayerSpec::MaxPool { kernel, stride } => {
            let [c, h, w] =
                three(shape).ok_or_else(|| format!("maxpool expects [c,h,w], got {shape:?}"))?;
            if h < *kernel || w < *kernel {
                return Err(format!("maxpool window {kernel} exceeds {h}x{w}"));
            }
            Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
        }
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
    }
}

fn three(shape: &[usize]) -> Option<[usize; 3]> {
    if shape.len() == 3 {
        Some([shape[0], shape[1], shape[2]])
    } else {
        None
    }
}

/// Checks a generator or discriminator spec against the stability
/// guidelines; other roles pass unconditionally (the MLP baselines exist to
/// violate them on purpose).
pub fn validate_guidelines(spec: &NetworkSpec) -> std::result::Result<(), GuidelineViolation> {
    match spec.role {
        NetworkRole::Generator => validate_generator(spec),
        NetworkRole::Discriminator => validate_discriminator(spec),
        _ => Ok(()),
    }
}

fn violation(guideline: Guideline, layer_index: usize, detail: impl Into<String>) -> GuidelineViolation {
    GuidelineViolation {
        guideline,
        layer_index,
        detail: detail.into(),
    }
}

/// Index of the last layer that produces features (ignores trailing
/// reshapes), used to identify the output stage.
fn last_feature_layer(spec: &NetworkSpec) -> Option<usize> {
    spec.layers
        .iter()
        .rposition(|l| !matches!(l, LayerSpec::Reshape { .. }))
}

// Guideline checks run as separate passes in priority order (pooling, fully
// connected, activations, batchnorm) so that an architecture is diagnosed by
// its defining violation: a pooling stage also perturbs batchnorm adjacency,
// and pooling is the right name for that rejection.

fn validate_generator(spec: &NetworkSpec) -> std::result::Result<(), GuidelineViolation> {
    for (i, layer) in spec.layers.iter().enumerate() {
        if matches!(layer, LayerSpec::MaxPool { .. }) {
            return Err(violation(
                Guideline::NoPooling,
                i,
                "pooling layer in a generator",
            ));
        }
    }
    for (i, layer) in spec.layers.iter().enumerate() {
        if matches!(layer, LayerSpec::Dense { .. }) && i > 0 {
            return Err(violation(
                Guideline::NoFullyConnectedHidden,
                i,
                "fully connected layer beyond the input projection",
            ));
        }
    }
    let last = last_feature_layer(spec).unwrap_or(0);
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::Activation(act) = layer {
            match (i == last, act) {
                (true, Activation::Tanh) | (false, Activation::Relu) => {}
                (true, other) => {
                    return Err(violation(
                        Guideline::GeneratorActivations,
                        i,
                        format!("generator output activation {other:?}, expected tanh"),
                    ));
                }
                (false, other) => {
                    return Err(violation(
                        Guideline::GeneratorActivations,
                        i,
                        format!("generator hidden activation {other:?}, expected ReLU"),
                    ));
                }
            }
        }
    }
    // Batchnorm pass. The output conv is exempt; everything else eligible
    // (the projection included) must be followed by batchnorm.
    let output_conv = spec
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::ConvTranspose { .. }));
    for (i, layer) in spec.layers.iter().enumerate() {
        let eligible = match layer {
            LayerSpec::Conv { .. } | LayerSpec::ConvTranspose { .. } => true,
            LayerSpec::Dense { .. } => i == 0,
            _ => false,
        };
        if !eligible {
            continue;
        }
        let exempt = Some(i) == output_conv;
        // The projection is reshaped before normalization; look through it.
        let mut j = i + 1;
        while matches!(spec.layers.get(j), Some(LayerSpec::Reshape { .. })) {
            j += 1;
        }
        let has_bn = matches!(spec.layers.get(j), Some(LayerSpec::BatchNorm { .. }));
        if !exempt && !has_bn {
            return Err(violation(
                Guideline::UseBatchNorm,
                i,
                "missing batchnorm after a hidden generator stage",
            ));
        }
        if exempt && has_bn {
            return Err(violation(
                Guideline::UseBatchNorm,
                j,
                "batchnorm on the generator output layer",
            ));
        }
    }
    Ok(())
}

fn validate_discriminator(spec: &NetworkSpec) -> std::result::Result<(), GuidelineViolation> {
    for (i, layer) in spec.layers.iter().enumerate() {
        if matches!(layer, LayerSpec::MaxPool { .. }) {
            return Err(violation(
                Guideline::NoPooling,
                i,
                "pooling layer in a discriminator",
            ));
        }
    }
    // Only the final dense head (the single sigmoid unit) is allowed.
    let n_dense = spec
        .layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::Dense { .. }))
        .count();
    let mut dense_seen = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::Dense { out_dim, .. } = layer {
            dense_seen += 1;
            if dense_seen < n_dense || *out_dim != 1 {
                return Err(violation(
                    Guideline::NoFullyConnectedHidden,
                    i,
                    "fully connected hidden layer in a discriminator",
                ));
            }
        }
    }
    let last = last_feature_layer(spec).unwrap_or(0);
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::Activation(act) = layer {
            match (i == last, act) {
                (true, Activation::Sigmoid) | (false, Activation::LeakyRelu { .. }) => {}
                (true, other) => {
                    return Err(violation(
                        Guideline::DiscriminatorActivations,
                        i,
                        format!("discriminator output activation {other:?}, expected sigmoid"),
                    ));
                }
                (false, other) => {
                    return Err(violation(
                        Guideline::DiscriminatorActivations,
                        i,
                        format!("discriminator activation {other:?}, expected LeakyReLU"),
                    ));
                }
            }
        }
    }
    // Batchnorm pass: the input conv is exempt, later convs are not.
    let first_conv = spec
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::ConvTranspose { .. }));
    for (i, layer) in spec.layers.iter().enumerate() {
        if !matches!(layer, LayerSpec::Conv { .. } | LayerSpec::ConvTranspose { .. }) {
            continue;
        }
        let exempt = Some(i) == first_conv;
        let has_bn = matches!(spec.layers.get(i + 1), Some(LayerSpec::BatchNorm { .. }));
        if !exempt && !has_bn {
            return Err(violation(
                Guideline::UseBatchNorm,
                i,
                "missing batchnorm after a hidden discriminator stage",
            ));
        }
        if exempt && has_bn {
            return Err(violation(
                Guideline::UseBatchNorm,
                i + 1,
                "batchnorm on the discriminator input layer",
            ));
        }
    }
    Ok(())
}

/// Template hyperparameters for one generator/discriminator pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub z_dim: usize,
    /// Square image extent; a power-of-two multiple of 4 in [8, 64]. The
    /// paper-scale sizes are 32 and 64; 8 and 16 exist for fast verification.
    pub image_size: usize,
    pub image_channels: usize,
    /// Feature maps at the largest non-output spatial extent; channel counts
    /// double with each halving of extent.
    pub base_feature_maps: usize,
    /// When false, batchnorm layers carry no learned scale/shift.
    pub batchnorm_affine: bool,
    /// Class count for the conditional variant. The one-hot class vector is
    /// concatenated to z for the generator and appended as constant feature
    /// planes to the discriminator input.
    pub conditional_classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            z_dim: 100,
            image_size: 64,
            image_channels: 3,
            base_feature_maps: 128,
            batchnorm_affine: true,
            conditional_classes: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 {
            return Err(Error::config("z_dim must be at least 1"));
        }
        if !matches!(self.image_size, 8 | 16 | 32 | 64) {
            return Err(Error::config(format!(
                "image_size must be one of 8, 16, 32, 64; got {}",
                self.image_size
            )));
        }
        if self.image_channels == 0 || self.base_feature_maps == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.conditional_classes == Some(0) {
            return Err(Error::config("conditional_classes must be at least 1"));
        }
        Ok(())
    }

    /// Number of stride-2 stages between the 4x4 seed and the image.
    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    /// Extra input dimensions/planes carried by the conditional variant.
    pub fn classes(&self) -> usize {
        self.conditional_classes.unwrap_or(0)
    }

    /// Generator input width: z plus the one-hot class block.
    pub fn g_input_dim(&self) -> usize {
        self.z_dim + self.classes()
    }

    /// Discriminator input channels: image plus one constant plane per class.
    pub fn d_input_channels(&self) -> usize {
        self.image_channels + self.classes()
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
}

/// A spec bound to parameters and batchnorm running statistics.
#[derive(Debug, Clone)]
pub struct Network<S: Scalar> {
    pub spec: NetworkSpec,
    pub params: Vec<Param<S>>,
    /// One state per BatchNorm layer, in layer order.
    pub bn_states: Vec<BatchNormState<S>>,
}

/// Result of one forward pass on a tape.
pub struct ForwardOutput<S: Scalar> {
    pub output: Var,
    /// Post-activation feature maps of the hidden stages, in order. For a
    /// discriminator this is each conv stage's rectified output; for a
    /// generator, each upsampling stage's (including the projection).
    pub stage_activations: Vec<Var>,
    /// Tape vars of every parameter, aligned with `params`.
    pub param_vars: Vec<Var>,
    /// Batch statistics per BatchNorm layer index, training mode only.
    pub batch_stats: Vec<(usize, BnBatchStats<S>)>,
}

impl<S: Scalar> Network<S> {
    /// Allocates zeroed parameters and fresh batchnorm states for a spec.
    /// Checks the shape chain; guideline validation is the caller's concern
    /// (the builders below always produce compliant specs).
    pub fn from_spec(spec: NetworkSpec) -> Result<Network<S>> {
        spec.output_shape()?;
        let mut params = Vec::new();
        let mut bn_states = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense {
                    in_dim,
                    out_dim,
                    bias,
                } => {
                    params.push(Param {
                        name: format!("layer{i}.weight"),
                        value: Tensor::zeros(&[*in_dim, *out_dim]),
                    });
                    if *bias {
                        params.push(Param {
                            name: format!("layer{i}.bias"),
                            value: Tensor::zeros(&[*out_dim]),
                        });
                    }
                }
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    bias,
                    ..
                } => {
                    params.push(Param {
                        name: format!("layer{i}.kernel"),
                        value: Tensor::zeros(&[*out_ch, *in_ch, *kernel, *kernel]),
                    });
                    if *bias {
                        params.push(Param {
                            name: format!("layer{i}.bias"),
                            value: Tensor::zeros(&[*out_ch]),
                        });
                    }
                }
                LayerSpec::ConvTranspose {
                    in_ch,
                    out_ch,
                    kernel,
                    bias,
                    ..
                } => {
                    params.push(Param {
                        name: format!("layer{i}.kernel"),
                        value: Tensor::zeros(&[*in_ch, *out_ch, *kernel, *kernel]),
                    });
                    if *bias {
                        params.push(Param {
                            name: format!("layer{i}.bias"),
                            value: Tensor::zeros(&[*out_ch]),
                        });
                    }
                }
                LayerSpec::BatchNorm { channels, affine } => {
                    if *affine {
                        params.push(Param {
                            name: format!("layer{i}.gamma"),
                            value: Tensor::zeros(&[*channels]),
                        });
                        params.push(Param {
                            name: format!("layer{i}.beta"),
                            value: Tensor::zeros(&[*channels]),
                        });
                    }
                    bn_states.push(BatchNormState::new(*channels));
                }
                _ => {}
            }
        }
        Ok(Network {
            spec,
            params,
            bn_states,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Draws fresh parameters: kernels and dense weights from N(0, std^2),
    /// biases and batchnorm shifts zero, batchnorm scales one. Draw order is
    /// parameter order, so one seed fixes every value.
    pub fn init_weights(&mut self, std: f64, rng: &mut Rng) {
        for p in &mut self.params {
            let kind = p.name.rsplit('.').next().unwrap_or("");
            match kind {
                "weight" | "kernel" => rng.fill_normal(p.value.data_mut(), 0.0, std),
                "gamma" => p.value.data_mut().fill(S::ONE),
                _ => p.value.data_mut().fill(S::ZERO),
            }
        }
    }

    /// Folds one forward pass's batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, stats: &[(usize, BnBatchStats<S>)]) {
        let bn_layers: Vec<usize> = self
            .spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::BatchNorm { .. }))
            .map(|(i, _)| i)
            .collect();
        for (layer_idx, batch) in stats {
            if let Some(slot) = bn_layers.iter().position(|i| i == layer_idx) {
                self.bn_states[slot].update(batch, BN_MOMENTUM);
            }
        }
    }

    /// Records the network onto a tape.
    ///
    /// `train_params` decides whether parameter leaves receive gradients.
    /// `rng` feeds dropout layers (training mode only). `channel_mask`, when
    /// set to `(stage, mask)`, zeroes the masked channels of that hidden
    /// stage's activation before the rest of the network runs; it is how
    /// filter-removal experiments suppress chosen generator features.
    pub fn forward_full(
        &self,
        tape: &mut Tape<S>,
        input: Var,
        mode: Mode,
        train_params: bool,
        mut rng: Option<&mut Rng>,
        channel_mask: Option<(usize, &[bool])>,
    ) -> Result<ForwardOutput<S>> {
        let per_sample = &self.spec.input_shape;
        let in_shape = tape.value(input).shape().to_vec();
        if in_shape.len() != per_sample.len() + 1 || in_shape[1..] != per_sample[..] {
            return Err(Error::shape(format!(
                "{} expects [n, {per_sample:?}] input, got {in_shape:?}",
                self.spec.name
            )));
        }
        let n = in_shape[0];

        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), train_params))
            .collect();

        // Which activation output is the network's final one (trailing
        // reshapes aside): excluded from stage_activations.
        let final_act = last_feature_layer(&self.spec).filter(|&i| {
            matches!(self.spec.layers[i], LayerSpec::Activation(_))
        });

        let mut cur = input;
        let mut pi = 0usize;
        let mut bn_slot = 0usize;
        let mut stage_activations = Vec::new();
        let mut batch_stats = Vec::new();

        for (li, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { bias, .. } => {
                    let w = param_vars[pi];
                    pi += 1;
                    cur = tape.matmul(cur, w)?;
                    if *bias {
                        let b = param_vars[pi];
                        pi += 1;
                        cur = tape.add_dim1(cur, b)?;
                    }
                }
                LayerSpec::Reshape { shape } => {
                    let mut full = vec![n];
                    full.extend_from_slice(shape);
                    cur = tape.reshape(cur, &full)?;
                }
                LayerSpec::Conv { stride, pad, bias, .. } => {
                    let k = param_vars[pi];
                    pi += 1;
                    cur = nn::conv2d(tape, cur, k, *stride, *pad)?;
                    if *bias {
                        let b = param_vars[pi];
                        pi += 1;
                        cur = tape.add_dim1(cur, b)?;
                    }
                }
                LayerSpec::ConvTranspose {
                    stride,
                    pad,
                    out_pad,
                    bias,
                    ..
                } => {
                    let k = param_vars[pi];
                    pi += 1;
                    cur = nn::conv2d_transpose(tape, cur, k, *stride, *pad, *out_pad)?;
                    if *bias {
                        let b = param_vars[pi];
                        pi += 1;
                        cur = tape.add_dim1(cur, b)?;
                    }
                }
                LayerSpec::BatchNorm { affine, .. } => {
                    let (gamma, beta) = if *affine {
                        let g = param_vars[pi];
                        let b = param_vars[pi + 1];
                        pi += 2;
                        (Some(g), Some(b))
                    } else {
                        (None, None)
                    };
                    let (out, stats) = nn::batchnorm(
                        tape,
                        cur,
                        gamma,
                        beta,
                        &self.bn_states[bn_slot],
                        mode,
                        BN_EPS,
                    )?;
                    cur = out;
                    if let Some(s) = stats {
                        batch_stats.push((li, s));
                    }
                    bn_slot += 1;
                }
                LayerSpec::Activation(act) => {
                    cur = match act {
                        Activation::Relu => tape.relu(cur),
                        Activation::LeakyRelu { slope } => tape.leaky_relu(cur, *slope),
                        Activation::Tanh => tape.tanh(cur),
                        Activation::Sigmoid => tape.sigmoid(cur),
                    };
                    if Some(li) != final_act {
                        if let Some((stage, mask)) = channel_mask {
                            if stage == stage_activations.len() {
                                cur = apply_channel_mask(tape, cur, mask)?;
                            }
                        }
                        stage_activations.push(cur);
                    }
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    cur = nn::maxpool2d(tape, cur, *kernel, *stride)?;
                }
                LayerSpec::Dropout { rate } => {
                    let r = rng.as_deref_mut().ok_or_else(|| {
                        Error::config("dropout layer needs an rng in training mode")
                    });
                    cur = match mode {
                        Mode::Train => nn::dropout(tape, cur, *rate, mode, r?)?,
                        Mode::Eval => cur,
                    };
                }
                LayerSpec::Flatten => {
                    let len = tape.value(cur).len() / n;
                    cur = tape.reshape(cur, &[n, len])?;
                }
            }
        }

        Ok(ForwardOutput {
            output: cur,
            stage_activations,
            param_vars,
            batch_stats,
        })
    }

    /// Inference forward: parameters frozen, no dropout noise.
    pub fn forward(&self, tape: &mut Tape<S>, input: Var, mode: Mode) -> Result<ForwardOutput<S>> {
        self.forward_full(tape, input, mode, false, None, None)
    }
}

fn apply_channel_mask<S: Scalar>(tape: &mut Tape<S>, x: Var, mask: &[bool]) -> Result<Var> {
    let channels = tape.value(x).shape()[1];
    if mask.len() != channels {
        return Err(Error::shape(format!(
            "channel mask of {} entries for {channels} channels",
            mask.len()
        )));
    }
    let vals: Vec<S> = mask
        .iter()
        .map(|&keep| if keep { S::ONE } else { S::ZERO })
        .collect();
    let m = tape.constant(Tensor::from_vec(&[channels], vals)?);
    tape.mul_dim1(x, m)
}

/// Draws a `[n, z_dim]` batch from the generator's prior: uniform on
/// [-1, 1] per coordinate.
pub fn sample_z<S: Scalar>(rng: &mut Rng, n: usize, z_dim: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(&[n, z_dim]);
    rng.fill_uniform(t.data_mut(), -1.0, 1.0);
    t
}

/// Builds the template generator: projection to a 4x4 seed, then stride-2
/// fractionally-strided convolutions doubling the extent and halving the
/// feature maps each stage, batchnorm and ReLU between stages, tanh output.
pub fn build_generator(cfg: &ModelConfig) -> Result<NetworkSpec> {
    cfg.validate()?;
    let stages = cfg.stages();
    let affine = cfg.batchnorm_affine;
    let c0 = cfg.base_feature_maps << (stages - 1);
    let mut layers = vec![
        LayerSpec::Dense {
            in_dim: cfg.g_input_dim(),
            out_dim: c0 * 16,
            bias: false,
        },
        LayerSpec::Reshape {
            shape: vec![c0, 4, 4],
        },
        LayerSpec::BatchNorm {
            channels: c0,
            affine,
        },
        LayerSpec::Activation(Activation::Relu),
    ];
    let mut ch = c0;
    for _ in 1..stages {
        let out = ch / 2;
        layers.push(LayerSpec::ConvTranspose {
            in_ch: ch,
            out_ch: out,
            kernel: 5,
            stride: 2,
            pad: 2,
            out_pad: 1,
            bias: false,
        });
        layers.push(LayerSpec::BatchNorm {
            channels: out,
            affine,
        });
        layers.push(LayerSpec::Activation(Activation::Relu));
        ch = out;
    }
    layers.push(LayerSpec::ConvTranspose {
        in_ch: ch,
        out_ch: cfg.image_channels,
        kernel: 5,
        stride: 2,
        pad: 2,
        out_pad: 1,
        bias: true,
    });
    layers.push(LayerSpec::Activation(Activation::Tanh));
    let spec = NetworkSpec {
        name: "generator".into(),
        role: NetworkRole::Generator,
        input_shape: vec![cfg.g_input_dim()],
        layers,
    };
    debug_assert!(validate_guidelines(&spec).is_ok());
    Ok(spec)
}

/// Builds the template discriminator: stride-2 convolutions doubling the
/// feature maps, LeakyReLU throughout, batchnorm except on the input stage,
/// flattened into a single sigmoid unit.
pub fn build_discriminator(cfg: &ModelConfig) -> Result<NetworkSpec> {
    cfg.validate()?;
    let stages = cfg.stages();
    let affine = cfg.batchnorm_affine;
    let mut layers = vec![
        LayerSpec::Conv {
            in_ch: cfg.d_input_channels(),
            out_ch: cfg.base_feature_maps,
            kernel: 5,
            stride: 2,
            pad: 2,
            bias: true,
        },
        LayerSpec::Activation(Activation::LeakyRelu { slope: LEAK_SLOPE }),
    ];
    let mut ch = cfg.base_feature_maps;
    for _ in 1..stages {
        let out = ch * 2;
        layers.push(LayerSpec::Conv {
            in_ch: ch,
            out_ch: out,
            kernel: 5,
            stride: 2,
            pad: 2,
            bias: false,
        });
        layers.push(LayerSpec::BatchNorm {
            channels: out,
            affine,
        });
        layers.push(LayerSpec::Activation(Activation::LeakyRelu { slope: LEAK_SLOPE }));
        ch = out;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        in_dim: ch * 16,
        out_dim: 1,
        bias: true,
    });
    layers.push(LayerSpec::Activation(Activation::Sigmoid));
    let spec = NetworkSpec {
        name: "discriminator".into(),
        role: NetworkRole::Discriminator,
        input_shape: vec![
            cfg.d_input_channels(),
            cfg.image_size,
            cfg.image_size,
        ],
        layers,
    };
    debug_assert!(validate_guidelines(&spec).is_ok());
    Ok(spec)
}

/// Permutation-invariant baseline generator: dense layers on flattened
/// pixels. Exists for protocol comparisons, not for image quality.
pub fn build_mlp_generator(cfg: &ModelConfig, hidden: usize) -> Result<NetworkSpec> {
    cfg.validate()?;
    let out_dim = cfg.image_channels * cfg.image_size * cfg.image_size;
    let affine = cfg.batchnorm_affine;
    let layers = vec![
        LayerSpec::Dense {
            in_dim: cfg.g_input_dim(),
            out_dim: hidden,
            bias: false,
        },
        LayerSpec::BatchNorm {
            channels: hidden,
            affine,
        },
        LayerSpec::Activation(Activation::Relu),
        LayerSpec::Dense {
            in_dim: hidden,
            out_dim: hidden,
            bias: false,
        },
        LayerSpec::BatchNorm {
            channels: hidden,
            affine,
        },
        LayerSpec::Activation(Activation::Relu),
        LayerSpec::Dense {
            in_dim: hidden,
            out_dim,
            bias: true,
        },
        LayerSpec::Activation(Activation::Tanh),
        LayerSpec::Reshape {
            shape: vec![cfg.image_channels, cfg.image_size, cfg.image_size],
        },
    ];
    Ok(NetworkSpec {
        name: "mlp_generator".into(),
        role: NetworkRole::MlpGenerator,
        input_shape: vec![cfg.g_input_dim()],
        layers,
    })
}

/// Permutation-invariant baseline discriminator on flattened pixels. The
/// one-hot class block, when conditional, is appended to the flat vector.
pub fn build_mlp_discriminator(cfg: &ModelConfig, hidden: usize) -> Result<NetworkSpec> {
    cfg.validate()?;
    let in_dim = cfg.image_channels * cfg.image_size * cfg.image_size + cfg.classes();
    let affine = cfg.batchnorm_affine;
    let layers = vec![
        LayerSpec::Dense {
            in_dim,
            out_dim: hidden,
            bias: true,
        },
        LayerSpec::Activation(Activation::LeakyRelu { slope: LEAK_SLOPE }),
        LayerSpec::Dense {
            in_dim: hidden,
            out_dim: hidden,
            bias: false,
        },
        LayerSpec::BatchNorm {
            channels: hidden,
            affine,
        },
        LayerSpec::Activation(Activation::LeakyRelu { slope: LEAK_SLOPE }),
        LayerSpec::Dense {
            in_dim: hidden,
            out_dim: 1,
            bias: true,
        },
        LayerSpec::Activation(Activation::Sigmoid),
    ];
    Ok(NetworkSpec {
        name: "mlp_discriminator".into(),
        role: NetworkRole::MlpDiscriminator,
        input_shape: vec![in_dim],
        layers,
    })
}

/// Denoising autoencoder for semantic hashing: in -> code (ReLU, dropout
/// regularized) -> in, linear reconstruction.
pub fn build_autoencoder(in_dim: usize, code_dim: usize, dropout: f64) -> Result<NetworkSpec> {
    if in_dim == 0 || code_dim == 0 {
        return Err(Error::config("autoencoder dims must be positive"));
    }
    Ok(NetworkSpec {
        name: "autoencoder".into(),
        role: NetworkRole::Autoencoder,
        input_shape: vec![in_dim],
        layers: vec![
            LayerSpec::Dense {
                in_dim,
                out_dim: code_dim,
                bias: true,
            },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Dropout { rate: dropout },
            LayerSpec::Dense {
                in_dim: code_dim,
                out_dim: in_dim,
                bias: true,
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg32() -> ModelConfig {
        ModelConfig {
            z_dim: 100,
            image_size: 32,
            image_channels: 1,
            base_feature_maps: 8,
            batchnorm_affine: true,
            conditional_classes: None,
        }
    }

    #[test]
    fn generator_shape_chain_64() {
        let cfg = ModelConfig::default(); // z=100, 64x64x3, base 128
        let spec = build_generator(&cfg).unwrap();
        assert_eq!(spec.input_shape, vec![100]);
        assert_eq!(spec.output_shape().unwrap(), vec![3, 64, 64]);
        // four fractionally-strided stages from the 4x4 seed
        let tconvs = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::ConvTranspose { .. }))
            .count();
        assert_eq!(tconvs, 4);
        // projection reaches 4*4*(base*8)
        match &spec.layers[0] {
            LayerSpec::Dense { out_dim, .. } => assert_eq!(*out_dim, 4 * 4 * 1024),
            other => panic!("unexpected first layer {other:?}"),
        }
    }

    #[test]
    fn generator_shape_chain_32_has_three_stages() {
        let spec = build_generator(&cfg32()).unwrap();
        assert_eq!(spec.output_shape().unwrap(), vec![1, 32, 32]);
        let tconvs = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::ConvTranspose { .. }))
            .count();
        assert_eq!(tconvs, 3);
    }

    #[test]
    fn discriminator_mirrors_the_generator_chain() {
        let mut cfg = ModelConfig::default();
        cfg.base_feature_maps = 64;
        let spec = build_discriminator(&cfg).unwrap();
        assert_eq!(spec.output_shape().unwrap(), vec![1]);
        // activation shape chain: 64@32^2, 128@16^2, 256@8^2, 512@4^2
        let mut shape = spec.input_shape.clone();
        let mut conv_shapes = Vec::new();
        for layer in &spec.layers {
            shape = shape_after(layer, &shape).unwrap();
            if matches!(layer, LayerSpec::Conv { .. }) {
                conv_shapes.push(shape.clone());
            }
        }
        assert_eq!(
            conv_shapes,
            vec![
                vec![64, 32, 32],
                vec![128, 16, 16],
                vec![256, 8, 8],
                vec![512, 4, 4]
            ]
        );
    }

    #[test]
    fn parameter_count_matches_the_closed_form() {
        // Hand sum for z=100, size=32, ch=1, base=8 (c0 = 32):
        //   dense 100 -> 512:        51200
        //   bn(32) gamma+beta:          64
        //   tconv 32 -> 16 (5x5):    12800, bn(16): 32
        //   tconv 16 -> 8  (5x5):     3200, bn(8):  16
        //   tconv 8  -> 1  (5x5):      200, bias:    1
        let g = Network::<f32>::from_spec(build_generator(&cfg32()).unwrap()).unwrap();
        assert_eq!(g.param_count(), 51200 + 64 + 12800 + 32 + 3200 + 16 + 200 + 1);

        //   conv 1 -> 8:   200 + 8 bias
        //   conv 8 -> 16:  3200, bn(16): 32
        //   conv 16 -> 32: 12800, bn(32): 64
        //   dense 512 -> 1: 512 + 1 bias
        let d = Network::<f32>::from_spec(build_discriminator(&cfg32()).unwrap()).unwrap();
        assert_eq!(d.param_count(), 200 + 8 + 3200 + 32 + 12800 + 64 + 512 + 1);
    }

    #[test]
    fn param_names_are_unique_and_shapes_bound() {
        let net = Network::<f32>::from_spec(build_generator(&cfg32()).unwrap()).unwrap();
        let mut names: Vec<&str> = net.params.iter().map(|p| p.name.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), before);
        assert_eq!(net.param("layer0.weight").unwrap().shape(), &[100, 512]);
    }

    #[test]
    fn init_weights_hits_the_documented_distribution() {
        let mut net = Network::<f32>::from_spec(build_generator(&ModelConfig {
            base_feature_maps: 32,
            image_channels: 3,
            ..ModelConfig::default()
        })
        .unwrap())
        .unwrap();
        let mut rng = Rng::from_seed(7);
        net.init_weights(INIT_STD, &mut rng);

        let mut n = 0usize;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for p in &net.params {
            let kind = p.name.rsplit('.').next().unwrap();
            match kind {
                "weight" | "kernel" => {
                    for v in p.value.data() {
                        n += 1;
                        sum += *v as f64;
                        sumsq += (*v as f64) * (*v as f64);
                    }
                }
                "gamma" => assert!(p.value.data().iter().all(|&v| v == 1.0)),
                _ => assert!(p.value.data().iter().all(|&v| v == 0.0)),
            }
        }
        assert!(n >= 100_000, "need a big sample, got {n}");
        let mean = sum / n as f64;
        let std = (sumsq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 2e-4, "mean {mean}");
        assert!((0.0198..=0.0202).contains(&std), "std {std}");

        // determinism: same seed, same bits
        let mut net2 = Network::<f32>::from_spec(net.spec.clone()).unwrap();
        let mut rng2 = Rng::from_seed(7);
        net2.init_weights(INIT_STD, &mut rng2);
        for (a, b) in net.params.iter().zip(&net2.params) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn generator_forward_bounds_and_determinism() {
        let cfg = cfg32();
        let mut net = Network::<f32>::from_spec(build_generator(&cfg).unwrap()).unwrap();
        net.init_weights(INIT_STD, &mut Rng::from_seed(1));
        let z = Tensor::zeros(&[2, 100]);

        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = net.forward(&mut tape, zv, Mode::Eval).unwrap();
        let img = tape.value(out.output).clone();
        assert_eq!(img.shape(), &[2, 1, 32, 32]);
        assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // stage activations: projection + 2 hidden upsampling stages
        assert_eq!(out.stage_activations.len(), 3);

        let mut tape2 = Tape::new();
        let zv2 = tape2.constant(z);
        let out2 = net.forward(&mut tape2, zv2, Mode::Eval).unwrap();
        assert_eq!(img.data(), tape2.value(out2.output).data());
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let cfg = cfg32();
        let mut net = Network::<f32>::from_spec(build_discriminator(&cfg).unwrap()).unwrap();
        net.init_weights(INIT_STD, &mut Rng::from_seed(2));
        let mut x = Tensor::zeros(&[3, 1, 32, 32]);
        Rng::from_seed(3).fill_uniform(x.data_mut(), -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = net.forward(&mut tape, xv, Mode::Eval).unwrap();
        let p = tape.value(out.output);
        assert_eq!(p.shape(), &[3, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // one post-activation map per conv stage
        assert_eq!(out.stage_activations.len(), 3);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = Network::<f32>::from_spec(build_discriminator(&cfg32()).unwrap()).unwrap();
        let mut tape = Tape::new();
        let bad = tape.constant(Tensor::zeros(&[2, 1, 16, 16]));
        assert!(net.forward(&mut tape, bad, Mode::Eval).is_err());
    }

    #[test]
    fn conditional_config_grows_both_inputs() {
        let mut cfg = cfg32();
        cfg.conditional_classes = Some(10);
        let g = build_generator(&cfg).unwrap();
        assert_eq!(g.input_shape, vec![110]);
        assert_eq!(g.output_shape().unwrap(), vec![1, 32, 32]);
        let d = build_discriminator(&cfg).unwrap();
        assert_eq!(d.input_shape, vec![11, 32, 32]);
        assert_eq!(d.output_shape().unwrap(), vec![1]);
    }

    #[test]
    fn affine_free_batchnorm_drops_the_affine_params() {
        let mut cfg = cfg32();
        cfg.batchnorm_affine = false;
        let net = Network::<f32>::from_spec(build_generator(&cfg).unwrap()).unwrap();
        assert!(net.params.iter().all(|p| !p.name.ends_with("gamma")));
        assert!(net.params.iter().all(|p| !p.name.ends_with("beta")));
        assert_eq!(net.bn_states.len(), 3);
    }

    #[test]
    fn validator_accepts_the_template_pair() {
        for size in [8, 16, 32, 64] {
            let cfg = ModelConfig {
                image_size: size,
                base_feature_maps: 8,
                image_channels: 1,
                ..ModelConfig::default()
            };
            assert!(validate_guidelines(&build_generator(&cfg).unwrap()).is_ok());
            assert!(validate_guidelines(&build_discriminator(&cfg).unwrap()).is_ok());
        }
    }

    #[test]
    fn validator_rejects_pooling() {
        let mut spec = build_discriminator(&cfg32()).unwrap();
        // replace the second conv stage with stride-1 conv + maxpool
        spec.layers[2] = LayerSpec::Conv {
            in_ch: 8,
            out_ch: 16,
            kernel: 5,
            stride: 1,
            pad: 2,
            bias: false,
        };
        spec.layers.insert(3, LayerSpec::MaxPool { kernel: 2, stride: 2 });
        let v = validate_guidelines(&spec).unwrap_err();
        assert_eq!(v.guideline, Guideline::NoPooling);
    }

    #[test]
    fn validator_rejects_hidden_fully_connected_layers() {
        let mut spec = build_discriminator(&cfg32()).unwrap();
        let flatten_at = spec
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Flatten))
            .unwrap();
        spec.layers.insert(
            flatten_at + 1,
            LayerSpec::Dense {
                in_dim: 512,
                out_dim: 512,
                bias: true,
            },
        );
        spec.layers.insert(
            flatten_at + 2,
            LayerSpec::Activation(Activation::LeakyRelu { slope: 0.2 }),
        );
        let v = validate_guidelines(&spec).unwrap_err();
        assert_eq!(v.guideline, Guideline::NoFullyConnectedHidden);

        let mut gspec = build_generator(&cfg32()).unwrap();
        gspec.layers.insert(
            4,
            LayerSpec::Dense {
                in_dim: 512,
                out_dim: 512,
                bias: false,
            },
        );
        let v = validate_guidelines(&gspec).unwrap_err();
        assert_eq!(v.guideline, Guideline::NoFullyConnectedHidden);
    }

    #[test]
    fn validator_rejects_missing_batchnorm() {
        let mut spec = build_generator(&cfg32()).unwrap();
        let bn_at = spec
            .layers
            .iter()
            .enumerate()
            .position(|(i, l)| i > 3 && matches!(l, LayerSpec::BatchNorm { .. }))
            .unwrap();
        spec.layers.remove(bn_at);
        let v = validate_guidelines(&spec).unwrap_err();
        assert_eq!(v.guideline, Guideline::UseBatchNorm);
        assert!(v.detail.contains("missing"), "{v}");
    }

    #[test]
    fn validator_rejects_batchnorm_on_the_exempt_layers() {
        // generator output
        let mut gspec = build_generator(&cfg32()).unwrap();
        let out_conv = gspec
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::ConvTranspose { .. }))
            .unwrap();
        gspec.layers.insert(
            out_conv + 1,
            LayerSpec::BatchNorm {
                channels: 1,
                affine: true,
            },
        );
        let v = validate_guidelines(&gspec).unwrap_err();
        assert_eq!(v.guideline, Guideline::UseBatchNorm);
        assert!(v.detail.contains("output"), "{v}");

        // discriminator input
        let mut dspec = build_discriminator(&cfg32()).unwrap();
        dspec.layers.insert(
            1,
            LayerSpec::BatchNorm {
                channels: 8,
                affine: true,
            },
        );
        let v = validate_guidelines(&dspec).unwrap_err();
        assert_eq!(v.guideline, Guideline::UseBatchNorm);
        assert!(v.detail.contains("input"), "{v}");
    }

    #[test]
    fn validator_rejects_wrong_activations() {
        let mut gspec = build_generator(&cfg32()).unwrap();
        gspec.layers[3] = LayerSpec::Activation(Activation::Sigmoid);
        let v = validate_guidelines(&gspec).unwrap_err();
        assert_eq!(v.guideline, Guideline::GeneratorActivations);

        let mut dspec = build_discriminator(&cfg32()).unwrap();
        dspec.layers[1] = LayerSpec::Activation(Activation::Relu);
        let v = validate_guidelines(&dspec).unwrap_err();
        assert_eq!(v.guideline, Guideline::DiscriminatorActivations);
    }

    #[test]
    fn spec_text_round_trips() {
        for spec in [
            build_generator(&cfg32()).unwrap(),
            build_discriminator(&ModelConfig {
                conditional_classes: Some(10),
                batchnorm_affine: false,
                ..cfg32()
            })
            .unwrap(),
            build_mlp_generator(&cfg32(), 256).unwrap(),
            build_autoencoder(3072, 128, 0.5).unwrap(),
        ] {
            let text = spec.to_text();
            let parsed = NetworkSpec::from_text(&text).unwrap();
            assert_eq!(spec, parsed, "round trip failed for:\n{text}");
        }
    }

    #[test]
    fn spec_text_parse_errors_carry_line_numbers() {
        let bad = "network g\nrole generator\ninput 100\nlayer dense in=100 out=bad bias=false\nend\n";
        let err = NetworkSpec::from_text(bad).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        assert!(NetworkSpec::from_text("network g\n").is_err());
    }

    #[test]
    fn channel_mask_zeroes_selected_stage_channels() {
        let cfg = cfg32();
        let mut net = Network::<f32>::from_spec(build_generator(&cfg).unwrap()).unwrap();
        net.init_weights(INIT_STD, &mut Rng::from_seed(5));
        let mut z = Tensor::zeros(&[2, 100]);
        Rng::from_seed(6).fill_uniform(z.data_mut(), -1.0, 1.0);

        // stage 1 of the 32-pixel generator has 16 channels; drop half
        let mask: Vec<bool> = (0..16).map(|c| c % 2 == 0).collect();
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let out = net
            .forward_full(&mut tape, zv, Mode::Eval, false, None, Some((1, &mask)))
            .unwrap();
        let act = tape.value(out.stage_activations[1]);
        for n in 0..2 {
            for (c, &keep) in mask.iter().enumerate() {
                let mut sum = 0.0f64;
                for h in 0..8 {
                    for w in 0..8 {
                        sum += act.at4(n, c, h, w).abs() as f64;
                    }
                }
                if !keep {
                    assert_eq!(sum, 0.0, "channel {c} should be dropped");
                }
            }
        }
    }

    #[test]
    fn stage_shapes_match_a_recorded_forward() {
        let cfg = cfg32();
        for spec in [build_generator(&cfg).unwrap(), build_discriminator(&cfg).unwrap()] {
            let stages = spec.stage_shapes().unwrap();
            let net = Network::<f32>::from_spec(spec).unwrap();
            let mut tape = Tape::new();
            let input = tape.constant(Tensor::zeros(
                &[&[2usize][..], &net.spec.input_shape[..]].concat(),
            ));
            let out = net.forward(&mut tape, input, Mode::Eval).unwrap();
            assert_eq!(stages.len(), out.stage_activations.len());
            for (want, var) in stages.iter().zip(&out.stage_activations) {
                assert_eq!(tape.value(*var).shape()[1..], want[..]);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = cfg32();
        cfg.image_size = 48;
        assert!(build_generator(&cfg).is_err());
        cfg.image_size = 32;
        cfg.z_dim = 0;
        assert!(build_generator(&cfg).is_err());
    }
}
