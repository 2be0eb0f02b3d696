//! Layers, the squeeze-and-excitation channel attention module, backbones,
//! and the two classifier heads.
//!
//! The plain head computes `f2(relu(f1(F)))`. The attention head gates the
//! hidden layer with the attention vector before the nonlinearity:
//! `f2(relu(f1(F) * f_se(F)))`, and hands the attention matrix to the loss.

pub mod checkpoint;
mod init;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub use init::he_init;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    TinyCnn,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub input: InputShape,
    /// Width `D` of the hidden layer f1 and of the attention vector.
    pub hidden_dim: usize,
    pub classes: usize,
    /// Hidden widths of the MLP backbone; the last one is the feature dim `n`.
    pub mlp_widths: Vec<usize>,
}

impl ModelConfig {
    pub const TINY_CNN_CHANNELS: [usize; 2] = [8, 16];

    /// Feature dimensionality `n` of the flattened backbone output.
    pub fn feature_dim(&self) -> usize {
        match self.backbone {
            BackboneKind::TinyCnn => Self::TINY_CNN_CHANNELS[1] * (self.input.height / 4) * (self.input.width / 4),
            BackboneKind::Mlp => *self.mlp_widths.last().unwrap_or(&self.input.numel()),
        }
    }

    /// Width of the squeezed descriptor fed to the attention module.
    pub fn squeeze_dim(&self) -> usize {
        match self.backbone {
            BackboneKind::TinyCnn => Self::TINY_CNN_CHANNELS[1],
            BackboneKind::Mlp => self.feature_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden_dim == 0 || self.classes < 2 || self.input.numel() == 0 {
            return Err(NnError::Config(format!(
                "hidden_dim {} classes {} input {:?}",
                self.hidden_dim, self.classes, self.input
            )));
        }
        if self.backbone == BackboneKind::TinyCnn && (self.input.height < 4 || self.input.width < 4) {
            return Err(NnError::Config("TinyCNN needs inputs of at least 4x4".into()));
        }
        if self.mlp_widths.contains(&0) {
            return Err(NnError::Config("zero-width MLP layer".into()));
        }
        let n = self.squeeze_dim();
        let r = reduction_ratio(n);
        if n % r != 0 {
            return Err(NnError::Config(format!("attention input width {n} not divisible by reduction ratio {r}")));
        }
        Ok(())
    }
}

/// SE reduction ratio: 16 for wide inputs, 2 for narrow ones.
pub fn reduction_ratio(n: usize) -> usize {
    if n >= 32 {
        16
    } else {
        2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<T> {
    /// `[out x in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn he<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self { weight: he_init(&[outputs, inputs], inputs, rng), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Tensor::zeros(&[outputs, inputs]), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> LinearVars {
        LinearVars { weight: g.param(&self.weight), bias: g.param(&self.bias) }
    }
}

/// `x * W^T + b` on a graph.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, l: LinearVars) -> Result<Var, TensorError> {
    let wt = g.transpose(l.weight)?;
    let y = g.matmul(x, wt)?;
    g.add(y, l.bias)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `[out, in, 3, 3]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn he<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self { weight: he_init(&[outputs, inputs, 3, 3], inputs * 9, rng), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ConvVars {
        ConvVars { weight: g.param(&self.weight), bias: g.param(&self.bias) }
    }
}

/// Squeeze-and-excitation block: `sigmoid(fc_expand(relu(fc_reduce(s))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionModule<T> {
    pub fc_reduce: LinearLayer<T>,
    pub fc_expand: LinearLayer<T>,
    pub reduction: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CamVars {
    pub fc_reduce: LinearVars,
    pub fc_expand: LinearVars,
}

impl<T: Scalar> ChannelAttentionModule<T> {
    pub fn he<R: Rng>(inputs: usize, outputs: usize, reduction: usize, rng: &mut R) -> Result<Self, NnError> {
        check_reduction(inputs, reduction)?;
        let mid = inputs / reduction;
        Ok(Self {
            fc_reduce: LinearLayer::he(inputs, mid, rng),
            fc_expand: LinearLayer::he(mid, outputs, rng),
            reduction,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, reduction: usize) -> Result<Self, NnError> {
        check_reduction(inputs, reduction)?;
        let mid = inputs / reduction;
        Ok(Self { fc_reduce: LinearLayer::zeros(inputs, mid), fc_expand: LinearLayer::zeros(mid, outputs), reduction })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> CamVars {
        CamVars { fc_reduce: self.fc_reduce.bind(g), fc_expand: self.fc_expand.bind(g) }
    }
}

fn check_reduction(inputs: usize, reduction: usize) -> Result<(), NnError> {
    if reduction == 0 || inputs % reduction != 0 || inputs / reduction == 0 {
        return Err(NnError::Config(format!("attention input width {inputs} not divisible by reduction ratio {reduction}")));
    }
    Ok(())
}

/// Excitation over an already squeezed `[N x n]` descriptor.
pub fn squeeze_excite<T: Scalar>(g: &mut Graph<T>, squeezed: Var, cam: CamVars) -> Result<Var, TensorError> {
    let z = linear(g, squeezed, cam.fc_reduce)?;
    let z = g.relu(z)?;
    let z = linear(g, z, cam.fc_expand)?;
    g.sigmoid(z)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone<T> {
    TinyCnn { conv1: ConvLayer<T>, conv2: ConvLayer<T> },
    Mlp { layers: Vec<LinearLayer<T>> },
}

#[derive(Clone, Debug)]
pub enum BackboneVars {
    TinyCnn { conv1: ConvVars, conv2: ConvVars },
    Mlp { layers: Vec<LinearVars> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub cam: ChannelAttentionModule<T>,
    pub f1: LinearLayer<T>,
    pub f2: LinearLayer<T>,
}

/// Graph handles for one bound copy of [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub cam: CamVars,
    pub f1: LinearVars,
    pub f2: LinearVars,
}

impl ModelVars {
    /// All parameter handles, in [`ModelParams::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        match &self.backbone {
            BackboneVars::TinyCnn { conv1, conv2 } => {
                out.extend([conv1.weight, conv1.bias, conv2.weight, conv2.bias]);
            }
            BackboneVars::Mlp { layers } => {
                for l in layers {
                    out.extend([l.weight, l.bias]);
                }
            }
        }
        out.extend([
            self.cam.fc_reduce.weight,
            self.cam.fc_reduce.bias,
            self.cam.fc_expand.weight,
            self.cam.fc_expand.bias,
            self.f1.weight,
            self.f1.bias,
            self.f2.weight,
            self.f2.bias,
        ]);
        out
    }

    /// Inverse of [`ModelVars::all`] for a model of the given backbone.
    pub fn from_handles(backbone: &BackboneKind, mlp_layers: usize, handles: &[Var]) -> Result<Self, NnError> {
        let backbone_len = match backbone {
            BackboneKind::TinyCnn => 4,
            BackboneKind::Mlp => 2 * mlp_layers,
        };
        if handles.len() != backbone_len + 8 {
            return Err(NnError::Config(format!("expected {} parameter handles, got {}", backbone_len + 8, handles.len())));
        }
        let lin = |i: usize| LinearVars { weight: handles[i], bias: handles[i + 1] };
        let backbone = match backbone {
            BackboneKind::TinyCnn => BackboneVars::TinyCnn {
                conv1: ConvVars { weight: handles[0], bias: handles[1] },
                conv2: ConvVars { weight: handles[2], bias: handles[3] },
            },
            BackboneKind::Mlp => BackboneVars::Mlp { layers: (0..mlp_layers).map(|l| lin(2 * l)).collect() },
        };
        let b = backbone_len;
        Ok(Self {
            backbone,
            cam: CamVars { fc_reduce: lin(b), fc_expand: lin(b + 2) },
            f1: lin(b + 4),
            f2: lin(b + 6),
        })
    }
}

/// Outputs of the attention-gated head.
#[derive(Clone, Copy, Debug)]
pub struct CamForward {
    /// `P2`, `[N x K]`
    pub logits: Var,
    /// `C`, `[N x D]`
    pub attention: Var,
    /// `f1(F) * c`, before the relu, `[N x D]`
    pub gated_hidden: Var,
}

impl<T: Scalar> ModelParams<T> {
    /// He-initialized parameters drawn from `rng`.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self, NnError> {
        config.validate()?;
        let backbone = match config.backbone {
            BackboneKind::TinyCnn => {
                let [c1, c2] = ModelConfig::TINY_CNN_CHANNELS;
                Backbone::TinyCnn {
                    conv1: ConvLayer::he(config.input.channels, c1, rng),
                    conv2: ConvLayer::he(c1, c2, rng),
                }
            }
            BackboneKind::Mlp => {
                let mut prev = config.input.numel();
                let layers = config
                    .mlp_widths
                    .iter()
                    .map(|&w| {
                        let l = LinearLayer::he(prev, w, rng);
                        prev = w;
                        l
                    })
                    .collect();
                Backbone::Mlp { layers }
            }
        };
        let n = config.squeeze_dim();
        let cam = ChannelAttentionModule::he(n, config.hidden_dim, reduction_ratio(n), rng)?;
        let f1 = LinearLayer::he(config.feature_dim(), config.hidden_dim, rng);
        let f2 = LinearLayer::he(config.hidden_dim, config.classes, rng);
        Ok(Self { config: config.clone(), backbone, cam, f1, f2 })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        match &self.backbone {
            Backbone::TinyCnn { conv1, conv2 } => {
                out.push(("backbone.conv1.weight".into(), &conv1.weight));
                out.push(("backbone.conv1.bias".into(), &conv1.bias));
                out.push(("backbone.conv2.weight".into(), &conv2.weight));
                out.push(("backbone.conv2.bias".into(), &conv2.bias));
            }
            Backbone::Mlp { layers } => {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("backbone.fc{i}.weight"), &l.weight));
                    out.push((format!("backbone.fc{i}.bias"), &l.bias));
                }
            }
        }
        out.push(("cam.fc_reduce.weight".into(), &self.cam.fc_reduce.weight));
        out.push(("cam.fc_reduce.bias".into(), &self.cam.fc_reduce.bias));
        out.push(("cam.fc_expand.weight".into(), &self.cam.fc_expand.weight));
        out.push(("cam.fc_expand.bias".into(), &self.cam.fc_expand.bias));
        out.push(("f1.weight".into(), &self.f1.weight));
        out.push(("f1.bias".into(), &self.f1.bias));
        out.push(("f2.weight".into(), &self.f2.weight));
        out.push(("f2.bias".into(), &self.f2.bias));
        out
    }

    /// Mutable parameters, in [`Self::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        match &mut self.backbone {
            Backbone::TinyCnn { conv1, conv2 } => {
                out.extend([&mut conv1.weight, &mut conv1.bias, &mut conv2.weight, &mut conv2.bias]);
            }
            Backbone::Mlp { layers } => {
                for l in layers {
                    out.extend([&mut l.weight, &mut l.bias]);
                }
            }
        }
        out.extend([
            &mut self.cam.fc_reduce.weight,
            &mut self.cam.fc_reduce.bias,
            &mut self.cam.fc_expand.weight,
            &mut self.cam.fc_expand.bias,
            &mut self.f1.weight,
            &mut self.f1.bias,
            &mut self.f2.weight,
            &mut self.f2.bias,
        ]);
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let lin = |l: &LinearLayer<T>| LinearLayer { weight: l.weight.cast(), bias: l.bias.cast() };
        let conv = |l: &ConvLayer<T>| ConvLayer { weight: l.weight.cast(), bias: l.bias.cast() };
        ModelParams {
            config: self.config.clone(),
            backbone: match &self.backbone {
                Backbone::TinyCnn { conv1, conv2 } => Backbone::TinyCnn { conv1: conv(conv1), conv2: conv(conv2) },
                Backbone::Mlp { layers } => Backbone::Mlp { layers: layers.iter().map(lin).collect() },
            },
            cam: ChannelAttentionModule {
                fc_reduce: lin(&self.cam.fc_reduce),
                fc_expand: lin(&self.cam.fc_expand),
                reduction: self.cam.reduction,
            },
            f1: lin(&self.f1),
            f2: lin(&self.f2),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        let backbone = match &self.backbone {
            Backbone::TinyCnn { conv1, conv2 } => BackboneVars::TinyCnn { conv1: conv1.bind(g), conv2: conv2.bind(g) },
            Backbone::Mlp { layers } => BackboneVars::Mlp { layers: layers.iter().map(|l| l.bind(g)).collect() },
        };
        ModelVars { backbone, cam: self.cam.bind(g), f1: self.f1.bind(g), f2: self.f2.bind(g) }
    }

    /// Handles for externally bound parameters, given in
    /// [`ModelParams::named_params`] order.
    pub fn vars_from(&self, handles: &[Var]) -> Result<ModelVars, NnError> {
        ModelVars::from_handles(&self.config.backbone, self.config.mlp_widths.len(), handles)
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<usize, NnError> {
        let s = g.shape(x);
        let inp = self.config.input;
        match s {
            &[n, c, h, w] if c == inp.channels && h == inp.height && w == inp.width && n > 0 => Ok(n),
            _ => Err(NnError::Tensor(TensorError::Shape {
                op: "model input",
                detail: format!("expected [N, {}, {}, {}], got {:?}", inp.channels, inp.height, inp.width, s),
            })),
        }
    }

    /// Backbone features `F` (`[N x n]`) and the squeezed descriptor fed to
    /// the attention module.
    pub fn features(&self, g: &mut Graph<T>, vars: &ModelVars, x: Var) -> Result<(Var, Var), NnError> {
        let n = self.check_input(g, x)?;
        match &vars.backbone {
            BackboneVars::TinyCnn { conv1, conv2 } => {
                let h = g.conv3x3(x, conv1.weight, conv1.bias)?;
                let h = g.relu(h)?;
                let h = g.max_pool2x2(h)?;
                let h = g.conv3x3(h, conv2.weight, conv2.bias)?;
                let h = g.relu(h)?;
                let maps = g.max_pool2x2(h)?;
                let squeezed = g.global_avg_pool(maps)?;
                let flat = g.reshape(maps, &[n, self.config.feature_dim()])?;
                Ok((flat, squeezed))
            }
            BackboneVars::Mlp { layers } => {
                let mut h = g.reshape(x, &[n, self.config.input.numel()])?;
                for &l in layers {
                    h = linear(g, h, l)?;
                    h = g.relu(h)?;
                }
                Ok((h, h))
            }
        }
    }

    /// `P1 = f2(relu(f1(F)))`.
    pub fn forward_plain(&self, g: &mut Graph<T>, vars: &ModelVars, x: Var) -> Result<Var, NnError> {
        let (f, _) = self.features(g, vars, x)?;
        let h = linear(g, f, vars.f1)?;
        let h = g.relu(h)?;
        Ok(linear(g, h, vars.f2)?)
    }

    /// `P2 = f2(relu(f1(F) * f_se(F)))`, plus the attention matrix.
    pub fn forward_cam(&self, g: &mut Graph<T>, vars: &ModelVars, x: Var) -> Result<CamForward, NnError> {
        let (f, squeezed) = self.features(g, vars, x)?;
        let attention = squeeze_excite(g, squeezed, vars.cam)?;
        self.gated_head(g, vars, f, attention)
    }

    /// Runs the gated head with an externally supplied attention matrix.
    pub fn gated_head(&self, g: &mut Graph<T>, vars: &ModelVars, features: Var, attention: Var) -> Result<CamForward, NnError> {
        let h = linear(g, features, vars.f1)?;
        let gated_hidden = g.mul(h, attention)?;
        let a = g.relu(gated_hidden)?;
        let logits = linear(g, a, vars.f2)?;
        Ok(CamForward { logits, attention, gated_hidden })
    }
}
