//! Declarative model architecture: layer list, shape inference, parameter
//! counting, and a one-layer-per-line text format.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Batchnorm {
        epsilon: f64,
        momentum: f64,
    },
    LeakyRelu {
        negative_slope: f64,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        out_units: usize,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Batchnorm { .. } => "batchnorm",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(CoreError::domain(
                        "conv2d hyperparameters must be strictly positive",
                    ));
                }
            }
            LayerSpec::Batchnorm { epsilon, momentum } => {
                if *epsilon <= 0.0 || !(0.0..1.0).contains(momentum) {
                    return Err(CoreError::domain(
                        "batchnorm requires epsilon > 0 and momentum in [0,1)",
                    ));
                }
            }
            LayerSpec::LeakyRelu { negative_slope } => {
                if !(0.0 < *negative_slope && *negative_slope < 1.0) {
                    return Err(CoreError::domain(
                        "leaky_relu negative slope must lie in (0,1)",
                    ));
                }
            }
            LayerSpec::Maxpool2d { window, stride } => {
                if *window == 0 || *stride == 0 {
                    return Err(CoreError::domain(
                        "maxpool2d window and stride must be strictly positive",
                    ));
                }
            }
            LayerSpec::GlobalAvgPool => {}
            LayerSpec::Dense { out_units } => {
                if *out_units == 0 {
                    return Err(CoreError::domain("dense out_units must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Output shape of a layer: spatial feature map or flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Hwc(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match self {
            Shape::Hwc(h, w, c) => h * w * c,
            Shape::Flat(n) => *n,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Hwc(h, w, c) => write!(f, "({} x {} x {})", h, w, c),
            Shape::Flat(n) => write!(f, "({})", n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Spatial extent after same-padded strided convolution (TF convention).
fn same_out(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

/// Spatial extent after ceil-mode pooling.
fn pool_out(extent: usize, window: usize, stride: usize) -> Result<usize> {
    if window > extent {
        return Err(CoreError::shape(format!(
            "pool window {} exceeds input extent {}",
            window, extent
        )));
    }
    Ok((extent - window).div_ceil(stride) + 1)
}

impl ModelSpec {
    /// Per-layer output shapes, one entry per layer.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(CoreError::shape("input shape extents must be positive"));
        }
        let mut cur = Shape::Hwc(h, w, c);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            cur = match (layer, &cur) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Shape::Hwc(h, w, _),
                ) => {
                    let (oh, ow) = match padding {
                        Padding::Same => (same_out(*h, *stride), same_out(*w, *stride)),
                        Padding::Valid => {
                            if *kernel > *h || *kernel > *w {
                                return Err(CoreError::shape(format!(
                                    "layer {}: valid conv kernel {} exceeds input {}x{}",
                                    i + 1,
                                    kernel,
                                    h,
                                    w
                                )));
                            }
                            ((h - kernel) / stride + 1, (w - kernel) / stride + 1)
                        }
                    };
                    Shape::Hwc(oh, ow, *out_channels)
                }
                (LayerSpec::Batchnorm { .. }, s) | (LayerSpec::LeakyRelu { .. }, s) => s.clone(),
                (LayerSpec::Maxpool2d { window, stride }, Shape::Hwc(h, w, c)) => Shape::Hwc(
                    pool_out(*h, *window, *stride)
                        .map_err(|e| CoreError::shape(format!("layer {}: {}", i + 1, e)))?,
                    pool_out(*w, *window, *stride)
                        .map_err(|e| CoreError::shape(format!("layer {}: {}", i + 1, e)))?,
                    *c,
                ),
                (LayerSpec::GlobalAvgPool, Shape::Hwc(_, _, c)) => Shape::Flat(*c),
                // Dense flattens whatever it receives.
                (LayerSpec::Dense { out_units }, _) => Shape::Flat(*out_units),
                (layer, Shape::Flat(_)) => {
                    return Err(CoreError::shape(format!(
                        "layer {}: {} requires a spatial (H,W,C) input",
                        i + 1,
                        layer.kind_name()
                    )));
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Final logit vector length.
    pub fn num_classes(&self) -> Result<usize> {
        match self.infer_shapes()?.last() {
            Some(Shape::Flat(n)) => Ok(*n),
            Some(s) => Err(CoreError::shape(format!(
                "final layer produces {} instead of a rank-1 logit vector",
                s
            ))),
            None => Err(CoreError::shape("model has no layers")),
        }
    }

    /// (total, trainable, non_trainable) parameter counts.
    pub fn count_parameters(&self) -> Result<(usize, usize, usize)> {
        Ok(self
            .per_layer_parameters()?
            .into_iter()
            .fold((0, 0, 0), |(t, tr, ntr), (lt, ltr, lntr)| {
                (t + lt, tr + ltr, ntr + lntr)
            }))
    }

    /// Per-layer (total, trainable, non_trainable) counts, Table-style.
    pub fn per_layer_parameters(&self) -> Result<Vec<(usize, usize, usize)>> {
        let shapes = self.infer_shapes()?;
        let mut in_shape = Shape::Hwc(self.input_shape.0, self.input_shape.1, self.input_shape.2);
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            let counts = match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let c_in = match in_shape {
                        Shape::Hwc(_, _, c) => c,
                        Shape::Flat(_) => unreachable!("caught by infer_shapes"),
                    };
                    let n = (kernel * kernel * c_in + 1) * out_channels;
                    (n, n, 0)
                }
                LayerSpec::Batchnorm { .. } => {
                    let c = match in_shape {
                        Shape::Hwc(_, _, c) => c,
                        Shape::Flat(n) => n,
                    };
                    (4 * c, 2 * c, 2 * c)
                }
                LayerSpec::Dense { out_units } => {
                    let f_in = in_shape.numel();
                    let n = (f_in + 1) * out_units;
                    (n, n, 0)
                }
                _ => (0, 0, 0),
            };
            out.push(counts);
            in_shape = shape.clone();
        }
        Ok(out)
    }

    /// Text form: `input H W C` then one layer per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "input {} {} {}\n",
            self.input_shape.0, self.input_shape.1, self.input_shape.2
        );
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let pad = match padding {
                        Padding::Same => "same",
                        Padding::Valid => "valid",
                    };
                    s.push_str(&format!(
                        "conv2d out={} kernel={} stride={} padding={}\n",
                        out_channels, kernel, stride, pad
                    ));
                }
                LayerSpec::Batchnorm { epsilon, momentum } => {
                    s.push_str(&format!("batchnorm epsilon={} momentum={}\n", epsilon, momentum));
                }
                LayerSpec::LeakyRelu { negative_slope } => {
                    s.push_str(&format!("leaky_relu slope={}\n", negative_slope));
                }
                LayerSpec::Maxpool2d { window, stride } => {
                    s.push_str(&format!("maxpool2d window={} stride={}\n", window, stride));
                }
                LayerSpec::GlobalAvgPool => s.push_str("global_avg_pool\n"),
                LayerSpec::Dense { out_units } => {
                    s.push_str(&format!("dense out={}\n", out_units));
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<ModelSpec> {
        let mut input_shape = None;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            let err = |msg: &str| {
                CoreError::format(format!("line {}: {}", lineno + 1, msg))
            };
            let kv = |parts: std::str::SplitWhitespace<'_>| -> Result<Vec<(String, String)>> {
                parts
                    .map(|p| {
                        p.split_once('=')
                            .map(|(k, v)| (k.to_string(), v.to_string()))
                            .ok_or_else(|| {
                                CoreError::format(format!(
                                    "line {}: expected key=value, got '{}'",
                                    lineno + 1,
                                    p
                                ))
                            })
                    })
                    .collect()
            };
            match head {
                "input" => {
                    let dims: Vec<usize> = parts
                        .map(|p| p.parse().map_err(|_| err("bad input extent")))
                        .collect::<Result<_>>()?;
                    if dims.len() != 3 {
                        return Err(err("input takes exactly H W C"));
                    }
                    input_shape = Some((dims[0], dims[1], dims[2]));
                }
                "conv2d" => {
                    let (mut out, mut kernel, mut stride, mut padding) =
                        (None, None, None, Padding::Same);
                    for (k, v) in kv(parts)? {
                        match k.as_str() {
                            "out" => out = Some(v.parse().map_err(|_| err("bad out"))?),
                            "kernel" => kernel = Some(v.parse().map_err(|_| err("bad kernel"))?),
                            "stride" => stride = Some(v.parse().map_err(|_| err("bad stride"))?),
                            "padding" => {
                                padding = match v.as_str() {
                                    "same" => Padding::Same,
                                    "valid" => Padding::Valid,
                                    _ => return Err(err("padding must be same|valid")),
                                }
                            }
                            _ => return Err(err(&format!("unknown conv2d key '{}'", k))),
                        }
                    }
                    layers.push(LayerSpec::Conv2d {
                        out_channels: out.ok_or_else(|| err("conv2d missing out="))?,
                        kernel: kernel.ok_or_else(|| err("conv2d missing kernel="))?,
                        stride: stride.unwrap_or(1),
                        padding,
                    });
                }
                "batchnorm" => {
                    let (mut epsilon, mut momentum) = (1e-5, 0.9);
                    for (k, v) in kv(parts)? {
                        match k.as_str() {
                            "epsilon" => epsilon = v.parse().map_err(|_| err("bad epsilon"))?,
                            "momentum" => momentum = v.parse().map_err(|_| err("bad momentum"))?,
                            _ => return Err(err(&format!("unknown batchnorm key '{}'", k))),
                        }
                    }
                    layers.push(LayerSpec::Batchnorm { epsilon, momentum });
                }
                "leaky_relu" => {
                    let mut slope = 0.01;
                    for (k, v) in kv(parts)? {
                        match k.as_str() {
                            "slope" => slope = v.parse().map_err(|_| err("bad slope"))?,
                            _ => return Err(err(&format!("unknown leaky_relu key '{}'", k))),
                        }
                    }
                    layers.push(LayerSpec::LeakyRelu {
                        negative_slope: slope,
                    });
                }
                "maxpool2d" => {
                    let (mut window, mut stride) = (2, None);
                    for (k, v) in kv(parts)? {
                        match k.as_str() {
                            "window" => window = v.parse().map_err(|_| err("bad window"))?,
                            "stride" => stride = Some(v.parse().map_err(|_| err("bad stride"))?),
                            _ => return Err(err(&format!("unknown maxpool2d key '{}'", k))),
                        }
                    }
                    layers.push(LayerSpec::Maxpool2d {
                        window,
                        stride: stride.unwrap_or(window),
                    });
                }
                "global_avg_pool" => layers.push(LayerSpec::GlobalAvgPool),
                "dense" => {
                    let mut out = None;
                    for (k, v) in kv(parts)? {
                        match k.as_str() {
                            "out" => out = Some(v.parse().map_err(|_| err("bad out"))?),
                            _ => return Err(err(&format!("unknown dense key '{}'", k))),
                        }
                    }
                    layers.push(LayerSpec::Dense {
                        out_units: out.ok_or_else(|| err("dense missing out="))?,
                    });
                }
                other => return Err(err(&format!("unknown layer kind '{}'", other))),
            }
        }
        let input_shape =
            input_shape.ok_or_else(|| CoreError::format("spec missing 'input H W C' line"))?;
        let spec = ModelSpec {
            input_shape,
            layers,
        };
        spec.infer_shapes()?;
        Ok(spec)
    }
}

/// The 14-layer student architecture with a 10-way head.
pub fn student_spec() -> ModelSpec {
    student_spec_with_head(10)
}

/// Student architecture with a configurable logit count.
pub fn student_spec_with_head(classes: usize) -> ModelSpec {
    let conv = |out| LayerSpec::Conv2d {
        out_channels: out,
        kernel: 3,
        stride: 2,
        padding: Padding::Same,
    };
    let bn = LayerSpec::Batchnorm {
        epsilon: 1e-5,
        momentum: 0.9,
    };
    let lrelu = LayerSpec::LeakyRelu {
        negative_slope: 0.01,
    };
    let pool = LayerSpec::Maxpool2d {
        window: 2,
        stride: 2,
    };
    ModelSpec {
        input_shape: (224, 224, 3),
        layers: vec![
            conv(32),
            bn.clone(),
            lrelu.clone(),
            pool.clone(),
            conv(64),
            bn.clone(),
            lrelu.clone(),
            pool.clone(),
            conv(128),
            bn,
            lrelu,
            pool,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { out_units: classes },
        ],
    }
}

/// Dense-only spec holding exactly `n` parameters; used as a parameter-count
/// stand-in for large architectures in cost modeling.
pub fn constant_param_spec(n: usize) -> ModelSpec {
    assert!(n >= 2, "need at least a weight and a bias");
    ModelSpec {
        input_shape: (1, 1, n - 1),
        layers: vec![LayerSpec::Dense { out_units: 1 }],
    }
}
