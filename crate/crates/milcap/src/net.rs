//! Declarative network description and receptive-field geometry.
//!
//! A [`NetworkSpec`] lists layers the way the classifier sees them. The same
//! spec drives the fully-convolutional form: every fully-connected layer is
//! treated as a convolution whose kernel equals its incoming spatial extent
//! at the canonical input size (1x1 for the ones after the first), which is
//! what lets a fixed parameter set scan arbitrary input sizes.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    MaxPool { kernel: usize, stride: usize },
    Relu,
    FullyConnected { units: usize },
}

impl LayerSpec {
    /// Whether the layer carries a weight and bias.
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }

    fn describe(&self) -> String {
        match self {
            LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                format!("conv {out_channels} {kernel}x{kernel} stride {stride} pad {pad}")
            }
            LayerSpec::MaxPool { kernel, stride } => format!("maxpool {kernel} stride {stride}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::FullyConnected { units } => format!("fully_connected {units}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// Square input side the classifier form was designed for.
    pub canonical_input: usize,
    pub in_channels: usize,
}

/// Output shape of one layer when the net runs at the canonical input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeom {
    pub channels: usize,
    pub extent: usize,
}

/// Score-map geometry of a spec at one input size.
#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    pub input_size: usize,
    /// Square score-map side h.
    pub map_size: usize,
    /// Input pixels influencing one output cell; independent of input size.
    pub receptive_field: usize,
    /// Pixels between receptive-field centers of adjacent cells.
    pub jump: usize,
    /// Input-pixel coordinate of cell (0,0)'s receptive-field center.
    pub center_offset: f64,
}

impl Geometry {
    /// Fraction of the input side one receptive field covers, capped at 1.
    pub fn height_ratio(&self) -> f64 {
        (self.receptive_field as f64 / self.input_size as f64).min(1.0)
    }
}

impl NetworkSpec {
    /// Units of the final fully-connected layer: the concept count N.
    pub fn concept_count(&self) -> Result<usize> {
        match self.layers.last() {
            Some(LayerSpec::FullyConnected { units }) => Ok(*units),
            _ => Err(Error::Spec(
                "network has no trailing fully_connected layer to read the concept count from"
                    .into(),
            )),
        }
    }

    /// Structural checks that do not depend on an input size.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        if self.canonical_input == 0 || self.in_channels == 0 {
            return Err(Error::Spec(
                "canonical input size and channel count must be at least 1".into(),
            ));
        }
        let mut seen_fc = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { out_channels, kernel, stride, .. } => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::Spec(format!(
                            "layer {} ({}) has a zero field",
                            i + 1,
                            layer.describe()
                        )));
                    }
                    if seen_fc {
                        return Err(Error::Spec(format!(
                            "layer {} ({}) appears after a fully_connected layer",
                            i + 1,
                            layer.describe()
                        )));
                    }
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 {
                        return Err(Error::Spec(format!(
                            "layer {} ({}) has a zero field",
                            i + 1,
                            layer.describe()
                        )));
                    }
                    if seen_fc {
                        return Err(Error::Spec(format!(
                            "layer {} ({}) appears after a fully_connected layer",
                            i + 1,
                            layer.describe()
                        )));
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::FullyConnected { units } => {
                    if *units == 0 {
                        return Err(Error::Spec(format!(
                            "layer {} (fully_connected) has zero units",
                            i + 1
                        )));
                    }
                    seen_fc = true;
                }
            }
        }
        // The canonical chain must stay spatially valid all the way down.
        self.canonical_chain()?;
        Ok(())
    }

    /// Output (channels, extent) of every layer at the canonical input size.
    /// Relu entries repeat their input shape so indices line up with layers.
    pub fn canonical_chain(&self) -> Result<Vec<LayerGeom>> {
        let mut chain = Vec::with_capacity(self.layers.len());
        let mut cur = LayerGeom { channels: self.in_channels, extent: self.canonical_input };
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    let padded = cur.extent + 2 * pad;
                    if padded < *kernel {
                        return Err(Error::Spec(format!(
                            "layer {} ({}) kernel exceeds its {}px input at canonical size {}",
                            i + 1,
                            layer.describe(),
                            cur.extent,
                            self.canonical_input
                        )));
                    }
                    LayerGeom {
                        channels: *out_channels,
                        extent: (padded - kernel) / stride + 1,
                    }
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    if cur.extent < *kernel {
                        return Err(Error::Spec(format!(
                            "layer {} ({}) window exceeds its {}px input at canonical size {}",
                            i + 1,
                            layer.describe(),
                            cur.extent,
                            self.canonical_input
                        )));
                    }
                    LayerGeom { channels: cur.channels, extent: (cur.extent - kernel) / stride + 1 }
                }
                LayerSpec::Relu => cur,
                LayerSpec::FullyConnected { units } => {
                    // Consumes all remaining spatial extent in one window.
                    LayerGeom { channels: *units, extent: 1 }
                }
            };
            chain.push(cur);
        }
        Ok(chain)
    }

    /// Score-map geometry at `input_size`, via the standard receptive-field
    /// recurrence: extent' = floor((extent + 2p - k)/s) + 1, jump' = jump*s,
    /// rf' = rf + (k-1)*jump, center' = center + ((k-1)/2 - p)*jump.
    pub fn geometry(&self, input_size: usize) -> Result<Geometry> {
        let chain = self.canonical_chain()?;
        let mut extent = input_size;
        let mut jump = 1usize;
        let mut rf = 1usize;
        let mut center = 0.0f64;
        let mut in_extent_canonical = self.canonical_input;
        for (i, layer) in self.layers.iter().enumerate() {
            // Effective window of this layer; fully-connected layers act as
            // convolutions over their canonical incoming extent.
            let (k, s, p) = match layer {
                LayerSpec::Conv { kernel, stride, pad, .. } => (*kernel, *stride, *pad),
                LayerSpec::MaxPool { kernel, stride } => (*kernel, *stride, 0),
                LayerSpec::Relu => {
                    in_extent_canonical = chain[i].extent;
                    continue;
                }
                LayerSpec::FullyConnected { .. } => (in_extent_canonical, 1, 0),
            };
            if extent + 2 * p < k {
                return Err(Error::Spec(format!(
                    "layer {} ({}) output extent falls below 1 at input size {input_size}",
                    i + 1,
                    layer.describe()
                )));
            }
            extent = (extent + 2 * p - k) / s + 1;
            center += ((k - 1) as f64 / 2.0 - p as f64) * jump as f64;
            rf += (k - 1) * jump;
            jump *= s;
            in_extent_canonical = chain[i].extent;
        }
        Ok(Geometry {
            input_size,
            map_size: extent,
            receptive_field: rf,
            jump,
            center_offset: center,
        })
    }
}

// ── manifest parsing ─────────────────────────────────────────────────────

/// Parse the text manifest form. First meaningful line: `input <size>
/// <channels>`; then one layer per line: `conv <out> <k> <s> <p>`,
/// `maxpool <k> <s>`, `relu`, `fully_connected <units>`. Blank lines and
/// `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<NetworkSpec> {
    let mut canonical: Option<(usize, usize)> = None;
    let mut layers = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let kind = parts.next().unwrap();
        let mut ints = Vec::new();
        for p in parts {
            ints.push(p.parse::<usize>().map_err(|_| {
                Error::Spec(format!("line {}: `{p}` is not a non-negative integer", lineno + 1))
            })?);
        }
        let bad_arity = |want: usize| {
            Error::Spec(format!(
                "line {}: `{kind}` wants {want} integer fields, got {}",
                lineno + 1,
                ints.len()
            ))
        };
        match kind {
            "input" => {
                if ints.len() != 2 {
                    return Err(bad_arity(2));
                }
                if canonical.is_some() {
                    return Err(Error::Spec(format!(
                        "line {}: duplicate `input` line",
                        lineno + 1
                    )));
                }
                canonical = Some((ints[0], ints[1]));
            }
            "conv" => {
                if ints.len() != 4 {
                    return Err(bad_arity(4));
                }
                layers.push(LayerSpec::Conv {
                    out_channels: ints[0],
                    kernel: ints[1],
                    stride: ints[2],
                    pad: ints[3],
                });
            }
            "maxpool" => {
                if ints.len() != 2 {
                    return Err(bad_arity(2));
                }
                layers.push(LayerSpec::MaxPool { kernel: ints[0], stride: ints[1] });
            }
            "relu" => {
                if !ints.is_empty() {
                    return Err(bad_arity(0));
                }
                layers.push(LayerSpec::Relu);
            }
            "fully_connected" => {
                if ints.len() != 1 {
                    return Err(bad_arity(1));
                }
                layers.push(LayerSpec::FullyConnected { units: ints[0] });
            }
            other => {
                return Err(Error::Spec(format!(
                    "line {}: unknown layer kind `{other}`",
                    lineno + 1
                )));
            }
        }
    }
    let (canonical_input, in_channels) = canonical
        .ok_or_else(|| Error::Spec("manifest is missing the `input <size> <channels>` line".into()))?;
    let spec = NetworkSpec { layers, canonical_input, in_channels };
    spec.validate()?;
    Ok(spec)
}

/// Inverse of [`parse_manifest`].
pub fn format_manifest(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "input {} {}", spec.canonical_input, spec.in_channels);
    for layer in &spec.layers {
        let _ = match layer {
            LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                writeln!(out, "conv {out_channels} {kernel} {stride} {pad}")
            }
            LayerSpec::MaxPool { kernel, stride } => writeln!(out, "maxpool {kernel} {stride}"),
            LayerSpec::Relu => writeln!(out, "relu"),
            LayerSpec::FullyConnected { units } => writeln!(out, "fully_connected {units}"),
        };
    }
    out
}

/// The desk-scale eight-layer network: canonical input 35x35x3, total
/// stride 8, receptive field 43px, score-map side (S - 35)/8 + 1.
pub fn mininet(concepts: usize) -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::Conv { out_channels: 8, kernel: 7, stride: 2, pad: 0 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 3, stride: 2 },
            LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 3, stride: 2 },
            LayerSpec::FullyConnected { units: 32 },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { units: 32 },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { units: concepts },
        ],
        canonical_input: 35,
        in_channels: 3,
    }
}

/// The classic five-conv, three-fc architecture the geometry tests check
/// against published score-map sizes.
pub fn alexnet_like() -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::Conv { out_channels: 96, kernel: 11, stride: 4, pad: 0 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 3, stride: 2 },
            LayerSpec::Conv { out_channels: 256, kernel: 5, stride: 1, pad: 2 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 3, stride: 2 },
            LayerSpec::Conv { out_channels: 384, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv { out_channels: 384, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv { out_channels: 256, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 3, stride: 2 },
            LayerSpec::FullyConnected { units: 4096 },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { units: 4096 },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { units: 1000 },
        ],
        canonical_input: 227,
        in_channels: 3,
    }
}
