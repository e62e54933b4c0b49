//! Parameter sets for a [`NetworkSpec`] in both of its lives: the
//! classification form (flatten + fully-connected tail) used for
//! pre-training, and the fully-convolutional form obtained by reshaping each
//! fully-connected matrix into a filter bank. Both forwards accumulate each
//! output cell in the same order (bias first, then channel-major window
//! scan), so the two forms agree bit for bit at the canonical input size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::resize_bilinear;
use crate::net::{LayerSpec, NetworkSpec};
use crate::ops::{self};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer parameters, index-aligned with `spec.layers`; `None` for
/// parameter-free layers (relu, maxpool).
#[derive(Clone, Debug)]
pub struct NetParams {
    pub layers: Vec<Option<LayerParams>>,
}

/// Tape handles for registered parameters, index-aligned with `spec.layers`.
pub struct TapedLayer {
    pub weight: Var,
    pub bias: Var,
}

pub struct TapedNet {
    pub layers: Vec<Option<TapedLayer>>,
}

/// He-scaled uniform draw: bound sqrt(6 / fan_in), zero mean.
pub fn he_uniform<R: rand::Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Input (channels, extent) seen by each layer at the canonical size.
fn incoming_geometry(spec: &NetworkSpec) -> Result<Vec<(usize, usize)>> {
    let chain = spec.canonical_chain()?;
    let mut incoming = Vec::with_capacity(spec.layers.len());
    for i in 0..spec.layers.len() {
        if i == 0 {
            incoming.push((spec.in_channels, spec.canonical_input));
        } else {
            incoming.push((chain[i - 1].channels, chain[i - 1].extent));
        }
    }
    Ok(incoming)
}

/// Classification-form parameters: conv banks plus flat fully-connected
/// matrices, He-uniform weights, zero biases. Biases draw nothing from the
/// RNG, so the stream is consumed by weights alone, in layer order.
pub fn build_classifier(spec: &NetworkSpec, seed: u64) -> Result<NetParams> {
    spec.validate()?;
    let incoming = incoming_geometry(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (layer, &(in_ch, in_ext)) in spec.layers.iter().zip(&incoming) {
        layers.push(match layer {
            LayerSpec::Conv { out_channels, kernel, stride: _, pad: _ } => {
                let fan_in = in_ch * kernel * kernel;
                Some(LayerParams {
                    weight: he_uniform(vec![*out_channels, in_ch, *kernel, *kernel], fan_in, &mut rng),
                    bias: Tensor::zeros(vec![*out_channels]),
                })
            }
            LayerSpec::FullyConnected { units } => {
                let in_features = in_ch * in_ext * in_ext;
                Some(LayerParams {
                    weight: he_uniform(vec![*units, in_features], in_features, &mut rng),
                    bias: Tensor::zeros(vec![*units]),
                })
            }
            LayerSpec::Relu | LayerSpec::MaxPool { .. } => None,
        });
    }
    Ok(NetParams { layers })
}

/// The convolutional shape a fully-connected layer's matrix reshapes to:
/// [units, in_channels, extent, extent] at the canonical input size.
pub fn fc_conv_shape(spec: &NetworkSpec, layer_index: usize) -> Result<Vec<usize>> {
    match spec.layers.get(layer_index) {
        Some(LayerSpec::FullyConnected { units }) => {
            let (in_ch, in_ext) = incoming_geometry(spec)?[layer_index];
            Ok(vec![*units, in_ch, in_ext, in_ext])
        }
        _ => Err(Error::Spec(format!(
            "layer {} is not fully_connected",
            layer_index + 1
        ))),
    }
}

/// Reshape every fully-connected matrix [units, C*h*w] into a filter bank
/// [units, C, h, w]. Row-major data is untouched, which is exactly the
/// agreement with the classifier's flatten order that makes the two forms
/// equivalent. Convolutional layers pass through unchanged.
pub fn convert_to_fcn(spec: &NetworkSpec, params: &NetParams) -> Result<NetParams> {
    if params.layers.len() != spec.layers.len() {
        return Err(Error::Spec(format!(
            "parameter set has {} layers, spec has {}",
            params.layers.len(),
            spec.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, (layer, p)) in spec.layers.iter().zip(&params.layers).enumerate() {
        layers.push(match (layer, p) {
            (LayerSpec::FullyConnected { .. }, Some(lp)) => {
                let shape = fc_conv_shape(spec, i)?;
                let want: usize = shape.iter().product();
                if lp.weight.numel() != want {
                    return Err(Error::Shape(format!(
                        "layer {} weight {:?} cannot reshape to {:?}",
                        i + 1,
                        lp.weight.shape(),
                        shape
                    )));
                }
                Some(LayerParams {
                    weight: lp.weight.clone().reshaped(shape)?,
                    bias: lp.bias.clone(),
                })
            }
            (_, Some(lp)) => Some(lp.clone()),
            (_, None) => None,
        });
    }
    Ok(NetParams { layers })
}

// ── pure forwards ────────────────────────────────────────────────────────

fn relu_pure(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Classification-form logits for one canonical-size input. Fully-connected
/// layers run as bias-first flat dot products over the row-major flatten,
/// matching the convolutional form's accumulation order exactly.
pub fn classifier_logits(spec: &NetworkSpec, params: &NetParams, input: &Tensor) -> Result<Vec<f32>> {
    let expect = [spec.in_channels, spec.canonical_input, spec.canonical_input];
    if input.shape() != expect {
        return Err(Error::Shape(format!(
            "classifier wants input {:?}, got {:?}",
            expect,
            input.shape()
        )));
    }
    let mut x = input.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        x = match layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = params.layers[i].as_ref().expect("conv layer has parameters");
                ops::conv2d_forward(&x, &p.weight, &p.bias, *stride, *pad)
            }
            LayerSpec::MaxPool { kernel, stride } => ops::maxpool_forward(&x, *kernel, *stride).0,
            LayerSpec::Relu => relu_pure(x),
            LayerSpec::FullyConnected { units } => {
                let p = params.layers[i].as_ref().expect("fc layer has parameters");
                let flat = x.data();
                let in_features = flat.len();
                if p.weight.shape() != [*units, in_features] {
                    return Err(Error::Shape(format!(
                        "layer {} weight {:?} does not accept {} flattened features",
                        i + 1,
                        p.weight.shape(),
                        in_features
                    )));
                }
                let w = p.weight.data();
                let b = p.bias.data();
                let mut out = Tensor::zeros(vec![*units]);
                {
                    let od = out.data_mut();
                    for (u, o) in od.iter_mut().enumerate() {
                        let mut acc = b[u];
                        let row = &w[u * in_features..(u + 1) * in_features];
                        for (wv, xv) in row.iter().zip(flat) {
                            acc += wv * xv;
                        }
                        *o = acc;
                    }
                }
                out
            }
        };
    }
    Ok(x.into_data())
}

/// Fully-convolutional forward over layers [from, to) with converted
/// parameters. The input is the output of layer `from - 1` (the frame
/// itself when `from == 0`).
pub fn fcn_forward_pure(
    spec: &NetworkSpec,
    params: &NetParams,
    input: &Tensor,
    from: usize,
    to: usize,
) -> Result<Tensor> {
    let mut x = input.clone();
    for i in from..to {
        x = match &spec.layers[i] {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = params.layers[i].as_ref().expect("conv layer has parameters");
                ops::conv2d_forward(&x, &p.weight, &p.bias, *stride, *pad)
            }
            LayerSpec::MaxPool { kernel, stride } => ops::maxpool_forward(&x, *kernel, *stride).0,
            LayerSpec::Relu => relu_pure(x),
            LayerSpec::FullyConnected { .. } => {
                let p = params.layers[i].as_ref().expect("fc layer has parameters");
                if p.weight.rank() != 4 {
                    return Err(Error::Shape(format!(
                        "layer {} weight {:?} is still in classifier form; convert it first",
                        i + 1,
                        p.weight.shape()
                    )));
                }
                if x.shape()[1] < p.weight.shape()[2] {
                    return Err(Error::Shape(format!(
                        "layer {} window {} exceeds its {}px input",
                        i + 1,
                        p.weight.shape()[2],
                        x.shape()[1]
                    )));
                }
                ops::conv2d_forward(&x, &p.weight, &p.bias, 1, 0)
            }
        };
    }
    Ok(x)
}

// ── taped forwards ───────────────────────────────────────────────────────

/// Put parameters on a tape. `trainable(i)` decides whether layer i's
/// tensors become gradient leaves or frozen constants; frozen parameters
/// are skipped by backward entirely.
pub fn register(
    tape: &mut Tape,
    params: &NetParams,
    trainable: impl Fn(usize) -> bool,
) -> TapedNet {
    let layers = params
        .layers
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.as_ref().map(|lp| {
                if trainable(i) {
                    TapedLayer {
                        weight: tape.leaf(lp.weight.clone().with_grad()),
                        bias: tape.leaf(lp.bias.clone().with_grad()),
                    }
                } else {
                    TapedLayer {
                        weight: tape.constant(lp.weight.clone()),
                        bias: tape.constant(lp.bias.clone()),
                    }
                }
            })
        })
        .collect();
    TapedNet { layers }
}

/// Classification-form forward on the tape (used by pre-training).
pub fn classifier_forward_taped(
    tape: &mut Tape,
    spec: &NetworkSpec,
    taped: &TapedNet,
    input: Var,
) -> Result<Var> {
    let mut x = input;
    for (i, layer) in spec.layers.iter().enumerate() {
        x = match layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = taped.layers[i].as_ref().expect("conv layer has parameters");
                ops::conv2d(tape, x, p.weight, p.bias, *stride, *pad)?
            }
            LayerSpec::MaxPool { kernel, stride } => ops::maxpool2d(tape, x, *kernel, *stride)?.0,
            LayerSpec::Relu => ops::relu(tape, x)?,
            LayerSpec::FullyConnected { .. } => {
                let p = taped.layers[i].as_ref().expect("fc layer has parameters");
                let n = tape.value(x).numel();
                let flat = ops::reshape(tape, x, vec![n])?;
                let z = ops::matmul(tape, p.weight, flat)?;
                ops::add(tape, z, p.bias)?
            }
        };
    }
    Ok(x)
}

/// Fully-convolutional forward on the tape over layers [from, to), with
/// converted (rank-4) parameters.
pub fn fcn_forward_taped(
    tape: &mut Tape,
    spec: &NetworkSpec,
    taped: &TapedNet,
    input: Var,
    from: usize,
    to: usize,
) -> Result<Var> {
    let mut x = input;
    for i in from..to {
        x = match &spec.layers[i] {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = taped.layers[i].as_ref().expect("conv layer has parameters");
                ops::conv2d(tape, x, p.weight, p.bias, *stride, *pad)?
            }
            LayerSpec::MaxPool { kernel, stride } => ops::maxpool2d(tape, x, *kernel, *stride)?.0,
            LayerSpec::Relu => ops::relu(tape, x)?,
            LayerSpec::FullyConnected { .. } => {
                let p = taped.layers[i].as_ref().expect("fc layer has parameters");
                if tape.value(p.weight).rank() != 4 {
                    return Err(Error::Shape(format!(
                        "layer {} weight is still in classifier form; convert it first",
                        i + 1
                    )));
                }
                ops::conv2d(tape, x, p.weight, p.bias, 1, 0)?
            }
        };
    }
    Ok(x)
}

// ── multi-scale evaluation ───────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ScaleMap {
    pub input_size: usize,
    /// Concept scores [N, h, h].
    pub map: Tensor,
}

#[derive(Clone, Debug)]
pub struct ScoreMapStack {
    pub scales: Vec<ScaleMap>,
}

/// Square crop of side `side` with top-left (y0, x0).
pub fn crop(frame: &Tensor, y0: usize, x0: usize, side: usize) -> Result<Tensor> {
    if frame.rank() != 3 {
        return Err(Error::Shape(format!("crop wants [C, H, W], got {:?}", frame.shape())));
    }
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if y0 + side > h || x0 + side > w {
        return Err(Error::InvalidArg(format!(
            "crop {side}px at ({y0}, {x0}) exceeds {h}x{w} frame"
        )));
    }
    let src = frame.data();
    let mut out = Tensor::zeros(vec![c, side, side]);
    {
        let od = out.data_mut();
        for ch in 0..c {
            for y in 0..side {
                let srow = ch * h * w + (y0 + y) * w + x0;
                let drow = (ch * side + y) * side;
                od[drow..drow + side].copy_from_slice(&src[srow..srow + side]);
            }
        }
    }
    Ok(out)
}

/// The four corner crops plus the center crop at the canonical size.
pub fn five_crop_offsets(frame_side: usize, canonical: usize) -> Result<[(usize, usize); 5]> {
    if frame_side < canonical {
        return Err(Error::InvalidArg(format!(
            "five-crop wants a frame of at least {canonical}px, got {frame_side}px"
        )));
    }
    let m = frame_side - canonical;
    Ok([(0, 0), (0, m), (m, 0), (m, m), (m / 2, m / 2)])
}

/// Per-scale concept score maps for one frame: the frame is resized to each
/// scale, pushed through the shared converted layers, then through that
/// scale's own final filter bank. With `five_crop`, the canonical scale is
/// instead the elementwise max over the logits of the four corner crops and
/// the center crop of the raw frame.
pub fn forward_multiscale(
    spec: &NetworkSpec,
    shared: &NetParams,
    fc8s: &[LayerParams],
    scales: &[usize],
    frame: &Tensor,
    five_crop: bool,
) -> Result<ScoreMapStack> {
    if scales.is_empty() {
        return Err(Error::InvalidArg("at least one scale is required".into()));
    }
    if fc8s.len() != scales.len() {
        return Err(Error::InvalidArg(format!(
            "{} scales but {} final-layer parameter sets",
            scales.len(),
            fc8s.len()
        )));
    }
    let last = spec.layers.len() - 1;
    let mut maps = Vec::with_capacity(scales.len());
    for (s, fc8) in scales.iter().zip(fc8s) {
        if *s < spec.canonical_input {
            return Err(Error::InvalidArg(format!(
                "scale {s} is smaller than the canonical input {}",
                spec.canonical_input
            )));
        }
        let map = if five_crop && *s == spec.canonical_input {
            let mut best: Option<Tensor> = None;
            for (y0, x0) in five_crop_offsets(frame.shape()[1], spec.canonical_input)? {
                let patch = crop(frame, y0, x0, spec.canonical_input)?;
                let feats = fcn_forward_pure(spec, shared, &patch, 0, last)?;
                let logits = ops::conv2d_forward(&feats, &fc8.weight, &fc8.bias, 1, 0);
                best = Some(match best {
                    None => logits,
                    Some(mut acc) => {
                        for (a, l) in acc.data_mut().iter_mut().zip(logits.data()) {
                            if *l > *a {
                                *a = *l;
                            }
                        }
                        acc
                    }
                });
            }
            best.expect("five crops evaluated")
        } else {
            let resized = resize_bilinear(frame, *s)?;
            let feats = fcn_forward_pure(spec, shared, &resized, 0, last)?;
            ops::conv2d_forward(&feats, &fc8.weight, &fc8.bias, 1, 0)
        };
        maps.push(ScaleMap { input_size: *s, map });
    }
    Ok(ScoreMapStack { scales: maps })
}

/// Shared-prefix features for one already-resized input: everything up to
/// but excluding the final layer. With the default freeze policy these are
/// constant across training, so callers cache them.
pub fn shared_features(spec: &NetworkSpec, shared: &NetParams, resized: &Tensor) -> Result<Tensor> {
    fcn_forward_pure(spec, shared, resized, 0, spec.layers.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::mininet;
    use rand::{Rng, SeedableRng};

    fn random_frame(side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * side * side;
        let data: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
        Tensor::new(vec![3, side, side], data).unwrap()
    }

    #[test]
    fn classifier_shapes_for_the_desk_net() {
        let spec = mininet(40);
        let params = build_classifier(&spec, 7).unwrap();
        let fc6 = params.layers[6].as_ref().unwrap();
        assert_eq!(fc6.weight.shape(), &[32, 144]);
        let fc8 = params.layers[10].as_ref().unwrap();
        assert_eq!(fc8.weight.shape(), &[40, 32]);
        assert_eq!(fc8.bias.shape(), &[40]);

        let small = mininet(5);
        let p = build_classifier(&small, 7).unwrap();
        assert_eq!(p.layers[10].as_ref().unwrap().weight.shape(), &[5, 32]);
    }

    #[test]
    fn same_seed_builds_bitwise_identical_parameters() {
        let spec = mininet(12);
        let a = build_classifier(&spec, 99).unwrap();
        let b = build_classifier(&spec, 99).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            match (x, y) {
                (Some(x), Some(y)) => {
                    assert_eq!(x.weight.data(), y.weight.data());
                    assert_eq!(x.bias.data(), y.bias.data());
                }
                (None, None) => {}
                _ => panic!("layer presence mismatch"),
            }
        }
        let c = build_classifier(&spec, 100).unwrap();
        assert_ne!(
            a.layers[0].as_ref().unwrap().weight.data(),
            c.layers[0].as_ref().unwrap().weight.data()
        );
    }

    #[test]
    fn trivial_fc_converts_to_one_by_one_filter() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::FullyConnected { units: 1 }],
            canonical_input: 1,
            in_channels: 1,
        };
        let params = NetParams {
            layers: vec![Some(LayerParams {
                weight: Tensor::new(vec![1, 1], vec![0.625]).unwrap(),
                bias: Tensor::vector(vec![0.0]),
            })],
        };
        let fcn = convert_to_fcn(&spec, &params).unwrap();
        let w = &fcn.layers[0].as_ref().unwrap().weight;
        assert_eq!(w.shape(), &[1, 1, 1, 1]);
        assert_eq!(w.data(), &[0.625]);
    }

    #[test]
    fn fc_conv_shape_for_the_big_reference_net() {
        // Shape arithmetic only; the parameters themselves are never built.
        let spec = crate::net::alexnet_like();
        assert_eq!(fc_conv_shape(&spec, 13).unwrap(), vec![4096, 256, 6, 6]);
        assert_eq!(fc_conv_shape(&spec, 15).unwrap(), vec![4096, 4096, 1, 1]);
        assert!(fc_conv_shape(&spec, 0).is_err());
    }

    #[test]
    fn converted_fcn_matches_classifier_logits_at_canonical_size() {
        let spec = mininet(40);
        for draw in 0..20 {
            let params = build_classifier(&spec, 1000 + draw).unwrap();
            let fcn = convert_to_fcn(&spec, &params).unwrap();
            let input = random_frame(35, 500 + draw);
            let a = classifier_logits(&spec, &params, &input).unwrap();
            let map = fcn_forward_pure(&spec, &fcn, &input, 0, spec.layers.len()).unwrap();
            assert_eq!(map.shape(), &[40, 1, 1]);
            let mut max_diff = 0.0f32;
            for (x, y) in a.iter().zip(map.data()) {
                max_diff = max_diff.max((x - y).abs());
            }
            assert!(max_diff <= 1e-5, "draw {draw}: max logit diff {max_diff}");
        }
    }

    #[test]
    fn constant_frame_gives_uniform_interior_cells() {
        let spec = mininet(6);
        let params = build_classifier(&spec, 3).unwrap();
        let fcn = convert_to_fcn(&spec, &params).unwrap();
        let frame = Tensor::filled(vec![3, 91, 91], 0.4);
        let map = fcn_forward_pure(&spec, &fcn, &frame, 0, spec.layers.len()).unwrap();
        assert_eq!(map.shape(), &[6, 8, 8]);
        // Interior cells: receptive field fully inside the input, so no
        // padding asymmetry. Centers 17 + 8x with half-width 21.5 inside
        // [0, 90] leaves x in 1..=6.
        let d = map.data();
        for c in 0..6 {
            let reference = d[(c * 8 + 1) * 8 + 1];
            for y in 1..=6 {
                for x in 1..=6 {
                    let v = d[(c * 8 + y) * 8 + x];
                    assert!(
                        (v - reference).abs() <= 1e-5,
                        "concept {c} cell ({y},{x}): {v} vs {reference}"
                    );
                }
            }
        }
    }

    #[test]
    fn shifting_input_by_one_jump_shifts_interior_cells_by_one() {
        let spec = mininet(4);
        let params = build_classifier(&spec, 8).unwrap();
        let fcn = convert_to_fcn(&spec, &params).unwrap();
        let mut base = Tensor::filled(vec![3, 91, 91], 0.1);
        base.data_mut()[0 * 91 * 91 + 40 * 91 + 40] = 1.0;
        let mut shifted = Tensor::filled(vec![3, 91, 91], 0.1);
        shifted.data_mut()[0 * 91 * 91 + 40 * 91 + 48] = 1.0;
        let m1 = fcn_forward_pure(&spec, &fcn, &base, 0, spec.layers.len()).unwrap();
        let m2 = fcn_forward_pure(&spec, &fcn, &shifted, 0, spec.layers.len()).unwrap();
        for c in 0..4 {
            for y in 1..=6 {
                for x in 1..=5 {
                    let a = m1.data()[(c * 8 + y) * 8 + x];
                    let b = m2.data()[(c * 8 + y) * 8 + x + 1];
                    assert!((a - b).abs() <= 1e-5, "concept {c} cell ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn multiscale_stack_has_expected_map_sizes() {
        let spec = mininet(5);
        let params = build_classifier(&spec, 4).unwrap();
        let fcn = convert_to_fcn(&spec, &params).unwrap();
        let fc8 = fcn.layers[10].clone().unwrap();
        let frame = random_frame(40, 2);
        let stack = forward_multiscale(
            &spec,
            &fcn,
            &[fc8.clone(), fc8.clone()],
            &[35, 91],
            &frame,
            false,
        )
        .unwrap();
        assert_eq!(stack.scales[0].map.shape(), &[5, 1, 1]);
        assert_eq!(stack.scales[1].map.shape(), &[5, 8, 8]);
        let err = forward_multiscale(&spec, &fcn, &[fc8], &[20], &frame, false).unwrap_err();
        assert!(format!("{err}").contains("canonical"));
    }

    #[test]
    fn mutating_shared_layers_moves_every_scale() {
        let spec = mininet(3);
        let params = build_classifier(&spec, 11).unwrap();
        let fcn = convert_to_fcn(&spec, &params).unwrap();
        let fc8_a = fcn.layers[10].clone().unwrap();
        let mut fc8_b = fc8_a.clone();
        let frame = random_frame(40, 6);
        let base = forward_multiscale(
            &spec,
            &fcn,
            &[fc8_a.clone(), fc8_b.clone()],
            &[35, 91],
            &frame,
            false,
        )
        .unwrap();

        // shared fc7 mutation changes both scales; a large bias bump is
        // visible regardless of which relu units the probe frame activates
        let mut shared2 = fcn.clone();
        shared2.layers[8].as_mut().unwrap().bias.data_mut()[0] += 5.0;
        let moved = forward_multiscale(
            &spec,
            &shared2,
            &[fc8_a.clone(), fc8_b.clone()],
            &[35, 91],
            &frame,
            false,
        )
        .unwrap();
        assert_ne!(base.scales[0].map.data(), moved.scales[0].map.data());
        assert_ne!(base.scales[1].map.data(), moved.scales[1].map.data());

        // per-scale head mutation changes only its own scale; the bias bump
        // shifts concept 0's logit unconditionally
        fc8_b.bias.data_mut()[0] += 0.5;
        let partial =
            forward_multiscale(&spec, &fcn, &[fc8_a, fc8_b], &[35, 91], &frame, false).unwrap();
        assert_eq!(base.scales[0].map.data(), partial.scales[0].map.data());
        assert_ne!(base.scales[1].map.data(), partial.scales[1].map.data());
    }

    #[test]
    fn five_crop_takes_the_max_over_patches() {
        let spec = mininet(4);
        let params = build_classifier(&spec, 13).unwrap();
        let fcn = convert_to_fcn(&spec, &params).unwrap();
        let fc8 = fcn.layers[10].clone().unwrap();
        let frame = random_frame(40, 9);
        let stack =
            forward_multiscale(&spec, &fcn, &[fc8.clone()], &[35], &frame, true).unwrap();
        // oracle: evaluate each crop separately, take elementwise max
        let last = spec.layers.len() - 1;
        let mut want = vec![f32::NEG_INFINITY; 4];
        for (y0, x0) in five_crop_offsets(40, 35).unwrap() {
            let patch = crop(&frame, y0, x0, 35).unwrap();
            let feats = fcn_forward_pure(&spec, &fcn, &patch, 0, last).unwrap();
            let logits = ops::conv2d_forward(&feats, &fc8.weight, &fc8.bias, 1, 0);
            for (w, l) in want.iter_mut().zip(logits.data()) {
                *w = w.max(*l);
            }
        }
        assert_eq!(stack.scales[0].map.data(), &want[..]);
    }

    #[test]
    fn five_crop_on_constant_frame_equals_plain_path() {
        let spec = mininet(3);
        let params = build_classifier(&spec, 21).unwrap();
        let fcn = convert_to_fcn(&spec, &params).unwrap();
        let fc8 = fcn.layers[10].clone().unwrap();
        let frame = Tensor::filled(vec![3, 40, 40], 0.3);
        let plain =
            forward_multiscale(&spec, &fcn, &[fc8.clone()], &[35], &frame, false).unwrap();
        let crops = forward_multiscale(&spec, &fcn, &[fc8], &[35], &frame, true).unwrap();
        for (a, b) in plain.scales[0].map.data().iter().zip(crops.scales[0].map.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn frozen_registration_gets_no_gradients() {
        let spec = mininet(3);
        let params = build_classifier(&spec, 2).unwrap();
        let mut tape = Tape::new();
        // freeze everything except the final layer
        let last = spec.layers.len() - 1;
        let taped = register(&mut tape, &params, |i| i == last);
        let input = tape.constant(random_frame(35, 1));
        let logits = classifier_forward_taped(&mut tape, &spec, &taped, input).unwrap();
        let loss = ops::softmax_cross_entropy(&mut tape, logits, 0).unwrap();
        tape.backward(loss).unwrap();
        let fc8 = taped.layers[last].as_ref().unwrap();
        assert!(tape.grad(fc8.weight).is_some());
        assert!(tape.grad(fc8.bias).is_some());
        let conv1 = taped.layers[0].as_ref().unwrap();
        assert!(tape.grad(conv1.weight).is_none());
        let fc7 = taped.layers[8].as_ref().unwrap();
        assert!(tape.grad(fc7.weight).is_none());
    }

    #[test]
    fn taped_and_pure_fcn_forwards_agree() {
        let spec = mininet(6);
        let params = build_classifier(&spec, 31).unwrap();
        let fcn = convert_to_fcn(&spec, &params).unwrap();
        let input = random_frame(43, 17);
        let pure = fcn_forward_pure(&spec, &fcn, &input, 0, spec.layers.len()).unwrap();
        let mut tape = Tape::new();
        let taped = register(&mut tape, &fcn, |_| false);
        let iv = tape.constant(input);
        let out = fcn_forward_taped(&mut tape, &spec, &taped, iv, 0, spec.layers.len()).unwrap();
        assert_eq!(tape.value(out).shape(), pure.shape());
        assert_eq!(tape.value(out).data(), pure.data());
    }
}
