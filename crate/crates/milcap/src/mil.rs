//! Multiple-instance pooling: per-concept max over a score map's spatial
//! positions, then an elementwise max across scales. Gradients route
//! winner-take-all, so weak supervision at the frame level reaches exactly
//! one (scale, position) instance per concept.
//!
//! Tie conventions inherited from the ops layer: within a map, the first
//! maximum in row-major order wins; across scales, the earliest scale in
//! the configured order wins.

use crate::error::{Error, Result};
use crate::model::ScoreMapStack;
use crate::net::NetworkSpec;
use crate::ops;
use crate::tape::{Tape, Var};

/// Per-concept spatial max of a [N, h, h] score map. Returns the pooled
/// vector and the winning (x, y) map coordinates per concept.
pub fn mil_over_locations(tape: &mut Tape, map: Var) -> Result<(Var, Vec<(usize, usize)>)> {
    let shape = tape.value(map).shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Shape(format!(
            "mil_over_locations wants a square [N, h, h] map, got {shape:?}"
        )));
    }
    let h = shape[1];
    let (v, flat) = ops::spatial_max(tape, map)?;
    let coords = flat.iter().map(|&i| (i % h, i / h)).collect();
    Ok((v, coords))
}

/// Elementwise max across per-scale concept vectors. Returns the combined
/// vector and, per concept, the index of the winning scale (earliest scale
/// on ties).
pub fn mil_over_scales(tape: &mut Tape, vecs: &[Var]) -> Result<(Var, Vec<usize>)> {
    let first = *vecs
        .first()
        .ok_or_else(|| Error::InvalidArg("mil_over_scales wants at least one scale".into()))?;
    let n = tape.value(first).numel();
    for &v in &vecs[1..] {
        if tape.value(v).shape() != tape.value(first).shape() {
            return Err(Error::Shape(format!(
                "mil_over_scales length mismatch: {:?} vs {:?}",
                tape.value(first).shape(),
                tape.value(v).shape()
            )));
        }
    }
    let mut acc = first;
    let mut winners = vec![0usize; n];
    for (k, &v) in vecs.iter().enumerate().skip(1) {
        let (next, b_wins) = ops::elementwise_max(tape, acc, v)?;
        for (w, bw) in winners.iter_mut().zip(&b_wins) {
            if *bw {
                *w = k;
            }
        }
        acc = next;
    }
    Ok((acc, winners))
}

/// Full MIL reduction of a stack of per-scale maps already on the tape:
/// locations first, then scales. This is the v_t the captioner consumes.
pub fn mil_taped(tape: &mut Tape, maps: &[Var]) -> Result<Var> {
    let mut vecs = Vec::with_capacity(maps.len());
    for &m in maps {
        vecs.push(mil_over_locations(tape, m)?.0);
    }
    Ok(mil_over_scales(tape, &vecs)?.0)
}

/// One concept's winning instance, with its receptive-field box mapped back
/// to original-frame pixel coordinates.
#[derive(Clone, Debug)]
pub struct ConceptWin {
    pub value: f32,
    pub scale_index: usize,
    pub input_size: usize,
    /// Map-cell coordinates within the winning scale.
    pub x: usize,
    pub y: usize,
    /// [x0, y0, x1, y1] in frame pixel-center coordinates, clipped.
    pub box_frame: [f64; 4],
}

#[derive(Clone, Debug)]
pub struct MilResult {
    pub v: Vec<f32>,
    pub winners: Vec<ConceptWin>,
}

/// Introspection pass over a computed stack: per concept, scan every
/// (scale, position) instance with the same tie rules the differentiable
/// path uses, and report the winner plus its receptive-field box.
///
/// Boxes: the winning cell's receptive field in the resized input is
/// centered at offset + x*jump with half-width rf/2, clipped to the input,
/// then mapped to frame coordinates by the corner-aligned resize factor
/// (frame_size - 1)/(input_size - 1). No gradients flow here.
pub fn mil_introspect(
    spec: &NetworkSpec,
    stack: &ScoreMapStack,
    frame_size: usize,
) -> Result<MilResult> {
    let first = stack
        .scales
        .first()
        .ok_or_else(|| Error::InvalidArg("empty score-map stack".into()))?;
    let n = first.map.shape()[0];
    for s in &stack.scales {
        if s.map.shape()[0] != n {
            return Err(Error::Shape(format!(
                "stack concept counts differ: {} vs {}",
                n,
                s.map.shape()[0]
            )));
        }
    }
    let mut winners = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for c in 0..n {
        let mut best_val = f32::NEG_INFINITY;
        let mut best: Option<(usize, usize, usize)> = None; // (scale, x, y)
        for (si, scale) in stack.scales.iter().enumerate() {
            let h = scale.map.shape()[1];
            let plane = &scale.map.data()[c * h * h..(c + 1) * h * h];
            for (i, &val) in plane.iter().enumerate() {
                if val > best_val {
                    best_val = val;
                    best = Some((si, i % h, i / h));
                }
            }
        }
        let (si, x, y) = best.expect("non-empty maps");
        let scale = &stack.scales[si];
        let geom = spec.geometry(scale.input_size)?;
        let half = geom.receptive_field as f64 / 2.0;
        let cx = geom.center_offset + (x * geom.jump) as f64;
        let cy = geom.center_offset + (y * geom.jump) as f64;
        let lim = (scale.input_size - 1) as f64;
        let factor = if scale.input_size > 1 {
            (frame_size - 1) as f64 / lim
        } else {
            0.0
        };
        let clip = |v: f64| v.clamp(0.0, lim) * factor;
        winners.push(ConceptWin {
            value: best_val,
            scale_index: si,
            input_size: scale.input_size,
            x,
            y,
            box_frame: [clip(cx - half), clip(cy - half), clip(cx + half), clip(cy + half)],
        });
        v.push(best_val);
    }
    Ok(MilResult { v, winners })
}
