//! Finite-difference verification of every backward rule the model relies
//! on. Each check builds a scalar mean loss, runs the tape's backward pass,
//! then re-evaluates the loss at +/- epsilon per coordinate and compares
//! central differences against the analytic gradient.
//!
//! Inputs come from a shuffled midpoint grid -1+(2i+1)/n over all checked
//! coordinates: every value is distinct, none sits at zero, and the gap
//! between any two (at least 2/n, far above 2*epsilon for our sizes) keeps
//! max-style ops from flipping winners inside the probe interval. Losses
//! are means rather than sums so the f32 rounding noise accumulated in the
//! forward pass shrinks along with the signal.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lstm::{self, Caption, LstmDims, TapedCell, TapedLstm};
use crate::mil;
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

pub const EPSILON: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpGroup {
    All,
    Conv,
    Lstm,
    Mil,
}

impl OpGroup {
    pub fn parse(s: &str) -> Option<OpGroup> {
        match s {
            "all" => Some(OpGroup::All),
            "conv" => Some(OpGroup::Conv),
            "lstm" => Some(OpGroup::Lstm),
            "mil" => Some(OpGroup::Mil),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub instances: usize,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {} max_rel_err={:.3e} instances={}",
            if self.pass { "pass" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.instances
        )
    }
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Instance {
    shapes: Vec<Vec<usize>>,
    build: Builder,
}

/// Mean of all elements: sum then scale by 1/n.
fn mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    let s = ops::sum(tape, x)?;
    ops::scale(tape, s, 1.0 / n as f32)
}

fn midpoint_grid(total: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = total + total % 2; // even count keeps the grid symmetric around 0
    let mut grid: Vec<f32> = (0..n).map(|i| -1.0 + (2 * i + 1) as f32 / n as f32).collect();
    grid.shuffle(rng);
    grid.truncate(total);
    grid
}

fn run_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<f64> {
    let total: usize = inst.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let grid = midpoint_grid(total, rng);
    let mut leaves = Vec::with_capacity(inst.shapes.len());
    let mut at = 0;
    for shape in &inst.shapes {
        let k: usize = shape.iter().product();
        leaves.push(Tensor::new(shape.clone(), grid[at..at + k].to_vec())?);
        at += k;
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = (inst.build)(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("checked leaf has a gradient").to_vec())
        .collect();

    let eval = |leaves: &[Tensor]| -> Result<f32> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = (inst.build)(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut max_rel = 0.0f64;
    for (ti, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let mut probe = leaves.clone();
            probe[ti].data_mut()[j] += EPSILON;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] -= 2.0 * EPSILON;
            let down = eval(&probe)?;
            let numeric = (up as f64 - down as f64) / (2.0 * EPSILON as f64);
            let analytic = grad[j] as f64;
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn check(name: &str, instances: Vec<Instance>, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut max_rel = 0.0f64;
    for inst in &instances {
        max_rel = max_rel.max(run_instance(inst, rng)?);
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        instances: instances.len(),
        pass: max_rel <= TOLERANCE && instances.len() >= 5,
    })
}

fn conv2d_instances() -> Vec<Instance> {
    let cases = [
        (1usize, 5usize, 5usize, 2usize, 3usize, 1usize, 1usize),
        (2, 6, 6, 3, 3, 2, 1),
        (3, 4, 4, 2, 2, 1, 0),
        (2, 5, 7, 1, 3, 1, 2),
        (1, 7, 7, 2, 5, 2, 0),
    ];
    cases
        .into_iter()
        .map(|(ci, h, w, co, k, stride, pad)| Instance {
            shapes: vec![vec![ci, h, w], vec![co, ci, k, k], vec![co]],
            build: Box::new(move |tape, vars| {
                let y = ops::conv2d(tape, vars[0], vars[1], vars[2], stride, pad)?;
                mean(tape, y)
            }),
        })
        .collect()
}

fn maxpool_instances() -> Vec<Instance> {
    let cases = [(2usize, 6usize, 2usize, 2usize), (1, 7, 3, 2), (3, 5, 2, 1), (2, 8, 3, 3), (1, 4, 4, 4)];
    cases
        .into_iter()
        .map(|(c, s, k, stride)| Instance {
            shapes: vec![vec![c, s, s]],
            build: Box::new(move |tape, vars| {
                let (y, _) = ops::maxpool2d(tape, vars[0], k, stride)?;
                mean(tape, y)
            }),
        })
        .collect()
}

fn eltmax_instances() -> Vec<Instance> {
    [8usize, 24, 31, 50, 3]
        .into_iter()
        .map(|n| Instance {
            shapes: vec![vec![n], vec![n]],
            build: Box::new(|tape, vars| {
                let (y, _) = ops::elementwise_max(tape, vars[0], vars[1])?;
                mean(tape, y)
            }),
        })
        .collect()
}

fn mil_location_instances() -> Vec<Instance> {
    [(3usize, 4usize), (4, 5), (2, 7), (5, 2), (1, 3)]
        .into_iter()
        .map(|(n, h)| Instance {
            shapes: vec![vec![n, h, h]],
            build: Box::new(|tape, vars| {
                let (v, _) = mil::mil_over_locations(tape, vars[0])?;
                mean(tape, v)
            }),
        })
        .collect()
}

fn mil_scale_instances() -> Vec<Instance> {
    let stacks: [&[usize]; 5] = [&[4, 2, 1], &[5, 3], &[3, 2, 2, 1], &[2, 2], &[6, 1, 1]];
    stacks
        .into_iter()
        .map(|heights| {
            let n = 3usize;
            Instance {
                shapes: heights.iter().map(|&h| vec![n, h, h]).collect(),
                build: Box::new(|tape, vars| {
                    let v = mil::mil_taped(tape, vars)?;
                    mean(tape, v)
                }),
            }
        })
        .collect()
}

fn lstm_cell_instances() -> Vec<Instance> {
    [(3usize, 4usize), (2, 5), (4, 3), (1, 2), (5, 4)]
        .into_iter()
        .map(|(input, hidden)| Instance {
            shapes: vec![
                vec![4 * hidden, input + hidden],
                vec![4 * hidden],
                vec![input],
                vec![hidden],
                vec![hidden],
            ],
            build: Box::new(move |tape, vars| {
                let cell = TapedCell { weight: vars[0], bias: vars[1] };
                let (h, c) = lstm::cell_step(tape, &cell, hidden, vars[2], vars[3], vars[4])?;
                let hc = ops::concat(tape, h, c)?;
                mean(tape, hc)
            }),
        })
        .collect()
}

/// The whole captioning pipeline at toy width: two visual vectors encoded,
/// a two-step caption teacher-forced, gradients checked for every LSTM
/// parameter and both visual inputs.
fn encode_decode_instances() -> Vec<Instance> {
    let dims = LstmDims { visual: 3, hidden: 4, embed: 3, vocab: 5 };
    (0..5)
        .map(|i| {
            let word = 3 + i % 2; // vary the gold caption across instances
            Instance {
                shapes: vec![
                    vec![4 * dims.hidden, dims.visual + dims.hidden],
                    vec![4 * dims.hidden],
                    vec![4 * dims.hidden, dims.hidden + dims.embed + dims.hidden],
                    vec![4 * dims.hidden],
                    vec![dims.vocab, dims.embed],
                    vec![dims.vocab, dims.hidden],
                    vec![dims.visual],
                    vec![dims.visual],
                ],
                build: Box::new(move |tape, vars| {
                    let lstm = TapedLstm {
                        dims,
                        l1: TapedCell { weight: vars[0], bias: vars[1] },
                        l2: TapedCell { weight: vars[2], bias: vars[3] },
                        embedding: vars[4],
                        output: vars[5],
                    };
                    let states = lstm::encode(tape, &lstm, &[vars[6], vars[7]])?;
                    let caption = Caption::new(vec![BOS, word, EOS])?;
                    let tf = lstm::decode_teacher_forced(tape, &lstm, states, &caption)?;
                    Ok(tf.mean_loss)
                }),
            }
        })
        .collect()
}

/// Run the selected group of checks. Deterministic: the probe values are
/// seeded per check name.
pub fn run(group: OpGroup) -> Result<Vec<GradCheckReport>> {
    let all: Vec<(&str, OpGroup, fn() -> Vec<Instance>)> = vec![
        ("conv2d", OpGroup::Conv, conv2d_instances),
        ("maxpool2d", OpGroup::Conv, maxpool_instances),
        ("elementwise_max", OpGroup::Mil, eltmax_instances),
        ("mil_locations", OpGroup::Mil, mil_location_instances),
        ("mil_scales", OpGroup::Mil, mil_scale_instances),
        ("lstm_cell", OpGroup::Lstm, lstm_cell_instances),
        ("encode_decode", OpGroup::Lstm, encode_decode_instances),
    ];
    let mut out = Vec::new();
    for (i, (name, g, make)) in all.into_iter().enumerate() {
        if group != OpGroup::All && group != g {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1729 + i as u64);
        out.push(check(name, make(), &mut rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_at_tolerance() {
        let reports = run(OpGroup::All).unwrap();
        assert_eq!(reports.len(), 7);
        for r in &reports {
            assert!(r.pass, "{}", r.line());
            assert!(r.instances >= 5, "{}", r.line());
            assert!(r.max_rel_err > 0.0, "finite differences measured nothing: {}", r.line());
        }
    }

    #[test]
    fn groups_filter_the_check_list() {
        let conv: Vec<String> = run(OpGroup::Conv).unwrap().into_iter().map(|r| r.name).collect();
        assert_eq!(conv, ["conv2d", "maxpool2d"]);
        let mil: Vec<String> = run(OpGroup::Mil).unwrap().into_iter().map(|r| r.name).collect();
        assert_eq!(mil, ["elementwise_max", "mil_locations", "mil_scales"]);
        let lstm: Vec<String> = run(OpGroup::Lstm).unwrap().into_iter().map(|r| r.name).collect();
        assert_eq!(lstm, ["lstm_cell", "encode_decode"]);
    }

    #[test]
    fn reports_are_deterministic() {
        let a = run(OpGroup::Mil).unwrap();
        let b = run(OpGroup::Mil).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.name, rb.name);
            assert_eq!(ra.max_rel_err.to_bits(), rb.max_rel_err.to_bits());
        }
    }

    #[test]
    fn op_group_parsing() {
        assert_eq!(OpGroup::parse("all"), Some(OpGroup::All));
        assert_eq!(OpGroup::parse("conv"), Some(OpGroup::Conv));
        assert_eq!(OpGroup::parse("lstm"), Some(OpGroup::Lstm));
        assert_eq!(OpGroup::parse("mil"), Some(OpGroup::Mil));
        assert_eq!(OpGroup::parse("bogus"), None);
    }
}
