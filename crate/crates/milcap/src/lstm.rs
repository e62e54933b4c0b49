//! Two-layer encoder-decoder LSTM. Layer 1 consumes the per-frame visual
//! vector (zeros while decoding); layer 2 consumes layer 1's hidden state
//! concatenated with the previous word's embedding (zeros while encoding).
//! A linear projection of layer 2's hidden state scores the vocabulary.
//!
//! Gate packing within each cell's [4H, in+H] weight: input, forget,
//! output, candidate, in that row order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::he_uniform;
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmDims {
    /// Width of the visual vector (the concept count N).
    pub visual: usize,
    /// Hidden width of both layers.
    pub hidden: usize,
    /// Word-embedding width.
    pub embed: usize,
    /// Vocabulary size |D|.
    pub vocab: usize,
}

#[derive(Clone, Debug)]
pub struct CellParams {
    /// [4*hidden, input + hidden]
    pub weight: Tensor,
    /// [4*hidden]
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub dims: LstmDims,
    pub l1: CellParams,
    pub l2: CellParams,
    /// [vocab, embed]
    pub embedding: Tensor,
    /// [vocab, hidden]; no bias, logits are a pure projection.
    pub output: Tensor,
}

impl LstmParams {
    /// He-uniform weights, zero biases. The RNG stream is consumed in the
    /// fixed order l1, l2, embedding, output so a seed pins every value.
    pub fn init(dims: LstmDims, seed: u64) -> Result<LstmParams> {
        if dims.visual == 0 || dims.hidden == 0 || dims.embed == 0 || dims.vocab < 4 {
            return Err(Error::InvalidArg(format!(
                "bad captioner dimensions: visual {}, hidden {}, embed {}, vocab {}",
                dims.visual, dims.hidden, dims.embed, dims.vocab
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = dims.hidden;
        let in1 = dims.visual + h;
        let in2 = h + dims.embed + h;
        Ok(LstmParams {
            dims,
            l1: CellParams {
                weight: he_uniform(vec![4 * h, in1], in1, &mut rng),
                bias: Tensor::zeros(vec![4 * h]),
            },
            l2: CellParams {
                weight: he_uniform(vec![4 * h, in2], in2, &mut rng),
                bias: Tensor::zeros(vec![4 * h]),
            },
            embedding: he_uniform(vec![dims.vocab, dims.embed], dims.embed, &mut rng),
            output: he_uniform(vec![dims.vocab, h], h, &mut rng),
        })
    }

    /// All-zero parameters; handy for the degenerate-case tests.
    pub fn zeros(dims: LstmDims) -> LstmParams {
        let h = dims.hidden;
        LstmParams {
            dims,
            l1: CellParams {
                weight: Tensor::zeros(vec![4 * h, dims.visual + h]),
                bias: Tensor::zeros(vec![4 * h]),
            },
            l2: CellParams {
                weight: Tensor::zeros(vec![4 * h, h + dims.embed + h]),
                bias: Tensor::zeros(vec![4 * h]),
            },
            embedding: Tensor::zeros(vec![dims.vocab, dims.embed]),
            output: Tensor::zeros(vec![dims.vocab, h]),
        }
    }
}

pub struct TapedCell {
    pub weight: Var,
    pub bias: Var,
}

pub struct TapedLstm {
    pub dims: LstmDims,
    pub l1: TapedCell,
    pub l2: TapedCell,
    pub embedding: Var,
    pub output: Var,
}

/// Put the captioner's parameters on a tape, as gradient leaves or frozen
/// constants.
pub fn register(tape: &mut Tape, params: &LstmParams, trainable: bool) -> TapedLstm {
    let mut put = |t: &Tensor| {
        if trainable {
            tape.leaf(t.clone().with_grad())
        } else {
            tape.constant(t.clone())
        }
    };
    TapedLstm {
        dims: params.dims,
        l1: TapedCell { weight: put(&params.l1.weight), bias: put(&params.l1.bias) },
        l2: TapedCell { weight: put(&params.l2.weight), bias: put(&params.l2.bias) },
        embedding: put(&params.embedding),
        output: put(&params.output),
    }
}

/// One LSTM step: i,f,o = sigmoid, g = tanh of the packed affine map of
/// [x; h_prev]; c = f*c_prev + i*g; h = o*tanh(c).
pub fn cell_step(
    tape: &mut Tape,
    cell: &TapedCell,
    hidden: usize,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let in_width = tape.value(x).numel();
    let w_shape = tape.value(cell.weight).shape().to_vec();
    if w_shape != [4 * hidden, in_width + hidden] {
        return Err(Error::Shape(format!(
            "cell weight {:?} does not accept input {} + hidden {}",
            w_shape, in_width, hidden
        )));
    }
    let xh = ops::concat(tape, x, h_prev)?;
    let z = ops::matmul(tape, cell.weight, xh)?;
    let pre = ops::add(tape, z, cell.bias)?;
    let i = ops::slice(tape, pre, 0, hidden)?;
    let i = ops::sigmoid(tape, i)?;
    let f = ops::slice(tape, pre, hidden, hidden)?;
    let f = ops::sigmoid(tape, f)?;
    let o = ops::slice(tape, pre, 2 * hidden, hidden)?;
    let o = ops::sigmoid(tape, o)?;
    let g = ops::slice(tape, pre, 3 * hidden, hidden)?;
    let g = ops::tanh(tape, g)?;
    let fc = ops::mul(tape, f, c_prev)?;
    let ig = ops::mul(tape, i, g)?;
    let c = ops::add(tape, fc, ig)?;
    let tc = ops::tanh(tape, c)?;
    let h = ops::mul(tape, o, tc)?;
    Ok((h, c))
}

/// Hidden and cell states of both layers.
#[derive(Clone, Copy)]
pub struct States {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
}

pub fn zero_states(tape: &mut Tape, hidden: usize) -> States {
    let z = tape.constant(Tensor::zeros(vec![hidden]));
    States { h1: z, c1: z, h2: z, c2: z }
}

/// Encode the visual sequence. At each step layer 1 sees v_t and layer 2
/// sees [h1; zero embedding]; no word loss is computed here.
pub fn encode(tape: &mut Tape, lstm: &TapedLstm, visuals: &[Var]) -> Result<States> {
    if visuals.is_empty() {
        return Err(Error::InvalidArg("encode wants at least one visual vector".into()));
    }
    let h = lstm.dims.hidden;
    let mut s = zero_states(tape, h);
    let zero_embed = tape.constant(Tensor::zeros(vec![lstm.dims.embed]));
    for &v in visuals {
        let (h1, c1) = cell_step(tape, &lstm.l1, h, v, s.h1, s.c1)?;
        let x2 = ops::concat(tape, h1, zero_embed)?;
        let (h2, c2) = cell_step(tape, &lstm.l2, h, x2, s.h2, s.c2)?;
        s = States { h1, c1, h2, c2 };
    }
    Ok(s)
}

/// A well-formed token sequence: begins with BOS, ends with the single EOS,
/// no padding anywhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption(Vec<usize>);

impl Caption {
    pub fn new(tokens: Vec<usize>) -> Result<Caption> {
        if tokens.len() < 2 {
            return Err(Error::InvalidArg(
                "caption needs at least the begin and end markers".into(),
            ));
        }
        if tokens[0] != BOS {
            return Err(Error::InvalidArg("caption must begin with the BOS marker".into()));
        }
        if *tokens.last().unwrap() != EOS {
            return Err(Error::InvalidArg("caption must end with the EOS marker".into()));
        }
        if tokens[..tokens.len() - 1].iter().any(|&t| t == EOS) {
            return Err(Error::InvalidArg("caption has an interior EOS marker".into()));
        }
        if tokens.iter().any(|&t| t == PAD) {
            return Err(Error::InvalidArg("caption contains padding".into()));
        }
        Ok(Caption(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    /// Decode steps this caption trains: everything after BOS.
    pub fn step_count(&self) -> usize {
        self.0.len() - 1
    }
}

pub struct TeacherForced {
    /// Scalar mean loss over the decode steps, on the tape.
    pub mean_loss: Var,
    /// Per-step cross-entropies, as plain numbers.
    pub step_losses: Vec<f32>,
    /// Per-step vocabulary logits, on the tape.
    pub logits: Vec<Var>,
}

/// Teacher-forced decode: layer 1 sees a zero visual vector, layer 2 sees
/// [h1; embedding of the previous gold token]; the loss is the mean
/// cross-entropy of each step's logits against the next gold token.
pub fn decode_teacher_forced(
    tape: &mut Tape,
    lstm: &TapedLstm,
    states: States,
    caption: &Caption,
) -> Result<TeacherForced> {
    let h = lstm.dims.hidden;
    let toks = caption.tokens();
    let steps = caption.step_count();
    let zero_visual = tape.constant(Tensor::zeros(vec![lstm.dims.visual]));
    let mut s = states;
    let mut total: Option<Var> = None;
    let mut step_losses = Vec::with_capacity(steps);
    let mut logits_all = Vec::with_capacity(steps);
    for i in 0..steps {
        let (h1, c1) = cell_step(tape, &lstm.l1, h, zero_visual, s.h1, s.c1)?;
        let e = ops::select_row(tape, lstm.embedding, toks[i])?;
        let x2 = ops::concat(tape, h1, e)?;
        let (h2, c2) = cell_step(tape, &lstm.l2, h, x2, s.h2, s.c2)?;
        s = States { h1, c1, h2, c2 };
        let logits = ops::matmul(tape, lstm.output, h2)?;
        let loss = ops::softmax_cross_entropy(tape, logits, toks[i + 1])?;
        step_losses.push(tape.value(loss).data()[0]);
        logits_all.push(logits);
        total = Some(match total {
            None => loss,
            Some(t) => ops::add(tape, t, loss)?,
        });
    }
    let total = total.expect("caption has at least one step");
    let mean_loss = ops::scale(tape, total, 1.0 / steps as f32)?;
    Ok(TeacherForced { mean_loss, step_losses, logits: logits_all })
}

/// Greedy decoding on a scratch tape: encode the visuals, then repeatedly
/// emit the highest-scoring token (PAD and BOS masked out, ties to the
/// lowest index), feeding each emission back, until EOS or `max_len` words.
/// A truncated sequence gets EOS appended so the result is well-formed.
pub fn decode_greedy(params: &LstmParams, visuals: &[Tensor], max_len: usize) -> Result<Caption> {
    if max_len == 0 {
        return Err(Error::InvalidArg("max_len must be at least 1".into()));
    }
    let h = params.dims.hidden;
    let mut tape = Tape::new();
    let lstm = register(&mut tape, params, false);
    let vis: Vec<Var> = visuals.iter().map(|v| tape.constant(v.clone())).collect();
    let mut s = encode(&mut tape, &lstm, &vis)?;
    let zero_visual = tape.constant(Tensor::zeros(vec![params.dims.visual]));
    let mut toks = vec![BOS];
    for _ in 0..max_len {
        let prev = *toks.last().unwrap();
        let (h1, c1) = cell_step(&mut tape, &lstm.l1, h, zero_visual, s.h1, s.c1)?;
        let e = ops::select_row(&mut tape, lstm.embedding, prev)?;
        let x2 = ops::concat(&mut tape, h1, e)?;
        let (h2, c2) = cell_step(&mut tape, &lstm.l2, h, x2, s.h2, s.c2)?;
        s = States { h1, c1, h2, c2 };
        let logits = ops::matmul(&mut tape, lstm.output, h2)?;
        let scores = tape.value(logits).data();
        let mut best = EOS;
        let mut best_score = f32::NEG_INFINITY;
        for (i, &v) in scores.iter().enumerate() {
            if i == PAD || i == BOS {
                continue;
            }
            if v > best_score {
                best_score = v;
                best = i;
            }
        }
        toks.push(best);
        if best == EOS {
            break;
        }
    }
    if *toks.last().unwrap() != EOS {
        toks.push(EOS);
    }
    Caption::new(toks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_dims() -> LstmDims {
        LstmDims { visual: 3, hidden: 4, embed: 3, vocab: 6 }
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn zero_parameters_keep_states_at_zero() {
        let params = LstmParams::zeros(tiny_dims());
        let mut tape = Tape::new();
        let lstm = register(&mut tape, &params, false);
        let v = tape.constant(Tensor::vector(vec![0.3, -0.2, 0.8]));
        let s = encode(&mut tape, &lstm, &[v]).unwrap();
        assert_eq!(tape.value(s.h1).data(), &[0.0; 4]);
        assert_eq!(tape.value(s.c1).data(), &[0.0; 4]);
        assert_eq!(tape.value(s.h2).data(), &[0.0; 4]);
        assert_eq!(tape.value(s.c2).data(), &[0.0; 4]);
    }

    #[test]
    fn saturated_gates_preserve_cell_memory() {
        let dims = tiny_dims();
        let mut params = LstmParams::zeros(dims);
        let h = dims.hidden;
        // forget gate wide open, input gate slammed shut
        for j in 0..h {
            params.l1.bias.data_mut()[j] = -1000.0; // input gate rows
            params.l1.bias.data_mut()[h + j] = 1000.0; // forget gate rows
        }
        let mut tape = Tape::new();
        let lstm = register(&mut tape, &params, false);
        let x = tape.constant(Tensor::vector(vec![0.5, 0.5, 0.5]));
        let h_prev = tape.constant(Tensor::zeros(vec![4]));
        let c_prev = tape.constant(Tensor::vector(vec![0.7, -0.3, 0.1, 0.9]));
        let (_, c) = cell_step(&mut tape, &lstm.l1, 4, x, h_prev, c_prev).unwrap();
        for (got, want) in tape.value(c).data().iter().zip([0.7, -0.3, 0.1, 0.9]) {
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn cell_matches_a_double_precision_reference() {
        let dims = tiny_dims();
        let h = dims.hidden;
        let params = LstmParams::init(dims, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(dims.visual, &mut rng);
        let hp = rand_vec(h, &mut rng);
        let cp = rand_vec(h, &mut rng);

        let mut tape = Tape::new();
        let lstm = register(&mut tape, &params, false);
        let (xv, hv, cv) =
            (tape.constant(x.clone()), tape.constant(hp.clone()), tape.constant(cp.clone()));
        let (hn, cn) = cell_step(&mut tape, &lstm.l1, h, xv, hv, cv).unwrap();

        // independent f64 evaluation of the same recurrence
        let w = params.l1.weight.data();
        let b = params.l1.bias.data();
        let mut xh: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        xh.extend(hp.data().iter().map(|&v| v as f64));
        let in_w = xh.len();
        let gate = |row: usize| -> f64 {
            let mut acc = b[row] as f64;
            for (j, xv) in xh.iter().enumerate() {
                acc += w[row * in_w + j] as f64 * xv;
            }
            acc
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..h {
            let i = sig(gate(j));
            let f = sig(gate(h + j));
            let o = sig(gate(2 * h + j));
            let g = gate(3 * h + j).tanh();
            let c = f * cp.data()[j] as f64 + i * g;
            let hh = o * c.tanh();
            assert!((tape.value(cn).data()[j] as f64 - c).abs() <= 1e-5);
            assert!((tape.value(hn).data()[j] as f64 - hh).abs() <= 1e-5);
        }
    }

    #[test]
    fn cell_rejects_width_mismatch() {
        let params = LstmParams::init(tiny_dims(), 1).unwrap();
        let mut tape = Tape::new();
        let lstm = register(&mut tape, &params, false);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0])); // wants 3
        let h = tape.constant(Tensor::zeros(vec![4]));
        let c = tape.constant(Tensor::zeros(vec![4]));
        assert!(cell_step(&mut tape, &lstm.l1, 4, x, h, c).is_err());
    }

    #[test]
    fn single_frame_encode_equals_one_manual_dual_step() {
        let params = LstmParams::init(tiny_dims(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = rand_vec(3, &mut rng);

        let mut tape = Tape::new();
        let lstm = register(&mut tape, &params, false);
        let vv = tape.constant(v.clone());
        let s = encode(&mut tape, &lstm, &[vv]).unwrap();

        let mut tape2 = Tape::new();
        let lstm2 = register(&mut tape2, &params, false);
        let vv2 = tape2.constant(v);
        let z = tape2.constant(Tensor::zeros(vec![4]));
        let ze = tape2.constant(Tensor::zeros(vec![3]));
        let (h1, _c1) = cell_step(&mut tape2, &lstm2.l1, 4, vv2, z, z).unwrap();
        let x2 = ops::concat(&mut tape2, h1, ze).unwrap();
        let (h2, c2) = cell_step(&mut tape2, &lstm2.l2, 4, x2, z, z).unwrap();
        assert_eq!(tape.value(s.h2).data(), tape2.value(h2).data());
        assert_eq!(tape.value(s.c2).data(), tape2.value(c2).data());
    }

    #[test]
    fn frame_order_matters_to_the_encoder() {
        let params = LstmParams::init(tiny_dims(), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_vec(3, &mut rng);
        let b = rand_vec(3, &mut rng);
        let run = |x: &Tensor, y: &Tensor| {
            let mut tape = Tape::new();
            let lstm = register(&mut tape, &params, false);
            let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
            let s = encode(&mut tape, &lstm, &[xv, yv]).unwrap();
            tape.value(s.h2).data().to_vec()
        };
        assert_ne!(run(&a, &b), run(&b, &a));
    }

    #[test]
    fn caption_validation_rules() {
        assert!(Caption::new(vec![BOS, 4, 5, EOS]).is_ok());
        assert!(Caption::new(vec![BOS, EOS]).is_ok());
        assert!(Caption::new(vec![BOS]).is_err());
        assert!(Caption::new(vec![4, 5, EOS]).is_err());
        assert!(Caption::new(vec![BOS, 4, 5]).is_err());
        assert!(Caption::new(vec![BOS, EOS, 4, EOS]).is_err());
        assert!(Caption::new(vec![BOS, PAD, EOS]).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_vocab_per_token() {
        let dims = LstmDims { visual: 2, hidden: 3, embed: 2, vocab: 4 };
        let params = LstmParams::zeros(dims);
        let mut tape = Tape::new();
        let lstm = register(&mut tape, &params, false);
        let v = tape.constant(Tensor::zeros(vec![2]));
        let s = encode(&mut tape, &lstm, &[v]).unwrap();
        let caption = Caption::new(vec![BOS, EOS]).unwrap();
        let tf = decode_teacher_forced(&mut tape, &lstm, s, &caption).unwrap();
        assert_eq!(tf.step_losses.len(), 1);
        let got = tape.value(tf.mean_loss).data()[0];
        assert!((got - (4.0f32).ln()).abs() <= 1e-6, "got {got}");
    }

    #[test]
    fn loss_decomposes_into_per_step_terms() {
        let dims = tiny_dims();
        let params = LstmParams::init(dims, 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let lstm = register(&mut tape, &params, false);
        let vis: Vec<Var> = (0..2).map(|_| tape.constant(rand_vec(3, &mut rng))).collect();
        let s = encode(&mut tape, &lstm, &vis).unwrap();
        let caption = Caption::new(vec![BOS, 4, 5, 4, EOS]).unwrap();
        let tf = decode_teacher_forced(&mut tape, &lstm, s, &caption).unwrap();
        assert_eq!(tf.step_losses.len(), 4);
        let total: f32 = tf.step_losses.iter().sum();
        let mean = tape.value(tf.mean_loss).data()[0];
        assert!((mean * 4.0 - total).abs() <= 1e-5);

        // every decode step's softmax is a distribution
        for &lv in &tf.logits {
            let logits = tape.value(lv).data();
            let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let z: f32 = logits.iter().map(|&v| (v - m).exp()).sum();
            let p_sum: f32 = logits.iter().map(|&v| (v - m).exp() / z).sum();
            assert!((p_sum - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn one_descent_step_reduces_the_loss() {
        let dims = tiny_dims();
        let mut params = LstmParams::init(dims, 9).unwrap();
        let visual = Tensor::vector(vec![0.4, -0.7, 0.2]);
        let caption = Caption::new(vec![BOS, 4, 5, EOS]).unwrap();
        let eval = |p: &LstmParams, train: bool| -> (f32, Option<Vec<Vec<f32>>>) {
            let mut tape = Tape::new();
            let lstm = register(&mut tape, p, train);
            let v = tape.constant(visual.clone());
            let s = encode(&mut tape, &lstm, &[v]).unwrap();
            let tf = decode_teacher_forced(&mut tape, &lstm, s, &caption).unwrap();
            let loss = tape.value(tf.mean_loss).data()[0];
            if !train {
                return (loss, None);
            }
            tape.backward(tf.mean_loss).unwrap();
            let grads = [
                lstm.l1.weight,
                lstm.l1.bias,
                lstm.l2.weight,
                lstm.l2.bias,
                lstm.embedding,
                lstm.output,
            ]
            .iter()
            .map(|&v| tape.grad(v).unwrap().to_vec())
            .collect();
            (loss, Some(grads))
        };
        let (before, grads) = eval(&params, true);
        let grads = grads.unwrap();
        let lr = 0.1f32;
        for (t, g) in [
            &mut params.l1.weight,
            &mut params.l1.bias,
            &mut params.l2.weight,
            &mut params.l2.bias,
            &mut params.embedding,
            &mut params.output,
        ]
        .into_iter()
        .zip(&grads)
        {
            for (p, gv) in t.data_mut().iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
        let (after, _) = eval(&params, false);
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn zero_scores_decode_to_the_empty_caption() {
        // all-zero logits: PAD and BOS are masked, ties go to the lowest
        // index, which is EOS
        let params = LstmParams::zeros(tiny_dims());
        let v = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let cap = decode_greedy(&params, &[v], 10).unwrap();
        assert_eq!(cap.tokens(), &[BOS, EOS]);
    }

    #[test]
    fn greedy_decode_is_deterministic_and_bounded() {
        let params = LstmParams::init(tiny_dims(), 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vis: Vec<Tensor> = (0..3).map(|_| rand_vec(3, &mut rng)).collect();
        let a = decode_greedy(&params, &vis, 4).unwrap();
        let b = decode_greedy(&params, &vis, 4).unwrap();
        assert_eq!(a, b);
        // BOS + at most max_len emissions + possibly appended EOS
        assert!(a.tokens().len() <= 6);
        assert_eq!(*a.tokens().last().unwrap(), EOS);
    }

    #[test]
    fn two_video_toy_set_is_memorized_and_replayed() {
        let dims = LstmDims { visual: 2, hidden: 16, embed: 8, vocab: 8 };
        let mut params = LstmParams::init(dims, 3).unwrap();
        let videos = [
            (Tensor::vector(vec![1.0, 0.0]), Caption::new(vec![BOS, 4, 5, EOS]).unwrap()),
            (Tensor::vector(vec![0.0, 1.0]), Caption::new(vec![BOS, 6, 7, 5, EOS]).unwrap()),
        ];
        let lr = 0.5f32;
        for step in 0..400 {
            let (v, cap) = &videos[step % 2];
            let mut tape = Tape::new();
            let lstm = register(&mut tape, &params, true);
            let vv = tape.constant(v.clone());
            let s = encode(&mut tape, &lstm, &[vv]).unwrap();
            let tf = decode_teacher_forced(&mut tape, &lstm, s, cap).unwrap();
            tape.backward(tf.mean_loss).unwrap();
            for (t, var) in [
                (&mut params.l1.weight, lstm.l1.weight),
                (&mut params.l1.bias, lstm.l1.bias),
                (&mut params.l2.weight, lstm.l2.weight),
                (&mut params.l2.bias, lstm.l2.bias),
                (&mut params.embedding, lstm.embedding),
                (&mut params.output, lstm.output),
            ] {
                let g = tape.grad(var).unwrap();
                for (p, gv) in t.data_mut().iter_mut().zip(g) {
                    *p -= lr * gv;
                }
            }
        }
        for (v, cap) in &videos {
            let decoded = decode_greedy(&params, std::slice::from_ref(v), 8).unwrap();
            assert_eq!(decoded.tokens(), cap.tokens(), "replay of the training caption");
        }
    }
}
