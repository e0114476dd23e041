//! Bidirectional LSTM assembled from tape primitives.
//!
//! The cell is the standard one: input/forget/output gates plus a tanh
//! candidate, gate order `[i, f, g, o]` along the 4H axis. Building the
//! recurrence out of matmul/narrow/sigmoid/tanh/mul/add nodes means the
//! backward pass comes for free from the tape and is covered by the same
//! finite-difference checks as every other op.

use super::graph::{Graph, Var};
use super::{Shape, Tensor};
use crate::error::{Result, RoseError};

/// Weights of one direction of one LSTM layer, already on the tape.
///
/// `w_ih`: [Din x 4H], `w_hh`: [H x 4H], `bias`: [1 x 4H].
#[derive(Clone, Copy)]
pub struct LstmDirectionVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// Both directions of one LSTM layer.
#[derive(Clone, Copy)]
pub struct LstmLayerVars {
    pub fwd: LstmDirectionVars,
    pub bwd: LstmDirectionVars,
}

/// A stack of bidirectional LSTM layers.
pub struct BiLstmVars {
    pub layers: Vec<LstmLayerVars>,
    pub hidden: usize,
}

/// Run `x`: [L x Din] through the stacked bidirectional LSTM; per time step
/// the two direction outputs are concatenated, giving [L x 2H]. Layer n
/// consumes the [L x 2H] output of layer n-1.
pub fn bilstm_forward(g: &mut Graph, x: Var, params: &BiLstmVars) -> Result<Var> {
    if params.layers.is_empty() {
        return Err(RoseError::Config("bilstm needs at least one layer".into()));
    }
    let mut seq = x;
    for layer in &params.layers {
        let f = lstm_direction(g, seq, layer.fwd, params.hidden, false)?;
        let b = lstm_direction(g, seq, layer.bwd, params.hidden, true)?;
        seq = g.concat(&[f, b], 1)?;
    }
    Ok(seq)
}

/// One direction over the sequence; `reverse` walks time back-to-front but
/// the output rows stay in forward time order.
fn lstm_direction(
    g: &mut Graph,
    x: Var,
    w: LstmDirectionVars,
    hidden: usize,
    reverse: bool,
) -> Result<Var> {
    let xs = g.shape(x);
    if xs.rank() != 2 {
        return Err(RoseError::Dimension(format!("lstm input must be rank 2, got {:?}", xs)));
    }
    let (steps, din) = (xs.dims()[0], xs.dims()[1]);
    let ws = g.shape(w.w_ih);
    if ws.dims() != [din, 4 * hidden] {
        return Err(RoseError::Dimension(format!(
            "lstm w_ih expects [{} x {}], got {:?}",
            din,
            4 * hidden,
            ws
        )));
    }

    // Input projections for the whole sequence in one matmul.
    let pre = g.matmul(x, w.w_ih)?;
    let pre = g.add(pre, w.bias)?;

    let mut h = g.constant(Tensor::zeros(Shape::r2(1, hidden)));
    let mut c = g.constant(Tensor::zeros(Shape::r2(1, hidden)));
    let mut outs: Vec<Option<Var>> = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let pre_t = g.narrow(pre, 0, t, 1)?;
        let rec = g.matmul(h, w.w_hh)?;
        let gates = g.add(pre_t, rec)?;
        let i_lin = g.narrow(gates, 1, 0, hidden)?;
        let f_lin = g.narrow(gates, 1, hidden, hidden)?;
        let g_lin = g.narrow(gates, 1, 2 * hidden, hidden)?;
        let o_lin = g.narrow(gates, 1, 3 * hidden, hidden)?;
        let i_gate = g.sigmoid(i_lin);
        let f_gate = g.sigmoid(f_lin);
        let cand = g.tanh(g_lin);
        let o_gate = g.sigmoid(o_lin);
        let keep = g.mul(f_gate, c)?;
        let write = g.mul(i_gate, cand)?;
        c = g.add(keep, write)?;
        let c_act = g.tanh(c);
        h = g.mul(o_gate, c_act)?;
        outs[t] = Some(h);
    }
    let rows: Vec<Var> = outs.into_iter().map(|v| v.expect("all steps visited")).collect();
    g.concat(&rows, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        let data: Vec<f32> = (0..shape.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn direction_vars(g: &mut Graph, din: usize, h: usize, rng: &mut ChaCha8Rng) -> LstmDirectionVars {
        LstmDirectionVars {
            w_ih: g.param(random_tensor(Shape::r2(din, 4 * h), rng)),
            w_hh: g.param(random_tensor(Shape::r2(h, 4 * h), rng)),
            bias: g.param(random_tensor(Shape::r2(1, 4 * h), rng)),
        }
    }

    fn zero_vars(g: &mut Graph, din: usize, h: usize) -> LstmDirectionVars {
        LstmDirectionVars {
            w_ih: g.constant(Tensor::zeros(Shape::r2(din, 4 * h))),
            w_hh: g.constant(Tensor::zeros(Shape::r2(h, 4 * h))),
            bias: g.constant(Tensor::zeros(Shape::r2(1, 4 * h))),
        }
    }

    #[test]
    fn zero_weights_and_zero_input_give_zero_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::r2(5, 3)));
        let layer = LstmLayerVars { fwd: zero_vars(&mut g, 3, 4), bwd: zero_vars(&mut g, 3, 4) };
        let params = BiLstmVars { layers: vec![layer], hidden: 4 };
        let y = bilstm_forward(&mut g, x, &params).unwrap();
        assert_eq!(g.shape(y).dims(), &[5, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_computed_cell() {
        // L = 1 reduces the recurrence to one cell step with h0 = c0 = 0:
        //   i = sigmoid(x W_i + b_i), f = sigmoid(...), g = tanh(...), o = sigmoid(...)
        //   c = i * g ; h = o * tanh(c)
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let din = 3;
        let h = 2;
        let x = g.constant(random_tensor(Shape::r2(1, din), &mut r));
        let vars = direction_vars(&mut g, din, h, &mut r);
        let params = BiLstmVars {
            layers: vec![LstmLayerVars { fwd: vars, bwd: zero_vars(&mut g, din, h) }],
            hidden: h,
        };
        let y = bilstm_forward(&mut g, x, &params).unwrap();

        let xv = g.value(x).clone();
        let wih = g.value(vars.w_ih).clone();
        let whh = g.value(vars.w_hh).clone();
        debug_assert_eq!(whh.shape().dims(), &[h, 4 * h]);
        let bias = g.value(vars.bias).clone();
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..h {
            let pre = |gate: usize| -> f64 {
                let col = gate * h + j;
                let mut acc = bias.data()[col] as f64;
                for d in 0..din {
                    acc += xv.data()[d] as f64 * wih.at2(d, col) as f64;
                }
                acc // h0 = 0 so the recurrent term vanishes
            };
            let i = sigmoid(pre(0));
            let f = sigmoid(pre(1));
            let cand = pre(2).tanh();
            let o = sigmoid(pre(3));
            let _ = f;
            let c = i * cand;
            let expect = o * c.tanh();
            let got = g.value(y).at2(0, j) as f64;
            assert!((got - expect).abs() < 1e-6, "unit {j}: {got} vs {expect}");
        }
    }

    #[test]
    fn reversing_input_swaps_directions_with_swapped_parameters() {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let (l, din, h) = (6, 2, 3);
        let x = g.constant(random_tensor(Shape::r2(l, din), &mut r));
        let a = direction_vars(&mut g, din, h, &mut r);
        let b = direction_vars(&mut g, din, h, &mut r);

        let params = BiLstmVars { layers: vec![LstmLayerVars { fwd: a, bwd: b }], hidden: h };
        let y = bilstm_forward(&mut g, x, &params).unwrap();

        // Reverse the rows of x and swap the direction parameters.
        let xv = g.value(x).clone();
        let mut rev = vec![0.0f32; l * din];
        for t in 0..l {
            rev[t * din..(t + 1) * din]
                .copy_from_slice(&xv.data()[(l - 1 - t) * din..(l - t) * din]);
        }
        let xr = g.constant(Tensor::new(Shape::r2(l, din), rev).unwrap());
        let params_swapped = BiLstmVars { layers: vec![LstmLayerVars { fwd: b, bwd: a }], hidden: h };
        let yr = bilstm_forward(&mut g, xr, &params_swapped).unwrap();

        // y[t] = [fwd_a(t), bwd_b(t)]; yr[l-1-t] = [fwd_b(l-1-t on reversed), bwd_a(...)]
        // which equals [bwd_b(t), fwd_a(t)] with the halves swapped.
        for t in 0..l {
            for j in 0..h {
                let f_orig = g.value(y).at2(t, j);
                let b_orig = g.value(y).at2(t, h + j);
                let f_rev = g.value(yr).at2(l - 1 - t, j);
                let b_rev = g.value(yr).at2(l - 1 - t, h + j);
                assert!((f_orig - b_rev).abs() < 1e-6);
                assert!((b_orig - f_rev).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_layer_bilstm_gradients_agree_with_finite_differences() {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let (l, din, h) = (4, 2, 2);
        let x = g.param(random_tensor(Shape::r2(l, din), &mut r));
        let l0 = LstmLayerVars {
            fwd: direction_vars(&mut g, din, h, &mut r),
            bwd: direction_vars(&mut g, din, h, &mut r),
        };
        let l1 = LstmLayerVars {
            fwd: direction_vars(&mut g, 2 * h, h, &mut r),
            bwd: direction_vars(&mut g, 2 * h, h, &mut r),
        };
        let params = BiLstmVars { layers: vec![l0, l1], hidden: h };
        let y = bilstm_forward(&mut g, x, &params).unwrap();
        let sq = g.square(y);
        let loss = g.mean_all(sq);
        let worst = gradcheck::check_gradients(
            &mut g,
            loss,
            &[
                ("x", x),
                ("l0.fwd.w_ih", l0.fwd.w_ih),
                ("l0.fwd.w_hh", l0.fwd.w_hh),
                ("l0.fwd.bias", l0.fwd.bias),
                ("l0.bwd.w_ih", l0.bwd.w_ih),
                ("l1.fwd.w_hh", l1.fwd.w_hh),
                ("l1.bwd.bias", l1.bwd.bias),
            ],
            1e-3,
        );
        assert!(worst < 1e-3, "bilstm gradcheck err {worst}");
    }
}
