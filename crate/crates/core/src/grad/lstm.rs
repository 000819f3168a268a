use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Weights of one LSTM cell.
///
/// Gate pre-activations are laid out `[input | forget | candidate | output]`
/// along the last axis, each `cell` wide. When the cell width differs from
/// the hidden width, `proj` maps the gated cell output down to the hidden
/// state.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `[input, 4*cell]`
    pub w_ih: Var,
    /// `[hidden, 4*cell]`
    pub w_hh: Var,
    /// `[4*cell]`
    pub bias: Var,
    /// `[cell, hidden]`, present iff `cell != hidden`.
    pub proj: Option<Var>,
}

/// One step of the canonical LSTM cell:
///
/// ```text
/// i, f, o = sigmoid(.), g = tanh(.)
/// c' = f * c + i * g
/// h' = o * tanh(c')            (projected when cell != hidden)
/// ```
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let (sx, sh, sc) = (tape.shape(x).to_vec(), tape.shape(h).to_vec(), tape.shape(c).to_vec());
    if sx.len() != 2 || sh.len() != 2 || sc.len() != 2 || sx[0] != sh[0] || sh[0] != sc[0] {
        return Err(Error::shape(
            "lstm_step",
            format!("inconsistent x {:?}, h {:?}, c {:?}", sx, sh, sc),
        ));
    }
    let cell = sc[1];
    if tape.shape(w.w_ih) != [sx[1], 4 * cell] || tape.shape(w.w_hh) != [sh[1], 4 * cell] || tape.shape(w.bias) != [4 * cell] {
        return Err(Error::shape(
            "lstm_step",
            format!(
                "weights {:?}/{:?}/{:?} do not fit input {}, hidden {}, cell {}",
                tape.shape(w.w_ih),
                tape.shape(w.w_hh),
                tape.shape(w.bias),
                sx[1],
                sh[1],
                cell
            ),
        ));
    }
    match w.proj {
        Some(p) if tape.shape(p) != [cell, sh[1]] => {
            return Err(Error::shape("lstm_step", "projection does not map cell to hidden"));
        }
        None if cell != sh[1] => {
            return Err(Error::shape("lstm_step", "cell and hidden widths differ without projection"));
        }
        _ => {}
    }

    let xi = tape.matmul(x, w.w_ih)?;
    let hh = tape.matmul(h, w.w_hh)?;
    let pre = tape.add(xi, hh)?;
    let gates = tape.add_row_bias(pre, w.bias)?;
    let i = tape.slice(gates, 1, 0, cell)?;
    let f = tape.slice(gates, 1, cell, cell)?;
    let g = tape.slice(gates, 1, 2 * cell, cell)?;
    let o = tape.slice(gates, 1, 3 * cell, cell)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let mut h_next = tape.mul(o, squashed)?;
    if let Some(p) = w.proj {
        h_next = tape.matmul(h_next, p)?;
    }
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    fn zero_weights(tape: &mut Tape, input: usize, hidden: usize) -> LstmWeights {
        LstmWeights {
            w_ih: tape.param(Tensor::zeros([input, 4 * hidden])).unwrap(),
            w_hh: tape.param(Tensor::zeros([hidden, 4 * hidden])).unwrap(),
            bias: tape.param(Tensor::zeros([4 * hidden])).unwrap(),
            proj: None,
        }
    }

    #[test]
    fn zero_fixed_point() {
        let mut tape = Tape::new();
        let w = zero_weights(&mut tape, 3, 2);
        let x = tape.constant(Tensor::zeros([1, 3])).unwrap();
        let h = tape.constant(Tensor::zeros([1, 2])).unwrap();
        let c = tape.constant(Tensor::zeros([1, 2])).unwrap();
        let (h2, c2) = lstm_step(&mut tape, x, h, c, &w).unwrap();
        assert!(tape.data(h2).iter().all(|&v| v == 0.0));
        assert!(tape.data(c2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_gates_with_unit_cell() {
        let mut tape = Tape::new();
        let w = zero_weights(&mut tape, 1, 1);
        let x = tape.constant(Tensor::zeros([1, 1])).unwrap();
        let h = tape.constant(Tensor::zeros([1, 1])).unwrap();
        let c = tape.constant(Tensor::full([1, 1], 1.0)).unwrap();
        let (h2, c2) = lstm_step(&mut tape, x, h, c, &w).unwrap();
        assert!((tape.data(c2)[0] - 0.5).abs() < 1e-15);
        assert!((tape.data(h2)[0] - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((tape.data(h2)[0] - 0.23106).abs() < 1e-5);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let mut tape = Tape::new();
        let w = zero_weights(&mut tape, 3, 2);
        let x = tape.constant(Tensor::zeros([1, 4])).unwrap();
        let h = tape.constant(Tensor::zeros([1, 2])).unwrap();
        let c = tape.constant(Tensor::zeros([1, 2])).unwrap();
        assert!(matches!(lstm_step(&mut tape, x, h, c, &w), Err(Error::Shape { .. })));
    }
}
