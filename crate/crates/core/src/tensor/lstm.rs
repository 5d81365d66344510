//! Fused LSTM op, batched over segments, with analytic BPTT backward.
//!
//! Input layout is time-major `[steps, batch, d_in]`; output is
//! `[steps, batch, hidden]` in input time order for both directions. Gate
//! columns of the weight matrices are ordered (input, forget, cell, output).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ops::{mm_acc, Op};
use super::{Node, Tensor};

pub(crate) struct LstmRecord<T: Scalar> {
    pub x: usize,
    pub wx: usize,
    pub wh: usize,
    pub b: usize,
    pub steps: usize,
    pub batch: usize,
    pub d_in: usize,
    pub hidden: usize,
    pub reverse: bool,
    // saved activations, indexed by recurrence step, each [steps, batch, hidden]
    pub i_gate: Vec<T>,
    pub f_gate: Vec<T>,
    pub g_gate: Vec<T>,
    pub o_gate: Vec<T>,
    pub c_state: Vec<T>,
    pub tanh_c: Vec<T>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Tensor<T> {
    /// One LSTM direction over a `[steps, batch, d_in]` input.
    ///
    /// `wx: [d_in, 4H]`, `wh: [H, 4H]`, `b: [4H]`. With `reverse` the
    /// recurrence runs from the last step to the first.
    pub fn lstm_dir(
        &self,
        wx: &Tensor<T>,
        wh: &Tensor<T>,
        b: &Tensor<T>,
        reverse: bool,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(Error::invalid("lstm: input must be [steps, batch, d_in]"));
        }
        let (steps, batch, d_in) = (xs[0], xs[1], xs[2]);
        if steps == 0 {
            return Err(Error::EmptySequence("lstm input has zero time steps"));
        }
        let ws = wx.shape();
        let hs = wh.shape();
        if ws.len() != 2 || ws[0] != d_in || ws[1] % 4 != 0 {
            return Err(Error::ShapeMismatch {
                op: "lstm",
                lhs: xs,
                rhs: ws,
            });
        }
        let hidden = ws[1] / 4;
        if hs != vec![hidden, 4 * hidden] || b.numel() != 4 * hidden {
            return Err(Error::ShapeMismatch {
                op: "lstm",
                lhs: ws,
                rhs: hs,
            });
        }

        let plane = batch * hidden;
        let mut i_gate = vec![T::zero(); steps * plane];
        let mut f_gate = vec![T::zero(); steps * plane];
        let mut g_gate = vec![T::zero(); steps * plane];
        let mut o_gate = vec![T::zero(); steps * plane];
        let mut c_state = vec![T::zero(); steps * plane];
        let mut tanh_c = vec![T::zero(); steps * plane];
        let mut out = vec![T::zero(); steps * plane];

        let needs = self.graph.with_tape(|t| {
            let xd = &t.nodes[self.id].data;
            let wxd = &t.nodes[wx.id].data;
            let whd = &t.nodes[wh.id].data;
            let bd = &t.nodes[b.id].data;
            let mut h = vec![T::zero(); plane];
            let mut c = vec![T::zero(); plane];
            let mut pre = vec![T::zero(); batch * 4 * hidden];
            for r in 0..steps {
                let a = if reverse { steps - 1 - r } else { r };
                for bt in 0..batch {
                    let dst = &mut pre[bt * 4 * hidden..(bt + 1) * 4 * hidden];
                    dst.copy_from_slice(bd);
                }
                mm_acc(
                    &xd[a * batch * d_in..(a + 1) * batch * d_in],
                    wxd,
                    &mut pre,
                    batch,
                    d_in,
                    4 * hidden,
                );
                mm_acc(&h, whd, &mut pre, batch, hidden, 4 * hidden);
                let base = r * plane;
                for bt in 0..batch {
                    for hu in 0..hidden {
                        let p = &pre[bt * 4 * hidden..];
                        let iv = sigmoid(p[hu]);
                        let fv = sigmoid(p[hidden + hu]);
                        let gv = p[2 * hidden + hu].tanh();
                        let ov = sigmoid(p[3 * hidden + hu]);
                        let idx = bt * hidden + hu;
                        let cv = fv * c[idx] + iv * gv;
                        let tc = cv.tanh();
                        c[idx] = cv;
                        h[idx] = ov * tc;
                        i_gate[base + idx] = iv;
                        f_gate[base + idx] = fv;
                        g_gate[base + idx] = gv;
                        o_gate[base + idx] = ov;
                        c_state[base + idx] = cv;
                        tanh_c[base + idx] = tc;
                    }
                }
                out[a * plane..(a + 1) * plane].copy_from_slice(&h);
            }
            t.nodes[self.id].needs_flow
                || t.nodes[wx.id].needs_flow
                || t.nodes[wh.id].needs_flow
                || t.nodes[b.id].needs_flow
        });

        self.graph.push(Node {
            shape: vec![steps, batch, hidden],
            data: out,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::Lstm(Box::new(LstmRecord {
                x: self.id,
                wx: wx.id,
                wh: wh.id,
                b: b.id,
                steps,
                batch,
                d_in,
                hidden,
                reverse,
                i_gate,
                f_gate,
                g_gate,
                o_gate,
                c_state,
                tanh_c,
            })),
        })
    }
}

/// Parameters of one BiLSTM layer (forward + backward direction).
pub struct BilstmParams<T: Scalar> {
    pub wx_f: Tensor<T>,
    pub wh_f: Tensor<T>,
    pub b_f: Tensor<T>,
    pub wx_b: Tensor<T>,
    pub wh_b: Tensor<T>,
    pub b_b: Tensor<T>,
}

/// Bi-directional LSTM over a `[steps, d_in]` sequence, concatenating the
/// forward and backward hidden states into `[steps, 2H]`.
pub fn bilstm<T: Scalar>(x: &Tensor<T>, p: &BilstmParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::invalid("bilstm: input must be [steps, d_in]"));
    }
    if xs[0] == 0 {
        return Err(Error::EmptySequence("bilstm input has zero time steps"));
    }
    let x3 = x.reshape(&[xs[0], 1, xs[1]])?;
    let fwd = x3.lstm_dir(&p.wx_f, &p.wh_f, &p.b_f, false)?;
    let bwd = x3.lstm_dir(&p.wx_b, &p.wh_b, &p.b_b, true)?;
    let hidden = fwd.shape()[2];
    let cat = Tensor::concat(&[&fwd, &bwd], 2)?;
    cat.reshape(&[xs[0], 2 * hidden])
}

pub(crate) fn backward_lstm<T: Scalar>(
    nodes: &[Node<T>],
    rec: &LstmRecord<T>,
    g: &[T],
    flow: &mut [Option<Vec<T>>],
) {
    let (steps, batch, d_in, hidden) = (rec.steps, rec.batch, rec.d_in, rec.hidden);
    let plane = batch * hidden;
    let wants_x = nodes[rec.x].needs_flow;
    let wants_wx = nodes[rec.wx].needs_flow;
    let wants_wh = nodes[rec.wh].needs_flow;
    let wants_b = nodes[rec.b].needs_flow;

    let xd = &nodes[rec.x].data;
    let wxd = &nodes[rec.wx].data;
    let whd = &nodes[rec.wh].data;

    let mut dx = if wants_x {
        Some(vec![T::zero(); steps * batch * d_in])
    } else {
        None
    };
    let mut dwx = if wants_wx {
        Some(vec![T::zero(); d_in * 4 * hidden])
    } else {
        None
    };
    let mut dwh = if wants_wh {
        Some(vec![T::zero(); hidden * 4 * hidden])
    } else {
        None
    };
    let mut db = if wants_b {
        Some(vec![T::zero(); 4 * hidden])
    } else {
        None
    };

    let mut dc = vec![T::zero(); plane];
    let mut dh = vec![T::zero(); plane];
    let mut dpre = vec![T::zero(); batch * 4 * hidden];
    let mut h_prev = vec![T::zero(); plane];

    for r in (0..steps).rev() {
        let a = if rec.reverse { steps - 1 - r } else { r };
        let base = r * plane;
        for bt in 0..batch {
            for hu in 0..hidden {
                let idx = bt * hidden + hu;
                let gi = base + idx;
                let dht = g[a * plane + idx] + dh[idx];
                let (iv, fv, gv, ov) = (
                    rec.i_gate[gi],
                    rec.f_gate[gi],
                    rec.g_gate[gi],
                    rec.o_gate[gi],
                );
                let tc = rec.tanh_c[gi];
                let c_prev = if r > 0 { rec.c_state[gi - plane] } else { T::zero() };
                let dct = dc[idx] + dht * ov * (T::one() - tc * tc);
                let p = &mut dpre[bt * 4 * hidden..(bt + 1) * 4 * hidden];
                p[hu] = dct * gv * iv * (T::one() - iv);
                p[hidden + hu] = dct * c_prev * fv * (T::one() - fv);
                p[2 * hidden + hu] = dct * iv * (T::one() - gv * gv);
                p[3 * hidden + hu] = dht * tc * ov * (T::one() - ov);
                dc[idx] = dct * fv;
                h_prev[idx] = if r > 0 {
                    rec.o_gate[gi - plane] * rec.tanh_c[gi - plane]
                } else {
                    T::zero()
                };
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dx[a] += dpre @ wx^T
            mm_nt(
                &dpre,
                wxd,
                &mut dx[a * batch * d_in..(a + 1) * batch * d_in],
                batch,
                4 * hidden,
                d_in,
            );
        }
        if let Some(dwx) = dwx.as_mut() {
            // dwx += x[a]^T @ dpre
            mm_tn(
                &xd[a * batch * d_in..(a + 1) * batch * d_in],
                &dpre,
                dwx,
                batch,
                d_in,
                4 * hidden,
            );
        }
        if let Some(dwh) = dwh.as_mut() {
            mm_tn(&h_prev, &dpre, dwh, batch, hidden, 4 * hidden);
        }
        if let Some(db) = db.as_mut() {
            for bt in 0..batch {
                for (o, &v) in db
                    .iter_mut()
                    .zip(dpre[bt * 4 * hidden..(bt + 1) * 4 * hidden].iter())
                {
                    *o = *o + v;
                }
            }
        }
        // dh(prev step) = dpre @ wh^T
        for v in dh.iter_mut() {
            *v = T::zero();
        }
        mm_nt(&dpre, whd, &mut dh, batch, 4 * hidden, hidden);
    }

    if let Some(dx) = dx {
        acc_flow(flow, rec.x, dx);
    }
    if let Some(dwx) = dwx {
        acc_flow(flow, rec.wx, dwx);
    }
    if let Some(dwh) = dwh {
        acc_flow(flow, rec.wh, dwh);
    }
    if let Some(db) = db {
        acc_flow(flow, rec.b, db);
    }
}

fn acc_flow<T: Scalar>(flow: &mut [Option<Vec<T>>], id: usize, contrib: Vec<T>) {
    match &mut flow[id] {
        Some(buf) => {
            for (o, v) in buf.iter_mut().zip(contrib.into_iter()) {
                *o = *o + v;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

// out (m×p) += a (m×n) @ b^T with b (p×n)
fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (l, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            let dot: T = a_row.iter().zip(b_row.iter()).map(|(&x, &y)| x * y).sum();
            *o = *o + dot;
        }
    }
}

// out (k×n) += a^T @ b with a (m×k), b (m×n)
fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == T::zero() {
                continue;
            }
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_il * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn zero_params(g: &Graph<f64>, d_in: usize, h: usize) -> BilstmParams<f64> {
        BilstmParams {
            wx_f: g.leaf(vec![0.0; d_in * 4 * h], &[d_in, 4 * h]).unwrap(),
            wh_f: g.leaf(vec![0.0; h * 4 * h], &[h, 4 * h]).unwrap(),
            b_f: g.leaf(vec![0.0; 4 * h], &[4 * h]).unwrap(),
            wx_b: g.leaf(vec![0.0; d_in * 4 * h], &[d_in, 4 * h]).unwrap(),
            wh_b: g.leaf(vec![0.0; h * 4 * h], &[h, 4 * h]).unwrap(),
            b_b: g.leaf(vec![0.0; 4 * h], &[4 * h]).unwrap(),
        }
    }

    #[test]
    fn zero_input_zero_params_gives_zero_output() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(vec![0.0; 5 * 3], &[5, 3]).unwrap();
        let p = zero_params(&g, 3, 2);
        let y = bilstm(&x, &p).unwrap();
        assert_eq!(y.shape(), vec![5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_cell_formula() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(vec![0.4, -0.2], &[1, 2]).unwrap();
        let d_in = 2;
        let h = 1;
        let wx: Vec<f64> = vec![0.3, -0.1, 0.5, 0.2, 0.1, 0.4, -0.3, 0.6];
        let p = BilstmParams {
            wx_f: g.leaf(wx.clone(), &[d_in, 4 * h]).unwrap(),
            wh_f: g.leaf(vec![0.1, -0.2, 0.3, 0.05], &[h, 4 * h]).unwrap(),
            b_f: g.leaf(vec![0.01, 0.02, -0.03, 0.04], &[4 * h]).unwrap(),
            wx_b: g.leaf(wx, &[d_in, 4 * h]).unwrap(),
            wh_b: g.leaf(vec![0.1, -0.2, 0.3, 0.05], &[h, 4 * h]).unwrap(),
            b_b: g.leaf(vec![0.01, 0.02, -0.03, 0.04], &[4 * h]).unwrap(),
        };
        let y = bilstm(&x, &p).unwrap().data();

        // hand-computed single LSTM cell with h0 = c0 = 0
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let pre = |col: usize| 0.4 * [0.3, -0.1, 0.5, 0.2][col] - 0.2 * [0.1, 0.4, -0.3, 0.6][col]
            + [0.01, 0.02, -0.03, 0.04][col];
        let (i, f, gg, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
        let _ = f;
        let c = i * gg;
        let expect = o * c.tanh();
        assert!((y[0] - expect).abs() < 1e-12);
        assert!((y[1] - expect).abs() < 1e-12, "T=1 reverse equals forward");
    }

    #[test]
    fn empty_sequence_rejected() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(vec![], &[0, 3]).unwrap();
        let p = zero_params(&g, 3, 2);
        assert!(matches!(
            bilstm(&x, &p),
            Err(crate::error::Error::EmptySequence(_))
        ));
    }
}
