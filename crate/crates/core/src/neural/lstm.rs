use rand::Rng;

use super::linalg::{gemm, matvec_add, matvec_t_add, sigmoid};
use super::tensor::{join_name, Params, Tensor};
use crate::error::{Error, Result};

/// One LSTM direction. Gate blocks are laid out input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    d_in: usize,
    hidden: usize,
    /// `4h x d_in`
    pub w_ih: Tensor,
    /// `4h x h`
    pub w_hh: Tensor,
    pub bias: Tensor,
}

/// Intermediates of one direction over a sequence, in processing order.
#[derive(Clone, Debug)]
struct CellTrace {
    steps: usize,
    /// `T x d_in`
    xs: Vec<f64>,
    /// `(T+1) x h`, row 0 is the zero initial state
    hs: Vec<f64>,
    cs: Vec<f64>,
    /// activated gates, `T x 4h`
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl CellTrace {
    fn h(&self, t: usize, hidden: usize) -> &[f64] {
        &self.hs[(t + 1) * hidden..(t + 2) * hidden]
    }
}

impl LstmCell {
    /// Weights uniform in `±1/sqrt(h)`, forget-gate bias 1.
    pub fn new(d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Tensor::uniform(&[4 * hidden], bound, rng);
        bias.value_mut()[hidden..2 * hidden].fill(1.0);
        LstmCell {
            d_in,
            hidden,
            w_ih: Tensor::uniform(&[4 * hidden, d_in], bound, rng),
            w_hh: Tensor::uniform(&[4 * hidden, hidden], bound, rng),
            bias,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn run(&self, xs: Vec<f64>, steps: usize) -> CellTrace {
        let h = self.hidden;
        let g4 = 4 * h;
        let mut pre = Vec::with_capacity(steps * g4);
        for _ in 0..steps {
            pre.extend_from_slice(self.bias.value());
        }
        gemm(steps, self.d_in, g4, &xs, false, self.w_ih.value(), true, 1.0, &mut pre);

        let mut hs = vec![0.0; (steps + 1) * h];
        let mut cs = vec![0.0; (steps + 1) * h];
        let mut gates = pre;
        let mut tanh_c = vec![0.0; steps * h];
        for t in 0..steps {
            let (h_prev, h_next) = hs.split_at_mut((t + 1) * h);
            let h_prev = &h_prev[t * h..];
            let z = &mut gates[t * g4..(t + 1) * g4];
            matvec_add(self.w_hh.value(), g4, h, h_prev, z);
            for v in &mut z[..2 * h] {
                *v = sigmoid(*v);
            }
            for v in &mut z[2 * h..3 * h] {
                *v = v.tanh();
            }
            for v in &mut z[3 * h..] {
                *v = sigmoid(*v);
            }
            let (c_prev, c_next) = cs.split_at_mut((t + 1) * h);
            let c_prev = &c_prev[t * h..];
            for j in 0..h {
                let c = z[h + j] * c_prev[j] + z[j] * z[2 * h + j];
                c_next[j] = c;
                let tc = c.tanh();
                tanh_c[t * h + j] = tc;
                h_next[j] = z[3 * h + j] * tc;
            }
        }
        CellTrace {
            steps,
            xs,
            hs,
            cs,
            gates,
            tanh_c,
        }
    }

    /// Backpropagation through time. `dh` is `T x h` in processing order;
    /// returns `dL/dx` in the same order.
    fn backward(&mut self, tr: &CellTrace, dh: &[f64]) -> Vec<f64> {
        let h = self.hidden;
        let g4 = 4 * h;
        let steps = tr.steps;
        let mut dz = vec![0.0; steps * g4];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..steps).rev() {
            let g = &tr.gates[t * g4..(t + 1) * g4];
            let tc = &tr.tanh_c[t * h..(t + 1) * h];
            let c_prev = &tr.cs[t * h..(t + 1) * h];
            let dzt = &mut dz[t * g4..(t + 1) * g4];
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let dht = dh[t * h + j] + dh_next[j];
                let d_o = dht * tc[j];
                let dc = dht * o * (1.0 - tc[j] * tc[j]) + dc_next[j];
                dzt[j] = dc * gg * i * (1.0 - i);
                dzt[h + j] = dc * c_prev[j] * f * (1.0 - f);
                dzt[2 * h + j] = dc * i * (1.0 - gg * gg);
                dzt[3 * h + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next.fill(0.0);
            matvec_t_add(self.w_hh.value(), g4, h, dzt, &mut dh_next);
        }
        gemm(
            g4,
            steps,
            self.d_in,
            &dz,
            true,
            &tr.xs,
            false,
            1.0,
            self.w_ih.grad_mut(),
        );
        gemm(
            g4,
            steps,
            h,
            &dz,
            true,
            &tr.hs[..steps * h],
            false,
            1.0,
            self.w_hh.grad_mut(),
        );
        let db = self.bias.grad_mut();
        for row in dz.chunks_exact(g4) {
            for (b, d) in db.iter_mut().zip(row) {
                *b += d;
            }
        }
        let mut dx = vec![0.0; steps * self.d_in];
        gemm(steps, g4, self.d_in, &dz, false, self.w_ih.value(), false, 0.0, &mut dx);
        dx
    }
}

impl Params for LstmCell {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join_name(prefix, "w_ih"), &self.w_ih);
        f(&join_name(prefix, "w_hh"), &self.w_hh);
        f(&join_name(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join_name(prefix, "w_ih"), &mut self.w_ih);
        f(&join_name(prefix, "w_hh"), &mut self.w_hh);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

/// Multi-layer bidirectional LSTM with zero initial states.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    d_in: usize,
    hidden: usize,
    /// `(forward, backward)` per layer, bottom first
    layers: Vec<(LstmCell, LstmCell)>,
}

#[derive(Clone, Debug)]
struct LayerTrace {
    fwd: CellTrace,
    bwd: CellTrace,
}

/// Output of [`BiLstm::forward`] plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct BiLstmRun {
    steps: usize,
    /// Top-layer states, `T x 2h`: forward hidden then backward hidden.
    pub states: Vec<f64>,
    /// Forward hidden at the last step then backward hidden at the first.
    pub final_state: Vec<f64>,
    layers: Vec<LayerTrace>,
}

impl BiLstmRun {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state(&self, t: usize) -> &[f64] {
        let w = self.final_state.len();
        &self.states[t * w..(t + 1) * w]
    }
}

fn reverse_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width.max(1)).rev() {
        out.extend_from_slice(row);
    }
    if width == 0 {
        out.clear();
    }
    out
}

impl BiLstm {
    pub fn new(d_in: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        assert!(layers >= 1 && hidden >= 1, "BiLstm needs at least one layer and unit");
        let layers = (0..layers)
            .map(|l| {
                let width = if l == 0 { d_in } else { 2 * hidden };
                (LstmCell::new(width, hidden, rng), LstmCell::new(width, hidden, rng))
            })
            .collect();
        BiLstm { d_in, hidden, layers }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut (LstmCell, LstmCell)> {
        self.layers.iter_mut()
    }

    /// `x` holds `steps` rows of width `d_in`.
    pub fn forward(&self, x: &[f64], steps: usize) -> Result<BiLstmRun> {
        if steps == 0 {
            return Err(Error::domain("BiLstm input sequence is empty"));
        }
        if x.len() != steps * self.d_in {
            return Err(Error::domain(format!(
                "BiLstm input has {} values, expected {steps} x {}",
                x.len(),
                self.d_in
            )));
        }
        let h = self.hidden;
        let mut input = x.to_vec();
        let mut width = self.d_in;
        let mut traces = Vec::with_capacity(self.layers.len());
        for (fwd, bwd) in &self.layers {
            let reversed = reverse_rows(&input, width);
            let ft = fwd.run(input, steps);
            let bt = bwd.run(reversed, steps);
            let mut out = Vec::with_capacity(steps * 2 * h);
            for t in 0..steps {
                out.extend_from_slice(ft.h(t, h));
                out.extend_from_slice(bt.h(steps - 1 - t, h));
            }
            traces.push(LayerTrace { fwd: ft, bwd: bt });
            input = out;
            width = 2 * h;
        }
        let mut final_state = Vec::with_capacity(2 * h);
        final_state.extend_from_slice(&input[(steps - 1) * 2 * h..(steps - 1) * 2 * h + h]);
        final_state.extend_from_slice(&input[h..2 * h]);
        Ok(BiLstmRun {
            steps,
            states: input,
            final_state,
            layers: traces,
        })
    }

    /// Convenience wrapper over a list of equal-width vectors.
    pub fn forward_seq(&self, inputs: &[Vec<f64>]) -> Result<BiLstmRun> {
        let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
        self.forward(&flat, inputs.len())
    }

    /// Accumulates gradients given `dL/dstates` (`T x 2h`) and `dL/dfinal`
    /// (`2h`); returns `dL/dx` (`T x d_in`).
    pub fn backward(&mut self, run: &BiLstmRun, d_states: &[f64], d_final: &[f64]) -> Vec<f64> {
        let h = self.hidden;
        let steps = run.steps;
        assert_eq!(d_states.len(), steps * 2 * h);
        assert_eq!(d_final.len(), 2 * h);
        let mut dy = d_states.to_vec();
        for j in 0..h {
            dy[(steps - 1) * 2 * h + j] += d_final[j];
            dy[h + j] += d_final[h + j];
        }
        for ((fwd, bwd), tr) in self.layers.iter_mut().zip(&run.layers).rev() {
            let mut dh_f = Vec::with_capacity(steps * h);
            let mut dh_b = Vec::with_capacity(steps * h);
            for t in 0..steps {
                dh_f.extend_from_slice(&dy[t * 2 * h..t * 2 * h + h]);
            }
            for t in (0..steps).rev() {
                dh_b.extend_from_slice(&dy[t * 2 * h + h..(t + 1) * 2 * h]);
            }
            let mut dx = fwd.backward(&tr.fwd, &dh_f);
            let dx_b = bwd.backward(&tr.bwd, &dh_b);
            let width = fwd.d_in;
            for (t, row) in dx_b.chunks_exact(width).enumerate() {
                let dst = &mut dx[(steps - 1 - t) * width..(steps - t) * width];
                for (d, s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
            dy = dx;
        }
        dy
    }
}

impl Params for BiLstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            fwd.visit(&join_name(prefix, &format!("l{l}.fwd")), f);
            bwd.visit(&join_name(prefix, &format!("l{l}.bwd")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, (fwd, bwd)) in self.layers.iter_mut().enumerate() {
            fwd.visit_mut(&join_name(prefix, &format!("l{l}.fwd")), f);
            bwd.visit_mut(&join_name(prefix, &format!("l{l}.bwd")), f);
        }
    }
}
