//! LSTM sequence primitives over flat parameter vectors: forward passes with
//! activation caches and exact reverse-mode backward passes.
//!
//! Gate order inside the stacked 4H blocks is input, forget, cell, output.

/// Offsets of one LSTM cell's parameters inside a flat vector.
#[derive(Debug, Clone)]
pub(crate) struct LstmLayout {
    pub w_ih: usize,
    pub w_hh: usize,
    pub bias: usize,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayout {
    pub fn new(offset: usize, input: usize, hidden: usize) -> Self {
        let w_ih = offset;
        let w_hh = w_ih + 4 * hidden * input;
        let bias = w_hh + 4 * hidden * hidden;
        Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    pub fn end(&self) -> usize {
        self.bias + 4 * self.hidden
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// Four accumulators break the serial fadd dependency so the loop pipelines;
// the summation order is fixed, keeping results bit-reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut s = (s0 + s2) + (s1 + s3);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// Per-sequence activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct SeqCache {
    /// Activated gates, `steps x 4H`.
    pub gates: Vec<f64>,
    /// Cell states, `steps x H`.
    pub cs: Vec<f64>,
    /// Hidden states, `steps x H`.
    pub hs: Vec<f64>,
}

impl SeqCache {
    fn new(steps: usize, hidden: usize) -> Self {
        Self {
            gates: vec![0.0; steps * 4 * hidden],
            cs: vec![0.0; steps * hidden],
            hs: vec![0.0; steps * hidden],
        }
    }
}

/// Run one LSTM over a sequence starting from zero state.
/// `inputs` is `steps x input` row-major.
pub(crate) fn seq_forward(
    params: &[f64],
    lay: &LstmLayout,
    inputs: &[f64],
    steps: usize,
) -> SeqCache {
    let h = lay.hidden;
    let inp = lay.input;
    let mut cache = SeqCache::new(steps, h);
    let mut pre = vec![0.0; 4 * h];
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];

    for t in 0..steps {
        let x = &inputs[t * inp..(t + 1) * inp];
        pre.copy_from_slice(&params[lay.bias..lay.bias + 4 * h]);
        for row in 0..4 * h {
            let wi = &params[lay.w_ih + row * inp..lay.w_ih + (row + 1) * inp];
            let wh = &params[lay.w_hh + row * h..lay.w_hh + (row + 1) * h];
            pre[row] += dot(wi, x) + dot(wh, &h_prev);
        }
        let gates = &mut cache.gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            gates[j] = sigmoid(pre[j]);
            gates[h + j] = sigmoid(pre[h + j]);
            gates[2 * h + j] = pre[2 * h + j].tanh();
            gates[3 * h + j] = sigmoid(pre[3 * h + j]);
        }
        for j in 0..h {
            let c = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
            cache.cs[t * h + j] = c;
            cache.hs[t * h + j] = gates[3 * h + j] * c.tanh();
        }
        h_prev.copy_from_slice(&cache.hs[t * h..(t + 1) * h]);
        c_prev.copy_from_slice(&cache.cs[t * h..(t + 1) * h]);
    }
    cache
}

/// Backpropagate through a sequence run by [`seq_forward`].
///
/// `d_hs` carries the incoming gradient on every step's hidden output
/// (`steps x H`). Parameter gradients are accumulated into `grad` (same
/// layout as `params`) when given; input gradients into `d_inputs` when given.
pub(crate) fn seq_backward(
    params: &[f64],
    lay: &LstmLayout,
    inputs: &[f64],
    steps: usize,
    cache: &SeqCache,
    d_hs: &[f64],
    grad: Option<&mut [f64]>,
    d_inputs: Option<&mut [f64]>,
) {
    let h = lay.hidden;
    let inp = lay.input;
    let mut grad = grad;
    let mut d_inputs = d_inputs;
    let mut dh_rec = vec![0.0; h];
    let mut dc_rec = vec![0.0; h];
    let mut dpre = vec![0.0; 4 * h];

    for t in (0..steps).rev() {
        let gates = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
        let cs = &cache.cs[t * h..(t + 1) * h];
        let (h_prev, c_prev): (&[f64], &[f64]) = if t == 0 {
            (&[], &[])
        } else {
            (
                &cache.hs[(t - 1) * h..t * h],
                &cache.cs[(t - 1) * h..t * h],
            )
        };

        for j in 0..h {
            let dh = d_hs[t * h + j] + dh_rec[j];
            let i = gates[j];
            let f = gates[h + j];
            let g = gates[2 * h + j];
            let o = gates[3 * h + j];
            let tc = cs[j].tanh();
            let dc = dh * o * (1.0 - tc * tc) + dc_rec[j];
            let cp = if t == 0 { 0.0 } else { c_prev[j] };

            dpre[j] = dc * g * i * (1.0 - i);
            dpre[h + j] = dc * cp * f * (1.0 - f);
            dpre[2 * h + j] = dc * i * (1.0 - g * g);
            dpre[3 * h + j] = dh * tc * o * (1.0 - o);
            dc_rec[j] = dc * f;
        }

        let x = &inputs[t * inp..(t + 1) * inp];
        dh_rec.iter_mut().for_each(|v| *v = 0.0);
        for row in 0..4 * h {
            let d = dpre[row];
            if d == 0.0 {
                continue;
            }
            if let Some(g) = grad.as_deref_mut() {
                let gwi = &mut g[lay.w_ih + row * inp..lay.w_ih + (row + 1) * inp];
                for (gw, &xv) in gwi.iter_mut().zip(x) {
                    *gw += d * xv;
                }
                if t > 0 {
                    let gwh = &mut g[lay.w_hh + row * h..lay.w_hh + (row + 1) * h];
                    for (gw, &hv) in gwh.iter_mut().zip(h_prev) {
                        *gw += d * hv;
                    }
                }
                g[lay.bias + row] += d;
            }

            let wh = &params[lay.w_hh + row * h..lay.w_hh + (row + 1) * h];
            for (dr, &w) in dh_rec.iter_mut().zip(wh) {
                *dr += d * w;
            }
            if let Some(dx_all) = d_inputs.as_deref_mut() {
                let wi = &params[lay.w_ih + row * inp..lay.w_ih + (row + 1) * inp];
                let dx = &mut dx_all[t * inp..(t + 1) * inp];
                for (dv, &w) in dx.iter_mut().zip(wi) {
                    *dv += d * w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Scalar loss used for gradient checking: weighted sum of all hidden outputs.
    fn probe_loss(params: &[f64], lay: &LstmLayout, inputs: &[f64], steps: usize) -> f64 {
        let cache = seq_forward(params, lay, inputs, steps);
        cache
            .hs
            .iter()
            .enumerate()
            .map(|(i, h)| h * ((i % 5) as f64 - 2.0))
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let hidden = 5;
        let input = 3;
        let steps = 4;
        let lay = LstmLayout::new(0, input, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params: Vec<f64> = (0..lay.end()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let inputs: Vec<f64> = (0..steps * input).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let cache = seq_forward(&params, &lay, &inputs, steps);
        let d_hs: Vec<f64> = (0..steps * hidden)
            .map(|i| ((i % 5) as f64) - 2.0)
            .collect();
        let mut grad = vec![0.0; lay.end()];
        let mut d_inputs = vec![0.0; steps * input];
        seq_backward(
            &params,
            &lay,
            &inputs,
            steps,
            &cache,
            &d_hs,
            Some(&mut grad),
            Some(&mut d_inputs),
        );

        let h = 1e-5;
        for idx in (0..lay.end()).step_by(13) {
            let orig = params[idx];
            params[idx] = orig + h;
            let up = probe_loss(&params, &lay, &inputs, steps);
            params[idx] = orig - h;
            let down = probe_loss(&params, &lay, &inputs, steps);
            params[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[idx]).abs() <= 1e-6 * fd.abs().max(1.0),
                "param {idx}: fd {fd} vs grad {}",
                grad[idx]
            );
        }

        let mut inputs_fd = inputs.clone();
        for idx in 0..inputs.len() {
            let orig = inputs_fd[idx];
            inputs_fd[idx] = orig + h;
            let up = probe_loss(&params, &lay, &inputs_fd, steps);
            inputs_fd[idx] = orig - h;
            let down = probe_loss(&params, &lay, &inputs_fd, steps);
            inputs_fd[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - d_inputs[idx]).abs() <= 1e-6 * fd.abs().max(1.0),
                "input {idx}: fd {fd} vs grad {}",
                d_inputs[idx]
            );
        }
    }
}
