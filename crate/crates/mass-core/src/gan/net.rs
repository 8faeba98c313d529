//! Generator and discriminator stacks: parameter layouts, per-user forward
//! passes with caches, and the matching backward passes.

use super::lstm::{dot, seq_forward, seq_backward, sigmoid, LstmLayout, SeqCache};
use super::{GanConfig, FEATURE_DIM, LATENT_DIM};

pub(crate) struct GenLayout {
    pub layers: Vec<LstmLayout>,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

pub(crate) fn gen_layout(cfg: &GanConfig) -> GenLayout {
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut off = 0;
    let mut input = LATENT_DIM;
    for _ in 0..cfg.num_layers {
        let l = LstmLayout::new(off, input, cfg.hidden_size);
        off = l.end();
        layers.push(l);
        input = cfg.hidden_size;
    }
    let head_w = off;
    off += FEATURE_DIM * cfg.hidden_size;
    let head_b = off;
    off += FEATURE_DIM;
    GenLayout {
        layers,
        head_w,
        head_b,
        total: off,
    }
}

pub(crate) struct DiscLayout {
    /// Forward- and backward-direction cells per layer.
    pub layers: Vec<(LstmLayout, LstmLayout)>,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

pub(crate) fn disc_layout(cfg: &GanConfig) -> DiscLayout {
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut off = 0;
    let mut input = FEATURE_DIM;
    for _ in 0..cfg.num_layers {
        let fwd = LstmLayout::new(off, input, cfg.hidden_size);
        off = fwd.end();
        let bwd = LstmLayout::new(off, input, cfg.hidden_size);
        off = bwd.end();
        layers.push((fwd, bwd));
        input = 2 * cfg.hidden_size;
    }
    let head_w = off;
    off += 2 * cfg.hidden_size;
    let head_b = off;
    off += 1;
    DiscLayout {
        layers,
        head_w,
        head_b,
        total: off,
    }
}

fn reverse_steps(seq: &[f64], steps: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; seq.len()];
    for t in 0..steps {
        out[t * width..(t + 1) * width]
            .copy_from_slice(&seq[(steps - 1 - t) * width..(steps - t) * width]);
    }
    out
}

pub(crate) struct GenUserCache {
    pub layer_inputs: Vec<Vec<f64>>,
    pub seqs: Vec<SeqCache>,
    /// Squashed outputs, `steps x 2`, all in (0, 1).
    pub outputs: Vec<f64>,
}

pub(crate) fn gen_forward_user(
    params: &[f64],
    lay: &GenLayout,
    steps: usize,
    z_user: &[f64],
) -> GenUserCache {
    let h = lay.layers[0].hidden;
    let mut layer_inputs = Vec::with_capacity(lay.layers.len());
    let mut seqs = Vec::with_capacity(lay.layers.len());
    let mut inputs = z_user.to_vec();
    for l in &lay.layers {
        let cache = seq_forward(params, l, &inputs, steps);
        layer_inputs.push(inputs);
        inputs = cache.hs.clone();
        seqs.push(cache);
    }
    let top = &seqs.last().unwrap().hs;
    let mut outputs = vec![0.0; steps * FEATURE_DIM];
    for t in 0..steps {
        for f in 0..FEATURE_DIM {
            let w = &params[lay.head_w + f * h..lay.head_w + (f + 1) * h];
            let pre = dot(w, &top[t * h..(t + 1) * h]) + params[lay.head_b + f];
            outputs[t * FEATURE_DIM + f] = sigmoid(pre);
        }
    }
    GenUserCache {
        layer_inputs,
        seqs,
        outputs,
    }
}

/// Accumulate generator parameter gradients for one user given the gradient
/// on its squashed outputs (`steps x 2`).
pub(crate) fn gen_backward_user(
    params: &[f64],
    lay: &GenLayout,
    steps: usize,
    cache: &GenUserCache,
    d_out: &[f64],
    grad: &mut [f64],
) {
    let h = lay.layers[0].hidden;
    let top = &cache.seqs.last().unwrap().hs;
    let mut d_hs = vec![0.0; steps * h];
    for t in 0..steps {
        for f in 0..FEATURE_DIM {
            let y = cache.outputs[t * FEATURE_DIM + f];
            let d_pre = d_out[t * FEATURE_DIM + f] * y * (1.0 - y);
            if d_pre == 0.0 {
                continue;
            }
            grad[lay.head_b + f] += d_pre;
            let w = &params[lay.head_w + f * h..lay.head_w + (f + 1) * h];
            for j in 0..h {
                grad[lay.head_w + f * h + j] += d_pre * top[t * h + j];
                d_hs[t * h + j] += d_pre * w[j];
            }
        }
    }

    for (idx, l) in lay.layers.iter().enumerate().rev() {
        let inputs = &cache.layer_inputs[idx];
        if idx == 0 {
            seq_backward(
                params,
                l,
                inputs,
                steps,
                &cache.seqs[idx],
                &d_hs,
                Some(&mut *grad),
                None,
            );
        } else {
            let mut d_lower = vec![0.0; steps * l.input];
            seq_backward(
                params,
                l,
                inputs,
                steps,
                &cache.seqs[idx],
                &d_hs,
                Some(&mut *grad),
                Some(&mut d_lower),
            );
            d_hs = d_lower;
        }
    }
}

pub(crate) struct DiscUserCache {
    pub layer_inputs: Vec<Vec<f64>>,
    pub rev_inputs: Vec<Vec<f64>>,
    pub fwd: Vec<SeqCache>,
    pub bwd: Vec<SeqCache>,
    /// Top bidirectional outputs, `steps x 2H`, original time order.
    pub top_out: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) fn disc_forward_user(
    params: &[f64],
    lay: &DiscLayout,
    steps: usize,
    x_user: &[f64],
) -> DiscUserCache {
    let h = lay.layers[0].0.hidden;
    let mut layer_inputs = Vec::new();
    let mut rev_inputs = Vec::new();
    let mut fwd_caches = Vec::new();
    let mut bwd_caches = Vec::new();

    let mut inputs = x_user.to_vec();
    for (fwd, bwd) in &lay.layers {
        let rev = reverse_steps(&inputs, steps, fwd.input);
        let f_cache = seq_forward(params, fwd, &inputs, steps);
        let b_cache = seq_forward(params, bwd, &rev, steps);
        let mut out = vec![0.0; steps * 2 * h];
        for t in 0..steps {
            out[t * 2 * h..t * 2 * h + h].copy_from_slice(&f_cache.hs[t * h..(t + 1) * h]);
            out[t * 2 * h + h..(t + 1) * 2 * h]
                .copy_from_slice(&b_cache.hs[(steps - 1 - t) * h..(steps - t) * h]);
        }
        layer_inputs.push(inputs);
        rev_inputs.push(rev);
        fwd_caches.push(f_cache);
        bwd_caches.push(b_cache);
        inputs = out;
    }

    let w = &params[lay.head_w..lay.head_w + 2 * h];
    let b = params[lay.head_b];
    let logits: Vec<f64> = (0..steps)
        .map(|t| dot(w, &inputs[t * 2 * h..(t + 1) * 2 * h]) + b)
        .collect();

    DiscUserCache {
        layer_inputs,
        rev_inputs,
        fwd: fwd_caches,
        bwd: bwd_caches,
        top_out: inputs,
        logits,
    }
}

/// Backpropagate a gradient on the per-step logits of one user, accumulating
/// parameter gradients (if requested) and the gradient on the input trace.
pub(crate) fn disc_backward_user(
    params: &[f64],
    lay: &DiscLayout,
    steps: usize,
    cache: &DiscUserCache,
    d_logits: &[f64],
    mut grad: Option<&mut [f64]>,
    d_input: Option<&mut [f64]>,
) {
    let h = lay.layers[0].0.hidden;
    let w = &params[lay.head_w..lay.head_w + 2 * h];
    let mut d_out = vec![0.0; steps * 2 * h];
    for t in 0..steps {
        let d = d_logits[t];
        if d == 0.0 {
            continue;
        }
        if let Some(g) = grad.as_deref_mut() {
            g[lay.head_b] += d;
            for j in 0..2 * h {
                g[lay.head_w + j] += d * cache.top_out[t * 2 * h + j];
            }
        }
        for j in 0..2 * h {
            d_out[t * 2 * h + j] += d * w[j];
        }
    }

    for (idx, (fwd, bwd)) in lay.layers.iter().enumerate().rev() {
        let width = fwd.input;
        let mut d_hs_fwd = vec![0.0; steps * h];
        let mut d_hs_bwd = vec![0.0; steps * h];
        for t in 0..steps {
            d_hs_fwd[t * h..(t + 1) * h].copy_from_slice(&d_out[t * 2 * h..t * 2 * h + h]);
            d_hs_bwd[(steps - 1 - t) * h..(steps - t) * h]
                .copy_from_slice(&d_out[t * 2 * h + h..(t + 1) * 2 * h]);
        }

        let want_input = idx > 0 || d_input.is_some();
        let mut d_in = want_input.then(|| vec![0.0; steps * width]);
        let mut d_in_rev = want_input.then(|| vec![0.0; steps * width]);

        seq_backward(
            params,
            fwd,
            &cache.layer_inputs[idx],
            steps,
            &cache.fwd[idx],
            &d_hs_fwd,
            grad.as_deref_mut(),
            d_in.as_deref_mut(),
        );
        seq_backward(
            params,
            bwd,
            &cache.rev_inputs[idx],
            steps,
            &cache.bwd[idx],
            &d_hs_bwd,
            grad.as_deref_mut(),
            d_in_rev.as_deref_mut(),
        );

        if let (Some(mut d_in), Some(d_in_rev)) = (d_in, d_in_rev) {
            for t in 0..steps {
                for j in 0..width {
                    d_in[t * width + j] += d_in_rev[(steps - 1 - t) * width + j];
                }
            }
            if idx == 0 {
                if let Some(out) = d_input {
                    out.copy_from_slice(&d_in);
                }
                return;
            }
            d_out = d_in;
        } else {
            return;
        }
    }
}
