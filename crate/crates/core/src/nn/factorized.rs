//! Learned univariate CDF, one per channel, used as the prior on `z`.
//!
//! Each channel maps a scalar through a chain of small dense layers with
//! softplus-constrained weights and a `tanh` gate, which keeps the logit
//! monotone in its input; the CDF is the sigmoid of that logit. Layer
//! widths are `1 -> 3 -> 3 -> 3 -> 1`.

use super::special::{sigmoid, softplus};

/// Hidden widths of the per-channel density network.
pub const FILTERS: [usize; 3] = [3, 3, 3];
pub const LAYERS: usize = FILTERS.len() + 1;
/// Number of parameter tensors: `matrix, bias` per layer plus a `factor`
/// for all but the last.
pub const PARAM_TENSORS: usize = 3 * LAYERS - 1;

pub fn layer_dims(j: usize) -> (usize, usize) {
    let widths = [1, FILTERS[0], FILTERS[1], FILTERS[2], 1];
    (widths[j + 1], widths[j])
}

/// Shapes of the parameter tensors in order `m0, b0, a0, m1, b1, a1, ...`
/// for `channels` channels.
pub fn param_shapes(channels: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for j in 0..LAYERS {
        let (o, i) = layer_dims(j);
        out.push((format!("matrix{j}"), vec![channels, o, i]));
        out.push((format!("bias{j}"), vec![channels, o]));
        if j + 1 < LAYERS {
            out.push((format!("factor{j}"), vec![channels, o]));
        }
    }
    out
}

/// One channel's parameters, with softplus and tanh already applied.
pub struct ChannelPrior {
    raw_m: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
}

/// Intermediate activations for one logit evaluation.
pub struct Trace {
    /// Layer inputs `h_0 .. h_{L-1}` and the pre-activations of each layer.
    h: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ChannelPrior {
    /// `params[k]` is the flat data of the k-th tensor from [`param_shapes`].
    pub fn from_params(params: &[&[f64]], channel: usize) -> Self {
        let mut raw_m = Vec::new();
        let mut b = Vec::new();
        let mut raw_a = Vec::new();
        let mut idx = 0;
        for j in 0..LAYERS {
            let (o, i) = layer_dims(j);
            raw_m.push(params[idx][channel * o * i..(channel + 1) * o * i].to_vec());
            b.push(params[idx + 1][channel * o..(channel + 1) * o].to_vec());
            idx += 2;
            if j + 1 < LAYERS {
                raw_a.push(params[idx][channel * o..(channel + 1) * o].to_vec());
                idx += 1;
            }
        }
        let m = raw_m.iter().map(|l| l.iter().map(|&v| softplus(v)).collect()).collect();
        let a = raw_a.iter().map(|l| l.iter().map(|&v| v.tanh()).collect()).collect();
        Self { raw_m, m, b, a }
    }

    pub fn logit(&self, x: f64) -> (f64, Trace) {
        let mut h = vec![vec![x]];
        let mut pre = Vec::with_capacity(LAYERS);
        for j in 0..LAYERS {
            let (o, i) = layer_dims(j);
            let input = &h[j];
            let p: Vec<f64> = (0..o)
                .map(|r| self.b[j][r] + (0..i).map(|s| self.m[j][r * i + s] * input[s]).sum::<f64>())
                .collect();
            if j + 1 < LAYERS {
                let next = p.iter().zip(&self.a[j]).map(|(&v, &a)| v + a * v.tanh()).collect();
                h.push(next);
            }
            pre.push(p);
        }
        (pre[LAYERS - 1][0], Trace { h, pre })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        sigmoid(self.logit(x).0)
    }

    /// Backpropagates `g = dL/dlogit`; accumulates parameter gradients into
    /// `grads` (same layout as the params) and returns `dL/dx`.
    pub fn backward(&self, trace: &Trace, g: f64, grads: &mut [&mut [f64]], channel: usize) -> f64 {
        let mut g_pre = vec![g];
        let mut g_x = 0.0;
        for j in (0..LAYERS).rev() {
            let (o, i) = layer_dims(j);
            let base = j * 3;
            {
                let gm = &mut grads[base][channel * o * i..(channel + 1) * o * i];
                for r in 0..o {
                    for s in 0..i {
                        gm[r * i + s] += g_pre[r] * trace.h[j][s] * sigmoid(self.raw_m[j][r * i + s]);
                    }
                }
            }
            {
                let gb = &mut grads[base + 1][channel * o..(channel + 1) * o];
                for r in 0..o {
                    gb[r] += g_pre[r];
                }
            }
            let g_h: Vec<f64> = (0..i).map(|s| (0..o).map(|r| g_pre[r] * self.m[j][r * i + s]).sum()).collect();
            if j == 0 {
                g_x = g_h[0];
                break;
            }
            // h_j = pre_{j-1} + tanh(a) * tanh(pre_{j-1})
            let pj = &trace.pre[j - 1];
            let ga = &mut grads[(j - 1) * 3 + 2][channel * i..(channel + 1) * i];
            g_pre = (0..i)
                .map(|s| {
                    let t = pj[s].tanh();
                    let a = self.a[j - 1][s];
                    ga[s] += g_h[s] * t * (1.0 - a * a);
                    g_h[s] * (1.0 + a * (1.0 - t * t))
                })
                .collect();
        }
        g_x
    }

    /// Bin probability of `v` and its derivatives with respect to the two
    /// logits `(upper, lower)`, unfloored.
    pub fn bin(&self, v: f64) -> (f64, f64, f64, Trace, Trace) {
        let (lu, tu) = self.logit(v + 0.5);
        let (ll, tl) = self.logit(v - 0.5);
        let (su, sl) = (sigmoid(lu), sigmoid(ll));
        // Evaluate on whichever side keeps both sigmoids away from 1.
        let p = if lu + ll > 0.0 { sigmoid(-ll) - sigmoid(-lu) } else { su - sl };
        (p, su * (1.0 - su), -sl * (1.0 - sl), tu, tl)
    }
}

/// Deterministic initialisation matching the common "init scale 10" scheme:
/// softplus(matrix) starts at `1 / (scale * fan_out)` and the CDF starts as a
/// wide logistic.
pub fn init_params(channels: usize, bias_noise: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
    let init_scale: f64 = 10.0;
    let scale = init_scale.powf(1.0 / LAYERS as f64);
    let mut out = Vec::new();
    let mut counter = 0usize;
    for j in 0..LAYERS {
        let (o, i) = layer_dims(j);
        let init = (1.0 / scale / o as f64).exp_m1().ln();
        out.push(vec![init; channels * o * i]);
        out.push(
            (0..channels * o)
                .map(|_| {
                    counter += 1;
                    bias_noise(counter)
                })
                .collect(),
        );
        if j + 1 < LAYERS {
            out.push(vec![0.0; channels * o]);
        }
    }
    out
}
