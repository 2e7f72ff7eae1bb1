use rand::Rng;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Fully connected tanh network with a linear `3J` head, parameters stored
/// flat as `[W_1, b_1, W_2, b_2, ...]` with `W_l` row-major `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    hidden: Vec<usize>,
    components: usize,
    params: Vec<f64>,
}

/// Reusable activation buffers for [`Network::nll_and_grad`].
#[derive(Debug, Clone)]
pub struct Scratch {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Network {
    pub fn zeros(input_dim: usize, hidden: &[usize], components: usize) -> Self {
        let mut net = Self {
            input_dim,
            hidden: hidden.to_vec(),
            components,
            params: Vec::new(),
        };
        let len = net.layers().map(|(i, o)| o * i + o).sum();
        net.params = vec![0.0; len];
        net
    }

    /// Xavier-uniform weights, zero biases, head weights shrunk by 10x.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        components: usize,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(input_dim, hidden, components);
        let layers: Vec<(usize, usize)> = net.layers().collect();
        let last = layers.len() - 1;
        let mut off = 0;
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt() * if l == last { 0.1 } else { 1.0 };
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-a..a);
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    /// Spreads the component mean biases over target quantiles.
    pub fn seed_head(&mut self, targets: &[f64]) {
        let j = self.components;
        let mut sorted = targets.to_vec();
        sorted.sort_by(f64::total_cmp);
        let bias = self.params.len() - 3 * j;
        for c in 0..j {
            let p = (c as f64 + 0.5) / j as f64;
            let idx = ((p * sorted.len() as f64) as usize).min(sorted.len() - 1);
            self.params[bias + j + c] = sorted[idx];
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let dims: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(3 * self.components))
            .collect();
        (0..dims.len() - 1).map(move |l| (dims[l], dims[l + 1]))
    }

    pub fn scratch(&self) -> Scratch {
        let mut acts = vec![vec![0.0; self.input_dim]];
        acts.extend(self.layers().map(|(_, o)| vec![0.0; o]));
        let deltas = acts.clone();
        Scratch { acts, deltas }
    }

    fn forward_into(&self, x: &[f64], s: &mut Scratch) {
        s.acts[0].copy_from_slice(x);
        let n_layers = s.acts.len() - 1;
        let mut off = 0;
        for (l, (fi, fo)) in self.layers().enumerate() {
            let (w, rest) = self.params[off..].split_at(fi * fo);
            let b = &rest[..fo];
            let (prev, next) = s.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut next[0];
            for o in 0..fo {
                let row = &w[o * fi..(o + 1) * fi];
                let z = b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                out[o] = if l + 1 < n_layers { z.tanh() } else { z };
            }
            off += fi * fo + fo;
        }
    }

    /// Raw head `[logits, means, log-scales]` for a standardized input.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.scratch();
        self.forward_into(x, &mut s);
        s.acts.pop().unwrap_or_default()
    }

    /// Mean NLL over the batch (row-major `xs`, one target per row) and its
    /// gradient written into `grad`. Log-scales below `floor_log` are
    /// clamped and receive no gradient.
    pub fn nll_and_grad(
        &self,
        xs: &[f64],
        ys: &[f64],
        floor_log: f64,
        grad: &mut [f64],
        s: &mut Scratch,
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let j = self.components;
        let d = self.input_dim;
        let n_layers = s.acts.len() - 1;
        let layers: Vec<(usize, usize)> = self.layers().collect();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &(fi, fo) in &layers {
            offsets.push(off);
            off += fi * fo + fo;
        }
        let mut lw = vec![0.0; j];
        let mut total = 0.0;
        for (row, &y) in xs.chunks_exact(d).zip(ys) {
            self.forward_into(row, s);
            let head = &s.acts[n_layers];
            let lmax = head[..j].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse_a = lmax + head[..j].iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
            for c in 0..j {
                let ls = head[2 * j + c].max(floor_log);
                let z = (y - head[j + c]) / ls.exp();
                lw[c] = head[c] - lse_a - 0.5 * z * z - ls - LN_SQRT_2PI;
            }
            let wmax = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = wmax + lw.iter().map(|v| (v - wmax).exp()).sum::<f64>().ln();
            total -= lse;
            let delta = &mut s.deltas[n_layers];
            for c in 0..j {
                let gamma = (lw[c] - lse).exp();
                let alpha = (head[c] - lse_a).exp();
                let raw_ls = head[2 * j + c];
                let ls = raw_ls.max(floor_log);
                let sigma = ls.exp();
                let z = (y - head[j + c]) / sigma;
                delta[c] = alpha - gamma;
                delta[j + c] = -gamma * z / sigma;
                delta[2 * j + c] = if raw_ls > floor_log {
                    gamma * (1.0 - z * z)
                } else {
                    0.0
                };
            }
            for l in (0..layers.len()).rev() {
                let (fi, fo) = layers[l];
                let woff = offsets[l];
                let (lower, upper) = s.deltas.split_at_mut(l + 1);
                let dout = &upper[0];
                let input = &s.acts[l];
                for o in 0..fo {
                    let g = dout[o];
                    if g == 0.0 {
                        continue;
                    }
                    let gw = &mut grad[woff + o * fi..woff + (o + 1) * fi];
                    for (gw_k, a) in gw.iter_mut().zip(input) {
                        *gw_k += g * a;
                    }
                    grad[woff + fi * fo + o] += g;
                }
                if l > 0 {
                    let din = &mut lower[l];
                    let w = &self.params[woff..woff + fi * fo];
                    for k in 0..fi {
                        let mut acc = 0.0;
                        for o in 0..fo {
                            acc += w[o * fi + k] * dout[o];
                        }
                        let a = input[k];
                        din[k] = acc * (1.0 - a * a);
                    }
                }
            }
        }
        let n = ys.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        total / n
    }
}
