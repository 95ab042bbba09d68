//! Dense kernels on row-major `[rows, cols]` slices, f32 accumulation in a
//! fixed order.

pub const RMS_EPS: f32 = 1e-6;
const ROPE_BASE: f32 = 10_000.0;

/// `x[t, k] · w[k, n]`.
pub fn matmul(x: &[f32], w: &[f32], t: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), t * k);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![0.0f32; t * n];
    for i in 0..t {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a = x[i * k + p];
            for (o, &b) in row.iter_mut().zip(&w[p * n..(p + 1) * n]) {
                *o += a * b;
            }
        }
    }
    out
}

/// `dy[t, n] · w[k, n]ᵀ`.
pub fn matmul_nt(dy: &[f32], w: &[f32], t: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; t * k];
    for i in 0..t {
        for p in 0..k {
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += dy[i * n + j] * w[p * n + j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn rmsnorm(x: &[f32], w: &[f32], cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let r = inv_rms(row);
        out.extend(row.iter().zip(w).map(|(&v, &g)| v * r * g));
    }
    out
}

fn inv_rms(row: &[f32]) -> f32 {
    let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
    1.0 / (ms + RMS_EPS).sqrt()
}

/// Gradients `(dx, dw)` of [`rmsnorm`] at `x`.
pub fn rmsnorm_backward(x: &[f32], w: &[f32], dy: &[f32], cols: usize) -> (Vec<f32>, Vec<f32>) {
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0f32; cols];
    for (row, g) in x.chunks(cols).zip(dy.chunks(cols)) {
        let r = inv_rms(row);
        let dot: f32 = row.iter().zip(g).zip(w).map(|((&v, &g), &w)| v * g * w).sum();
        let c = r * r * r * dot / cols as f32;
        for j in 0..cols {
            dx.push(r * w[j] * g[j] - c * row[j]);
            dw[j] += g[j] * row[j] * r;
        }
    }
    (dx, dw)
}

/// Rotate adjacent channel pairs within each head by `pos * base^(-2i/d)`.
/// `sign = -1` applies the inverse rotation (its own transpose).
pub fn rope(x: &[f32], seq_len: usize, heads: usize, head_dim: usize, sign: f32) -> Vec<f32> {
    let hidden = heads * head_dim;
    let mut out = x.to_vec();
    for (t, row) in out.chunks_mut(hidden).enumerate() {
        let pos = (t % seq_len) as f32;
        for head in row.chunks_mut(head_dim) {
            for i in 0..head_dim / 2 {
                let theta = pos * ROPE_BASE.powf(-2.0 * i as f32 / head_dim as f32);
                let (s, c) = (sign * theta).sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Attention geometry: `batch` sequences of `seq_len` tokens, `heads` heads
/// of width `head_dim`, causal.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    fn scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }

    fn at(&self, b: usize, s: usize, h: usize) -> usize {
        (b * self.seq_len + s) * self.hidden() + h * self.head_dim
    }
}

/// Causal softmax probabilities for one (batch, head): `(p, p_rounded)`,
/// `seq_len × seq_len` with zeros above the diagonal. Scores and stored
/// probabilities pass through `round`.
fn probs(
    q: &[f32],
    k: &[f32],
    d: AttnDims,
    b: usize,
    h: usize,
    round: &mut dyn FnMut(&mut [f32]),
) -> (Vec<f32>, Vec<f32>) {
    let s_len = d.seq_len;
    let mut scores = vec![0.0f32; s_len * s_len];
    for i in 0..s_len {
        let qi = &q[d.at(b, i, h)..d.at(b, i, h) + d.head_dim];
        for j in 0..=i {
            let kj = &k[d.at(b, j, h)..d.at(b, j, h) + d.head_dim];
            let dot: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            scores[i * s_len + j] = dot * d.scale();
        }
    }
    round(&mut scores);
    let mut p = vec![0.0f32; s_len * s_len];
    for i in 0..s_len {
        let row = &scores[i * s_len..i * s_len + i + 1];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let e: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f32 = e.iter().sum();
        for j in 0..=i {
            p[i * s_len + j] = e[j] / z;
        }
    }
    let mut pr = p.clone();
    round(&mut pr);
    (p, pr)
}

/// Causal multi-head attention. `round` is applied, in order, to the scores,
/// the probabilities and the output of every (batch, head) pair.
pub fn attention(q: &[f32], k: &[f32], v: &[f32], d: AttnDims, round: &mut dyn FnMut(&mut [f32])) -> Vec<f32> {
    let mut out = vec![0.0f32; q.len()];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let (_, pr) = probs(q, k, d, b, h, round);
            let mut o = vec![0.0f32; d.seq_len * d.head_dim];
            for i in 0..d.seq_len {
                for j in 0..=i {
                    let w = pr[i * d.seq_len + j];
                    let vj = &v[d.at(b, j, h)..d.at(b, j, h) + d.head_dim];
                    for (acc, &x) in o[i * d.head_dim..(i + 1) * d.head_dim].iter_mut().zip(vj) {
                        *acc += w * x;
                    }
                }
            }
            round(&mut o);
            for i in 0..d.seq_len {
                let at = d.at(b, i, h);
                out[at..at + d.head_dim].copy_from_slice(&o[i * d.head_dim..(i + 1) * d.head_dim]);
            }
        }
    }
    out
}

/// Gradients `(dq, dk, dv)` of [`attention`], recomputing probabilities from
/// the saved `q`, `k`. The softmax Jacobian uses the unrounded probabilities
/// and `dv` the rounded ones, matching the forward composition.
pub fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    dout: &[f32],
    d: AttnDims,
    round: &mut dyn FnMut(&mut [f32]),
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (mut dq, mut dk, mut dv) = (vec![0.0f32; q.len()], vec![0.0f32; k.len()], vec![0.0f32; v.len()]);
    let (s_len, hd) = (d.seq_len, d.head_dim);
    for b in 0..d.batch {
        for h in 0..d.heads {
            let (p, pr) = probs(q, k, d, b, h, round);
            for i in 0..s_len {
                let doi = &dout[d.at(b, i, h)..d.at(b, i, h) + hd];
                // dP and the softmax backward for row i
                let dp: Vec<f32> = (0..=i)
                    .map(|j| {
                        let vj = &v[d.at(b, j, h)..d.at(b, j, h) + hd];
                        doi.iter().zip(vj).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                let inner: f32 = (0..=i).map(|j| dp[j] * p[i * s_len + j]).sum();
                for j in 0..=i {
                    let ds = p[i * s_len + j] * (dp[j] - inner) * d.scale();
                    let (qa, ka) = (d.at(b, i, h), d.at(b, j, h));
                    for e in 0..hd {
                        dq[qa + e] += ds * k[ka + e];
                        dk[ka + e] += ds * q[qa + e];
                        dv[ka + e] += pr[i * s_len + j] * doi[e];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
