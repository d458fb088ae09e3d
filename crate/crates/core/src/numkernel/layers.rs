//! Forward/backward passes for every layer the models use. Backward
//! functions take the upstream gradient and accumulate parameter
//! gradients into a `ParamStore`; input gradients are returned.

use super::matrix::{add_inplace, dot, Matrix};
use super::store::ParamStore;
use crate::error::{Error, Result};

/// Probability floor applied before any log.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y = Wx + b
pub fn linear(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != w.rows() {
        return Err(Error::Dim(format!(
            "linear: bias of {} against {}x{}",
            b.len(),
            w.rows(),
            w.cols()
        )));
    }
    let mut y = w.matvec(x)?;
    add_inplace(&mut y, b);
    Ok(y)
}

/// Accumulates dW += dy x^T and db += dy, returns dx = W^T dy.
pub fn linear_backward(
    w: &Matrix,
    x: &[f64],
    dy: &[f64],
    dw: &mut Matrix,
    db: &mut [f64],
) -> Result<Vec<f64>> {
    dw.add_outer(dy, x);
    add_inplace(db, dy);
    w.matvec_t(dy)
}

/// Max-subtracted softmax; entries positive and summing to 1.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// dx = y ⊙ (dy − y·dy), for y = softmax(x).
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let s = dot(y, dy);
    y.iter().zip(dy.iter()).map(|(&yi, &di)| yi * (di - s)).collect()
}

/// −ln probs[target], with the probability floored at `PROB_FLOOR`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    if target >= probs.len() {
        return Err(Error::Lookup(format!(
            "cross_entropy target {} out of {}",
            target,
            probs.len()
        )));
    }
    Ok(-probs[target].max(PROB_FLOOR).ln())
}

/// Gradient w.r.t. probs: zero except −1/p at the target (zero when the
/// floor is active, matching the clamped forward).
pub fn cross_entropy_backward(probs: &[f64], target: usize) -> Vec<f64> {
    let mut d = vec![0.0; probs.len()];
    let p = probs[target];
    if p > PROB_FLOOR {
        d[target] = -1.0 / p;
    }
    d
}

/// Names of the nine GRU parameter blocks under a prefix.
pub const GRU_BLOCKS: [&str; 9] = [
    "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h",
];

/// Registers GRU parameters `prefix.w_z` … `prefix.b_h` for input size
/// `d_in` and hidden size `h`.
pub fn init_gru_params(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    h: usize,
    scale: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    for gate in ["z", "r", "h"] {
        store.insert_random(&format!("{prefix}.w_{gate}"), h, d_in, scale, rng);
        store.insert_random(&format!("{prefix}.u_{gate}"), h, h, scale, rng);
        store.insert(&format!("{prefix}.b_{gate}"), Matrix::zeros(h, 1));
    }
}

/// Intermediate values needed by the GRU backward pass.
#[derive(Clone, Debug)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h_cand: Vec<f64>,
}

fn gate(
    store: &ParamStore,
    prefix: &str,
    gate: &str,
    x: &[f64],
    h: &[f64],
) -> Result<Vec<f64>> {
    let w = store.get(&format!("{prefix}.w_{gate}"))?;
    let u = store.get(&format!("{prefix}.u_{gate}"))?;
    let b = store.get(&format!("{prefix}.b_{gate}"))?;
    let mut pre = w.matvec(x)?;
    add_inplace(&mut pre, &u.matvec(h)?);
    add_inplace(&mut pre, b.data());
    Ok(pre)
}

/// One GRU step:
///   z = σ(W_z x + U_z h + b_z)
///   r = σ(W_r x + U_r h + b_r)
///   h̃ = tanh(W_h x + U_h (r⊙h) + b_h)
///   h' = (1−z)⊙h + z⊙h̃
pub fn gru_cell(
    store: &ParamStore,
    prefix: &str,
    x: &[f64],
    h_prev: &[f64],
) -> Result<(Vec<f64>, GruCache)> {
    let z: Vec<f64> = gate(store, prefix, "z", x, h_prev)?
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = gate(store, prefix, "r", x, h_prev)?
        .into_iter()
        .map(sigmoid)
        .collect();
    let rh: Vec<f64> = r.iter().zip(h_prev.iter()).map(|(a, b)| a * b).collect();
    let h_cand: Vec<f64> = gate(store, prefix, "h", x, &rh)?
        .into_iter()
        .map(f64::tanh)
        .collect();
    let h_new: Vec<f64> = z
        .iter()
        .zip(h_prev.iter())
        .zip(h_cand.iter())
        .map(|((&zi, &hi), &ci)| (1.0 - zi) * hi + zi * ci)
        .collect();
    let cache = GruCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        h_cand,
    };
    Ok((h_new, cache))
}

/// Backward through one GRU step. Returns (dx, dh_prev); parameter
/// gradients accumulate into the store.
pub fn gru_cell_backward(
    store: &mut ParamStore,
    prefix: &str,
    cache: &GruCache,
    dh_new: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = cache.h_prev.len();
    let GruCache {
        x,
        h_prev,
        z,
        r,
        h_cand,
    } = cache;

    // h' = (1−z)⊙h + z⊙h̃
    let mut dh_prev = vec![0.0; h];
    let mut dz = vec![0.0; h];
    let mut dcand = vec![0.0; h];
    for i in 0..h {
        dh_prev[i] += dh_new[i] * (1.0 - z[i]);
        dz[i] = dh_new[i] * (h_cand[i] - h_prev[i]);
        dcand[i] = dh_new[i] * z[i];
    }

    // through tanh of the candidate
    let dpre_h: Vec<f64> = dcand
        .iter()
        .zip(h_cand.iter())
        .map(|(&d, &c)| d * (1.0 - c * c))
        .collect();
    let rh: Vec<f64> = r.iter().zip(h_prev.iter()).map(|(a, b)| a * b).collect();

    let mut dx = vec![0.0; x.len()];
    {
        let w_h = store.get(&format!("{prefix}.w_h"))?.clone();
        let u_h = store.get(&format!("{prefix}.u_h"))?.clone();
        store
            .grad_mut(&format!("{prefix}.w_h"))?
            .add_outer(&dpre_h, x);
        store
            .grad_mut(&format!("{prefix}.u_h"))?
            .add_outer(&dpre_h, &rh);
        add_inplace(
            store.grad_mut(&format!("{prefix}.b_h"))?.data_mut(),
            &dpre_h,
        );
        add_inplace(&mut dx, &w_h.matvec_t(&dpre_h)?);
        let drh = u_h.matvec_t(&dpre_h)?;
        // rh = r ⊙ h_prev
        let dr: Vec<f64> = drh.iter().zip(h_prev.iter()).map(|(a, b)| a * b).collect();
        for i in 0..h {
            dh_prev[i] += drh[i] * r[i];
        }
        // through sigmoid of r
        let dpre_r: Vec<f64> = dr
            .iter()
            .zip(r.iter())
            .map(|(&d, &ri)| d * ri * (1.0 - ri))
            .collect();
        let w_r = store.get(&format!("{prefix}.w_r"))?.clone();
        let u_r = store.get(&format!("{prefix}.u_r"))?.clone();
        store
            .grad_mut(&format!("{prefix}.w_r"))?
            .add_outer(&dpre_r, x);
        store
            .grad_mut(&format!("{prefix}.u_r"))?
            .add_outer(&dpre_r, h_prev);
        add_inplace(
            store.grad_mut(&format!("{prefix}.b_r"))?.data_mut(),
            &dpre_r,
        );
        add_inplace(&mut dx, &w_r.matvec_t(&dpre_r)?);
        add_inplace(&mut dh_prev, &u_r.matvec_t(&dpre_r)?);
    }

    // through sigmoid of z
    let dpre_z: Vec<f64> = dz
        .iter()
        .zip(z.iter())
        .map(|(&d, &zi)| d * zi * (1.0 - zi))
        .collect();
    let w_z = store.get(&format!("{prefix}.w_z"))?.clone();
    let u_z = store.get(&format!("{prefix}.u_z"))?.clone();
    store
        .grad_mut(&format!("{prefix}.w_z"))?
        .add_outer(&dpre_z, x);
    store
        .grad_mut(&format!("{prefix}.u_z"))?
        .add_outer(&dpre_z, h_prev);
    add_inplace(
        store.grad_mut(&format!("{prefix}.b_z"))?.data_mut(),
        &dpre_z,
    );
    add_inplace(&mut dx, &w_z.matvec_t(&dpre_z)?);
    add_inplace(&mut dh_prev, &u_z.matvec_t(&dpre_z)?);

    Ok((dx, dh_prev))
}

/// Trace of a full bidirectional encoding pass.
#[derive(Clone, Debug)]
pub struct BiGruTrace {
    pub fwd_caches: Vec<GruCache>,
    pub bwd_caches: Vec<GruCache>,
    /// hidden states, index t in 0..T (fwd computed left-to-right)
    pub fwd_states: Vec<Vec<f64>>,
    /// bwd_states[t] is the backward hidden state at position t
    pub bwd_states: Vec<Vec<f64>>,
}

/// Bi-directional GRU over a column sequence. Column t of the output is
/// the forward state at t stacked on the backward state at t, both
/// starting from zero initial states.
pub fn bigru_encode(
    store: &ParamStore,
    fwd_prefix: &str,
    bwd_prefix: &str,
    xs: &[Vec<f64>],
    hidden: usize,
) -> Result<(Matrix, BiGruTrace)> {
    let t_len = xs.len();
    if t_len == 0 {
        return Err(Error::EmptyInput("bigru_encode on empty sequence".into()));
    }
    let mut fwd_states = Vec::with_capacity(t_len);
    let mut fwd_caches = Vec::with_capacity(t_len);
    let mut h = vec![0.0; hidden];
    for x in xs {
        let (h_new, cache) = gru_cell(store, fwd_prefix, x, &h)?;
        fwd_states.push(h_new.clone());
        fwd_caches.push(cache);
        h = h_new;
    }
    let mut bwd_states = vec![Vec::new(); t_len];
    let mut bwd_caches_rev = Vec::with_capacity(t_len);
    let mut hb = vec![0.0; hidden];
    for t in (0..t_len).rev() {
        let (h_new, cache) = gru_cell(store, bwd_prefix, &xs[t], &hb)?;
        bwd_states[t] = h_new.clone();
        bwd_caches_rev.push(cache);
        hb = h_new;
    }
    bwd_caches_rev.reverse(); // index by position t

    let mut out = Matrix::zeros(2 * hidden, t_len);
    for t in 0..t_len {
        for i in 0..hidden {
            *out.at_mut(i, t) = fwd_states[t][i];
            *out.at_mut(hidden + i, t) = bwd_states[t][i];
        }
    }
    Ok((
        out,
        BiGruTrace {
            fwd_caches,
            bwd_caches: bwd_caches_rev,
            fwd_states,
            bwd_states,
        },
    ))
}

/// BPTT through `bigru_encode`. `d_out` is the gradient on the 2h×T
/// output; `d_final_fwd`/`d_final_bwd` are extra gradients flowing into
/// the forward state at T−1 and the backward state at 0 (used by the
/// decoder init projection). Returns per-position input gradients.
pub fn bigru_backward(
    store: &mut ParamStore,
    fwd_prefix: &str,
    bwd_prefix: &str,
    trace: &BiGruTrace,
    d_out: &Matrix,
    d_final_fwd: Option<&[f64]>,
    d_final_bwd: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    let t_len = trace.fwd_caches.len();
    let hidden = trace.fwd_states[0].len();
    let mut dxs = vec![vec![0.0; trace.fwd_caches[0].x.len()]; t_len];

    // forward direction, right to left
    let mut dh = vec![0.0; hidden];
    for t in (0..t_len).rev() {
        let mut dh_t = dh.clone();
        for i in 0..hidden {
            dh_t[i] += d_out.at(i, t);
        }
        if t == t_len - 1 {
            if let Some(extra) = d_final_fwd {
                add_inplace(&mut dh_t, extra);
            }
        }
        let (dx, dh_prev) = gru_cell_backward(store, fwd_prefix, &trace.fwd_caches[t], &dh_t)?;
        add_inplace(&mut dxs[t], &dx);
        dh = dh_prev;
    }

    // backward direction, left to right over positions
    let mut dhb = vec![0.0; hidden];
    for t in 0..t_len {
        let mut dh_t = dhb.clone();
        for i in 0..hidden {
            dh_t[i] += d_out.at(hidden + i, t);
        }
        if t == 0 {
            if let Some(extra) = d_final_bwd {
                add_inplace(&mut dh_t, extra);
            }
        }
        let (dx, dh_prev) = gru_cell_backward(store, bwd_prefix, &trace.bwd_caches[t], &dh_t)?;
        add_inplace(&mut dxs[t], &dx);
        dhb = dh_prev;
    }
    Ok(dxs)
}

/// Depthwise 1-D convolution with window `s` and right zero-padding:
/// out[j,t] = tanh(Σ_i W[j,i] · X[j, t+i]), output keeps width T.
pub fn conv1d_depthwise(filter: &Matrix, xc: &Matrix, s: usize) -> Result<Matrix> {
    if !(1..=3).contains(&s) {
        return Err(Error::InvalidWindow(s));
    }
    if filter.cols() != s || filter.rows() != xc.rows() {
        return Err(Error::Dim(format!(
            "conv1d: filter {}x{} against input {}x{} window {}",
            filter.rows(),
            filter.cols(),
            xc.rows(),
            xc.cols(),
            s
        )));
    }
    let (d, t_len) = (xc.rows(), xc.cols());
    let mut out = Matrix::zeros(d, t_len);
    for j in 0..d {
        for t in 0..t_len {
            let mut acc = 0.0;
            for i in 0..s {
                if t + i < t_len {
                    acc += filter.at(j, i) * xc.at(j, t + i);
                }
            }
            *out.at_mut(j, t) = acc.tanh();
        }
    }
    Ok(out)
}

/// Backward for `conv1d_depthwise`. `out` is the forward result (post
/// tanh). Accumulates into `d_filter`, returns dX.
pub fn conv1d_depthwise_backward(
    filter: &Matrix,
    xc: &Matrix,
    out: &Matrix,
    d_out: &Matrix,
    s: usize,
    d_filter: &mut Matrix,
) -> Result<Matrix> {
    let (d, t_len) = (xc.rows(), xc.cols());
    let mut dx = Matrix::zeros(d, t_len);
    for j in 0..d {
        for t in 0..t_len {
            let y = out.at(j, t);
            let dpre = d_out.at(j, t) * (1.0 - y * y);
            if dpre == 0.0 {
                continue;
            }
            for i in 0..s {
                if t + i < t_len {
                    *d_filter.at_mut(j, i) += dpre * xc.at(j, t + i);
                    *dx.at_mut(j, t + i) += dpre * filter.at(j, i);
                }
            }
        }
    }
    Ok(dx)
}

/// Element-wise max over the three window results; `argmax` records which
/// input won (ties go to the lowest window index).
pub fn maxpool_ngrams(x1: &Matrix, x2: &Matrix, x3: &Matrix) -> Result<(Matrix, Vec<u8>)> {
    if !x1.same_shape(x2) || !x1.same_shape(x3) {
        return Err(Error::Dim("maxpool_ngrams: inputs differ in shape".into()));
    }
    let n = x1.data().len();
    let mut out = Matrix::zeros(x1.rows(), x1.cols());
    let mut argmax = vec![0u8; n];
    for idx in 0..n {
        let vals = [x1.data()[idx], x2.data()[idx], x3.data()[idx]];
        let mut best = 0usize;
        for k in 1..3 {
            if vals[k] > vals[best] {
                best = k;
            }
        }
        out.data_mut()[idx] = vals[best];
        argmax[idx] = best as u8;
    }
    Ok((out, argmax))
}

/// Routes the upstream gradient to whichever input won the max.
pub fn maxpool_ngrams_backward(
    d_out: &Matrix,
    argmax: &[u8],
) -> (Matrix, Matrix, Matrix) {
    let (r, c) = (d_out.rows(), d_out.cols());
    let mut d1 = Matrix::zeros(r, c);
    let mut d2 = Matrix::zeros(r, c);
    let mut d3 = Matrix::zeros(r, c);
    for idx in 0..d_out.data().len() {
        let g = d_out.data()[idx];
        match argmax[idx] {
            0 => d1.data_mut()[idx] = g,
            1 => d2.data_mut()[idx] = g,
            _ => d3.data_mut()[idx] = g,
        }
    }
    (d1, d2, d3)
}
