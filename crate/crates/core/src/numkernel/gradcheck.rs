//! Central finite-difference checking. Layer inputs are staged as extra
//! entries in the `ParamStore`, so one sweep covers parameter and input
//! gradients alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv1d_depthwise, conv1d_depthwise_backward, cross_entropy, cross_entropy_backward, gru_cell,
    gru_cell_backward, init_gru_params, linear, linear_backward, maxpool_ngrams,
    maxpool_ngrams_backward, softmax, softmax_backward, bigru_encode, bigru_backward,
};
use super::matrix::{dot, Matrix};
use super::store::ParamStore;
use crate::error::{Error, Result};

pub const FD_EPSILON: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// |a−n| / max(1e−8, |a|+|n|)
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Worst entry found by a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares the gradients already stored in `store` against central
/// finite differences of `forward`.
pub fn check_against_fd_detailed(
    store: &mut ParamStore,
    eps: f64,
    mut forward: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for name in names {
        let n_entries = store.get(&name)?.data().len();
        for idx in 0..n_entries {
            let orig = store.get(&name)?.data()[idx];
            store.get_mut(&name)?.data_mut()[idx] = orig + eps;
            let plus = forward(store)?;
            store.get_mut(&name)?.data_mut()[idx] = orig - eps;
            let minus = forward(store)?;
            store.get_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.grad(&name)?.data()[idx];
            let err = rel_error(analytic, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// As [`check_against_fd_detailed`], returning only the max relative
/// error.
pub fn check_against_fd(
    store: &mut ParamStore,
    eps: f64,
    forward: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    check_against_fd_detailed(store, eps, forward).map(|r| r.max_rel_error)
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn check_linear(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (3, 4);
    let mut store = ParamStore::new();
    store.insert_random("w", m, n, 0.8, &mut rng);
    store.insert_random("b", m, 1, 0.8, &mut rng);
    store.insert_random("x", n, 1, 0.8, &mut rng);
    let r = rand_vec(m, &mut rng);

    // analytic
    {
        let w = store.get("w")?.clone();
        let x = store.get("x")?.data().to_vec();
        let mut dw = Matrix::zeros(m, n);
        let mut db = vec![0.0; m];
        let dx = linear_backward(&w, &x, &r, &mut dw, &mut db)?;
        *store.grad_mut("w")? = dw;
        store.grad_mut("b")?.data_mut().copy_from_slice(&db);
        store.grad_mut("x")?.data_mut().copy_from_slice(&dx);
    }
    check_against_fd(&mut store, FD_EPSILON, |s| {
        let y = linear(s.get("w")?, s.get("x")?.data(), s.get("b")?.data())?;
        Ok(dot(&y, &r))
    })
}

fn check_softmax(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 5;
    let mut store = ParamStore::new();
    store.insert_random("x", n, 1, 1.0, &mut rng);
    let r = rand_vec(n, &mut rng);
    {
        let y = softmax(store.get("x")?.data());
        let dx = softmax_backward(&y, &r);
        store.grad_mut("x")?.data_mut().copy_from_slice(&dx);
    }
    check_against_fd(&mut store, FD_EPSILON, |s| {
        Ok(dot(&softmax(s.get("x")?.data()), &r))
    })
}

fn check_cross_entropy(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let target = 2;
    let mut store = ParamStore::new();
    store.insert_random("x", n, 1, 1.0, &mut rng);
    {
        let probs = softmax(store.get("x")?.data());
        let dprobs = cross_entropy_backward(&probs, target);
        let dx = softmax_backward(&probs, &dprobs);
        store.grad_mut("x")?.data_mut().copy_from_slice(&dx);
    }
    check_against_fd(&mut store, FD_EPSILON, |s| {
        cross_entropy(&softmax(s.get("x")?.data()), target)
    })
}

fn check_gru_cell(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h) = (3, 4);
    let mut store = ParamStore::new();
    init_gru_params(&mut store, "g", d, h, 0.6, &mut rng);
    // biases start at zero; give them random values so the check covers them
    for gate in ["z", "r", "h"] {
        let b = store.get_mut(&format!("g.b_{gate}"))?;
        for v in b.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    store.insert_random("x", d, 1, 0.8, &mut rng);
    store.insert_random("h_prev", h, 1, 0.8, &mut rng);
    let r = rand_vec(h, &mut rng);
    {
        let x = store.get("x")?.data().to_vec();
        let h_prev = store.get("h_prev")?.data().to_vec();
        let (_, cache) = gru_cell(&store, "g", &x, &h_prev)?;
        let (dx, dh) = gru_cell_backward(&mut store, "g", &cache, &r)?;
        store.grad_mut("x")?.data_mut().copy_from_slice(&dx);
        store.grad_mut("h_prev")?.data_mut().copy_from_slice(&dh);
    }
    check_against_fd(&mut store, FD_EPSILON, |s| {
        let (h_new, _) = gru_cell(s, "g", s.get("x")?.data(), s.get("h_prev")?.data())?;
        Ok(dot(&h_new, &r))
    })
}

fn check_bigru(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h, t_len) = (2, 3, 4);
    let mut store = ParamStore::new();
    init_gru_params(&mut store, "f", d, h, 0.6, &mut rng);
    init_gru_params(&mut store, "b", d, h, 0.6, &mut rng);
    store.insert_random("xs", d, t_len, 0.8, &mut rng);
    let r = Matrix::from_fn(2 * h, t_len, |_, _| rng.gen_range(-1.0..1.0));

    let unpack = |s: &ParamStore| -> Result<Vec<Vec<f64>>> {
        let xs = s.get("xs")?;
        Ok((0..t_len).map(|t| xs.col(t)).collect())
    };
    {
        let xs = unpack(&store)?;
        let (_, trace) = bigru_encode(&store, "f", "b", &xs, h)?;
        let dxs = bigru_backward(&mut store, "f", "b", &trace, &r, None, None)?;
        for (t, dx) in dxs.iter().enumerate() {
            for (i, &v) in dx.iter().enumerate() {
                *store.grad_mut("xs")?.at_mut(i, t) = v;
            }
        }
    }
    check_against_fd(&mut store, FD_EPSILON, |s| {
        let xs = unpack(s)?;
        let (out, _) = bigru_encode(s, "f", "b", &xs, h)?;
        Ok(dot(out.data(), r.data()))
    })
}

fn check_conv(seed: u64) -> Result<f64> {
    let mut worst = 0.0_f64;
    for s_win in 1..=3usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s_win as u64));
        let (d, t_len) = (3, 5);
        let mut store = ParamStore::new();
        store.insert_random("w", d, s_win, 0.8, &mut rng);
        store.insert_random("xc", d, t_len, 0.8, &mut rng);
        let r = Matrix::from_fn(d, t_len, |_, _| rng.gen_range(-1.0..1.0));
        {
            let w = store.get("w")?.clone();
            let xc = store.get("xc")?.clone();
            let out = conv1d_depthwise(&w, &xc, s_win)?;
            let mut dw = Matrix::zeros(d, s_win);
            let dx = conv1d_depthwise_backward(&w, &xc, &out, &r, s_win, &mut dw)?;
            *store.grad_mut("w")? = dw;
            *store.grad_mut("xc")? = dx;
        }
        let err = check_against_fd(&mut store, FD_EPSILON, |s| {
            let out = conv1d_depthwise(s.get("w")?, s.get("xc")?, s_win)?;
            Ok(dot(out.data(), r.data()))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_maxpool(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, t_len) = (3, 4);
    let mut store = ParamStore::new();
    store.insert_random("x1", d, t_len, 0.9, &mut rng);
    store.insert_random("x2", d, t_len, 0.9, &mut rng);
    store.insert_random("x3", d, t_len, 0.9, &mut rng);
    let r = Matrix::from_fn(d, t_len, |_, _| rng.gen_range(-1.0..1.0));
    {
        let (_, argmax) = maxpool_ngrams(store.get("x1")?, store.get("x2")?, store.get("x3")?)?;
        let (d1, d2, d3) = maxpool_ngrams_backward(&r, &argmax);
        *store.grad_mut("x1")? = d1;
        *store.grad_mut("x2")? = d2;
        *store.grad_mut("x3")? = d3;
    }
    check_against_fd(&mut store, FD_EPSILON, |s| {
        let (out, _) = maxpool_ngrams(s.get("x1")?, s.get("x2")?, s.get("x3")?)?;
        Ok(dot(out.data(), r.data()))
    })
}

/// conv over three windows feeding the max-pool, checked end to end.
fn check_conv_pool(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, t_len) = (3, 5);
    let mut store = ParamStore::new();
    store.insert_random("w1", d, 1, 0.8, &mut rng);
    store.insert_random("w2", d, 2, 0.8, &mut rng);
    store.insert_random("w3", d, 3, 0.8, &mut rng);
    store.insert_random("xc", d, t_len, 0.8, &mut rng);
    let r = Matrix::from_fn(d, t_len, |_, _| rng.gen_range(-1.0..1.0));

    let fwd = |s: &ParamStore| -> Result<(Matrix, [Matrix; 3], Vec<u8>)> {
        let xc = s.get("xc")?;
        let c1 = conv1d_depthwise(s.get("w1")?, xc, 1)?;
        let c2 = conv1d_depthwise(s.get("w2")?, xc, 2)?;
        let c3 = conv1d_depthwise(s.get("w3")?, xc, 3)?;
        let (out, argmax) = maxpool_ngrams(&c1, &c2, &c3)?;
        Ok((out, [c1, c2, c3], argmax))
    };
    {
        let (_, convs, argmax) = fwd(&store)?;
        let (d1, d2, d3) = maxpool_ngrams_backward(&r, &argmax);
        let xc = store.get("xc")?.clone();
        let mut dxc = Matrix::zeros(d, t_len);
        for (win, (conv_out, d_out)) in convs.iter().zip([&d1, &d2, &d3]).enumerate() {
            let s_win = win + 1;
            let name = format!("w{s_win}");
            let w = store.get(&name)?.clone();
            let mut dw = Matrix::zeros(d, s_win);
            let dx = conv1d_depthwise_backward(&w, &xc, conv_out, d_out, s_win, &mut dw)?;
            *store.grad_mut(&name)? = dw;
            for i in 0..dxc.data().len() {
                dxc.data_mut()[i] += dx.data()[i];
            }
        }
        *store.grad_mut("xc")? = dxc;
    }
    check_against_fd(&mut store, FD_EPSILON, |s| {
        let (out, _, _) = fwd(s)?;
        Ok(dot(out.data(), r.data()))
    })
}

/// Runs the finite-difference check for a named kernel layer on seeded
/// random shapes; returns the max relative error.
pub fn check_layer(layer: &str, seed: u64) -> Result<f64> {
    match layer {
        "linear" => check_linear(seed),
        "softmax" => check_softmax(seed),
        "cross_entropy" => check_cross_entropy(seed),
        "gru_cell" => check_gru_cell(seed),
        "bigru_encode" => check_bigru(seed),
        "conv1d_depthwise" => check_conv(seed),
        "maxpool_ngrams" => check_maxpool(seed),
        "conv_pool" => check_conv_pool(seed),
        other => Err(Error::UnknownLayer(other.to_string())),
    }
}

/// Layers this module can check by name.
pub const KERNEL_LAYERS: [&str; 8] = [
    "linear",
    "softmax",
    "cross_entropy",
    "gru_cell",
    "bigru_encode",
    "conv1d_depthwise",
    "maxpool_ngrams",
    "conv_pool",
];
