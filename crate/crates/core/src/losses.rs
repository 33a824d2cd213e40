//! Forward values and analytic gradients for codebook re-encoding and the
//! four training losses, framework-free so any training loop can call them.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{GbError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookState {
    /// dim × M_c; column m is code vector e_m.
    pub e: Array2<f64>,
    pub dim: usize,
    pub m_c: usize,
}

impl CodebookState {
    pub fn new(e: Array2<f64>) -> Result<Self> {
        let (dim, m_c) = e.dim();
        if m_c == 0 || dim == 0 {
            return Err(GbError::invalid("codebook must be nonempty"));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(GbError::NonFinite("value in codebook".into()));
        }
        Ok(CodebookState { e, dim, m_c })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchBatch {
    /// dim × P semantic features per spatial location.
    pub s_flat: Array2<f64>,
    /// dim × P style features per spatial location.
    pub t_flat: Array2<f64>,
    /// B × dim image-level semantic descriptors.
    pub p: Array2<f64>,
    /// B × dim image-level style descriptors.
    pub t: Array2<f64>,
    pub labels: Vec<usize>,
}

impl BranchBatch {
    pub fn validate(&self) -> Result<()> {
        if self.s_flat.dim() != self.t_flat.dim() {
            return Err(GbError::invalid("semantic/style location shapes differ"));
        }
        if self.p.dim() != self.t.dim() {
            return Err(GbError::invalid("descriptor shapes differ"));
        }
        if self.labels.len() != self.p.nrows() {
            return Err(GbError::invalid("label count does not match batch size"));
        }
        let finite = self.s_flat.iter().all(|v| v.is_finite())
            && self.t_flat.iter().all(|v| v.is_finite())
            && self.p.iter().all(|v| v.is_finite())
            && self.t.iter().all(|v| v.is_finite());
        if !finite {
            return Err(GbError::NonFinite("value in branch batch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sem: f64,
    pub lambda_sty: f64,
    pub lambda_orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sem: 0.1,
            lambda_sty: 0.1,
            lambda_orth: 0.1,
        }
    }
}

pub const ORTH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct LossGrads {
    pub pred: Array3<f64>,
    pub p: Array2<f64>,
    pub t: Array2<f64>,
    pub t_flat: Array2<f64>,
    /// Identically zero: the orthogonality penalty stops gradients to the
    /// semantic branch.
    pub s_flat: Array2<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub den: f64,
    pub sem: f64,
    pub sty: f64,
    pub orth: f64,
    pub total: f64,
    pub grads: LossGrads,
}

/// Column-wise softmax of Eᵀ S / √dim.
pub fn codebook_assign(s: ArrayView2<'_, f64>, cb: &CodebookState) -> Result<Array2<f64>> {
    let (dim, p) = s.dim();
    if dim != cb.dim {
        return Err(GbError::invalid("feature dimension does not match codebook"));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in semantic features".into()));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let mut a = Array2::zeros((cb.m_c, p));
    for j in 0..p {
        let mut logits = vec![0.0; cb.m_c];
        for (m, logit) in logits.iter_mut().enumerate() {
            let mut dot = 0.0;
            for i in 0..dim {
                dot += cb.e[[i, m]] * s[[i, j]];
            }
            *logit = dot * scale;
        }
        let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for logit in logits.iter_mut() {
            *logit = (*logit - hi).exp();
            total += *logit;
        }
        for (m, &logit) in logits.iter().enumerate() {
            a[[m, j]] = logit / total;
        }
    }
    Ok(a)
}

/// S̃ = E·A: every output column is a convex combination of codebook columns.
pub fn reencode(cb: &CodebookState, a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (m_c, p) = a.dim();
    if m_c != cb.m_c {
        return Err(GbError::invalid("assignment rows do not match codebook size"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in assignment".into()));
    }
    let mut out = Array2::zeros((cb.dim, p));
    for j in 0..p {
        for m in 0..m_c {
            let w = a[[m, j]];
            if w != 0.0 {
                for i in 0..cb.dim {
                    out[[i, j]] += w * cb.e[[i, m]];
                }
            }
        }
    }
    Ok(out)
}

/// Row-wise mean over locations.
pub fn gap(x_flat: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let (dim, p) = x_flat.dim();
    if p == 0 {
        return Err(GbError::invalid("empty feature map"));
    }
    let mut out = Array1::zeros(dim);
    for i in 0..dim {
        let mut s = 0.0;
        for j in 0..p {
            s += x_flat[[i, j]];
        }
        out[i] = s / p as f64;
    }
    Ok(out)
}

fn present_domains(labels: &[usize]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let k_max = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k_max];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let present: Vec<usize> = (0..k_max).filter(|&k| !members[k].is_empty()).collect();
    (present, members)
}

/// Spread of per-domain semantic centers around the batch center, averaged
/// over the domains present in the batch.
pub fn loss_sem(p: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, dim) = p.dim();
    if b == 0 {
        return Err(GbError::invalid("empty batch"));
    }
    if labels.len() != b {
        return Err(GbError::invalid("label count does not match batch size"));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in semantic descriptors".into()));
    }
    let (present, members) = present_domains(labels);
    let kb = present.len() as f64;
    let mut nu = Array1::<f64>::zeros(dim);
    for i in 0..b {
        for j in 0..dim {
            nu[j] += p[[i, j]];
        }
    }
    nu.mapv_inplace(|v| v / b as f64);
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(present.len());
    let mut value = 0.0;
    for &k in &present {
        let mut c = Array1::<f64>::zeros(dim);
        for &i in &members[k] {
            for j in 0..dim {
                c[j] += p[[i, j]];
            }
        }
        c.mapv_inplace(|v| v / members[k].len() as f64);
        for j in 0..dim {
            let d = c[j] - nu[j];
            value += d * d;
        }
        centers.push(c);
    }
    value /= kb;
    // Σ_k (ν_k − ν) feeds every sample through the batch-center term.
    let mut dev_sum = Array1::<f64>::zeros(dim);
    for c in &centers {
        for j in 0..dim {
            dev_sum[j] += c[j] - nu[j];
        }
    }
    let center_of = |label: usize| -> &Array1<f64> {
        let pos = present.iter().position(|&k| k == label).expect("present domain");
        &centers[pos]
    };
    let mut grad = Array2::zeros((b, dim));
    for i in 0..b {
        let k = labels[i];
        let ck = center_of(k);
        let nk = members[k].len() as f64;
        for j in 0..dim {
            grad[[i, j]] = (2.0 / kb) * ((ck[j] - nu[j]) / nk - dev_sum[j] / b as f64);
        }
    }
    Ok((value, grad))
}

/// Mean intra-domain variance of style descriptors.
pub fn loss_sty(t: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, dim) = t.dim();
    if b == 0 {
        return Err(GbError::invalid("empty batch"));
    }
    if labels.len() != b {
        return Err(GbError::invalid("label count does not match batch size"));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in style descriptors".into()));
    }
    let (present, members) = present_domains(labels);
    let kb = present.len() as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros((b, dim));
    for &k in &present {
        let nk = members[k].len() as f64;
        let mut c = Array1::<f64>::zeros(dim);
        for &i in &members[k] {
            for j in 0..dim {
                c[j] += t[[i, j]];
            }
        }
        c.mapv_inplace(|v| v / nk);
        for &i in &members[k] {
            for j in 0..dim {
                let d = t[[i, j]] - c[j];
                value += d * d / nk;
                grad[[i, j]] = 2.0 * d / (kb * nk);
            }
        }
    }
    Ok((value / kb, grad))
}

/// Mean squared cosine similarity between style and semantic columns. The
/// semantic side is treated as constant: its returned gradient is exactly
/// zero.
pub fn loss_orth(
    s_flat: ArrayView2<'_, f64>,
    t_flat: ArrayView2<'_, f64>,
    eps: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (dim, p) = s_flat.dim();
    if t_flat.dim() != (dim, p) {
        return Err(GbError::invalid("semantic/style location shapes differ"));
    }
    if p == 0 {
        return Err(GbError::invalid("empty feature map"));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(GbError::invalid("eps must be > 0"));
    }
    if s_flat.iter().chain(t_flat.iter()).any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in branch features".into()));
    }
    let mut value = 0.0;
    let mut grad_t = Array2::zeros((dim, p));
    for j in 0..p {
        let mut u = 0.0;
        let mut ns2 = 0.0;
        let mut nt2 = 0.0;
        for i in 0..dim {
            u += t_flat[[i, j]] * s_flat[[i, j]];
            ns2 += s_flat[[i, j]] * s_flat[[i, j]];
            nt2 += t_flat[[i, j]] * t_flat[[i, j]];
        }
        let ns = ns2.sqrt();
        let nt = nt2.sqrt();
        let q = nt * ns + eps;
        let r = u / q;
        value += r * r;
        if nt > 0.0 {
            let coeff = 2.0 * r / (p as f64);
            for i in 0..dim {
                grad_t[[i, j]] =
                    coeff * (s_flat[[i, j]] / q - u * ns * t_flat[[i, j]] / (nt * q * q));
            }
        }
    }
    Ok((value / p as f64, grad_t, Array2::zeros((dim, p))))
}

/// Batch-mean summed squared pixel error.
pub fn loss_den(pred: ArrayView3<'_, f64>, gt: ArrayView3<'_, f64>) -> Result<(f64, Array3<f64>)> {
    if pred.dim() != gt.dim() {
        return Err(GbError::invalid("prediction/target shapes differ"));
    }
    let (b, h, w) = pred.dim();
    if b == 0 || h == 0 || w == 0 {
        return Err(GbError::invalid("empty map stack"));
    }
    if pred.iter().chain(gt.iter()).any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in density maps".into()));
    }
    let mut value = 0.0;
    let mut grad = Array3::zeros((b, h, w));
    for i in 0..b {
        for y in 0..h {
            for x in 0..w {
                let d = pred[[i, y, x]] - gt[[i, y, x]];
                value += d * d;
                grad[[i, y, x]] = 2.0 * d / b as f64;
            }
        }
    }
    Ok((value / b as f64, grad))
}

/// Combines the four loss parts and their gradients with the given weights.
pub fn total_loss(
    den: (f64, Array3<f64>),
    sem: (f64, Array2<f64>),
    sty: (f64, Array2<f64>),
    orth: (f64, Array2<f64>, Array2<f64>),
    weights: &LossWeights,
) -> Result<LossReport> {
    for lam in [weights.lambda_sem, weights.lambda_sty, weights.lambda_orth] {
        if !lam.is_finite() || lam < 0.0 {
            return Err(GbError::invalid("loss weights must be finite and >= 0"));
        }
    }
    let parts = [den.0, sem.0, sty.0, orth.0];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("loss part".into()));
    }
    let total = den.0
        + weights.lambda_sem * sem.0
        + weights.lambda_sty * sty.0
        + weights.lambda_orth * orth.0;
    let grads = LossGrads {
        pred: den.1,
        p: sem.1.mapv(|v| v * weights.lambda_sem),
        t: sty.1.mapv(|v| v * weights.lambda_sty),
        t_flat: orth.1.mapv(|v| v * weights.lambda_orth),
        s_flat: orth.2,
    };
    Ok(LossReport {
        den: den.0,
        sem: sem.0,
        sty: sty.0,
        orth: orth.0,
        total,
        grads,
    })
}

/// Evaluates all four losses for one batch.
pub fn evaluate_losses(
    batch: &BranchBatch,
    pred: ArrayView3<'_, f64>,
    gt: ArrayView3<'_, f64>,
    weights: &LossWeights,
    eps: f64,
) -> Result<LossReport> {
    batch.validate()?;
    let den = loss_den(pred, gt)?;
    let sem = loss_sem(batch.p.view(), &batch.labels)?;
    let sty = loss_sty(batch.t.view(), &batch.labels)?;
    let orth = loss_orth(batch.s_flat.view(), batch.t_flat.view(), eps)?;
    total_loss(den, sem, sty, orth, weights)
}

/// Worst relative disagreement between `analytic` and a central finite
/// difference of `f` over the flattened input, with step `h`.
pub fn max_rel_grad_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}
