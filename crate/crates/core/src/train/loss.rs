use crate::descriptor::{check_dim, dot, sq_dist, AffineHead, ZERO_NORM};
use crate::error::{Error, Result};

/// For unit vectors the distance difference lies in `[-4, 4]`, so margins
/// outside `[-4, 4]` are either always or never active. `-4` itself is
/// accepted and deactivates every triplet.
pub const MIN_MARGIN: f64 = -4.0;
pub const MAX_MARGIN: f64 = 4.0;

/// `m + |q - p|^2 - |q - n|^2`.
pub fn hinge_argument(fq: &[f64], fp: &[f64], fn_: &[f64], margin: f64) -> Result<f64> {
    check_dim(fq.len(), fp.len())?;
    check_dim(fq.len(), fn_.len())?;
    Ok(margin + sq_dist(fq, fp) - sq_dist(fq, fn_))
}

/// `max(0, m + |q - p|^2 - |q - n|^2)`.
pub fn triplet_loss(fq: &[f64], fp: &[f64], fn_: &[f64], margin: f64) -> Result<f64> {
    Ok(hinge_argument(fq, fp, fn_, margin)?.max(0.0))
}

/// Whether the triplet contributes gradient. A hinge argument of exactly zero
/// counts as inactive.
pub fn is_active(fq: &[f64], fp: &[f64], fn_: &[f64], margin: f64) -> Result<bool> {
    Ok(hinge_argument(fq, fp, fn_, margin)? > 0.0)
}

/// Gradient buffer shaped like [`AffineHead::params`]: `W` row-major, then `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub in_dim: usize,
    pub out_dim: usize,
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(head: &AffineHead) -> Self {
        Self {
            in_dim: head.in_dim(),
            out_dim: head.out_dim(),
            values: vec![0.0; head.param_count()],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.values[..self.in_dim * self.out_dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.values[self.in_dim * self.out_dim..]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub(crate) fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }
}

pub(crate) struct Embedded {
    pub unit: Vec<f64>,
    pub norm: f64,
}

pub(crate) fn embed(head: &AffineHead, x: &[f64]) -> Result<Embedded> {
    let h = head.forward(x);
    let norm = dot(&h, &h).sqrt();
    if !(norm >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    Ok(Embedded {
        unit: h.iter().map(|v| v / norm).collect(),
        norm,
    })
}

/// Back-propagates `dL/df` through `f = h / |h|` and `h = W x + b`, adding
/// `scale * dL/dparams` into `grad`.
fn backprop(
    head: &AffineHead,
    x: &[f64],
    e: &Embedded,
    grad_f: &[f64],
    scale: f64,
    grad: &mut Gradient,
) {
    let radial = dot(&e.unit, grad_f);
    let in_dim = head.in_dim();
    let (gw, gb) = grad.values.split_at_mut(in_dim * head.out_dim());
    for i in 0..head.out_dim() {
        let gh = scale * (grad_f[i] - e.unit[i] * radial) / e.norm;
        if gh == 0.0 {
            continue;
        }
        gb[i] += gh;
        for (g, xj) in gw[i * in_dim..(i + 1) * in_dim].iter_mut().zip(x) {
            *g += gh * xj;
        }
    }
}

/// Adds `scale * dL/dparams` of one triplet into `grad`, returning the loss
/// and whether it was active.
pub(crate) fn accumulate(
    head: &AffineHead,
    q: &[f64],
    p: &[f64],
    n: &[f64],
    margin: f64,
    scale: f64,
    grad: &mut Gradient,
) -> Result<(f64, bool)> {
    for x in [q, p, n] {
        check_dim(head.in_dim(), x.len())?;
    }
    let eq = embed(head, q)?;
    let ep = embed(head, p)?;
    let en = embed(head, n)?;
    let arg = hinge_argument(&eq.unit, &ep.unit, &en.unit, margin)?;
    if !(arg > 0.0) {
        return Ok((0.0, false));
    }
    let d = eq.unit.len();
    let mut g_q = vec![0.0; d];
    let mut g_p = vec![0.0; d];
    let mut g_n = vec![0.0; d];
    for i in 0..d {
        g_q[i] = 2.0 * (en.unit[i] - ep.unit[i]);
        g_p[i] = -2.0 * (eq.unit[i] - ep.unit[i]);
        g_n[i] = 2.0 * (eq.unit[i] - en.unit[i]);
    }
    backprop(head, q, &eq, &g_q, scale, grad);
    backprop(head, p, &ep, &g_p, scale, grad);
    backprop(head, n, &en, &g_n, scale, grad);
    Ok((arg, true))
}

/// Loss of one triplet of pooled (unit) inputs and its analytic gradient
/// with respect to the head parameters. Inactive triplets give zero loss and
/// an all-zero gradient.
pub fn loss_and_grad(
    head: &AffineHead,
    q: &[f64],
    p: &[f64],
    n: &[f64],
    margin: f64,
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros(head);
    let (loss, _) = accumulate(head, q, p, n, margin, 1.0, &mut grad)?;
    Ok((loss, grad))
}
