//! Brute-force reference implementations and finite-difference machinery.
//!
//! Everything here is written with explicit loops in 64-bit arithmetic and
//! deliberately shares no code with the production kernels, so tests can use
//! it as an independent oracle.

use crate::params::ParamSet;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dice loss with epsilon 1.0, per-item then batch mean, by explicit loops.
/// Inputs shaped `(B, ...)` with matching shapes.
pub fn dice_loss_loop(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    let b = pred.shape()[0];
    let per: usize = pred.len() / b;
    let p = pred.as_slice().unwrap();
    let t = target.as_slice().unwrap();
    let mut acc = 0.0;
    for i in 0..b {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for j in 0..per {
            let pv = p[i * per + j];
            let tv = t[i * per + j];
            inter += pv * tv;
            psum += pv;
            tsum += tv;
        }
        acc += 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
    }
    acc / b as f64
}

/// Mean BCE from logits by the direct per-pixel formula.
pub fn bce_loss_loop(logits: &ArrayD<f64>, target: &ArrayD<f64>) -> f64 {
    assert_eq!(logits.shape(), target.shape());
    let x = logits.as_slice().unwrap();
    let t = target.as_slice().unwrap();
    let mut acc = 0.0;
    for i in 0..x.len() {
        let sig = 1.0 / (1.0 + (-x[i]).exp());
        acc -= t[i] * sig.ln() + (1.0 - t[i]) * (1.0 - sig).ln();
    }
    acc / x.len() as f64
}

/// Factorized attention `(q/sqrt(K)) (softmax_tokens(k)^T v)` by explicit
/// loops over `(B, H, N, K)` tensors.
pub fn factorized_attention_loop(q: &ArrayD<f64>, k: &ArrayD<f64>, v: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, h, n, kd) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let mut out = ArrayD::zeros(IxDyn(&[b, h, n, kd]));
    let scale = 1.0 / (kd as f64).sqrt();
    for bi in 0..b {
        for hi in 0..h {
            // Column-wise softmax of k over the token axis.
            let mut s = vec![vec![0.0; kd]; n];
            for c in 0..kd {
                let mut mx = f64::NEG_INFINITY;
                for t in 0..n {
                    mx = mx.max(k[[bi, hi, t, c]]);
                }
                let mut z = 0.0;
                for t in 0..n {
                    let e = (k[[bi, hi, t, c]] - mx).exp();
                    s[t][c] = e;
                    z += e;
                }
                for row in s.iter_mut().take(n) {
                    row[c] /= z;
                }
            }
            // ctx[i][j] = sum_t s[t][i] v[t][j]
            let mut ctx = vec![vec![0.0; kd]; kd];
            for i in 0..kd {
                for j in 0..kd {
                    let mut acc = 0.0;
                    for t in 0..n {
                        acc += s[t][i] * v[[bi, hi, t, j]];
                    }
                    ctx[i][j] = acc;
                }
            }
            // out[t][j] = sum_i (q[t][i] * scale) ctx[i][j]
            for t in 0..n {
                for j in 0..kd {
                    let mut acc = 0.0;
                    for i in 0..kd {
                        acc += q[[bi, hi, t, i]] * scale * ctx[i][j];
                    }
                    out[[bi, hi, t, j]] = acc;
                }
            }
        }
    }
    out
}

/// Channel-wise head calibration by explicit loops:
/// `out[b,h,n,k] = u[b,h,n,k] * a[b,h,k]`.
pub fn calibrate_loop(u: &ArrayD<f64>, a: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, h, n, kd) = (u.shape()[0], u.shape()[1], u.shape()[2], u.shape()[3]);
    let mut out = ArrayD::zeros(IxDyn(&[b, h, n, kd]));
    for bi in 0..b {
        for hi in 0..h {
            for t in 0..n {
                for c in 0..kd {
                    out[[bi, hi, t, c]] = u[[bi, hi, t, c]] * a[[bi, hi, c]];
                }
            }
        }
    }
    out
}

/// Softmax across the head axis of an `(H, K)` logit matrix, per channel.
pub fn softmax_heads_loop(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let h = logits.len();
    let k = logits[0].len();
    let mut out = vec![vec![0.0; k]; h];
    for c in 0..k {
        let mut mx = f64::NEG_INFINITY;
        for row in logits.iter() {
            mx = mx.max(row[c]);
        }
        let mut z = 0.0;
        for hi in 0..h {
            let e = (logits[hi][c] - mx).exp();
            out[hi][c] = e;
            z += e;
        }
        for row in out.iter_mut() {
            row[c] /= z;
        }
    }
    out
}

/// Dice coefficient from integer overlap counts.
pub fn dice_from_counts(inter: u64, p: u64, t: u64) -> f64 {
    if p + t == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (p + t) as f64
}

/// IOU from integer overlap counts.
pub fn iou_from_counts(inter: u64, p: u64, t: u64) -> f64 {
    let union = p + t - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Relative error with an absolute floor, as used by all gradient checks.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference gradient of `f` with respect to `x`.
pub fn central_diff(
    x: &ArrayD<f64>,
    eps: f64,
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + eps;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Outcome of a parameter-space finite-difference sweep.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Number of (tensor, element) coordinates checked.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the worst coordinate, e.g. `backbone.enc1.attn.q.weight[12]`.
    pub worst: String,
    /// Coordinates exceeding the tolerance.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic parameter gradients against central differences.
///
/// `analytic[i]` is the gradient tensor for parameter `i` (zeros if no
/// gradient flowed); `loss` re-evaluates the scalar objective from a
/// perturbed parameter set. Every tensor is visited; within a tensor, up to
/// `samples_per_tensor` coordinates are chosen by a seeded RNG, keeping the
/// sweep tractable while covering every weight matrix in the model.
pub fn check_param_gradients(
    params: &ParamSet<f64>,
    analytic: &[ArrayD<f64>],
    loss: impl Fn(&ParamSet<f64>) -> f64,
    eps: f64,
    tol: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.cast::<f64>();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        failures: Vec::new(),
    };
    for (id, p) in params.iter() {
        let n = p.value.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > samples_per_tensor {
            for i in 0..samples_per_tensor {
                let j = rng.gen_range(i..n);
                coords.swap(i, j);
            }
            coords.truncate(samples_per_tensor);
        }
        for &c in &coords {
            let orig = p.value.as_slice().unwrap()[c];
            {
                let slot = probe.get_mut(id);
                slot.value.as_slice_mut().unwrap()[c] = orig + eps;
            }
            let up = loss(&probe);
            {
                let slot = probe.get_mut(id);
                slot.value.as_slice_mut().unwrap()[c] = orig - eps;
            }
            let down = loss(&probe);
            {
                let slot = probe.get_mut(id);
                slot.value.as_slice_mut().unwrap()[c] = orig;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.0].as_slice().unwrap()[c];
            let err = rel_error(a, numeric);
            report.checked += 1;
            let loc = format!("{}[{}]", p.name, c);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = loc.clone();
            }
            if err > tol {
                report.failures.push(format!(
                    "{loc}: analytic {a:.3e} vs fd {numeric:.3e} (rel {err:.3e})"
                ));
            }
        }
    }
    report
}
