//! Soft pairwise 3D IoU penalty over world-frame AABBs of oriented boxes, with
//! its analytic gradient, and the reference v-prediction training loss.
//!
//! A box is the 8-vector `[tx, ty, tz, sx, sy, sz, cos, sin]`. Its AABB half
//! extents are `(|c| sx + |s| sz, sy, |s| sx + |c| sz)`, where `|.|` is the
//! smooth absolute value `sqrt(x^2 + 1e-12)`. Per-axis overlap is
//! `softplus_k(min(hi) - max(lo))`, capped at the shorter of the two extents so
//! that IoU stays in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

pub type BoxParams = [f64; 8];

const SMOOTH_ABS_EPS2: f64 = 1e-12;
const UNION_EPS: f64 = 1e-12;

/// Default softplus sharpness for the overlap length.
pub const DEFAULT_SHARPNESS: f64 = 50.0;

fn softplus(x: f64, k: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-k * x.abs())) / k
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn smooth_abs(x: f64) -> f64 {
    libm::sqrt(x * x + SMOOTH_ABS_EPS2)
}

struct Extents {
    e: [f64; 3],
    /// d e[axis] / d params, for axes 0..3 and params 3..8 (size, cos, sin).
    de: [[f64; 5]; 3],
}

fn extents(b: &BoxParams) -> Extents {
    let sx = b[3].max(0.0);
    let sy = b[4].max(0.0);
    let sz = b[5].max(0.0);
    let gx = (b[3] > 0.0) as u8 as f64;
    let gy = (b[4] > 0.0) as u8 as f64;
    let gz = (b[5] > 0.0) as u8 as f64;
    let (c, s) = (b[6], b[7]);
    let (ac, as_) = (smooth_abs(c), smooth_abs(s));
    let (dac, das) = (c / ac, s / as_);
    Extents {
        e: [ac * sx + as_ * sz, sy, as_ * sx + ac * sz],
        de: [
            [ac * gx, 0.0, as_ * gz, sx * dac, sz * das],
            [0.0, gy, 0.0, 0.0, 0.0],
            [as_ * gx, 0.0, ac * gz, sz * dac, sx * das],
        ],
    }
}

/// Soft IoU of one pair and its gradient with respect to both boxes.
pub fn pair_soft_iou_grad(
    a: &BoxParams,
    b: &BoxParams,
    sharpness: f64,
) -> (f64, BoxParams, BoxParams) {
    let ea = extents(a);
    let eb = extents(b);
    let mut ov = [0.0; 3];
    // d ov[k] / d (t_a, e_a, t_b, e_b) along axis k.
    let mut dov = [[0.0; 4]; 3];
    for k in 0..3 {
        let (ta, tb) = (a[k], b[k]);
        let (xa, xb) = (ea.e[k], eb.e[k]);
        let (hi_a, hi_b, lo_a, lo_b) = (ta + xa, tb + xb, ta - xa, tb - xb);
        let d = hi_a.min(hi_b) - lo_a.max(lo_b);
        let sp = softplus(d, sharpness);
        let cap = 2.0 * xa.min(xb);
        if sp <= cap {
            ov[k] = sp;
            let g = sigmoid(sharpness * d);
            // d d / d(hi_a, hi_b, lo_a, lo_b)
            let (dha, dhb) = if hi_a <= hi_b { (1.0, 0.0) } else { (0.0, 1.0) };
            let (dla, dlb) = if lo_a >= lo_b {
                (-1.0, 0.0)
            } else {
                (0.0, -1.0)
            };
            dov[k] = [
                g * (dha + dla),
                g * (dha - dla),
                g * (dhb + dlb),
                g * (dhb - dlb),
            ];
        } else {
            ov[k] = cap;
            if xa <= xb {
                dov[k] = [0.0, 2.0, 0.0, 0.0];
            } else {
                dov[k] = [0.0, 0.0, 0.0, 2.0];
            }
        }
    }
    let inter = ov[0] * ov[1] * ov[2];
    let va = 8.0 * ea.e[0] * ea.e[1] * ea.e[2];
    let vb = 8.0 * eb.e[0] * eb.e[1] * eb.e[2];
    let union = va + vb - inter + UNION_EPS;
    let iou = inter / union;

    let d_inter = (union + inter) / (union * union);
    let d_va = -inter / (union * union);
    let d_vb = d_va;
    let mut ga = [0.0; 8];
    let mut gb = [0.0; 8];
    let mut de_a = [0.0; 3];
    let mut de_b = [0.0; 3];
    for k in 0..3 {
        let others_ov = ov[(k + 1) % 3] * ov[(k + 2) % 3];
        let g = d_inter * others_ov;
        ga[k] += g * dov[k][0];
        de_a[k] += g * dov[k][1];
        gb[k] += g * dov[k][2];
        de_b[k] += g * dov[k][3];
        de_a[k] += d_va * 8.0 * ea.e[(k + 1) % 3] * ea.e[(k + 2) % 3];
        de_b[k] += d_vb * 8.0 * eb.e[(k + 1) % 3] * eb.e[(k + 2) % 3];
    }
    for k in 0..3 {
        for p in 0..5 {
            ga[3 + p] += de_a[k] * ea.de[k][p];
            gb[3 + p] += de_b[k] * eb.de[k][p];
        }
    }
    (iou, ga, gb)
}

pub fn pair_soft_iou(a: &BoxParams, b: &BoxParams, sharpness: f64) -> f64 {
    pair_soft_iou_grad(a, b, sharpness).0
}

/// Weighted mean soft IoU over unordered pairs; pair `(i, j)` has weight
/// `w[i] * w[j]`. Zero when no pair has weight.
pub fn pairwise_soft_iou(boxes: &[BoxParams], weights: &[f64], sharpness: f64) -> f64 {
    pairwise_soft_iou_grad(boxes, weights, sharpness).0
}

pub fn pairwise_soft_iou_grad(
    boxes: &[BoxParams],
    weights: &[f64],
    sharpness: f64,
) -> (f64, Vec<BoxParams>) {
    debug_assert_eq!(boxes.len(), weights.len());
    let mut grads = vec![[0.0; 8]; boxes.len()];
    let mut total = 0.0;
    let mut norm = 0.0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            let w = weights[i] * weights[j];
            if w == 0.0 {
                continue;
            }
            norm += w;
            let (iou, ga, gb) = pair_soft_iou_grad(&boxes[i], &boxes[j], sharpness);
            total += w * iou;
            for p in 0..8 {
                grads[i][p] += w * ga[p];
                grads[j][p] += w * gb[p];
            }
        }
    }
    if norm == 0.0 {
        return (0.0, grads);
    }
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v /= norm;
        }
    }
    (total / norm, grads)
}

/// Weight and schedule of the overlap penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_iou: f64,
    /// The penalty is off before this optimizer step.
    pub iou_warmup_step: u64,
    pub sharpness: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_iou: 0.1,
            iou_warmup_step: 1000,
            sharpness: DEFAULT_SHARPNESS,
        }
    }
}

impl LossConfig {
    pub fn lambda_at(&self, step: u64) -> f64 {
        if step < self.iou_warmup_step {
            0.0
        } else {
            self.lambda_iou.max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub mse: f64,
    pub iou: f64,
    pub total: f64,
}

/// Inputs for one layout sample of the reference loss.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub v_hat: &'a [f64],
    pub v_true: &'a [f64],
    pub x_t: &'a [f64],
    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` of the sample's timestep.
    pub coefficients: (f64, f64),
    pub num_classes: usize,
    /// Per-slot weight of the MSE term; zero for anchored slots.
    pub loss_mask: &'a [f64],
    /// Per-slot weight of the overlap term; zero for empty slots.
    pub occupancy: &'a [f64],
}

/// `masked_mse(v_hat, v_true) + lambda * pairwise_soft_iou(x0_hat boxes)` and
/// its gradient with respect to `v_hat`, where `x0_hat = a x_t - s v_hat`.
pub fn training_loss(
    inp: &LossInputs<'_>,
    lambda: f64,
    sharpness: f64,
) -> (LossComponents, Vec<f64>) {
    let slots = inp.loss_mask.len();
    let dim = inp.num_classes + 8;
    debug_assert_eq!(inp.v_hat.len(), slots * dim);
    let mut grad = vec![0.0; inp.v_hat.len()];
    let denom: f64 = inp.loss_mask.iter().sum::<f64>() * dim as f64;
    let mut mse = 0.0;
    if denom > 0.0 {
        for i in 0..slots {
            let m = inp.loss_mask[i];
            if m == 0.0 {
                continue;
            }
            for d in 0..dim {
                let k = i * dim + d;
                let diff = inp.v_hat[k] - inp.v_true[k];
                mse += m * diff * diff;
                grad[k] += 2.0 * m * diff / denom;
            }
        }
        mse /= denom;
    }
    let mut iou = 0.0;
    if lambda != 0.0 {
        let (a, s) = inp.coefficients;
        let c = inp.num_classes;
        let boxes: Vec<BoxParams> = (0..slots)
            .map(|i| {
                let mut b = [0.0; 8];
                for (p, slot) in b.iter_mut().enumerate() {
                    let k = i * dim + c + p;
                    *slot = a * inp.x_t[k] - s * inp.v_hat[k];
                }
                b
            })
            .collect();
        let (value, g) = pairwise_soft_iou_grad(&boxes, inp.occupancy, sharpness);
        iou = value;
        for i in 0..slots {
            for p in 0..8 {
                grad[i * dim + c + p] += lambda * g[i][p] * -s;
            }
        }
    }
    (
        LossComponents {
            mse,
            iou,
            total: mse + lambda * iou,
        },
        grad,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(x: f64) -> BoxParams {
        [x, 0.0, 0.0, 0.5, 0.5, 0.5, 1.0, 0.0]
    }

    #[test]
    fn reference_values() {
        let k = DEFAULT_SHARPNESS;
        assert!(pair_soft_iou(&cube(0.0), &cube(2.0), k) < 1e-12);
        assert!((pair_soft_iou(&cube(0.0), &cube(0.0), k) - 1.0).abs() < 1e-9);
        assert!((pair_soft_iou(&cube(0.0), &cube(0.5), k) - 1.0 / 3.0).abs() < 1e-3);
        let loss = pairwise_soft_iou(&[cube(0.0), cube(0.0)], &[1.0, 1.0], k);
        assert!((loss - 1.0).abs() < 1e-9);
        assert_eq!(pairwise_soft_iou(&[], &[], k), 0.0);
        assert_eq!(pairwise_soft_iou(&[cube(0.0)], &[1.0], k), 0.0);
    }

    #[test]
    fn empty_slots_do_not_count() {
        let k = DEFAULT_SHARPNESS;
        let boxes = [cube(0.0), cube(0.0), cube(5.0)];
        assert!(pairwise_soft_iou(&boxes, &[1.0, 0.0, 1.0], k) < 1e-12);
    }

    #[test]
    fn degenerate_boxes_stay_bounded() {
        let k = DEFAULT_SHARPNESS;
        let tiny = [0.0, 0.0, 0.0, 1e-4, 1e-4, 1e-4, 1.0, 0.0];
        let v = pair_soft_iou(&tiny, &tiny, k);
        assert!((0.0..=1.0 + 1e-9).contains(&v));
        let flat = [0.0, 0.0, 0.0, -0.1, 0.2, 0.2, 1.0, 0.0];
        let v = pair_soft_iou(&flat, &cube(0.0), k);
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
    }

    #[test]
    fn warmup_disables_penalty() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.lambda_at(0), 0.0);
        assert_eq!(cfg.lambda_at(1000), 0.1);
    }

    #[test]
    fn perfect_prediction_without_overlap_is_zero() {
        let c = 2;
        let dim = c + 8;
        let v: Vec<f64> = (0..2 * dim).map(|i| i as f64 * 0.1).collect();
        let mut x_t = vec![0.0; 2 * dim];
        // Clean boxes far apart: with a = 1, s = 0 the estimate is x_t itself.
        x_t[c..c + 8].copy_from_slice(&cube(0.0));
        x_t[dim + c..dim + c + 8].copy_from_slice(&cube(3.0));
        let inp = LossInputs {
            v_hat: &v,
            v_true: &v,
            x_t: &x_t,
            coefficients: (1.0, 0.0),
            num_classes: c,
            loss_mask: &[1.0, 1.0],
            occupancy: &[1.0, 1.0],
        };
        let (l, _) = training_loss(&inp, 0.1, DEFAULT_SHARPNESS);
        assert!(l.total < 1e-12);
        let (l0, _) = training_loss(&inp, 0.0, DEFAULT_SHARPNESS);
        assert_eq!(l0.iou, 0.0);
        assert_eq!(l0.total, l0.mse);
    }
}
