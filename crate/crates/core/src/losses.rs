//! Laplacian aleatoric reconstruction losses and class cross-entropy, each
//! with analytic gradients.
//!
//! The Laplacian term is `sqrt(2) * exp(-log_sigma) * |gt - pred| +
//! log_sigma`, parameterized through the log of the Laplace scale so no
//! positivity constraint is needed. Batch losses sum over instances; any
//! batch normalization is the trainer's concern.

use std::io::{self, Write};

use thiserror::Error;

use crate::geometry::CornerBox;
use crate::{real, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LossError {
    #[error("non-finite value")]
    NonFinite,
    #[error("empty batch")]
    EmptyBatch,
}

/// Balancing weights for the three reconstruction parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<F> {
    pub lambda_bbox: F,
    pub lambda_d: F,
    pub lambda_cls: F,
}

impl<F: Real> LossWeights<F> {
    pub fn new(lambda_bbox: F, lambda_d: F, lambda_cls: F) -> Result<Self, LossError> {
        for w in [lambda_bbox, lambda_d, lambda_cls] {
            if !w.is_finite() || w < F::zero() {
                return Err(LossError::NonFinite);
            }
        }
        Ok(Self {
            lambda_bbox,
            lambda_d,
            lambda_cls,
        })
    }
}

impl<F: Real> Default for LossWeights<F> {
    fn default() -> Self {
        Self {
            lambda_bbox: F::one(),
            lambda_d: F::one(),
            lambda_cls: F::one(),
        }
    }
}

/// One Laplacian term and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianTerm<F> {
    pub value: F,
    pub d_pred: F,
    pub d_log_sigma: F,
}

/// `sqrt(2) * exp(-log_sigma) * |gt - pred| + log_sigma` with gradients
/// w.r.t. `pred` and `log_sigma`; the absolute-value subgradient at zero
/// residual is 0.
pub fn laplacian_term<F: Real>(
    pred: F,
    gt: F,
    log_sigma: F,
) -> Result<LaplacianTerm<F>, LossError> {
    if !pred.is_finite() || !gt.is_finite() || !log_sigma.is_finite() {
        return Err(LossError::NonFinite);
    }
    let sqrt2 = real::<F>(std::f64::consts::SQRT_2);
    let inv_sigma = (-log_sigma).exp();
    let resid = gt - pred;
    let abs_resid = resid.abs();
    let sign = if resid > F::zero() {
        F::one()
    } else if resid < F::zero() {
        -F::one()
    } else {
        F::zero()
    };
    Ok(LaplacianTerm {
        value: sqrt2 * inv_sigma * abs_resid + log_sigma,
        d_pred: -sqrt2 * inv_sigma * sign,
        d_log_sigma: F::one() - sqrt2 * inv_sigma * abs_resid,
    })
}

/// Summed depth reconstruction loss over `(d_gt, d_recon, log_sigma_d)`
/// triples; gradients are per instance, `(d/d recon, d/d log_sigma)`.
pub fn depth_recon_loss<F: Real>(
    batch: &[(F, F, F)],
) -> Result<(F, Vec<[F; 2]>), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut value = F::zero();
    let mut grads = Vec::with_capacity(batch.len());
    for &(gt, recon, log_sigma) in batch {
        let t = laplacian_term(recon, gt, log_sigma)?;
        value += t.value;
        grads.push([t.d_pred, t.d_log_sigma]);
    }
    Ok((value, grads))
}

/// Per-instance gradient of the box loss: one `(d/d coord, d/d log_sigma)`
/// pair per corner in `(l, t, r, b)` order.
pub type BboxGrad<F> = [[F; 2]; 4];

/// Summed box reconstruction loss over `(gt, recon, log_sigmas)` instances;
/// the four Laplacian terms per instance cover the reparameterized corners,
/// log-variances in `(l, t, r, b)` order.
pub fn bbox_recon_loss<F: Real>(
    batch: &[(CornerBox<F>, CornerBox<F>, [F; 4])],
) -> Result<(F, Vec<BboxGrad<F>>), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut value = F::zero();
    let mut grads = Vec::with_capacity(batch.len());
    for (gt, recon, log_sigmas) in batch {
        let gt_v = gt.values();
        let recon_v = recon.values();
        let mut g: BboxGrad<F> = [[F::zero(); 2]; 4];
        for v in 0..4 {
            let t = laplacian_term(recon_v[v], gt_v[v], log_sigmas[v])?;
            value += t.value;
            g[v] = [t.d_pred, t.d_log_sigma];
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// Numerically stabilized softmax cross-entropy; the gradient is
/// `softmax - onehot` and sums to zero.
pub fn class_ce<F: Real>(logits: &[F], target: usize) -> Result<(F, Vec<F>), LossError> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(LossError::NonFinite);
    }
    assert!(target < logits.len(), "class target out of range");
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| a.max(b));
    let mut sum = F::zero();
    let mut exps = Vec::with_capacity(logits.len());
    for &l in logits {
        let e = (l - max).exp();
        exps.push(e);
        sum += e;
    }
    let log_sum = sum.ln() + max;
    let value = log_sum - logits[target];
    let mut grad = Vec::with_capacity(logits.len());
    for (i, e) in exps.iter().enumerate() {
        let p = *e / sum;
        grad.push(if i == target { p - F::one() } else { p });
    }
    Ok((value, grad))
}

/// The three reconstruction components before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconParts<F> {
    pub bbox: F,
    pub depth: F,
    pub class: F,
}

impl<F: Real> ReconParts<F> {
    pub fn zero() -> Self {
        Self {
            bbox: F::zero(),
            depth: F::zero(),
            class: F::zero(),
        }
    }
}

/// Weighted sum of the reconstruction parts.
pub fn total_recon<F: Real>(parts: &ReconParts<F>, w: &LossWeights<F>) -> F {
    w.lambda_bbox * parts.bbox + w.lambda_d * parts.depth + w.lambda_cls * parts.class
}

/// Overall objective: reconstruction plus detection.
pub fn total_loss<F: Real>(recon: F, det: F) -> F {
    recon + det
}

/// One training step's loss components plus the flattened parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<F> {
    pub recon_bbox: F,
    pub recon_depth: F,
    pub recon_class: F,
    pub det: F,
    pub total: F,
    pub grad: Vec<F>,
}

impl<F: Real> LossReport<F> {
    /// Checks `total = weighted recon + det` to the given tolerance.
    pub fn is_consistent(&self, w: &LossWeights<F>, tol: F) -> bool {
        let recon = total_recon(
            &ReconParts {
                bbox: self.recon_bbox,
                depth: self.recon_depth,
                class: self.recon_class,
            },
            w,
        );
        (total_loss(recon, self.det) - self.total).abs() <= tol
    }
}

pub fn write_log_header<W: Write>(mut w: W) -> io::Result<()> {
    writeln!(w, "epoch,step,recon_bbox,recon_depth,recon_class,det,total")
}

pub fn write_log_row<F: Real, W: Write>(
    mut w: W,
    epoch: usize,
    step: usize,
    report: &LossReport<F>,
) -> io::Result<()> {
    let g = |v: F| v.to_f64().unwrap_or(f64::NAN);
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        epoch,
        step,
        g(report.recon_bbox),
        g(report.recon_depth),
        g(report.recon_class),
        g(report.det),
        g(report.total)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn laplacian_zero_residual() {
        let t = laplacian_term(2.0, 2.0, 0.0).unwrap();
        assert_eq!(t.value, 0.0);
        assert_eq!(t.d_pred, 0.0);
        assert_eq!(t.d_log_sigma, 1.0);
    }

    #[test]
    fn laplacian_unit_residual() {
        let t = laplacian_term(0.0, 1.0, 0.0).unwrap();
        assert_relative_eq!(t.value, std::f64::consts::SQRT_2, max_relative = 1e-12);
    }

    #[test]
    fn laplacian_stationary_scale() {
        // sigma = sqrt(2) makes the scale gradient vanish at |residual| = 1.
        let log_sigma = 2.0f64.sqrt().ln();
        let t = laplacian_term(0.0, 1.0, log_sigma).unwrap();
        assert_relative_eq!(t.value, 1.0 + 0.5 * 2.0f64.ln(), max_relative = 1e-10);
        assert_relative_eq!(t.d_log_sigma, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn laplacian_scale_optimum_is_minimum() {
        let resid = 0.37;
        let opt = (std::f64::consts::SQRT_2 * resid).ln();
        let at = |ls: f64| laplacian_term(0.0, resid, ls).unwrap().value;
        assert!(laplacian_term(0.0, resid, opt).unwrap().d_log_sigma.abs() < 1e-12);
        assert!(at(opt - 0.1) > at(opt) && at(opt + 0.1) > at(opt));
    }

    #[test]
    fn laplacian_rejects_non_finite() {
        assert_eq!(
            laplacian_term(f64::NAN, 0.0, 0.0).unwrap_err(),
            LossError::NonFinite
        );
    }

    // Central finite differences, the gradient oracle for this module.
    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn laplacian_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 200 {
            let pred: f64 = rng.gen_range(-3.0..3.0);
            let gt: f64 = rng.gen_range(-3.0..3.0);
            let ls: f64 = rng.gen_range(-1.5..1.5);
            if (gt - pred).abs() < 1e-4 {
                continue; // |.| kink neighborhood
            }
            let t = laplacian_term(pred, gt, ls).unwrap();
            let fd_pred = fd(|p| laplacian_term(p, gt, ls).unwrap().value, pred);
            let fd_ls = fd(|l| laplacian_term(pred, gt, l).unwrap().value, ls);
            assert!(rel_err(t.d_pred, fd_pred) < 1e-5, "d_pred at {pred},{gt},{ls}");
            assert!(rel_err(t.d_log_sigma, fd_ls) < 1e-5, "d_ls at {pred},{gt},{ls}");
            checked += 1;
        }
    }

    #[test]
    fn depth_loss_examples() {
        let (v, _) = depth_recon_loss(&[(5.0, 5.0, 0.0)]).unwrap();
        assert_eq!(v, 0.0);
        let (v, _) = depth_recon_loss(&[(1.0, 0.0, 0.0), (2.0, 1.0, 0.0)]).unwrap();
        assert_relative_eq!(v, 2.0 * std::f64::consts::SQRT_2, max_relative = 1e-12);
        assert_eq!(
            depth_recon_loss::<f64>(&[]).unwrap_err(),
            LossError::EmptyBatch
        );
    }

    #[test]
    fn depth_loss_matches_per_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch: Vec<(f64, f64, f64)> = (0..32)
            .map(|_| {
                (
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let (v, grads) = depth_recon_loss(&batch).unwrap();
        let mut oracle = 0.0;
        for (i, &(gt, recon, ls)) in batch.iter().enumerate() {
            let t = laplacian_term(recon, gt, ls).unwrap();
            oracle += t.value;
            assert_eq!(grads[i], [t.d_pred, t.d_log_sigma]);
        }
        assert_relative_eq!(v, oracle, max_relative = 1e-12);
    }

    #[test]
    fn depth_loss_is_permutation_invariant() {
        let batch = vec![(1.0, 0.5, 0.2), (3.0, 2.0, -0.3), (-1.0, 0.0, 0.5)];
        let mut rev = batch.clone();
        rev.reverse();
        let (a, _) = depth_recon_loss(&batch).unwrap();
        let (b, _) = depth_recon_loss(&rev).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    fn corner(v: [f64; 4]) -> CornerBox<f64> {
        CornerBox::new(v[0], v[1], v[2], v[3]).unwrap()
    }

    #[test]
    fn bbox_loss_examples() {
        let gt = corner([0.4, 0.3, 0.6, 0.7]);
        let (v, _) = bbox_recon_loss(&[(gt, gt, [0.0; 4])]).unwrap();
        assert_eq!(v, 0.0);

        let off = corner([0.5, 0.4, 0.7, 0.8]);
        let (v, _) = bbox_recon_loss(&[(gt, off, [0.0; 4])]).unwrap();
        assert_relative_eq!(
            v,
            4.0 * std::f64::consts::SQRT_2 * 0.1,
            max_relative = 1e-10
        );
    }

    #[test]
    fn bbox_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 200 {
            let gt = corner([0.3, 0.2, 0.7, 0.8]);
            let rv = [
                rng.gen_range(0.05..0.45),
                rng.gen_range(0.05..0.45),
                rng.gen_range(0.5..0.95),
                rng.gen_range(0.5..0.95),
            ];
            let ls = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            if gt
                .values()
                .iter()
                .zip(rv)
                .any(|(g, r)| (g - r).abs() < 1e-4)
            {
                continue;
            }
            let recon = corner(rv);
            let (_, grads) = bbox_recon_loss(&[(gt, recon, ls)]).unwrap();
            for v in 0..4 {
                let fd_coord = fd(
                    |x| {
                        let mut m = rv;
                        m[v] = x;
                        bbox_recon_loss(&[(gt, corner(m), ls)]).unwrap().0
                    },
                    rv[v],
                );
                let fd_ls = fd(
                    |x| {
                        let mut m = ls;
                        m[v] = x;
                        bbox_recon_loss(&[(gt, recon, m)]).unwrap().0
                    },
                    ls[v],
                );
                assert!(rel_err(grads[0][v][0], fd_coord) < 1e-5);
                assert!(rel_err(grads[0][v][1], fd_ls) < 1e-5);
            }
            checked += 1;
        }
    }

    #[test]
    fn class_ce_uniform_logits() {
        let (v, _) = class_ce(&[0.0f64; 4], 1).unwrap();
        assert_relative_eq!(v, 4.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn class_ce_saturates() {
        let (v, _) = class_ce(&[30.0f64, 0.0, 0.0, 0.0], 0).unwrap();
        assert!(v < 1e-12);
    }

    #[test]
    fn class_ce_gradient_sums_to_zero() {
        let (_, g) = class_ce(&[0.3f64, -1.2, 2.0, 0.7], 2).unwrap();
        let sum: f64 = g.iter().sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn class_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let target = rng.gen_range(0..5);
            let (_, g) = class_ce(&logits, target).unwrap();
            for i in 0..5 {
                let fd_i = fd(
                    |x| {
                        let mut m = logits.clone();
                        m[i] = x;
                        class_ce(&m, target).unwrap().0
                    },
                    logits[i],
                );
                assert!(rel_err(g[i], fd_i) < 1e-5);
            }
        }
    }

    #[test]
    fn total_recon_examples() {
        let w1 = LossWeights::new(1.0, 1.0, 1.0).unwrap();
        let parts = ReconParts {
            bbox: 2.0,
            depth: 3.0,
            class: 5.0,
        };
        assert_eq!(total_recon(&parts, &w1), 10.0);
        let w0 = LossWeights::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(total_recon(&parts, &w0), 0.0);
        let w = LossWeights::new(2.0, 1.0, 0.5).unwrap();
        let parts = ReconParts {
            bbox: 0.5656,
            depth: 1.4142,
            class: 1.3863,
        };
        // plain arithmetic oracle: 2*0.5656 + 1.4142 + 0.5*1.3863
        assert_relative_eq!(total_recon(&parts, &w), 3.23855, max_relative = 1e-12);
    }

    #[test]
    fn total_recon_scales_with_common_weight() {
        let parts = ReconParts {
            bbox: 1.1,
            depth: 0.4,
            class: 2.2,
        };
        let w1 = LossWeights::new(1.0, 1.0, 1.0).unwrap();
        let w3 = LossWeights::new(3.0, 3.0, 3.0).unwrap();
        assert_relative_eq!(
            total_recon(&parts, &w3),
            3.0 * total_recon(&parts, &w1),
            max_relative = 1e-12
        );
    }

    #[test]
    fn total_loss_is_plain_sum() {
        assert_eq!(total_loss(10.0, 5.0), 15.0);
        assert_eq!(total_loss(3.25, 0.0), 3.25);
    }

    #[test]
    fn report_consistency() {
        let w = LossWeights::default();
        let report = LossReport {
            recon_bbox: 1.0,
            recon_depth: 2.0,
            recon_class: 3.0,
            det: 4.0,
            total: 10.0,
            grad: vec![],
        };
        assert!(report.is_consistent(&w, 1e-10));
        let bad = LossReport {
            total: 10.5,
            ..report
        };
        assert!(!bad.is_consistent(&w, 1e-10));
    }

    #[test]
    fn log_rows_are_csv() {
        let mut buf = Vec::new();
        write_log_header(&mut buf).unwrap();
        let report = LossReport {
            recon_bbox: 1.0,
            recon_depth: 2.0,
            recon_class: 3.0,
            det: 4.0,
            total: 10.0,
            grad: vec![],
        };
        write_log_row(&mut buf, 3, 7, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,step,recon_bbox,recon_depth,recon_class,det,total\n3,7,1,2,3,4,10\n"
        );
    }
}
