//! Per-position objectives on a logit vector: value and gradient w.r.t. the
//! logits. Every log is taken of a probability floored at [`PROB_FLOOR`];
//! a floored entry contributes no gradient through its log.

use ndarray::{Array1, ArrayView1};

use crate::model::log_softmax;

pub const PROB_FLOOR: f64 = 1e-12;

fn ln_floor() -> f64 {
    PROB_FLOOR.ln()
}

/// `-log p_gold` with `p = softmax(beta * z)`.
pub fn ce_token(z: ArrayView1<f64>, gold: usize, beta: f64) -> (f64, Array1<f64>) {
    let lp = log_softmax(z, beta);
    let lg = lp[gold];
    if lg < ln_floor() {
        return (-ln_floor(), Array1::zeros(z.len()));
    }
    let mut grad = lp.mapv(|l| beta * l.exp());
    grad[gold] -= beta;
    (-lg, grad)
}

/// `-w(p) log p` for a confidence weight `w`, with `dw = w'`.
fn reweighted_token(
    z: ArrayView1<f64>,
    gold: usize,
    beta: f64,
    w: impl Fn(f64) -> f64,
    dw: impl Fn(f64) -> f64,
) -> (f64, Array1<f64>) {
    let lp = log_softmax(z, beta);
    let probs = lp.mapv(f64::exp);
    let p = probs[gold];
    let floored = lp[gold] < ln_floor();
    let log_pf = if floored { ln_floor() } else { lp[gold] };
    let loss = -w(p) * log_pf;

    // dL/dp, then chain through dp/dz_j = beta * p * (delta_jg - p_j)
    let mut grad = Array1::zeros(z.len());
    let from_weight = -dw(p) * log_pf;
    if from_weight != 0.0 {
        grad = probs.mapv(|pj| -pj);
        grad[gold] += 1.0;
        grad *= from_weight * beta * p;
    }
    if !floored {
        // -w/p * beta * p * (e_g - probs) = w * beta * (probs - e_g)
        let wb = w(p) * beta;
        for (g, &pj) in grad.iter_mut().zip(probs.iter()) {
            *g += wb * pj;
        }
        grad[gold] -= wb;
    }
    (loss, grad)
}

/// Focal loss `-(1 - p)^gamma log p`.
pub fn focal_token(z: ArrayView1<f64>, gold: usize, beta: f64, gamma: f64) -> (f64, Array1<f64>) {
    reweighted_token(
        z,
        gold,
        beta,
        |p| (1.0 - p).powf(gamma),
        |p| {
            let q = 1.0 - p;
            if gamma == 0.0 || q <= 0.0 {
                0.0
            } else {
                -gamma * q.powf(gamma - 1.0)
            }
        },
    )
}

/// Anti-focal loss `-(1 + alpha p)^gamma log p`.
pub fn anti_focal_token(
    z: ArrayView1<f64>,
    gold: usize,
    beta: f64,
    gamma: f64,
    alpha: f64,
) -> (f64, Array1<f64>) {
    reweighted_token(
        z,
        gold,
        beta,
        |p| (1.0 + alpha * p).powf(gamma),
        |p| {
            if gamma == 0.0 || alpha == 0.0 {
                0.0
            } else {
                gamma * alpha * (1.0 + alpha * p).powf(gamma - 1.0)
            }
        },
    )
}

/// Floored log-probabilities and the mask of entries above the floor.
fn floored_log_probs(z: ArrayView1<f64>, beta: f64) -> (Array1<f64>, Vec<bool>) {
    let lp = log_softmax(z, beta);
    let lf = ln_floor();
    let mask = lp.iter().map(|&l| l >= lf).collect();
    (lp.mapv(|l| l.max(lf)), mask)
}

/// Bias product `softmax(log p_beta(z) + log p_beta'(z'))`.
pub fn bias_product(
    z: ArrayView1<f64>,
    z_frozen: ArrayView1<f64>,
    beta: f64,
    beta_frozen: f64,
) -> Array1<f64> {
    bias_product_log(z, z_frozen, beta, beta_frozen).mapv(f64::exp)
}

/// Log of [`bias_product`].
pub fn bias_product_log(
    z: ArrayView1<f64>,
    z_frozen: ArrayView1<f64>,
    beta: f64,
    beta_frozen: f64,
) -> Array1<f64> {
    let (a, _) = floored_log_probs(z, beta);
    let (b, _) = floored_log_probs(z_frozen, beta_frozen);
    let s = a + b;
    log_softmax(s.view(), 1.0)
}

/// `-log q_gold` for the bias product `q`; the gradient flows through `z` only.
pub fn bp_token(
    z: ArrayView1<f64>,
    z_frozen: ArrayView1<f64>,
    gold: usize,
    beta: f64,
    beta_frozen: f64,
) -> (f64, Array1<f64>) {
    let (a, mask) = floored_log_probs(z, beta);
    let (b, _) = floored_log_probs(z_frozen, beta_frozen);
    let lq = log_softmax((a + b).view(), 1.0);
    if lq[gold] < ln_floor() {
        return (-ln_floor(), Array1::zeros(z.len()));
    }
    let q = lq.mapv(f64::exp);
    let probs = log_softmax(z, beta).mapv(f64::exp);

    // dL/da_i = q_i - [i = gold]; da_i/dz_j = m_i * beta * (delta_ij - p_j)
    let mut dlda = q;
    dlda[gold] -= 1.0;
    let mut masked_sum = 0.0;
    for (d, &m) in dlda.iter_mut().zip(&mask) {
        if !m {
            *d = 0.0;
        }
        masked_sum += *d;
    }
    let grad = Array1::from_iter(
        dlda.iter()
            .zip(probs.iter())
            .map(|(&d, &pj)| beta * (d - pj * masked_sum)),
    );
    (-lq[gold], grad)
}

/// Pointwise values on a bare probability, used for loss-curve tables.
pub fn ce_value(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

pub fn focal_value(p: f64, gamma: f64) -> f64 {
    -(1.0 - p).powf(gamma) * p.max(PROB_FLOOR).ln()
}

pub fn anti_focal_value(p: f64, gamma: f64, alpha: f64) -> f64 {
    -(1.0 + alpha * p).powf(gamma) * p.max(PROB_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Central differences of a scalar function of the logits.
    fn numeric_grad(f: impl Fn(&Array1<f64>) -> f64, z: &Array1<f64>) -> Array1<f64> {
        let eps = 1e-6;
        Array1::from_iter((0..z.len()).map(|j| {
            let mut a = z.clone();
            a[j] += eps;
            let mut b = z.clone();
            b[j] -= eps;
            (f(&a) - f(&b)) / (2.0 * eps)
        }))
    }

    fn close(a: &Array1<f64>, b: &Array1<f64>, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
    }

    #[test]
    fn pointwise_hand_values() {
        assert!((focal_value(0.5, 1.0) - 0.346574).abs() < 1e-6);
        assert!((anti_focal_value(0.5, 1.0, 1.0) - 1.039721).abs() < 1e-6);
        assert_eq!(ce_value(1.0), 0.0);
        assert!(ce_value(0.0).is_finite());
    }

    #[test]
    fn token_value_matches_pointwise() {
        // logits [ln 0.5, ln 0.5] give p = 0.5
        let z = array![0.5f64.ln(), 0.5f64.ln()];
        assert!((focal_token(z.view(), 0, 1.0, 1.0).0 - 0.346574).abs() < 1e-6);
        assert!((anti_focal_token(z.view(), 0, 1.0, 1.0, 1.0).0 - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn reductions_to_ce() {
        let z = array![0.3, -1.2, 2.0, 0.7];
        let ce = ce_token(z.view(), 1, 1.3);
        let fl = focal_token(z.view(), 1, 1.3, 0.0);
        let afl = anti_focal_token(z.view(), 1, 1.3, 2.0, 0.0);
        assert!((ce.0 - fl.0).abs() < 1e-12);
        assert!((ce.0 - afl.0).abs() < 1e-12);
        assert!(close(&ce.1, &fl.1, 1e-12));
        assert!(close(&ce.1, &afl.1, 1e-12));
    }

    #[test]
    fn bp_reductions() {
        let z = array![0.3, -1.2, 2.0, 0.7];
        let zf = array![1.0, 0.0, -3.0, 0.5];
        // beta' = 0: uniform frozen factor
        let q = bias_product(z.view(), zf.view(), 1.0, 0.0);
        let p = log_softmax(z.view(), 1.0).mapv(f64::exp);
        assert!(close(&q, &p, 1e-10));
        // theta' = theta: doubled inverse temperature
        let q = bias_product(z.view(), z.view(), 0.7, 0.7);
        let p2 = log_softmax(z.view(), 1.4).mapv(f64::exp);
        assert!(close(&q, &p2, 1e-10));
    }

    #[test]
    fn bp_three_word_direct_formula() {
        let z = array![0.4, -0.3, 1.1];
        let zf = array![2.0, 0.1, -0.5];
        let (beta, betaf) = (1.0_f64, 0.5_f64);
        let p: Vec<f64> = {
            let e: Vec<f64> = z.iter().map(|x| (beta * x).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        };
        let pf: Vec<f64> = {
            let e: Vec<f64> = zf.iter().map(|x| (betaf * x).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        };
        let prod: Vec<f64> = p.iter().zip(&pf).map(|(a, b)| a * b).collect();
        let s: f64 = prod.iter().sum();
        let q = bias_product(z.view(), zf.view(), beta, betaf);
        for i in 0..3 {
            assert!((q[i] - prod[i] / s).abs() < 1e-12);
        }
    }

    #[test]
    fn floored_gold_has_no_gradient() {
        let z = array![0.0, 100.0];
        let (l, g) = ce_token(z.view(), 0, 1.0);
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-12);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn analytic_gradients_match_differences(
            z in prop::collection::vec(-4.0f64..4.0, 2..7),
            zf in prop::collection::vec(-4.0f64..4.0, 7),
            gold_seed in 0usize..100,
            beta in 0.2f64..2.0,
            beta_f in 0.0f64..2.0,
            gamma in 0.0f64..3.0,
            alpha in 0.0f64..2.0,
        ) {
            let z = Array1::from(z);
            let n = z.len();
            let zf = Array1::from(zf[..n].to_vec());
            let gold = gold_seed % n;
            let tol = 1e-6;

            let (_, g) = ce_token(z.view(), gold, beta);
            prop_assert!(close(&g, &numeric_grad(|v| ce_token(v.view(), gold, beta).0, &z), tol));
            let (_, g) = focal_token(z.view(), gold, beta, gamma);
            prop_assert!(close(&g, &numeric_grad(|v| focal_token(v.view(), gold, beta, gamma).0, &z), tol));
            let (_, g) = anti_focal_token(z.view(), gold, beta, gamma, alpha);
            prop_assert!(close(&g, &numeric_grad(|v| anti_focal_token(v.view(), gold, beta, gamma, alpha).0, &z), tol));
            let (_, g) = bp_token(z.view(), zf.view(), gold, beta, beta_f);
            prop_assert!(close(&g, &numeric_grad(|v| bp_token(v.view(), zf.view(), gold, beta, beta_f).0, &z), tol));
        }

        #[test]
        fn losses_finite_for_extreme_logits(
            z in prop::collection::vec(-1e3f64..1e3, 2..6),
            gold_seed in 0usize..100,
        ) {
            let z = Array1::from(z);
            let gold = gold_seed % z.len();
            let zf = z.mapv(|x| -x);
            for (l, g) in [
                ce_token(z.view(), gold, 1.0),
                focal_token(z.view(), gold, 1.0, 0.5),
                anti_focal_token(z.view(), gold, 1.0, 1.0, 1.0),
                bp_token(z.view(), zf.view(), gold, 1.0, 1.0),
            ] {
                prop_assert!(l.is_finite() && l >= 0.0);
                prop_assert!(g.iter().all(|x| x.is_finite()));
            }
        }

        #[test]
        // anti-focal stays monotone while gamma * alpha < e
        fn ce_focal_anti_focal_decrease_in_gold_probability(
            p1 in 0.001f64..0.998, dp in 0.0005f64..0.5, gamma in 0.0f64..2.0, alpha in 0.0f64..1.3,
        ) {
            let p2 = (p1 + dp).min(0.999);
            prop_assume!(p2 > p1);
            prop_assert!(ce_value(p2) < ce_value(p1));
            prop_assert!(focal_value(p2, gamma) < focal_value(p1, gamma));
            prop_assert!(anti_focal_value(p2, gamma, alpha) < anti_focal_value(p1, gamma, alpha));
        }
    }
}
