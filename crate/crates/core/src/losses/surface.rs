//! Loss curves over a synthetic six-word distribution: the gold word has
//! probability `p1` and the next five words share `1 - p1` equally. The same
//! construction is used for the frozen reference, and each distribution is
//! read as unit-temperature logits `z = ln p` before `beta`/`beta'` apply.

use std::io::Write;

use ndarray::Array1;

use super::token::{anti_focal_value, bias_product, ce_token, focal_value};
use crate::error::{Error, Result};
use crate::model::log_softmax;

const SPREAD: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceRow {
    pub p1: f64,
    pub ce: f64,
    pub bp: f64,
    pub fl: f64,
    pub afl: f64,
}

fn construct_logits(p1: f64) -> Array1<f64> {
    let rest = (1.0 - p1) / SPREAD as f64;
    let mut z = Array1::from_elem(SPREAD + 1, rest.ln());
    z[0] = p1.ln();
    z
}

pub fn loss_surface(grid: &[f64], beta: f64, beta_prime: f64, gamma: f64, alpha: f64) -> Result<Vec<SurfaceRow>> {
    grid.iter()
        .map(|&p1| {
            if !(p1 > 0.0 && p1 < 1.0) {
                return Err(Error::invalid("p1", format!("{p1} outside (0, 1)")));
            }
            let z = construct_logits(p1);
            let p_gold = log_softmax(z.view(), beta)[0].exp();
            let q = bias_product(z.view(), z.view(), beta, beta_prime);
            Ok(SurfaceRow {
                p1,
                ce: ce_token(z.view(), 0, beta).0,
                bp: -q[0].ln(),
                fl: focal_value(p_gold, gamma),
                afl: anti_focal_value(p_gold, gamma, alpha),
            })
        })
        .collect()
}

pub fn write_surface_csv<W: Write>(rows: &[SurfaceRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "p1,ce,bp,fl,afl")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.p1, r.ce, r.bp, r.fl, r.afl)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        (1..100).map(|i| i as f64 / 100.0).collect()
    }

    #[test]
    fn confident_limit_goes_to_zero() {
        let eps = 1e-9;
        let rows = loss_surface(&[1.0 - 5.0 * eps], 1.0, 1.0, 1.0, 1.0).unwrap();
        let r = rows[0];
        for v in [r.ce, r.bp, r.fl, r.afl] {
            assert!(v.abs() < 1e-7, "{r:?}");
        }
    }

    #[test]
    fn focal_below_ce() {
        for r in loss_surface(&grid(), 1.0, 1.0, 1.0, 1.0).unwrap() {
            assert!(r.fl <= r.ce);
        }
    }

    #[test]
    fn single_crossing_between_bp_and_ce() {
        // with beta = beta' = 1 and identical factors, q_gold > p1 exactly
        // when 6 p1^2 - 7 p1 + 1 < 0, i.e. p1 > 1/6
        let rows = loss_surface(&grid(), 1.0, 1.0, 1.0, 1.0).unwrap();
        let signs: Vec<bool> = rows.iter().map(|r| r.bp < r.ce).collect();
        let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(changes, 1);
        for r in &rows {
            assert_eq!(r.bp < r.ce, r.p1 > 1.0 / 6.0, "{r:?}");
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(loss_surface(&[0.0], 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(loss_surface(&[1.0], 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn csv_schema() {
        let rows = loss_surface(&[0.5], 1.0, 1.0, 1.0, 1.0).unwrap();
        let mut buf = Vec::new();
        write_surface_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("p1,ce,bp,fl,afl\n0.5,"));
    }
}
