//! Weighted binary log-likelihood and the combined proposal loss.
//!
//! `loss_wb = -sum[(L/N+) ln P + ((1 - L)/N-) ln(1 - P)]`, with `P` clamped to
//! `[eps, 1 - eps]`. When a batch has no positives (or no negatives) the
//! corresponding term is dropped and the result is flagged degenerate.
//! `loss_act = loss_wb + lambda * mean((P - L)^2)` over valid map cells, and
//! the total is `loss_start + loss_end + loss_act`.

use serde::Serialize;

use super::labels::{BoundaryLabels, DurationLabels};
use crate::bmm::{validity_mask, BmmVars};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_LAMBDA: f64 = 10.0;

/// Positive/negative counts of one weighted term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TermCounts {
    pub positives: usize,
    pub negatives: usize,
}

impl TermCounts {
    pub fn degenerate(&self) -> bool {
        self.positives == 0 || self.negatives == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub start: f64,
    pub end: f64,
    pub act: f64,
    pub total: f64,
    pub lambda: f64,
    pub start_counts: TermCounts,
    pub end_counts: TermCounts,
    pub act_counts: TermCounts,
}

impl LossReport {
    fn new(start: f64, end: f64, act: f64, lambda: f64, counts: [TermCounts; 3]) -> Self {
        LossReport {
            start,
            end,
            act,
            total: start + end + act,
            lambda,
            start_counts: counts[0],
            end_counts: counts[1],
            act_counts: counts[2],
        }
    }

    pub fn degenerate(&self) -> bool {
        self.start_counts.degenerate() || self.end_counts.degenerate() || self.act_counts.degenerate()
    }
}

fn clamp_eps(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn counts(labels: &[bool], mask: &[bool]) -> TermCounts {
    let positives = labels.iter().zip(mask).filter(|(&l, &m)| m && l).count();
    let negatives = labels.iter().zip(mask).filter(|(&l, &m)| m && !l).count();
    TermCounts { positives, negatives }
}

/// Plain evaluation of the weighted term over the cells where `mask` is set.
pub fn loss_wb_masked(p: &[f64], labels: &[bool], mask: &[bool]) -> (f64, TermCounts) {
    let c = counts(labels, mask);
    let mut pos = 0.0;
    let mut neg = 0.0;
    for ((&pi, &li), &m) in p.iter().zip(labels).zip(mask) {
        if !m {
            continue;
        }
        let q = clamp_eps(pi);
        if li {
            pos += q.ln();
        } else {
            neg += (1.0 - q).ln();
        }
    }
    let mut total = 0.0;
    if c.positives > 0 {
        total -= pos / c.positives as f64;
    }
    if c.negatives > 0 {
        total -= neg / c.negatives as f64;
    }
    (total, c)
}

pub fn loss_wb(p: &[f64], labels: &[bool]) -> (f64, TermCounts) {
    loss_wb_masked(p, labels, &vec![true; p.len()])
}

/// Plain evaluation of `loss_act` over the cells where `mask` is set.
pub fn loss_act_masked(p: &[f64], labels: &[bool], mask: &[bool], lambda: f64) -> (f64, TermCounts) {
    let (wb, c) = loss_wb_masked(p, labels, mask);
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return (wb, c);
    }
    let sq: f64 = p
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&pi, &li), _)| (pi - if li { 1.0 } else { 0.0 }).powi(2))
        .sum();
    (wb + lambda * sq / n as f64, c)
}

pub fn loss_act(p: &[f64], labels: &[bool], lambda: f64) -> (f64, TermCounts) {
    loss_act_masked(p, labels, &vec![true; p.len()], lambda)
}

/// Weighted term on the tape for `p` of any shape, flattened against `labels`.
pub fn loss_wb_var<T: Real>(g: &mut Graph<'_, T>, p: Var, labels: &[bool], mask: &[bool]) -> Result<(Var, TermCounts)> {
    let c = counts(labels, mask);
    let w = |want: bool, n: usize| -> Vec<T> {
        let k = if n > 0 { T::one() / T::lit(n as f64) } else { T::zero() };
        labels
            .iter()
            .zip(mask)
            .map(|(&l, &m)| if m && l == want { k } else { T::zero() })
            .collect()
    };
    let q = g.clamp(p, T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS))?;
    let ln_p = g.ln(q)?;
    let one_minus = g.affine(q, -T::one(), T::one())?;
    let ln_1mp = g.ln(one_minus)?;
    let pos = g.dot_const(ln_p, &w(true, c.positives))?;
    let neg = g.dot_const(ln_1mp, &w(false, c.negatives))?;
    let s = g.add(pos, neg)?;
    Ok((g.scale(s, -T::one())?, c))
}

/// Actionness term on the tape; `p` is the `[D, T]` map.
pub fn loss_act_var<T: Real>(g: &mut Graph<'_, T>, p: Var, labels: &DurationLabels, lambda: f64) -> Result<(Var, TermCounts)> {
    let mask: Vec<bool> = validity_mask::<f64>(labels.max_duration, labels.len)
        .data()
        .iter()
        .map(|&m| m > 0.0)
        .collect();
    let (wb, c) = loss_wb_var(g, p, &labels.cells, &mask)?;
    let n = mask.iter().filter(|&&m| m).count().max(1);
    let target = Tensor::new(
        g.shape(p).to_vec(),
        labels.cells.iter().map(|&l| if l { -T::one() } else { T::zero() }).collect(),
    )?;
    let diff = g.add_const(p, &target)?;
    let sq = g.mul(diff, diff)?;
    let weights: Vec<T> = mask
        .iter()
        .map(|&m| if m { T::lit(lambda / n as f64) } else { T::zero() })
        .collect();
    let mse = g.dot_const(sq, &weights)?;
    Ok((g.add(wb, mse)?, c))
}

/// The total loss on the tape and its report.
pub fn loss_total<T: Real>(
    g: &mut Graph<'_, T>,
    out: &BmmVars,
    boundary: &BoundaryLabels,
    duration: &DurationLabels,
    lambda: f64,
) -> Result<(Var, LossReport)> {
    let all = vec![true; boundary.start.len()];
    let (ls, cs) = loss_wb_var(g, out.start, &boundary.start, &all)?;
    let (le, ce) = loss_wb_var(g, out.end, &boundary.end, &all)?;
    let (la, ca) = loss_act_var(g, out.actionness, duration, lambda)?;
    let se = g.add(ls, le)?;
    let total = g.add(se, la)?;
    let v = |g: &Graph<'_, T>, x: Var| g.value(x).item().as_f64();
    let report = LossReport::new(v(g, ls), v(g, le), v(g, la), lambda, [cs, ce, ca]);
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    #[test]
    fn scalar_examples() {
        let (wb, c) = loss_wb(&[0.8, 0.2], &[true, false]);
        assert!((wb - 0.44629).abs() < 1e-4, "{wb}");
        assert_eq!((c.positives, c.negatives), (1, 1));
        let (act, _) = loss_act(&[0.8, 0.2], &[true, false], 10.0);
        assert!((act - 0.84629).abs() < 1e-4, "{act}");
        let (a0, _) = loss_act(&[0.8, 0.2], &[true, false], 0.0);
        assert_eq!(a0, wb);
    }

    #[test]
    fn clipped_perfect_prediction() {
        let (wb, _) = loss_wb(&[1.0, 0.0], &[true, false]);
        assert!(wb >= 0.0 && wb <= 2e-7 * PROB_EPS.ln().abs());
    }

    #[test]
    fn degenerate_terms_are_dropped() {
        let (wb, c) = loss_wb(&[0.5, 0.25], &[false, false]);
        assert!(c.degenerate());
        assert!((wb - (-(0.5f64.ln() + 0.75f64.ln()) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_plain_evaluation() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::with_params(&store);
        let p = g.input(Tensor::vector(vec![0.8, 0.2, 0.6]), true).unwrap();
        let labels = [true, false, true];
        let (v, _) = loss_wb_var(&mut g, p, &labels, &[true; 3]).unwrap();
        let (want, _) = loss_wb(&[0.8, 0.2, 0.6], &labels);
        assert!((g.value(v).item() - want).abs() < 1e-12);

        let dl = DurationLabels {
            max_duration: 2,
            len: 2,
            cells: vec![true, false, false, false],
        };
        let pa = g.input(Tensor::new(vec![2, 2], vec![0.7, 0.4, 0.3, 0.0]).unwrap(), true).unwrap();
        let (a, c) = loss_act_var(&mut g, pa, &dl, 10.0).unwrap();
        assert_eq!((c.positives, c.negatives), (1, 2));
        let (want, _) = loss_act_masked(&[0.7, 0.4, 0.3, 0.0], &dl.cells, &[true, true, true, false], 10.0);
        assert!((g.value(a).item() - want).abs() < 1e-12);
    }
}
