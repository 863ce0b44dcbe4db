//! Boundary and duration targets from ground-truth actions.
//!
//! Actions are first rescaled into snippet coordinates, where snippet `n`
//! sits at `t_n = n`. A snippet is a positive start when the region
//! `[t_n - 1, t_n + 1]` covers at least half of some action's start region
//! `[s - 1.5, s + 1.5]` (ratios summed over actions); ends likewise. A
//! proposal-map cell `(d, t)` is a positive when its interval `[t, t + d]` has
//! the highest IoU with some action among all valid cells.

use crate::bmm::is_valid_cell;
use crate::data::{rescaled_actions, VideoAnnotation};
use crate::evaluation::interval_iou;

/// Half-width of a boundary's region.
pub const BOUNDARY_HALF_WIDTH: f64 = 1.5;
/// Half-width of a snippet's region.
pub const SNIPPET_HALF_WIDTH: f64 = 1.0;
/// Overlap ratio at which a snippet becomes a positive.
pub const POSITIVE_RATIO: f64 = 0.5;
/// Tolerance for ties with the best IoU.
pub const IOU_TIE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryLabels {
    pub start: Vec<bool>,
    pub end: Vec<bool>,
}

/// Binary `[D, T]` map, row `d - 1` for duration `d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DurationLabels {
    pub max_duration: usize,
    pub len: usize,
    pub cells: Vec<bool>,
}

impl DurationLabels {
    pub fn get(&self, d: usize, t: usize) -> bool {
        self.cells[(d - 1) * self.len + t]
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| (i / self.len + 1, i % self.len))
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

fn boundary_mask(points: impl Iterator<Item = f64> + Clone, t: usize) -> Vec<bool> {
    (0..t)
        .map(|n| {
            let r_n = (n as f64 - SNIPPET_HALF_WIDTH, n as f64 + SNIPPET_HALF_WIDTH);
            // every region has the same width, so sum overlaps before dividing
            let covered: f64 = points
                .clone()
                .map(|p| overlap(r_n, (p - BOUNDARY_HALF_WIDTH, p + BOUNDARY_HALF_WIDTH)))
                .sum();
            covered / (2.0 * BOUNDARY_HALF_WIDTH) >= POSITIVE_RATIO
        })
        .collect()
}

/// Labels from actions already in snippet coordinates.
pub fn boundary_labels(actions: &[(f64, f64)], t: usize) -> BoundaryLabels {
    BoundaryLabels {
        start: boundary_mask(actions.iter().map(|a| a.0), t),
        end: boundary_mask(actions.iter().map(|a| a.1), t),
    }
}

pub fn generate_boundary_labels(annotation: &VideoAnnotation, t: usize) -> BoundaryLabels {
    boundary_labels(&rescaled_actions(annotation, t), t)
}

/// Labels from actions already in snippet coordinates.
pub fn duration_labels(actions: &[(f64, f64)], t: usize, max_d: usize) -> DurationLabels {
    let mut cells = vec![false; max_d * t];
    let mut ious = vec![0.0; max_d * t];
    for &a in actions {
        let mut best = 0.0f64;
        for d in 1..=max_d {
            for s in 0..t {
                let i = (d - 1) * t + s;
                ious[i] = if is_valid_cell(d, s, t) {
                    interval_iou((s as f64, (s + d) as f64), a)
                } else {
                    0.0
                };
                best = best.max(ious[i]);
            }
        }
        if best <= 0.0 {
            continue;
        }
        for (c, &v) in cells.iter_mut().zip(&ious) {
            if v > 0.0 && v >= best - IOU_TIE {
                *c = true;
            }
        }
    }
    DurationLabels {
        max_duration: max_d,
        len: t,
        cells,
    }
}

pub fn generate_duration_labels(annotation: &VideoAnnotation, t: usize, max_d: usize) -> DurationLabels {
    duration_labels(&rescaled_actions(annotation, t), t, max_d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_start_example() {
        let l = boundary_labels(&[(3.0, 7.0)], 10);
        let pos: Vec<usize> = (0..10).filter(|&n| l.start[n]).collect();
        assert_eq!(pos, vec![2, 3, 4]);
        let pos: Vec<usize> = (0..10).filter(|&n| l.end[n]).collect();
        assert_eq!(pos, vec![6, 7, 8]);
    }

    #[test]
    fn start_at_zero_is_not_clipped() {
        // region [-1.5, 1.5]: snippet 0 covers [-1, 1] = 2/3, snippet 1 covers [0, 1.5] = 1/2
        let l = boundary_labels(&[(0.0, 4.0)], 6);
        assert_eq!(&l.start[..3], &[true, true, false]);
    }

    #[test]
    fn no_actions_no_positives() {
        let l = boundary_labels(&[], 5);
        assert!(l.start.iter().chain(&l.end).all(|&b| !b));
        let d = duration_labels(&[], 5, 5);
        assert_eq!(d.positives().count(), 0);
    }

    #[test]
    fn exact_cell_match() {
        let d = duration_labels(&[(2.0, 5.0)], 8, 8);
        assert_eq!(d.positives().collect::<Vec<_>>(), vec![(3, 2)]);
        assert!(d.get(3, 2));
    }

    #[test]
    fn labels_from_annotation() {
        let a = VideoAnnotation::new("v", 10.0, 16.0, vec![crate::data::Action::new(3.0, 7.0)]).unwrap();
        let l = generate_boundary_labels(&a, 10);
        assert_eq!(l, boundary_labels(&[(3.0, 7.0)], 10));
        assert_eq!(generate_duration_labels(&a, 10, 10).positives().collect::<Vec<_>>(), vec![(4, 3)]);
    }
}
