//! Dice and 95th-percentile Hausdorff distance per tumor region, and the
//! aggregated report.

use std::fmt::Write as _;

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::inference::{labels_to_regions, Region};

fn check_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "mask pair".into(),
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    Ok(())
}

/// `2 |P ∩ G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground voxels with at least one 6-connected neighbor that is
/// background or outside the grid.
pub fn surface(mask: &[bool], e: [usize; 3]) -> Vec<bool> {
    let idx = |x: usize, y: usize, z: usize| (x * e[1] + y) * e[2] + z;
    let mut out = vec![false; mask.len()];
    for x in 0..e[0] {
        for y in 0..e[1] {
            for z in 0..e[2] {
                let i = idx(x, y, z);
                if !mask[i] {
                    continue;
                }
                let p = [x, y, z];
                out[i] = (0..3).any(|a| {
                    let lo = p[a] == 0 || {
                        let mut q = p;
                        q[a] -= 1;
                        !mask[idx(q[0], q[1], q[2])]
                    };
                    let hi = p[a] + 1 == e[a] || {
                        let mut q = p;
                        q[a] += 1;
                        !mask[idx(q[0], q[1], q[2])]
                    };
                    lo || hi
                });
            }
        }
    }
    out
}

/// One pass of the lower-envelope distance transform along a line:
/// `out[p] = min_q w (p - q)^2 + f[q]`.
fn edt_line(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let meet = |q: usize, v: usize| -> f64 {
        let (qf, vf) = (q as f64, v as f64);
        ((f[q] + w * qf * qf) - (f[v] + w * vf * vf)) / (2.0 * w * (qf - vf))
    };
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        loop {
            match hull.last() {
                Some(&v) => {
                    let s = meet(q, v);
                    if s <= *bounds.last().expect("bound per hull entry") {
                        hull.pop();
                        bounds.pop();
                    } else {
                        hull.push(q);
                        bounds.push(s);
                        break;
                    }
                }
                None => {
                    hull.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
            }
        }
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < hull.len() && bounds[k + 1] < p as f64 {
            k += 1;
        }
        let d = p as f64 - hull[k] as f64;
        *o = w * d * d + f[hull[k]];
    }
}

/// Squared Euclidean distance (in mm²) from every voxel to the nearest
/// `sites` voxel; infinite when there are no sites.
pub fn squared_edt(sites: &[bool], e: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [e[1] * e[2], e[2], 1];
    for axis in 0..3 {
        let len = e[axis];
        let w = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..e[others[0]] {
            for j in 0..e[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for (k, l) in line.iter_mut().enumerate() {
                    *l = d[base + k * strides[axis]];
                }
                edt_line(&line, w, &mut out);
                for (k, o) in out.iter().enumerate() {
                    d[base + k * strides[axis]] = *o;
                }
            }
        }
    }
    d
}

/// Nearest-rank percentile: the `ceil(q n)`-th smallest value.
pub fn percentile_nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Image diagonal in mm.
pub fn diagonal_mm(e: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|a| (e[a] as f64 * spacing[a]).powi(2)).sum::<f64>().sqrt()
}

/// Symmetric 95th-percentile surface distance. Both masks empty gives 0,
/// exactly one empty gives `sentinel`.
pub fn hd95(pred: &[bool], gt: &[bool], e: [usize; 3], spacing: [f64; 3], sentinel: f64) -> Result<f64> {
    check_len(pred, gt)?;
    if pred.len() != e.iter().product::<usize>() {
        return Err(Error::InvalidShape {
            shape: e.to_vec(),
            reason: format!("mask has {} voxels", pred.len()),
        });
    }
    let (pe, ge) = (!pred.iter().any(|&v| v), !gt.iter().any(|&v| v));
    match (pe, ge) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(sentinel),
        _ => {}
    }
    let (sp, sg) = (surface(pred, e), surface(gt, e));
    let (dp, dg) = (squared_edt(&sp, e, spacing), squared_edt(&sg, e, spacing));
    let directed = |from: &[bool], to_dist: &[f64]| -> f64 {
        let mut d: Vec<f64> = from
            .iter()
            .zip(to_dist)
            .filter(|(s, _)| **s)
            .map(|(_, d)| d.sqrt())
            .collect();
        percentile_nearest_rank(&mut d, 0.95)
    };
    Ok(directed(&sp, &dg).max(directed(&sg, &dp)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    /// ET, TC, WT.
    pub dice: [f64; 3],
    pub hd95: [f64; 3],
}

/// Region dice and HD95 of a predicted label map against ground truth.
/// `sentinel` defaults to the image diagonal when `None`.
pub fn evaluate_case(
    case_id: &str,
    pred: &LabelMap,
    gt: &LabelMap,
    spacing: [f64; 3],
    sentinel: Option<f64>,
) -> Result<CaseMetrics> {
    let e = gt.extents();
    if pred.extents() != e {
        return Err(Error::ExtentMismatch {
            lhs: pred.extents(),
            rhs: e,
        });
    }
    let sentinel = sentinel.unwrap_or_else(|| diagonal_mm(e, spacing));
    let (rp, rg) = (labels_to_regions(pred), labels_to_regions(gt));
    let mut out = CaseMetrics {
        case_id: case_id.to_string(),
        dice: [0.0; 3],
        hd95: [0.0; 3],
    };
    for (i, r) in Region::ALL.into_iter().enumerate() {
        let (p, g) = (rp.mask(r), rg.mask(r));
        out.dice[i] = dice(&p, &g)?;
        out.hd95[i] = hd95(&p, &g, e, spacing, sentinel)?;
    }
    Ok(out)
}

/// Per-case rows plus region means. Sentinel HD95 values enter the means
/// unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_dice: [f64; 3],
    pub mean_hd95: [f64; 3],
}

fn avg3(v: [f64; 3]) -> f64 {
    (v[0] + v[1] + v[2]) / 3.0
}

impl MetricsReport {
    pub fn average_dice(&self) -> f64 {
        avg3(self.mean_dice)
    }

    pub fn average_hd95(&self) -> f64 {
        avg3(self.mean_hd95)
    }

    /// Dice in percent and HD95 in mm, columns ET, TC, WT, Average.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8} {:>8}", "", "ET", "TC", "WT", "Average");
        let mut row = |label: &str, v: [f64; 3], scale: f64| {
            let _ = writeln!(
                s,
                "{:<24} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                label,
                v[0] * scale,
                v[1] * scale,
                v[2] * scale,
                avg3(v) * scale
            );
        };
        for c in &self.cases {
            row(&format!("{} Dice", c.case_id), c.dice, 100.0);
        }
        row("Mean Dice (%)", self.mean_dice, 100.0);
        for c in &self.cases {
            row(&format!("{} HD95", c.case_id), c.hd95, 1.0);
        }
        row("Mean HD95 (mm)", self.mean_hd95, 1.0);
        s
    }

    /// `case_id,region,dice,hd95`, one row per case and region.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,region,dice,hd95\n");
        for c in &self.cases {
            for (i, r) in Region::ALL.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", c.case_id, r.name(), c.dice[i], c.hd95[i]);
            }
        }
        s
    }
}

pub fn aggregate_report(cases: &[CaseMetrics]) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Empty("metrics case list".into()));
    }
    let n = cases.len() as f64;
    let mean = |f: &dyn Fn(&CaseMetrics) -> [f64; 3]| -> [f64; 3] {
        [0, 1, 2].map(|i| cases.iter().map(|c| f(c)[i]).sum::<f64>() / n)
    };
    Ok(MetricsReport {
        cases: cases.to_vec(),
        mean_dice: mean(&|c| c.dice),
        mean_hd95: mean(&|c| c.hd95),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_hand_count() {
        let p = [true, true, false, false];
        let g = [false, true, true, false];
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
    }

    #[test]
    fn edt_line_matches_brute_force() {
        let f = [f64::INFINITY, 0.0, f64::INFINITY, f64::INFINITY, 2.0, f64::INFINITY];
        let mut out = [0.0; 6];
        edt_line(&f, 1.5, &mut out);
        for p in 0..6 {
            let want = (0..6)
                .filter(|&q| f[q].is_finite())
                .map(|q| 1.5 * (p as f64 - q as f64).powi(2) + f[q])
                .fold(f64::INFINITY, f64::min);
            assert_eq!(out[p], want);
        }
    }

    #[test]
    fn nearest_rank() {
        let mut v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&mut v, 0.95), 19.0);
        assert_eq!(percentile_nearest_rank(&mut [4.0], 0.95), 4.0);
    }
}
