//! Alignment-quality metrics: spatial correlation, transfer quantity,
//! retrieval and functional transfer error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{median, norm, pearson, Matrix, NumericsError, RngState};

/// Per-voxel Pearson correlation between predicted and recorded signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fsc {
    /// `None` where either column has zero variance.
    pub per_voxel: Vec<Option<f64>>,
    pub mean: f64,
    pub excluded: usize,
}

pub fn fsc(pred: &Matrix, target: &Matrix) -> Result<Fsc> {
    if pred.shape() != target.shape() {
        return Err(NumericsError::DimensionMismatch {
            op: "fsc",
            left: pred.shape(),
            right: target.shape(),
        }
        .into());
    }
    if pred.rows() < 2 {
        return Err(Error::Config(format!("fsc needs at least 2 samples, got {}", pred.rows())));
    }
    let mut per_voxel = Vec::with_capacity(pred.cols());
    let (mut sum, mut defined) = (0.0, 0usize);
    for c in 0..pred.cols() {
        match pearson(&pred.column(c), &target.column(c)) {
            Ok(r) => {
                sum += r;
                defined += 1;
                per_voxel.push(Some(r));
            }
            Err(NumericsError::ZeroVariance) => per_voxel.push(None),
            Err(e) => return Err(e.into()),
        }
    }
    if defined == 0 {
        return Err(NumericsError::ZeroVariance.into());
    }
    Ok(Fsc {
        per_voxel,
        mean: sum / defined as f64,
        excluded: pred.cols() - defined,
    })
}

/// L1 mass each source voxel sends into the target space: `TQ_i = Σ_j |M_ij|`.
pub fn tq(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|v| v.abs()).sum()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub mean: f64,
    pub median: f64,
}

/// Mean and median of `values[start..end]`.
pub fn summarize_block(name: &str, values: &[f64], start: usize, end: usize) -> Result<BlockSummary> {
    if start >= end || end > values.len() {
        return Err(Error::Config(format!(
            "block {name} range [{start}, {end}) invalid for {} values",
            values.len()
        )));
    }
    let slice = &values[start..end];
    Ok(BlockSummary {
        name: name.to_string(),
        start,
        end,
        mean: slice.iter().sum::<f64>() / slice.len() as f64,
        median: median(slice),
    })
}

fn unit_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let n = norm(out.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(NumericsError::ZeroNorm.into());
        }
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Top-1 identification among random candidate subsets. Query `i`'s true
/// match is gallery row `i`; each trial draws `candidates - 1` distinct
/// distractors and succeeds when the true match is strictly the most
/// cosine-similar candidate.
pub fn retrieval_top1(
    queries: &Matrix,
    gallery: &Matrix,
    candidates: usize,
    repeats: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if queries.cols() != gallery.cols() {
        return Err(NumericsError::DimensionMismatch {
            op: "retrieval_top1",
            left: queries.shape(),
            right: gallery.shape(),
        }
        .into());
    }
    let (q, g) = (queries.rows(), gallery.rows());
    if q == 0 || q > g {
        return Err(Error::Config(format!("need 1 <= queries ({q}) <= gallery ({g})")));
    }
    if candidates == 0 || candidates > g || repeats == 0 {
        return Err(Error::Config(format!(
            "candidates must be in [1, {g}] and repeats positive (got {candidates}, {repeats})"
        )));
    }
    let sims = unit_rows(queries)?.matmul_t(&unit_rows(gallery)?)?;
    let mut pool: Vec<usize> = Vec::with_capacity(g);
    let mut hits = 0usize;
    for i in 0..q {
        let row = sims.row(i);
        let truth = row[i];
        for _ in 0..repeats {
            pool.clear();
            pool.extend((0..g).filter(|&j| j != i));
            let mut ok = true;
            for t in 0..candidates - 1 {
                let pick = t + rng.below(pool.len() - t);
                pool.swap(t, pick);
                if row[pool[t]] >= truth {
                    ok = false;
                }
            }
            hits += ok as usize;
        }
    }
    Ok(hits as f64 / (q * repeats) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferError {
    pub model: f64,
    /// Same quantity for the ground-truth map.
    pub oracle: f64,
}

fn relative_functional_error(m: &Matrix, f_n: &Matrix, f_k: &Matrix) -> Result<f64> {
    let resid = f_n.matmul(m)?.sub(f_k)?;
    let denom = f_k.frobenius_norm();
    if denom == 0.0 {
        return Err(NumericsError::ZeroNorm.into());
    }
    Ok(resid.frobenius_norm() / denom)
}

/// `‖F_N·M − F_K‖_F / ‖F_K‖_F` for the learned map and the oracle.
pub fn transfer_error(m: &Matrix, m_star: &Matrix, eval_f_n: &Matrix, eval_f_k: &Matrix) -> Result<TransferError> {
    if m.shape() != m_star.shape() {
        return Err(NumericsError::DimensionMismatch {
            op: "transfer_error",
            left: m.shape(),
            right: m_star.shape(),
        }
        .into());
    }
    Ok(TransferError {
        model: relative_functional_error(m, eval_f_n, eval_f_k)?,
        oracle: relative_functional_error(m_star, eval_f_n, eval_f_k)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fsc_mean: f64,
    pub fsc: Fsc,
    pub tq: Vec<f64>,
    pub tq_blocks: Vec<BlockSummary>,
    pub retrieval_top1_image: f64,
    pub retrieval_top1_brain: f64,
    pub retrieval_candidates: usize,
    pub retrieval_repeats: usize,
    pub transfer_relative_error: f64,
    /// Same error for the ground-truth map, when known.
    pub oracle_relative_error: Option<f64>,
    /// History CSV of the run, relative to its checkpoint directory.
    pub loss_curve: Option<String>,
}

/// Writes `voxel_index,tq`, one row per source voxel in index order.
pub fn write_tq_csv(path: &Path, tq: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["voxel_index", "tq"]).map_err(|e| csv_err(path, e))?;
    for (i, v) in tq.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:e}")])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::malformed(path, format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn fsc_identity_and_negation() {
        let t = m(&[&[1.0, -2.0], &[-1.0, 0.5], &[0.0, 1.5]]);
        let r = fsc(&t, &t).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-15);
        let r = fsc(&t.scale(-1.0), &t).unwrap();
        assert!((r.mean + 1.0).abs() < 1e-15);
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn fsc_excludes_constant_voxels() {
        let t = m(&[&[1.0, 3.0], &[2.0, 3.0], &[4.0, 3.0]]);
        let r = fsc(&t, &t).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.per_voxel[1], None);
        assert!((r.mean - 1.0).abs() < 1e-15);
        assert!(fsc(&m(&[&[1.0]]), &m(&[&[1.0]])).is_err());
        assert!(fsc(&t, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn fsc_null_is_near_zero() {
        let mut rng = RngState::new(9, 0);
        let a = rng.gaussian(1000, 50, 0.0, 1.0);
        let b = rng.gaussian(1000, 50, 0.0, 1.0);
        assert!(fsc(&a, &b).unwrap().mean.abs() < 0.05);
    }

    #[test]
    fn tq_closed_forms() {
        assert_eq!(tq(&Matrix::identity(3)), vec![1.0; 3]);
        assert_eq!(tq(&m(&[&[1.0, -2.0], &[0.0, 3.0]])), vec![3.0, 3.0]);
        assert_eq!(tq(&Matrix::zeros(2, 4)), vec![0.0; 2]);
    }

    #[test]
    fn block_summary() {
        let s = summarize_block("x", &[1.0, 2.0, 9.0, 4.0], 1, 4).unwrap();
        assert_eq!((s.mean, s.median), (5.0, 4.0));
        assert!(summarize_block("x", &[1.0], 1, 1).is_err());
    }

    #[test]
    fn retrieval_perfect_and_degenerate() {
        let mut rng = RngState::new(0, 0);
        let g = rng.gaussian(40, 8, 0.0, 1.0);
        assert_eq!(retrieval_top1(&g, &g, 40, 3, &mut rng).unwrap(), 1.0);
        let q = rng.gaussian(40, 8, 0.0, 1.0);
        assert_eq!(retrieval_top1(&q, &g, 1, 2, &mut rng).unwrap(), 1.0);
        assert!(retrieval_top1(&q, &g, 41, 1, &mut rng).is_err());
        assert!(retrieval_top1(&q, &g, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn retrieval_ties_count_as_failures() {
        let g = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let mut rng = RngState::new(0, 0);
        assert_eq!(retrieval_top1(&g, &g, 2, 1, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn retrieval_chance_level() {
        let mut rng = RngState::new(4, 0);
        let q = rng.gaussian(2000, 16, 0.0, 1.0);
        let g = rng.gaussian(2000, 16, 0.0, 1.0);
        let p: f64 = 1.0 / 300.0;
        let got = retrieval_top1(&q, &g, 300, 1, &mut rng).unwrap();
        let se = (p * (1.0 - p) / 2000.0).sqrt();
        assert!((got - p).abs() < 3.0 * se, "{got}");
    }

    #[test]
    fn retrieval_deterministic() {
        let mut rng = RngState::new(4, 0);
        let q = rng.gaussian(50, 4, 0.0, 1.0);
        let g = q.add(&rng.gaussian(50, 4, 0.0, 0.8)).unwrap();
        let a = retrieval_top1(&q, &g, 20, 5, &mut RngState::new(1, 1)).unwrap();
        let b = retrieval_top1(&q, &g, 20, 5, &mut RngState::new(1, 1)).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn transfer_error_cases() {
        let mut rng = RngState::new(2, 0);
        let f_n = rng.gaussian(30, 5, 0.0, 1.0);
        let m_star = rng.gaussian(5, 4, 0.0, 1.0);
        let f_k = f_n.matmul(&m_star).unwrap();
        let e = transfer_error(&m_star, &m_star, &f_n, &f_k).unwrap();
        assert_eq!(e.model, e.oracle);
        assert!(e.model < 1e-12);
        let z = transfer_error(&Matrix::zeros(5, 4), &m_star, &f_n, &f_k).unwrap();
        assert_eq!(z.model, 1.0);
        let perm: Vec<usize> = (0..30).rev().collect();
        let m = rng.gaussian(5, 4, 0.0, 1.0);
        let a = transfer_error(&m, &m_star, &f_n, &f_k).unwrap();
        let b = transfer_error(&m, &m_star, &f_n.select_rows(&perm), &f_k.select_rows(&perm)).unwrap();
        assert!((a.model - b.model).abs() < 1e-12);
        assert!(transfer_error(&m, &Matrix::zeros(4, 4), &f_n, &f_k).is_err());
    }

    #[test]
    fn tq_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tq.csv");
        write_tq_csv(&p, &[3.0, 0.5]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "voxel_index,tq");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
        let back: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(back, 0.5);
    }
}
