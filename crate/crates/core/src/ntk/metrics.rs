//! Kernel distance, effective rank, alignment and specialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::ntk::eigen::sym_eigvals;
use crate::ntk::ClassKernel;

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape(
            "kernel distance",
            format!("{}×{} vs {}×{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    Ok(())
}

/// `1 − Tr(K₁ᵀK₂) / (‖K₁‖_F ‖K₂‖_F)`.
pub fn kernel_distance(k1: &Matrix, k2: &Matrix) -> Result<f64> {
    same_shape(k1, k2)?;
    let (s1, s2) = (dot(&k1.data, &k1.data), dot(&k2.data, &k2.data));
    if s1 == 0.0 || s2 == 0.0 {
        return Err(Error::UndefinedDistance("a kernel has zero Frobenius norm"));
    }
    // Tr(AᵀB) is the elementwise inner product; one square root of the
    // product keeps KD(K, K) at exactly zero.
    Ok(1.0 - dot(&k1.data, &k2.data) / (s1 * s2).sqrt())
}

/// Singular values below this fraction of the largest are ignored.
pub const RANK_CUTOFF: f64 = 1e-12;

/// `exp(−Σ pᵢ log pᵢ)` with `pᵢ = σᵢ / Σσⱼ` over the singular values
/// (absolute eigenvalues of the symmetrized kernel).
pub fn effective_rank(k: &Matrix) -> Result<f64> {
    let spectrum = sym_eigvals(k)?;
    effective_rank_of(&spectrum.values)
}

/// Effective rank of a given list of eigenvalues.
pub fn effective_rank_of(eigenvalues: &[f64]) -> Result<f64> {
    let mut sigma: Vec<f64> = eigenvalues.iter().map(|v| v.abs()).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    let top = sigma.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(Error::UndefinedRank);
    }
    let kept: Vec<f64> = sigma.into_iter().filter(|&s| s >= RANK_CUTOFF * top).collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// `1 − KD(K, Y_j Y_jᵀ)` where `Y_j` indicates the samples labelled `class`.
pub fn alignment(k: &Matrix, labels: &[usize], class: usize) -> Result<f64> {
    if !k.is_square() || k.rows != labels.len() {
        return Err(Error::shape("alignment", format!("{}×{} kernel, {} labels", k.rows, k.cols, labels.len())));
    }
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
    if members.is_empty() {
        return Err(Error::EmptyClass { class });
    }
    let norm = k.frobenius();
    if norm == 0.0 {
        return Err(Error::UndefinedDistance("kernel has zero Frobenius norm"));
    }
    let mut inner = 0.0;
    for &a in &members {
        for &b in &members {
            inner += k.get(a, b);
        }
    }
    Ok(inner / (norm * members.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Ground-truth labels of the probe samples.
    Cl,
    /// Model predictions on the (adversarial) probe inputs.
    Al,
}

impl std::str::FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cl" => Ok(LabelSource::Cl),
            "al" => Ok(LabelSource::Al),
            other => Err(Error::InvalidArgument(format!("label source {other:?}; expected cl or al"))),
        }
    }
}

/// Specialization-strength matrix. Entry `(i, j)` is the alignment of class
/// block `i` with the label-`j` indicator, normalized by the mean over
/// blocks. Columns of classes absent under the chosen labels are dropped:
/// they hold NaN and are listed in `dropped`.
#[derive(Clone, Debug, PartialEq)]
pub struct KsMatrix {
    pub matrix: Matrix,
    pub label_source: LabelSource,
    pub dropped: Vec<usize>,
}

pub fn ks_matrix(k: &ClassKernel, source: LabelSource) -> Result<KsMatrix> {
    let labels: Vec<usize> = match source {
        LabelSource::Cl => k.cl.iter().map(|&l| l as usize).collect(),
        LabelSource::Al => k.al.as_ref().ok_or(Error::MissingLabels)?.iter().map(|&l| l as usize).collect(),
    };
    let n_out = k.n_out();
    let mut m = Matrix::zeros(n_out, n_out);
    let mut dropped = Vec::new();
    for j in 0..n_out {
        if !labels.contains(&j) {
            if source == LabelSource::Cl {
                return Err(Error::EmptyClass { class: j });
            }
            dropped.push(j);
            (0..n_out).for_each(|i| m.set(i, j, f64::NAN));
            continue;
        }
        let a: Vec<f64> = k.blocks.iter().map(|b| alignment(b, &labels, j)).collect::<Result<_>>()?;
        let mean = a.iter().sum::<f64>() / n_out as f64;
        if mean == 0.0 {
            return Err(Error::UndefinedDistance("every class block is orthogonal to a label indicator"));
        }
        for (i, v) in a.iter().enumerate() {
            m.set(i, j, v / mean);
        }
    }
    Ok(KsMatrix {
        matrix: m,
        label_source: source,
        dropped,
    })
}

/// `Tr(M) / n_out`; with dropped columns, the mean of the kept diagonal
/// entries.
pub fn kernel_specialization(m: &KsMatrix) -> f64 {
    let n = m.matrix.rows;
    let kept: Vec<f64> = (0..n).filter(|j| !m.dropped.contains(j)).map(|j| m.matrix.get(j, j)).collect();
    if kept.is_empty() {
        return f64::NAN;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indicator(labels: &[usize], j: usize) -> Matrix {
        let n = labels.len();
        let mut m = Matrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                if labels[a] == j && labels[b] == j {
                    m.set(a, b, 1.0);
                }
            }
        }
        m
    }

    fn class_kernel(blocks: Vec<Matrix>, cl: &[u16], al: Option<&[u16]>) -> ClassKernel {
        let n = cl.len();
        ClassKernel {
            blocks,
            probe_ids: (0..n as u32).collect(),
            cl: cl.to_vec(),
            al: al.map(|a| a.to_vec()),
        }
    }

    #[test]
    fn distance_identities() {
        let k = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 3.0]);
        assert_eq!(kernel_distance(&k, &k).unwrap(), 0.0);
        assert!(kernel_distance(&k, &k.scaled(7.5)).unwrap().abs() < 1e-15);
        assert_eq!(kernel_distance(&Matrix::diag(&[1.0, 0.0]), &Matrix::diag(&[0.0, 1.0])).unwrap(), 1.0);
        assert!(kernel_distance(&k, &Matrix::zeros(2, 2)).is_err());
        assert!(kernel_distance(&k, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn effective_rank_examples() {
        assert!((effective_rank(&Matrix::identity(7)).unwrap() - 7.0).abs() < 1e-10);
        let v = Matrix::from_vec(3, 1, vec![1.0, 2.0, -1.0]);
        assert!((effective_rank(&v.mul_transpose(&v)).unwrap() - 1.0).abs() < 1e-10);
        let r = effective_rank(&Matrix::diag(&[2.0, 1.0, 1.0])).unwrap();
        assert!((r - 2f64.powf(1.5)).abs() < 1e-10);
        assert!(matches!(effective_rank(&Matrix::zeros(3, 3)), Err(Error::UndefinedRank)));
    }

    #[test]
    fn alignment_examples() {
        let labels = [0, 1, 0, 2, 0];
        assert!((alignment(&indicator(&labels, 0), &labels, 0).unwrap() - 1.0).abs() < 1e-15);
        let mut orth = Matrix::identity(5);
        for &i in &[0, 2, 4] {
            orth.set(i, i, 0.0);
        }
        assert_eq!(alignment(&orth, &labels, 0).unwrap(), 0.0);
        let a = alignment(&Matrix::identity(5), &labels, 0).unwrap();
        assert!((a - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(alignment(&Matrix::identity(5), &labels, 3), Err(Error::EmptyClass { class: 3 })));
    }

    #[test]
    fn identical_blocks_give_unit_specialization() {
        let b = Matrix::from_vec(3, 3, vec![2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 1.5]);
        let k = class_kernel(vec![b.clone(), b.clone(), b], &[0, 1, 2], None);
        let m = ks_matrix(&k, LabelSource::Cl).unwrap();
        assert!(m.matrix.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!((kernel_specialization(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn label_aligned_blocks_specialize() {
        let labels = [0usize, 0, 1, 1, 2, 2];
        let cl: Vec<u16> = labels.iter().map(|&l| l as u16).collect();
        let blocks: Vec<Matrix> = (0..3).map(|j| indicator(&labels, j)).collect();
        let k = class_kernel(blocks.clone(), &cl, None);
        let m = ks_matrix(&k, LabelSource::Cl).unwrap();
        // A(Y_iY_iᵀ, Y_jY_jᵀ) = δ_ij, mean over blocks 1/3, so M = 3·I.
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 3.0 } else { 0.0 };
                assert!((m.matrix.get(i, j) - expect).abs() < 1e-12);
            }
            let col_mean: f64 = (0..3).map(|r| m.matrix.get(r, i)).sum::<f64>() / 3.0;
            assert!((col_mean - 1.0).abs() < 1e-12);
        }
        assert!((kernel_specialization(&m) - 3.0).abs() < 1e-12);

        // rescaling every block by the same factor leaves M unchanged
        let scaled: Vec<Matrix> = blocks.iter().map(|b| b.scaled(4.0)).collect();
        let m2 = ks_matrix(&class_kernel(scaled, &cl, None), LabelSource::Cl).unwrap();
        assert_eq!(m2.matrix, m.matrix);
    }

    #[test]
    fn block_scaling_does_not_move_alignment() {
        let labels = [0usize, 1, 0, 1];
        let b = Matrix::from_vec(4, 4, (0..16).map(|i| ((i * 7 % 5) as f64) + if i % 5 == 0 { 4.0 } else { 0.0 }).collect());
        for j in 0..2 {
            let a = alignment(&b, &labels, j).unwrap();
            let a3 = alignment(&b.scaled(3.0), &labels, j).unwrap();
            assert!((a - a3).abs() < 1e-14);
        }
    }

    #[test]
    fn missing_or_empty_adversarial_labels() {
        let b = Matrix::identity(3);
        let k = class_kernel(vec![b.clone(), b.clone(), b.clone()], &[0, 1, 2], None);
        assert!(matches!(ks_matrix(&k, LabelSource::Al), Err(Error::MissingLabels)));
        let k = class_kernel(vec![b.clone(), b.clone(), b], &[0, 1, 2], Some(&[0, 0, 2]));
        let m = ks_matrix(&k, LabelSource::Al).unwrap();
        assert_eq!(m.dropped, vec![1]);
        assert!(m.matrix.get(0, 1).is_nan());
        assert!((kernel_specialization(&m) - 1.0).abs() < 1e-12);
    }
}
