//! Exact optimal transport between two equal-size uniform column sets.
//!
//! With uniform marginals over the same number of atoms the optimal plan is
//! a permutation, so the problem reduces to minimum-cost assignment, solved
//! here with the O(h³) shortest-augmenting-path Hungarian method.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Ground cost between matched columns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GroundCost {
    /// Euclidean distance; total is the mean matched distance (W1).
    #[default]
    Euclidean,
    /// Squared distance; total is the square root of the mean (W2).
    SquaredEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// `matching[i]` is the column of the second matrix paired with column `i`
    /// of the first.
    pub matching: Vec<usize>,
    /// Ground cost of each matched pair, indexed like `matching`.
    pub costs: Vec<f64>,
    pub total: f64,
}

/// Solves min Σ cost[i][π(i)] over permutations π of a square cost matrix
/// stored row-major. Returns π.
pub fn solve_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(invalid(format!(
            "cost matrix has {} entries, expected {}",
            cost.len(),
            n * n
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(invalid("cost matrix contains non-finite entries"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut matching = vec![0usize; n];
    for j in 1..=n {
        matching[owner[j] - 1] = j - 1;
    }
    Ok(matching)
}

/// Pairwise column cost matrix `cost[i][j] = ground(a[:, i], b[:, j])`.
pub fn column_cost_matrix(a: &Tensor, b: &Tensor, ground: GroundCost) -> Result<Vec<f64>> {
    check_shapes(a, b)?;
    let (d, h) = (a.shape()[0], a.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut cost = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            let sq: f64 = (0..d)
                .map(|k| {
                    let diff = ad[k * h + i] - bd[k * h + j];
                    diff * diff
                })
                .sum();
            cost[i * h + j] = match ground {
                GroundCost::Euclidean => sq.sqrt(),
                GroundCost::SquaredEuclidean => sq,
            };
        }
    }
    Ok(cost)
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(invalid(format!(
            "ot_distance needs two equal-shape matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Optimal transport between the column sets of two `d × h` matrices under
/// Euclidean ground cost.
pub fn ot_distance(a: &Tensor, b: &Tensor) -> Result<TransportPlan> {
    ot_distance_with(a, b, GroundCost::Euclidean)
}

pub fn ot_distance_with(a: &Tensor, b: &Tensor, ground: GroundCost) -> Result<TransportPlan> {
    let cost = column_cost_matrix(a, b, ground)?;
    let h = a.shape()[1];
    let matching = solve_assignment(&cost, h)?;
    let costs: Vec<f64> = matching.iter().enumerate().map(|(i, &j)| cost[i * h + j]).collect();
    let mean = if h == 0 {
        0.0
    } else {
        costs.iter().sum::<f64>() / h as f64
    };
    let total = match ground {
        GroundCost::Euclidean => mean,
        GroundCost::SquaredEuclidean => mean.sqrt(),
    };
    Ok(TransportPlan { matching, costs, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gaussian_init;

    fn permute_columns(a: &Tensor, perm: &[usize]) -> Tensor {
        let (d, h) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; d * h];
        for k in 0..d {
            for (j, &src) in perm.iter().enumerate() {
                out[k * h + j] = a.data()[k * h + src];
            }
        }
        Tensor::new(vec![d, h], out).unwrap()
    }

    #[test]
    fn identical_matrices() {
        let a = gaussian_init(&[8, 5], 0.0, 1.0, &mut Rng::new(1)).unwrap();
        let plan = ot_distance(&a, &a).unwrap();
        assert_eq!(plan.total, 0.0);
        assert_eq!(plan.matching, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn permuted_columns_cost_nothing() {
        let a = gaussian_init(&[8, 5], 0.0, 1.0, &mut Rng::new(2)).unwrap();
        let b = permute_columns(&a, &[3, 0, 4, 1, 2]);
        let plan = ot_distance(&a, &b).unwrap();
        assert_eq!(plan.total, 0.0);
        for (i, &j) in plan.matching.iter().enumerate() {
            assert_eq!([3, 0, 4, 1, 2][j], i);
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4, 3]);
        assert!(matches!(ot_distance(&a, &b), Err(crate::Error::InvalidArgument(_))));
        assert!(ot_distance(&Tensor::zeros(&[4]), &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn known_small_assignment() {
        // Greedy picks (0,0) then pays 100; optimum is the anti-diagonal.
        let cost = [1.0, 2.0, 2.0, 100.0];
        assert_eq!(solve_assignment(&cost, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn squared_ground_is_w2() {
        let a = Tensor::from_rows(&[&[0.0], &[0.0]]);
        let b = Tensor::from_rows(&[&[3.0], &[1.0]]);
        let w1 = ot_distance(&a, &b).unwrap();
        let w2 = ot_distance_with(&a, &b, GroundCost::SquaredEuclidean).unwrap();
        assert!((w1.total - 10f64.sqrt()).abs() < 1e-15);
        assert!((w2.total - 10f64.sqrt()).abs() < 1e-15);
    }
}
