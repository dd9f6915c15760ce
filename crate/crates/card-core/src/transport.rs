//! 2-Wasserstein distances between equal-size empirical measures.
//!
//! The exact route solves the optimal assignment on the squared-Euclidean
//! cost with the shortest-augmenting-path method (O(n^3)); the entropic
//! route runs log-domain Sinkhorn iterations and reports the sharp
//! (unregularized) cost under the returned plan. A permutation brute force
//! over n <= 8 serves as the test oracle.

use crate::error::{Error, Result};

/// n points in R^d with uniform mass 1/n each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 || data.len() != n * d {
            return Err(Error::InvalidParameter(format!(
                "measure shape mismatch: n={n}, d={d}, len={}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("empirical measure".into()));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_points2(points: &[[f64; 2]]) -> Result<Self> {
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(points.len(), 2, data)
    }

    pub fn from_points1(points: &[f64]) -> Result<Self> {
        Self::new(points.len(), 1, points.to_vec())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn translated(&self, v: &[f64]) -> Self {
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(self.d) {
            for (x, dv) in chunk.iter_mut().zip(v) {
                *x += dv;
            }
        }
        Self { data, ..*self }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| c * x).collect(),
            ..*self
        }
    }
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cost_matrix(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<Vec<f64>> {
    if a.n != b.n {
        return Err(Error::SizeMismatch(a.n, b.n));
    }
    if a.d != b.d {
        return Err(Error::DimensionMismatch {
            expected: a.d,
            got: b.d,
            context: "measure dimensions",
        });
    }
    let n = a.n;
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = squared_dist(a.point(i), b.point(j));
        }
    }
    Ok(cost)
}

/// Either an optimal permutation or an entropic plan, with its squared-cost
/// objective value.
#[derive(Debug, Clone)]
pub enum Coupling {
    /// permutation[i] = index in B matched to point i of A.
    Permutation(Vec<usize>),
    /// Row-major n x n doubly stochastic plan (marginals 1/n).
    Plan(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Transport {
    pub distance: f64,
    pub coupling: Coupling,
    /// Mean squared-distance objective value (distance^2).
    pub transport_cost: f64,
}

/// Dense shortest-augmenting-path assignment on an n x n cost matrix.
/// Returns the column assigned to each row.
fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    // Potentials u, v and matching p over 1-based columns; p[0] hosts the
    // row currently being augmented.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact W2: sqrt of the minimal mean squared transport cost over
/// permutations, found by the assignment solver.
pub fn w2_exact(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<Transport> {
    let n = a.n;
    let cost = cost_matrix(a, b)?;
    let perm = solve_assignment(&cost, n);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    let mean_cost = total / n as f64;
    Ok(Transport {
        distance: mean_cost.sqrt(),
        transport_cost: mean_cost,
        coupling: Coupling::Permutation(perm),
    })
}

/// Convenience wrapper returning only the distance.
pub fn w2_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    Ok(w2_exact(a, b)?.distance)
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub distance: f64,
    pub transport_cost: f64,
    pub plan: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Worst row/column marginal violation at exit.
    pub marginal_error: f64,
}

/// Entropic-regularized OT via log-domain Sinkhorn on the squared cost.
/// Convergence is declared when the worst marginal violation of the implied
/// plan drops below `tol`; the reported cost is the sharp (unregularized)
/// objective under the returned plan. Non-convergence is flagged, not fatal.
pub fn w2_sinkhorn(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    reg_eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    if reg_eps <= 0.0 {
        return Err(Error::InvalidParameter("reg_eps must be positive".into()));
    }
    let n = a.n;
    let cost = cost_matrix(a, b)?;
    let log_mass = -(n as f64).ln();

    // Potentials f, g with the convention
    // plan_ij = exp((f_i + g_j - C_ij) / eps) * (1/n^2 scaling via potentials).
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; n];
    let lse = |row: &mut dyn Iterator<Item = f64>| -> f64 {
        let vals: Vec<f64> = row.collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };

    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;
    while iterations < max_iters {
        // f update: row marginals exact after this half-step.
        for i in 0..n {
            let s = lse(&mut (0..n).map(|j| (g[j] - cost[i * n + j]) / reg_eps));
            f[i] = reg_eps * (log_mass - s);
        }
        // g update: column marginals exact after this half-step.
        for j in 0..n {
            let s = lse(&mut (0..n).map(|i| (f[i] - cost[i * n + j]) / reg_eps));
            g[j] = reg_eps * (log_mass - s);
        }
        iterations += 1;

        // Row marginals drifted by the g half-step; measure the relative
        // violation (each marginal should equal 1/n). Checking every sweep
        // is wasteful; every 8th is plenty for a geometric iteration.
        if iterations % 8 == 0 || iterations == max_iters {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let row_sum: f64 = (0..n)
                    .map(|j| ((f[i] + g[j] - cost[i * n + j]) / reg_eps).exp())
                    .sum();
                worst = worst.max((n as f64 * row_sum - 1.0).abs());
            }
            marginal_error = worst;
            if worst < tol {
                break;
            }
        }
    }

    let mut plan = vec![0.0f64; n * n];
    let mut sharp_cost = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = ((f[i] + g[j] - cost[i * n + j]) / reg_eps).exp();
            plan[i * n + j] = p;
            sharp_cost += p * cost[i * n + j];
        }
    }
    // Mean-cost normalization matches w2_exact (plan mass sums to ~1).
    Ok(SinkhornResult {
        distance: sharp_cost.max(0.0).sqrt(),
        transport_cost: sharp_cost,
        plan,
        iterations,
        converged: marginal_error < tol,
        marginal_error,
    })
}

/// Exhaustive minimum over all n! permutations; n <= 8 only.
pub fn brute_force_w2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    let n = a.n;
    if n > 8 {
        return Err(Error::InvalidParameter(format!(
            "brute force limited to n <= 8, got {n}"
        )));
    }
    let cost = cost_matrix(a, b)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm.
    fn permute(k: usize, perm: &mut Vec<usize>, cost: &[f64], n: usize, best: &mut f64) {
        if k == 1 {
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for i in 0..k {
            permute(k - 1, perm, cost, n, best);
            if k % 2 == 0 {
                perm.swap(i, k - 1);
            } else {
                perm.swap(0, k - 1);
            }
        }
    }
    permute(n, &mut perm, &cost, n, &mut best);
    Ok((best / n as f64).sqrt())
}

/// Exact 1-D W2 between equal-size samples: sort both and pair quantiles.
pub fn w2_sorted_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xb.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let mean_sq: f64 = xa
        .iter()
        .zip(&xb)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / a.len() as f64;
    Ok(mean_sq.sqrt())
}
