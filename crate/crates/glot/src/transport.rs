//! Entropic optimal transport between feature maps.
//!
//! [`cost_matrix`] measures cosine dissimilarity between every source and
//! target feature column. [`sinkhorn`] solves the entropy-regularized
//! transport problem with alternating marginal-scaling updates, either with
//! hard marginals (balanced) or with softly penalized marginals that let
//! mass appear and vanish (unbalanced). [`warp_modulation`] then carries
//! per-position convolution parameters along the plan.
//!
//! The solver runs in f64 throughout. The balanced path uses plain scaling
//! updates for speed and absorbs the scaling vectors into log-domain
//! potentials whenever they threaten to overflow, falling back to a full
//! log-sum-exp update when the kernel underflows outright (tiny `eps_reg`).
//! The unbalanced path always updates in the log domain.

use crate::error::{Error, Result};
use crate::local::ModulationField;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Marginal handling for [`sinkhorn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtMode {
    /// Row and column sums must match the marginals; requires equal total mass.
    Balanced,
    /// Marginals are soft constraints with relaxation strength `tau`.
    Unbalanced,
}

impl std::fmt::Display for OtMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OtMode::Balanced => "balanced",
            OtMode::Unbalanced => "unbalanced",
        })
    }
}

/// Pairwise transport costs in `[0, 2]`; rows index source positions,
/// columns index target positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Tensor,
}

impl CostMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "CostMatrix",
                expected: vec![0, 0],
                got: values.shape().to_vec(),
            });
        }
        if let Some(&bad) = values.data().iter().find(|&&v| !(0.0..=2.0).contains(&v)) {
            return Err(Error::InvalidParameter {
                name: "cost",
                reason: format!("entry {bad} outside [0, 2]"),
            });
        }
        Ok(CostMatrix { values })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.values.at2(i, j)
    }
}

/// Cosine dissimilarity between the feature columns of `f_s` (source) and
/// `f_o` (target), both `[C, H, W]` with identical shapes:
///
/// ```text
/// C_ij = 1 - <s_i, o_j> / ((|s_i| + eps)(|o_j| + eps))
/// ```
///
/// over spatial positions flattened row-major. `epsilon_norm` must be
/// positive so zero columns stay well-defined (their cost is exactly 1).
pub fn cost_matrix(f_s: &Tensor, f_o: &Tensor, epsilon_norm: f32) -> Result<CostMatrix> {
    if f_s.rank() != 3 || f_s.shape() != f_o.shape() {
        return Err(Error::ShapeMismatch {
            context: "cost_matrix",
            expected: f_s.shape().to_vec(),
            got: f_o.shape().to_vec(),
        });
    }
    if !(epsilon_norm > 0.0 && epsilon_norm.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "epsilon_norm",
            reason: format!("must be positive and finite, got {epsilon_norm}"),
        });
    }
    let (c, h, w) = (f_s.shape()[0], f_s.shape()[1], f_s.shape()[2]);
    let n = h * w;
    let eps = epsilon_norm as f64;

    let column_norms = |f: &Tensor| -> Vec<f64> {
        (0..n)
            .map(|p| {
                let mut acc = 0.0f64;
                for ch in 0..c {
                    let v = f.data()[ch * n + p] as f64;
                    acc += v * v;
                }
                acc.sqrt()
            })
            .collect()
    };
    let ns = column_norms(f_s);
    let no = column_norms(f_o);

    let mut out = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0f64;
            for ch in 0..c {
                dot += f_s.data()[ch * n + i] as f64 * f_o.data()[ch * n + j] as f64;
            }
            let cost = 1.0 - dot / ((ns[i] + eps) * (no[j] + eps));
            out[i * n + j] = cost.clamp(0.0, 2.0) as f32;
        }
    }
    CostMatrix::new(Tensor::new(&[n, n], out)?)
}

/// Coupling between source positions (rows) and target positions (columns),
/// together with the marginals it was solved against and solver diagnostics.
///
/// `max_violation` is the largest absolute deviation of a row sum from
/// `alpha` or a column sum from `beta`. For balanced plans it doubles as the
/// convergence measure; unbalanced plans keep nonzero deviations by design
/// and set `converged` from the potential-update residual instead.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    matrix: Tensor,
    mode: OtMode,
    alpha: Vec<f32>,
    beta: Vec<f32>,
    iterations: usize,
    max_violation: f64,
    converged: bool,
}

impl TransportPlan {
    /// Wraps an existing nonnegative matrix as a plan. Diagnostics are
    /// filled in as if the plan were given: zero iterations, `converged`
    /// set, violation measured against the supplied marginals.
    pub fn from_matrix(
        matrix: Tensor,
        alpha: Vec<f32>,
        beta: Vec<f32>,
        mode: OtMode,
    ) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "TransportPlan",
                expected: vec![0, 0],
                got: matrix.shape().to_vec(),
            });
        }
        let (nr, nc) = (matrix.shape()[0], matrix.shape()[1]);
        if alpha.len() != nr {
            return Err(Error::LengthMismatch {
                shape: matrix.shape().to_vec(),
                expected: nr,
                got: alpha.len(),
            });
        }
        if beta.len() != nc {
            return Err(Error::LengthMismatch {
                shape: matrix.shape().to_vec(),
                expected: nc,
                got: beta.len(),
            });
        }
        if let Some(&bad) = matrix.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidParameter {
                name: "plan",
                reason: format!("negative entry {bad}"),
            });
        }
        let max_violation = dense_violation(matrix.data(), nr, nc, &alpha, &beta);
        Ok(TransportPlan {
            matrix,
            mode,
            alpha,
            beta,
            iterations: 0,
            max_violation,
            converged: true,
        })
    }

    pub fn n_source(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn n_target(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn mode(&self) -> OtMode {
        self.mode
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f32] {
        &self.beta
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn max_violation(&self) -> f64 {
        self.max_violation
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn total_mass(&self) -> f64 {
        self.matrix.data().iter().map(|&v| v as f64).sum()
    }

    /// Transport cost `<C, P>` of this plan under the given costs.
    pub fn transport_cost(&self, c: &CostMatrix) -> Result<f64> {
        if c.values().shape() != self.matrix.shape() {
            return Err(Error::ShapeMismatch {
                context: "transport_cost",
                expected: self.matrix.shape().to_vec(),
                got: c.values().shape().to_vec(),
            });
        }
        Ok(self
            .matrix
            .data()
            .iter()
            .zip(c.values().data())
            .map(|(&p, &cost)| p as f64 * cost as f64)
            .sum())
    }

    /// Plan with source and target roles swapped.
    pub fn transposed(&self) -> TransportPlan {
        let (nr, nc) = (self.n_source(), self.n_target());
        let mut data = vec![0.0f32; nr * nc];
        for i in 0..nr {
            for j in 0..nc {
                data[j * nr + i] = self.matrix.data()[i * nc + j];
            }
        }
        TransportPlan {
            matrix: Tensor::new(&[nc, nr], data).expect("transpose preserves validity"),
            mode: self.mode,
            alpha: self.beta.clone(),
            beta: self.alpha.clone(),
            iterations: self.iterations,
            max_violation: self.max_violation,
            converged: self.converged,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        self.matrix.clone()
    }
}

fn dense_violation(p: &[f32], nr: usize, nc: usize, alpha: &[f32], beta: &[f32]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..nr {
        let row: f64 = p[i * nc..(i + 1) * nc].iter().map(|&v| v as f64).sum();
        worst = worst.max((row - alpha[i] as f64).abs());
    }
    for j in 0..nc {
        let col: f64 = (0..nr).map(|i| p[i * nc + j] as f64).sum();
        worst = worst.max((col - beta[j] as f64).abs());
    }
    worst
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

struct Problem {
    nr: usize,
    nc: usize,
    cost: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    eps: f64,
}

impl Problem {
    fn kernel(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let mut k = vec![0.0f64; self.nr * self.nc];
        for i in 0..self.nr {
            for j in 0..self.nc {
                k[i * self.nc + j] = ((f[i] + g[j] - self.cost[i * self.nc + j]) / self.eps).exp();
            }
        }
        k
    }

    /// Max marginal deviation of the plan `diag(u) K diag(v)`.
    fn violation(&self, k: &[f64], u: &[f64], v: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.nr {
            let mut row = 0.0f64;
            for j in 0..self.nc {
                row += k[i * self.nc + j] * v[j];
            }
            worst = worst.max((u[i] * row - self.a[i]).abs());
        }
        for j in 0..self.nc {
            let mut col = 0.0f64;
            for i in 0..self.nr {
                col += k[i * self.nc + j] * u[i];
            }
            worst = worst.max((v[j] * col - self.b[j]).abs());
        }
        worst
    }

    /// One full log-domain update pass with relaxation exponent `lambda`
    /// (1 for hard marginals). Rows and columns with zero marginal mass get
    /// a potential of negative infinity, which empties them in the kernel.
    fn log_domain_pass(&self, f: &mut [f64], g: &mut [f64], lambda: f64) -> f64 {
        let mut scratch = vec![0.0f64; self.nr.max(self.nc)];
        let mut residual = 0.0f64;
        for i in 0..self.nr {
            let new = if self.a[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                for j in 0..self.nc {
                    scratch[j] = (g[j] - self.cost[i * self.nc + j]) / self.eps;
                }
                lambda * (self.eps * self.a[i].ln() - self.eps * logsumexp(&scratch[..self.nc]))
            };
            residual = residual.max(potential_delta(f[i], new));
            f[i] = new;
        }
        for j in 0..self.nc {
            let new = if self.b[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                for i in 0..self.nr {
                    scratch[i] = (f[i] - self.cost[i * self.nc + j]) / self.eps;
                }
                lambda * (self.eps * self.b[j].ln() - self.eps * logsumexp(&scratch[..self.nr]))
            };
            residual = residual.max(potential_delta(g[j], new));
            g[j] = new;
        }
        residual
    }
}

fn potential_delta(old: f64, new: f64) -> f64 {
    if old == f64::NEG_INFINITY && new == f64::NEG_INFINITY {
        0.0
    } else {
        (old - new).abs()
    }
}

/// Solves entropic optimal transport for the given costs and marginals.
///
/// `alpha` weights source positions (rows), `beta` target positions
/// (columns); both must be nonnegative with positive total mass. Balanced
/// mode additionally requires the totals to agree to one part in 10^6 and
/// iterates until the worst marginal deviation drops below `tol` (the loop
/// targets `tol / 2` so the f32 plan stays inside `tol`) or `max_iters`
/// passes elapse. Unbalanced mode relaxes the marginals with strength `tau`
/// (larger pulls harder; the limit recovers balanced behavior) and stops
/// when the potentials move less than `tol` in one pass.
///
/// Hitting `max_iters` is not an error: the plan is returned with
/// `converged` unset so callers can decide how loud to be about it.
#[allow(clippy::too_many_arguments)]
pub fn sinkhorn(
    c: &CostMatrix,
    alpha: &[f32],
    beta: &[f32],
    eps_reg: f64,
    tau: f64,
    mode: OtMode,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (nr, nc) = (c.rows(), c.cols());
    if alpha.len() != nr {
        return Err(Error::LengthMismatch {
            shape: vec![nr, nc],
            expected: nr,
            got: alpha.len(),
        });
    }
    if beta.len() != nc {
        return Err(Error::LengthMismatch {
            shape: vec![nr, nc],
            expected: nc,
            got: beta.len(),
        });
    }
    for (name, m) in [("alpha", alpha), ("beta", beta)] {
        if let Some(&bad) = m.iter().find(|&&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidParameter {
                name,
                reason: format!("marginals must be finite and nonnegative, got {bad}"),
            });
        }
    }
    if !(eps_reg > 0.0 && eps_reg.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "eps_reg",
            reason: format!("must be positive and finite, got {eps_reg}"),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "tau",
            reason: format!("must be positive and finite, got {tau}"),
        });
    }
    if max_iters == 0 {
        return Err(Error::InvalidParameter {
            name: "max_iters",
            reason: "must be at least 1".into(),
        });
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "tol",
            reason: format!("must be positive and finite, got {tol}"),
        });
    }
    let a: Vec<f64> = alpha.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = beta.iter().map(|&v| v as f64).collect();
    let mass_a: f64 = a.iter().sum();
    let mass_b: f64 = b.iter().sum();
    if mass_a <= 0.0 || mass_b <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "marginals",
            reason: "total mass must be positive on both sides".into(),
        });
    }
    if mode == OtMode::Balanced && (mass_a - mass_b).abs() > 1e-6 * mass_a.max(mass_b) {
        return Err(Error::InvalidParameter {
            name: "marginals",
            reason: format!("balanced mode requires equal total mass, got {mass_a} vs {mass_b}"),
        });
    }

    let problem = Problem {
        nr,
        nc,
        cost: c.values().data().iter().map(|&v| v as f64).collect(),
        a,
        b,
        eps: eps_reg,
    };
    match mode {
        OtMode::Balanced => solve_balanced(&problem, max_iters, tol, alpha, beta),
        OtMode::Unbalanced => solve_unbalanced(&problem, tau, max_iters, tol, alpha, beta),
    }
}

const ABSORB_THRESHOLD: f64 = 1e30;

fn solve_balanced(
    p: &Problem,
    max_iters: usize,
    tol: f64,
    alpha: &[f32],
    beta: &[f32],
) -> Result<TransportPlan> {
    let (nr, nc) = (p.nr, p.nc);
    let mut f = vec![0.0f64; nr];
    let mut g = vec![0.0f64; nc];
    let mut u = vec![1.0f64; nr];
    let mut v = vec![1.0f64; nc];
    let mut kernel = p.kernel(&f, &g);
    let mut iterations = 0usize;
    let mut viol = f64::INFINITY;

    while iterations < max_iters {
        let mut trouble = false;
        for i in 0..nr {
            if p.a[i] == 0.0 {
                u[i] = 0.0;
                continue;
            }
            let mut kv = 0.0f64;
            for j in 0..nc {
                kv += kernel[i * nc + j] * v[j];
            }
            let candidate = p.a[i] / kv;
            if kv <= 0.0 || !candidate.is_finite() {
                trouble = true;
                break;
            }
            u[i] = candidate;
        }
        if !trouble {
            for j in 0..nc {
                if p.b[j] == 0.0 {
                    v[j] = 0.0;
                    continue;
                }
                let mut ku = 0.0f64;
                for i in 0..nr {
                    ku += kernel[i * nc + j] * u[i];
                }
                let candidate = p.b[j] / ku;
                if ku <= 0.0 || !candidate.is_finite() {
                    trouble = true;
                    break;
                }
                v[j] = candidate;
            }
        }
        if trouble {
            // fold current scalings into the potentials and run one pass in
            // the log domain, where tiny eps_reg cannot underflow
            for (fi, ui) in f.iter_mut().zip(&u) {
                *fi += p.eps * ui.ln();
            }
            for (gj, vj) in g.iter_mut().zip(&v) {
                *gj += p.eps * vj.ln();
            }
            p.log_domain_pass(&mut f, &mut g, 1.0);
            u.fill(1.0);
            v.fill(1.0);
            kernel = p.kernel(&f, &g);
        }
        iterations += 1;
        viol = p.violation(&kernel, &u, &v);
        if viol < 0.5 * tol {
            break;
        }
        let spread = u
            .iter()
            .chain(v.iter())
            .fold(0.0f64, |acc, &x| acc.max(x.abs()));
        if spread > ABSORB_THRESHOLD {
            for (fi, ui) in f.iter_mut().zip(&u) {
                *fi += p.eps * ui.ln();
            }
            for (gj, vj) in g.iter_mut().zip(&v) {
                *gj += p.eps * vj.ln();
            }
            u.fill(1.0);
            v.fill(1.0);
            kernel = p.kernel(&f, &g);
        }
    }

    let mut data = vec![0.0f32; nr * nc];
    for i in 0..nr {
        for j in 0..nc {
            data[i * nc + j] = (u[i] * kernel[i * nc + j] * v[j]) as f32;
        }
    }
    let matrix = Tensor::new(&[nr, nc], data)?;
    let max_violation = dense_violation(matrix.data(), nr, nc, alpha, beta);
    Ok(TransportPlan {
        matrix,
        mode: OtMode::Balanced,
        alpha: alpha.to_vec(),
        beta: beta.to_vec(),
        iterations,
        max_violation,
        converged: viol < tol,
    })
}

fn solve_unbalanced(
    p: &Problem,
    tau: f64,
    max_iters: usize,
    tol: f64,
    alpha: &[f32],
    beta: &[f32],
) -> Result<TransportPlan> {
    let (nr, nc) = (p.nr, p.nc);
    let lambda = tau / (tau + p.eps);
    let mut f = vec![0.0f64; nr];
    let mut g = vec![0.0f64; nc];
    let mut iterations = 0usize;
    let mut converged = false;
    while iterations < max_iters {
        let residual = p.log_domain_pass(&mut f, &mut g, lambda);
        iterations += 1;
        if residual < tol {
            converged = true;
            break;
        }
    }
    let kernel = p.kernel(&f, &g);
    let mut data = vec![0.0f32; nr * nc];
    for (dst, &src) in data.iter_mut().zip(&kernel) {
        *dst = src as f32;
    }
    let matrix = Tensor::new(&[nr, nc], data)?;
    let max_violation = dense_violation(matrix.data(), nr, nc, alpha, beta);
    Ok(TransportPlan {
        matrix,
        mode: OtMode::Unbalanced,
        alpha: alpha.to_vec(),
        beta: beta.to_vec(),
        iterations,
        max_violation,
        converged,
    })
}

/// Warps per-position modulation parameters along a plan: position `i` of
/// the result is the plan-row-`i`-weighted combination of input positions,
/// with each row of the plan rescaled to sum to 1 (rows with no mass stay
/// zero). `warp_modulation_raw` skips the rescaling and applies the plan
/// entries as they are.
pub fn warp_modulation(tp: &TransportPlan, field: &ModulationField) -> Result<ModulationField> {
    warp_impl(tp, field, true)
}

/// Plan-weighted combination without row normalization; output magnitudes
/// scale with the plan's marginal masses.
pub fn warp_modulation_raw(tp: &TransportPlan, field: &ModulationField) -> Result<ModulationField> {
    warp_impl(tp, field, false)
}

fn warp_impl(
    tp: &TransportPlan,
    field: &ModulationField,
    normalize: bool,
) -> Result<ModulationField> {
    let n = field.height() * field.width();
    if tp.n_source() != n || tp.n_target() != n {
        return Err(Error::ShapeMismatch {
            context: "warp_modulation",
            expected: vec![n, n],
            got: vec![tp.n_source(), tp.n_target()],
        });
    }
    let plan = tp.matrix().data();
    let row_len_taps = field.channels() * field.kernel() * field.kernel();
    let row_len_bias = field.channels();
    let taps_in = field.taps().data();
    let bias_in = field.bias().data();
    let mut taps_out = vec![0.0f64; n * row_len_taps];
    let mut bias_out = vec![0.0f64; n * row_len_bias];

    for i in 0..n {
        let row = &plan[i * n..(i + 1) * n];
        let scale = if normalize {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if sum > 0.0 {
                1.0 / sum
            } else {
                continue;
            }
        } else {
            1.0
        };
        for (j, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let w = w as f64 * scale;
            let src_t = &taps_in[j * row_len_taps..(j + 1) * row_len_taps];
            let dst_t = &mut taps_out[i * row_len_taps..(i + 1) * row_len_taps];
            for (d, &s) in dst_t.iter_mut().zip(src_t) {
                *d += w * s as f64;
            }
            let src_b = &bias_in[j * row_len_bias..(j + 1) * row_len_bias];
            let dst_b = &mut bias_out[i * row_len_bias..(i + 1) * row_len_bias];
            for (d, &s) in dst_b.iter_mut().zip(src_b) {
                *d += w * s as f64;
            }
        }
    }

    ModulationField::new(
        field.kernel(),
        Tensor::new(
            field.taps().shape(),
            taps_out.into_iter().map(|v| v as f32).collect(),
        )?,
        Tensor::new(
            field.bias().shape(),
            bias_out.into_iter().map(|v| v as f32).collect(),
        )?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize) -> Vec<f32> {
        vec![1.0 / n as f32; n]
    }

    fn cost_2x2(entries: [[f32; 2]; 2]) -> CostMatrix {
        CostMatrix::new(
            Tensor::new(
                &[2, 2],
                vec![entries[0][0], entries[0][1], entries[1][0], entries[1][1]],
            )
            .unwrap(),
        )
        .unwrap()
    }

    /// Exact 2x2 solver: feasible plans form a segment parameterized by the
    /// top-left entry, the cost is linear in it, so an optimum sits at an
    /// endpoint of the segment.
    fn lp_2x2(c: [[f64; 2]; 2], a: [f64; 2], b: [f64; 2]) -> ([[f64; 2]; 2], f64) {
        let lo = (a[0] - b[1]).max(0.0);
        let hi = a[0].min(b[0]);
        assert!(lo <= hi + 1e-12, "infeasible marginals");
        let plan_at = |t: f64| [[t, a[0] - t], [b[0] - t, a[1] - (b[0] - t)]];
        let cost_at = |t: f64| {
            let p = plan_at(t);
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    acc += c[i][j] * p[i][j];
                }
            }
            acc
        };
        if cost_at(lo) <= cost_at(hi) {
            (plan_at(lo), cost_at(lo))
        } else {
            (plan_at(hi), cost_at(hi))
        }
    }

    #[test]
    fn cost_matrix_identical_columns_near_zero_diagonal() {
        let f = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let c = cost_matrix(&f, &f, 1e-6).unwrap();
        assert!(c.at(0, 0) < 1e-5);
        assert!(c.at(1, 1) < 1e-5);
        // orthogonal pairs have exactly zero dot product, so cost exactly 1
        assert_eq!(c.at(0, 1), 1.0);
        assert_eq!(c.at(1, 0), 1.0);
    }

    #[test]
    fn cost_matrix_antiparallel_near_two() {
        let s = Tensor::new(&[2, 1, 1], vec![1.0, 0.5]).unwrap();
        let o = Tensor::new(&[2, 1, 1], vec![-1.0, -0.5]).unwrap();
        let c = cost_matrix(&s, &o, 1e-6).unwrap();
        assert!((c.at(0, 0) - 2.0).abs() < 1e-5);
    }

    #[test]
    fn cost_matrix_zero_column_costs_one() {
        let s = Tensor::new(&[2, 1, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let o = Tensor::new(&[2, 1, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let c = cost_matrix(&s, &o, 1e-6).unwrap();
        assert_eq!(c.at(0, 0), 1.0);
        assert_eq!(c.at(0, 1), 1.0);
    }

    #[test]
    fn cost_matrix_hand_value() {
        // s_0 = (1, 0), o_1 = (1, 1): cosine = 1/sqrt(2) before the guard
        let s = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let o = Tensor::new(&[2, 1, 1], vec![1.0, 1.0]).unwrap();
        let eps = 1e-6f64;
        let expect = 1.0 - 1.0 / ((1.0 + eps) * (2.0f64.sqrt() + eps));
        let c = cost_matrix(&s, &o, 1e-6).unwrap();
        assert!((c.at(0, 0) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn cost_matrix_rejects_shape_mismatch_and_bad_epsilon() {
        let s = Tensor::zeros(&[2, 2, 2]).unwrap();
        let o = Tensor::zeros(&[2, 2, 3]).unwrap();
        assert!(cost_matrix(&s, &o, 1e-6).is_err());
        assert!(cost_matrix(&s, &s, 0.0).is_err());
    }

    #[test]
    fn single_mass_plan_is_one() {
        let c = CostMatrix::new(Tensor::new(&[1, 1], vec![0.7]).unwrap()).unwrap();
        let plan = sinkhorn(&c, &[1.0], &[1.0], 0.05, 10.0, OtMode::Balanced, 100, 1e-6).unwrap();
        assert!(plan.converged());
        assert!((plan.matrix().data()[0] as f64 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_cost_gives_product_coupling() {
        let c = cost_2x2([[0.4, 0.4], [0.4, 0.4]]);
        let plan = sinkhorn(
            &c,
            &uniform(2),
            &uniform(2),
            0.05,
            10.0,
            OtMode::Balanced,
            1000,
            1e-6,
        )
        .unwrap();
        assert!(plan.converged());
        for &v in plan.matrix().data() {
            assert!((v as f64 - 0.25).abs() < 1e-7, "entry {v}");
        }
    }

    #[test]
    fn antidiagonal_cost_matches_lp_vertex() {
        let c = cost_2x2([[0.0, 1.0], [1.0, 0.0]]);
        let plan = sinkhorn(
            &c,
            &uniform(2),
            &uniform(2),
            0.01,
            10.0,
            OtMode::Balanced,
            5000,
            1e-6,
        )
        .unwrap();
        assert!(plan.converged());
        let (lp_plan, lp_cost) = lp_2x2([[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5], [0.5, 0.5]);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (plan.matrix().at2(i, j) as f64 - lp_plan[i][j]).abs() < 1e-3,
                    "entry ({i},{j})"
                );
            }
        }
        // entropic cost stays within 2% of the exact optimum (absolute
        // slack against the 0..2 cost scale when the optimum is 0)
        let got = plan.transport_cost(&c).unwrap();
        assert!((got - lp_cost).abs() <= 0.02 * lp_cost.max(1.0));
    }

    #[test]
    fn offset_diagonal_cost_within_two_percent_of_lp() {
        let entries = [[0.3f32, 1.0], [1.0, 0.3]];
        let c = cost_2x2(entries);
        let plan = sinkhorn(
            &c,
            &uniform(2),
            &uniform(2),
            0.01,
            10.0,
            OtMode::Balanced,
            5000,
            1e-6,
        )
        .unwrap();
        let (lp_plan, lp_cost) = lp_2x2([[0.3, 1.0], [1.0, 0.3]], [0.5, 0.5], [0.5, 0.5]);
        assert!((lp_cost - 0.3).abs() < 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                assert!((plan.matrix().at2(i, j) as f64 - lp_plan[i][j]).abs() < 1e-3);
            }
        }
        let got = plan.transport_cost(&c).unwrap();
        assert!((got - lp_cost).abs() <= 0.02 * lp_cost);
    }

    #[test]
    fn nonuniform_marginals_match_lp_endpoint() {
        let c = cost_2x2([[0.1, 0.9], [0.8, 0.2]]);
        let a = [0.7f32, 0.3];
        let b = [0.4f32, 0.6];
        let plan = sinkhorn(&c, &a, &b, 0.005, 10.0, OtMode::Balanced, 20000, 1e-7).unwrap();
        assert!(plan.converged());
        let (lp_plan, _) = lp_2x2(
            [[0.1, 0.9], [0.8, 0.2]],
            [a[0] as f64, a[1] as f64],
            [b[0] as f64, b[1] as f64],
        );
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (plan.matrix().at2(i, j) as f64 - lp_plan[i][j]).abs() < 1e-2,
                    "entry ({i},{j}): {} vs {}",
                    plan.matrix().at2(i, j),
                    lp_plan[i][j]
                );
            }
        }
    }

    #[test]
    fn tiny_epsilon_survives_kernel_underflow() {
        // every entry of row 0 underflows f64 at eps = 1e-3 (exp(-1800)),
        // so the first scaling update must detour through the log domain
        let c = cost_2x2([[1.8, 2.0], [1.9, 0.1]]);
        let plan = sinkhorn(
            &c,
            &uniform(2),
            &uniform(2),
            1e-3,
            10.0,
            OtMode::Balanced,
            5000,
            1e-6,
        )
        .unwrap();
        assert!(plan.converged(), "violation {}", plan.max_violation());
        let (lp_plan, lp_cost) = lp_2x2([[1.8, 2.0], [1.9, 0.1]], [0.5, 0.5], [0.5, 0.5]);
        assert!((lp_cost - 0.95).abs() < 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                assert!((plan.matrix().at2(i, j) as f64 - lp_plan[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn balanced_rejects_unequal_mass() {
        let c = cost_2x2([[0.0, 1.0], [1.0, 0.0]]);
        let err = sinkhorn(
            &c,
            &[0.6, 0.6],
            &[0.5, 0.5],
            0.05,
            10.0,
            OtMode::Balanced,
            100,
            1e-6,
        );
        assert!(matches!(
            err,
            Err(Error::InvalidParameter {
                name: "marginals",
                ..
            })
        ));
    }

    #[test]
    fn non_convergence_returns_flagged_plan() {
        // asymmetric costs so a single scaling pass cannot satisfy the rows
        let c = cost_2x2([[0.0, 1.0], [0.3, 0.2]]);
        let plan = sinkhorn(
            &c,
            &uniform(2),
            &uniform(2),
            0.1,
            10.0,
            OtMode::Balanced,
            1,
            1e-12,
        )
        .unwrap();
        assert!(!plan.converged());
        assert_eq!(plan.iterations(), 1);
        assert!(plan.matrix().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_marginal_row_stays_empty() {
        let c = cost_2x2([[0.2, 0.8], [0.8, 0.2]]);
        let plan = sinkhorn(
            &c,
            &[1.0, 0.0],
            &[0.5, 0.5],
            0.05,
            10.0,
            OtMode::Balanced,
            2000,
            1e-6,
        )
        .unwrap();
        assert!(plan.converged());
        assert_eq!(plan.matrix().at2(1, 0), 0.0);
        assert_eq!(plan.matrix().at2(1, 1), 0.0);
        let row0: f64 = (0..2).map(|j| plan.matrix().at2(0, j) as f64).sum();
        assert!((row0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unbalanced_large_tau_approaches_balanced() {
        let c = cost_2x2([[0.0, 1.0], [1.0, 0.0]]);
        let balanced = sinkhorn(
            &c,
            &uniform(2),
            &uniform(2),
            0.05,
            10.0,
            OtMode::Balanced,
            5000,
            1e-8,
        )
        .unwrap();
        let relaxed = sinkhorn(
            &c,
            &uniform(2),
            &uniform(2),
            0.05,
            20.0,
            OtMode::Unbalanced,
            5000,
            1e-7,
        )
        .unwrap();
        assert!(relaxed.converged());
        assert!(balanced.matrix().max_abs_diff(relaxed.matrix()).unwrap() < 1e-3);
    }

    #[test]
    fn unbalanced_allows_unequal_mass() {
        let c = cost_2x2([[0.1, 0.9], [0.9, 0.1]]);
        let plan = sinkhorn(
            &c,
            &[0.8, 0.8],
            &[0.3, 0.3],
            0.05,
            1.0,
            OtMode::Unbalanced,
            5000,
            1e-9,
        )
        .unwrap();
        assert!(plan.converged());
        assert!(plan
            .matrix()
            .data()
            .iter()
            .all(|&v| v >= 0.0 && v.is_finite()));
        // soft marginals: mass lands strictly between the two requested totals
        let mass = plan.total_mass();
        assert!(mass > 0.6 && mass < 1.6, "mass {mass}");
        assert!(plan.max_violation() > 1e-3);
    }

    #[test]
    fn plan_transpose_swaps_marginals() {
        let m = Tensor::new(&[1, 2], vec![0.25, 0.75]).unwrap();
        let plan =
            TransportPlan::from_matrix(m, vec![1.0], vec![0.25, 0.75], OtMode::Balanced).unwrap();
        let t = plan.transposed();
        assert_eq!(t.n_source(), 2);
        assert_eq!(t.alpha(), &[0.25, 0.75]);
        assert_eq!(t.beta(), &[1.0]);
        assert_eq!(t.matrix().at2(1, 0), 0.75);
    }

    #[test]
    fn from_matrix_rejects_negative_entries() {
        let m = Tensor::new(&[2, 2], vec![0.5, -0.1, 0.3, 0.3]).unwrap();
        assert!(TransportPlan::from_matrix(m, uniform(2), uniform(2), OtMode::Balanced).is_err());
    }

    fn identity_plan(n: usize) -> TransportPlan {
        let m = Tensor::from_fn2(n, n, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        TransportPlan::from_matrix(m, vec![1.0; n], vec![1.0; n], OtMode::Balanced).unwrap()
    }

    fn random_field(h: usize, w: usize, c: usize, k: usize, seed: u64) -> ModulationField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModulationField::new(
            k,
            Tensor::new(
                &[h, w, c, k * k],
                (0..h * w * c * k * k)
                    .map(|_| rng.gen_range(-1.0..=1.0))
                    .collect(),
            )
            .unwrap(),
            Tensor::new(
                &[h, w, c],
                (0..h * w * c).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn warp_identity_plan_keeps_field() {
        let field = random_field(2, 3, 2, 3, 5);
        let warped = warp_modulation(&identity_plan(6), &field).unwrap();
        assert!(warped.taps().bit_eq(field.taps()));
        assert!(warped.bias().bit_eq(field.bias()));
    }

    #[test]
    fn warp_permutation_plan_permutes_positions() {
        // 2x1 grid, swap the two positions
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let plan =
            TransportPlan::from_matrix(m, vec![1.0; 2], vec![1.0; 2], OtMode::Balanced).unwrap();
        let field = random_field(2, 1, 3, 1, 9);
        let warped = warp_modulation(&plan, &field).unwrap();
        for c in 0..3 {
            assert_eq!(warped.taps().at4(0, 0, c, 0), field.taps().at4(1, 0, c, 0));
            assert_eq!(warped.taps().at4(1, 0, c, 0), field.taps().at4(0, 0, c, 0));
            assert_eq!(warped.bias_at(0, 0, c), field.bias_at(1, 0, c));
        }
    }

    #[test]
    fn warp_matches_dense_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 6usize; // 2x3 grid
        let entries: Vec<f32> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m = Tensor::new(&[n, n], entries.clone()).unwrap();
        let plan =
            TransportPlan::from_matrix(m, vec![1.0; n], vec![1.0; n], OtMode::Balanced).unwrap();
        let field = random_field(2, 3, 2, 3, 8);
        for (normalize, warped) in [
            (true, warp_modulation(&plan, &field).unwrap()),
            (false, warp_modulation_raw(&plan, &field).unwrap()),
        ] {
            let rowlen = 2 * 9;
            for i in 0..n {
                let scale = if normalize {
                    let s: f64 = (0..n).map(|j| entries[i * n + j] as f64).sum();
                    1.0 / s
                } else {
                    1.0
                };
                for r in 0..rowlen {
                    let mut expect = 0.0f64;
                    for j in 0..n {
                        expect += entries[i * n + j] as f64
                            * scale
                            * field.taps().data()[j * rowlen + r] as f64;
                    }
                    let got = warped.taps().data()[i * rowlen + r] as f64;
                    assert!(
                        (got - expect).abs() < 1e-5,
                        "normalize {normalize} pos {i} col {r}"
                    );
                }
            }
        }
    }

    #[test]
    fn warp_zero_row_leaves_zero_parameters() {
        let m = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        let plan =
            TransportPlan::from_matrix(m, vec![0.0, 1.0], vec![0.5, 0.5], OtMode::Unbalanced)
                .unwrap();
        let field = random_field(2, 1, 1, 1, 4);
        let warped = warp_modulation(&plan, &field).unwrap();
        assert_eq!(warped.taps().at4(0, 0, 0, 0), 0.0);
        assert_eq!(warped.bias_at(0, 0, 0), 0.0);
        assert!(warped.taps().at4(1, 0, 0, 0) != 0.0);
    }

    #[test]
    fn warp_rejects_size_mismatch() {
        let field = random_field(2, 2, 1, 1, 4);
        assert!(warp_modulation(&identity_plan(3), &field).is_err());
    }

    proptest! {
        // Entrywise nonnegativity, marginal violation under tol, and total
        // mass agreeing with the marginals. Regularization of 0.1 keeps the
        // iteration well inside the budget on every draw.
        #[test]
        fn prop_balanced_plans_meet_marginals(seed in 0u64..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=6usize);
            let entries: Vec<f32> = (0..n * n).map(|_| rng.gen_range(0.0..=2.0)).collect();
            let c = CostMatrix::new(Tensor::new(&[n, n], entries).unwrap()).unwrap();
            let plan = sinkhorn(&c, &uniform(n), &uniform(n), 0.1, 10.0, OtMode::Balanced, 5000, 1e-6).unwrap();
            prop_assert!(plan.converged());
            prop_assert!(plan.matrix().data().iter().all(|&v| v >= 0.0));
            let viol = dense_violation(plan.matrix().data(), n, n, plan.alpha(), plan.beta());
            prop_assert!(viol < 1e-6, "violation {viol}");
            prop_assert!((plan.total_mass() - 1.0).abs() < 1e-6);
        }

        // Row-normalized warping maps a constant field to itself.
        #[test]
        fn prop_warp_preserves_constant_fields(seed in 0u64..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(97).wrapping_add(1));
            let n = 4usize; // 2x2 grid
            let entries: Vec<f32> = (0..n * n).map(|_| rng.gen_range(0.1..=1.0)).collect();
            let m = Tensor::new(&[n, n], entries).unwrap();
            let plan = TransportPlan::from_matrix(m, vec![1.0; n], vec![1.0; n], OtMode::Unbalanced).unwrap();
            let value = rng.gen_range(-2.0..=2.0f32);
            let field = ModulationField::new(
                3,
                Tensor::filled(&[2, 2, 2, 9], value).unwrap(),
                Tensor::filled(&[2, 2, 2], value).unwrap(),
            )
            .unwrap();
            let warped = warp_modulation(&plan, &field).unwrap();
            for &v in warped.taps().data() {
                prop_assert!((v as f64 - value as f64).abs() < 1e-6);
            }
            for &v in warped.bias().data() {
                prop_assert!((v as f64 - value as f64).abs() < 1e-6);
            }
        }
    }
}
