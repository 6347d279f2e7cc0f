//! Constrained and regularized nuclear-norm completion.
//!
//! The constrained problem `min ||U||_* s.t. U = X on Omega` is solved by
//! Douglas-Rachford splitting between the singular-value shrinkage and the
//! projection that resets observed entries, so every iterate is exactly
//! feasible. The regularized problem
//! `(1/|Omega|) sum_Omega (U - X)^2 + lambda ||U||_*` is solved by proximal
//! gradient with step `0.45 |Omega|`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{svd, svt, NucNormError};
use crate::data::MaskedInstance;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Constrained,
    Regularized { lambda: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NucNormProblem {
    /// Values at observed entries; other entries are ignored.
    pub values: DMatrix<f64>,
    /// `true` where the entry is observed.
    pub observed: DMatrix<bool>,
    pub mode: Mode,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NucNormSolution {
    pub u: DMatrix<f64>,
    pub iterations: usize,
    pub objective: f64,
    /// Constrained: last fixed-point residual. Regularized: last relative
    /// objective change.
    pub residual: f64,
    /// Largest deviation from an observed entry.
    pub feasibility: f64,
    pub nuclear_norm: f64,
    pub converged: bool,
    /// Objective after each iteration.
    pub history: Vec<f64>,
}

impl NucNormProblem {
    pub const DEFAULT_TOL: f64 = 1e-8;
    pub const DEFAULT_MAX_ITER: usize = 50_000;

    pub fn new(values: DMatrix<f64>, observed: DMatrix<bool>, mode: Mode) -> Self {
        Self {
            values,
            observed,
            mode,
            tol: Self::DEFAULT_TOL,
            max_iter: Self::DEFAULT_MAX_ITER,
        }
    }

    /// The rounded matrix and mask of a sampled instance.
    pub fn from_instance(inst: &MaskedInstance, mode: Mode) -> Self {
        let n = inst.n();
        Self::new(
            DMatrix::from_row_slice(n, n, &inst.matrix.values),
            DMatrix::from_row_slice(n, n, &inst.mask.observed),
            mode,
        )
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    fn validate(&self) -> Result<(), NucNormError> {
        let bad = |m: String| Err(NucNormError::InvalidProblem(m));
        if self.values.shape() != self.observed.shape() {
            return bad(format!("values {:?} vs mask {:?}", self.values.shape(), self.observed.shape()));
        }
        if self
            .values
            .iter()
            .zip(self.observed.iter())
            .any(|(v, &o)| o && !v.is_finite())
        {
            return Err(NucNormError::NonFinite);
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return bad("tolerance and iteration cap must be positive".into());
        }
        if let Mode::Regularized { lambda } = self.mode {
            if !(lambda > 0.0) {
                return bad(format!("lambda must be positive, got {lambda}"));
            }
            if self.observed_count() == 0 {
                return bad("regularized mode needs at least one observed entry".into());
            }
        }
        Ok(())
    }

    /// Replaces observed entries of `u` with the data.
    fn project(&self, u: &mut DMatrix<f64>) {
        for ((x, &o), &v) in u.iter_mut().zip(self.observed.iter()).zip(self.values.iter()) {
            if o {
                *x = v;
            }
        }
    }

    /// Observed entries of the data, zero elsewhere.
    fn observed_part(&self) -> DMatrix<f64> {
        let mut u = DMatrix::zeros(self.values.nrows(), self.values.ncols());
        self.project(&mut u);
        u
    }

    fn feasibility(&self, u: &DMatrix<f64>) -> f64 {
        u.iter()
            .zip(self.observed.iter())
            .zip(self.values.iter())
            .filter(|((_, &o), _)| o)
            .map(|((x, _), v)| (x - v).abs())
            .fold(0.0, f64::max)
    }

    fn data_term(&self, u: &DMatrix<f64>) -> f64 {
        let count = self.observed_count();
        let sq: f64 = u
            .iter()
            .zip(self.observed.iter())
            .zip(self.values.iter())
            .filter(|((_, &o), _)| o)
            .map(|((x, _), v)| (x - v).powi(2))
            .sum();
        sq / count.max(1) as f64
    }

    /// Value of the problem's objective at `u`.
    pub fn objective(&self, u: &DMatrix<f64>) -> Result<f64, NucNormError> {
        let nn = nuclear_norm(u)?;
        Ok(match self.mode {
            Mode::Constrained => nn,
            Mode::Regularized { lambda } => self.data_term(u) + lambda * nn,
        })
    }
}

/// Sum of singular values.
pub fn nuclear_norm(a: &DMatrix<f64>) -> Result<f64, NucNormError> {
    Ok(svd(a)?.sigma.sum())
}

pub fn solve(problem: &NucNormProblem) -> Result<NucNormSolution, NucNormError> {
    match problem.mode {
        Mode::Constrained => solve_constrained(problem),
        Mode::Regularized { .. } => solve_regularized(problem),
    }
}

pub fn solve_constrained(problem: &NucNormProblem) -> Result<NucNormSolution, NucNormError> {
    if problem.mode != Mode::Constrained {
        return Err(NucNormError::InvalidProblem("expected constrained mode".into()));
    }
    problem.validate()?;
    // Shrinkage step relative to the data scale.
    let scale = problem.values.iter().zip(problem.observed.iter()).filter(|(_, &o)| o).map(|(v, _)| v.abs()).fold(0.0, f64::max);
    let t = scale.max(1e-3) * 0.5;
    let mut z = problem.observed_part();
    let mut x = z.clone();
    let mut prev_obj = f64::INFINITY;
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < problem.max_iter {
        iterations += 1;
        x = z.clone();
        problem.project(&mut x);
        let reflected = &x * 2.0 - &z;
        let y = svt(&reflected, t)?;
        let step = &y - &x;
        z += &step;
        residual = step.norm() / x.norm().max(1.0);
        let obj = nuclear_norm(&x)?;
        history.push(obj);
        let stable = (prev_obj - obj).abs() <= problem.tol * obj.max(1.0);
        prev_obj = obj;
        if residual <= problem.tol && stable {
            converged = true;
            break;
        }
    }
    problem.project(&mut x);
    let nn = nuclear_norm(&x)?;
    Ok(NucNormSolution {
        feasibility: problem.feasibility(&x),
        u: x,
        iterations,
        objective: nn,
        residual,
        nuclear_norm: nn,
        converged,
        history,
    })
}

pub fn solve_regularized(problem: &NucNormProblem) -> Result<NucNormSolution, NucNormError> {
    let Mode::Regularized { lambda } = problem.mode else {
        return Err(NucNormError::InvalidProblem("expected regularized mode".into()));
    };
    problem.validate()?;
    let eta = 0.45 * problem.observed_count() as f64;
    let data = problem.observed_part();
    let mut u = data.clone();
    let mut obj = problem.objective(&u)?;
    let mut history = Vec::new();
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < problem.max_iter {
        iterations += 1;
        // u - eta * (2/|Omega|) P_Omega(u - x)
        let mut grad_step = u.clone();
        for ((g, &o), &x) in grad_step.iter_mut().zip(problem.observed.iter()).zip(data.iter()) {
            if o {
                *g -= 0.9 * (*g - x);
            }
        }
        let next = svt(&grad_step, eta * lambda)?;
        let next_obj = problem.objective(&next)?;
        change = (obj - next_obj).abs() / next_obj.abs().max(f64::MIN_POSITIVE);
        u = next;
        obj = next_obj;
        history.push(obj);
        if change <= problem.tol {
            converged = true;
            break;
        }
    }
    Ok(NucNormSolution {
        feasibility: problem.feasibility(&u),
        nuclear_norm: nuclear_norm(&u)?,
        u,
        iterations,
        objective: obj,
        residual: change,
        converged,
        history,
    })
}
