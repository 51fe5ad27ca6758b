//! BFGS minimization with a strong-Wolfe line search.

/// Stopping and line-search constants.
#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    /// Converged once the gradient sup-norm is at or below this.
    pub gtol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_evals: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { gtol: 1e-8, max_iter: 500, c1: 1e-4, c2: 0.9, max_line_evals: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfgsStatus {
    Converged,
    MaxIterations,
    /// No step along the search direction decreased the objective.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: BfgsStatus,
    /// Final inverse-Hessian approximation, row-major; reusable as a warm start.
    pub inverse_hessian: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Trial {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

struct LineSearch<'a, F> {
    fun: &'a mut F,
    x0: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    slope0: f64,
    opts: BfgsOptions,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Trial {
        self.evals += 1;
        let x: Vec<f64> = self.x0.iter().zip(self.dir).map(|(x, d)| x + alpha * d).collect();
        let (f, grad) = (self.fun)(&x);
        let f = if f.is_finite() && grad.iter().all(|g| g.is_finite()) { f } else { f64::INFINITY };
        let slope = if f.is_finite() { dot(&grad, self.dir) } else { f64::NAN };
        Trial { alpha, f, slope, x, grad }
    }

    fn armijo(&self, t: &Trial) -> bool {
        t.f <= self.f0 + self.opts.c1 * t.alpha * self.slope0
    }

    fn curvature(&self, t: &Trial) -> bool {
        t.slope.abs() <= -self.opts.c2 * self.slope0
    }

    /// Returns a strong-Wolfe point, or the best decreasing point found, or `None`.
    fn run(mut self, initial: f64) -> (Option<Trial>, usize) {
        let mut prev = Trial { alpha: 0.0, f: self.f0, slope: self.slope0, x: self.x0.to_vec(), grad: Vec::new() };
        let mut alpha = initial;
        let mut best: Option<Trial> = None;
        for i in 0..self.opts.max_line_evals {
            let t = self.eval(alpha);
            if !self.armijo(&t) || (i > 0 && t.f >= prev.f) {
                let out = self.zoom(prev, t, &mut best);
                return (out.or(best), self.evals);
            }
            if self.curvature(&t) {
                return (Some(t), self.evals);
            }
            if t.slope >= 0.0 {
                let out = self.zoom(t, prev, &mut best);
                return (out.or(best), self.evals);
            }
            alpha *= 2.0;
            if best.as_ref().is_none_or(|b| t.f < b.f) {
                best = Some(Trial { grad: t.grad.clone(), x: t.x.clone(), ..t });
            }
            prev = t;
        }
        (best, self.evals)
    }

    fn zoom(&mut self, mut lo: Trial, mut hi: Trial, best: &mut Option<Trial>) -> Option<Trial> {
        while self.evals < self.opts.max_line_evals {
            let alpha = interpolate(&lo, &hi);
            let t = self.eval(alpha);
            if !self.armijo(&t) || t.f >= lo.f {
                hi = t;
            } else {
                if self.curvature(&t) {
                    return Some(t);
                }
                if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
            if (hi.alpha - lo.alpha).abs() < 1e-14 * lo.alpha.abs().max(1e-8) {
                break;
            }
        }
        // sufficient decrease without curvature is still progress
        if lo.alpha > 0.0 && lo.f < self.f0 && best.as_ref().is_none_or(|b| lo.f < b.f) {
            *best = Some(lo);
        }
        best.take()
    }
}

/// Minimizer of the quadratic through `(lo.f, lo.slope)` and `hi.f`, kept inside the
/// middle 80% of the bracket; bisection when the fit is unusable.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let width = b - a;
    let mid = 0.5 * (a + b);
    if !hi.f.is_finite() || !lo.slope.is_finite() {
        return a + 0.25 * width;
    }
    let denom = 2.0 * (hi.f - lo.f - lo.slope * width);
    if denom.abs() < f64::MIN_POSITIVE {
        return mid;
    }
    let step = a - lo.slope * width * width / denom;
    let (left, right) = if a < b { (a + 0.1 * width, b - 0.1 * width) } else { (b - 0.1 * width, a + 0.1 * width) };
    if step.is_finite() {
        step.clamp(left.min(right), left.max(right))
    } else {
        mid
    }
}

/// Minimizes `fun`, which returns the value and gradient at a point. Non-finite values
/// are treated as `+inf` and rejected by the line search.
pub fn minimize<F>(fun: F, x0: &[f64], opts: BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    minimize_warm(fun, x0, None, opts)
}

/// [`minimize`] starting from a given inverse-Hessian approximation.
pub fn minimize_warm<F>(mut fun: F, x0: &[f64], inverse_hessian: Option<Vec<f64>>, opts: BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut grad) = fun(&x);
    let mut evaluations = 1;
    let warm = inverse_hessian.filter(|h| h.len() == n * n && h.iter().all(|v| v.is_finite()));
    let mut scaled = warm.is_some();
    // inverse Hessian, row-major
    let mut h = warm.unwrap_or_else(|| identity(n));
    if !(f.is_finite() && grad.iter().all(|g| g.is_finite())) {
        return BfgsResult {
            x,
            f,
            grad,
            iterations: 0,
            evaluations,
            status: BfgsStatus::LineSearchFailed,
            inverse_hessian: h,
        };
    }
    for iter in 0..opts.max_iter {
        if sup(&grad) <= opts.gtol {
            return BfgsResult {
                x,
                f,
                grad,
                iterations: iter,
                evaluations,
                status: BfgsStatus::Converged,
                inverse_hessian: h,
            };
        }
        let mut dir = mat_vec(&h, &grad, n);
        dir.iter_mut().for_each(|d| *d = -*d);
        let mut slope = dot(&dir, &grad);
        if !(slope < 0.0) {
            h = identity(n);
            scaled = false;
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
        }
        let initial = if scaled { 1.0 } else { (1.0 / sup(&grad)).min(1.0) };
        let search = LineSearch { fun: &mut fun, x0: &x, dir: &dir, f0: f, slope0: slope, opts, evals: 0 };
        let (trial, used) = search.run(initial);
        evaluations += used;
        let Some(t) = trial else {
            return BfgsResult {
                x,
                f,
                grad,
                iterations: iter,
                evaluations,
                status: BfgsStatus::LineSearchFailed,
                inverse_hessian: h,
            };
        };
        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                let gamma = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= gamma);
                scaled = true;
            }
            bfgs_update(&mut h, &s, &y, sy, n);
        }
        x = t.x;
        f = t.f;
        grad = t.grad;
    }
    let status = if sup(&grad) <= opts.gtol { BfgsStatus::Converged } else { BfgsStatus::MaxIterations };
    BfgsResult { x, f, grad, iterations: opts.max_iter, evaluations, status, inverse_hessian: h }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// `H <- (I - rho s y') H (I - rho y s') + rho s s'`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y, n);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
