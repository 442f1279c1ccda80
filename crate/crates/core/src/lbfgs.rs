//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Deterministic: the same objective and starting point always produce the
//! same iterates.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub history: usize,
    pub max_iterations: usize,
    /// Stop once the largest absolute gradient entry is at most this.
    pub gradient_tolerance: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            history: 10,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub value: f64,
    pub gradient_norm: f64,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_BRACKET: usize = 25;
const MAX_ZOOM: usize = 40;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Clone)]
struct Point {
    step: f64,
    value: f64,
    grad: Vec<f64>,
    slope: f64,
}

struct Problem<'a, F> {
    f: &'a mut F,
    evaluations: usize,
}

impl<F> Problem<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluations += 1;
        let (v, g) = (self.f)(x)?;
        if g.len() != x.len() {
            return Err(Error::dim(format!("objective returned {} gradient entries for {} variables", g.len(), x.len())));
        }
        Ok((v, g))
    }

    fn at(&mut self, x: &[f64], d: &[f64], step: f64) -> Result<Point> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + step * di).collect();
        let (value, grad) = self.eval(&xt)?;
        let slope = dot(&grad, d);
        Ok(Point {
            step,
            value,
            grad,
            slope,
        })
    }
}

fn cubic_min(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.step, hi.step);
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    let width = (b - a).abs();
    let (left, right) = (a.min(b), a.max(b));
    let mid = 0.5 * (a + b);
    if disc < 0.0 || !disc.is_finite() {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    // keep away from the interval ends
    if !t.is_finite() || t < left + 0.1 * width || t > right - 0.1 * width {
        mid
    } else {
        t
    }
}

/// Strong-Wolfe line search along `d`. `None` when no acceptable step is found.
fn line_search<F>(
    prob: &mut Problem<'_, F>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    initial: f64,
) -> Result<Option<Point>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let origin = Point {
        step: 0.0,
        value: f0,
        grad: Vec::new(),
        slope: slope0,
    };
    let mut prev = origin;
    let mut step = initial;
    for i in 0..MAX_BRACKET {
        let cur = prob.at(x, d, step)?;
        if !cur.value.is_finite() {
            // overshoot into an invalid region, shrink
            step = 0.5 * (prev.step + step);
            continue;
        }
        if cur.value > f0 + C1 * step * slope0 || (i > 0 && cur.value >= prev.value) {
            return zoom(prob, x, f0, slope0, d, prev, cur);
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Ok(Some(cur));
        }
        if cur.slope >= 0.0 {
            return zoom(prob, x, f0, slope0, d, cur, prev);
        }
        prev = cur;
        step *= 2.0;
    }
    Ok(None)
}

fn zoom<F>(
    prob: &mut Problem<'_, F>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    mut lo: Point,
    mut hi: Point,
) -> Result<Option<Point>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    for _ in 0..MAX_ZOOM {
        let step = cubic_min(&lo, &hi);
        if (hi.step - lo.step).abs() < 1e-16 * lo.step.abs().max(1.0) {
            break;
        }
        let cur = prob.at(x, d, step)?;
        if !cur.value.is_finite() || cur.value > f0 + C1 * step * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // accept sufficient decrease without the curvature condition
    if lo.step > 0.0 && lo.value < f0 {
        Ok(Some(lo))
    } else {
        Ok(None)
    }
}

/// Minimizes `f` from `x0`. `f` returns the value and gradient.
pub fn minimize<F>(x0: Vec<f64>, mut f: F, opts: &LbfgsOptions) -> Result<(Vec<f64>, LbfgsReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if opts.history == 0 {
        return Err(Error::config("L-BFGS history must be >= 1"));
    }
    let mut prob = Problem {
        f: &mut f,
        evaluations: 0,
    };
    let mut x = x0;
    let (mut value, mut grad) = prob.eval(&x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective at the starting point".into()));
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) <= opts.gradient_tolerance;

    while !converged && iterations < opts.max_iterations {
        // two-loop recursion
        let mut q = grad.clone();
        let m = s_hist.len();
        let mut alphas = vec![0.0; m];
        for i in (0..m).rev() {
            alphas[i] = rho_hist[i] * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alphas[i] * yj;
            }
        }
        let gamma = if m > 0 {
            dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1])
        } else {
            1.0
        };
        for qj in q.iter_mut() {
            *qj *= gamma;
        }
        for i in 0..m {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alphas[i] - beta) * sj;
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &d);
        if slope >= 0.0 || !slope.is_finite() {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = grad.iter().map(|v| -v).collect();
            slope = dot(&grad, &d);
        }
        let initial = if s_hist.is_empty() {
            (1.0 / dot(&grad, &grad).sqrt()).min(1.0)
        } else {
            1.0
        };
        let found = line_search(&mut prob, &x, value, slope, &d, initial)?;
        let Some(point) = found else {
            if s_hist.is_empty() {
                break;
            }
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            continue;
        };
        iterations += 1;
        let s: Vec<f64> = d.iter().map(|di| point.step * di).collect();
        let y: Vec<f64> = point.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let sy = dot(&s, &y);
        let progress = value - point.value;
        value = point.value;
        grad = point.grad;
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == opts.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        converged = inf_norm(&grad) <= opts.gradient_tolerance;
        if !converged && progress <= f64::EPSILON * value.abs().max(1e-300) && progress >= 0.0 {
            // stalled at machine precision
            break;
        }
    }
    let report = LbfgsReport {
        iterations,
        evaluations: prob.evaluations,
        converged,
        value,
        gradient_norm: inf_norm(&grad),
    };
    Ok((x, report))
}
