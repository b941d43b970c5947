//! Deterministic box-constrained minimization: coarse grid scan followed by
//! Nelder-Mead refinement started from the best grid points.
//!
//! Objectives may return `f64::INFINITY` for undefined parameter values;
//! the optimizer treats those as ordinary (bad) values.

/// Configuration shared by every empirical-risk fit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    /// Grid points per free parameter (>= 2).
    pub grid_resolution: usize,
    /// Convergence tolerance on the objective spread of the simplex.
    pub tolerance: f64,
    /// Iteration cap for each Nelder-Mead run.
    pub max_refine_iters: usize,
    /// Number of refinement restarts from the incumbent.
    pub restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            grid_resolution: 25,
            tolerance: 1e-9,
            max_refine_iters: 200,
            restarts: 1,
        }
    }
}

/// Result of a minimization: parameter vector and objective value.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub params: Vec<f64>,
    pub objective: f64,
}

fn clamp(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Enumerates the full grid, returning every evaluated point. Exposed so
/// audits can compare the returned optimum against each grid value.
pub fn grid_points(lo: &[f64], hi: &[f64], resolution: usize) -> Vec<Vec<f64>> {
    let dim = lo.len();
    let res = resolution.max(2);
    let mut points = Vec::with_capacity(res.pow(dim as u32));
    let mut idx = vec![0usize; dim];
    loop {
        let p: Vec<f64> = (0..dim)
            .map(|d| lo[d] + (hi[d] - lo[d]) * idx[d] as f64 / (res - 1) as f64)
            .collect();
        points.push(p);
        // odometer increment
        let mut d = 0;
        loop {
            if d == dim {
                return points;
            }
            idx[d] += 1;
            if idx[d] < res {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Nelder-Mead on a box. Reflected/expanded points are clamped into the box.
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    step: &[f64],
    tol: f64,
    max_iters: usize,
) -> Minimum {
    let dim = start.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(start.to_vec());
    for d in 0..dim {
        let mut v = start.to_vec();
        // step away from the nearer boundary so the vertex stays distinct
        if v[d] + step[d] <= hi[d] {
            v[d] += step[d];
        } else {
            v[d] -= step[d];
        }
        clamp(&mut v, lo, hi);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let centroid = |simplex: &[Vec<f64>], skip: usize| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        for (i, v) in simplex.iter().enumerate() {
            if i == skip {
                continue;
            }
            for d in 0..dim {
                c[d] += v[d];
            }
        }
        for cd in c.iter_mut() {
            *cd /= dim as f64;
        }
        c
    };

    for _ in 0..max_iters {
        // order: best first (stable under ties for determinism)
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| {
            values[a]
                .partial_cmp(&values[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let best = order[0];
        let worst = order[dim];
        let second_worst = order[dim.saturating_sub(1)];
        let spread = values[worst] - values[best];
        if spread.is_nan() || spread < tol {
            break;
        }

        let c = centroid(&simplex, worst);
        let mut reflected: Vec<f64> = (0..dim)
            .map(|d| c[d] + (c[d] - simplex[worst][d]))
            .collect();
        clamp(&mut reflected, lo, hi);
        let fr = f(&reflected);

        if fr < values[best] {
            let mut expanded: Vec<f64> = (0..dim)
                .map(|d| c[d] + 2.0 * (c[d] - simplex[worst][d]))
                .collect();
            clamp(&mut expanded, lo, hi);
            let fe = f(&expanded);
            if fe < fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = fr;
        } else {
            let mut contracted: Vec<f64> = (0..dim)
                .map(|d| c[d] + 0.5 * (simplex[worst][d] - c[d]))
                .collect();
            clamp(&mut contracted, lo, hi);
            let fc = f(&contracted);
            if fc < values[worst] {
                simplex[worst] = contracted;
                values[worst] = fc;
            } else {
                // shrink toward the best vertex
                let best_v = simplex[best].clone();
                for i in 0..=dim {
                    if i == best {
                        continue;
                    }
                    for d in 0..dim {
                        simplex[i][d] = best_v[d] + 0.5 * (simplex[i][d] - best_v[d]);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=dim {
        if values[i] < values[best] {
            best = i;
        }
    }
    Minimum {
        params: simplex[best].clone(),
        objective: values[best],
    }
}

/// Grid scan plus Nelder-Mead refinement from the best three grid points.
///
/// Deterministic given the config. Ties on the final objective are broken
/// by the lexicographically smallest parameter vector.
pub fn minimize_on_box<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    lo: &[f64],
    hi: &[f64],
    cfg: &FitConfig,
) -> Minimum {
    assert_eq!(lo.len(), hi.len());
    let dim = lo.len();
    let points = grid_points(lo, hi, cfg.grid_resolution);
    let mut evaluated: Vec<(Vec<f64>, f64)> = points
        .into_iter()
        .map(|p| {
            let v = f(&p);
            (p, v)
        })
        .collect();
    evaluated.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                if lex_less(&a.0, &b.0) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Greater
                }
            })
    });

    let mut candidates: Vec<Minimum> = evaluated
        .iter()
        .take(1)
        .map(|(p, v)| Minimum {
            params: p.clone(),
            objective: *v,
        })
        .collect();

    let res = cfg.grid_resolution.max(2);
    let step: Vec<f64> = (0..dim)
        .map(|d| 0.5 * (hi[d] - lo[d]) / (res - 1) as f64)
        .collect();
    for (p, v) in evaluated.iter().take(3) {
        if !v.is_finite() {
            continue;
        }
        let mut m = nelder_mead(
            &mut f,
            p,
            lo,
            hi,
            &step,
            cfg.tolerance,
            cfg.max_refine_iters,
        );
        for _ in 1..cfg.restarts.max(1) {
            let again = nelder_mead(
                &mut f,
                &m.params,
                lo,
                hi,
                &step,
                cfg.tolerance,
                cfg.max_refine_iters,
            );
            if again.objective < m.objective {
                m = again;
            }
        }
        candidates.push(m);
    }

    let mut best = candidates[0].clone();
    for c in candidates.into_iter().skip(1) {
        if c.objective < best.objective
            || (c.objective == best.objective && lex_less(&c.params, &best.params))
        {
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_expected_size_and_endpoints() {
        let pts = grid_points(&[0.0, 0.0], &[1.0, 2.0], 5);
        assert_eq!(pts.len(), 25);
        assert!(pts.contains(&vec![0.0, 0.0]));
        assert!(pts.contains(&vec![1.0, 2.0]));
    }

    #[test]
    fn finds_quadratic_minimum() {
        let m = minimize_on_box(
            |x| (x[0] - 0.37).powi(2) + (x[1] - 1.21).powi(2),
            &[0.0, 0.0],
            &[2.0, 2.0],
            &FitConfig::default(),
        );
        assert!((m.params[0] - 0.37).abs() < 1e-4, "{:?}", m);
        assert!((m.params[1] - 1.21).abs() < 1e-4, "{:?}", m);
    }

    #[test]
    fn tolerates_infinite_regions() {
        // objective undefined left of 0.5
        let m = minimize_on_box(
            |x| {
                if x[0] < 0.5 {
                    f64::INFINITY
                } else {
                    (x[0] - 0.8).powi(2)
                }
            },
            &[0.0],
            &[1.0],
            &FitConfig::default(),
        );
        assert!((m.params[0] - 0.8).abs() < 1e-5);
    }

    #[test]
    fn deterministic() {
        let run = || {
            minimize_on_box(
                |x| (x[0] - 0.3).powi(2) * (1.0 + (x[1] * 7.0).sin().abs()),
                &[0.0, 0.0],
                &[1.0, 1.0],
                &FitConfig::default(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }
}
