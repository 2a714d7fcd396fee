//! Small shared numerical helpers: deterministic summation, adaptive
//! quadrature, and one-dimensional fits.  Nothing here depends on the
//! problem domain.

/// Pairwise summation over a slice.  The reduction order depends only on
/// the slice length, so results are bit-identical for a fixed input order
/// regardless of thread count upstream.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Mean via pairwise summation; 0.0 on empty input.
pub fn pairwise_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`.  Recursion depth is capped; the cap is generous enough for the
/// smooth integrands used in this crate.
pub fn adaptive_simpson(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    simpson_step(f, a, b, fa, fm, fb, simpson_rule(a, b, fa, fm, fb), tol, 48)
}

fn simpson_rule(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_rule(a, m, fa, flm, fm);
    let right = simpson_rule(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Golden-section maximizer for a concave function on `[lo, hi]`.
/// Returns `(argmax, max)`.  `iters` of 64 drives the bracket below
/// floating-point resolution for unit-scale intervals.
pub fn golden_max(f: &mut impl FnMut(f64) -> f64, lo: f64, hi: f64, iters: u32) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut a = lo;
    let mut b = hi;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Least-squares slope of a line through the origin for points `(x, y)`,
/// together with the coefficient of determination of that through-origin
/// model.  Returns `(slope, r_squared)`.
pub fn fit_through_origin(points: &[(f64, f64)]) -> (f64, f64) {
    let sxx = pairwise_sum(&points.iter().map(|p| p.0 * p.0).collect::<Vec<_>>());
    let sxy = pairwise_sum(&points.iter().map(|p| p.0 * p.1).collect::<Vec<_>>());
    if sxx == 0.0 {
        return (0.0, 0.0);
    }
    let slope = sxy / sxx;
    let ybar = pairwise_mean(&points.iter().map(|p| p.1).collect::<Vec<_>>());
    let ss_res = pairwise_sum(
        &points
            .iter()
            .map(|p| {
                let r = p.1 - slope * p.0;
                r * r
            })
            .collect::<Vec<_>>(),
    );
    let ss_tot = pairwise_sum(
        &points
            .iter()
            .map(|p| {
                let r = p.1 - ybar;
                r * r
            })
            .collect::<Vec<_>>(),
    );
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    (slope, r2)
}

/// Ordinary least-squares line fit.  Returns `(slope, intercept,
/// r_squared)`; degenerate inputs (fewer than two distinct abscissae)
/// yield a flat line with `r_squared` 0.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    if points.len() < 2 {
        let y = points.first().map_or(0.0, |p| p.1);
        return (0.0, y, 0.0);
    }
    let xbar = pairwise_mean(&points.iter().map(|p| p.0).collect::<Vec<_>>());
    let ybar = pairwise_mean(&points.iter().map(|p| p.1).collect::<Vec<_>>());
    let sxx = pairwise_sum(
        &points
            .iter()
            .map(|p| (p.0 - xbar) * (p.0 - xbar))
            .collect::<Vec<_>>(),
    );
    if sxx == 0.0 {
        return (0.0, ybar, 0.0);
    }
    let sxy = pairwise_sum(
        &points
            .iter()
            .map(|p| (p.0 - xbar) * (p.1 - ybar))
            .collect::<Vec<_>>(),
    );
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_res = pairwise_sum(
        &points
            .iter()
            .map(|p| {
                let r = p.1 - slope * p.0 - intercept;
                r * r
            })
            .collect::<Vec<_>>(),
    );
    let ss_tot = pairwise_sum(
        &points
            .iter()
            .map(|p| {
                let r = p.1 - ybar;
                r * r
            })
            .collect::<Vec<_>>(),
    );
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    (slope, intercept, r2)
}

/// Refine a sampled maximum by fitting a parabola through the three
/// samples around the discrete argmax.  `ys` are samples on a uniform
/// grid; returns the interpolated maximum value (never below the sampled
/// maximum of the interior triple).
#[cfg_attr(not(test), allow(dead_code))]
pub fn parabolic_peak(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 3 {
        return ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let mut k = 0;
    for (i, y) in ys.iter().enumerate() {
        if *y > ys[k] {
            k = i;
        }
    }
    if k == 0 || k == n - 1 {
        return ys[k];
    }
    let (ym, y0, yp) = (ys[k - 1], ys[k], ys[k + 1]);
    let denom = ym - 2.0 * y0 + yp;
    if denom >= 0.0 {
        return y0;
    }
    let delta = 0.5 * (ym - yp) / denom;
    let peak = y0 - 0.25 * (ym - yp) * delta;
    peak.max(y0)
}
