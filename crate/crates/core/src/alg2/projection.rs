//! Euclidean projection onto `K_α = {(a, b) : a + |b|²/α ≤ 0}`.

use super::Alg2Error;

const FEASIBLE_SLACK: f64 = 0.0;

/// Largest real root of the monic cubic `x³ + p x² + q x + r`.
fn largest_real_root(p: f64, q: f64, r: f64) -> Option<f64> {
    let shift = p / 3.0;
    let pp = q - p * p / 3.0;
    let qq = 2.0 * p * p * p / 27.0 - p * q / 3.0 + r;
    let disc = (qq / 2.0).powi(2) + (pp / 3.0).powi(3);
    let y = if disc > 0.0 {
        let sd = disc.sqrt();
        (-qq / 2.0 + sd).cbrt() + (-qq / 2.0 - sd).cbrt()
    } else if pp == 0.0 {
        (-qq).cbrt()
    } else {
        let m = 2.0 * (-pp / 3.0).sqrt();
        let arg = (3.0 * qq / (pp * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        // k = 0 branch of the trigonometric form is the largest root
        m * theta.cos()
    };
    let x = y - shift;
    x.is_finite().then_some(x)
}

/// Projects `(a, b)` onto `K_α` with `α = 2μ/κ`.
///
/// Points already in `K_α` are returned unchanged. Otherwise the multiplier `λ`
/// is the largest real root of `(a − λ)(α/2 + λ)² + (α/4)|b|² = 0` and the
/// image is `(a − λ, b / (1 + 2λ/α))`, with `a'` then snapped onto the boundary.
pub fn project_parabola(a: f64, b: [f64; 2], alpha: f64) -> Result<(f64, [f64; 2]), Alg2Error> {
    let nb2 = b[0] * b[0] + b[1] * b[1];
    if a + nb2 / alpha <= FEASIBLE_SLACK {
        return Ok((a, b));
    }
    let c = 0.5 * alpha;
    let k = 0.5 * c * nb2;
    // with y = c + λ: y³ − (a + c) y² − k = 0
    let big = a + c;
    let y0 = largest_real_root(-big, 0.0, -k).ok_or(Alg2Error::Cubic { a, b, alpha })?;
    let mut lambda = (y0 - c).max(0.0);

    // g is decreasing and convex on λ > −c with g(0) > 0
    let g = |l: f64| a - l + k / ((c + l) * (c + l));
    let dg = |l: f64| -1.0 - 2.0 * k / ((c + l) * (c + l) * (c + l));
    let hi_bound = a + nb2 / alpha;
    for _ in 0..8 {
        let v = g(lambda);
        let step = v / dg(lambda);
        let next = (lambda - step).clamp(0.0, hi_bound);
        if (next - lambda).abs() <= 4.0 * f64::EPSILON * next.abs().max(1.0) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    if !lambda.is_finite() {
        return Err(Alg2Error::Cubic { a, b, alpha });
    }
    let scale = 1.0 / (1.0 + lambda / c);
    let bp = [b[0] * scale, b[1] * scale];
    let ap = -(bp[0] * bp[0] + bp[1] * bp[1]) / alpha;
    Ok((ap, bp))
}
