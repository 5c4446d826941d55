//! Dormand–Prince 5(4) embedded Runge–Kutta integrator with adaptive steps.

use crate::error::{Error, Result};
use crate::scalar::Real;

const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MAX_STEPS: usize = 200_000;

#[derive(Debug, Clone, Copy)]
pub struct Tolerance<T> {
    pub atol: T,
    pub rtol: T,
}

/// Integrates the autonomous system `y' = f(y)` from 0 to `t_end >= 0`.
///
/// `inside` is consulted after each accepted step; a `false` answer aborts
/// with [`Error::Escape`] carrying the parameter where the state left.
pub fn integrate<T, F, G>(
    y0: [T; 4],
    t_end: T,
    tol: Tolerance<T>,
    mut f: F,
    inside: G,
) -> Result<[T; 4]>
where
    T: Real,
    F: FnMut(&[T; 4]) -> [T; 4],
    G: Fn(&[T; 4]) -> bool,
{
    if t_end <= T::zero() {
        return Ok(y0);
    }
    let mut y = y0;
    let mut t = T::zero();
    let mut h = t_end;
    let mut k = [[T::zero(); 4]; 7];
    k[0] = f(&y);
    let safety = T::lit(0.9);
    let min_factor = T::lit(0.2);
    let max_factor = T::lit(5.0);
    let order_exp = T::lit(0.2);

    for _ in 0..MAX_STEPS {
        if t + h > t_end {
            h = t_end - t;
        }
        for s in 1..7 {
            let mut ys = y;
            for (i, yi) in ys.iter_mut().enumerate() {
                let mut acc = T::zero();
                for j in 0..s {
                    acc += T::lit(A[s][j]) * k[j][i];
                }
                *yi += h * acc;
            }
            k[s] = f(&ys);
        }
        let mut y_new = y;
        let mut err = T::zero();
        for i in 0..4 {
            let mut hi = T::zero();
            let mut lo = T::zero();
            for s in 0..7 {
                hi += T::lit(B5[s]) * k[s][i];
                lo += T::lit(B4[s]) * k[s][i];
            }
            y_new[i] = y[i] + h * hi;
            let scale = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
            let e = (h * (hi - lo)).abs() / scale;
            err = err.max(e);
        }
        if !err.is_finite() || y_new.iter().any(|x| !x.is_finite()) {
            h = h * T::lit(0.25);
            if h < t_end * T::epsilon() {
                return Err(Error::Escape { param: t.as_f64() });
            }
            continue;
        }
        if err <= T::one() {
            t += h;
            y = y_new;
            if !inside(&y) {
                return Err(Error::Escape { param: t.as_f64() });
            }
            if t >= t_end {
                return Ok(y);
            }
            // FSAL: last stage is the derivative at the new point.
            k[0] = k[6];
            let factor = if err == T::zero() {
                max_factor
            } else {
                (safety * err.powf(-order_exp)).min(max_factor).max(min_factor)
            };
            h = h * factor;
        } else {
            let factor = (safety * err.powf(-order_exp)).max(min_factor);
            h = h * factor;
            if h < t_end * T::epsilon() {
                return Err(Error::Convergence {
                    what: "geodesic integration",
                    iterations: 0,
                    residual: err.as_f64(),
                });
            }
        }
    }
    Err(Error::Convergence {
        what: "geodesic integration",
        iterations: MAX_STEPS,
        residual: (t_end - t).as_f64(),
    })
}
