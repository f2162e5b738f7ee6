//! Adaptive Gauss–Kronrod quadrature and a box-constrained Nelder–Mead search.

use std::collections::BinaryHeap;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("quadrature reached error {achieved:.3e}, requested {requested:.3e}")]
pub struct QuadratureError {
    pub achieved: f64,
    pub requested: f64,
}

#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];

#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

/// Gauss weights for the nodes `XGK[1]`, `XGK[3]`, `XGK[5]` and the centre.
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

const MAX_SEGMENTS: usize = 500;

/// `(Kronrod estimate, |Kronrod − Gauss|)` on `[a, b]`.
fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (k, (&x, &w)) in XGK[..7].iter().zip(&WGK[..7]).enumerate() {
        let pair = f(centre - half * x) + f(centre + half * x);
        kronrod += w * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}

impl Eq for Segment {}

impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// `∫_a^b f` to absolute tolerance `tol`, bisecting the segment with the
/// largest error estimate until the summed estimate is below `tol`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Result<f64, QuadratureError> {
    if a == b {
        return Ok(0.0);
    }
    let (value, error) = gk15(&mut f, a, b);
    let mut heap = BinaryHeap::from([Segment { a, b, value, error }]);
    let mut total_error = error;
    while total_error > tol {
        if heap.len() >= MAX_SEGMENTS || !total_error.is_finite() {
            return Err(QuadratureError { achieved: total_error, requested: tol });
        }
        let worst = heap.pop().expect("heap holds at least one segment");
        let mid = 0.5 * (worst.a + worst.b);
        let (lv, le) = gk15(&mut f, worst.a, mid);
        let (rv, re) = gk15(&mut f, mid, worst.b);
        total_error += le + re - worst.error;
        heap.push(Segment { a: worst.a, b: mid, value: lv, error: le });
        heap.push(Segment { a: mid, b: worst.b, value: rv, error: re });
        if mid <= worst.a || mid >= worst.b {
            return Err(QuadratureError { achieved: total_error, requested: tol });
        }
    }
    Ok(heap.iter().map(|s| s.value).sum())
}

/// Maximizes `f` over the box `[lower, upper]` with Nelder–Mead, projecting
/// every trial point onto the box. Failed evaluations (`None`) rank below any
/// value. Returns the best point seen, or `None` if no evaluation succeeded.
pub fn nelder_mead_max<F>(
    mut f: F,
    start: &[f64],
    step: &[f64],
    lower: &[f64],
    upper: &[f64],
    iterations: usize,
) -> Option<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let dim = start.len();
    let project = |x: &mut Vec<f64>| {
        for k in 0..dim {
            x[k] = x[k].clamp(lower[k], upper[k]);
        }
    };
    let mut score = |x: &[f64]| f(x).unwrap_or(f64::NEG_INFINITY);

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let mut origin = start.to_vec();
    project(&mut origin);
    simplex.push((origin.clone(), score(&origin)));
    for k in 0..dim {
        let mut x = origin.clone();
        x[k] = if x[k] + step[k] <= upper[k] { x[k] + step[k] } else { x[k] - step[k] };
        project(&mut x);
        let v = score(&x);
        simplex.push((x, v));
    }

    for _ in 0..iterations {
        // Best first; stable so earlier vertices win ties.
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let worst = simplex[dim].clone();
        let centroid: Vec<f64> =
            (0..dim).map(|k| simplex[..dim].iter().map(|(x, _)| x[k]).sum::<f64>() / dim as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            let mut x: Vec<f64> = (0..dim).map(|k| centroid[k] + t * (worst.0[k] - centroid[k])).collect();
            project(&mut x);
            x
        };
        let reflected = along(-1.0);
        let fr = score(&reflected);
        if fr > simplex[0].1 {
            let expanded = along(-2.0);
            let fe = score(&expanded);
            simplex[dim] = if fe > fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr > simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let contracted = if fr > worst.1 { along(-0.5) } else { along(0.5) };
            let fc = score(&contracted);
            if fc > worst.1.max(fr) {
                simplex[dim] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let mut x: Vec<f64> = (0..dim).map(|k| best[k] + 0.5 * (vertex.0[k] - best[k])).collect();
                    project(&mut x);
                    let v = score(&x);
                    *vertex = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (x, v) = simplex.swap_remove(0);
    v.is_finite().then_some((x, v))
}
