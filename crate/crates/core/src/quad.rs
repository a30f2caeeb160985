//! Globally adaptive Gauss–Kronrod (7/15) quadrature on a finite interval.
//!
//! Integrands may be vector valued so that several moments of the same
//! density share one set of evaluations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Number of equal panels the interval is split into before adapting.
    pub initial_panels: usize,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self { abs_tol: 1e-10, rel_tol: 1e-10, initial_panels: 16, max_intervals: 4000 }
    }
}

#[derive(Debug, Clone)]
pub struct QuadResult {
    pub value: Vec<f64>,
    pub abs_error: Vec<f64>,
    pub intervals: usize,
    pub converged: bool,
}

struct Panel {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: Vec<f64>,
    priority: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority)
    }
}

fn gauss_kronrod<F>(f: &mut F, dim: usize, a: f64, b: f64, buf: &mut [f64]) -> (Vec<f64>, Vec<f64>)
where
    F: FnMut(f64, &mut [f64]),
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut kron = vec![0.0; dim];
    let mut gauss = vec![0.0; dim];

    f(center, buf);
    for d in 0..dim {
        kron[d] += WGK[7] * buf[d];
        gauss[d] += WG[3] * buf[d];
    }
    for k in 0..7 {
        let dx = half * XGK[k];
        for x in [center - dx, center + dx] {
            f(x, buf);
            for d in 0..dim {
                kron[d] += WGK[k] * buf[d];
                if k % 2 == 1 {
                    gauss[d] += WG[k / 2] * buf[d];
                }
            }
        }
    }
    let value: Vec<f64> = kron.iter().map(|k| k * half).collect();
    let error = kron.iter().zip(&gauss).map(|(k, g)| ((k - g) * half).abs()).collect();
    (value, error)
}

/// Integrates a vector-valued `f` over `[a, b]`.
///
/// `f(x, out)` writes the `dim` components at `x`. Refinement stops once every
/// component's summed error estimate is below `max(abs_tol, rel_tol * |I_d|)`.
pub fn integrate_vec<F>(f: F, dim: usize, a: f64, b: f64, opts: QuadOptions) -> QuadResult
where
    F: FnMut(f64, &mut [f64]),
{
    let panels = opts.initial_panels.max(1);
    let width = (b - a) / panels as f64;
    let breaks: Vec<f64> = (0..=panels).map(|k| if k == panels { b } else { a + width * k as f64 }).collect();
    integrate_vec_with_breaks(f, dim, &breaks, opts)
}

/// Like [`integrate_vec`] but starts from the given sorted breakpoints
/// (`breaks[0]` and the last entry are the integration limits).
pub fn integrate_vec_with_breaks<F>(mut f: F, dim: usize, breaks: &[f64], opts: QuadOptions) -> QuadResult
where
    F: FnMut(f64, &mut [f64]),
{
    assert!(breaks.len() >= 2, "need at least one panel");
    let mut buf = vec![0.0; dim];
    let mut heap = BinaryHeap::new();
    for pair in breaks.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi <= lo {
            continue;
        }
        let (value, error) = gauss_kronrod(&mut f, dim, lo, hi, &mut buf);
        let priority = error.iter().cloned().fold(0.0, f64::max);
        heap.push(Panel { a: lo, b: hi, value, error, priority });
    }
    if heap.is_empty() {
        return QuadResult { value: vec![0.0; dim], abs_error: vec![0.0; dim], intervals: 0, converged: true };
    }

    let totals = |heap: &BinaryHeap<Panel>| {
        let mut value = vec![0.0; dim];
        let mut error = vec![0.0; dim];
        for p in heap.iter() {
            for d in 0..dim {
                value[d] += p.value[d];
                error[d] += p.error[d];
            }
        }
        (value, error)
    };
    let done = |value: &[f64], error: &[f64]| {
        value.iter().zip(error).all(|(v, e)| *e <= opts.abs_tol.max(opts.rel_tol * v.abs()))
    };

    let (mut value, mut error) = totals(&heap);
    let mut converged = done(&value, &error);
    while !converged && heap.len() < opts.max_intervals {
        let worst = heap.pop().expect("heap never empties");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval exhausted at machine precision
            heap.push(Panel { priority: 0.0, ..worst });
            break;
        }
        for (lo, hi) in [(worst.a, mid), (mid, worst.b)] {
            let (v, e) = gauss_kronrod(&mut f, dim, lo, hi, &mut buf);
            let priority = e.iter().cloned().fold(0.0, f64::max);
            heap.push(Panel { a: lo, b: hi, value: v, error: e, priority });
        }
        let (v, e) = totals(&heap);
        value = v;
        error = e;
        converged = done(&value, &error);
    }
    QuadResult { value, abs_error: error, intervals: heap.len(), converged }
}

/// Scalar convenience wrapper around [`integrate_vec`].
pub fn integrate<F>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let r = integrate_vec(|x, out| out[0] = f(x), 1, a, b, opts);
    (r.value[0], r.abs_error[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let (v, e) = integrate(|x| 3.0 * x * x + 2.0 * x, 0.0, 2.0, QuadOptions::default());
        assert!((v - 12.0).abs() < 1e-13);
        assert!(e < 1e-10);
    }

    #[test]
    fn peaked_integrand() {
        let s = 1e-3;
        let (v, _) = integrate(|x| (-(x - 0.77f64).powi(2) / (2.0 * s * s)).exp(), 0.0, 1.0, QuadOptions::default());
        let exact = s * (2.0 * std::f64::consts::PI).sqrt();
        assert!((v - exact).abs() < 1e-10 * exact.max(1.0), "{v} vs {exact}");
    }

    #[test]
    fn endpoint_singularity() {
        let opts = QuadOptions { abs_tol: 1e-9, rel_tol: 1e-9, ..Default::default() };
        let (v, _) = integrate(|x| if x > 0.0 { x.powf(-0.5) } else { 0.0 }, 0.0, 1.0, opts);
        assert!((v - 2.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn vector_moments() {
        let r = integrate_vec(
            |x, out| {
                out[0] = x.exp();
                out[1] = x * x.exp();
            },
            2,
            0.0,
            1.0,
            QuadOptions::default(),
        );
        assert!((r.value[0] - (1f64.exp() - 1.0)).abs() < 1e-12);
        assert!((r.value[1] - 1.0).abs() < 1e-12);
        assert!(r.converged);
    }
}
