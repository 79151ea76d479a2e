//! Central finite-difference gradient oracle.
//!
//! The oracle only re-runs forward evaluations, so it stays independent of
//! the backward implementation it is used to check.

/// Central difference d f / d params[i] with per-coordinate step scaling.
pub fn central_diff<F>(f: &mut F, params: &[f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let step = h * params[i].abs().max(1.0);
    let mut p = params.to_vec();
    p[i] = params[i] + step;
    let up = f(&p);
    p[i] = params[i] - step;
    let down = f(&p);
    (up - down) / (2.0 * step)
}

/// `|a - b| <= rtol * max(|a|, |b|) + atol`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

/// Compare analytic gradients against finite differences on the chosen
/// coordinates, panicking with the worst offender on failure.
pub fn assert_grads_match<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    rtol: f64,
    atol: f64,
) where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for &i in coords {
        let fd = central_diff(&mut f, params, i, h);
        let ad = analytic[i];
        let err = (ad - fd).abs() / (ad.abs().max(fd.abs()) + atol.max(1e-300));
        if worst.map(|w| err > w.3).unwrap_or(true) {
            worst = Some((i, ad, fd, err));
        }
        assert!(
            close(ad, fd, rtol, atol),
            "gradient mismatch at coord {i}: analytic {ad:.12e} vs fd {fd:.12e} (rel {err:.3e})"
        );
    }
    let _ = worst;
}

/// Deterministic coordinate subset: `count` indices spread over `len`.
pub fn spread_coords(len: usize, count: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let count = count.min(len);
    (0..count).map(|i| i * len / count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_central_diff_on_cubic() {
        let mut f = |p: &[f64]| p[0] * p[0] * p[0];
        let fd = central_diff(&mut f, &[2.0], 0, 1e-5);
        assert!((fd - 12.0).abs() < 1e-6);
    }

    #[test]
    fn test_spread_coords_bounds() {
        let c = spread_coords(100, 7);
        assert_eq!(c.len(), 7);
        assert!(c.iter().all(|&i| i < 100));
    }
}
