use crate::exec::Execution;

/// Largest reference set used by [`kde_log_density`]; larger sample sets are
/// thinned evenly.
const MAX_REFERENCE: usize = 2_000;

/// Log of a Gaussian product-kernel density estimate built from `points`,
/// evaluated at each of `queries`, up to a shared additive constant.
/// Bandwidths follow Scott's rule per coordinate; constant coordinates get a
/// unit bandwidth.
pub(crate) fn kde_log_density(points: &[Vec<f64>], queries: &[Vec<f64>], exec: Execution) -> Vec<f64> {
    let n = points.len();
    if n == 0 {
        return vec![f64::NEG_INFINITY; queries.len()];
    }
    let stride = n.div_ceil(MAX_REFERENCE);
    let reference: Vec<&Vec<f64>> = points.iter().step_by(stride).collect();
    let d = points[0].len();
    let m = reference.len() as f64;
    let factor = m.powf(-1.0 / (d as f64 + 4.0));
    let bandwidth: Vec<f64> = (0..d)
        .map(|j| {
            let mean = reference.iter().map(|p| p[j]).sum::<f64>() / m;
            let var = reference.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / m;
            if var > 0.0 {
                var.sqrt() * factor
            } else {
                1.0
            }
        })
        .collect();
    exec.map(queries, |q| {
        let exps: Vec<f64> = reference
            .iter()
            .map(|p| {
                -0.5 * p
                    .iter()
                    .zip(q)
                    .zip(&bandwidth)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + exps.iter().map(|e| (e - top).exp()).sum::<f64>().ln()
    })
}
