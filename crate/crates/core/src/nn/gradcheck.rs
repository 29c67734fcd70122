use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, NodeId, Tensor};

/// Which parameter coordinates a gradient check perturbs.
#[derive(Clone, Debug)]
pub enum CoordSampling {
    All,
    /// Up to `per_param` coordinates of each parameter, chosen by a seeded draw.
    Random { per_param: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |a − n| / (|a| + |n| + 1e-12) over checked coordinates
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central finite differences with step `h`.
pub fn grad_check<F, E>(
    params: &[Tensor],
    build: F,
    h: f64,
    sampling: &CoordSampling,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, E>,
    E: From<NnError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.get(id)).collect();
    check_gradients(params, &analytic, build, h, sampling)
}

/// Finite-difference comparison against caller-supplied analytic gradients.
pub fn check_gradients<F, E>(
    params: &[Tensor],
    analytic: &[Tensor],
    build: F,
    h: f64,
    sampling: &CoordSampling,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, E>,
    E: From<NnError>,
{
    if !(1e-5..=1e-3).contains(&h) {
        return Err(NnError::StepOutOfRange(h).into());
    }
    if analytic.len() != params.len() {
        return Err(NnError::ParamCount {
            expected: params.len(),
            got: analytic.len(),
        }
        .into());
    }
    let eval = |ps: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(NnError::NonScalarLoss(v.shape().to_vec()).into());
        }
        Ok(v.item())
    };

    let mut rng = match sampling {
        CoordSampling::Random { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        CoordSampling::All => None,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };

    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = match (sampling, rng.as_mut()) {
            (CoordSampling::Random { per_param, .. }, Some(r)) if *per_param < n => {
                let mut c = sample(r, n, *per_param).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = param.data()[c];
            work[pi].data_mut()[c] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[c] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[c] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[c];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(NnError::NonFinite {
                    param: pi,
                    coord: c,
                }
                .into());
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_coord = c;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
