use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DiffError, Graph, ParamStore, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter; every coordinate when the
    /// parameter is at most this large.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function of the store against
/// central finite differences on sampled coordinates.
pub fn grad_check<F, L>(store: &ParamStore<F>, loss: L, opts: &GradCheckOptions) -> Result<GradCheckReport, DiffError>
where
    F: Scalar,
    L: Fn(&ParamStore<F>, &mut Graph<F>) -> Result<Var, DiffError>,
{
    let mut graph = Graph::new();
    let out = loss(store, &mut graph)?;
    let analytic = graph.backward(out)?.param_grads(store.len());
    drop(graph);

    let eval = |s: &ParamStore<F>| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let v = loss(s, &mut g)?;
        Ok(g.scalar(v).as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let h = F::lit(opts.step);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).tensor.len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.coords_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = store.get(id).tensor.data()[i];
            work.get_mut(id).tensor.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[i].as_f64());
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(GradCheckEntry {
                    param: store.get(id).name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
