//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Which coordinates to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// `count` coordinates drawn uniformly (with replacement) over all
    /// weights. Draws that straddle a kink are replaced by further draws.
    Sample {
        count: usize,
        seed: u64,
    },
    /// The `per_param` coordinates of each parameter with the largest
    /// analytic gradient magnitude, ignoring gradients below 1e-12.
    Top {
        per_param: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out because `x +- h` changes a ReLU or max-pool
    /// branch, where the loss is not differentiable within the step.
    pub skipped_kinks: usize,
    pub worst: Option<Worst>,
}

/// Gradients of the scalar built by `f` with respect to every parameter,
/// one flat vector per parameter.
pub fn analytic_gradients<F>(store: &ParamStore<f64>, f: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (mut graph, loss) = f(store)?;
    graph.backward(loss)?;
    let mut sink = store.clone();
    for p in sink.iter_mut() {
        p.tensor.clear_grad();
        p.tensor.grad_mut();
    }
    graph.accumulate_param_grads(&mut sink, 1.0);
    Ok(sink
        .iter()
        .map(|p| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect())
}

fn eval<F>(store: &ParamStore<f64>, f: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (graph, loss) = f(store)?;
    let v = graph.value(loss);
    if v.len() != 1 {
        return Err(Error::shape("grad_check function must return a scalar"));
    }
    Ok((v.data()[0], graph.branch_signature()))
}

/// Compare supplied analytic gradients against central differences of `f`.
pub fn compare_with_finite_differences<F>(
    store: &mut ParamStore<f64>,
    f: &mut F,
    analytic: &[Vec<f64>],
    h: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (base_value, base_sig) = eval(store, f)?;
    if !base_value.is_finite() {
        return Err(Error::NonFinite(format!("grad_check loss is {base_value}")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let mut probe = |store: &mut ParamStore<f64>,
                     (p, i): (usize, usize),
                     report: &mut GradCheckReport|
     -> Result<()> {
        let id = ParamId(p);
        let orig = store.get(id).tensor.data()[i];
        store.get_mut(id).tensor.data_mut()[i] = orig + h;
        let (plus, sig_plus) = eval(store, f)?;
        store.get_mut(id).tensor.data_mut()[i] = orig - h;
        let (minus, sig_minus) = eval(store, f)?;
        store.get_mut(id).tensor.data_mut()[i] = orig;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped_kinks += 1;
            return Ok(());
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[p].get(i).copied().unwrap_or(0.0);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(Worst {
                param: store.get(id).name.clone(),
                index: i,
                analytic: a,
                numeric,
            });
        }
        Ok(())
    };
    match coords {
        Coords::All => {
            let sizes: Vec<usize> = store.iter().map(|p| p.tensor.len()).collect();
            for (p, &n) in sizes.iter().enumerate() {
                for i in 0..n {
                    probe(store, (p, i), &mut report)?;
                }
            }
        }
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total = store.num_weights();
            let sizes: Vec<usize> = store.iter().map(|p| p.tensor.len()).collect();
            let max_draws = 20 * count.max(1);
            let mut draws = 0;
            while report.checked < count && draws < max_draws && total > 0 {
                draws += 1;
                let mut flat = rng.random_range(0..total);
                let mut p = 0;
                while flat >= sizes[p] {
                    flat -= sizes[p];
                    p += 1;
                }
                probe(store, (p, flat), &mut report)?;
            }
        }
        Coords::Top { per_param } => {
            for (p, g) in analytic.iter().enumerate() {
                let mut idx: Vec<usize> = (0..g.len()).collect();
                idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
                idx.truncate(per_param);
                idx.retain(|&i| g[i].abs() > 1e-12);
                for i in idx {
                    probe(store, (p, i), &mut report)?;
                }
            }
        }
    }
    Ok(report)
}

/// Backpropagate through `f`, then compare against central differences with
/// step `h` on the selected coordinates.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    h: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let analytic = analytic_gradients(store, &mut f)?;
    compare_with_finite_differences(store, &mut f, &analytic, h, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap());
        let report = grad_check(
            &mut store,
            |s| {
                let mut g = Graph::inference();
                let v = g.param(s, w);
                let l = g.weighted_sum(v, &[1.5, -2.0, 0.25])?;
                Ok((g, l))
            },
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
