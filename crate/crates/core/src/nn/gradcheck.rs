//! Central finite-difference check of analytic parameter gradients.

use alloc::string::String;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares the backward pass of `loss` against central differences with step
/// `h` for every element of every trainable parameter in `store`. `loss` must
/// be a pure function of the parameters (for example eval-mode layers only).
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, floor: f64, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store, true);
        let l = loss(&mut g)?;
        g.backward(l)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store, true);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheck { max_rel_error: 0.0, worst: None, worst_values: (0.0, 0.0), checked: 0 };
    let ids: alloc::vec::Vec<_> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((store.entry(id).name.clone(), k));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
