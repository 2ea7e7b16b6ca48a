use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// (parameter name, flat index, analytic, numeric) of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares tape gradients of the scalar produced by `f` against central
/// finite differences on `probes` randomly chosen coordinates (all of them
/// when `probes` covers the whole store). Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check<R, F>(store: &mut ParamStore, probes: usize, eps: f64, rng: &mut R, f: F) -> Result<GradCheckReport>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss);
    let analytic = grads.param_grads(&tape, store.len());
    drop(tape);

    let sizes: Vec<usize> = store.iter().map(|p| p.value().len()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<(usize, usize)> = if probes >= total {
        sizes
            .iter()
            .enumerate()
            .flat_map(|(p, &n)| (0..n).map(move |i| (p, i)))
            .collect()
    } else {
        (0..probes)
            .map(|_| {
                let mut k = rng.random_range(0..total);
                let mut p = 0;
                while k >= sizes[p] {
                    k -= sizes[p];
                    p += 1;
                }
                (p, k)
            })
            .collect()
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = f(&mut tape, store)?;
        Ok(tape.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: coords.len(),
        worst: None,
    };
    let set = |store: &mut ParamStore, p: usize, i: usize, v: f64| {
        store.iter_mut().nth(p).unwrap().value_mut().data_mut()[i] = v;
    };
    for (p, i) in coords {
        let orig = store.iter().nth(p).unwrap().value().data()[i];
        set(store, p, i, orig + eps);
        let up = eval(store)?;
        set(store, p, i, orig - eps);
        let down = eval(store)?;
        set(store, p, i, orig);

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[p].as_ref().map_or(0.0, |g| g.data()[i]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            let name = store.iter().nth(p).unwrap().name.clone();
            report.worst = Some((name, i, a, numeric));
        }
    }
    Ok(report)
}
