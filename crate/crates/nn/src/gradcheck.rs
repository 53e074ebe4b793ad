//! Central finite differences for checking hand-written backward passes.

use rand::seq::index::sample;
use rand::Rng;

use crate::params::{ParamId, Params};

/// One compared coordinate.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is ~0 from dividing rounding noise by rounding noise.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Picks `count` (param, flat index) coordinates uniformly over all
/// trainable scalars.
pub fn sample_coords<R: Rng>(params: &Params<f64>, count: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = params.ids().filter(|id| params.is_trainable(*id)).collect();
    let sizes: Vec<usize> = ids.iter().map(|id| params.get(*id).len()).collect();
    let total: usize = sizes.iter().sum();
    let count = count.min(total);
    let mut picks: Vec<usize> = sample(rng, total, count).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|mut flat| {
            let mut k = 0;
            while flat >= sizes[k] {
                flat -= sizes[k];
                k += 1;
            }
            (ids[k], flat)
        })
        .collect()
}

/// Compares `analytic(id, index)` with `(f(p + h e) - f(p - h e)) / 2h`.
pub fn check<F, A>(params: &mut Params<f64>, coords: &[(ParamId, usize)], h: f64, floor: f64, mut f: F, analytic: A) -> Vec<GradSample>
where
    F: FnMut(&Params<f64>) -> f64,
    A: Fn(ParamId, usize) -> f64,
{
    coords
        .iter()
        .map(|&(id, index)| {
            let orig = params.get(id).data()[index];
            params.get_mut(id).data_mut()[index] = orig + h;
            let plus = f(params);
            params.get_mut(id).data_mut()[index] = orig - h;
            let minus = f(params);
            params.get_mut(id).data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic(id, index);
            GradSample {
                param: params.name(id).to_string(),
                index,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric, floor),
            }
        })
        .collect()
}

/// Central differences of a scalar function of a plain vector.
pub fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let o = x[i];
            x[i] = o + h;
            let p = f(&x);
            x[i] = o - h;
            let m = f(&x);
            x[i] = o;
            (p - m) / (2.0 * h)
        })
        .collect()
}
