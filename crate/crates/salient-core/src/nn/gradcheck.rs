//! Central finite-difference checks of analytic gradients over a sample of
//! flat parameter coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamTree;

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients from
/// turning round-off into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub coords: Vec<(String, usize)>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

/// `n` distinct random flat indices, always including every scalar of the
/// entries named in `include`.
pub fn pick_coordinates(params: &ParamTree<f64>, n: usize, seed: u64, include: &[&str]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (name, t) in params.iter() {
        if include.contains(&name.as_str()) {
            out.extend(offset..offset + t.numel());
        }
        offset += t.numel();
    }
    let total = params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < n.min(total) {
        let i = rng.random_range(0..total);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Compare `grads` against `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn check<F>(params: &ParamTree<f64>, grads: &ParamTree<f64>, coords: &[usize], h: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&ParamTree<f64>) -> Result<f64>,
{
    let mut p = params.clone();
    let mut out = GradCheck { coords: Vec::new(), analytic: Vec::new(), numeric: Vec::new(), max_rel_error: 0.0 };
    for &i in coords {
        let v = p.get_flat(i);
        p.set_flat(i, v + h);
        let up = f(&p)?;
        p.set_flat(i, v - h);
        let down = f(&p)?;
        p.set_flat(i, v);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get_flat(i);
        out.max_rel_error = out.max_rel_error.max(relative_error(analytic, numeric));
        out.coords.push(params.coordinate(i));
        out.analytic.push(analytic);
        out.numeric.push(numeric);
    }
    Ok(out)
}
