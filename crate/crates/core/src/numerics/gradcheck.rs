use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of sampled coordinates; every coordinate is checked when the
    /// store holds fewer.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples: 100,
            seed: 0,
        }
    }
}

/// Compares backward-pass gradients of `loss` against central differences
/// and returns the max of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(params: &mut ParamStore, loss: F, cfg: GradCheckConfig) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(params);
        let out = loss(&mut g)?;
        let grads = g.backward(out)?;
        params
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; params.get(id).len()])
            })
            .collect()
    };

    let coords = sample_coordinates(params, cfg.samples, cfg.seed);
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let out = loss(&mut g)?;
        Ok(g.scalar(out))
    };

    let mut worst = 0.0_f64;
    for (id, j) in coords {
        let original = params.get(id).data()[j];
        params.get_mut(id).data_mut()[j] = original + cfg.step;
        let plus = eval(params)?;
        params.get_mut(id).data_mut()[j] = original - cfg.step;
        let minus = eval(params)?;
        params.get_mut(id).data_mut()[j] = original;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[id.index()][j];
        let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

fn sample_coordinates(params: &ParamStore, samples: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.get(id).len()).map(move |j| (id, j)))
        .collect();
    if all.len() <= samples {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = params.ids().filter(|&id| !params.get(id).is_empty()).collect();
    (0..samples)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            (id, rng.gen_range(0..params.get(id).len()))
        })
        .collect()
}
