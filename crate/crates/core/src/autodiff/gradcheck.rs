//! Central finite-difference verification of backward passes.
//!
//! The checked computation is evaluated in `f64`. Coordinates whose
//! perturbation flips the sign of any rectifier input sit on a kink of the
//! function, where a finite difference does not estimate the derivative;
//! those are replaced by other coordinates of the same parameter.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

use super::{Graph, Mode, NodeId, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-3,
            tolerance: 1e-3,
            coords_per_param: 6,
            seed: 0,
            mode: Mode::Eval,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks_skipped: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, store: &ParamStore<f64>, config: &GradcheckConfig) -> Result<(Graph<f64>, NodeId)>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::with_seed(config.mode, config.seed);
    let loss = f(&mut g, store)?;
    if let Some(layer) = g.first_stochastic_op() {
        return Err(Error::NonDeterministic(format!(
            "layer {layer} draws random numbers; switch it to eval mode before checking gradients"
        )));
    }
    Ok((g, loss))
}

/// Compare backward-computed gradients of every trainable parameter of
/// `store` against central finite differences of `f`.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, config: &GradcheckConfig, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let (g0, loss0) = evaluate(&f, store, config)?;
    let base = g0.value(loss0).item()?;
    let base_sig = g0.activation_signature();
    {
        let (g1, loss1) = evaluate(&f, store, config)?;
        if g1.value(loss1).item()?.to_bits() != base.to_bits() {
            return Err(Error::NonDeterministic(
                "two evaluations of the checked computation disagree".into(),
            ));
        }
    }
    store.zero_grad();
    g0.backward(loss0, store)?;
    drop(g0);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let h = config.step;
    let mut params = Vec::new();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let n = store.get(id).tensor.numel();
        let analytic: Vec<f64> = store.get(id).tensor.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let order: Vec<usize> = sample(&mut rng, n, n).into_vec();
        let want = config.coords_per_param.min(n);
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            kinks_skipped: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &order {
            if check.checked == want {
                break;
            }
            let original = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = original + h;
            let (gp, lp) = evaluate(&f, store, config)?;
            let plus = gp.value(lp).item()?;
            let sig_plus = gp.activation_signature();
            drop(gp);
            store.get_mut(id).tensor.data_mut()[i] = original - h;
            let (gm, lm) = evaluate(&f, store, config)?;
            let minus = gm.value(lm).item()?;
            let sig_minus = gm.activation_signature();
            drop(gm);
            store.get_mut(id).tensor.data_mut()[i] = original;
            if sig_plus != base_sig || sig_minus != base_sig {
                check.kinks_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = analytic[i];
                check.numeric = numeric;
            }
            check.checked += 1;
        }
        params.push(check);
    }
    let worst = params
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    let max_rel_error = worst.map_or(0.0, |p| p.max_rel_error);
    let worst_param = worst.map(|p| p.name.clone());
    Ok(GradcheckReport {
        passed: max_rel_error <= config.tolerance && params.iter().all(|p| p.checked > 0 || p.kinks_skipped == 0),
        params,
        max_rel_error,
        worst_param,
        tolerance: config.tolerance,
    })
}
