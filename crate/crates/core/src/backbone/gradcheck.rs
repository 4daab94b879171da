use super::graph::Graph;
use super::model::TtsModel;
use super::params::GroupSet;
use crate::error::{Error, Result};
use crate::numerics::{GradCheckOptions, GradCheckReport, Var};

/// Central finite-difference check of a model loss with respect to every
/// parameter in `groups`. `worst` reports `(parameter index, coordinate)`.
pub fn check_param_gradients<F>(
    model: &TtsModel,
    groups: GroupSet,
    loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&TtsModel, &mut Graph) -> Result<Var>,
{
    let eval = |m: &TtsModel| -> Result<f64> {
        let mut g = Graph::inference(m.params());
        let out = loss(m, &mut g)?;
        let v = g.tape.value(out);
        if v.numel() != 1 {
            return Err(Error::Contract(format!("gradient check needs a scalar loss, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    };
    let base = eval(model)?;
    if base.to_bits() != eval(model)?.to_bits() {
        return Err(Error::NonDeterministic("repeated loss evaluation differs".into()));
    }

    let mut g = Graph::new(model.params(), groups);
    let out = loss(model, &mut g)?;
    g.tape.backward(out)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
    for (id, grad) in g.param_grads() {
        analytic[id.0] = Some(grad.to_vec());
    }
    drop(g);

    let mut report =
        GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: (0, 0), checked: 0, passed: true };
    let mut probe = model.clone();
    for (p, entry) in model.params().entries().iter().enumerate() {
        if !groups.contains(entry.group) {
            continue;
        }
        let n = entry.tensor.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let id = super::params::ParamId(p);
            let orig = entry.tensor.data()[idx];
            probe.params_mut().tensor_mut(id).data_mut()[idx] = orig + opts.h;
            let plus = eval(&probe)?;
            probe.params_mut().tensor_mut(id).data_mut()[idx] = orig - opts.h;
            let minus = eval(&probe)?;
            probe.params_mut().tensor_mut(id).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[p].as_ref().map_or(0.0, |g| g[idx]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (p, idx);
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
