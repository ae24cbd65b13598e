//! Central-difference gradient checking for anything built on [`Ctx`].

use crate::autodiff::{Tape, Var};
use crate::error::{Result, VistaError};
use crate::param::{Ctx, ParamStore, Role};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(1.0)
}

fn eval_scalar(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let x = tape.value(v).data()[0];
    if !x.is_finite() {
        return Err(VistaError::numeric("grad_check: objective is not finite"));
    }
    Ok(x)
}

/// Compare analytic gradients of `f` with respect to every trainable,
/// unfrozen parameter whose role is in `roles` against central differences
/// with step `h`. Up to `per_tensor` coordinates are sampled per tensor.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    roles: &[Role],
    f: F,
    h: f64,
    per_tensor: usize,
    rng: &mut RngStream,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(VistaError::Config(format!("grad_check step {h} outside [1e-4, 1e-2]")));
    }
    let analytic = {
        let mut ctx = Ctx::training(store, roles);
        let loss = f(&mut ctx)?;
        eval_scalar(&ctx.tape, loss)?;
        ctx.backward(loss)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::inference(store);
        let loss = f(&mut ctx)?;
        eval_scalar(&ctx.tape, loss)
    };
    let targets: Vec<_> = store
        .iter()
        .filter(|(_, p)| roles.contains(&p.role) && !p.frozen)
        .map(|(id, _)| id)
        .collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for id in targets {
        let n = store.get(id).value.len();
        let grad = analytic
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()));
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.below(n)).collect()
        };
        for c in coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = rel_err(grad.data()[c], fd);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((store.get(id).name.clone(), c));
                }
            }
        }
    }
    Ok(report)
}

/// Gradient check of `f` with respect to plain input tensors.
pub fn grad_check_inputs<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor<f64>], grad: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        eval_scalar(&tape, out)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = run(inputs, true)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for c in 0..inputs[i].len() {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let (tp, _, op) = run(&work, false)?;
            work[i].data_mut()[c] = orig - h;
            let (tm, _, om) = run(&work, false)?;
            work[i].data_mut()[c] = orig;
            let fd = (tp.value(op).data()[0] - tm.value(om).data()[0]) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[c], fd));
        }
    }
    Ok(worst)
}
