//! Central-finite-difference verification of analytic gradients.
//! Runs in f64; the forward path under test is the same generic code that
//! trains in f32.

use super::data::TensorData;
use super::tape::{ParamContainer, Tape, Tensor};
use crate::error::{CaptError, Result};

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn relative_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of `f` w.r.t. `theta` and
/// central finite differences, checked at every coordinate.
///
/// `f` must build a scalar loss on the given tape from the leased input.
pub fn grad_check<F>(f: F, theta: &TensorData<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Tensor<f64>) -> Result<Tensor<f64>>,
{
    let mut tape = Tape::new();
    let x = tape.input(theta)?;
    let node = x.node();
    let loss = f(&mut tape, x)?;
    if loss.numel() != 1 {
        return Err(CaptError::invalid("grad_check", "f must produce a scalar"));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<f64> =
        grads.by_node(node).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; theta.numel()]);

    let eval = |t: &TensorData<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(t)?;
        let loss = f(&mut tape, x)?;
        Ok(loss.scalar())
    };

    let mut probe = theta.clone();
    let mut max_err = 0.0f64;
    for i in 0..probe.numel() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.as_mut_slice()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.as_mut_slice()[i] = orig;
        let cd = (fp - fm) / (2.0 * eps);
        max_err = max_err.max(relative_err(analytic[i], cd));
    }
    Ok(max_err)
}

/// One row of a parameter-level gradient check.
#[derive(Clone, Debug)]
pub struct GradRow {
    pub name: String,
    pub max_rel_err: f64,
}

/// Gradient-check every parameter of a block or model against central
/// finite differences of `eval`, which must build the same scalar loss
/// each time it is called.
///
/// `coord_cap` bounds the number of coordinates probed per parameter
/// (deterministic stride over the buffer); pass `usize::MAX` to probe all.
pub fn grad_check_container<C, F>(
    container: &mut C,
    eval: F,
    eps: f64,
    coord_cap: usize,
) -> Result<Vec<GradRow>>
where
    C: ParamContainer<f64>,
    F: Fn(&C, &mut Tape<f64>) -> Result<Tensor<f64>>,
{
    let (names, analytic) = {
        let mut tape = Tape::new();
        let loss = eval(&*container, &mut tape)?;
        if loss.numel() != 1 {
            return Err(CaptError::invalid("grad_check_container", "eval must produce a scalar"));
        }
        let grads = tape.backward(&loss)?;
        let mut names = Vec::new();
        let mut analytic = Vec::new();
        container.visit("", &mut |name, p| {
            names.push(name.to_string());
            analytic.push(grads.param_grad_or_zeros(p));
        });
        (names, analytic)
    };

    let value_of = |c: &C, eval: &F| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = eval(c, &mut tape)?;
        Ok(loss.scalar())
    };

    let set = |c: &mut C, pi: usize, coord: usize, v: f64| {
        let mut k = 0;
        c.visit_mut(&mut |p| {
            if k == pi {
                p.value.as_mut_slice()[coord] = v;
            }
            k += 1;
        });
    };
    let get = |c: &mut C, pi: usize, coord: usize| -> f64 {
        let mut k = 0;
        let mut out = 0.0;
        c.visit_mut(&mut |p| {
            if k == pi {
                out = p.value.as_slice()[coord];
            }
            k += 1;
        });
        out
    };

    let mut rows = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let numel = analytic[pi].len();
        let stride = numel.div_ceil(coord_cap.min(numel)).max(1);
        let mut max_err = 0.0f64;
        let mut coord = 0;
        while coord < numel {
            let orig = get(container, pi, coord);
            set(container, pi, coord, orig + eps);
            let fp = value_of(container, &eval)?;
            set(container, pi, coord, orig - eps);
            let fm = value_of(container, &eval)?;
            set(container, pi, coord, orig);
            let cd = (fp - fm) / (2.0 * eps);
            max_err = max_err.max(relative_err(analytic[pi][coord], cd));
            coord += stride;
        }
        rows.push(GradRow { name: name.clone(), max_rel_err: max_err });
    }
    Ok(rows)
}
