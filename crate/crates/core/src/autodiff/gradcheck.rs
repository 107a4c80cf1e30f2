//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Max relative error per trainable parameter name.
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Elements probed per parameter; `None` probes every element.
    pub max_elems: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_elems: Some(24),
            seed: 0,
        }
    }
}

fn run<F>(program: &F, store: &ParamStore<f64>) -> Result<(Tape<f64>, Var)>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = program(&mut tape, store)?;
    Ok((tape, loss))
}

/// Compares analytic gradients of every trainable parameter against central
/// differences. Relative error is `|a - fd| / max(1, |a|)`.
pub fn grad_check<F>(program: F, point: &ParamStore<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let (mut tape, loss) = run(&program, point)?;
    let grads = tape.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = point.clone();
    let mut report = GradCheckReport::default();
    let eval = |s: &ParamStore<f64>, name: &str| -> Result<f64> {
        let (tape, loss) = run(&program, s)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing {name}")));
        }
        Ok(v)
    };
    for id in point.ids().collect::<Vec<_>>() {
        let meta = point.meta(id).clone();
        if !meta.trainable {
            continue;
        }
        let n = meta.numel();
        let analytic = match grads.param(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("analytic gradient of {} at {i}", meta.name)));
        }
        let probe: Vec<usize> = match opts.max_elems {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for i in probe {
            let orig = store.dense(id)?.data()[i];
            store.dense_mut(id)?.data_mut()[i] = orig + opts.eps;
            let up = eval(&store, &meta.name)?;
            store.dense_mut(id)?.data_mut()[i] = orig - opts.eps;
            let down = eval(&store, &meta.name)?;
            store.dense_mut(id)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * opts.eps);
            let a = analytic[i];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
        report.per_param.insert(meta.name, worst);
    }
    Ok(report)
}
