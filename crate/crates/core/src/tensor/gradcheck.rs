//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{BatchNormMode, GradStore, Graph, ParamStore, RunningStats, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation relative to the value scale: `h = step · max(|θ|, 1)`.
    pub step: f64,
    /// Check at most this many coordinates per parameter tensor.
    pub max_coords_per_param: Option<usize>,
    /// Lower bound on the denominator of the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: None,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compare the analytic gradient of the scalar built by `loss` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every checked coordinate.
pub fn grad_check<F>(params: &ParamStore<f64>, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> FnMut(&mut Graph<'g, f64>) -> Result<Var>,
{
    let mut analytic = GradStore::zeros_like(params);
    {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l, &mut analytic)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut entries = Vec::new();
    let eval = |store: &ParamStore<f64>, loss: &mut F| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };
    for id in params.ids() {
        let n = params.get(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for &i in &coords {
            let x0 = params.get(id).data()[i];
            let h = opts.step * x0.abs().max(1.0);
            work.get_mut(id).data_mut()[i] = x0 + h;
            let fp = eval(&work, &mut loss)?;
            work.get_mut(id).data_mut()[i] = x0 - h;
            let fm = eval(&work, &mut loss)?;
            work.get_mut(id).data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(id).data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.abs_floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            checked: coords.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
    })
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values in `±[0.1, 1)`, away from the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Gradient checks of every differentiable operation, each reduced to a
/// scalar through a random linear functional.
pub fn operation_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (groups, k) in [(1, 1), (1, 3), (2, 3), (4, 3), (1, 5)] {
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[2, 4, 5, 5], &mut rng))?;
        let w = s.add("w", uniform(&[4, 4 / groups, k, k], &mut rng))?;
        let b = s.add("b", uniform(&[4], &mut rng))?;
        let r = uniform(&[2, 4, 5, 5], &mut rng);
        let report = grad_check(
            &s,
            |g| {
                let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b));
                let y = g.conv2d(xv, wv, Some(bv), groups, (k - 1) / 2)?;
                let rv = g.input(r.clone());
                let p = g.mul(y, rv)?;
                Ok(g.sum(p))
            },
            opts,
        )?;
        out.push((format!("conv2d k={k} groups={groups}"), report));
    }

    let mut s = ParamStore::new();
    let x = s.add("x", uniform(&[3, 2, 4, 4], &mut rng))?;
    let ga = s.add("gamma", uniform(&[2], &mut rng))?;
    let be = s.add("beta", uniform(&[2], &mut rng))?;
    let r = uniform(&[3, 2, 4, 4], &mut rng);
    let running = RunningStats::from_parts(vec![0.3, -0.2], vec![1.5, 0.7]);
    for train in [true, false] {
        let report = grad_check(
            &s,
            |g| {
                let (xv, gv, bv) = (g.param(x), g.param(ga), g.param(be));
                let mode = if train {
                    BatchNormMode::Train {
                        running: None,
                        momentum: 0.1,
                    }
                } else {
                    BatchNormMode::Eval { running: &running }
                };
                let y = g.batch_norm(xv, gv, bv, mode, 1e-5)?;
                let rv = g.input(r.clone());
                let p = g.mul(y, rv)?;
                Ok(g.sum(p))
            },
            opts,
        )?;
        let mode = if train { "train" } else { "eval" };
        out.push((format!("batch_norm {mode}"), report));
    }

    type Unary = fn(&mut Graph<'_, f64>, Var) -> Var;
    let unary: [(&str, Unary); 4] = [
        ("relu", |g, x| g.relu(x)),
        ("exp", |g, x| g.exp(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("scale", |g, x| g.scale(x, -0.7)),
    ];
    for (name, op) in unary {
        let mut s = ParamStore::new();
        let x = s.add("x", off_kink(&[2, 3, 3, 3], &mut rng))?;
        let r = uniform(&[2, 3, 3, 3], &mut rng);
        let report = grad_check(
            &s,
            |g| {
                let xv = g.param(x);
                let y = op(g, xv);
                let rv = g.input(r.clone());
                let p = g.mul(y, rv)?;
                Ok(g.sum(p))
            },
            opts,
        )?;
        out.push((name.to_string(), report));
    }

    let mut s = ParamStore::new();
    let a = s.add("a", uniform(&[2, 3, 3, 3], &mut rng))?;
    let b = s.add("b", uniform(&[2, 3, 3, 3], &mut rng))?;
    let c = s.add("c", uniform(&[2, 2, 3, 3], &mut rng))?;
    let r = uniform(&[2, 5, 3, 3], &mut rng);
    let report = grad_check(
        &s,
        |g| {
            let (av, bv, cv) = (g.param(a), g.param(b), g.param(c));
            let sum = g.add(av, bv)?;
            let prod = g.mul(sum, av)?;
            let cat = g.concat_channels(&[prod, cv])?;
            let rv = g.input(r.clone());
            let p = g.mul(cat, rv)?;
            Ok(g.sum(p))
        },
        opts,
    )?;
    out.push(("add/mul/concat_channels/sum".to_string(), report));

    let mut s = ParamStore::new();
    let x = s.add("x", uniform(&[2, 5, 3, 3], &mut rng))?;
    let r = uniform(&[2, 2, 3, 3], &mut rng);
    let report = grad_check(
        &s,
        |g| {
            let xv = g.param(x);
            let y = g.slice_channels(xv, 2, 2)?;
            let rv = g.input(r.clone());
            let p = g.mul(y, rv)?;
            Ok(g.sum(p))
        },
        opts,
    )?;
    out.push(("slice_channels".to_string(), report));

    let mut s = ParamStore::new();
    let mu = s.add("mu", uniform(&[2, 5, 3, 3], &mut rng))?;
    let lv = s.add("s", uniform(&[2, 5, 3, 3], &mut rng))?;
    let targets = uniform(&[2, 5, 3, 3], &mut rng);
    let mut mask: Vec<bool> = (0..18).map(|_| rng.random_bool(0.7)).collect();
    mask[0] = true;
    let report = grad_check(
        &s,
        |g| {
            let (m, v) = (g.param(mu), g.param(lv));
            g.gaussian_nll(m, v, targets.clone(), mask.clone(), 10.0)
        },
        opts,
    )?;
    out.push(("gaussian_nll".to_string(), report));
    Ok(out)
}

