//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::param::{ParamGroup, ParamId};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor, chosen with `seed`.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

fn eval<F>(loss_fn: &F, params: &ParamGroup) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new(params);
    let out = loss_fn(&mut tape)?;
    let v = tape.value(out).scalar();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("loss"));
    }
    Ok(v)
}

/// Compares the tape gradient of `loss_fn` with central differences for every
/// (or a sampled subset of every) parameter coordinate. The relative error of
/// one coordinate is `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(
    loss_fn: F,
    params: &ParamGroup,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(TensorError::Invalid(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.step
        )));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let out = loss_fn(&mut tape)?;
        if !tape.value(out).scalar().is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        tape.backward(out)?.into_params()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let ad = analytic.dense(id);
        let n = ad.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + opts.step;
            let plus = eval(&loss_fn, &work)?;
            work.get_mut(id).data_mut()[j] = orig - opts.step;
            let minus = eval(&loss_fn, &work)?;
            work.get_mut(id).data_mut()[j] = orig;

            let fd = (plus - minus) / (2.0 * opts.step);
            let err = (ad[j] - fd).abs() / 1f64.max(ad[j].abs()).max(fd.abs());
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
