//! Central finite-difference verification of the reverse sweep.

use rand::Rng;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Step used when callers have no reason to pick another.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The perturbation flipped a ReLU, so the difference quotient straddles
    /// a kink and says nothing about the derivative.
    pub crosses_kink: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    /// Coordinates where the difference quotient is a valid derivative estimate.
    pub fn smooth(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| !c.crosses_kink)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.smooth()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `loss_fn` at the current parameters against
/// central differences `(L(θ+h) − L(θ−h)) / 2h` on each listed coordinate.
///
/// `loss_fn` must be a deterministic function of the store: any sampling it
/// does has to be reseeded on every call. Coordinates whose perturbation
/// changes the ReLU sign pattern are flagged and left out of the maximum.
pub fn grad_check_finite_diff<F>(
    store: &mut ParamStore<f64>,
    coords: &[(ParamId, usize)],
    h: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::config(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    let (analytic, pattern) = {
        let tape = Tape::new();
        let loss = loss_fn(&tape, store)?;
        let pattern = tape.activation_pattern();
        let grads = tape.backward(loss)?;
        let analytic = coords
            .iter()
            .map(|&(p, i)| grads.param(p).map_or(0.0, |g| g.data()[i]))
            .collect::<Vec<_>>();
        (analytic, pattern)
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<(f64, bool)> {
        let tape = Tape::new();
        let v = loss_fn(&tape, store)?.value().item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss during finite differences".into()));
        }
        Ok((v, tape.activation_pattern() != pattern))
    };
    let mut out = Vec::with_capacity(coords.len());
    for (&(p, i), &a) in coords.iter().zip(&analytic) {
        let orig = store.get(p).data()[i];
        store.get_mut(p).data_mut()[i] = orig + h;
        let up = eval(store);
        store.get_mut(p).data_mut()[i] = orig - h;
        let down = eval(store);
        store.get_mut(p).data_mut()[i] = orig;
        let ((up, kink_up), (down, kink_down)) = (up?, down?);
        let numeric = (up - down) / (2.0 * h);
        out.push(CoordCheck {
            param: p,
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
            crosses_kink: kink_up || kink_down,
        });
    }
    let max_rel_error = out
        .iter()
        .filter(|c| !c.crosses_kink)
        .map(|c| c.rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        coords: out,
    })
}

/// Picks `per_param` random coordinates from every trainable tensor that
/// `filter` accepts.
pub fn sample_coords<R: Rng + ?Sized>(
    store: &ParamStore<f64>,
    per_param: usize,
    rng: &mut R,
    mut filter: impl FnMut(&str) -> bool,
) -> Vec<(ParamId, usize)> {
    let mut coords = Vec::new();
    for id in store.trainable() {
        let entry = store.entry(id);
        if !filter(&entry.name) {
            continue;
        }
        let n = entry.value.len();
        if n <= per_param {
            coords.extend((0..n).map(|i| (id, i)));
        } else {
            coords.extend((0..per_param).map(|_| (id, rng.random_range(0..n))));
        }
    }
    coords
}
