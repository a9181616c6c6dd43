use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{evaluate, Dataset};
use crate::error::{Error, Result};
use crate::model::SretModel;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, Tensor};

/// Mean eval loss on a `grid × grid` lattice around the current weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    /// Offsets along each direction, from `-radius` to `radius`.
    pub coords: Vec<f64>,
    /// `loss[i][j]` at `θ + coords[i]·d₁ + coords[j]·d₂`.
    pub loss: Vec<Vec<f64>>,
}

/// A random direction scaled so each weight tensor's direction has the same
/// norm as the tensor itself. Vectors (biases, norm gains, coefficients) are
/// left unperturbed.
fn filter_normalized<T: Scalar>(model: &SretModel<T>, rng: &mut ChaCha8Rng) -> Vec<(ParamId, Tensor<T>)> {
    let ids: Vec<_> = model.store.trainable().collect();
    ids.into_iter()
        .filter(|&id| model.store.get(id).rank() >= 2)
        .map(|id| {
            let w = model.store.get(id);
            let d: Tensor<f64> = Tensor::from_fn(w.shape(), |_| StandardNormal.sample(rng));
            let scale = w.l2_norm().to_f64_lossy() / d.l2_norm().max(f64::MIN_POSITIVE);
            (id, d.map(|v| v * scale).cast())
        })
        .collect()
}

/// Evaluates the loss surface spanned by two filter-normalized random
/// directions. `grid` must be odd so the centre cell is the unperturbed model.
pub fn landscape_slice<T: Scalar>(
    model: &SretModel<T>,
    data: &Dataset<T>,
    radius: f64,
    grid: usize,
    seed: u64,
) -> Result<Landscape> {
    if grid == 0 || grid.is_multiple_of(2) {
        return Err(Error::config(format!("landscape grid must be odd, got {grid}")));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::config("landscape radius must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = filter_normalized(model, &mut rng);
    let d2 = filter_normalized(model, &mut rng);
    let half = (grid / 2) as f64;
    let coords: Vec<f64> = (0..grid)
        .map(|i| if half == 0.0 { 0.0 } else { radius * (i as f64 - half) / half })
        .collect();
    let mut probe = model.clone();
    let mut loss = vec![vec![0.0; grid]; grid];
    for (i, &a) in coords.iter().enumerate() {
        for (j, &b) in coords.iter().enumerate() {
            for ((id, u), (_, v)) in d1.iter().zip(&d2) {
                let base = model.store.get(*id);
                let t = probe.store.get_mut(*id);
                if a == 0.0 && b == 0.0 {
                    t.data_mut().copy_from_slice(base.data());
                    continue;
                }
                let (a, b) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
                for (((p, &w), &du), &dv) in t.data_mut().iter_mut().zip(base.data()).zip(u.data()).zip(v.data()) {
                    *p = w + a * du + b * dv;
                }
            }
            let (_, l) = evaluate(&probe, data, 64)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at ({a}, {b})")));
            }
            loss[i][j] = l;
        }
    }
    Ok(Landscape { coords, loss })
}

/// One CSV row per first-direction offset; the header lists the second.
pub fn landscape_to_csv(l: &Landscape) -> String {
    let mut out = String::from("a\\b");
    for b in &l.coords {
        let _ = write!(out, ",{b}");
    }
    out.push('\n');
    for (a, row) in l.coords.iter().zip(&l.loss) {
        let _ = write!(out, "{a}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
