//! Evaluation: the negative-ELBO bound on NLL and active units.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::diffusion::VlbMode;
use crate::error::{DvpError, Result};
use crate::model::LadderVae;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Mean negative ELBO in nats per datapoint, with its decomposition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub nll: f64,
    pub recon: f64,
    pub kl: Vec<f64>,
    pub entropy: f64,
    pub l0: f64,
    pub l1: f64,
    pub lt: f64,
    pub n: usize,
    pub samples: usize,
}

/// Bound averaged over `data` and `samples` noise draws. Every pass
/// binarizes the images afresh; all draws derive from `seed`, so the
/// result depends only on `(seed, samples, batch)`.
pub fn eval_nll_bound<T: Real>(
    model: &LadderVae<T>,
    data: &Dataset,
    samples: usize,
    seed: u64,
    batch: usize,
) -> Result<NllReport> {
    if data.is_empty() || samples == 0 || batch == 0 {
        return Err(DvpError::usage("evaluation needs data, samples and a batch size"));
    }
    let n = data.len();
    let mut out = NllReport {
        kl: vec![0.0; model.config().layers()],
        n,
        samples,
        ..NllReport::default()
    };
    let w_total = (n * samples) as f64;
    for rep in 0..samples as u64 {
        let mut bin_rng = Rng::derived(seed, 1000 + 2 * rep);
        let mut noise_rng = Rng::derived(seed, 1001 + 2 * rep);
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
            let x = data.binarized_batch::<T>(&idx, &mut bin_rng);
            let r = model.evaluate(&x, &mut noise_rng, VlbMode::Full)?;
            let w = idx.len() as f64 / w_total;
            out.nll -= r.per_sample_elbo.iter().sum::<f64>() / w_total;
            out.recon += w * r.recon;
            for (a, b) in out.kl.iter_mut().zip(&r.kl) {
                *a += w * b;
            }
            out.entropy += w * r.entropy;
            out.l0 += w * r.l0;
            out.l1 += w * r.l1;
            out.lt += w * r.lt;
            start += batch;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuReport {
    /// Per layer, the variance across the dataset of each latent
    /// dimension's expected posterior mean.
    pub activity: Vec<Vec<f64>>,
    pub delta: f64,
    /// Fraction of all latent dimensions with activity above `delta`.
    pub au: f64,
    pub per_layer: Vec<f64>,
}

/// Active units of a model; see [`active_units_with`].
pub fn active_units<T: Real>(
    model: &LadderVae<T>,
    data: &Dataset,
    delta: f64,
    chains: usize,
    seed: u64,
) -> Result<AuReport> {
    active_units_with(data, delta, chains, seed, |x, rng| model.posterior_means(x, rng))
}

/// Stream key of an image, so its noise does not depend on dataset order.
fn image_key(bytes: &[u8]) -> u64 {
    let h = Sha256::digest(bytes);
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Active units from any map of one binary image `[1, c, D, D]` to
/// per-layer posterior means `[1, ...]`. Each image is binarized once; the inner expectation
/// averages `chains` independent posterior passes. All noise for an image
/// is derived from `seed` and its content, which makes the result
/// independent of dataset order.
pub fn active_units_with<T, F>(data: &Dataset, delta: f64, chains: usize, seed: u64, mut means: F) -> Result<AuReport>
where
    T: Real,
    F: FnMut(&Tensor<T>, &mut Rng) -> Result<Vec<Tensor<T>>>,
{
    if data.is_empty() {
        return Err(DvpError::usage("active units need a non-empty dataset"));
    }
    if chains == 0 || !(delta >= 0.0) {
        return Err(DvpError::usage("active units need chains > 0 and delta >= 0"));
    }
    let n = data.len();
    // Per layer: one row of expected means per datapoint.
    let mut expected: Vec<Vec<f64>> = Vec::new();
    let mut dims: Vec<usize> = Vec::new();
    for i in 0..n {
        let key = image_key(data.image_bytes(i));
        let mut bin_rng = Rng::derived(seed ^ key, 1);
        let mut chain_rng = Rng::derived(seed ^ key, 2);
        let x = data.binarized_batch::<T>(&[i], &mut bin_rng);
        let mut acc: Vec<Vec<f64>> = Vec::new();
        for _ in 0..chains {
            let ms = means(&x, &mut chain_rng)?;
            if acc.is_empty() {
                acc = ms.iter().map(|m| vec![0.0; m.len()]).collect();
            }
            if ms.len() != acc.len() {
                return Err(DvpError::dim("active units", "layer count changed between chains"));
            }
            for (a, m) in acc.iter_mut().zip(&ms) {
                if m.len() != a.len() || m.shape().first() != Some(&1) {
                    return Err(DvpError::dim("active units", format!("posterior means {:?}", m.shape())));
                }
                for (s, v) in a.iter_mut().zip(m.data()) {
                    *s += v.as_f64() / chains as f64;
                }
            }
        }
        if expected.is_empty() {
            dims = acc.iter().map(|a| a.len()).collect();
            expected = vec![Vec::with_capacity(n * dims.iter().max().unwrap_or(&0)); acc.len()];
        }
        for (e, a) in expected.iter_mut().zip(acc) {
            e.extend(a);
        }
    }

    let mut activity = Vec::with_capacity(dims.len());
    for (e, &m) in expected.iter().zip(&dims) {
        let mut var = vec![0.0; m];
        for (j, v) in var.iter_mut().enumerate() {
            let mean = (0..n).map(|i| e[i * m + j]).sum::<f64>() / n as f64;
            *v = (0..n).map(|i| (e[i * m + j] - mean).powi(2)).sum::<f64>() / n as f64;
        }
        activity.push(var);
    }
    let per_layer: Vec<f64> = activity
        .iter()
        .map(|a| a.iter().filter(|&&v| v > delta).count() as f64 / a.len().max(1) as f64)
        .collect();
    let total: usize = activity.iter().map(|a| a.len()).sum();
    let active: usize = activity.iter().map(|a| a.iter().filter(|&&v| v > delta).count()).sum();
    Ok(AuReport {
        activity,
        delta,
        au: active as f64 / total.max(1) as f64,
        per_layer,
    })
}
