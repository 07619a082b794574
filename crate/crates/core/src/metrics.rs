//! SDR, SI-SDR, their improvement variants, and the negative-SI-SDR
//! training loss with its analytic gradient.
//!
//! All computation is in double precision. Both sides of the energy ratio
//! carry a floor of 1e-12 times the estimate energy before the log, and the
//! result is clamped to +-100 dB. Scaling the floor with the estimate keeps
//! SI-SDR exactly scale invariant while still saturating perfect
//! reconstructions; this is part of the bit-exact metric contract.

use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Saturation cap for degenerate reconstructions, in dB.
pub const DB_CAP: f64 = 100.0;

/// Relative floor added to both sides of the energy ratio before the log.
pub const RATIO_FLOOR: f64 = 1e-12;

/// Per-example metric report, all values in decibels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub sdr_db: f64,
    pub si_sdr_db: f64,
    pub sdri_db: f64,
    pub si_sdri_db: f64,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "example_id,sdr,si_sdr,sdri,si_sdri"
    }

    pub fn csv_row(&self, example_id: &str) -> String {
        format!(
            "{example_id},{:.6},{:.6},{:.6},{:.6}",
            self.sdr_db, self.si_sdr_db, self.sdri_db, self.si_sdri_db
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            context: "metrics: signal lengths",
            expected: reference.len(),
            got: est.len(),
        });
    }
    if reference.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroReference);
    }
    Ok(())
}

fn ratio_db(num: f64, den: f64, floor: f64) -> f64 {
    if floor == 0.0 && num == 0.0 && den == 0.0 {
        // Identically zero estimate against SI-SDR: no signal at all.
        return -DB_CAP;
    }
    let v = 10.0 * ((num + floor) / (den + floor)).log10();
    v.clamp(-DB_CAP, DB_CAP)
}

/// Signal-to-distortion ratio: reference energy over error energy, in dB.
pub fn sdr_db(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(est, reference)?;
    let sig = dot(reference, reference);
    let err: f64 = reference
        .iter()
        .zip(est)
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    Ok(ratio_db(sig, err, RATIO_FLOOR * dot(est, est)))
}

/// Scale-invariant SDR: the estimate is compared against the reference
/// rescaled by the projection coefficient `alpha = <est, ref> / ||ref||^2`.
pub fn si_sdr_db(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(est, reference)?;
    let ref_energy = dot(reference, reference);
    let alpha = dot(est, reference) / ref_energy;
    let sig = alpha * alpha * ref_energy;
    let err: f64 = reference
        .iter()
        .zip(est)
        .map(|(r, e)| {
            let d = alpha * r - e;
            d * d
        })
        .sum();
    Ok(ratio_db(sig, err, RATIO_FLOOR * dot(est, est)))
}

/// SDR, SI-SDR and their improvements over the unprocessed mixture.
pub fn compute_metrics(
    est: &Waveform,
    mixture: &Waveform,
    reference: &Waveform,
) -> Result<MetricReport> {
    if mixture.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            context: "metrics: mixture length",
            expected: reference.len(),
            got: mixture.len(),
        });
    }
    let sdr = sdr_db(&est.samples, &reference.samples)?;
    let si_sdr = si_sdr_db(&est.samples, &reference.samples)?;
    let sdr_mix = sdr_db(&mixture.samples, &reference.samples)?;
    let si_sdr_mix = si_sdr_db(&mixture.samples, &reference.samples)?;
    Ok(MetricReport {
        sdr_db: sdr,
        si_sdr_db: si_sdr,
        sdri_db: sdr - sdr_mix,
        si_sdri_db: si_sdr - si_sdr_mix,
    })
}

/// Negative SI-SDR loss and its exact gradient with respect to every
/// estimate sample.
///
/// When the metric sits at a saturation clamp the loss is locally constant
/// and the gradient is zero.
pub fn loss_and_grad(est: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(est, reference)?;
    let ref_energy = dot(reference, reference);
    let est_energy = dot(est, est);
    let alpha = dot(est, reference) / ref_energy;
    let residual: Vec<f64> = reference
        .iter()
        .zip(est)
        .map(|(r, e)| alpha * r - e)
        .collect();
    let floor = RATIO_FLOOR * est_energy;
    let num = alpha * alpha * ref_energy + floor;
    let den = dot(&residual, &residual) + floor;

    if est_energy == 0.0 {
        return Ok((DB_CAP, vec![0.0; est.len()]));
    }
    let val = 10.0 * (num / den).log10();
    if val >= DB_CAP || val <= -DB_CAP {
        return Ok((-val.clamp(-DB_CAP, DB_CAP), vec![0.0; est.len()]));
    }

    // num = alpha^2 ||r||^2 + f ||e||^2 : grad = 2 alpha r + 2 f e
    // den = ||alpha r - e||^2 + f ||e||^2 : grad = -2 residual + 2 f e
    // (the residual is orthogonal to the reference, so alpha's contribution
    // to the denominator term vanishes).
    let scale = 10.0 / std::f64::consts::LN_10;
    let grad: Vec<f64> = reference
        .iter()
        .zip(&residual)
        .zip(est)
        .map(|((r, d), e)| {
            let dnum = 2.0 * alpha * r + 2.0 * RATIO_FLOOR * e;
            let dden = -2.0 * d + 2.0 * RATIO_FLOOR * e;
            -scale * (dnum / num - dden / den)
        })
        .collect();
    Ok((-val, grad))
}
