//! Gaussian self-test and the Fisher-divergence comparison of raw fields and residuals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use flexdiff_core::theory::{
    collect_patches, fisher_curve, hessian_covariance_check, prop1_check, rms,
    top_eigen_covariance, FisherCurve, FisherSource, Prior, Prop1Method,
};
use flexdiff_core::{Error, Field, NoiseSchedule, Result};

use crate::config::TheoryConfig;

pub const IDENTITY_TOL: f64 = 1e-10;
pub const MC_TOL: f64 = 0.02;
pub const PROP1_T: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const HESSIAN_T: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Scale applied to each patch set before noising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherUnits {
    /// Values as stored.
    Physical,
    /// Each source divided by its own rms.
    PerSource,
    /// Every source divided by the raw-field rms.
    RawScale,
    /// Every source divided by one residual scale (rms of SR and FC residuals pooled),
    /// the same constant normalization a model trained on residuals sees.
    #[default]
    ResidualScale,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianRow {
    pub check: &'static str,
    pub prior_var: f64,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub error: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSelfTest {
    pub rows: Vec<GaussianRow>,
    /// The velocity-gradient bound as printed, per Hessian case.
    pub printed_bound: Vec<bool>,
}

impl GaussianSelfTest {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn printed_bound_holds(&self) -> bool {
        self.printed_bound.iter().all(|&b| b)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("check,prior_var,t,lhs,rhs,error,tol,pass\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.15e},{:.15e},{:.3e},{:.0e},{}",
                r.check, r.prior_var, r.t, r.lhs, r.rhs, r.error, r.tol, r.pass
            )
            .unwrap();
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Velocity/Fisher identity (quadrature and Monte Carlo) and the Hessian-covariance
/// identity with its velocity-gradient bound, all on Gaussian priors.
pub fn gaussian_self_test(
    cfg: &TheoryConfig,
    schedule: &NoiseSchedule,
) -> Result<GaussianSelfTest> {
    let mut rows = Vec::new();
    let mut printed_bound = Vec::new();
    for &var in &cfg.prior_vars {
        let prior = Prior::Gaussian { var };
        let exact = prop1_check(&prior, &PROP1_T, schedule, Prop1Method::Analytic)?;
        let mc = prop1_check(
            &prior,
            &PROP1_T,
            schedule,
            Prop1Method::MonteCarlo {
                n: cfg.mc_samples,
                seed: cfg.seed,
            },
        )?;
        for (check, rep, tol) in [
            ("velocity_fisher", &exact, IDENTITY_TOL),
            ("velocity_fisher_mc", &mc, MC_TOL),
        ] {
            for r in &rep.rows {
                rows.push(GaussianRow {
                    check,
                    prior_var: var,
                    t: r.t,
                    lhs: r.lhs,
                    rhs: r.rhs,
                    error: r.discrepancy,
                    tol,
                    pass: r.discrepancy < tol,
                });
            }
        }
        for &t in &HESSIAN_T {
            let h = hessian_covariance_check(var, t, schedule)?;
            rows.push(GaussianRow {
                check: "hessian_covariance",
                prior_var: var,
                t,
                lhs: h.hessian_corrected,
                rhs: h.hessian_true,
                error: h.identity_error,
                tol: IDENTITY_TOL,
                pass: h.identity_error < IDENTITY_TOL,
            });
            rows.push(GaussianRow {
                check: "velocity_gradient_bound",
                prior_var: var,
                t,
                lhs: h.grad_v.abs(),
                rhs: h.bound_corrected,
                error: (h.grad_v.abs() - h.bound_corrected).max(0.0),
                tol: 0.0,
                pass: h.bound_corrected_holds,
            });
            printed_bound.push(h.bound_holds);
        }
    }
    Ok(GaussianSelfTest {
        rows,
        printed_bound,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig7Analog {
    pub units: FisherUnits,
    pub raw: FisherCurve,
    pub sr: FisherCurve,
    pub fc: FisherCurve,
    pub rms: [f64; 3],
    /// Top covariance eigenvalue of small patches (physical units): raw, SR, FC.
    pub eigen: [f64; 3],
    pub snapshots: usize,
}

impl Fig7Analog {
    /// Whether `curve` lies below the raw curve at every grid point `t <= t_max`.
    pub fn below_raw(&self, curve: &FisherCurve, t_max: f64) -> bool {
        curve
            .t_grid
            .iter()
            .zip(curve.d_f.iter().zip(&self.raw.d_f))
            .filter(|(t, _)| **t <= t_max)
            .all(|(_, (r, raw))| r < raw)
    }

    pub fn eigen_ratio(&self) -> f64 {
        self.eigen[0] / self.eigen[1].max(self.eigen[2])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("t,d_f_raw,d_f_sr,d_f_fc,scaled_raw,scaled_sr,scaled_fc\n");
        for i in 0..self.raw.t_grid.len() {
            writeln!(
                s,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                self.raw.t_grid[i],
                self.raw.d_f[i],
                self.sr.d_f[i],
                self.fc.d_f[i],
                self.raw.scaled[i],
                self.sr.scaled[i],
                self.fc.scaled[i]
            )
            .unwrap();
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn report(&self) -> BTreeMap<String, serde_json::Value> {
        let mut m = BTreeMap::new();
        m.insert("units".into(), json!(self.units));
        m.insert("snapshots".into(), json!(self.snapshots));
        m.insert("samples_per_curve".into(), json!(self.raw.n_samples));
        m.insert("rms_raw_sr_fc".into(), json!(self.rms));
        m.insert("eigen_raw_sr_fc".into(), json!(self.eigen));
        m.insert("eigen_ratio".into(), json!(self.eigen_ratio()));
        m.insert(
            "sr_below_raw_to_half".into(),
            json!(self.below_raw(&self.sr, 0.5)),
        );
        m.insert(
            "fc_below_raw_to_half".into(),
            json!(self.below_raw(&self.fc, 0.5)),
        );
        m.insert(
            "residual_below_raw".into(),
            json!(self.below_raw(&self.sr, 0.5) && self.below_raw(&self.fc, 0.5)),
        );
        m
    }
}

fn pooled(
    trajs: &[Vec<Field>],
    source: FisherSource,
    patch: usize,
    per_traj: usize,
    factor: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (k, f) in trajs.iter().enumerate() {
        if f.len() < 3 {
            continue;
        }
        out.extend(collect_patches(
            f,
            source,
            patch,
            per_traj,
            factor,
            seed.wrapping_add(k as u64),
        )?);
    }
    Ok(out)
}

/// Fisher-divergence curves of raw, SR-residual and FC-residual patches, and the
/// top patch-covariance eigenvalue of each.
pub fn fig7_analog(
    trajs: &[Vec<Field>],
    cfg: &TheoryConfig,
    schedule: &NoiseSchedule,
) -> Result<Fig7Analog> {
    let usable: Vec<&Vec<Field>> = trajs.iter().filter(|t| t.len() >= 3).collect();
    let snapshots: usize = usable.iter().map(|t| t.len()).sum();
    if usable.is_empty() {
        return Err(Error::Estimator(format!(
            "{} snapshots in total; a trajectory of at least 3 is needed",
            trajs.iter().map(Vec::len).sum::<usize>()
        )));
    }
    let per = cfg.patches.div_ceil(usable.len());
    let eig_per = cfg.eigen_patches.div_ceil(usable.len());
    let sources = [
        FisherSource::Raw,
        FisherSource::SrResidual,
        FisherSource::FcResidual,
    ];
    let mut sets = Vec::new();
    let mut eigen = [0.0; 3];
    for (i, src) in sources.iter().enumerate() {
        sets.push(pooled(trajs, *src, cfg.patch, per, cfg.factor, cfg.seed)?);
        let rows = pooled(
            trajs,
            *src,
            cfg.eigen_patch,
            eig_per,
            cfg.factor,
            cfg.seed.wrapping_add(1000),
        )?;
        eigen[i] = top_eigen_covariance(&rows, 1e-8)?;
    }
    let r = [rms(&sets[0]), rms(&sets[1]), rms(&sets[2])];
    let mut curves = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let scale = match cfg.units {
            FisherUnits::Physical => 1.0,
            FisherUnits::PerSource => r[i],
            FisherUnits::RawScale => r[0],
            FisherUnits::ResidualScale => ((r[1] * r[1] + r[2] * r[2]) / 2.0).sqrt(),
        };
        if !(scale > 0.0) {
            return Err(Error::Estimator(format!(
                "{} patches have zero scale",
                src.label()
            )));
        }
        let xs: Vec<f64> = sets[i].iter().flatten().map(|v| v / scale).collect();
        curves.push(fisher_curve(
            &xs,
            src.label(),
            &cfg.t_grid,
            schedule,
            cfg.bandwidth,
            cfg.seed,
        )?);
    }
    let fc = curves.pop().expect("three curves");
    let sr = curves.pop().expect("three curves");
    let raw = curves.pop().expect("three curves");
    Ok(Fig7Analog {
        units: cfg.units,
        raw,
        sr,
        fc,
        rms: r,
        eigen,
        snapshots,
    })
}
