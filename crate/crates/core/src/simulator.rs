//! Decaying 2D incompressible Navier–Stokes in vorticity–streamfunction form on `[0, 2pi]^2`.
//!
//! `u = (psi_y, -psi_x)`, `lap(psi) = -omega`, and
//! `d omega/dt = J(psi, omega) + nu lap(omega)` with `J(a, b) = a_x b_y - a_y b_x`.
//! Advection uses the Arakawa Jacobian, diffusion the 5-point Laplacian,
//! the Poisson solve is spectral, and time stepping is SSP-RK3.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::spectral::{wavenumber, Fft2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub viscosity: f64,
    pub dt: f64,
    /// Solver steps after burn-in.
    pub steps: usize,
    /// Solver steps between stored snapshots.
    pub stride: usize,
    /// Solver steps discarded before the first stored snapshot.
    pub burn_in: usize,
    pub init_seed: u64,
    /// Peak wavenumber of the initial spectrum.
    pub k0: f64,
    /// Power-law slope below the peak.
    pub slope: f64,
    /// Initial root-mean-square speed.
    pub u_rms: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 64,
            viscosity: 5e-3,
            dt: 1e-2,
            steps: 0,
            stride: 1,
            burn_in: 0,
            init_seed: 0,
            k0: 4.0,
            slope: 4.0,
            u_rms: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 || !self.n.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "grid size {} must be a power of two >= 8",
                self.n
            )));
        }
        if !(self.viscosity >= 0.0) || !self.viscosity.is_finite() {
            return Err(Error::Parameter(format!(
                "viscosity {} must be >= 0",
                self.viscosity
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Parameter(format!("dt {} must be > 0", self.dt)));
        }
        if self.stride == 0 {
            return Err(Error::Parameter("stride must be at least 1".into()));
        }
        if !(self.k0 >= 1.0) || self.k0 > (self.n / 2) as f64 {
            return Err(Error::Parameter(format!("k0 {} outside [1, n/2]", self.k0)));
        }
        if !(self.slope > 0.0) || !(self.u_rms > 0.0) {
            return Err(Error::Parameter("slope and u_rms must be positive".into()));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        2.0 * PI / self.n as f64
    }

    /// `u_rms * 2pi / nu`; zero for inviscid runs.
    pub fn re_tag(&self) -> f64 {
        if self.viscosity > 0.0 {
            self.u_rms * 2.0 * PI / self.viscosity
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub n: usize,
    pub omega: Vec<f64>,
    pub psi: Vec<f64>,
    pub step: usize,
    pub energy: f64,
    pub enstrophy: f64,
}

impl SimState {
    pub fn to_field(&self, re_tag: f64, dt: f64, time_index: usize) -> Result<Field> {
        let mut f = Field::new(
            self.n,
            self.n,
            self.omega.iter().map(|&v| v as f32).collect(),
        )?;
        f.re_tag = re_tag;
        f.dt = dt;
        f.time_index = time_index;
        Ok(f)
    }

    fn refresh_diagnostics(&mut self) {
        self.energy = energy(&self.psi, &self.omega);
        self.enstrophy = enstrophy(&self.omega);
    }
}

/// `1/2 <psi omega>`, equal to the mean kinetic energy for a spectral Poisson solve.
pub fn energy(psi: &[f64], omega: &[f64]) -> f64 {
    0.5 * psi.iter().zip(omega).map(|(a, b)| a * b).sum::<f64>() / omega.len() as f64
}

/// `1/2 <omega^2>`.
pub fn enstrophy(omega: &[f64]) -> f64 {
    0.5 * omega.iter().map(|w| w * w).sum::<f64>() / omega.len() as f64
}

fn check_square(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len || n < 3 {
        return Err(Error::Shape(format!(
            "{len} values do not form a square grid"
        )));
    }
    Ok(n)
}

/// Arakawa's energy- and enstrophy-conserving discretization of `J(psi, omega) = psi_x omega_y - psi_y omega_x`.
pub fn arakawa_jacobian(psi: &[f64], omega: &[f64], h: f64) -> Result<Vec<f64>> {
    if psi.len() != omega.len() {
        return Err(Error::Shape(format!(
            "psi has {} values, omega {}",
            psi.len(),
            omega.len()
        )));
    }
    let n = check_square(psi.len())?;
    let mut out = vec![0.0; n * n];
    arakawa_into(psi, omega, n, h, &mut out);
    Ok(out)
}

fn arakawa_into(p: &[f64], w: &[f64], n: usize, h: f64, out: &mut [f64]) {
    let c = 1.0 / (12.0 * h * h);
    for j in 0..n {
        let jp = (j + 1) % n * n;
        let jm = (j + n - 1) % n * n;
        let j0 = j * n;
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let (p_e, p_w, p_n, p_s) = (p[j0 + ip], p[j0 + im], p[jp + i], p[jm + i]);
            let (p_ne, p_nw, p_se, p_sw) = (p[jp + ip], p[jp + im], p[jm + ip], p[jm + im]);
            let (w_e, w_w, w_n, w_s) = (w[j0 + ip], w[j0 + im], w[jp + i], w[jm + i]);
            let (w_ne, w_nw, w_se, w_sw) = (w[jp + ip], w[jp + im], w[jm + ip], w[jm + im]);
            let j1 = (p_e - p_w) * (w_n - w_s) - (p_n - p_s) * (w_e - w_w);
            let j2 = p_e * (w_ne - w_se) - p_w * (w_nw - w_sw) - p_n * (w_ne - w_nw)
                + p_s * (w_se - w_sw);
            let j3 = w_n * (p_ne - p_nw) - w_s * (p_se - p_sw) - w_e * (p_ne - p_se)
                + w_w * (p_nw - p_sw);
            out[j0 + i] = (j1 + j2 + j3) * c;
        }
    }
}

/// Second-order 5-point Laplacian.
pub fn fd_laplacian(f: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = check_square(f.len())?;
    let mut out = vec![0.0; n * n];
    laplacian_into(f, n, h, &mut out);
    Ok(out)
}

fn laplacian_into(f: &[f64], n: usize, h: f64, out: &mut [f64]) {
    let c = 1.0 / (h * h);
    for j in 0..n {
        let jp = (j + 1) % n * n;
        let jm = (j + n - 1) % n * n;
        let j0 = j * n;
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            out[j0 + i] = (f[j0 + ip] + f[j0 + im] + f[jp + i] + f[jm + i] - 4.0 * f[j0 + i]) * c;
        }
    }
}

/// Spectral Poisson solver and spectral derivatives for one grid size.
#[derive(Debug)]
pub struct Spectral {
    n: usize,
    fft: Fft2,
}

impl Spectral {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            fft: Fft2::new(n, n),
        }
    }

    fn k2(&self, idx: usize) -> f64 {
        let kx = wavenumber(idx % self.n, self.n);
        let ky = wavenumber(idx / self.n, self.n);
        kx * kx + ky * ky
    }

    /// Solve `lap(psi) = -omega` with zero-mean `psi`.
    pub fn poisson_solve(&self, omega: &[f64]) -> Result<Vec<f64>> {
        if omega.len() != self.n * self.n {
            return Err(Error::Shape(format!(
                "{} values for a {}^2 grid",
                omega.len(),
                self.n
            )));
        }
        let mean = omega.iter().sum::<f64>() / omega.len() as f64;
        let scale = omega.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if mean.abs() > 1e-8 * (1.0 + scale) {
            return Err(Error::Consistency(format!(
                "vorticity mean {mean:e} is not zero"
            )));
        }
        let mut spec = self.fft.forward_real(omega);
        for (i, c) in spec.iter_mut().enumerate() {
            let k2 = self.k2(i);
            *c = if k2 == 0.0 {
                Default::default()
            } else {
                *c / k2
            };
        }
        Ok(self.fft.inverse_real(spec))
    }

    /// Spectral Laplacian.
    pub fn laplacian(&self, f: &[f64]) -> Vec<f64> {
        let mut spec = self.fft.forward_real(f);
        for (i, c) in spec.iter_mut().enumerate() {
            *c *= -self.k2(i);
        }
        self.fft.inverse_real(spec)
    }

    /// `max |lap(psi) + omega| / max |omega|`, evaluated spectrally.
    pub fn poisson_residual(&self, psi: &[f64], omega: &[f64]) -> f64 {
        let lap = self.laplacian(psi);
        let num = lap
            .iter()
            .zip(omega)
            .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
        let den = omega.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    /// Velocity `(u, v) = (psi_y, -psi_x)`.
    pub fn velocity(&self, psi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let spec = self.fft.forward_real(psi);
        let i = rustfft::num_complex::Complex64::new(0.0, 1.0);
        let mut su = spec.clone();
        let mut sv = spec;
        for idx in 0..su.len() {
            let kx = wavenumber(idx % self.n, self.n);
            let ky = wavenumber(idx / self.n, self.n);
            // drop the unpaired Nyquist mode so derivatives stay real
            let nyq = self.n / 2;
            let kx = if idx % self.n == nyq { 0.0 } else { kx };
            let ky = if idx / self.n == nyq { 0.0 } else { ky };
            su[idx] *= i * ky;
            sv[idx] *= -i * kx;
        }
        (self.fft.inverse_real(su), self.fft.inverse_real(sv))
    }

    /// Spectral divergence `u_x + v_y`.
    pub fn divergence(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let su = self.fft.forward_real(u);
        let sv = self.fft.forward_real(v);
        let i = rustfft::num_complex::Complex64::new(0.0, 1.0);
        let out = su
            .iter()
            .zip(&sv)
            .enumerate()
            .map(|(idx, (a, b))| {
                let kx = wavenumber(idx % self.n, self.n);
                let ky = wavenumber(idx / self.n, self.n);
                i * kx * a + i * ky * b
            })
            .collect();
        self.fft.inverse_real(out)
    }

    fn filtered_noise(&self, cfg: &SimConfig) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let noise: Vec<f64> = (0..self.n * self.n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut spec = self.fft.forward_real(&noise);
        let a = cfg.slope;
        for (i, c) in spec.iter_mut().enumerate() {
            let k = self.k2(i).sqrt();
            let shape = if k == 0.0 {
                0.0
            } else {
                let r = k / cfg.k0;
                r.powf(a) * (-0.5 * a * (r * r - 1.0)).exp()
            };
            *c *= shape.sqrt();
        }
        self.fft.inverse_real(spec)
    }
}

/// Random vorticity whose radial spectrum peaks at `k0`, scaled to the configured rms speed.
pub fn init_state(cfg: &SimConfig) -> Result<SimState> {
    cfg.validate()?;
    let sp = Spectral::new(cfg.n);
    let mut omega = sp.filtered_noise(cfg);
    let mean = omega.iter().sum::<f64>() / omega.len() as f64;
    omega.iter_mut().for_each(|w| *w -= mean);
    let psi = sp.poisson_solve(&omega)?;
    let (u, v) = sp.velocity(&psi);
    let speed2 = u.iter().zip(&v).map(|(a, b)| a * a + b * b).sum::<f64>() / u.len() as f64;
    if speed2 <= 0.0 {
        return Err(Error::Parameter(
            "initial spectrum produced a zero field".into(),
        ));
    }
    let scale = cfg.u_rms / speed2.sqrt();
    omega.iter_mut().for_each(|w| *w *= scale);
    let psi: Vec<f64> = psi.iter().map(|p| p * scale).collect();
    let max_speed = u
        .iter()
        .zip(&v)
        .map(|(a, b)| (a * a + b * b).sqrt() * scale)
        .fold(0.0, f64::max);
    let cfl = cfg.dt * max_speed / cfg.h();
    if cfl >= 1.0 {
        return Err(Error::Parameter(format!(
            "CFL number {cfl:.3} >= 1 at initialization; reduce dt"
        )));
    }
    let mut s = SimState {
        n: cfg.n,
        omega,
        psi,
        step: 0,
        energy: 0.0,
        enstrophy: 0.0,
    };
    s.refresh_diagnostics();
    Ok(s)
}

/// Reusable stepping workspace.
#[derive(Debug)]
pub struct Stepper {
    cfg: SimConfig,
    sp: Spectral,
    jac: Vec<f64>,
    lap: Vec<f64>,
}

impl Stepper {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let nn = cfg.n * cfg.n;
        Ok(Self {
            cfg: cfg.clone(),
            sp: Spectral::new(cfg.n),
            jac: vec![0.0; nn],
            lap: vec![0.0; nn],
        })
    }

    /// Right-hand side `J(psi, omega) + nu lap(omega)` with `psi` re-solved from `omega`.
    fn rhs(&mut self, omega: &[f64]) -> Result<Vec<f64>> {
        let n = self.cfg.n;
        let h = self.cfg.h();
        let psi = self.sp.poisson_solve(omega)?;
        arakawa_into(&psi, omega, n, h, &mut self.jac);
        laplacian_into(omega, n, h, &mut self.lap);
        let nu = self.cfg.viscosity;
        Ok(self
            .jac
            .iter()
            .zip(&self.lap)
            .map(|(j, l)| j + nu * l)
            .collect())
    }

    pub fn step(&mut self, state: &SimState) -> Result<SimState> {
        if state.n != self.cfg.n {
            return Err(Error::Shape(format!(
                "state n={} vs config n={}",
                state.n, self.cfg.n
            )));
        }
        let dt = self.cfg.dt;
        let w0 = &state.omega;
        let k1 = self.rhs(w0)?;
        let w1: Vec<f64> = w0.iter().zip(&k1).map(|(w, k)| w + dt * k).collect();
        let k2 = self.rhs(&w1)?;
        let w2: Vec<f64> = w0
            .iter()
            .zip(&w1)
            .zip(&k2)
            .map(|((a, b), k)| 0.75 * a + 0.25 * (b + dt * k))
            .collect();
        let k3 = self.rhs(&w2)?;
        let omega: Vec<f64> = w0
            .iter()
            .zip(&w2)
            .zip(&k3)
            .map(|((a, b), k)| a / 3.0 + 2.0 / 3.0 * (b + dt * k))
            .collect();
        let next_step = state.step + 1;
        if omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability {
                step: next_step,
                what: "non-finite vorticity".into(),
            });
        }
        let psi = self.sp.poisson_solve(&omega).map_err(|e| match e {
            Error::Consistency(m) => Error::Instability {
                step: next_step,
                what: m,
            },
            e => e,
        })?;
        let mut s = SimState {
            n: state.n,
            omega,
            psi,
            step: next_step,
            energy: 0.0,
            enstrophy: 0.0,
        };
        s.refresh_diagnostics();
        Ok(s)
    }

    pub fn spectral(&self) -> &Spectral {
        &self.sp
    }
}

/// One RK3 step; see [`Stepper`] for repeated stepping.
pub fn step(state: &SimState, cfg: &SimConfig) -> Result<SimState> {
    Stepper::new(cfg)?.step(state)
}

/// Burn in, then store a snapshot every `stride` steps (the initial stored state included).
pub fn run(cfg: &SimConfig) -> Result<Dataset> {
    run_with(cfg, |_| {})
}

/// [`run`] with a callback on every stored state.
pub fn run_with(cfg: &SimConfig, mut on_snapshot: impl FnMut(&SimState)) -> Result<Dataset> {
    let mut stepper = Stepper::new(cfg)?;
    let mut state = init_state(cfg)?;
    for _ in 0..cfg.burn_in {
        state = stepper.step(&state)?;
    }
    let re = cfg.re_tag();
    let snap_dt = cfg.dt * cfg.stride as f64;
    let mut ds = Dataset::new(cfg.n, cfg.n, snap_dt, cfg.viscosity, re);
    ds.push(&state.to_field(re, snap_dt, 0)?)?;
    on_snapshot(&state);
    for k in 1..=cfg.steps {
        state = stepper.step(&state)?;
        if k % cfg.stride == 0 {
            ds.push(&state.to_field(re, snap_dt, ds.len())?)?;
            on_snapshot(&state);
        }
    }
    Ok(ds)
}

pub fn run_to_file(cfg: &SimConfig, path: impl AsRef<Path>) -> Result<Dataset> {
    let ds = run(cfg)?;
    ds.save(path)?;
    Ok(ds)
}
