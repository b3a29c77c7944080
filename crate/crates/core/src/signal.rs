//! Finite-horizon sampled signals standing in for elements of H₂.
//!
//! A [`SignalTrace`] stores `channels × steps` samples on a uniform grid with
//! period `dt`. Norms and inner products use rectangle-rule quadrature, so
//! `‖x‖₂² = dt · Σ_t |x(t)|²`.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("signal norm is below the zero tolerance")]
    ZeroSignal,
    #[error("traces are not conformable: {0}")]
    NotConformable(String),
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// Relative tolerance used for the zero-signal test.
pub const ZERO_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    dt: f64,
    samples: DMatrix<f64>,
}

impl SignalTrace {
    pub fn new(dt: f64, samples: DMatrix<f64>) -> Result<Self, SignalError> {
        if dt.is_nan() || dt <= 0.0 || !dt.is_finite() {
            return Err(SignalError::Invalid(format!("dt must be positive, got {dt}")));
        }
        if samples.ncols() == 0 {
            return Err(SignalError::Invalid("horizon must be at least one step".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::Invalid("samples must be finite".into()));
        }
        Ok(Self { dt, samples })
    }

    pub fn zeros(dt: f64, channels: usize, horizon: usize) -> Self {
        assert!(dt > 0.0 && horizon > 0);
        Self { dt, samples: DMatrix::zeros(channels, horizon) }
    }

    /// Builds a trace from a per-step generator `f(step) -> sample column`.
    pub fn from_fn(dt: f64, channels: usize, horizon: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(dt > 0.0 && horizon > 0);
        Self { dt, samples: DMatrix::from_fn(channels, horizon, f) }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.horizon() as f64
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.samples
    }

    pub fn into_samples(self) -> DMatrix<f64> {
        self.samples
    }

    /// Sample `(channel, step)`.
    pub fn at(&self, channel: usize, step: usize) -> f64 {
        self.samples[(channel, step)]
    }

    pub fn is_conformable(&self, other: &SignalTrace) -> bool {
        self.channels() == other.channels()
            && self.horizon() == other.horizon()
            && ((self.dt - other.dt).abs() <= 1e-12 * self.dt.max(other.dt))
    }

    fn check_conformable(&self, other: &SignalTrace) -> Result<(), SignalError> {
        if self.is_conformable(other) {
            Ok(())
        } else {
            Err(SignalError::NotConformable(format!(
                "({} ch, {} steps, dt {}) vs ({} ch, {} steps, dt {})",
                self.channels(),
                self.horizon(),
                self.dt,
                other.channels(),
                other.horizon(),
                other.dt
            )))
        }
    }

    /// `⟨x, y⟩ = dt · Σ_t x(t)ᵀ y(t)`.
    pub fn inner(&self, other: &SignalTrace) -> Result<f64, SignalError> {
        self.check_conformable(other)?;
        Ok(self.dt * self.samples.dot(&other.samples))
    }

    pub fn l2_norm(&self) -> f64 {
        (self.dt * self.samples.norm_squared()).sqrt()
    }

    pub fn energy(&self) -> f64 {
        self.dt * self.samples.norm_squared()
    }

    pub fn zero_tolerance(&self) -> f64 {
        ZERO_TOLERANCE * self.duration().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.l2_norm() <= self.zero_tolerance()
    }

    /// Zeroes every sample at `t = step·dt ≥ tau`.
    pub fn truncate(&self, tau: f64) -> SignalTrace {
        let mut out = self.clone();
        let keep = self.steps_before(tau);
        for t in keep..self.horizon() {
            out.samples.column_mut(t).fill(0.0);
        }
        out
    }

    /// Number of samples with `step·dt < tau`.
    pub fn steps_before(&self, tau: f64) -> usize {
        if tau <= 0.0 {
            return 0;
        }
        let n = self.horizon();
        let k = (tau / self.dt).ceil();
        if k >= n as f64 {
            return n;
        }
        let mut k = k as usize;
        // correct for rounding in tau / dt
        while k > 0 && ((k - 1) as f64) * self.dt >= tau {
            k -= 1;
        }
        while k < n && (k as f64) * self.dt < tau {
            k += 1;
        }
        k
    }

    /// Acute angle `arccos(|⟨x,y⟩| / (‖x‖‖y‖))` in `[0, π/2]`.
    pub fn angle(&self, other: &SignalTrace) -> Result<f64, SignalError> {
        self.check_conformable(other)?;
        let nx = self.l2_norm();
        let ny = other.l2_norm();
        if nx <= self.zero_tolerance() || ny <= other.zero_tolerance() {
            return Err(SignalError::ZeroSignal);
        }
        let c = (self.inner(other)?.abs() / (nx * ny)).min(1.0);
        // arccos loses precision near 1; use the sine from the orthogonal residual there.
        if c > 0.9 {
            let s = self.sin_angle_unchecked(other, nx, ny);
            Ok(s.asin().clamp(0.0, FRAC_PI_2))
        } else {
            Ok(c.acos())
        }
    }

    fn sin_angle_unchecked(&self, other: &SignalTrace, nx: f64, ny: f64) -> f64 {
        // ‖x − (⟨x,y⟩/‖y‖²) y‖ / ‖x‖
        let coef = self.dt * self.samples.dot(&other.samples) / (ny * ny);
        let resid = &self.samples - &other.samples * coef;
        ((self.dt * resid.norm_squared()).sqrt() / nx).min(1.0)
    }

    pub fn add(&self, other: &SignalTrace) -> Result<SignalTrace, SignalError> {
        self.check_conformable(other)?;
        Ok(SignalTrace { dt: self.dt, samples: &self.samples + &other.samples })
    }

    pub fn sub(&self, other: &SignalTrace) -> Result<SignalTrace, SignalError> {
        self.check_conformable(other)?;
        Ok(SignalTrace { dt: self.dt, samples: &self.samples - &other.samples })
    }

    pub fn scale(&self, alpha: f64) -> SignalTrace {
        SignalTrace { dt: self.dt, samples: &self.samples * alpha }
    }

    /// Stacks channels: `[self; other]`.
    pub fn stack(&self, other: &SignalTrace) -> Result<SignalTrace, SignalError> {
        if self.horizon() != other.horizon() || (self.dt - other.dt).abs() > 1e-12 * self.dt {
            return Err(SignalError::NotConformable("stack needs equal horizon and dt".into()));
        }
        let (a, b) = (self.channels(), other.channels());
        let mut s = DMatrix::zeros(a + b, self.horizon());
        s.rows_mut(0, a).copy_from(&self.samples);
        s.rows_mut(a, b).copy_from(&other.samples);
        Ok(SignalTrace { dt: self.dt, samples: s })
    }

    /// Channels `start..start+count`.
    pub fn channel_range(&self, start: usize, count: usize) -> SignalTrace {
        SignalTrace { dt: self.dt, samples: self.samples.rows(start, count).into_owned() }
    }

    /// First `steps` samples.
    pub fn prefix(&self, steps: usize) -> SignalTrace {
        let steps = steps.clamp(1, self.horizon());
        SignalTrace { dt: self.dt, samples: self.samples.columns(0, steps).into_owned() }
    }

    /// Extends the horizon with trailing zeros.
    pub fn zero_pad(&self, horizon: usize) -> SignalTrace {
        let mut s = DMatrix::zeros(self.channels(), horizon.max(self.horizon()));
        s.columns_mut(0, self.horizon()).copy_from(&self.samples);
        SignalTrace { dt: self.dt, samples: s }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), SignalError> {
        let mut line = String::from("t");
        for c in 0..self.channels() {
            let _ = write!(line, ",ch{}", c + 1);
        }
        writeln!(w, "{line}").map_err(|e| SignalError::Io(e.to_string()))?;
        for t in 0..self.horizon() {
            line.clear();
            let _ = write!(line, "{}", t as f64 * self.dt);
            for c in 0..self.channels() {
                let _ = write!(line, ",{}", self.samples[(c, t)]);
            }
            writeln!(w, "{line}").map_err(|e| SignalError::Io(e.to_string()))?;
        }
        Ok(())
    }

    /// Reads the `t,ch1,ch2,...` format. `dt` is inferred from the time
    /// column, which must be uniform to 1e-9 relative.
    pub fn read_csv<R: BufRead>(r: R) -> Result<SignalTrace, SignalError> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(SignalError::Csv { line: 1, msg: "empty input".into() })?;
        let header = header.map_err(|e| SignalError::Io(e.to_string()))?;
        let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") {
            return Err(SignalError::Csv { line: 1, msg: "header must start with `t`".into() });
        }
        let channels = cols.len() - 1;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| SignalError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
            if fields.len() != channels + 1 {
                return Err(SignalError::Csv {
                    line: i + 1,
                    msg: format!("expected {} fields, found {}", channels + 1, fields.len()),
                });
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| SignalError::Csv { line: i + 1, msg: format!("not a number: `{s}`") })
            };
            times.push(parse(fields[0])?);
            for f in &fields[1..] {
                values.push(parse(f)?);
            }
        }
        if times.len() < 2 {
            return Err(SignalError::Csv { line: 2, msg: "need at least two samples to infer dt".into() });
        }
        let dt = times[1] - times[0];
        if dt.is_nan() || dt <= 0.0 {
            return Err(SignalError::Csv { line: 3, msg: "time column must increase".into() });
        }
        for (k, &t) in times.iter().enumerate() {
            let expected = times[0] + k as f64 * dt;
            if (t - expected).abs() > 1e-9 * expected.abs().max(dt) {
                return Err(SignalError::Csv { line: k + 2, msg: format!("non-uniform time step at t = {t}") });
            }
        }
        let horizon = times.len();
        let samples = DMatrix::from_fn(channels, horizon, |c, t| values[t * channels + c]);
        SignalTrace::new(dt, samples)
    }
}
