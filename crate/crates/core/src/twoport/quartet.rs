//! Catalog of uncertainty quartets. Every catalog kind acts sample by sample
//! (possibly time-varying), so it is causal by construction and maps 0 to 0.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::TwoPortError;
use crate::signal::SignalTrace;
use crate::syntax::Value;

/// Pointwise map `(t, z(t)) ↦ Δ(z)(t)` supplied by the caller.
pub type PointwiseFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub enum QuartetKind {
    Zero,
    /// `Δ z = K z`.
    StaticGain(DMatrix<f64>),
    /// `Δ z = (R(φ) − I) z` for a plane rotation in coordinates `(i, j)`.
    Rotation {
        angle: f64,
        i: usize,
        j: usize,
    },
    /// `Δ z = amp · v (wᵀ z)` with unit `v`, `w`.
    RankOne {
        amp: f64,
        v: DVector<f64>,
        w: DVector<f64>,
    },
    /// `Δ z = α (sat_L(z) − z)` elementwise.
    Saturation {
        alpha: f64,
        level: f64,
    },
    /// `Δ z = α (z − sat_w(z))` elementwise.
    Deadzone {
        alpha: f64,
        width: f64,
    },
    /// `Δ z = amp · sin(ν t + φ) z`.
    TimeVaryingGain {
        amp: f64,
        freq: f64,
        phase: f64,
    },
    /// Sum of the parts.
    Composite(Vec<UncertaintyQuartet>),
    /// User-defined map without a provable bound.
    Custom {
        name: String,
        map: PointwiseFn,
    },
}

impl fmt::Debug for QuartetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuartetKind::Custom { name, .. } => write!(f, "Custom({name})"),
            other => write!(f, "{}", other.tag()),
        }
    }
}

impl QuartetKind {
    pub fn tag(&self) -> &'static str {
        match self {
            QuartetKind::Zero => "zero",
            QuartetKind::StaticGain(_) => "static_gain",
            QuartetKind::Rotation { .. } => "rotation",
            QuartetKind::RankOne { .. } => "rank_one",
            QuartetKind::Saturation { .. } => "saturation",
            QuartetKind::Deadzone { .. } => "deadzone",
            QuartetKind::TimeVaryingGain { .. } => "tv_gain",
            QuartetKind::Composite(_) => "composite",
            QuartetKind::Custom { .. } => "custom",
        }
    }
}

/// Bounded causal operator `Δ` on stacked `(m + p)`-channel traces.
#[derive(Debug, Clone)]
pub struct UncertaintyQuartet {
    kind: QuartetKind,
    declared_bound: f64,
    m: usize,
    p: usize,
}

fn sat(x: f64, level: f64) -> f64 {
    x.clamp(-level, level)
}

impl UncertaintyQuartet {
    /// Validates shapes and certifies the analytic bound against `declared_bound`.
    pub fn new(kind: QuartetKind, declared_bound: f64, m: usize, p: usize) -> Result<Self, TwoPortError> {
        if !(0.0..1.0).contains(&declared_bound) {
            return Err(TwoPortError::OutOfRange(declared_bound));
        }
        let dim = m + p;
        match &kind {
            QuartetKind::StaticGain(k) if k.shape() != (dim, dim) => {
                return Err(TwoPortError::ShapeMismatch { expected: dim, got: k.nrows().max(k.ncols()) })
            }
            QuartetKind::Rotation { i, j, angle } => {
                if *i >= dim || *j >= dim || i == j || !angle.is_finite() {
                    return Err(TwoPortError::Spec(format!("rotation plane ({i}, {j}) invalid for {dim} channels")));
                }
            }
            QuartetKind::RankOne { amp, v, w } => {
                if v.len() != dim || w.len() != dim {
                    return Err(TwoPortError::ShapeMismatch { expected: dim, got: v.len().max(w.len()) });
                }
                if *amp < 0.0 || (v.norm() - 1.0).abs() > 1e-12 || (w.norm() - 1.0).abs() > 1e-12 {
                    return Err(TwoPortError::Spec("rank-one directions must be unit vectors, amp ≥ 0".into()));
                }
            }
            QuartetKind::Saturation { alpha, level } => {
                if *alpha < 0.0 || level.is_nan() || *level <= 0.0 {
                    return Err(TwoPortError::Spec("saturation needs alpha ≥ 0 and level > 0".into()));
                }
            }
            QuartetKind::Deadzone { alpha, width } => {
                if *alpha < 0.0 || width.is_nan() || *width <= 0.0 {
                    return Err(TwoPortError::Spec("deadzone needs alpha ≥ 0 and width > 0".into()));
                }
            }
            QuartetKind::TimeVaryingGain { amp, freq, phase } => {
                if *amp < 0.0 || !freq.is_finite() || !phase.is_finite() {
                    return Err(TwoPortError::Spec("tv_gain needs amp ≥ 0 and finite freq/phase".into()));
                }
            }
            QuartetKind::Composite(parts) if parts.iter().any(|q| q.m != m || q.p != p) => {
                return Err(TwoPortError::ShapeMismatch { expected: dim, got: 0 });
            }
            _ => {}
        }
        let q = Self { kind, declared_bound, m, p };
        if let Some(b) = q.analytic_bound() {
            if b > declared_bound + 1e-12 {
                return Err(TwoPortError::BoundExceeded { analytic: b, declared: declared_bound });
            }
        }
        Ok(q)
    }

    pub fn zero(m: usize, p: usize) -> Self {
        Self { kind: QuartetKind::Zero, declared_bound: 0.0, m, p }
    }

    /// `(R(φ) − I)` rotation in plane `(i, j)`; its norm is `2 sin(|φ|/2)`.
    pub fn rotation(
        angle: f64,
        i: usize,
        j: usize,
        declared_bound: f64,
        m: usize,
        p: usize,
    ) -> Result<Self, TwoPortError> {
        Self::new(QuartetKind::Rotation { angle, i, j }, declared_bound, m, p)
    }

    /// Rank-one map normalizing `v` and `w`.
    pub fn rank_one(
        amp: f64,
        v: &DVector<f64>,
        w: &DVector<f64>,
        declared_bound: f64,
        m: usize,
        p: usize,
    ) -> Result<Self, TwoPortError> {
        if v.norm() == 0.0 || w.norm() == 0.0 {
            return Err(TwoPortError::Spec("rank-one directions must be nonzero".into()));
        }
        // keep already-unit vectors bit-exact so specs round-trip
        let unit = |x: &DVector<f64>| if (x.norm() - 1.0).abs() <= 1e-14 { x.clone() } else { x.normalize() };
        Self::new(QuartetKind::RankOne { amp, v: unit(v), w: unit(w) }, declared_bound, m, p)
    }

    pub fn kind(&self) -> &QuartetKind {
        &self.kind
    }

    pub fn declared_bound(&self) -> f64 {
        self.declared_bound
    }

    pub fn partition(&self) -> (usize, usize) {
        (self.m, self.p)
    }

    pub fn channels(&self) -> usize {
        self.m + self.p
    }

    /// Provable gain bound, `None` for custom maps.
    pub fn analytic_bound(&self) -> Option<f64> {
        match &self.kind {
            QuartetKind::Zero => Some(0.0),
            QuartetKind::StaticGain(k) => Some(crate::linalg::sigma_max(k)),
            QuartetKind::Rotation { angle, .. } => Some(2.0 * (angle.abs() / 2.0).sin().abs()),
            QuartetKind::RankOne { amp, .. } => Some(*amp),
            QuartetKind::Saturation { alpha, .. } | QuartetKind::Deadzone { alpha, .. } => Some(*alpha),
            QuartetKind::TimeVaryingGain { amp, .. } => Some(*amp),
            QuartetKind::Composite(parts) => parts.iter().map(|q| q.analytic_bound()).sum(),
            QuartetKind::Custom { .. } => None,
        }
    }

    /// True when the declared bound is not backed by an analytic one.
    pub fn is_unverified(&self) -> bool {
        self.analytic_bound().is_none()
    }

    /// `Δ(z)(t)` for one sample.
    pub fn apply_sample(&self, t: f64, z: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            QuartetKind::Zero => DVector::zeros(z.len()),
            QuartetKind::StaticGain(k) => k * z,
            QuartetKind::Rotation { angle, i, j } => {
                let (s, c) = angle.sin_cos();
                let mut out = DVector::zeros(z.len());
                out[*i] = (c - 1.0) * z[*i] - s * z[*j];
                out[*j] = s * z[*i] + (c - 1.0) * z[*j];
                out
            }
            QuartetKind::RankOne { amp, v, w } => v * (amp * w.dot(z)),
            QuartetKind::Saturation { alpha, level } => z.map(|x| alpha * (sat(x, *level) - x)),
            QuartetKind::Deadzone { alpha, width } => z.map(|x| alpha * (x - sat(x, *width))),
            QuartetKind::TimeVaryingGain { amp, freq, phase } => z * (amp * (freq * t + phase).sin()),
            QuartetKind::Composite(parts) => {
                parts.iter().fold(DVector::zeros(z.len()), |acc, q| acc + q.apply_sample(t, z))
            }
            QuartetKind::Custom { map, .. } => map(t, z),
        }
    }

    /// `Δ(z)` for a whole trace.
    pub fn apply(&self, z: &SignalTrace) -> Result<SignalTrace, TwoPortError> {
        if z.channels() != self.channels() {
            return Err(TwoPortError::ShapeMismatch { expected: self.channels(), got: z.channels() });
        }
        let mut out = DMatrix::zeros(z.channels(), z.horizon());
        for k in 0..z.horizon() {
            let col = self.apply_sample(k as f64 * z.dt(), &z.samples().column(k).into_owned());
            out.set_column(k, &col);
        }
        SignalTrace::new(z.dt(), out).map_err(|e| TwoPortError::Spec(e.to_string()))
    }

    /// Channel spec `channel { kind=..., r=..., params=[...] }`.
    pub fn to_value(&self) -> Value {
        let num = Value::Number;
        let mut fields = vec![
            ("kind".to_string(), Value::Ident(self.kind.tag().to_string())),
            ("r".to_string(), num(self.declared_bound)),
        ];
        let params: Option<Vec<f64>> = match &self.kind {
            QuartetKind::Zero | QuartetKind::Composite(_) | QuartetKind::Custom { .. } => None,
            QuartetKind::StaticGain(k) => Some(k.transpose().as_slice().to_vec()),
            QuartetKind::Rotation { angle, i, j } => Some(vec![*angle, *i as f64, *j as f64]),
            QuartetKind::RankOne { amp, v, w } => {
                Some(std::iter::once(*amp).chain(v.iter().copied()).chain(w.iter().copied()).collect())
            }
            QuartetKind::Saturation { alpha, level } => Some(vec![*alpha, *level]),
            QuartetKind::Deadzone { alpha, width } => Some(vec![*alpha, *width]),
            QuartetKind::TimeVaryingGain { amp, freq, phase } => Some(vec![*amp, *freq, *phase]),
        };
        if let Some(params) = params {
            fields.push(("params".to_string(), Value::List(params.into_iter().map(num).collect())));
        }
        if let QuartetKind::Composite(parts) = &self.kind {
            fields.push(("parts".to_string(), Value::List(parts.iter().map(|q| q.to_value()).collect())));
        }
        if let QuartetKind::Custom { name, .. } = &self.kind {
            fields.push(("name".to_string(), Value::Ident(name.clone())));
        }
        Value::Record { name: "channel".to_string(), fields }
    }

    /// Parses a channel spec for partition `(m, p)`; custom maps cannot be
    /// expressed in the syntax.
    pub fn from_value(value: &Value, m: usize, p: usize) -> Result<Self, TwoPortError> {
        let err = |msg: &str| TwoPortError::Spec(msg.to_string());
        match value {
            Value::Record { name, .. } if name == "channel" => {}
            _ => return Err(err("expected channel { ... }")),
        }
        let kind = value.field("kind").and_then(Value::as_ident).ok_or_else(|| err("missing kind"))?;
        let r = value.field("r").and_then(Value::as_f64).ok_or_else(|| err("missing numeric r"))?;
        let params = match value.field("params") {
            Some(v) => v.as_numbers().ok_or_else(|| err("params must be a list of numbers"))?,
            None => Vec::new(),
        };
        let dim = m + p;
        let need = |n: usize| -> Result<(), TwoPortError> {
            if params.len() == n {
                Ok(())
            } else {
                Err(TwoPortError::Spec(format!("{kind} expects {n} params, got {}", params.len())))
            }
        };
        let index = |x: f64| -> Result<usize, TwoPortError> {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(TwoPortError::Spec(format!("invalid channel index {x}")))
            }
        };
        let kind = match kind {
            "zero" => QuartetKind::Zero,
            "static_gain" => {
                need(dim * dim)?;
                QuartetKind::StaticGain(DMatrix::from_row_slice(dim, dim, &params))
            }
            "rotation" => {
                need(3)?;
                QuartetKind::Rotation { angle: params[0], i: index(params[1])?, j: index(params[2])? }
            }
            "rank_one" => {
                need(1 + 2 * dim)?;
                let v = DVector::from_column_slice(&params[1..1 + dim]);
                let w = DVector::from_column_slice(&params[1 + dim..]);
                return Self::rank_one(params[0], &v, &w, r, m, p);
            }
            "saturation" => {
                need(2)?;
                QuartetKind::Saturation { alpha: params[0], level: params[1] }
            }
            "deadzone" => {
                need(2)?;
                QuartetKind::Deadzone { alpha: params[0], width: params[1] }
            }
            "tv_gain" => {
                need(3)?;
                QuartetKind::TimeVaryingGain { amp: params[0], freq: params[1], phase: params[2] }
            }
            "composite" => {
                let parts = value
                    .field("parts")
                    .and_then(Value::as_list)
                    .ok_or_else(|| err("composite needs parts=[...]"))?
                    .iter()
                    .map(|v| Self::from_value(v, m, p))
                    .collect::<Result<Vec<_>, _>>()?;
                QuartetKind::Composite(parts)
            }
            other => return Err(TwoPortError::Spec(format!("unknown channel kind '{other}'"))),
        };
        Self::new(kind, r, m, p)
    }

    /// Random catalog quartet whose analytic bound is `U(0,1)·r`.
    pub fn random<R: Rng + ?Sized>(r: f64, m: usize, p: usize, rng: &mut R) -> Result<Self, TwoPortError> {
        let bound = rng.random_range(0.0..1.0) * r;
        Self::random_with_bound(bound, r, m, p, rng, 0)
    }

    fn random_with_bound<R: Rng + ?Sized>(
        bound: f64,
        r: f64,
        m: usize,
        p: usize,
        rng: &mut R,
        depth: usize,
    ) -> Result<Self, TwoPortError> {
        let dim = m + p;
        let choices = if depth == 0 { 7 } else { 6 };
        let unit = |rng: &mut R| loop {
            let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            if v.norm() > 1e-3 {
                break v.normalize();
            }
        };
        let kind = match rng.random_range(0..choices) {
            0 => {
                let k = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                let s = crate::linalg::sigma_max(&k);
                QuartetKind::StaticGain(if s > 0.0 { k * (bound / s) } else { k * 0.0 })
            }
            1 if dim >= 2 => {
                let i = rng.random_range(0..dim);
                let j = (i + rng.random_range(1..dim)) % dim;
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                QuartetKind::Rotation { angle: sign * 2.0 * (bound / 2.0).asin(), i, j }
            }
            2 | 1 => QuartetKind::RankOne { amp: bound, v: unit(rng), w: unit(rng) },
            3 => QuartetKind::Saturation { alpha: bound, level: rng.random_range(0.05..1.0) },
            4 => QuartetKind::Deadzone { alpha: bound, width: rng.random_range(0.05..1.0) },
            5 => QuartetKind::TimeVaryingGain {
                amp: bound,
                freq: rng.random_range(0.1..10.0),
                phase: rng.random_range(0.0..2.0 * PI),
            },
            _ => {
                let split = rng.random_range(0.0..1.0);
                let a = Self::random_with_bound(bound * split, r, m, p, rng, depth + 1)?;
                let b = Self::random_with_bound(bound * (1.0 - split), r, m, p, rng, depth + 1)?;
                QuartetKind::Composite(vec![a, b])
            }
        };
        Self::new(kind, r, m, p)
    }
}

impl fmt::Display for UncertaintyQuartet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_value())
    }
}
