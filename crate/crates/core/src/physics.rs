//! Physical quantities of the lossy horn model.
//!
//! Everything here is a pure function of its inputs. The velocity potential
//! `phi` is the primary field; pressure and volume velocity are derived from
//! it by
//!
//! ```text
//! p = R·A·phi + rho·phi_t
//! u = -A·phi_x
//! ```
//!
//! and the field obeys the horn equation with visco-thermal losses
//!
//! ```text
//! phi_xx + (A_x/A)·phi_x = G·R·phi + (G·rho/A + R·A/K)·phi_t + (rho/K)·phi_tt
//! ```

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gas constants. `bulk_modulus` is always `rho * c^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AirProperties {
    /// Density (kg/m³).
    pub rho: f64,
    /// Speed of sound (m/s).
    pub c: f64,
    /// Bulk modulus K (Pa).
    pub bulk_modulus: f64,
    /// Dynamic viscosity (Pa·s).
    pub mu: f64,
    /// Heat-capacity ratio.
    pub eta: f64,
    /// Thermal conductivity (W/(m·K)).
    pub lambda_th: f64,
    /// Specific heat at constant pressure (J/(kg·K)).
    pub cp: f64,
    /// Angular frequency at which the loss coefficients are evaluated (rad/s).
    pub omega_c: f64,
}

impl AirProperties {
    pub fn new(rho: f64, c: f64, mu: f64, eta: f64, lambda_th: f64, cp: f64, omega_c: f64) -> Result<Self> {
        Self::with_bulk_modulus(rho, c, rho * c * c, mu, eta, lambda_th, cp, omega_c)
    }

    /// Like [`AirProperties::new`] but with an explicit bulk modulus, which must
    /// agree with `rho * c^2` to 1e-12 relative.
    #[allow(clippy::too_many_arguments)]
    pub fn with_bulk_modulus(
        rho: f64,
        c: f64,
        bulk_modulus: f64,
        mu: f64,
        eta: f64,
        lambda_th: f64,
        cp: f64,
        omega_c: f64,
    ) -> Result<Self> {
        let fields = [
            ("rho", rho),
            ("c", c),
            ("bulk_modulus", bulk_modulus),
            ("mu", mu),
            ("eta", eta),
            ("lambda_th", lambda_th),
            ("cp", cp),
            ("omega_c", omega_c),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Domain(format!("air property `{name}` must be finite and positive, got {value}")));
            }
        }
        let k = rho * c * c;
        if ((bulk_modulus - k) / k).abs() > 1e-12 {
            return Err(Error::Domain(format!("bulk modulus {bulk_modulus} inconsistent with rho*c^2 = {k}")));
        }
        Ok(Self { rho, c, bulk_modulus, mu, eta, lambda_th, cp, omega_c })
    }

    /// Air at 20 °C with the loss model evaluated at `omega_c`.
    pub fn standard(omega_c: f64) -> Self {
        Self::new(1.2, 343.0, 1.81e-5, 1.402, 0.0262, 1005.0, omega_c).expect("standard air constants are valid")
    }

    /// Characteristic impedance factor `rho * c`.
    pub fn rho_c(&self) -> f64 {
        self.rho * self.c
    }
}

/// Radius as a function of position along the tube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RadiusProfile {
    /// Cylinder.
    Uniform { radius: f64 },
    /// Radius varying linearly from `inlet` (x = 0) to `outlet` (x = L).
    Conical { inlet: f64, outlet: f64 },
    /// Piecewise-linear radius through tabulated `(positions, radii)`.
    ///
    /// The area slope is taken at each node by the central difference
    /// `(A[i+1] - A[i-1]) / (x[i+1] - x[i-1])` (one-sided at the two ends)
    /// and linearly interpolated between nodes.
    Sampled { positions: Vec<f64>, radii: Vec<f64> },
}

/// Axisymmetric tube: length plus radius profile. Area and circumference
/// are always derived from the radius.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeGeometry {
    length: f64,
    profile: RadiusProfile,
    /// Nodal area slopes for sampled profiles.
    sampled_slopes: Vec<f64>,
}

impl TubeGeometry {
    pub fn new(length: f64, profile: RadiusProfile) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Domain(format!("tube length must be positive, got {length}")));
        }
        let mut sampled_slopes = Vec::new();
        match &profile {
            RadiusProfile::Uniform { radius } => check_radius(*radius)?,
            RadiusProfile::Conical { inlet, outlet } => {
                check_radius(*inlet)?;
                check_radius(*outlet)?;
            }
            RadiusProfile::Sampled { positions, radii } => {
                if positions.len() != radii.len() || positions.len() < 2 {
                    return Err(Error::Domain("sampled profile needs at least two (position, radius) pairs".into()));
                }
                if positions.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Domain("sampled positions must increase strictly".into()));
                }
                let (first, last) = (positions[0], positions[positions.len() - 1]);
                if first > 0.0 || (last - length).abs() > 1e-12 * length && last < length {
                    return Err(Error::Domain(format!(
                        "sampled profile must cover [0, {length}], covers [{first}, {last}]"
                    )));
                }
                for &r in radii {
                    check_radius(r)?;
                }
                let area: Vec<f64> = radii.iter().map(|r| PI * r * r).collect();
                let n = area.len();
                sampled_slopes = (0..n)
                    .map(|i| {
                        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
                        (area[hi] - area[lo]) / (positions[hi] - positions[lo])
                    })
                    .collect();
            }
        }
        Ok(Self { length, profile, sampled_slopes })
    }

    pub fn uniform(length: f64, radius: f64) -> Result<Self> {
        Self::new(length, RadiusProfile::Uniform { radius })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn profile(&self) -> &RadiusProfile {
        &self.profile
    }

    pub fn radius(&self, x: f64) -> f64 {
        match &self.profile {
            RadiusProfile::Uniform { radius } => *radius,
            RadiusProfile::Conical { inlet, outlet } => inlet + (outlet - inlet) * (x / self.length),
            RadiusProfile::Sampled { positions, radii } => {
                let (i, w) = locate(positions, x);
                radii[i] * (1.0 - w) + radii[i + 1] * w
            }
        }
    }

    /// Cross-sectional area `A = pi r^2` (m²).
    pub fn area(&self, x: f64) -> f64 {
        let r = self.radius(x);
        PI * r * r
    }

    /// Circumference `S = 2 pi r` (m).
    pub fn circumference(&self, x: f64) -> f64 {
        2.0 * PI * self.radius(x)
    }

    /// `dA/dx` (m).
    pub fn area_slope(&self, x: f64) -> f64 {
        match &self.profile {
            RadiusProfile::Uniform { .. } => 0.0,
            RadiusProfile::Conical { inlet, outlet } => 2.0 * PI * self.radius(x) * (outlet - inlet) / self.length,
            RadiusProfile::Sampled { positions, .. } => {
                let (i, w) = locate(positions, x);
                self.sampled_slopes[i] * (1.0 - w) + self.sampled_slopes[i + 1] * w
            }
        }
    }
}

fn check_radius(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("radius must be positive, got {r}")))
    }
}

/// Segment index and fractional weight of `x` in a sorted table (clamped).
fn locate(positions: &[f64], x: f64) -> (usize, f64) {
    let n = positions.len();
    let i = match positions.partition_point(|&p| p <= x) {
        0 => 0,
        k => (k - 1).min(n - 2),
    };
    let w = ((x - positions[i]) / (positions[i + 1] - positions[i])).clamp(0.0, 1.0);
    (i, w)
}

/// Viscous (`R`) and thermal (`G`) loss coefficients at position `x`.
///
/// ```text
/// R = (S / A^2) sqrt(omega_c rho mu / 2)
/// G = S (eta - 1) / (rho c^2) sqrt(lambda omega_c / (2 cp rho))
/// ```
pub fn loss_coefficients(air: &AirProperties, geom: &TubeGeometry, x: f64) -> (f64, f64) {
    let s = geom.circumference(x);
    let a = geom.area(x);
    let r = s / (a * a) * (air.omega_c * air.rho * air.mu / 2.0).sqrt();
    let g = s * (air.eta - 1.0) / (air.rho * air.c * air.c)
        * (air.lambda_th * air.omega_c / (2.0 * air.cp * air.rho)).sqrt();
    (r, g)
}

/// Which sign the `R·A/K` part of the `phi_t` coefficient carries in the
/// PDE residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingVariant {
    /// `G·rho/A + R·A/K`, the same operator the finite-difference solver uses.
    #[default]
    Consistent,
    /// `G·rho/A - R·A/K` as printed in the loss display. Residual only; the
    /// solver is unaffected.
    Literal,
}

/// Pointwise coefficients of the horn operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdeCoefficients {
    pub area: f64,
    /// `A_x / A` (1/m).
    pub slope_ratio: f64,
    /// `G·R` (1/m²).
    pub gr: f64,
    /// Coefficient of `phi_t` (s/m²).
    pub damping: f64,
    /// `rho / K = 1/c²` (s²/m²).
    pub inertia: f64,
    /// Viscous coefficient `R`, kept for the pressure relation.
    pub r: f64,
}

impl PdeCoefficients {
    pub fn at(air: &AirProperties, geom: &TubeGeometry, x: f64, variant: DampingVariant) -> Self {
        let (r, g) = loss_coefficients(air, geom, x);
        let area = geom.area(x);
        let ra_k = r * area / air.bulk_modulus;
        let damping = match variant {
            DampingVariant::Consistent => g * air.rho / area + ra_k,
            DampingVariant::Literal => g * air.rho / area - ra_k,
        };
        Self {
            area,
            slope_ratio: geom.area_slope(x) / area,
            gr: g * r,
            damping,
            inertia: air.rho / air.bulk_modulus,
            r,
        }
    }

    /// Residual of the horn equation for given potential derivatives.
    pub fn residual(&self, phi: f64, phi_x: f64, phi_t: f64, phi_xx: f64, phi_tt: f64) -> f64 {
        phi_xx + self.slope_ratio * phi_x - self.gr * phi - self.damping * phi_t - self.inertia * phi_tt
    }
}

/// Coefficients of the time-domain radiation condition
/// `(rho c / A) u_t = alpha p + beta p_t`, together with the Taylor
/// coefficients of the impedance they were derived from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiationCoefficients {
    pub delta: f64,
    pub beta_c: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl RadiationCoefficients {
    /// Inverse of [`radiation_from_taylor`].
    pub fn from_pade(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        radiation_from_taylor(1.0 / alpha, beta / (alpha * alpha))
    }
}

/// Padé coefficients `alpha = 1/delta`, `beta = beta_c/delta^2`.
pub fn radiation_from_taylor(delta: f64, beta_c: f64) -> Result<RadiationCoefficients> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Domain(format!("delta must be positive, got {delta}")));
    }
    Ok(RadiationCoefficients { delta, beta_c, alpha: 1.0 / delta, beta: beta_c / (delta * delta) })
}

/// Smoothed Rosenberg glottal flow, T-periodic.
///
/// The raw pulse rises as `U0 (1 - cos(pi tau/Tp)) / 2` on `[0, Tp]`, falls as
/// `U0 cos(pi (tau - Tp) / (2 Tn))` on `(Tp, Tp + Tn]` and is zero for the
/// rest of the period. Smoothing is a circular convolution with a unit-area
/// Gaussian of standard deviation `smooth_width`, applied exactly in the
/// Fourier domain: the raw Fourier coefficients have closed forms and the
/// Gaussian multiplies harmonic `k` by `exp(-(k w0 s)^2 / 2)`. The series is
/// truncated where that factor drops below 1e-16.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceWaveform {
    /// Peak volume velocity (m³/s).
    pub u0: f64,
    /// Period (s).
    pub period: f64,
    pub tp_frac: f64,
    pub tn_frac: f64,
    /// Gaussian standard deviation (s); zero disables smoothing.
    pub smooth_width: f64,
    /// `c_k * g_k` for k = 0..K.
    harmonics: Vec<Complex64>,
}

const MAX_HARMONICS: usize = 8192;

impl SourceWaveform {
    pub fn new(u0: f64, period: f64, tp_frac: f64, tn_frac: f64, smooth_width: f64) -> Result<Self> {
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::Domain(format!("period must be positive, got {period}")));
        }
        if !(tp_frac > 0.0 && tn_frac > 0.0 && tp_frac + tn_frac <= 1.0) {
            return Err(Error::Domain(format!(
                "Rosenberg fractions need 0 < tp, 0 < tn, tp + tn <= 1 (got {tp_frac}, {tn_frac})"
            )));
        }
        if !(u0.is_finite() && smooth_width.is_finite() && smooth_width >= 0.0) {
            return Err(Error::Domain("amplitude and smoothing width must be finite".into()));
        }
        let mut wave = Self { u0, period, tp_frac, tn_frac, smooth_width, harmonics: Vec::new() };
        if smooth_width > 0.0 {
            let count = (1.4 * period / smooth_width).ceil() as usize + 8;
            if count > MAX_HARMONICS {
                return Err(Error::Domain(format!(
                    "smoothing width {smooth_width} s too narrow for period {period} s"
                )));
            }
            let w0 = 2.0 * PI / period;
            wave.harmonics = (0..=count)
                .map(|k| {
                    let gain = (-0.5 * (k as f64 * w0 * smooth_width).powi(2)).exp();
                    wave.raw_coefficient(k) * gain
                })
                .collect();
        }
        Ok(wave)
    }

    /// Opening duration `Tp` (s).
    pub fn tp(&self) -> f64 {
        self.tp_frac * self.period
    }

    /// Closing duration `Tn` (s).
    pub fn tn(&self) -> f64 {
        self.tn_frac * self.period
    }

    /// Unsmoothed pulse.
    pub fn raw(&self, t: f64) -> f64 {
        let tau = t.rem_euclid(self.period);
        let (tp, tn) = (self.tp(), self.tn());
        if tau <= tp {
            0.5 * self.u0 * (1.0 - (PI * tau / tp).cos())
        } else if tau <= tp + tn {
            self.u0 * (PI * (tau - tp) / (2.0 * tn)).cos()
        } else {
            0.0
        }
    }

    /// Smoothed volume velocity at `t` (m³/s).
    pub fn flow(&self, t: f64) -> f64 {
        if self.harmonics.is_empty() {
            return self.raw(t);
        }
        let tau = t.rem_euclid(self.period);
        let step = Complex64::from_polar(1.0, 2.0 * PI * tau / self.period);
        let mut rot = step;
        let mut sum = 0.0;
        for c in &self.harmonics[1..] {
            sum += (c * rot).re;
            rot *= step;
        }
        self.harmonics[0].re + 2.0 * sum
    }

    /// Period average of the flow, exact (smoothing preserves it).
    pub fn mean(&self) -> f64 {
        self.u0 * (0.5 * self.tp() + 2.0 * self.tn() / PI) / self.period
    }

    /// `(1/T) ∫_0^T raw(t) exp(-i k w0 t) dt`.
    fn raw_coefficient(&self, k: usize) -> Complex64 {
        let w = -(k as f64) * 2.0 * PI / self.period;
        let (tp, tn) = (self.tp(), self.tn());
        let nu_rise = PI / tp;
        let rise = expint(w, 0.0, tp) - 0.5 * (expint(w + nu_rise, 0.0, tp) + expint(w - nu_rise, 0.0, tp));
        let nu = PI / (2.0 * tn);
        let fall = 0.5
            * (Complex64::from_polar(1.0, -nu * tp) * expint(w + nu, tp, tp + tn)
                + Complex64::from_polar(1.0, nu * tp) * expint(w - nu, tp, tp + tn));
        (0.5 * rise + fall) * self.u0 / self.period
    }
}

/// `∫_a^b exp(i w t) dt`.
fn expint(w: f64, a: f64, b: f64) -> Complex64 {
    let h = b - a;
    if (w * h).abs() < 1e-6 {
        // Second-order series about the midpoint; the next term is O((wh)^4).
        let mid = Complex64::from_polar(1.0, w * 0.5 * (a + b));
        mid * h * (1.0 - (w * h).powi(2) / 24.0)
    } else {
        (Complex64::from_polar(1.0, w * b) - Complex64::from_polar(1.0, w * a)) / Complex64::new(0.0, w)
    }
}

/// `p = R·A·phi + rho·phi_t` (Pa).
pub fn pressure_from_potential(phi: f64, phi_t: f64, r: f64, area: f64, rho: f64) -> f64 {
    r * area * phi + rho * phi_t
}

/// `u = -A·phi_x` (m³/s).
pub fn volume_velocity_from_potential(phi_x: f64, area: f64) -> f64 {
    -area * phi_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const F0: f64 = 261.6;

    fn std_air() -> AirProperties {
        AirProperties::standard(2.0 * PI * F0)
    }

    fn default_source() -> SourceWaveform {
        let t = 1.0 / F0;
        SourceWaveform::new(5e-4, t, 0.40, 0.16, t / 200.0).unwrap()
    }

    #[test]
    fn loss_coefficients_match_direct_evaluation() {
        // Frozen from an independent scalar evaluation of the loss model.
        let geom = TubeGeometry::uniform(1.0, 0.02).unwrap();
        let (r, g) = loss_coefficients(&std_air(), &geom, 0.3);
        assert!((r - 10631.972695664717).abs() < 1e-9 * r);
        assert!((g - 4.781203501694976e-08).abs() < 1e-9 * g);
    }

    #[test]
    fn zero_viscosity_and_unit_eta_kill_losses() {
        let geom = TubeGeometry::uniform(1.0, 0.02).unwrap();
        let mut air = std_air();
        air.mu = 0.0;
        assert_eq!(loss_coefficients(&air, &geom, 0.5).0, 0.0);
        let mut air = std_air();
        air.eta = 1.0;
        assert_eq!(loss_coefficients(&air, &geom, 0.5).1, 0.0);
    }

    #[test]
    fn loss_coefficients_scale_with_square_root() {
        let geom = TubeGeometry::uniform(1.0, 0.02).unwrap();
        let base = std_air();
        let (r0, g0) = loss_coefficients(&base, &geom, 0.1);
        let mut air = base;
        air.mu *= 2.0;
        air.lambda_th *= 2.0;
        let (r1, g1) = loss_coefficients(&air, &geom, 0.1);
        assert!((r1 / r0 - 2f64.sqrt()).abs() < 1e-12);
        assert!((g1 / g0 - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn air_validation() {
        assert!(AirProperties::new(1.2, 343.0, 1.81e-5, 1.4, 0.026, 1005.0, 0.0).is_err());
        let k = 1.2 * 343.0 * 343.0;
        assert!(AirProperties::with_bulk_modulus(1.2, 343.0, k * (1.0 + 1e-9), 1e-5, 1.4, 0.02, 1e3, 1.0).is_err());
        assert_eq!(std_air().bulk_modulus, k);
    }

    #[test]
    fn taylor_to_pade() {
        let rc = radiation_from_taylor(0.8236, 0.5).unwrap();
        assert_eq!(format!("{:.4}", rc.alpha), "1.2142");
        assert_eq!(format!("{:.4}", rc.beta), "0.7371");
        let id = radiation_from_taylor(1.0, 0.0).unwrap();
        assert_eq!((id.alpha, id.beta), (1.0, 0.0));
        let half = radiation_from_taylor(0.5, 0.25).unwrap();
        assert_eq!((half.alpha, half.beta), (2.0, 1.0));
        assert!(matches!(radiation_from_taylor(0.0, 0.5), Err(Error::Domain(_))));
        assert!(radiation_from_taylor(-1.0, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn pade_round_trip(alpha in 0.01f64..10.0, beta in -5.0f64..5.0) {
            let rc = RadiationCoefficients::from_pade(alpha, beta).unwrap();
            prop_assert!((rc.alpha - alpha).abs() <= 1e-12 * alpha);
            prop_assert!((rc.beta - beta).abs() <= 1e-12 * beta.abs().max(1e-300));
        }

        #[test]
        fn field_relations_are_linear(
            a in -10.0f64..10.0, b in -10.0f64..10.0,
            p1 in -5.0f64..5.0, q1 in -5.0f64..5.0, p2 in -5.0f64..5.0, q2 in -5.0f64..5.0,
        ) {
            let (r, area, rho) = (3.0, 0.7, 1.2);
            let lhs = pressure_from_potential(a * p1 + b * p2, a * q1 + b * q2, r, area, rho);
            let rhs = a * pressure_from_potential(p1, q1, r, area, rho)
                + b * pressure_from_potential(p2, q2, r, area, rho);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            let lhs = volume_velocity_from_potential(a * p1 + b * p2, area);
            let rhs = a * volume_velocity_from_potential(p1, area)
                + b * volume_velocity_from_potential(p2, area);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn field_relation_examples() {
        assert_eq!(pressure_from_potential(0.0, 0.0, 5.0, 7.0, 11.0), 0.0);
        assert_eq!(pressure_from_potential(2.0, 3.0, 0.0, 7.0, 11.0), 33.0);
        assert_eq!(pressure_from_potential(2.0, 3.0, 5.0, 7.0, 11.0), 103.0);
        assert_eq!(volume_velocity_from_potential(0.0, 2.0), 0.0);
        assert_eq!(volume_velocity_from_potential(-1.0, 2.0), 2.0);
        assert_eq!(volume_velocity_from_potential(3.0, 0.5), -1.5);
    }

    #[test]
    fn rosenberg_peak_and_closed_phase() {
        let src = default_source();
        assert_eq!(src.raw(src.tp()), src.u0);
        // Middle of the closed phase is tens of smoothing widths from any edge.
        let t_closed = (src.tp_frac + src.tn_frac + 1.0) * 0.5 * src.period;
        assert!(src.flow(t_closed).abs() < 1e-9 * src.u0);
    }

    #[test]
    fn rosenberg_mean_matches_quadrature() {
        let src = default_source();
        let n = 100_000;
        let h = src.period / n as f64;
        // Periodic trapezoid rule on the raw pulse; smoothing preserves the mean.
        let quad: f64 = (0..n).map(|i| src.raw(i as f64 * h)).sum::<f64>() / n as f64;
        let smoothed: f64 = (0..n).map(|i| src.flow(i as f64 * h)).sum::<f64>() / n as f64;
        assert!((src.mean() - quad).abs() < 1e-6 * quad);
        assert!((smoothed - quad).abs() < 1e-6 * quad);
    }

    #[test]
    fn rosenberg_smoothing_tracks_raw_away_from_kinks() {
        let src = default_source();
        // Mid-rise the raw pulse is smooth, so smoothing changes it by O(s^2 u'').
        let t = 0.5 * src.tp();
        let rel = (src.flow(t) - src.raw(t)).abs() / src.u0;
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn rosenberg_is_periodic() {
        use rand::{Rng, SeedableRng};
        let src = default_source();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = rng.gen_range(0.0..src.period);
            assert!((src.flow(t) - src.flow(t + src.period)).abs() < 1e-12 * src.u0);
        }
        assert!((src.flow(0.0) - src.flow(src.period)).abs() < 1e-12 * src.u0);
    }

    #[test]
    fn source_validation() {
        assert!(SourceWaveform::new(1.0, 1.0, 0.7, 0.4, 0.0).is_err());
        assert!(SourceWaveform::new(1.0, 1.0, 0.0, 0.4, 0.0).is_err());
        assert!(SourceWaveform::new(1.0, 1.0, 0.4, 0.16, 1e-9).is_err());
    }

    #[test]
    fn conical_and_sampled_slopes() {
        let cone = TubeGeometry::new(2.0, RadiusProfile::Conical { inlet: 0.01, outlet: 0.03 }).unwrap();
        let x = 0.7;
        let h = 1e-6;
        let fd = (cone.area(x + h) - cone.area(x - h)) / (2.0 * h);
        assert!((cone.area_slope(x) - fd).abs() < 1e-9);
        assert_eq!(cone.circumference(x), 2.0 * PI * cone.radius(x));

        let positions: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let radii: Vec<f64> = positions.iter().map(|&p| cone.radius(p)).collect();
        let table = TubeGeometry::new(2.0, RadiusProfile::Sampled { positions, radii }).unwrap();
        assert!((table.radius(x) - cone.radius(x)).abs() < 1e-15);
        // Central differences of a quadratic area are exact at nodes.
        assert!((table.area_slope(1.0) - cone.area_slope(1.0)).abs() < 1e-12);
        assert!(TubeGeometry::uniform(1.0, 0.0).is_err());
    }

    #[test]
    fn damping_variants_differ_only_in_ra_term() {
        let geom = TubeGeometry::uniform(1.0, 0.02).unwrap();
        let air = std_air();
        let a = PdeCoefficients::at(&air, &geom, 0.5, DampingVariant::Consistent);
        let b = PdeCoefficients::at(&air, &geom, 0.5, DampingVariant::Literal);
        let ra_k = a.r * a.area / air.bulk_modulus;
        assert!((a.damping - b.damping - 2.0 * ra_k).abs() < 1e-18);
    }
}
