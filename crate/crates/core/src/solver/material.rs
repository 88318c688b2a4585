//! Material model for the mixture flow: phase-shifted densities, the
//! three-regime friction law, the equilibrium sediment concentration, and the
//! erosion/deposition exchange rate.
//!
//! Specific weights are relative to water (water = 1). The transition rate
//! `r_c` moves the finest bed fraction into the interstitial fluid: the fluid
//! density rises to ρ = 1 + r_c·σ while the effective bed packing drops to
//! C_* = C_*0·(1 − r_c).

use crate::error::{Error, Result};

/// Physical parameters of one simulation case. All fields are configurable;
/// the defaults are the calibrated set for a 1-m granite-catchment run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    /// Mean sediment diameter d_m (m).
    pub d_m: f64,
    /// Erodible depth D_e below the initial bed (m).
    pub d_e: f64,
    /// Internal friction angle φ (degrees).
    pub phi_deg: f64,
    /// Transition rate r_c of fines into the interstitial fluid (–).
    pub r_c: f64,
    /// Subsequent clear-water discharge per unit area Q_add (m/s).
    pub q_add: f64,
    /// Duration of the subsequent water supply T_add (s).
    pub t_add: f64,
    /// Manning roughness n_m (s/m^{1/3}).
    pub n_m: f64,
    /// Sediment specific weight σ relative to water (–).
    pub sigma: f64,
    /// Bed sediment concentration before the phase shift C_*0 (–).
    pub c_star0: f64,
    /// Erosion coefficient δ_e (–).
    pub delta_e: f64,
    /// Deposition coefficient δ_d (–).
    pub delta_d: f64,
    /// Gravitational acceleration g (m/s²).
    pub g: f64,
    /// Wet/dry depth threshold (m); shallower cells carry no momentum.
    pub h_min: f64,
    /// CFL number for the adaptive time step (–).
    pub courant: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            d_m: 0.02,
            d_e: 1.0,
            phi_deg: 25.0,
            r_c: 0.1,
            q_add: 0.1,
            t_add: 100.0,
            n_m: 0.03,
            sigma: 2.65,
            c_star0: 0.65,
            delta_e: 0.0007,
            delta_d: 0.05,
            g: 9.81,
            h_min: 1e-4,
            courant: 0.4,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_m, self.d_e, self.phi_deg, self.r_c, self.q_add, self.t_add, self.n_m,
            self.sigma, self.c_star0, self.delta_e, self.delta_d, self.g, self.h_min,
            self.courant,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("material parameters must be finite"));
        }
        if self.d_m <= 0.0 || self.d_e <= 0.0 || self.g <= 0.0 {
            return Err(Error::domain("d_m, d_e, and g must be positive"));
        }
        if self.n_m < 0.0 {
            return Err(Error::domain("Manning roughness must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.r_c) {
            return Err(Error::domain(format!("r_c must lie in [0, 1), got {}", self.r_c)));
        }
        if !(self.c_star0 > 0.0 && self.c_star0 < 1.0) {
            return Err(Error::domain(format!("c_star0 must lie in (0, 1), got {}", self.c_star0)));
        }
        if !(self.courant > 0.0 && self.courant <= 1.0) {
            return Err(Error::domain(format!("courant must lie in (0, 1], got {}", self.courant)));
        }
        if self.sigma <= 1.0 {
            return Err(Error::domain(format!("sigma must exceed 1, got {}", self.sigma)));
        }
        if !(self.phi_deg > 0.0 && self.phi_deg < 90.0) {
            return Err(Error::domain(format!("phi must lie in (0, 90) degrees, got {}", self.phi_deg)));
        }
        if self.q_add < 0.0 || self.t_add < 0.0 {
            return Err(Error::domain("q_add and t_add must be non-negative"));
        }
        if self.delta_e < 0.0 || self.delta_d < 0.0 {
            return Err(Error::domain("delta_e and delta_d must be non-negative"));
        }
        if self.h_min <= 0.0 {
            return Err(Error::domain("h_min must be positive"));
        }
        Ok(())
    }
}

/// Quantities derived from [`MaterialParams`] once per case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedMaterial {
    /// Interstitial fluid specific weight ρ = 1 + r_c·σ (–).
    pub rho: f64,
    /// Bed concentration after the phase shift C_* = C_*0·(1 − r_c) (–).
    pub c_star: f64,
    /// tan φ, precomputed from the friction angle.
    pub tan_phi: f64,
}

/// ρ = 1 + r_c·σ and C_* = C_*0·(1 − r_c).
pub fn derive_material(p: &MaterialParams) -> Result<DerivedMaterial> {
    p.validate()?;
    let rho = 1.0 + p.r_c * p.sigma;
    let c_star = p.c_star0 * (1.0 - p.r_c);
    if rho >= p.sigma {
        return Err(Error::domain(format!(
            "fluid density rho = {rho} must stay below sediment density sigma = {}; lower r_c",
            p.sigma
        )));
    }
    // The friction-regime blending bands around C = 0.01 and C = 0.4·C_*
    // must not overlap.
    if 0.36 * c_star <= 0.011 {
        return Err(Error::domain(format!(
            "phase-shifted bed concentration C_* = {c_star} is too small for distinct friction regimes"
        )));
    }
    Ok(DerivedMaterial { rho, c_star, tan_phi: p.phi_deg.to_radians().tan() })
}

/// Friction coefficient K such that S_fx = K·√(u²+v²)·u (and S_fy with v).
///
/// Three regimes by concentration — stony (C ≥ 0.4C_*), hyper-concentrated
/// (0.01 ≤ C < 0.4C_*), and clear water (Manning) — linearly blended across
/// bands of half-width 0.1·threshold so K is continuous in C. The stony
/// expression diverges as C → C_*; it is evaluated at min(C, 0.95·C_*).
pub fn friction_factor(c: f64, h: f64, p: &MaterialParams, d: &DerivedMaterial) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    let water = |h: f64| p.n_m * p.n_m / (h * h.cbrt());
    let hyper = |h: f64| p.d_m * p.d_m / (0.49 * p.g * h * h * h);
    let stony = |c: f64, h: f64| {
        let cc = c.min(0.95 * d.c_star);
        let density = cc + (1.0 - cc) * d.rho / p.sigma;
        let dilatancy = (d.c_star / cc).cbrt() - 1.0;
        p.d_m * p.d_m / (8.0 * p.g * h * h * h * density * dilatancy * dilatancy)
    };

    let t1 = 0.01;
    let t2 = 0.4 * d.c_star;
    if c < 0.9 * t1 {
        water(h)
    } else if c <= 1.1 * t1 {
        let w = (c - 0.9 * t1) / (0.2 * t1);
        (1.0 - w) * water(h) + w * hyper(h)
    } else if c < 0.9 * t2 {
        hyper(h)
    } else if c <= 1.1 * t2 {
        let w = (c - 0.9 * t2) / (0.2 * t2);
        (1.0 - w) * hyper(h) + w * stony(c, h)
    } else {
        stony(c, h)
    }
}

/// Friction slopes (S_fx, S_fy) for one cell. Dry cells (h < h_min) return
/// zero. Both components share the regime factor; each carries its own
/// velocity component, so friction always opposes the motion.
pub fn friction_slope(
    u: f64,
    v: f64,
    h: f64,
    c: f64,
    p: &MaterialParams,
    d: &DerivedMaterial,
) -> (f64, f64) {
    if h < p.h_min {
        return (0.0, 0.0);
    }
    let speed = u.hypot(v);
    let k = friction_factor(c, h, p, d);
    (k * speed * u, k * speed * v)
}

/// Equilibrium sediment concentration C_∞ for a water-surface gradient
/// tanθ_w and depth h.
///
/// Five branches over tanθ_w: fully developed stony flow (≥ tanφ), the
/// gravitational equilibrium ratio, its squared transitional form, a
/// bed-load form controlled by the Shields number for gentle slopes, and
/// zero below the critical tractive force. The result is clamped to
/// [0, 0.9·C_*]; the upper clamp also keeps the erosion-rate denominator
/// away from zero.
pub fn equilibrium_concentration(
    tan_theta_w: f64,
    h: f64,
    p: &MaterialParams,
    d: &DerivedMaterial,
) -> f64 {
    let t = tan_theta_w.abs();
    let (rho, sigma) = (d.rho, p.sigma);
    let raw = if t >= d.tan_phi {
        0.9 * d.c_star
    } else if t >= 0.138 {
        rho * t / ((sigma - rho) * (d.tan_phi - t))
    } else if t >= 0.03 {
        let ratio = rho * t / ((sigma - rho) * (d.tan_phi - t));
        6.7 * ratio * ratio
    } else {
        // Shields number and its critical value for gentle slopes.
        let tau = rho / (sigma - rho) * h * t / p.d_m;
        let tau_c = 0.04 * (1.72 * t * std::f64::consts::LN_10).exp();
        if tau > tau_c {
            let x = sigma * t / (sigma - rho);
            let alpha_sq = (2.0 * (0.425 - x) / (1.0 - x)).max(0.0);
            let alpha = alpha_sq.sqrt();
            rho / (sigma - rho)
                * (1.0 + 5.0 * t)
                * t
                * (1.0 - alpha_sq * tau_c / tau)
                * (1.0 - alpha * (tau_c / tau).sqrt())
        } else {
            0.0
        }
    };
    raw.clamp(0.0, 0.9 * d.c_star)
}

/// Bed-exchange speed i (m/s): positive = erosion (bed to flow), negative =
/// deposition. Erosion activates when the flow is below its equilibrium
/// concentration and scales with depth and speed; deposition is a settling
/// flux proportional to the concentration excess.
pub fn erosion_deposition_rate(
    c: f64,
    c_inf: f64,
    h: f64,
    speed: f64,
    p: &MaterialParams,
    d: &DerivedMaterial,
) -> f64 {
    if c_inf >= c {
        p.delta_e * (c_inf - c) / (d.c_star - c_inf) * h * speed / p.d_m
    } else {
        p.delta_d * (c_inf - c) / d.c_star * speed
    }
}
