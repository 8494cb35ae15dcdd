//! Gas-lift oil well benchmark.
//!
//! Three mass balances (gas in the annulus, gas and oil in the tubing) driven
//! by the gas-injection choke `u_1` and the production choke `u_2`. The
//! continuous dynamics are discretized with explicit Euler; [`GasLift`] is an
//! exact quasi-LPV rewrite of one Euler step with eight scheduling variables.
//!
//! All quantities are SI (Pa, kg, s). The LPV output is `(P_t, w_g,in)`; the
//! bottom-hole pressure is `P_fp = P_t + μ_o g H_fp`.

use alloc::format;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{check_len, ModelError};
use crate::model::{BoxSet, Dims, LpvMatrices, ModelSets, NonlinearPlant, Qlpv, SchedulingSet};

pub const BAR: f64 = 1e5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GasLiftParams {
    pub k_cgl: f64,
    pub k_inj: f64,
    pub k_cp: f64,
    pub i_p: f64,
    pub p_fg: f64,
    pub p_r: f64,
    pub p_s: f64,
    pub g_go: f64,
    pub t_a: f64,
    pub t_t: f64,
    pub r: f64,
    pub m_g: f64,
    pub v_a: f64,
    pub v_t: f64,
    pub h_a: f64,
    pub h_t: f64,
    pub h_fp: f64,
    pub a_t: f64,
    pub mu_o: f64,
    pub g: f64,
    pub ts: f64,
}

impl Default for GasLiftParams {
    fn default() -> Self {
        Self {
            k_cgl: 2e-3,
            k_inj: 1e-4,
            k_cp: 2e-3,
            i_p: 2.6e-6,
            p_fg: 191.0 * BAR,
            p_r: 150.0 * BAR,
            p_s: 20.0 * BAR,
            g_go: 0.01,
            t_a: 301.0,
            t_t: 305.0,
            r: 8.31,
            m_g: 0.028,
            v_a: 24.8343,
            v_t: 17.2485,
            h_a: 1500.0,
            h_t: 1500.0,
            h_fp: 500.0,
            a_t: 0.0115,
            mu_o: 900.0,
            g: 9.81,
            ts: 5.0,
        }
    }
}

impl GasLiftParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("K_cgl", self.k_cgl),
            ("K_inj", self.k_inj),
            ("K_cp", self.k_cp),
            ("i_P", self.i_p),
            ("P_fg", self.p_fg),
            ("P_r", self.p_r),
            ("P_s", self.p_s),
            ("T_a", self.t_a),
            ("T_t", self.t_t),
            ("R", self.r),
            ("M_g", self.m_g),
            ("V_a", self.v_a),
            ("V_t", self.v_t),
            ("H_a", self.h_a),
            ("H_t", self.h_t),
            ("H_fp", self.h_fp),
            ("A_t", self.a_t),
            ("mu_o", self.mu_o),
            ("g", self.g),
            ("T_s", self.ts),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::Invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.g_go > 0.0 && self.g_go < 1.0) {
            return Err(ModelError::Invalid(format!("g_go must lie in (0, 1), got {}", self.g_go)));
        }
        Ok(())
    }

    /// Oil mass that fills the tubing; `x_3` must stay below it.
    pub fn tubing_oil_capacity(&self) -> f64 {
        self.v_t * self.mu_o
    }

    /// `μ_o g H_fp`, the constant between tubing pressure and bottom-hole pressure.
    pub fn column_offset(&self) -> f64 {
        self.mu_o * self.g * self.h_fp
    }

    fn coeffs(&self) -> Coeffs {
        let c_a = self.t_a * self.r / (self.m_g * self.v_a) + self.g * self.h_a / self.v_a;
        let c_mu = self.m_g / (self.t_a * self.r) * c_a;
        Coeffs {
            c_a,
            sqrt_c_mu: c_mu.sqrt(),
            c_tt: self.t_t * self.r * self.mu_o / self.m_g,
            g_over_at: self.g / self.a_t,
            oil_cap: self.tubing_oil_capacity(),
            offset: self.column_offset(),
        }
    }
}

/// Derived constants shared by the plant and the LPV form.
#[derive(Debug, Clone, Copy)]
struct Coeffs {
    /// `P_a = c_a x_1`
    c_a: f64,
    /// `√(μ_a / x_1)`
    sqrt_c_mu: f64,
    /// `P_tt = c_tt x_2 / (V_t μ_o − x_3)`
    c_tt: f64,
    g_over_at: f64,
    oil_cap: f64,
    offset: f64,
}

/// Pressures common to flows and proxy.
#[derive(Debug, Clone, Copy)]
struct Pressures {
    p_a: f64,
    p_tt: f64,
    p_t: f64,
    p_fp: f64,
}

fn pressures(c: &Coeffs, x: &DVector<f64>) -> Pressures {
    let p_a = c.c_a * x[0];
    let p_tt = c.c_tt * x[1] / (c.oil_cap - x[2]);
    let p_t = p_tt + (x[1] + x[2]) * c.g_over_at;
    Pressures { p_a, p_tt, p_t, p_fp: p_t + c.offset }
}

/// Instantaneous flows (kg/s), pressures (Pa) and densities (kg/m³).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flows {
    pub w_g_in: f64,
    pub w_g_inj: f64,
    pub w_o_res: f64,
    pub w_g_res: f64,
    pub w_mgo: f64,
    pub w_g_out: f64,
    pub w_o_out: f64,
    pub p_a: f64,
    pub p_tt: f64,
    pub p_t: f64,
    pub p_fp: f64,
    pub mu_a: f64,
    pub mu_t: f64,
}

fn check_state(p: &GasLiftParams, x: &DVector<f64>) -> Result<(), ModelError> {
    check_len("gas-lift state", 3, x.len())?;
    if !(x[0] > 0.0 && x[1] > 0.0 && x[2] > 0.0) {
        return Err(ModelError::Domain(format!("masses must be positive, got ({}, {}, {})", x[0], x[1], x[2])));
    }
    if x[2] >= p.tubing_oil_capacity() {
        return Err(ModelError::Domain(format!(
            "oil mass {} fills the tubing (capacity {})",
            x[2],
            p.tubing_oil_capacity()
        )));
    }
    Ok(())
}

pub fn flows_and_pressures(p: &GasLiftParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<Flows, ModelError> {
    check_state(p, x)?;
    check_len("gas-lift input", 2, u.len())?;
    let c = p.coeffs();
    let pr = pressures(&c, x);
    let mu_a = p.m_g / (p.t_a * p.r) * pr.p_a;
    let mu_t = (x[1] + x[2]) / p.v_t;
    let w_g_in = p.k_cgl * (mu_a * (p.p_fg - pr.p_a)).max(0.0).sqrt() * u[0];
    let w_g_inj = p.k_inj * (mu_a * (pr.p_a - pr.p_t)).max(0.0).sqrt();
    let w_o_res = p.i_p * (p.p_r - pr.p_fp).max(0.0);
    let w_g_res = p.g_go * w_o_res;
    let w_mgo = p.k_cp * (mu_t * (pr.p_tt - p.p_s)).max(0.0).sqrt() * u[1];
    let total = x[1] + x[2];
    Ok(Flows {
        w_g_in,
        w_g_inj,
        w_o_res,
        w_g_res,
        w_mgo,
        w_g_out: x[1] / total * w_mgo,
        w_o_out: x[2] / total * w_mgo,
        p_a: pr.p_a,
        p_tt: pr.p_tt,
        p_t: pr.p_t,
        p_fp: pr.p_fp,
        mu_a,
        mu_t,
    })
}

/// Right-hand side of the mass balances.
pub fn derivative(p: &GasLiftParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    let f = flows_and_pressures(p, x, u)?;
    Ok(DVector::from_vec(alloc::vec![f.w_g_in - f.w_g_inj, f.w_g_inj + f.w_g_res - f.w_g_out, f.w_o_res - f.w_o_out,]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: DVector<f64>,
    /// A sub-step left the physical domain and the state was projected onto `state_box`.
    pub projected: bool,
}

/// Advances one sample with `substeps` explicit Euler steps of `T_s / substeps`.
pub fn plant_step(
    p: &GasLiftParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    substeps: usize,
    state_box: &BoxSet,
) -> Result<StepOutcome, ModelError> {
    let n = substeps.max(1);
    let h = p.ts / n as f64;
    let mut state = x.clone();
    let mut projected = false;
    for _ in 0..n {
        state += derivative(p, &state, u)? * h;
        if check_state(p, &state).is_err() {
            state = state_box.clamp(&state);
            projected = true;
            check_state(p, &state)?;
        }
    }
    Ok(StepOutcome { state, projected })
}

/// Controlled outputs `(P_fp, w_g,in)`.
pub fn gaslift_outputs(p: &GasLiftParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    let f = flows_and_pressures(p, x, u)?;
    Ok(DVector::from_vec(alloc::vec![f.p_fp, f.w_g_in]))
}

/// Default admissible state box: all masses at least 100 kg, gas masses at most
/// 6000 kg and oil at most 90 % of the tubing capacity.
pub fn default_state_box(p: &GasLiftParams) -> BoxSet {
    BoxSet::new(
        DVector::from_vec(alloc::vec![100.0, 100.0, 100.0]),
        DVector::from_vec(alloc::vec![6000.0, 6000.0, 0.9 * p.tubing_oil_capacity()]),
    )
    .expect("default gas-lift state box is well formed")
}

pub fn default_input_box() -> BoxSet {
    BoxSet::new(DVector::zeros(2), DVector::from_element(2, 1.0)).expect("unit box")
}

/// Default box on the LPV output `(P_t, w_g,in)`.
pub fn default_output_box() -> BoxSet {
    BoxSet::new(DVector::zeros(2), DVector::from_vec(alloc::vec![400.0 * BAR, 50.0])).expect("output box")
}

/// The nonlinear plant seen through the LPV output map (`y = (P_t, w_g,in)`).
#[derive(Debug, Clone)]
pub struct GasLiftPlant {
    pub params: GasLiftParams,
    pub substeps: usize,
}

impl GasLiftPlant {
    pub fn new(params: GasLiftParams, substeps: usize) -> Self {
        Self { params, substeps: substeps.max(1) }
    }
}

impl NonlinearPlant for GasLiftPlant {
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let h = self.params.ts / self.substeps as f64;
        let mut state = x.clone();
        for _ in 0..self.substeps {
            state += derivative(&self.params, &state, u)? * h;
        }
        Ok(state)
    }

    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let f = flows_and_pressures(&self.params, x, u)?;
        Ok(DVector::from_vec(alloc::vec![f.p_t, f.w_g_in]))
    }
}

/// Quasi-LPV form of the single-step Euler gas-lift model.
#[derive(Debug, Clone)]
pub struct GasLift {
    params: GasLiftParams,
    coeffs: Coeffs,
    sets: ModelSets,
}

/// Builds the LPV model with default admissible sets; `𝒫` is the exact image
/// of the state box under the proxy.
pub fn gaslift_qlpv(params: GasLiftParams) -> Result<GasLift, ModelError> {
    let state = default_state_box(&params);
    GasLift::with_boxes(params, state, default_input_box(), default_output_box())
}

impl GasLift {
    pub fn with_boxes(params: GasLiftParams, state: BoxSet, input: BoxSet, output: BoxSet) -> Result<Self, ModelError> {
        params.validate()?;
        check_len("state box", 3, state.dim())?;
        check_len("input box", 2, input.dim())?;
        check_len("output box", 2, output.dim())?;
        if state.lower().iter().any(|v| *v <= 0.0) || state.upper()[2] >= params.tubing_oil_capacity() {
            return Err(ModelError::Invalid("state box must stay inside the physical domain".into()));
        }
        let coeffs = params.coeffs();
        let placeholder = SchedulingSet::new(BoxSet::new(DVector::zeros(8), DVector::zeros(8))?)?;
        let mut model = Self { params, coeffs, sets: ModelSets { state, input, output, scheduling: placeholder } };
        let hull = crate::model::scheduling_hull(&model, &model.sets.state, 2)?;
        model.sets.scheduling = SchedulingSet::new(hull)?;
        Ok(model)
    }

    pub fn params(&self) -> &GasLiftParams {
        &self.params
    }

    /// Image of a state sub-box under the proxy; exact because each proxy
    /// component is monotone in every state coordinate.
    pub fn scheduling_box_of(&self, states: &BoxSet) -> Result<BoxSet, ModelError> {
        crate::model::scheduling_hull(self, states, 2)
    }
}

impl Qlpv for GasLift {
    fn dims(&self) -> Dims {
        Dims { n_x: 3, n_u: 2, n_y: 2, n_rho: 8 }
    }

    fn matrices(&self, r: &DVector<f64>) -> LpvMatrices {
        let p = &self.params;
        let c = &self.coeffs;
        let ts = p.ts;
        let inj = ts * p.k_inj * c.sqrt_c_mu * r[1] * r[2];
        let res = ts * p.i_p * r[3];
        let prod = ts * p.k_cp / p.v_t.sqrt();
        let gin = p.k_cgl * c.sqrt_c_mu * r[0] * r[1];
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(3, 3, &[
            1.0, 0.0, -inj,
            0.0, 1.0 + p.g_go * res, inj,
            0.0, res, 1.0,
        ]);
        #[rustfmt::skip]
        let b = DMatrix::from_row_slice(3, 2, &[
            ts * gin, 0.0,
            0.0, -prod * r[4] * r[6],
            0.0, -prod * r[5] * r[6],
        ]);
        #[rustfmt::skip]
        let cm = DMatrix::from_row_slice(2, 3, &[
            0.0, c.g_over_at + c.c_tt * r[7], c.g_over_at,
            0.0, 0.0, 0.0,
        ]);
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, gin, 0.0]);
        LpvMatrices { a, b, c: cm, d }
    }

    fn proxy(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_proxy_domain(&self.coeffs, x)?;
        let p = &self.params;
        let c = &self.coeffs;
        let pr = pressures(c, x);
        let total = x[1] + x[2];
        Ok(DVector::from_vec(alloc::vec![
            (p.p_fg - pr.p_a).max(0.0).sqrt(),
            x[0].sqrt(),
            (pr.p_a - pr.p_t).max(0.0).sqrt() / x[2],
            (p.p_r - pr.p_fp).max(0.0) / x[1],
            x[1] / total.sqrt(),
            x[2] / total.sqrt(),
            (pr.p_tt - p.p_s).max(0.0).sqrt(),
            1.0 / (c.oil_cap - x[2]),
        ]))
    }

    fn proxy_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        check_proxy_domain(&self.coeffs, x)?;
        let p = &self.params;
        let c = &self.coeffs;
        let pr = pressures(c, x);
        let den = c.oil_cap - x[2];
        // gradients of P_a, P_tt, P_t with respect to (x1, x2, x3)
        let d_pa = [c.c_a, 0.0, 0.0];
        let d_ptt = [0.0, c.c_tt / den, c.c_tt * x[1] / (den * den)];
        let d_pt = [0.0, d_ptt[1] + c.g_over_at, d_ptt[2] + c.g_over_at];
        let mut j = DMatrix::zeros(8, 3);

        let a1 = p.p_fg - pr.p_a;
        if a1 > 0.0 {
            let s = a1.sqrt();
            for k in 0..3 {
                j[(0, k)] = -d_pa[k] / (2.0 * s);
            }
        }

        j[(1, 0)] = 0.5 / x[0].sqrt();

        let a3 = pr.p_a - pr.p_t;
        let s3 = a3.max(0.0).sqrt();
        for k in 0..3 {
            let ds = if a3 > 0.0 { (d_pa[k] - d_pt[k]) / (2.0 * s3) } else { 0.0 };
            j[(2, k)] = ds / x[2];
        }
        j[(2, 2)] -= s3 / (x[2] * x[2]);

        let m = (p.p_r - pr.p_fp).max(0.0);
        if m > 0.0 {
            for k in 0..3 {
                j[(3, k)] = -d_pt[k] / x[1];
            }
        }
        j[(3, 1)] -= m / (x[1] * x[1]);

        let total = x[1] + x[2];
        let t12 = total.sqrt();
        let t32 = total * t12;
        j[(4, 1)] = 1.0 / t12 - 0.5 * x[1] / t32;
        j[(4, 2)] = -0.5 * x[1] / t32;
        j[(5, 1)] = -0.5 * x[2] / t32;
        j[(5, 2)] = 1.0 / t12 - 0.5 * x[2] / t32;

        let a7 = pr.p_tt - p.p_s;
        if a7 > 0.0 {
            let s = a7.sqrt();
            for k in 0..3 {
                j[(6, k)] = d_ptt[k] / (2.0 * s);
            }
        }

        j[(7, 2)] = 1.0 / (den * den);
        Ok(j)
    }

    fn sets(&self) -> &ModelSets {
        &self.sets
    }

    fn sample_time(&self) -> f64 {
        self.params.ts
    }

    fn output_offset(&self) -> DVector<f64> {
        DVector::from_vec(alloc::vec![self.coeffs.offset, 0.0])
    }
}

fn check_proxy_domain(c: &Coeffs, x: &DVector<f64>) -> Result<(), ModelError> {
    check_len("gas-lift state", 3, x.len())?;
    if x[0] < 0.0 {
        return Err(ModelError::Singular { component: "rho_2 (x_1 < 0)", value: x[0] });
    }
    if x[2] <= 0.0 {
        return Err(ModelError::Singular { component: "rho_3 (x_3 <= 0)", value: x[2] });
    }
    if x[1] <= 0.0 {
        return Err(ModelError::Singular { component: "rho_4 (x_2 <= 0)", value: x[1] });
    }
    if x[2] >= c.oil_cap {
        return Err(ModelError::Singular { component: "rho_8 (x_3 >= V_t mu_o)", value: x[2] });
    }
    Ok(())
}
