//! Concrete environments: a stochastic discounted LQR task and an
//! RK4-discretised cart-pendulum.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite_mat, ensure_finite_vec, psd_sqrt, Mat, Vector};
use crate::mdp::{standard_normal_vector, Environment};

/// Gaussian noise source `N(mean, cov)` with a precomputed square-root factor.
/// A zero covariance draws nothing from the generator.
#[derive(Debug, Clone)]
struct Gaussian {
    factor: Option<Mat>,
}

impl Gaussian {
    fn new(cov: &Mat) -> Result<Self> {
        if cov.iter().all(|&x| x == 0.0) {
            return Ok(Gaussian { factor: None });
        }
        Ok(Gaussian {
            factor: Some(psd_sqrt(cov)?),
        })
    }

    fn perturb(&self, x: &mut Vector, rng: &mut dyn RngCore) {
        if let Some(l) = &self.factor {
            *x += l * standard_normal_vector(rng, x.len());
        }
    }
}

/// `s⁺ = A s + B a + w`, `w ~ N(0, Σ_w)`, stage cost `sᵀQs + aᵀRa`,
/// `s₀ ~ N(m₀, Σ₀)`.
#[derive(Debug, Clone)]
pub struct LqrEnv {
    pub a: Mat,
    pub b: Mat,
    pub q: Mat,
    pub r: Mat,
    pub gamma: f64,
    pub noise_cov: Mat,
    pub init_mean: Vector,
    pub init_cov: Mat,
    noise: Gaussian,
    init: Gaussian,
}

impl LqrEnv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Mat,
        b: Mat,
        q: Mat,
        r: Mat,
        gamma: f64,
        noise_cov: Mat,
        init_mean: Vector,
        init_cov: Mat,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let shapes = [
            ("A", &a, n, n),
            ("B", &b, n, m),
            ("Q", &q, n, n),
            ("R", &r, m, m),
            ("noise covariance", &noise_cov, n, n),
            ("initial covariance", &init_cov, n, n),
        ];
        for (name, mat, rows, cols) in shapes {
            if mat.shape() != (rows, cols) {
                return Err(Error::contract(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            ensure_finite_mat(mat, name)?;
        }
        if init_mean.len() != n {
            return Err(Error::contract(format!(
                "initial mean has length {}, expected {n}",
                init_mean.len()
            )));
        }
        ensure_finite_vec(&init_mean, "initial mean")?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Input(format!("discount must lie in (0, 1], got {gamma}")));
        }
        let noise = Gaussian::new(&noise_cov)?;
        let init = Gaussian::new(&init_cov)?;
        Ok(LqrEnv {
            a,
            b,
            q,
            r,
            gamma,
            noise_cov,
            init_mean,
            init_cov,
            noise,
            init,
        })
    }

    /// The 3-state, 2-input benchmark: `Q = I`, `R = 10 I`, `γ = 0.999`,
    /// `Σ_w = 1e-6 I`, `s₀ ~ N((5,5,5), 1e-2 I)`.
    pub fn benchmark() -> Self {
        let a = Mat::from_row_slice(3, 3, &[0.95, 0.2, 0.0, -0.1, 1.2, 0.3, 0.0, -0.1, 1.1]);
        let b = Mat::from_row_slice(3, 2, &[0.2, 0.5, 0.1, -0.5, -0.3, -0.6]);
        LqrEnv::new(
            a,
            b,
            Mat::identity(3, 3),
            Mat::identity(2, 2) * 10.0,
            0.999,
            Mat::identity(3, 3) * 1e-6,
            Vector::from_element(3, 5.0),
            Mat::identity(3, 3) * 1e-2,
        )
        .expect("benchmark parameters are valid")
    }

    /// The benchmark initial gain `K₀` (2×3).
    pub fn benchmark_initial_gain() -> Mat {
        Mat::from_row_slice(2, 3, &[0.1, 0.1, 0.1, -0.5, -0.2, -0.5])
    }

    pub fn with_noise_cov(self, noise_cov: Mat) -> Result<Self> {
        LqrEnv::new(self.a, self.b, self.q, self.r, self.gamma, noise_cov, self.init_mean, self.init_cov)
    }

    pub fn with_initial(self, init_mean: Vector, init_cov: Mat) -> Result<Self> {
        LqrEnv::new(self.a, self.b, self.q, self.r, self.gamma, self.noise_cov, init_mean, init_cov)
    }

    pub fn with_gamma(self, gamma: f64) -> Result<Self> {
        LqrEnv::new(self.a, self.b, self.q, self.r, gamma, self.noise_cov, self.init_mean, self.init_cov)
    }

    /// `A s + B a + w`.
    pub fn lqr_step(&self, s: &Vector, a: &Vector, rng: &mut dyn RngCore) -> Vector {
        let mut next = &self.a * s + &self.b * a;
        self.noise.perturb(&mut next, rng);
        next
    }
}

impl Environment for LqrEnv {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn discount(&self) -> f64 {
        self.gamma
    }

    fn stage_cost(&self, s: &Vector, a: &Vector) -> f64 {
        (s.transpose() * &self.q * s)[0] + (a.transpose() * &self.r * a)[0]
    }

    fn step(&self, s: &Vector, a: &Vector, rng: &mut dyn RngCore) -> Vector {
        self.lqr_step(s, a, rng)
    }

    fn initial_state(&self, rng: &mut dyn RngCore) -> Vector {
        let mut s = self.init_mean.clone();
        self.init.perturb(&mut s, rng);
        s
    }
}

/// Physical and cost parameters of the cart-pendulum.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPendParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub dt: f64,
    pub gamma: f64,
    /// Weight of the `max(−ẋ, 0)` soft-constraint term.
    pub penalty_weight: f64,
    pub action_weight: f64,
    /// Diagonal of the process noise covariance.
    pub noise_var: [f64; 4],
    pub init_state: [f64; 4],
    /// Diagonal of the initial-state covariance.
    pub init_var: [f64; 4],
}

impl Default for CartPendParams {
    fn default() -> Self {
        CartPendParams {
            cart_mass: 1.0,
            pole_mass: 0.1,
            length: 0.5,
            gravity: 9.81,
            dt: 0.1,
            gamma: 0.95,
            penalty_weight: 100.0,
            action_weight: 0.01,
            noise_var: [1e-6; 4],
            init_state: [0.2, 0.5, 0.5, 0.2],
            init_var: [0.0; 4],
        }
    }
}

/// Cart-pendulum with state `s = (ẋ, x, φ̇, φ)` and a horizontal force input:
///
/// ```text
/// (M+m) ẍ + ½ m l φ̈ cos φ = ½ m l φ̇² sin φ + u
/// ⅓ m l² φ̈ + ½ m l ẍ cos φ = −½ m g l sin φ
/// ```
///
/// Discretised by one RK4 step per sampling interval, with Gaussian noise
/// added after integration.
#[derive(Debug, Clone)]
pub struct CartPendEnv {
    pub params: CartPendParams,
    noise: Gaussian,
    init: Gaussian,
}

impl CartPendEnv {
    pub fn new(params: CartPendParams) -> Result<Self> {
        let p = &params;
        for (name, value) in [
            ("cart mass", p.cart_mass),
            ("pole mass", p.pole_mass),
            ("length", p.length),
            ("sampling time", p.dt),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Input(format!("{name} must be positive, got {value}")));
            }
        }
        if !(p.gamma > 0.0 && p.gamma <= 1.0) {
            return Err(Error::Input(format!("discount must lie in (0, 1], got {}", p.gamma)));
        }
        if p.noise_var.iter().chain(&p.init_var).any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Input("variances must be finite and non-negative".into()));
        }
        let noise = Gaussian::new(&Mat::from_diagonal(&Vector::from_row_slice(&p.noise_var)))?;
        let init = Gaussian::new(&Mat::from_diagonal(&Vector::from_row_slice(&p.init_var)))?;
        Ok(CartPendEnv { params, noise, init })
    }

    /// Time derivative `(ẍ, ẋ, φ̈, φ̇)` of the state under force `u`.
    pub fn derivs(&self, s: &Vector, u: f64) -> Result<Vector> {
        cartpend_derivs(&self.params, s, u)
    }

    /// One RK4 step of length `dt` followed by process noise.
    pub fn rk4_step(&self, s: &Vector, u: f64, dt: f64, rng: &mut dyn RngCore) -> Result<Vector> {
        if !(dt > 0.0) {
            return Err(Error::Input(format!("step size must be positive, got {dt}")));
        }
        let mut next = rk4(|x| self.derivs(x, u), s, dt)?;
        self.noise.perturb(&mut next, rng);
        Ok(next)
    }

    /// Mechanical energy (kinetic plus potential), conserved when `u = 0`.
    pub fn energy(&self, s: &Vector) -> f64 {
        let p = &self.params;
        let (m, big_m, l, g) = (p.pole_mass, p.cart_mass, p.length, p.gravity);
        let (xd, phid, phi) = (s[0], s[2], s[3]);
        0.5 * (big_m + m) * xd * xd + 0.5 * m * l * xd * phid * phi.cos() + m * l * l * phid * phid / 6.0
            - 0.5 * m * g * l * phi.cos()
    }
}

pub fn cartpend_derivs(p: &CartPendParams, s: &Vector, u: f64) -> Result<Vector> {
    if s.len() != 4 {
        return Err(Error::contract(format!("cart-pendulum state has length {}, expected 4", s.len())));
    }
    let (m, big_m, l, g) = (p.pole_mass, p.cart_mass, p.length, p.gravity);
    let (xd, phid, phi) = (s[0], s[2], s[3]);
    let (sin, cos) = phi.sin_cos();

    // [[M+m, ½ml cos φ], [½ml cos φ, ⅓ml²]] (ẍ, φ̈) = rhs
    let m11 = big_m + m;
    let m12 = 0.5 * m * l * cos;
    let m22 = m * l * l / 3.0;
    let det = m11 * m22 - m12 * m12;
    if det.abs() <= 1e-12 * (m11 * m22).abs() {
        return Err(Error::Numeric("singular cart-pendulum mass matrix".into()));
    }
    let r1 = 0.5 * m * l * phid * phid * sin + u;
    let r2 = -0.5 * m * g * l * sin;
    let xdd = (m22 * r1 - m12 * r2) / det;
    let phidd = (m11 * r2 - m12 * r1) / det;
    Ok(Vector::from_vec(vec![xdd, xd, phidd, phid]))
}

/// Classical fourth-order Runge-Kutta step.
pub fn rk4<F>(f: F, s: &Vector, dt: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let k1 = f(s)?;
    let k2 = f(&(s + &k1 * (0.5 * dt)))?;
    let k3 = f(&(s + &k2 * (0.5 * dt)))?;
    let k4 = f(&(s + &k3 * dt))?;
    Ok(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

impl Environment for CartPendEnv {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn discount(&self) -> f64 {
        self.params.gamma
    }

    fn stage_cost(&self, s: &Vector, a: &Vector) -> f64 {
        s.norm_squared() + self.params.action_weight * a.norm_squared() + self.constraint_penalty(s, a)
    }

    fn constraint_penalty(&self, s: &Vector, _a: &Vector) -> f64 {
        self.params.penalty_weight * (-s[0]).max(0.0)
    }

    fn step(&self, s: &Vector, a: &Vector, rng: &mut dyn RngCore) -> Vector {
        // A singular mass matrix cannot occur for validated parameters; NaN
        // lets the rollout engine report the failing step.
        self.rk4_step(s, a[0], self.params.dt, rng)
            .unwrap_or_else(|_| Vector::from_element(4, f64::NAN))
    }

    fn initial_state(&self, rng: &mut dyn RngCore) -> Vector {
        let mut s = Vector::from_row_slice(&self.params.init_state);
        self.init.perturb(&mut s, rng);
        s
    }
}
