//! Scalar explicit ODE steppers.
//!
//! These advance `dy/dt = rhs(t, y)` by one step. The simulation loop in the
//! parent module inlines the same tableaus because its right-hand side needs
//! stage-aware delay lookups; these free functions are the reference
//! implementations their behavior is checked against.

/// One forward Euler step (first order).
pub fn euler_step(y: f64, t: f64, dt: f64, rhs: &mut impl FnMut(f64, f64) -> f64) -> f64 {
    y + dt * rhs(t, y)
}

/// One classical Runge–Kutta step (fourth order).
pub fn rk4_step(y: f64, t: f64, dt: f64, rhs: &mut impl FnMut(f64, f64) -> f64) -> f64 {
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1);
    let k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2);
    let k4 = rhs(t + dt, y + dt * k3);
    y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}
