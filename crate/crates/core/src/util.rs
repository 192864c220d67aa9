//! Small numeric helpers shared across modules.

/// Tolerance, in index units, under which a fractional grid position is
/// collapsed onto the nearest node. Keeps node-aligned queries exact in the
/// presence of `(t - t0) / dt` rounding junk.
pub(crate) const SNAP_TOL: f64 = 1e-9;

/// Snap `pos` (a real-valued sample index) to the nearest integer when it is
/// within [`SNAP_TOL`] of one.
pub(crate) fn snap_index(pos: f64) -> f64 {
    let r = pos.round();
    if (pos - r).abs() < SNAP_TOL {
        r
    } else {
        pos
    }
}

/// Split a non-negative grid position into (node, fraction) with snapping,
/// clamping onto `[0, n - 1]`. Callers must range-check first; this only
/// cleans up the representation.
pub(crate) fn split_index(pos: f64, n: usize) -> (usize, f64) {
    debug_assert!(n >= 1);
    let pos = snap_index(pos).clamp(0.0, (n - 1) as f64);
    let k = pos.floor() as usize;
    if k >= n - 1 {
        (n - 1, 0.0)
    } else {
        (k, pos - k as f64)
    }
}

/// Uniform f64 in [0, 1) from 53 random bits.
pub(crate) fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in (0, 1], suitable as a log argument.
pub(crate) fn unit_f64_open(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Format a float with 17 significant digits so a read-back recovers the
/// exact bits.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
