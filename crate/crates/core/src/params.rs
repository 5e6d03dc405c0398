//! Flat-vector view over structured parameter sets.

/// A set of real-valued arrays that can be viewed as one flat vector.
///
/// Implementors only enumerate their arrays in a fixed order; flattening,
/// in-place updates and norms are derived from that order.
pub trait ParamSet: Clone {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    /// Overwrite every entry from `flat`, which must have `num_params()` entries.
    fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
    }

    fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        out.assign_flat(flat);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = 0.0));
        out
    }

    /// `self += alpha · other`
    fn axpy(&mut self, alpha: f64, other: &Self) {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |s| {
            let n = s.len();
            for (v, o) in s.iter_mut().zip(&flat[off..off + n]) {
                *v += alpha * o;
            }
            off += n;
        });
    }

    fn scale(&mut self, alpha: f64) {
        self.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v *= alpha));
    }

    fn norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit(&mut |s| acc += s.iter().map(|v| v * v).sum::<f64>());
        acc.sqrt()
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Rescale `grad` in place so its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_norm<P: ParamSet>(grad: &mut P, max_norm: f64) -> f64 {
    let n = grad.norm();
    if n > max_norm && n > 0.0 {
        grad.scale(max_norm / n);
    }
    n
}
