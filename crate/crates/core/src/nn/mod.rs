//! Minimal hand-rolled neural-network primitives: layers with explicit
//! backward passes, flat parameter views, and an Adam optimizer.
//!
//! Convention: every layer's `backward(x, gout, grads)` recomputes whatever it
//! needs from the stored forward input `x`, accumulates parameter gradients
//! into `grads` (a zeroed clone of the layer), and returns the input gradient.

mod adam;
mod layers;

pub use adam::Adam;
pub use layers::{
    global_avg_pool, global_avg_pool_backward, silu, silu_backward, upsample_nearest2,
    upsample_nearest2_backward, Conv2d, LayerNorm, LayerNormChan, Linear,
};

/// Flat access to a parameter container, in a fixed traversal order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = 0.0));
    }
}

/// Element-wise accumulate `src` into `dst` (same structure required).
pub fn accumulate<P: Params>(dst: &mut P, src: &P) {
    let flat = src.to_flat();
    let mut off = 0;
    dst.visit_mut(&mut |s| {
        for v in s.iter_mut() {
            *v += flat[off];
            off += 1;
        }
    });
}
