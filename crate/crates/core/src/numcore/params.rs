use super::Tensor;

/// A bundle of trainable tensors visited in a fixed order.
///
/// Gradients use the same type as the parameters they belong to, so a
/// zeroed clone doubles as a gradient accumulator.
pub trait Params: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |t| t.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.numel());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrite every tensor from a flat buffer laid out as by [`Params::flatten`].
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat buffer length mismatch");
    }

    /// `self += k * other`, tensor by tensor.
    fn axpy(&mut self, k: f64, other: &Self) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |t| {
            for v in t.data_mut() {
                *v += k * flat[offset];
                offset += 1;
            }
        });
    }

    /// Start offset and length of each tensor in the flattened layout.
    fn segments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit(&mut |t| {
            out.push((offset, t.numel()));
            offset += t.numel();
        });
        out
    }
}

impl Params for Tensor {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(self)
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        for p in self {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for p in self {
            p.visit_mut(f);
        }
    }
}
