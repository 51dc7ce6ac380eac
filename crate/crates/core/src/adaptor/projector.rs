use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{gelu, gelu_grad, linear, linear_backward, Params, Tensor, INIT_STD};

/// Two-layer perceptron `W2·gelu(W1·x + b1) + b2`, applied row-wise.
///
/// Weights are stored `[out, in]`. Serves as the vision-language projector,
/// as every MoE expert and as the vision block's feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Activations kept from the forward pass for [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let (h, _) = w1.dims2()?;
        let (o, h2) = w2.dims2()?;
        if h != h2 || b1.numel() != h || b2.numel() != o {
            return Err(Error::shape(format!(
                "mlp weights do not chain: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            w1: Tensor::randn(rng, &[hidden, d_in], INIT_STD),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(rng, &[d_out, hidden], INIT_STD),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        if x.ndim() != 2 || x.cols() != self.d_in() {
            return Err(Error::shape(format!(
                "mlp expects [t, {}], got {:?}",
                self.d_in(),
                x.shape()
            )));
        }
        let pre = linear(x, &self.w1, Some(&self.b1))?;
        let act = pre.map(gelu);
        let y = linear(&act, &self.w2, Some(&self.b2))?;
        Ok((
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, dy: &Tensor, grads: &mut Mlp) -> Result<Tensor> {
        let (dact, dw2, db2) = linear_backward(&cache.act, &self.w2, dy)?;
        let mut dpre = dact;
        for (d, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(p);
        }
        let (dx, dw1, db1) = linear_backward(&cache.x, &self.w1, &dpre)?;
        grads.w1.add_assign(&dw1)?;
        grads.b1.add_assign(&db1)?;
        grads.w2.add_assign(&dw2)?;
        grads.b2.add_assign(&db2)?;
        Ok(dx)
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

/// Projects visual tokens `[t, c_in]` into the language model's embedding space.
pub fn project(tokens: &Tensor, projector: &Mlp) -> Result<Tensor> {
    projector.forward(tokens).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, seeded};

    #[test]
    fn zero_weights_give_zero_output() {
        let mlp = Mlp::new(
            Tensor::zeros(&[3, 2]),
            Tensor::zeros(&[3]),
            Tensor::zeros(&[2, 3]),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let y = project(&Tensor::ones(&[4, 2]), &mlp).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_apply_gelu() {
        let mlp = Mlp::new(
            Tensor::eye(3),
            Tensor::zeros(&[3]),
            Tensor::eye(3),
            Tensor::zeros(&[3]),
        )
        .unwrap();
        let x = Tensor::new(&[1, 3], vec![1e-3, -5e-4, 2e-4]).unwrap();
        let y = project(&x, &mlp).unwrap();
        for (&xi, &yi) in x.data().iter().zip(y.data()) {
            let expect = 0.5 * xi * (1.0 + libm::erf(xi / std::f64::consts::SQRT_2));
            assert!((yi - expect).abs() < 1e-18);
            // Near zero gelu(x) ≈ x/2 + x²/sqrt(2π).
            assert!((yi - (xi / 2.0 + xi * xi / (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch() {
        assert!(Mlp::new(
            Tensor::zeros(&[3, 2]),
            Tensor::zeros(&[3]),
            Tensor::zeros(&[2, 4]),
            Tensor::zeros(&[2]),
        )
        .is_err());
        let mut rng = seeded(1);
        let mlp = Mlp::init(&mut rng, 4, 8, 4);
        assert!(project(&Tensor::zeros(&[2, 3]), &mlp).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded(7);
        let mut mlp = Mlp::init(&mut rng, 4, 8, 4);
        mlp.visit_mut(&mut |t| *t = Tensor::randn(&mut rng, t.shape(), 0.5));
        let x = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let r = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let n_par = mlp.num_params();
        let mut packed = mlp.flatten();
        packed.extend_from_slice(x.data());
        let point = Tensor::from_vec(packed);

        let f = |p: &Tensor| {
            let mut m = mlp.clone();
            m.load_flat(&p.data()[..n_par]);
            let xi = Tensor::new(&[3, 4], p.data()[n_par..].to_vec())?;
            let (y, cache) = m.forward(&xi)?;
            let mut g = m.zeros_like();
            let dx = m.backward(&cache, &r, &mut g)?;
            let mut grad = g.flatten();
            grad.extend_from_slice(dx.data());
            Ok((Tensor::scalar(y.dot(&r)), Tensor::from_vec(grad)))
        };
        let err = grad_check(f, &point, 1e-5).unwrap();
        assert!(err <= 1e-6, "max rel error {err}");
    }
}
