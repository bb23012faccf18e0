use crate::diffengine::Tensor;

/// RMSProp without momentum:
/// `acc ← ρ·acc + (1−ρ)·g²`, `p ← p − lr·g/√(acc+ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    acc: Vec<Tensor>,
}

impl RmsProp {
    pub const DEFAULT_DECAY: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-8;

    /// Zeroed accumulators shaped like `params`.
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        Self::with(lr, Self::DEFAULT_DECAY, Self::DEFAULT_EPS, params)
    }

    pub fn with(lr: f64, decay: f64, eps: f64, params: &[&Tensor]) -> Self {
        Self {
            lr,
            decay,
            eps,
            acc: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.acc
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), self.acc.len(), "parameter count changed");
        assert_eq!(grads.len(), self.acc.len(), "one gradient per parameter");
        let (rho, lr, eps) = (self.decay, self.lr, self.eps);
        for ((p, g), a) in params.into_iter().zip(grads).zip(&mut self.acc) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for ((pv, &gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(a.data_mut()) {
                *av = rho * *av + (1.0 - rho) * gv * gv;
                *pv -= lr * gv / (*av + eps).sqrt();
            }
        }
    }
}
