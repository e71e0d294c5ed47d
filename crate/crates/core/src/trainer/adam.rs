use crate::diffcore::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments per parameter tensor, plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape().to_vec());
        AdamState { step: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }
}

/// One bias-corrected Adam update with a learning rate per tensor. Missing
/// gradients count as zero. Returns `false`, leaving everything untouched,
/// if any gradient is non-finite.
pub fn adam_step(params: &mut [Tensor], grads: &[Option<Tensor>], state: &mut AdamState, lrs: &[f64]) -> bool {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), lrs.len());
    if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.is_finite())) {
        log::warn!("non-finite gradient for parameter {i}; skipping the update");
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].make_mut();
        let v = state.v[i].make_mut();
        let p = p.make_mut();
        let g = grads[i].as_ref().map(|g| g.data());
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            p[j] -= lrs[i] * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = vec![Tensor::new([2], vec![1.0, -2.0]).unwrap()];
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Some(Tensor::zeros([2]))], &mut s, &[0.1]));
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        adam_step(&mut p, &[Some(Tensor::new([2], vec![1.0, 1.0]).unwrap())], &mut s, &[0.1]);
        let (m, v) = (s.m[0].data()[0], s.v[0].data()[0]);
        adam_step(&mut p, &[None], &mut s, &[0.1]);
        assert!((s.m[0].data()[0] - 0.9 * m).abs() < 1e-15);
        assert!((s.v[0].data()[0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(3.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Some(Tensor::scalar(1.0))], &mut s, &[0.1]);
        assert!((p[0].item() - (3.0 - 0.1)).abs() < 1e-7);
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        let mut p = vec![Tensor::scalar(0.7)];
        let mut s = AdamState::new(&p);
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for k in 1..=100 {
            let g = (x * 3.0).sin() + 0.1 * k as f64;
            adam_step(&mut p, &[Some(Tensor::scalar(g))], &mut s, &[0.05]);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0].item() - x).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        assert!(!adam_step(&mut p, &[Some(Tensor::scalar(f64::NAN))], &mut s, &[0.1]));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(s.step, 0);
    }
}
