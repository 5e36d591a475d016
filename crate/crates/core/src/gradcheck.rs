//! Analytic side-network gradients against central finite differences.

use serde::Serialize;

use crate::error::Result;
use crate::exec::Exec;
use crate::rng::Rng;
use crate::side::{init_side, side_backward, side_forward, SideConfig, SideParams};
use crate::tensor::{finite_diff_grad_with, Activation, Tensor};
use crate::train::{loss_and_grad, LossKind};

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Denominator floor for the relative error. Central differences at this
/// step carry roughly 1e-10 of absolute noise, so coordinates with smaller
/// gradients than this are judged on absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-4;
pub const GRADCHECK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn gradcheck_config() -> SideConfig {
    SideConfig {
        hidden: 8,
        bottleneck: 4,
        blocks: 2,
        classes: 2,
        activation: Activation::Gelu,
        init_std: 0.5,
        embedding_tap: false,
    }
}

/// Every parameter drawn from N(0, std), layer-norm gains centred on one,
/// so no gradient is structurally zero.
pub fn randomized_params(config: &SideConfig, seed: u64) -> Result<SideParams<f64>> {
    let mut p = init_side::<f64>(config, seed)?;
    let mut rng = Rng::with_stream(seed, 1);
    let n = p.to_flat().len();
    let flat: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, config.init_std)).collect();
    p.set_flat(&flat)?;
    for a in &mut p.adapters {
        for g in a.ln_gamma.data_mut() {
            *g += 1.0;
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub seed: u64,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// One seeded case: random taps `[2, 4, 8]`, random labels, cross-entropy.
pub fn gradcheck_case(seed: u64, exec: Exec) -> Result<GradcheckCase> {
    let config = gradcheck_config();
    let params = randomized_params(&config, seed)?;
    let mut rng = Rng::with_stream(seed, 2);
    let taps: Vec<Tensor<f64>> = (0..config.taps()).map(|_| Tensor::randn(&[2, 4, 8], 1.0, &mut rng)).collect();
    let labels: Vec<u32> = (0..2).map(|_| rng.below(config.classes as u32)).collect();

    let (logits, cache) = side_forward(&taps, &params, true)?;
    let (_, d_logits) = loss_and_grad(&logits, &labels, LossKind::CrossEntropy)?;
    let analytic = side_backward(&cache.expect("training cache"), &d_logits, &params)?.to_flat();

    let theta = Tensor::new(vec![analytic.len()], params.to_flat())?;
    let loss_at = |t: &Tensor<f64>| {
        let mut q = params.clone();
        q.set_flat(t.data()).expect("same length");
        let (logits, _) = side_forward(&taps, &q, false).expect("valid taps");
        loss_and_grad(&logits, &labels, LossKind::CrossEntropy).expect("valid labels").0
    };
    let numeric = finite_diff_grad_with(loss_at, &theta, GRADCHECK_STEP, exec)?;

    let (worst_coordinate, max_rel_err) = analytic
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradcheckCase { seed, coordinates: analytic.len(), max_rel_err, worst_coordinate })
}

pub fn run_gradcheck(seeds: &[u64], exec: Exec) -> Result<GradcheckReport> {
    let cases = seeds.iter().map(|&s| gradcheck_case(s, exec)).collect::<Result<Vec<_>>>()?;
    let max_rel_err = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { cases, max_rel_err, passed: max_rel_err < GRADCHECK_TOLERANCE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let r = run_gradcheck(&GRADCHECK_SEEDS, Exec::default()).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.cases[0].coordinates, gradcheck_config().parameter_count());
    }

    #[test]
    fn exec_modes_agree_exactly() {
        let a = gradcheck_case(3, Exec::Sequential).unwrap();
        let b = gradcheck_case(3, Exec::default()).unwrap();
        assert_eq!(a.max_rel_err.to_bits(), b.max_rel_err.to_bits());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let a = 0.3;
        assert!(relative_error(a * 1.001, a) > GRADCHECK_TOLERANCE);
    }
}
