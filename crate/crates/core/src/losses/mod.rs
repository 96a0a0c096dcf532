//! Training objective: L1 reconstruction, perceptual term and flow distillation.
//!
//! `total = l1 + lambda * perceptual + teacher`, all terms mean-reduced.

mod perceptual;
mod teacher;

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

pub use perceptual::{FeatureExtractor, GradientPyramid};
pub use teacher::{BlockMatchingTeacher, TeacherOracle};

use crate::error::{ensure, Result};
use crate::scalar::Real;
use crate::warp::FlowField;

/// Weight of the perceptual term.
pub const DEFAULT_LAMBDA: f64 = 0.005;
/// Epoch (exclusive) at which distillation stops on a 300-epoch schedule.
pub const DEFAULT_TEACHER_CUTOFF: u64 = 200;
/// Schedule length the default cutoff refers to.
pub const REFERENCE_EPOCHS: u64 = 300;

/// Scales the distillation cutoff to a shorter schedule, keeping the 2:1 phase ratio.
pub fn scaled_teacher_cutoff(total_epochs: u64) -> u64 {
    ((DEFAULT_TEACHER_CUTOFF as f64 / REFERENCE_EPOCHS as f64) * total_epochs as f64).round() as u64
}

/// Whether the teacher term applies at `epoch` (the cutoff itself is excluded).
pub fn teacher_active(epoch: u64, cutoff: u64) -> bool {
    epoch < cutoff
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub perceptual: f64,
    pub teacher: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l1: f64, perceptual: f64, teacher: f64, lambda: f64) -> Self {
        Self {
            l1,
            perceptual,
            teacher,
            total: l1 + lambda * perceptual + teacher,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l1, self.perceptual, self.teacher, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn same_shape<T: Real>(a: &ArrayView3<T>, b: &ArrayView3<T>) -> Result<()> {
    ensure!(a.dim() == b.dim(), "shape mismatch: {:?} vs {:?}", a.dim(), b.dim());
    ensure!(!a.is_empty(), "empty input");
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(predicted: &ArrayView3<T>, target: &ArrayView3<T>) -> Result<T> {
    same_shape(predicted, target)?;
    let n = T::of(predicted.len() as f64);
    Ok(Zip::from(predicted)
        .and(target)
        .fold(T::zero(), |acc, &p, &t| acc + (p - t).abs())
        / n)
}

/// Subgradient of [`l1_loss`] with respect to `predicted` (sign(0) = 0).
pub fn l1_grad<T: Real>(predicted: &ArrayView3<T>, target: &ArrayView3<T>) -> Array3<T> {
    let inv_n = T::one() / T::of(predicted.len() as f64);
    let mut g = Array3::zeros(predicted.dim());
    Zip::from(&mut g).and(predicted).and(target).for_each(|g, &p, &t| {
        let d = p - t;
        *g = if d > T::zero() {
            inv_n
        } else if d < T::zero() {
            -inv_n
        } else {
            T::zero()
        };
    });
    g
}

/// Squared feature distance, mean-reduced within each level and averaged over levels.
pub fn perceptual_loss<T: Real>(
    predicted: &ArrayView3<T>,
    target: &ArrayView3<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<T> {
    Ok(perceptual_with_grad(predicted, target, extractor, false)?.0)
}

fn perceptual_with_grad<T: Real>(
    predicted: &ArrayView3<T>,
    target: &ArrayView3<T>,
    extractor: &dyn FeatureExtractor<T>,
    want_grad: bool,
) -> Result<(T, Option<Array3<T>>)> {
    same_shape(predicted, target)?;
    let fp = extractor.extract(predicted);
    let ft = extractor.extract(target);
    ensure!(fp.len() == ft.len() && !fp.is_empty(), "extractor returned inconsistent levels");
    let levels = T::of(fp.len() as f64);
    let mut loss = T::zero();
    let mut diffs = Vec::with_capacity(fp.len());
    for (a, b) in fp.iter().zip(&ft) {
        let d = a - b;
        let n = T::of(d.len() as f64);
        loss += d.iter().fold(T::zero(), |acc, v| acc + *v * *v) / n / levels;
        diffs.push(d * (T::of(2.0) / n / levels));
    }
    let grad = want_grad.then(|| extractor.pullback(predicted, &diffs));
    Ok((loss, grad))
}

/// Mean absolute difference over both flow fields and both components.
pub fn teacher_loss<T: Real>(
    predicted: (&ArrayView3<T>, &ArrayView3<T>),
    teacher: (&FlowField<T>, &FlowField<T>),
) -> Result<T> {
    let a = l1_loss(predicted.0, &teacher.0.vectors.view())?;
    let b = l1_loss(predicted.1, &teacher.1.vectors.view())?;
    Ok((a + b) * T::half())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub teacher_cutoff: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            teacher_cutoff: DEFAULT_TEACHER_CUTOFF,
        }
    }
}

/// Loss value and its gradients with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct LossEvaluation<T: Real> {
    pub breakdown: LossBreakdown,
    pub grad_prediction: Array3<T>,
    /// Present only while the teacher term is active.
    pub grad_flows: Option<(Array3<T>, Array3<T>)>,
}

/// Inputs the teacher needs to produce reference flows.
pub struct TeacherInputs<'a, T: Real> {
    pub oracle: &'a dyn TeacherOracle<T>,
    pub frame0: ArrayView3<'a, T>,
    pub frame1: ArrayView3<'a, T>,
    pub t: T,
}

/// Weighted training objective. The teacher term is included only when a
/// teacher is supplied and `epoch < config.teacher_cutoff`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    predicted: &ArrayView3<T>,
    target: &ArrayView3<T>,
    flows: (&ArrayView3<T>, &ArrayView3<T>),
    teacher: Option<TeacherInputs<'_, T>>,
    epoch: u64,
    config: &LossConfig,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<LossEvaluation<T>> {
    ensure!(config.lambda >= 0.0, "lambda must be non-negative");
    let l1 = l1_loss(predicted, target)?;
    let mut grad_prediction = l1_grad(predicted, target);
    let (perc, g_perc) = perceptual_with_grad(predicted, target, extractor, true)?;
    grad_prediction.scaled_add(T::of(config.lambda), &g_perc.expect("gradient requested"));

    let mut teacher_value = 0.0;
    let mut grad_flows = None;
    if let Some(inputs) = teacher.filter(|_| teacher_active(epoch, config.teacher_cutoff)) {
        let (f0, f1) = inputs.oracle.flows(&inputs.frame0, &inputs.frame1, target, inputs.t)?;
        ensure!(
            f0.vectors.dim() == flows.0.dim() && f1.vectors.dim() == flows.1.dim(),
            "teacher flows do not match prediction resolution"
        );
        teacher_value = teacher_loss(flows, (&f0, &f1))?.as_f64();
        let half = T::half();
        grad_flows = Some((
            l1_grad(flows.0, &f0.vectors.view()) * half,
            l1_grad(flows.1, &f1.vectors.view()) * half,
        ));
    }
    Ok(LossEvaluation {
        breakdown: LossBreakdown::combine(l1.as_f64(), perc.as_f64(), teacher_value, config.lambda),
        grad_prediction,
        grad_flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn c(v: f64) -> Array3<f64> {
        Array3::from_elem((3, 8, 8), v)
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&c(0.3).view(), &c(0.3).view()).unwrap(), 0.0);
        assert_eq!(l1_loss(&c(0.25).view(), &c(0.75).view()).unwrap(), 0.5);
        let mut a = c(0.5);
        a.slice_mut(ndarray::s![.., 0..4, ..]).fill(0.7);
        assert!((l1_loss(&a.view(), &c(0.5).view()).unwrap() - 0.1).abs() < 1e-12);
        assert!(l1_loss(&c(0.0).view(), &Array3::zeros((3, 8, 9)).view()).is_err());
    }

    #[test]
    fn l1_grad_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>());
        let t = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>());
        let g = l1_grad(&p.view(), &t.view());
        let h = 1e-6;
        for idx in [[0, 0, 0], [1, 2, 3], [2, 3, 1]] {
            let mut up = p.clone();
            up[idx] += h;
            let mut dn = p.clone();
            dn[idx] -= h;
            let num = (l1_loss(&up.view(), &t.view()).unwrap() - l1_loss(&dn.view(), &t.view()).unwrap()) / (2.0 * h);
            assert!((num - g[idx]).abs() <= 1e-4 * num.abs());
        }
        assert!(l1_grad(&p.view(), &p.view()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn perceptual_examples() {
        let ex = GradientPyramid::default();
        let x = c(0.4);
        assert_eq!(perceptual_loss(&x.view(), &x.view(), &ex).unwrap(), 0.0);
        let mut edge = c(0.4);
        edge.slice_mut(ndarray::s![.., .., 4..]).fill(0.9);
        assert!(perceptual_loss(&x.view(), &edge.view(), &ex).unwrap() > 0.0);
        let scaled = &x * 0.5;
        assert_eq!(perceptual_loss(&scaled.view(), &scaled.view(), &ex).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_grad_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let ex = GradientPyramid::default();
        let p = Array3::from_shape_fn((3, 12, 10), |_| rng.random::<f64>());
        let t = Array3::from_shape_fn((3, 12, 10), |_| rng.random::<f64>());
        let (_, g) = perceptual_with_grad(&p.view(), &t.view(), &ex, true).unwrap();
        let g = g.unwrap();
        let h = 1e-5;
        for idx in [[0, 0, 0], [1, 5, 7], [2, 11, 9]] {
            let mut up = p.clone();
            up[idx] += h;
            let mut dn = p.clone();
            dn[idx] -= h;
            let num = (perceptual_loss(&up.view(), &t.view(), &ex).unwrap()
                - perceptual_loss(&dn.view(), &t.view(), &ex).unwrap())
                / (2.0 * h);
            assert!((num - g[idx]).abs() <= 1e-6 * num.abs().max(1e-8), "{num} vs {}", g[idx]);
        }
    }

    #[test]
    fn teacher_examples() {
        let z = Array3::<f64>::zeros((2, 4, 4));
        let f = FlowField::zeros(4, 4);
        assert_eq!(teacher_loss((&z.view(), &z.view()), (&f, &f)).unwrap(), 0.0);
        let t0 = FlowField::constant(4, 4, 2.0, 0.0);
        let t1 = FlowField::constant(4, 4, -2.0, 0.0);
        assert_eq!(teacher_loss((&z.view(), &z.view()), (&t0, &t1)).unwrap(), 1.0);
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::combine(0.1, 2.0, 0.0, DEFAULT_LAMBDA);
        assert!((b.total - 0.11).abs() < 1e-12);
    }

    #[test]
    fn cutoff_rules() {
        assert!(teacher_active(199, 200));
        assert!(!teacher_active(200, 200));
        assert_eq!(scaled_teacher_cutoff(300), 200);
        assert_eq!(scaled_teacher_cutoff(30), 20);
        assert_eq!(scaled_teacher_cutoff(10), 7);
    }

    struct FixedTeacher(FlowField<f64>, FlowField<f64>);
    impl TeacherOracle<f64> for FixedTeacher {
        fn flows(
            &self,
            _: &ArrayView3<f64>,
            _: &ArrayView3<f64>,
            _: &ArrayView3<f64>,
            _: f64,
        ) -> Result<(FlowField<f64>, FlowField<f64>)> {
            Ok((self.0.clone(), self.1.clone()))
        }
    }

    #[test]
    fn total_gates_teacher_and_is_consistent() {
        let ex = GradientPyramid::default();
        let teacher = FixedTeacher(FlowField::constant(8, 8, 2.0, 0.0), FlowField::constant(8, 8, -2.0, 0.0));
        let z = Array3::<f64>::zeros((2, 8, 8));
        let pred = c(0.3);
        let target = c(0.3);
        let frames = c(0.2);
        let inputs = || TeacherInputs {
            oracle: &teacher,
            frame0: frames.view(),
            frame1: frames.view(),
            t: 0.5,
        };
        let cfg = LossConfig::default();
        let on = total_loss(&pred.view(), &target.view(), (&z.view(), &z.view()), Some(inputs()), 10, &cfg, &ex).unwrap();
        assert_eq!(on.breakdown.teacher, 1.0);
        assert!(on.grad_flows.is_some());
        let off = total_loss(&pred.view(), &target.view(), (&z.view(), &z.view()), Some(inputs()), 200, &cfg, &ex).unwrap();
        assert_eq!(off.breakdown.teacher, 0.0);
        assert!(off.grad_flows.is_none());
        assert_eq!(off.breakdown.total, 0.0);
        for b in [on.breakdown, off.breakdown] {
            assert!((b.total - (b.l1 + cfg.lambda * b.perceptual + b.teacher)).abs() < 1e-9);
        }
    }
}
