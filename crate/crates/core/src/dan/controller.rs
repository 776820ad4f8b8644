//! Controller modules: per-task matrices that recombine a frozen layer's
//! filters into new ones.
//!
//! For a base bank `F` with `C_o` filters, a controller holds `W` (`C_o x C_o`)
//! and a fresh bias `b_a`. The adapted filters are
//! `unflatten(W * flatten(F))`, so every adapted filter is a linear
//! combination of the base filters and lies in their row span.

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, DanError, Result};
use crate::tensor::{flatten_filters, unflatten_filters, FilterBank, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// Full `C_o x C_o` recombination.
    Linear,
    /// Per-filter scaling only; off-diagonal entries stay exactly zero.
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `W = I`, `b_a = b`: the new task starts as an exact copy of the base.
    Diagonal,
    /// `W ~ N(0, 1/C_o)`, `b_a = b`.
    Random,
    /// Least-squares fit of `W` so that `W * F` approximates an independently
    /// trained target bank; `b_a` copies the target bias.
    LinearApprox,
}

impl std::str::FromStr for InitScheme {
    type Err = DanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(Self::Diagonal),
            "random" => Ok(Self::Random),
            "linear_approx" | "linear-approx" => Ok(Self::LinearApprox),
            other => Err(DanError::InvalidArgument(format!("unknown init scheme {other:?}"))),
        }
    }
}

impl std::str::FromStr for ControllerMode {
    type Err = DanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "diagonal" => Ok(Self::Diagonal),
            other => Err(DanError::InvalidArgument(format!("unknown controller mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerModule {
    /// `[C_o, C_o]`
    pub w: Tensor,
    /// `[C_o]`
    pub bias: Tensor,
    pub mode: ControllerMode,
    /// Index of the base conv layer this controller adapts.
    pub layer: usize,
}

impl ControllerModule {
    pub fn identity(base: &FilterBank, mode: ControllerMode, layer: usize) -> Self {
        Self { w: Tensor::identity(base.c_out()), bias: base.bias.clone(), mode, layer }
    }

    pub fn c_out(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        match self.mode {
            ControllerMode::Linear => self.w.len() + self.bias.len(),
            ControllerMode::Diagonal => 2 * self.c_out(),
        }
    }

    /// The adapted filter weights for `base`, outside any graph.
    pub fn adapted(&self, base: &FilterBank) -> Result<Tensor> {
        adapt_weights(&self.w, &base.weights)
    }

    /// Zeroes off-diagonal entries of a `W` gradient in diagonal mode.
    pub fn mask_gradient(&self, grad: &mut [f64]) {
        if self.mode == ControllerMode::Diagonal {
            mask_off_diagonal(grad, self.c_out());
        }
    }
}

pub(crate) fn mask_off_diagonal(m: &mut [f64], n: usize) {
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i * n + j] = 0.0;
            }
        }
    }
}

/// `unflatten(w * flatten(filters))` on plain tensors.
pub fn adapt_weights(w: &Tensor, filters: &Tensor) -> Result<Tensor> {
    let (c_out, d) = check_adapt_dims(w.dims(), filters.dims())?;
    let flat = filters.reshape(&[c_out, d])?;
    unflatten_filters(&w.matmul(&flat)?, filters.dims())
}

fn check_adapt_dims(w: &[usize], f: &[usize]) -> Result<(usize, usize)> {
    let &[c_out, c_in, k, k2] = f else {
        return shape_err(format!("filters must be 4-D, got {f:?}"));
    };
    if w != [c_out, c_out] {
        return shape_err(format!("controller {w:?} for {c_out} filters"));
    }
    Ok((c_out, c_in * k * k2))
}

/// Graph version of the adapted-filter product; differentiable in both
/// arguments, though the base filters are normally constants.
pub fn adapt_filters<'t>(w: &Var<'t>, filters: &Var<'t>) -> Result<Var<'t>> {
    let dims = filters.dims();
    let (c_out, d) = check_adapt_dims(&w.dims(), &dims)?;
    w.matmul(&filters.reshape(&[c_out, d])?)?.reshape(&dims)
}

/// Two-way switched convolution:
/// `conv(x, a*(W (x) F) + (1-a)*F) + a*b_a + (1-a)*b`.
#[allow(clippy::too_many_arguments)]
pub fn switched_conv<'t>(
    x: &Var<'t>,
    filters: &Var<'t>,
    bias: &Var<'t>,
    w: &Var<'t>,
    bias_a: &Var<'t>,
    alpha: f64,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DanError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let adapted = adapt_filters(w, filters)?;
    let mixed_w = adapted.scale(alpha).add(&filters.scale(1.0 - alpha))?;
    let mixed_b = bias_a.scale(alpha).add(&bias.scale(1.0 - alpha))?;
    crate::autodiff::conv2d(x, &mixed_w, &mixed_b, stride, pad)
}

/// Multi-task convolution `sum_i alpha_i (F_i * x + b_i)`, where entry 0 of
/// `banks` is the base bank. Evaluated as one convolution with the
/// alpha-weighted parameters, which is equal by linearity.
pub fn multitask_conv<'t>(
    x: &Var<'t>,
    banks: &[(Var<'t>, Var<'t>)],
    alpha: &[f64],
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    if banks.len() != alpha.len() || banks.is_empty() {
        return Err(DanError::InvalidArgument(format!(
            "{} alpha entries for {} task banks",
            alpha.len(),
            banks.len()
        )));
    }
    let (w, b) = mix_banks(banks, alpha)?;
    crate::autodiff::conv2d(x, &w, &b, stride, pad)
}

pub(crate) fn mix_banks<'t>(banks: &[(Var<'t>, Var<'t>)], alpha: &[f64]) -> Result<(Var<'t>, Var<'t>)> {
    let mut terms = banks.iter().zip(alpha).filter(|(_, &a)| a != 0.0);
    let Some(((w0, b0), &a0)) = terms.next() else {
        // all-zero alpha: a zero-weighted base keeps shapes intact
        let (w, b) = &banks[0];
        return Ok((w.scale(0.0), b.scale(0.0)));
    };
    let mut w = w0.scale(a0);
    let mut b = b0.scale(a0);
    for ((wi, bi), &ai) in terms {
        w = w.add(&wi.scale(ai))?;
        b = b.add(&bi.scale(ai))?;
    }
    Ok((w, b))
}

/// Builds a controller for `base` with the given scheme. `target` is the
/// independently trained bank required by [`InitScheme::LinearApprox`].
pub fn init_controller<R: Rng + ?Sized>(
    scheme: InitScheme,
    mode: ControllerMode,
    layer: usize,
    base: &FilterBank,
    target: Option<&FilterBank>,
    rng: &mut R,
) -> Result<ControllerModule> {
    let c_out = base.c_out();
    match scheme {
        InitScheme::Diagonal => Ok(ControllerModule::identity(base, mode, layer)),
        InitScheme::Random => {
            let mut w = Tensor::randn(&[c_out, c_out], (1.0 / c_out as f64).sqrt(), rng);
            if mode == ControllerMode::Diagonal {
                mask_off_diagonal(w.data_mut(), c_out);
            }
            Ok(ControllerModule { w, bias: base.bias.clone(), mode, layer })
        }
        InitScheme::LinearApprox => {
            let target = target.ok_or_else(|| {
                DanError::InvalidArgument("linear_approx needs an independently trained target bank".into())
            })?;
            if target.weights.dims() != base.weights.dims() {
                return shape_err(format!(
                    "target bank {:?} vs base {:?}",
                    target.weights.dims(),
                    base.weights.dims()
                ));
            }
            let w = least_squares_controller(&flatten_filters(base), &flatten_filters(target), mode, layer);
            Ok(ControllerModule { w, bias: target.bias.clone(), mode, layer })
        }
    }
}

/// `argmin_W ||W * base - target||_F` with both arguments `[C_o, D]`.
/// Uses the SVD pseudo-inverse, so rank-deficient bases get the
/// minimum-norm solution.
pub fn least_squares_controller(base: &Tensor, target: &Tensor, mode: ControllerMode, layer: usize) -> Tensor {
    let (c_out, d) = (base.dims()[0], base.dims()[1]);
    match mode {
        ControllerMode::Diagonal => {
            let mut w = Tensor::zeros(&[c_out, c_out]);
            for i in 0..c_out {
                let f = &base.data()[i * d..(i + 1) * d];
                let t = &target.data()[i * d..(i + 1) * d];
                let ff: f64 = f.iter().map(|v| v * v).sum();
                let ft: f64 = f.iter().zip(t).map(|(a, b)| a * b).sum();
                if ff == 0.0 {
                    warn!("layer {layer}: base filter {i} is zero; diagonal least squares leaves it at 0");
                }
                w.set(&[i, i], if ff > 0.0 { ft / ff } else { 0.0 });
            }
            w
        }
        ControllerMode::Linear => {
            let f = DMatrix::from_row_slice(c_out, d, base.data());
            let t = DMatrix::from_row_slice(c_out, d, target.data());
            let svd = f.svd(true, true);
            let max_sv = svd.singular_values.max();
            let tol = max_sv * (c_out.max(d) as f64) * f64::EPSILON;
            let rank = svd.rank(tol);
            if rank < c_out {
                warn!("layer {layer}: base filters have rank {rank} < {c_out}; using pseudo-inverse");
            }
            let pinv = svd.pseudo_inverse(tol).expect("svd computed with both factors");
            let w = t * pinv;
            let mut out = Tensor::zeros(&[c_out, c_out]);
            for i in 0..c_out {
                for j in 0..c_out {
                    out.set(&[i, j], w[(i, j)]);
                }
            }
            out
        }
    }
}

/// Frobenius residual `||W * base - target||`.
pub fn approximation_residual(w: &Tensor, base: &Tensor, target: &Tensor) -> f64 {
    let prod = w.matmul(base).expect("conformable");
    prod.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{conv2d, finite_diff_grad, gradient_agreement, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_controller_keeps_filters() {
        let fb = FilterBank::random(3, 2, 3, &mut rng(1));
        let c = ControllerModule::identity(&fb, ControllerMode::Linear, 0);
        assert!(c.adapted(&fb).unwrap().bit_eq(&fb.weights));
    }

    #[test]
    fn doubling_controller() {
        let fb = FilterBank::random(3, 2, 3, &mut rng(2));
        let w = Tensor::identity(3).map(|v| 2.0 * v);
        let out = adapt_weights(&w, &fb.weights).unwrap();
        assert!(out.bit_eq(&fb.weights.map(|v| 2.0 * v)));
    }

    #[test]
    fn adapted_matches_elementwise_sum() {
        let mut r = rng(3);
        let fb = FilterBank::random(2, 3, 3, &mut r);
        let w = Tensor::randn(&[2, 2], 1.0, &mut r);
        let out = adapt_weights(&w, &fb.weights).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                for y in 0..3 {
                    for x in 0..3 {
                        let expect: f64 = (0..2).map(|j| w.get(&[i, j]) * fb.weights.get(&[j, c, y, x])).sum();
                        assert!((out.get(&[i, c, y, x]) - expect).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn adapt_dimension_mismatch() {
        let fb = FilterBank::random(3, 1, 3, &mut rng(4));
        assert!(adapt_weights(&Tensor::identity(2), &fb.weights).is_err());
    }

    #[test]
    fn adapt_gradient_matches_fd() {
        let mut r = rng(5);
        let fb = FilterBank::random(3, 2, 3, &mut r);
        let w0 = Tensor::randn(&[3, 3], 1.0, &mut r);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r);
        let loss = |w: &Tensor| {
            let t = Tape::new();
            let a = adapt_filters(&t.constant(w.clone()), &t.constant(fb.weights.clone())).unwrap();
            conv2d(&t.constant(x.clone()), &a, &t.constant(fb.bias.clone()), 1, 0).unwrap().relu().sum().value().data()[0]
        };
        let t = Tape::new();
        let wv = t.param(w0.clone());
        let a = adapt_filters(&wv, &t.constant(fb.weights.clone())).unwrap();
        conv2d(&t.constant(x.clone()), &a, &t.constant(fb.bias.clone()), 1, 0).unwrap().relu().sum().backward().unwrap();
        let numeric = finite_diff_grad(loss, &w0, 1e-5);
        assert!(gradient_agreement(&wv.grad().unwrap(), &numeric, 1e-4, 1e-6) <= 1.0);
    }

    fn switched_setup(seed: u64) -> (Tensor, FilterBank, Tensor, Tensor) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut r);
        let fb = FilterBank::random(3, 2, 3, &mut r);
        let w = Tensor::randn(&[3, 3], 1.0, &mut r);
        let ba = Tensor::randn(&[3], 1.0, &mut r);
        (x, fb, w, ba)
    }

    fn run_switched(x: &Tensor, fb: &FilterBank, w: &Tensor, ba: &Tensor, alpha: f64) -> Tensor {
        let t = Tape::new();
        let out = switched_conv(
            &t.constant(x.clone()),
            &t.constant(fb.weights.clone()),
            &t.constant(fb.bias.clone()),
            &t.constant(w.clone()),
            &t.constant(ba.clone()),
            alpha,
            1,
            0,
        )
        .unwrap();
        out.value().as_ref().clone()
    }

    fn plain_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let t = Tape::new();
        conv2d(&t.constant(x.clone()), &t.constant(w.clone()), &t.constant(b.clone()), 1, 0).unwrap().value().as_ref().clone()
    }

    #[test]
    fn switched_endpoints() {
        let (x, fb, w, ba) = switched_setup(6);
        assert!(run_switched(&x, &fb, &w, &ba, 0.0).bit_eq(&plain_conv(&x, &fb.weights, &fb.bias)));
        let adapted = adapt_weights(&w, &fb.weights).unwrap();
        assert!(run_switched(&x, &fb, &w, &ba, 1.0).bit_eq(&plain_conv(&x, &adapted, &ba)));
    }

    #[test]
    fn switched_midpoint_is_output_average() {
        let (x, fb, w, ba) = switched_setup(7);
        let mid = run_switched(&x, &fb, &w, &ba, 0.5);
        let lo = run_switched(&x, &fb, &w, &ba, 0.0);
        let hi = run_switched(&x, &fb, &w, &ba, 1.0);
        let avg = Tensor::new(lo.dims().to_vec(), lo.data().iter().zip(hi.data()).map(|(a, b)| 0.5 * a + 0.5 * b).collect()).unwrap();
        assert!(mid.max_abs_diff(&avg) <= 1e-10);
        let t = Tape::new();
        let c = |v: &Tensor| t.constant(v.clone());
        assert!(switched_conv(&c(&x), &c(&fb.weights), &c(&fb.bias), &c(&w), &c(&ba), 1.5, 1, 0).is_err());
    }

    #[test]
    fn multitask_conv_cases() {
        let (x, fb, w, ba) = switched_setup(8);
        let adapted = adapt_weights(&w, &fb.weights).unwrap();
        let t = Tape::new();
        let c = |v: &Tensor| t.constant(v.clone());
        let banks = [(c(&fb.weights), c(&fb.bias)), (c(&adapted), c(&ba))];
        let xv = c(&x);
        let base = plain_conv(&x, &fb.weights, &fb.bias);
        let task = plain_conv(&x, &adapted, &ba);
        assert!(multitask_conv(&xv, &banks, &[1.0, 0.0], 1, 0).unwrap().value().bit_eq(&base));
        assert!(multitask_conv(&xv, &banks, &[0.0, 1.0], 1, 0).unwrap().value().bit_eq(&task));
        let mixed = multitask_conv(&xv, &banks, &[0.3, 0.7], 1, 0).unwrap().value();
        let two_pass: Vec<f64> = base.data().iter().zip(task.data()).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
        assert!(mixed.max_abs_diff(&Tensor::new(base.dims().to_vec(), two_pass).unwrap()) <= 1e-10);
        assert!(multitask_conv(&xv, &banks, &[1.0], 1, 0).is_err());
    }

    #[test]
    fn init_schemes() {
        let mut r = rng(9);
        let fb = FilterBank::random(4, 1, 3, &mut r);
        let diag = init_controller(InitScheme::Diagonal, ControllerMode::Linear, 0, &fb, None, &mut r).unwrap();
        assert_eq!(diag.w, Tensor::identity(4));
        assert!(diag.bias.bit_eq(&fb.bias));

        let rnd = init_controller(InitScheme::Random, ControllerMode::Diagonal, 0, &fb, None, &mut r).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(rnd.w.get(&[i, j]), 0.0);
                }
            }
        }
        assert!(rnd.bias.bit_eq(&fb.bias));
        assert!(init_controller(InitScheme::LinearApprox, ControllerMode::Linear, 0, &fb, None, &mut r).is_err());

        let me = init_controller(InitScheme::LinearApprox, ControllerMode::Linear, 0, &fb, Some(&fb), &mut r).unwrap();
        assert!(me.w.max_abs_diff(&Tensor::identity(4)) < 1e-8);
    }

    #[test]
    fn random_init_variance() {
        let mut r = rng(10);
        let fb = FilterBank::random(64, 1, 1, &mut r);
        let c = init_controller(InitScheme::Random, ControllerMode::Linear, 0, &fb, None, &mut r).unwrap();
        let var = c.w.data().iter().map(|v| v * v).sum::<f64>() / c.w.len() as f64;
        assert!((var - 1.0 / 64.0).abs() < 0.2 / 64.0, "variance {var}");
    }

    #[test]
    fn least_squares_rank_deficient_still_solves() {
        // two identical filters: rank 1
        let base = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0]]).unwrap();
        let target = Tensor::from_rows(&[vec![2.0, 4.0, 0.0], vec![-1.0, -2.0, 0.0]]).unwrap();
        let w = least_squares_controller(&base, &target, ControllerMode::Linear, 0);
        assert!(approximation_residual(&w, &base, &target) < 1e-10);
    }

    #[test]
    fn diagonal_least_squares_is_per_row_projection() {
        let base = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let target = Tensor::from_rows(&[vec![3.0, 1.0], vec![5.0, 4.0]]).unwrap();
        let w = least_squares_controller(&base, &target, ControllerMode::Diagonal, 0);
        assert_eq!(w.data(), &[3.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn diagonal_gradient_mask() {
        let fb = FilterBank::random(3, 1, 1, &mut rng(11));
        let c = ControllerModule::identity(&fb, ControllerMode::Diagonal, 0);
        let mut g = vec![1.0; 9];
        c.mask_gradient(&mut g);
        assert_eq!(g, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }
}
