//! Deformed shifting: a fixed shift-kernel path plus a parallel learnable
//! depthwise path during training, merged into a single grouped convolution
//! for inference. Convolution is linear in the kernel, so the merge
//! (`merged = fixed + learnable`) is mathematically exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{grouped_conv2d, grouped_conv2d_backward};
use crate::error::{Error, Result};
use crate::shift::ShiftKernelBank;
use crate::tensor::{Scalar, Tensor};
use crate::window;

/// Parameters of the deformed shifting module.
///
/// `fixed` is always the delta bank for `k`; `learnable` holds one free
/// `k x k` kernel per (channel, direction) pair; `merged` appears only after
/// [`DeformedShiftParams::reparameterize`] and equals `fixed + learnable`
/// element-exactly at construction time.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedShiftParams<T: Scalar> {
    k: usize,
    channels: usize,
    fixed: ShiftKernelBank<T>,
    learnable: Tensor<T>,
    merged: Option<Tensor<T>>,
}

impl<T: Scalar> DeformedShiftParams<T> {
    /// Seeded initialization: learnable entries are uniform in
    /// `[-1/k^2, +1/k^2)`, small enough that the fixed shift path dominates
    /// at the start.
    pub fn init(k: usize, channels: usize, seed: u64) -> Result<Self> {
        window::require_odd(k)?;
        let fixed = ShiftKernelBank::new(k, channels)?;
        let bound = 1.0 / (k * k) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let learnable =
            Tensor::random_uniform([k, k, channels, k * k], -bound, bound, &mut rng);
        Ok(DeformedShiftParams {
            k,
            channels,
            fixed,
            learnable,
            merged: None,
        })
    }

    /// Build from an explicit learnable kernel stack (shape `[k,k,C,k*k]`).
    pub fn with_learnable(k: usize, channels: usize, learnable: Tensor<T>) -> Result<Self> {
        window::require_odd(k)?;
        let expected = [k, k, channels, k * k];
        if learnable.shape() != expected {
            return Err(Error::shape(format!(
                "learnable kernels must have shape {expected:?}, got {:?}",
                learnable.shape()
            )));
        }
        Ok(DeformedShiftParams {
            k,
            channels,
            fixed: ShiftKernelBank::new(k, channels)?,
            learnable,
            merged: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn fixed_bank(&self) -> &ShiftKernelBank<T> {
        &self.fixed
    }

    pub fn learnable(&self) -> &Tensor<T> {
        &self.learnable
    }

    pub fn learnable_mut(&mut self) -> &mut Tensor<T> {
        &mut self.learnable
    }

    pub fn merged(&self) -> Option<&Tensor<T>> {
        self.merged.as_ref()
    }

    pub fn is_merged(&self) -> bool {
        self.merged.is_some()
    }

    /// Training-time forward: the fixed shift path and the learnable path run
    /// in parallel and their outputs add. Output shape `[N, H, W, C*k*k]`.
    pub fn forward_two_path(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let pad = self.k / 2;
        let shifted = grouped_conv2d(f, self.fixed.kernels(), pad)?;
        let deformed = grouped_conv2d(f, &self.learnable, pad)?;
        shifted.add(&deformed)
    }

    /// Gradients of [`Self::forward_two_path`] w.r.t. the input and the
    /// learnable kernels. The fixed bank is a constant and receives none.
    pub fn two_path_backward(
        &self,
        f: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (grad_in_fixed, _fixed_kernel_grad) =
            grouped_conv2d_backward(f, self.fixed.kernels(), grad_out)?;
        let (grad_in_learn, grad_learnable) =
            grouped_conv2d_backward(f, &self.learnable, grad_out)?;
        Ok((grad_in_fixed.add(&grad_in_learn)?, grad_learnable))
    }

    /// Merge the two parallel convolutions into one kernel stack for
    /// inference. The original fields stay around for audit.
    pub fn reparameterize(&self) -> Result<Self> {
        if self.merged.is_some() {
            return Err(Error::state("parameters are already re-parameterized"));
        }
        let merged = self.fixed.kernels().add(&self.learnable)?;
        Ok(DeformedShiftParams {
            merged: Some(merged),
            ..self.clone()
        })
    }

    /// Inference forward: a single grouped convolution with the merged
    /// kernels. Requires [`Self::reparameterize`] to have run.
    pub fn forward_merged(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let merged = self
            .merged
            .as_ref()
            .ok_or_else(|| Error::state("forward_merged called before reparameterize"))?;
        grouped_conv2d(f, merged, self.k / 2)
    }

    /// Forward through whichever form is current: merged single path when
    /// present, two parallel paths otherwise.
    pub fn forward(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        match self.merged {
            Some(_) => self.forward_merged(f),
            None => self.forward_two_path(f),
        }
    }

    #[cfg(test)]
    fn with_zeroed_fixed(mut self) -> Self {
        self.fixed = ShiftKernelBank::zeroed(self.k, self.channels);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::op_counter;
    use crate::shift::{im2col_via_dwconv, ShiftConvMode};
    use rand::SeedableRng;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        let scale = a.abs().max(b.abs()).max(1.0);
        (a - b).abs() <= tol * scale
    }

    #[test]
    fn same_seed_is_deterministic() {
        let a = DeformedShiftParams::<f64>::init(3, 4, 42).unwrap();
        let b = DeformedShiftParams::<f64>::init(3, 4, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_respects_the_magnitude_bound() {
        let p = DeformedShiftParams::<f64>::init(3, 4, 7).unwrap();
        assert!(p.learnable().data().iter().all(|v| v.abs() <= 1.0 / 9.0));
    }

    #[test]
    fn different_seeds_differ() {
        let a = DeformedShiftParams::<f64>::init(3, 4, 1).unwrap();
        let b = DeformedShiftParams::<f64>::init(3, 4, 2).unwrap();
        assert!(a
            .learnable()
            .data()
            .iter()
            .zip(b.learnable().data())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn even_window_rejected() {
        assert!(matches!(
            DeformedShiftParams::<f64>::init(4, 2, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_learnable_reduces_to_the_shift_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::<f64>::random_uniform([1, 4, 4, 2], -1.0, 1.0, &mut rng);
        let zeros = Tensor::zeros([3, 3, 2, 9]);
        let p = DeformedShiftParams::with_learnable(3, 2, zeros).unwrap();
        let out = p.forward_two_path(&f).unwrap();
        let bank = ShiftKernelBank::new(3, 2).unwrap();
        let pure = im2col_via_dwconv(&f, &bank, ShiftConvMode::Fused).unwrap();
        // Same numbers, different layout: compare via the column view.
        let cols = crate::shift::grouped_output_to_columns(&out, 3).unwrap();
        assert_eq!(cols, pure);
    }

    #[test]
    fn zero_fixed_reduces_to_the_learnable_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::<f64>::random_uniform([1, 3, 5, 2], -1.0, 1.0, &mut rng);
        let p = DeformedShiftParams::<f64>::init(3, 2, 11)
            .unwrap()
            .with_zeroed_fixed();
        let out = p.forward_two_path(&f).unwrap();
        let learn_only = grouped_conv2d(&f, p.learnable(), 1).unwrap();
        assert_eq!(out, learn_only);
    }

    #[test]
    fn two_path_is_the_sum_of_two_grouped_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::<f64>::random_uniform([1, 4, 3, 2], -1.0, 1.0, &mut rng);
        let p = DeformedShiftParams::<f64>::init(3, 2, 9).unwrap();
        let out = p.forward_two_path(&f).unwrap();
        let a = grouped_conv2d(&f, p.fixed_bank().kernels(), 1).unwrap();
        let b = grouped_conv2d(&f, p.learnable(), 1).unwrap();
        assert_eq!(out, a.add(&b).unwrap());
    }

    #[test]
    fn reparameterize_with_zero_learnable_is_the_delta_bank() {
        let zeros = Tensor::zeros([3, 3, 2, 9]);
        let p = DeformedShiftParams::<f64>::with_learnable(3, 2, zeros)
            .unwrap()
            .reparameterize()
            .unwrap();
        assert_eq!(p.merged().unwrap(), p.fixed_bank().kernels());
    }

    #[test]
    fn reparameterize_scalar_case() {
        // k=1, C=1: fixed kernel is [1.0], learnable [0.5], merged [1.5].
        let learnable = Tensor::new([1, 1, 1, 1], vec![0.5f64]).unwrap();
        let p = DeformedShiftParams::with_learnable(1, 1, learnable)
            .unwrap()
            .reparameterize()
            .unwrap();
        assert_eq!(p.merged().unwrap().data(), &[1.5]);
    }

    #[test]
    fn reparameterize_twice_is_a_state_error() {
        let p = DeformedShiftParams::<f64>::init(3, 2, 0).unwrap();
        let merged = p.reparameterize().unwrap();
        assert!(matches!(merged.reparameterize(), Err(Error::State(_))));
    }

    #[test]
    fn forward_merged_before_reparameterize_is_a_state_error() {
        let p = DeformedShiftParams::<f64>::init(3, 2, 0).unwrap();
        let f = Tensor::<f64>::zeros([1, 2, 2, 2]);
        assert!(matches!(p.forward_merged(&f), Err(Error::State(_))));
    }

    #[test]
    fn merged_forward_matches_two_path_within_f64_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::<f64>::random_uniform([1, 5, 4, 3], -1.0, 1.0, &mut rng);
        let p = DeformedShiftParams::<f64>::init(3, 3, 21).unwrap();
        let two = p.forward_two_path(&f).unwrap();
        let one = p.reparameterize().unwrap().forward_merged(&f).unwrap();
        for (a, b) in two.data().iter().zip(one.data()) {
            assert!(rel_close(*a, *b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn merged_path_halves_the_convolution_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Tensor::<f64>::random_uniform([1, 4, 4, 2], -1.0, 1.0, &mut rng);
        let p = DeformedShiftParams::<f64>::init(3, 2, 1).unwrap();

        op_counter::reset();
        p.forward_two_path(&f).unwrap();
        let two = op_counter::stats();

        let merged = p.reparameterize().unwrap();
        op_counter::reset();
        merged.forward_merged(&f).unwrap();
        let one = op_counter::stats();

        assert_eq!(two.grouped_calls, 2);
        assert_eq!(one.grouped_calls, 1);
        assert_eq!(two.madds, 2 * one.madds);
    }
}
