//! Selective state-space (Mamba) blocks and their bidirectional wrapper.
//!
//! A block maps `(batch, L, C)` to `(batch, L, C)`, scanning along `L`. The
//! spatial orientation feeds `(batch, D, T)` directly (scan over pose
//! dimensions, `T` channels); the temporal orientation feeds the transposed
//! `(batch, T, D)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, uniform_param, LayerNorm, Linear, Module};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    /// Inner width multiplier `E`.
    pub expand: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    /// Low-rank width of the step-size projection; `ceil(C / 16)` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_rank: Option<usize>,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            expand: 2,
            state_dim: 16,
            conv_width: 4,
            dt_rank: None,
        }
    }
}

impl SsmConfig {
    pub fn dt_rank_for(&self, channels: usize) -> usize {
        self.dt_rank.unwrap_or_else(|| channels.div_ceil(16)).max(1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    #[default]
    Bidirectional,
    Forward,
    Backward,
}

/// `A_bar = exp(Δ ⊗ A)`, `B_bar = Δ ⊗ B`.
///
/// `delta`: (batch, L, E·C), strictly positive; `a`: (E·C, N); `b`: (batch,
/// L, N). Both outputs are (batch, L, E·C, N).
pub fn ssm_discretize(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    if delta.ndim() != 3 || a.ndim() != 2 || b.ndim() != 3 {
        return Err(shape_err(
            "ssm_discretize",
            format!(
                "delta {:?}, A {:?}, B {:?}: expected 3-D, 2-D, 3-D",
                delta.shape(),
                a.shape(),
                b.shape()
            ),
        ));
    }
    let (nb, len, ch) = (delta.dim(0), delta.dim(1), delta.dim(2));
    let ns = a.dim(1);
    if a.dim(0) != ch || b.shape() != [nb, len, ns] {
        return Err(shape_err(
            "ssm_discretize",
            format!(
                "A {:?} and B {:?} inconsistent with delta {:?}",
                a.shape(),
                b.shape(),
                delta.shape()
            ),
        ));
    }
    if cfg!(debug_assertions) {
        if let Some(i) = delta.data().iter().position(|&d| d <= 0.0 || d.is_nan()) {
            return Err(Error::Invalid(format!(
                "ssm_discretize: step size {} at flat index {i} is not positive",
                delta.data()[i]
            )));
        }
    }
    let full = [nb, len, ch, ns];
    let d4 = delta.reshape(&[nb, len, ch, 1])?.broadcast_to(&full)?;
    let a_bar = d4.mul(a)?.exp()?;
    let b_bar = d4.mul(&b.reshape(&[nb, len, 1, ns])?)?;
    Ok((a_bar, b_bar))
}

/// Selective scan with zero initial state; see [`Tensor::selective_scan`].
pub fn selective_scan(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, u: &Tensor) -> Result<Tensor> {
    Tensor::selective_scan(a_bar, b_bar, c, u)
}

/// One selective SSM block over sequences of `channels`-wide elements.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub channels: usize,
    pub config: SsmConfig,
    pub in_proj: Linear,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: Tensor,
    pub out_proj: Linear,
}

impl MambaBlock {
    pub fn new(channels: usize, config: SsmConfig, rng: &mut ChaCha8Rng) -> Self {
        let inner = config.expand * channels;
        let n = config.state_dim;
        let rank = config.dt_rank_for(channels);
        let conv_bound = 1.0 / (config.conv_width as f64).sqrt();

        let dt_std = (rank as f64).powf(-0.5);
        let dt_weight = uniform_param(&[rank, inner], dt_std, rng);
        // softplus(bias) lands log-uniformly in [1e-3, 1e-1]
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_bias: Vec<f64> = (0..inner)
            .map(|_| {
                let dt = rng.random_range(lo..hi).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_proj = Linear {
            weight: dt_weight,
            bias: Some(Tensor::param(&[inner], dt_bias).expect("shape")),
        };

        let a_log: Vec<f64> = (0..inner).flat_map(|_| (1..=n).map(|s| (s as f64).ln())).collect();

        MambaBlock {
            channels,
            config,
            in_proj: Linear::new(channels, 2 * inner, false, rng),
            conv_weight: uniform_param(&[inner, config.conv_width], conv_bound, rng),
            conv_bias: uniform_param(&[inner], conv_bound, rng),
            x_proj: Linear::new(inner, rank + 2 * n, false, rng),
            dt_proj,
            a_log: Tensor::param(&[inner, n], a_log).expect("shape"),
            out_proj: Linear::new(inner, channels, false, rng),
        }
    }

    pub fn inner(&self) -> usize {
        self.config.expand * self.channels
    }

    /// `A = −exp(A_log)`.
    pub fn state_matrix(&self) -> Result<Tensor> {
        self.a_log.exp()?.neg()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 3 || x.dim(2) != self.channels {
            return Err(shape_err(
                "mamba_block",
                format!("input {:?} must be (batch, len, {})", x.shape(), self.channels),
            ));
        }
        let inner = self.inner();
        let n = self.config.state_dim;
        let rank = self.dt_proj.inputs();

        let xz = self.in_proj.forward(x)?;
        let xs = xz.slice(2, 0, inner)?;
        let z = xz.slice(2, inner, 2 * inner)?;
        let xc = xs.causal_conv1d(&self.conv_weight, &self.conv_bias)?.silu()?;

        let proj = self.x_proj.forward(&xc)?;
        let dt_low = proj.slice(2, 0, rank)?;
        let b = proj.slice(2, rank, rank + n)?;
        let c = proj.slice(2, rank + n, rank + 2 * n)?;
        let delta = self.dt_proj.forward(&dt_low)?.softplus()?;

        let y = Tensor::selective_scan_fused(&delta, &self.state_matrix()?, &b, &c, &xc)?;
        self.out_proj.forward(&y.mul(&z.silu()?)?)
    }
}

impl Module for MambaBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        f(join(prefix, "conv.weight"), &self.conv_weight);
        f(join(prefix, "conv.bias"), &self.conv_bias);
        self.x_proj.visit(&join(prefix, "x_proj"), f);
        self.dt_proj.visit(&join(prefix, "dt_proj"), f);
        f(join(prefix, "a_log"), &self.a_log);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        f(join(prefix, "conv.weight"), &mut self.conv_weight);
        f(join(prefix, "conv.bias"), &mut self.conv_bias);
        self.x_proj.visit_mut(&join(prefix, "x_proj"), f);
        self.dt_proj.visit_mut(&join(prefix, "dt_proj"), f);
        f(join(prefix, "a_log"), &mut self.a_log);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanOptions {
    pub mode: ScanMode,
    /// Re-reverse the backward branch so its positions line up with the
    /// forward branch before summation.
    pub flip_back: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            mode: ScanMode::Bidirectional,
            flip_back: true,
        }
    }
}

/// One Mamba block run in both scan directions, followed by
/// `LN(LN(core) + FFN(LN(core)))`.
#[derive(Clone, Debug)]
pub struct BiBlock {
    pub mamba: MambaBlock,
    pub ln_inner: LayerNorm,
    pub ln_outer: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub scan: ScanOptions,
}

impl BiBlock {
    pub fn new(channels: usize, config: SsmConfig, scan: ScanOptions, rng: &mut ChaCha8Rng) -> Self {
        BiBlock {
            mamba: MambaBlock::new(channels, config, rng),
            ln_inner: LayerNorm::new(channels),
            ln_outer: LayerNorm::new(channels),
            ffn_in: Linear::new(channels, 2 * channels, true, rng),
            ffn_out: Linear::new(2 * channels, channels, true, rng),
            scan,
        }
    }

    pub fn channels(&self) -> usize {
        self.mamba.channels
    }

    fn backward_branch(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.mamba.forward(&x.reverse_axis(1)?)?;
        if self.scan.flip_back {
            y.reverse_axis(1)
        } else {
            Ok(y)
        }
    }

    /// Scan branches plus the residual input, before normalization.
    pub fn core(&self, x: &Tensor) -> Result<Tensor> {
        match self.scan.mode {
            ScanMode::Bidirectional => {
                let fwd = self.mamba.forward(x)?;
                fwd.add(&self.backward_branch(x)?)?.add(x)
            }
            ScanMode::Forward => self.mamba.forward(x)?.add(x),
            ScanMode::Backward => self.backward_branch(x)?.add(x),
        }
    }

    /// Normalization and feed-forward applied to a core output.
    pub fn finish(&self, core: &Tensor) -> Result<Tensor> {
        let n = self.ln_inner.forward(core)?;
        let ffn = self.ffn_out.forward(&self.ffn_in.forward(&n)?.relu()?)?;
        self.ln_outer.forward(&n.add(&ffn)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.finish(&self.core(x)?)
    }
}

impl Module for BiBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.mamba.visit(&join(prefix, "mamba"), f);
        self.ln_inner.visit(&join(prefix, "ln_inner"), f);
        self.ln_outer.visit(&join(prefix, "ln_outer"), f);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.mamba.visit_mut(&join(prefix, "mamba"), f);
        self.ln_inner.visit_mut(&join(prefix, "ln_inner"), f);
        self.ln_outer.visit_mut(&join(prefix, "ln_outer"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_config() -> SsmConfig {
        SsmConfig {
            expand: 2,
            state_dim: 2,
            conv_width: 2,
            dt_rank: None,
        }
    }

    #[test]
    fn discretize_scalar_case() {
        let d = Tensor::new(&[1, 1, 1], vec![1.0]).unwrap();
        let a = Tensor::new(&[1, 1], vec![-1.0]).unwrap();
        let b = Tensor::new(&[1, 1, 1], vec![2.0]).unwrap();
        let (ab, bb) = ssm_discretize(&d, &a, &b).unwrap();
        assert!((ab.data()[0] - (-1f64).exp()).abs() < 1e-15);
        assert!((ab.data()[0] - 0.3679).abs() < 1e-4);
        assert_eq!(bb.data()[0], 2.0);
    }

    #[test]
    fn discretize_small_step_limit() {
        let d = Tensor::full(&[1, 2, 3], 1e-12);
        let a = Tensor::full(&[3, 4], -5.0);
        let b = Tensor::full(&[1, 2, 4], 3.0);
        let (ab, bb) = ssm_discretize(&d, &a, &b).unwrap();
        assert!(ab.data().iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(bb.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn discretize_matches_elementwise_loop() {
        let mut r = rng(5);
        let d = Tensor::uniform(&[2, 3, 4], 0.01, 1.0, &mut r);
        let a = Tensor::uniform(&[4, 5], -3.0, -0.1, &mut r);
        let b = Tensor::randn(&[2, 3, 5], 1.0, &mut r);
        let (ab, bb) = ssm_discretize(&d, &a, &b).unwrap();
        for bi in 0..2 {
            for l in 0..3 {
                for c in 0..4 {
                    for n in 0..5 {
                        let i = ((bi * 3 + l) * 4 + c) * 5 + n;
                        let dv = d.data()[(bi * 3 + l) * 4 + c];
                        assert_eq!(ab.data()[i], (dv * a.data()[c * 5 + n]).exp());
                        assert_eq!(bb.data()[i], dv * b.data()[(bi * 3 + l) * 5 + n]);
                    }
                }
            }
        }
    }

    #[test]
    fn discretize_rejects_non_positive_steps() {
        let d = Tensor::new(&[1, 1, 2], vec![0.5, 0.0]).unwrap();
        let r = ssm_discretize(&d, &Tensor::full(&[2, 1], -1.0), &Tensor::ones(&[1, 1, 1]));
        if cfg!(debug_assertions) {
            assert!(r.is_err());
        }
    }

    #[test]
    fn scan_zero_input_gives_zero_output() {
        let mut r = rng(1);
        let a = Tensor::uniform(&[2, 5, 3, 4], 0.1, 0.9, &mut r);
        let b = Tensor::randn(&[2, 5, 3, 4], 1.0, &mut r);
        let c = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let y = selective_scan(&a, &b, &c, &Tensor::zeros(&[2, 5, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scan_two_steps_by_hand() {
        // h1 = b1 u1; h2 = a2 h1 + b2 u2; y2 = c2 h2
        let (a1, a2, b1, b2, c1, c2, u1, u2) = (0.9, 0.5, 2.0, -1.0, 0.7, 3.0, 1.5, 0.25);
        let a = Tensor::new(&[1, 2, 1, 1], vec![a1, a2]).unwrap();
        let b = Tensor::new(&[1, 2, 1, 1], vec![b1, b2]).unwrap();
        let c = Tensor::new(&[1, 2, 1], vec![c1, c2]).unwrap();
        let u = Tensor::new(&[1, 2, 1], vec![u1, u2]).unwrap();
        let y = selective_scan(&a, &b, &c, &u).unwrap();
        let h1 = b1 * u1;
        let h2 = a2 * h1 + b2 * u2;
        assert_eq!(y.data(), &[c1 * h1, c2 * h2]);
        assert_eq!(y.data()[1], 3.0 * (0.5 * 3.0 - 0.25));
    }

    #[test]
    fn scan_stays_finite_over_long_sequences() {
        let block = MambaBlock::new(3, small_config(), &mut rng(2));
        let a = block.state_matrix().unwrap();
        assert!(a.data().iter().all(|&v| v < 0.0));
        let len = 10_000;
        let mut r = rng(3);
        let delta = Tensor::uniform(&[1, len, block.inner()], 1e-3, 0.5, &mut r);
        let bm = Tensor::uniform(&[1, len, 2], -1.0, 1.0, &mut r);
        let cm = Tensor::uniform(&[1, len, 2], -1.0, 1.0, &mut r);
        let u = Tensor::uniform(&[1, len, block.inner()], -1.0, 1.0, &mut r);
        let (ab, bb) = ssm_discretize(&delta, &a, &bm).unwrap();
        let y = selective_scan(&ab, &bb, &cm, &u).unwrap();
        assert!(y.all_finite());
        let max = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 10.0, "{max}");
    }

    #[test]
    fn block_preserves_shape() {
        let block = MambaBlock::new(75, SsmConfig::default(), &mut rng(4));
        let y = block.forward(&Tensor::randn(&[2, 45, 75], 1.0, &mut rng(5))).unwrap();
        assert_eq!(y.shape(), &[2, 45, 75]);
        assert!(block.forward(&Tensor::zeros(&[2, 45, 74])).is_err());
    }

    #[test]
    fn block_with_only_out_proj_is_zero() {
        let mut block = MambaBlock::new(3, small_config(), &mut rng(6));
        block.visit_mut("", &mut |name, t| {
            if !name.starts_with("out_proj") {
                *t = Tensor::zeros(t.shape());
            }
        });
        let y = block.forward(&Tensor::randn(&[2, 4, 3], 1.0, &mut rng(7))).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let block = MambaBlock::new(3, small_config(), &mut rng(8));
        let x = Tensor::randn(&[1, 4, 3], 1.0, &mut rng(9));
        let w = Tensor::randn(&[1, 4, 3], 1.0, &mut rng(10));
        let err = finite_difference_check(|x| block.forward(x)?.mul(&w)?.sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn bidirectional_core_is_reversal_equivariant() {
        let block = BiBlock::new(3, small_config(), ScanOptions::default(), &mut rng(12));
        let x = Tensor::randn(&[2, 5, 3], 1.0, &mut rng(13));
        let lhs = block.core(&x.reverse_axis(1).unwrap()).unwrap();
        let rhs = block.core(&x).unwrap().reverse_axis(1).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
    }

    #[test]
    fn zero_out_proj_reduces_core_to_residual() {
        let mut block = BiBlock::new(3, small_config(), ScanOptions::default(), &mut rng(14));
        block.mamba.out_proj.weight = Tensor::zeros(block.mamba.out_proj.weight.shape());
        let x = Tensor::randn(&[2, 5, 3], 1.0, &mut rng(15));
        assert_eq!(block.core(&x).unwrap(), x);
        let expected = block.finish(&x).unwrap();
        assert_eq!(block.forward(&x).unwrap(), expected);
    }

    #[test]
    fn unidirectional_modes_drop_a_branch() {
        let mut block = BiBlock::new(3, small_config(), ScanOptions::default(), &mut rng(16));
        let x = Tensor::randn(&[1, 6, 3], 1.0, &mut rng(17));
        block.scan.mode = ScanMode::Forward;
        let fwd = block.core(&x).unwrap();
        assert_eq!(fwd, block.mamba.forward(&x).unwrap().add(&x).unwrap());
        block.scan.mode = ScanMode::Backward;
        let bwd = block.core(&x).unwrap();
        let expect = block
            .mamba
            .forward(&x.reverse_axis(1).unwrap())
            .unwrap()
            .reverse_axis(1)
            .unwrap()
            .add(&x)
            .unwrap();
        assert_eq!(bwd, expect);

        // zero input: the block maps zeros to zeros, leaving LN/FFN of zero
        block.scan.mode = ScanMode::Forward;
        let z = Tensor::zeros(&[1, 6, 3]);
        assert_eq!(block.core(&z).unwrap(), z);
        assert_eq!(block.forward(&z).unwrap(), block.finish(&z).unwrap());
    }

    #[test]
    fn literal_mode_skips_flip_back() {
        let scan = ScanOptions {
            mode: ScanMode::Bidirectional,
            flip_back: false,
        };
        let block = BiBlock::new(3, small_config(), scan, &mut rng(18));
        let x = Tensor::randn(&[1, 4, 3], 1.0, &mut rng(19));
        let expect = block
            .mamba
            .forward(&x)
            .unwrap()
            .add(&block.mamba.forward(&x.reverse_axis(1).unwrap()).unwrap())
            .unwrap()
            .add(&x)
            .unwrap();
        assert_eq!(block.core(&x).unwrap(), expect);
    }

    #[test]
    fn bidirectional_block_shares_one_mamba() {
        let block = BiBlock::new(4, small_config(), ScanOptions::default(), &mut rng(20));
        let ln_ffn = 2 * 2 * 4 + (4 * 8 + 8) + (8 * 4 + 4);
        assert_eq!(block.parameter_count(), block.mamba.parameter_count() + ln_ffn);
    }

    #[test]
    fn bidirectional_pipeline_gradient_matches_finite_differences() {
        let block = BiBlock::new(3, small_config(), ScanOptions::default(), &mut rng(21));
        let x = Tensor::randn(&[1, 4, 3], 1.0, &mut rng(22));
        let w = Tensor::randn(&[1, 4, 3], 1.0, &mut rng(23));
        let err = finite_difference_check(|x| block.forward(x)?.mul(&w)?.sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
