//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stmoe_core::data::{synth_generate, MotionSequence, SynthSpec};
use stmoe_core::model::ModelConfig;
use stmoe_core::nn::Module;
use stmoe_core::ssm::{ssm_discretize, SsmConfig};
use stmoe_core::tensor::{apply_primitive, finite_difference_check, Attrs, Primitive};
use stmoe_core::{Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-step recurrence `h_l = a_l h_{l-1} + b_l u_l`, `y_l = Σ_n c_l h_l`,
/// assembled from slice, mul, add, reduce and concat only.
pub fn naive_selective_scan(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, u: &Tensor) -> Result<Tensor> {
    let (b, len, ch, n) = (a_bar.dim(0), a_bar.dim(1), a_bar.dim(2), a_bar.dim(3));
    let mut h = Tensor::zeros(&[b, 1, ch, n]);
    let mut ys = Vec::with_capacity(len);
    for l in 0..len {
        let a_l = a_bar.slice(1, l, l + 1)?;
        let b_l = b_bar.slice(1, l, l + 1)?;
        let u_l = u.slice(1, l, l + 1)?.reshape(&[b, 1, ch, 1])?;
        let c_l = c.slice(1, l, l + 1)?.reshape(&[b, 1, 1, n])?;
        h = a_l.mul(&h)?.add(&b_l.mul(&u_l)?)?;
        ys.push(h.mul(&c_l)?.sum_axis(3)?);
    }
    let refs: Vec<&Tensor> = ys.iter().collect();
    Tensor::concat(&refs, 1)
}

/// Random scan operands with shape (batch, len, channels, state) drawn from `seed`.
pub fn scan_operands(seed: u64) -> [Tensor; 4] {
    let mut r = rng(seed);
    let b = r.random_range(1..=3);
    let l = r.random_range(1..=12);
    let ch = r.random_range(1..=5);
    let n = r.random_range(1..=6);
    [
        Tensor::uniform(&[b, l, ch, n], 0.05, 0.99, &mut r),
        Tensor::randn(&[b, l, ch, n], 1.0, &mut r),
        Tensor::randn(&[b, l, n], 1.0, &mut r),
        Tensor::randn(&[b, l, ch], 1.0, &mut r),
    ]
}

/// Random `(delta, A, B, C, u)` for the discretizing scan, drawn from `seed`.
/// Lengths reach past two state checkpoints.
pub fn fused_scan_operands(seed: u64) -> [Tensor; 5] {
    let mut r = rng(seed);
    let b = r.random_range(1..=3);
    let l = r.random_range(1..=40);
    let ch = r.random_range(1..=5);
    let n = r.random_range(1..=6);
    [
        Tensor::uniform(&[b, l, ch], 0.001, 1.0, &mut r),
        Tensor::uniform(&[ch, n], -4.0, -0.1, &mut r),
        Tensor::randn(&[b, l, n], 1.0, &mut r),
        Tensor::randn(&[b, l, n], 1.0, &mut r),
        Tensor::randn(&[b, l, ch], 1.0, &mut r),
    ]
}

/// Discretization followed by the stepwise recurrence.
pub fn naive_discretized_scan(ops: &[Tensor; 5]) -> Result<Tensor> {
    let [delta, a, b, c, u] = ops;
    let (a_bar, b_bar) = ssm_discretize(delta, a, b)?;
    naive_selective_scan(&a_bar, &b_bar, c, u)
}

/// Largest relative difference `|a − b| / max(|a|, |b|, 1e-12)`.
pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Values bounded away from zero, for kinked primitives.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.2..1.5);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Well-separated values so top-k selection is stable under small perturbations.
fn separated(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 1.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

pub struct PrimitiveCase {
    pub primitive: Primitive,
    pub inputs: Vec<Tensor>,
    pub attrs: Attrs,
    /// Applies softmax before the weighted sum (for outputs holding −∞).
    pub softmax_after: bool,
}

pub fn primitive_case(p: Primitive, seed: u64) -> PrimitiveCase {
    let mut r = rng(seed.wrapping_mul(7919).wrapping_add(p as u64));
    let r = &mut r;
    let n = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, r);
    let (inputs, attrs, softmax_after) = match p {
        Primitive::Add | Primitive::Sub | Primitive::Mul => (vec![n(&[2, 3], r), n(&[2, 3], r)], Attrs::new(), false),
        Primitive::Scale => (vec![n(&[2, 3], r)], Attrs::new().with("factor", 1.7), false),
        Primitive::Matmul => (vec![n(&[2, 3, 4], r), n(&[2, 4, 2], r)], Attrs::new(), false),
        Primitive::Exp | Primitive::Softplus | Primitive::Silu | Primitive::Tanh => {
            (vec![n(&[2, 3], r)], Attrs::new(), false)
        }
        Primitive::Relu => (vec![away_from_zero(&[2, 3], r)], Attrs::new(), false),
        Primitive::Transpose => (
            vec![n(&[2, 3, 4], r)],
            Attrs::new().with("axes", vec![0usize, 2]),
            false,
        ),
        Primitive::ReverseAxis => (vec![n(&[2, 3, 4], r)], Attrs::new().with("axis", 1usize), false),
        Primitive::Reshape => (
            vec![n(&[2, 3, 4], r)],
            Attrs::new().with("shape", vec![6usize, 4]),
            false,
        ),
        Primitive::ReduceMean | Primitive::ReduceSum => (
            vec![n(&[2, 3, 4], r)],
            Attrs::new().with("axis", 1usize).with("keepdim", true),
            false,
        ),
        Primitive::SoftmaxLastAxis => (vec![n(&[3, 4], r)], Attrs::new(), false),
        Primitive::LayernormLastAxis => (
            vec![n(&[3, 4], r), away_from_zero(&[4], r), n(&[4], r)],
            Attrs::new().with("eps", 1e-5),
            false,
        ),
        Primitive::DepthwiseCausalConv1d => (vec![n(&[2, 5, 3], r), n(&[3, 2], r), n(&[3], r)], Attrs::new(), false),
        Primitive::Broadcast => (
            vec![n(&[3, 1], r)],
            Attrs::new().with("shape", vec![2usize, 3, 4]),
            false,
        ),
        Primitive::Slice => (
            vec![n(&[2, 5], r)],
            Attrs::new()
                .with("axis", 1usize)
                .with("start", 1usize)
                .with("end", 4usize),
            false,
        ),
        Primitive::Concat => (
            vec![n(&[2, 3], r), n(&[2, 2], r)],
            Attrs::new().with("axis", 1usize),
            false,
        ),
        Primitive::TopkMask => (vec![separated(&[3, 4], r)], Attrs::new().with("k", 2usize), true),
        Primitive::SelectiveScanFused => (
            vec![
                Tensor::uniform(&[1, 4, 2], 0.1, 1.0, r),
                Tensor::uniform(&[2, 3], -2.0, -0.2, r),
                n(&[1, 4, 3], r),
                n(&[1, 4, 3], r),
                n(&[1, 4, 2], r),
            ],
            Attrs::new(),
            false,
        ),
        Primitive::SelectiveScan => (
            vec![
                Tensor::uniform(&[1, 4, 2, 3], 0.2, 0.9, r),
                n(&[1, 4, 2, 3], r),
                n(&[1, 4, 3], r),
                n(&[1, 4, 2], r),
            ],
            Attrs::new(),
            false,
        ),
    };
    PrimitiveCase {
        primitive: p,
        inputs,
        attrs,
        softmax_after,
    }
}

/// Worst finite-difference error of `case` over every input, using a fixed
/// random projection of the output to a scalar.
pub fn primitive_gradient_error(case: &PrimitiveCase, seed: u64) -> Result<f64> {
    let name = case.primitive.name();
    let consts: Vec<Tensor> = case.inputs.iter().map(|t| t.detach()).collect();
    let probe = apply_primitive(name, &consts.iter().collect::<Vec<_>>(), &case.attrs)?;
    let mut r = rng(seed ^ 0xA5A5);
    let w = Tensor::from_fn(probe.shape(), |_| {
        let m = r.random_range(0.5..1.5);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let mut worst = 0.0f64;
    for i in 0..consts.len() {
        let f = |x: &Tensor| -> Result<Tensor> {
            let mut ins: Vec<&Tensor> = consts.iter().collect();
            ins[i] = x;
            let mut out = apply_primitive(name, &ins, &case.attrs)?;
            if case.softmax_after {
                out = out.softmax_last()?;
            }
            out.mul(&w)?.sum_all()
        };
        worst = worst.max(finite_difference_check(f, &consts[i], 1e-5)?);
    }
    Ok(worst)
}

/// Micro configuration used by the end-to-end checks: J=3, t=5, T=8.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        joints: 3,
        history: 5,
        total: 8,
        ssm: SsmConfig {
            expand: 2,
            state_dim: 4,
            conv_width: 2,
            dt_rank: None,
        },
        codec_hidden: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn micro_dataset(sequences: usize, seed: u64) -> Vec<MotionSequence> {
    synth_generate(&SynthSpec {
        sequences,
        persons: 3,
        frames: 8,
        joints: 3,
        seed,
        ..SynthSpec::default()
    })
    .expect("valid synthetic spec")
}

/// Adds `N(0, std²)` noise to every parameter so that no block sits at its
/// near-degenerate initialisation.
pub fn perturb_parameters<M: Module>(m: &mut M, std: f64, seed: u64) {
    let mut r = rng(seed);
    m.visit_mut("", &mut |_, p| {
        let noise = Tensor::randn(p.shape(), std, &mut r);
        let data = p.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        *p = p.with_data(data).expect("same length");
    });
}

/// Perturbs all parameters, then redraws every `dt_proj.bias` from `[0, 1)`
/// and every `a_log` from `[-2, 0)`. Step sizes become O(1) and the state
/// decays slowly enough for `A` to have a visible effect on the output.
pub fn gradient_check_parameters<M: Module>(m: &mut M, seed: u64) {
    perturb_parameters(m, 0.3, seed);
    let mut r = rng(seed ^ 0xD7);
    m.visit_mut("", &mut |name, p| {
        if name.ends_with("dt_proj.bias") {
            let u = Tensor::uniform(p.shape(), 0.0, 1.0, &mut r);
            *p = p.with_data(u.to_vec()).expect("same length");
        } else if name.ends_with("a_log") {
            let u = Tensor::uniform(p.shape(), -2.0, 0.0, &mut r);
            *p = p.with_data(u.to_vec()).expect("same length");
        }
    });
}
