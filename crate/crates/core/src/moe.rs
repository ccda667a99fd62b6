//! Top-k gated mixture over spatiotemporal experts.
//!
//! All experts of a layer are compositions of the same two bidirectional
//! blocks: `shared_s` scans the pose axis of `(batch, D, T)` features with `T`
//! channels, `shared_t` scans the frame axis of the transposed `(batch, T, D)`
//! features with `D` channels.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Linear, Module};
use crate::ssm::BiBlock;
use crate::tensor::{topk_indices, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpertKind {
    ST,
    TT,
    TS,
    SS,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [ExpertKind::ST, ExpertKind::TT, ExpertKind::TS, ExpertKind::SS];

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::ST => "ST",
            ExpertKind::TT => "TT",
            ExpertKind::TS => "TS",
            ExpertKind::SS => "SS",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExpertKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown expert kind {s:?} (expected ST, TT, TS or SS)")))
    }
}

/// One-layer linear gate `D → N` with top-k masking.
#[derive(Clone, Debug)]
pub struct RouterParams {
    pub gate: Linear,
    pub k: usize,
}

impl RouterParams {
    pub fn new(pose_dim: usize, n_experts: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 || k > n_experts {
            return Err(Error::Config(format!("k = {k} must lie in 1..={n_experts}")));
        }
        Ok(RouterParams {
            gate: Linear::new(pose_dim, n_experts, true, rng),
            k,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.gate.outputs()
    }

    pub fn pose_dim(&self) -> usize {
        self.gate.inputs()
    }
}

impl Module for RouterParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

/// Routing record for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub logits: Vec<f64>,
    /// Ascending expert indices with nonzero weight.
    pub kept: Vec<usize>,
    pub weights: Vec<f64>,
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(field: &str, s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Format(format!("routing record: bad {field} entry {p:?}")))
        })
        .collect()
}

impl GateDecision {
    /// `sample=<i> layer=<l> logits=<..> kept=<..> weights=<..>`, with
    /// comma-separated lists and round-trippable floats.
    pub fn to_line(&self, sample: usize, layer: usize) -> String {
        let kept = self.kept.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "sample={sample} layer={layer} logits={} kept={kept} weights={}",
            join_floats(&self.logits),
            join_floats(&self.weights)
        )
    }

    /// Inverse of [`GateDecision::to_line`]; returns `(sample, layer, decision)`.
    pub fn parse_line(line: &str) -> Result<(usize, usize, GateDecision)> {
        let mut fields = std::collections::BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("routing record: field {part:?} lacks '='")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("routing record: missing field {k:?}")))
        };
        let scalar = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("routing record: bad {k}")))
        };
        Ok((
            scalar("sample")?,
            scalar("layer")?,
            GateDecision {
                logits: parse_list("logits", get("logits")?)?,
                kept: parse_list("kept", get("kept")?)?,
                weights: parse_list("weights", get("weights")?)?,
            },
        ))
    }
}

/// Differentiable gate weights `(batch, N)` plus per-sample records.
#[derive(Clone, Debug)]
pub struct Routing {
    pub weights: Tensor,
    pub decisions: Vec<GateDecision>,
}

impl Routing {
    /// Whether any sample assigns nonzero weight to expert `e`.
    pub fn is_active(&self, e: usize) -> bool {
        self.decisions.iter().any(|d| d.weights[e] != 0.0)
    }
}

/// `softmax(topk_mask(logits))` over the last axis of `(batch, N)` logits.
pub fn route_logits(logits: &Tensor, k: usize) -> Result<Routing> {
    if logits.ndim() != 2 {
        return Err(shape_err(
            "gate",
            format!("logits {:?} must be (batch, N)", logits.shape()),
        ));
    }
    let n = logits.dim(1);
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} must lie in 1..={n}")));
    }
    let weights = logits.topk_mask(k)?.softmax_last()?;
    let decisions = logits
        .data()
        .chunks(n)
        .zip(weights.data().chunks(n))
        .map(|(l, w)| GateDecision {
            logits: l.to_vec(),
            kept: topk_indices(l, k),
            weights: w.to_vec(),
        })
        .collect();
    Ok(Routing { weights, decisions })
}

/// Gate logits: temporal mean of `(batch, D, T)` features through the linear gate.
pub fn gate_logits(router: &RouterParams, features: &Tensor) -> Result<Tensor> {
    if features.ndim() != 3 || features.dim(1) != router.pose_dim() {
        return Err(shape_err(
            "gate",
            format!(
                "features {:?} must be (batch, {}, frames)",
                features.shape(),
                router.pose_dim()
            ),
        ));
    }
    router.gate.forward(&features.mean_axis(2)?)
}

pub fn gate(router: &RouterParams, features: &Tensor) -> Result<Routing> {
    route_logits(&gate_logits(router, features)?, router.k)
}

fn spatial(block: &BiBlock, x: &Tensor) -> Result<Tensor> {
    block.forward(x)
}

fn temporal(block: &BiBlock, x: &Tensor) -> Result<Tensor> {
    block.forward(&x.transpose(1, 2)?)?.transpose(1, 2)
}

/// Applies one expert composition to `(batch, D, T)` features.
pub fn expert_forward(kind: ExpertKind, shared_s: &BiBlock, shared_t: &BiBlock, x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 || x.dim(2) != shared_s.channels() || x.dim(1) != shared_t.channels() {
        return Err(shape_err(
            "expert",
            format!(
                "features {:?} must be (batch, {}, {})",
                x.shape(),
                shared_t.channels(),
                shared_s.channels()
            ),
        ));
    }
    match kind {
        ExpertKind::ST => temporal(shared_t, &spatial(shared_s, x)?),
        ExpertKind::SS => spatial(shared_s, &spatial(shared_s, x)?),
        ExpertKind::TS => spatial(shared_s, &temporal(shared_t, x)?),
        ExpertKind::TT => {
            let xt = x.transpose(1, 2)?;
            shared_t.forward(&shared_t.forward(&xt)?)?.transpose(1, 2)
        }
    }
}

/// `Σ_e weights[:, e] · outputs[e]`; `None` entries are skipped.
pub fn moe_combine(weights: &Tensor, outputs: &[Option<Tensor>]) -> Result<Tensor> {
    if weights.ndim() != 2 || weights.dim(1) != outputs.len() {
        return Err(shape_err(
            "moe_combine",
            format!("weights {:?} for {} expert outputs", weights.shape(), outputs.len()),
        ));
    }
    let batch = weights.dim(0);
    let mut acc: Option<Tensor> = None;
    for (e, out) in outputs.iter().enumerate() {
        let Some(out) = out else { continue };
        let w = weights.slice(1, e, e + 1)?.reshape(&[batch, 1, 1])?;
        let term = out.mul(&w)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Invalid("moe_combine: no expert outputs".into()))
}

/// One MoE layer: router plus the two shared blocks and an expert pool.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub router: RouterParams,
    pub shared_s: BiBlock,
    pub shared_t: BiBlock,
    pub pool: Vec<ExpertKind>,
}

impl MoeLayer {
    pub fn expert(&self, e: usize, x: &Tensor) -> Result<Tensor> {
        expert_forward(self.pool[e], &self.shared_s, &self.shared_t, x)
    }

    /// Gated output and the routing used. Experts no sample selects are not run.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Routing)> {
        if self.pool.len() != self.router.n_experts() {
            return Err(Error::Config(format!(
                "pool has {} experts but the router scores {}",
                self.pool.len(),
                self.router.n_experts()
            )));
        }
        let routing = gate(&self.router, x)?;
        let outputs = (0..self.pool.len())
            .map(|e| routing.is_active(e).then(|| self.expert(e, x)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok((moe_combine(&routing.weights, &outputs)?, routing))
    }

    /// Parameters of the two shared blocks, independent of the pool.
    pub fn expert_pool_parameters(&self) -> usize {
        self.shared_s.parameter_count() + self.shared_t.parameter_count()
    }
}

impl Module for MoeLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.router.visit(&join(prefix, "router"), f);
        self.shared_s.visit(&join(prefix, "shared_s"), f);
        self.shared_t.visit(&join(prefix, "shared_t"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.router.visit_mut(&join(prefix, "router"), f);
        self.shared_s.visit_mut(&join(prefix, "shared_s"), f);
        self.shared_t.visit_mut(&join(prefix, "shared_t"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{ScanOptions, SsmConfig};
    use crate::tensor::backward;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_ssm() -> SsmConfig {
        SsmConfig {
            expand: 1,
            state_dim: 2,
            conv_width: 2,
            dt_rank: None,
        }
    }

    fn layer(d: usize, t: usize, pool: Vec<ExpertKind>, k: usize, seed: u64) -> MoeLayer {
        let mut r = rng(seed);
        MoeLayer {
            router: RouterParams::new(d, pool.len(), k, &mut r).unwrap(),
            shared_s: BiBlock::new(t, tiny_ssm(), ScanOptions::default(), &mut r),
            shared_t: BiBlock::new(d, tiny_ssm(), ScanOptions::default(), &mut r),
            pool,
        }
    }

    fn logits(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn top_two_of_four() {
        let r = route_logits(&logits(&[2.0, 1.0, 0.0, -1.0]), 2).unwrap();
        let w = &r.decisions[0].weights;
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
        assert_eq!(&w[2..], &[0.0, 0.0]);
        assert_eq!(r.decisions[0].kept, vec![0, 1]);
    }

    #[test]
    fn full_k_is_plain_softmax() {
        let l = logits(&[0.3, -1.2, 2.0, 0.0]);
        let r = route_logits(&l, 4).unwrap();
        assert_eq!(r.weights, l.softmax_last().unwrap());
    }

    #[test]
    fn equal_logits_with_k1_pick_expert_zero() {
        let r = route_logits(&logits(&[0.5; 4]), 1).unwrap();
        assert_eq!(r.decisions[0].weights, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.decisions[0].kept, vec![0]);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        assert!(route_logits(&logits(&[0.0; 4]), 0).is_err());
        assert!(route_logits(&logits(&[0.0; 4]), 5).is_err());
        assert!(RouterParams::new(9, 4, 5, &mut rng(0)).is_err());
    }

    #[test]
    fn kinds_parse_and_display() {
        for k in ExpertKind::ALL {
            assert_eq!(k.to_string().parse::<ExpertKind>().unwrap(), k);
        }
        assert!("XY".parse::<ExpertKind>().is_err());
    }

    #[test]
    fn records_round_trip() {
        let d = GateDecision {
            logits: vec![0.1, -2.5, 1e-20, 3.0],
            kept: vec![0, 3],
            weights: vec![0.25, 0.0, 0.0, 0.75],
        };
        let line = d.to_line(7, 1);
        assert!(line.starts_with("sample=7 layer=1 logits="));
        assert_eq!(GateDecision::parse_line(&line).unwrap(), (7, 1, d));
        assert!(GateDecision::parse_line("sample=1 layer=x").is_err());
    }

    #[test]
    fn every_kind_preserves_shape() {
        let l = layer(6, 5, ExpertKind::ALL.to_vec(), 4, 1);
        let x = Tensor::randn(&[2, 6, 5], 1.0, &mut rng(2));
        for kind in ExpertKind::ALL {
            let y = expert_forward(kind, &l.shared_s, &l.shared_t, &x).unwrap();
            assert_eq!(y.shape(), &[2, 6, 5]);
        }
        assert!(expert_forward(ExpertKind::ST, &l.shared_s, &l.shared_t, &Tensor::zeros(&[2, 5, 6])).is_err());
    }

    #[test]
    fn compositions_follow_their_names() {
        let l = layer(6, 5, ExpertKind::ALL.to_vec(), 4, 3);
        let x = Tensor::randn(&[2, 6, 5], 1.0, &mut rng(4));
        let s = |x: &Tensor| l.shared_s.forward(x).unwrap();
        let t = |x: &Tensor| {
            l.shared_t
                .forward(&x.transpose(1, 2).unwrap())
                .unwrap()
                .transpose(1, 2)
                .unwrap()
        };
        let run = |k| expert_forward(k, &l.shared_s, &l.shared_t, &x).unwrap();
        assert_eq!(run(ExpertKind::SS), s(&s(&x)));
        assert_eq!(run(ExpertKind::ST), t(&s(&x)));
        assert_eq!(run(ExpertKind::TS), s(&t(&x)));
        assert_eq!(run(ExpertKind::TT), t(&t(&x)));
    }

    #[test]
    fn forced_weights_combine_linearly() {
        let mut r = rng(5);
        let o1 = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let o2 = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let w = Tensor::new(&[2, 4], [0.6, 0.4, 0.0, 0.0].repeat(2)).unwrap();
        let out = moe_combine(&w, &[Some(o1.clone()), Some(o2.clone()), None, None]).unwrap();
        for i in 0..out.numel() {
            assert_eq!(out.data()[i], 0.6 * o1.data()[i] + 0.4 * o2.data()[i]);
        }
    }

    #[test]
    fn single_expert_output_is_exact() {
        let l = layer(6, 5, ExpertKind::ALL.to_vec(), 1, 6);
        let x = Tensor::randn(&[1, 6, 5], 1.0, &mut rng(7));
        let (y, routing) = l.forward(&x).unwrap();
        let e = routing.decisions[0].kept[0];
        assert_eq!(y.max_abs_diff(&l.expert(e, &x).unwrap()).unwrap(), 0.0);
        let active = (0..4).filter(|&e| routing.is_active(e)).count();
        assert_eq!(active, 1);
    }

    #[test]
    fn dense_k_matches_weighted_sum_of_all_experts() {
        let l = layer(6, 5, ExpertKind::ALL.to_vec(), 4, 8);
        let x = Tensor::randn(&[3, 6, 5], 1.0, &mut rng(9));
        let (y, _) = l.forward(&x).unwrap();
        let p = gate_logits(&l.router, &x).unwrap().softmax_last().unwrap();
        let outs: Vec<_> = (0..4).map(|e| l.expert(e, &x).unwrap()).collect();
        let per = 6 * 5;
        for b in 0..3 {
            for i in 0..per {
                let dense: f64 = (0..4).map(|e| p.data()[b * 4 + e] * outs[e].data()[b * per + i]).sum();
                assert!((y.data()[b * per + i] - dense).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_logits_receive_no_gradient() {
        let l = logits(&[1.0, 3.0, -2.0, 0.5]).requiring_grad();
        let r = route_logits(&l, 2).unwrap();
        let target = Tensor::new(&[1, 4], vec![1.0, -1.0, 2.0, 0.5]).unwrap();
        let g = backward(&r.weights.mul(&target).unwrap().sum_all().unwrap()).unwrap();
        let g = g.get(&l).unwrap();
        assert_eq!(r.decisions[0].kept, vec![0, 1]);
        assert_eq!(&g.data()[2..], &[0.0, 0.0]);
        assert!(g.data()[0] != 0.0 && g.data()[1] != 0.0);
    }

    #[test]
    fn pool_composition_leaves_parameter_count_alone() {
        let het = layer(6, 5, ExpertKind::ALL.to_vec(), 4, 10);
        let hom = layer(6, 5, vec![ExpertKind::TT], 1, 10);
        assert_eq!(het.expert_pool_parameters(), hom.expert_pool_parameters());
        assert_eq!(
            het.parameter_count() - het.router.parameter_count(),
            het.expert_pool_parameters()
        );
    }
}
