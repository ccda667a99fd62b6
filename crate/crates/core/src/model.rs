//! End-to-end predictor: pad, DCT, encode, stacked MoE layers, residual,
//! decode, inverse DCT.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{pad_sequence, PoseCodec};
use crate::dct::DctBasis;
use crate::error::{shape_err, Error, Result};
use crate::moe::{ExpertKind, MoeLayer, RouterParams, Routing};
use crate::nn::{join, Mode, Module};
use crate::ssm::{BiBlock, ScanMode, ScanOptions, SsmConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub joints: usize,
    pub coords: usize,
    /// Observed frames `t`.
    pub history: usize,
    /// Observed plus predicted frames `T`.
    pub total: usize,
    pub n_experts: usize,
    /// Experts kept by the gate per sample.
    pub k: usize,
    pub moe_layers: usize,
    pub pool: Vec<ExpertKind>,
    pub scan_mode: ScanMode,
    pub flip_back: bool,
    pub ssm: SsmConfig,
    pub codec_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Concatenate the persons of a scene along the pose axis instead of
    /// treating them as separate batch entries.
    pub scene_concat: bool,
    /// Persons per scene; only consulted when `scene_concat` is set.
    pub persons: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 15,
            coords: 3,
            history: 50,
            total: 75,
            n_experts: 4,
            k: 4,
            moe_layers: 1,
            pool: ExpertKind::ALL.to_vec(),
            scan_mode: ScanMode::Bidirectional,
            flip_back: true,
            ssm: SsmConfig::default(),
            codec_hidden: 64,
            dropout: 0.1,
            seed: 0,
            scene_concat: false,
            persons: 1,
        }
    }
}

impl ModelConfig {
    /// `D = J·3` for one person.
    pub fn pose_dim(&self) -> usize {
        self.joints * self.coords
    }

    /// Width of the pose axis seen by the network.
    pub fn model_width(&self) -> usize {
        if self.scene_concat {
            self.persons * self.pose_dim()
        } else {
            self.pose_dim()
        }
    }

    pub fn future(&self) -> usize {
        self.total - self.history
    }

    pub fn scan_options(&self) -> ScanOptions {
        ScanOptions {
            mode: self.scan_mode,
            flip_back: self.flip_back,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.coords != 3 {
            return fail(format!("coords must be 3, got {}", self.coords));
        }
        if self.joints == 0 {
            return fail("joints must be positive".into());
        }
        if self.history == 0 || self.history >= self.total {
            return fail(format!(
                "history ({}) must be positive and below total ({})",
                self.history, self.total
            ));
        }
        if self.pool.len() != self.n_experts {
            return fail(format!(
                "pool lists {} experts but n_experts is {}",
                self.pool.len(),
                self.n_experts
            ));
        }
        if self.k == 0 || self.k > self.n_experts {
            return fail(format!("k = {} must lie in 1..={}", self.k, self.n_experts));
        }
        if self.moe_layers == 0 {
            return fail("moe_layers must be at least 1".into());
        }
        let s = &self.ssm;
        if s.expand == 0 || s.state_dim == 0 || s.conv_width == 0 || s.dt_rank == Some(0) {
            return fail(format!("ssm sizes must be positive: {s:?}"));
        }
        if self.codec_hidden == 0 {
            return fail("codec_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.persons == 0 {
            return fail("persons must be positive".into());
        }
        Ok(())
    }

    /// Dotted path of the first field where `self` and `other` differ.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<String> {
        let a = toml::Value::try_from(self).ok()?;
        let b = toml::Value::try_from(other).ok()?;
        first_diff(&a, &b, "")
    }
}

fn first_diff(a: &toml::Value, b: &toml::Value, path: &str) -> Option<String> {
    match (a, b) {
        (toml::Value::Table(x), toml::Value::Table(y)) => {
            let keys: BTreeSet<_> = x.keys().chain(y.keys()).collect();
            keys.into_iter().find_map(|k| match (x.get(k), y.get(k)) {
                (Some(u), Some(v)) => first_diff(u, v, &join(path, k)),
                _ => Some(join(path, k)),
            })
        }
        _ if a == b => None,
        _ => Some(path.to_string()),
    }
}

#[derive(Clone, Debug)]
pub struct StMoeModel {
    pub config: ModelConfig,
    pub codec: PoseCodec,
    pub dct: DctBasis,
    pub layers: Vec<MoeLayer>,
}

/// Prediction over all `T` frames plus the routing of every layer.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub pred: Tensor,
    pub routing: Vec<Routing>,
}

impl StMoeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let width = config.model_width();
        let frames = config.total;
        let codec = PoseCodec::new(width, frames, config.codec_hidden, config.dropout, &mut rng);
        let layers = (0..config.moe_layers)
            .map(|_| {
                Ok(MoeLayer {
                    router: RouterParams::new(width, config.n_experts, config.k, &mut rng)?,
                    shared_s: BiBlock::new(frames, config.ssm, config.scan_options(), &mut rng),
                    shared_t: BiBlock::new(width, config.ssm, config.scan_options(), &mut rng),
                    pool: config.pool.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StMoeModel {
            dct: DctBasis::new(frames),
            config,
            codec,
            layers,
        })
    }

    fn to_network_layout(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if x.ndim() != 3 || x.dim(1) != c.pose_dim() {
            return Err(shape_err(
                "model",
                format!(
                    "input {:?} must be (batch·persons, {}, frames)",
                    x.shape(),
                    c.pose_dim()
                ),
            ));
        }
        if !c.scene_concat {
            return Ok(x.clone());
        }
        if x.dim(0) % c.persons != 0 {
            return Err(shape_err(
                "model",
                format!("batch {} is not a multiple of {} persons", x.dim(0), c.persons),
            ));
        }
        x.reshape(&[x.dim(0) / c.persons, c.model_width(), x.dim(2)])
    }

    fn from_network_layout(&self, y: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if !c.scene_concat {
            return Ok(y.clone());
        }
        y.reshape(&[y.dim(0) * c.persons, c.pose_dim(), y.dim(2)])
    }

    /// `F_input`: encoded DCT coefficients of the padded history.
    pub fn encode_history(&self, history: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let c = &self.config;
        if history.ndim() != 3 || history.dim(2) != c.history {
            return Err(shape_err(
                "model",
                format!("history {:?} must have {} frames", history.shape(), c.history),
            ));
        }
        let x = self.to_network_layout(history)?;
        let padded = pad_sequence(&x, c.total)?;
        self.codec.encode(&self.dct.forward(&padded)?, mode)
    }

    /// `history`: (batch·persons, D, t) → prediction (batch·persons, D, T).
    pub fn forward(&self, history: &Tensor, mode: &mut Mode) -> Result<ModelOutput> {
        let f_input = self.encode_history(history, mode)?;
        let mut e = f_input.clone();
        let mut routing = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, r) = layer.forward(&e)?;
            e = out;
            routing.push(r);
        }
        let coeffs = self.codec.decode(&f_input.add(&e)?, mode)?;
        let pred = self.from_network_layout(&self.dct.inverse(&coeffs)?)?;
        Ok(ModelOutput { pred, routing })
    }

    /// Outputs of every pool slot at every layer, in eval mode. Layer `l`
    /// experts see the gated output of layer `l − 1`.
    pub fn expert_outputs(&self, history: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        let mut e = self.encode_history(history, &mut Mode::Eval)?;
        let mut all = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let outs = (0..layer.pool.len())
                .map(|i| layer.expert(i, &e))
                .collect::<Result<Vec<_>>>()?;
            all.push(outs);
            e = layer.forward(&e)?.0;
        }
        Ok(all)
    }
}

impl Module for StMoeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.codec.visit(&join(prefix, "codec"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.codec.visit_mut(&join(prefix, "codec"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// Parameter counts of one MoE layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerAudit {
    pub router: usize,
    pub shared_s: usize,
    pub shared_t: usize,
}

impl LayerAudit {
    pub fn expert_pool(&self) -> usize {
        self.shared_s + self.shared_t
    }
}

#[derive(Clone, Debug)]
pub struct ParameterAudit {
    pub tensors: Vec<(String, usize)>,
    pub codec: usize,
    pub layers: Vec<LayerAudit>,
    pub total: usize,
}

impl ParameterAudit {
    pub fn expert_pool(&self) -> usize {
        self.layers.iter().map(LayerAudit::expert_pool).sum()
    }
}

impl fmt::Display for ParameterAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "codec {}", self.codec)?;
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(
                f,
                "layer {i}: router {} shared_s {} shared_t {} (expert pool {})",
                l.router,
                l.shared_s,
                l.shared_t,
                l.expert_pool()
            )?;
        }
        write!(f, "total {} in {} tensors", self.total, self.tensors.len())
    }
}

/// Counts every parameter tensor once and checks that the pool adds nothing
/// beyond the two shared blocks of each layer.
pub fn audit_parameters(model: &StMoeModel) -> Result<ParameterAudit> {
    let tensors: Vec<(String, usize)> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.numel()))
        .collect();
    let mut seen = BTreeSet::new();
    for (name, _) in &tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Invalid(format!("parameter {name} registered twice")));
        }
    }
    let ids: BTreeSet<_> = model.named_parameters().iter().map(|(_, t)| t.id()).collect();
    if ids.len() != tensors.len() {
        return Err(Error::Invalid("a parameter tensor appears under two names".into()));
    }
    let layers: Vec<LayerAudit> = model
        .layers
        .iter()
        .map(|l| LayerAudit {
            router: l.router.parameter_count(),
            shared_s: l.shared_s.parameter_count(),
            shared_t: l.shared_t.parameter_count(),
        })
        .collect();
    let codec = model.codec.parameter_count();
    let total: usize = tensors.iter().map(|(_, n)| n).sum();
    let accounted = codec + layers.iter().map(|l| l.router + l.expert_pool()).sum::<usize>();
    if accounted != total {
        return Err(Error::Invalid(format!(
            "parameter audit: components sum to {accounted} but the model holds {total}"
        )));
    }
    Ok(ParameterAudit {
        tensors,
        codec,
        layers,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    pub(crate) fn micro_config() -> ModelConfig {
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

    #[test]
    fn default_config_is_valid_and_round_trips_through_toml() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.pose_dim(), 45);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<ModelConfig>("colour = 3").is_err());
        let partial: ModelConfig = toml::from_str("k = 2\n[ssm]\nexpand = 1\nstate_dim = 8\nconv_width = 4").unwrap();
        assert_eq!((partial.k, partial.ssm.state_dim), (2, 8));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig {
                history: 75,
                ..Default::default()
            },
            ModelConfig {
                k: 5,
                ..Default::default()
            },
            ModelConfig {
                n_experts: 3,
                ..Default::default()
            },
            ModelConfig {
                moe_layers: 0,
                ..Default::default()
            },
            ModelConfig {
                coords: 2,
                ..Default::default()
            },
            ModelConfig {
                dropout: 1.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
            assert!(StMoeModel::new(c).is_err());
        }
    }

    #[test]
    fn config_difference_names_the_field() {
        let a = ModelConfig::default();
        assert_eq!(a.first_difference(&a), None);
        let b = ModelConfig { k: 2, ..a.clone() };
        assert_eq!(a.first_difference(&b).as_deref(), Some("k"));
        let mut c = a.clone();
        c.ssm.state_dim = 8;
        assert_eq!(a.first_difference(&c).as_deref(), Some("ssm.state_dim"));
    }

    #[test]
    fn default_model_maps_history_to_full_sequence() {
        let model = StMoeModel::new(ModelConfig::default()).unwrap();
        let x = Tensor::randn(&[6, 45, 50], 100.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = model.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(out.pred.shape(), &[6, 45, 75]);
        assert_eq!(out.routing.len(), 1);
        assert_eq!(out.routing[0].decisions.len(), 6);
        assert!(model.forward(&Tensor::zeros(&[6, 45, 49]), &mut Mode::Eval).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_reconstructs_history() {
        let cfg = micro_config();
        let a = StMoeModel::new(cfg.clone()).unwrap();
        let b = StMoeModel::new(cfg).unwrap();
        let x = Tensor::randn(&[4, 9, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let ya = a.forward(&x, &mut Mode::Eval).unwrap().pred;
        let yb = b.forward(&x, &mut Mode::Eval).unwrap().pred;
        assert_eq!(ya, yb);
        let padded = pad_sequence(&x, 8).unwrap();
        assert!(ya.max_abs_diff(&padded).unwrap() > 1e-6);
    }

    #[test]
    fn micro_loss_gradient_matches_finite_differences() {
        let model = StMoeModel::new(micro_config()).unwrap();
        let x = Tensor::randn(&[2, 9, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let w = Tensor::randn(&[2, 9, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let f = |x: &Tensor| model.forward(x, &mut Mode::Eval)?.pred.mul(&w)?.sum_all();
        let err = finite_difference_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn scene_concat_groups_persons() {
        let cfg = ModelConfig {
            scene_concat: true,
            persons: 2,
            ..micro_config()
        };
        let model = StMoeModel::new(cfg).unwrap();
        assert_eq!(model.layers[0].router.pose_dim(), 18);
        let x = Tensor::randn(&[4, 9, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let out = model.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(out.pred.shape(), &[4, 9, 8]);
        assert_eq!(out.routing[0].decisions.len(), 2);
        assert!(model.forward(&Tensor::zeros(&[3, 9, 5]), &mut Mode::Eval).is_err());
    }

    #[test]
    fn audit_counts_each_tensor_once() {
        let model = StMoeModel::new(micro_config()).unwrap();
        let audit = audit_parameters(&model).unwrap();
        assert_eq!(audit.total, model.parameter_count());
        let het = audit.expert_pool();
        let hom = StMoeModel::new(ModelConfig {
            n_experts: 1,
            k: 1,
            pool: vec![ExpertKind::SS],
            ..micro_config()
        })
        .unwrap();
        assert_eq!(audit_parameters(&hom).unwrap().expert_pool(), het);
    }

    #[test]
    fn doubling_layers_doubles_layer_counts_only() {
        let one = audit_parameters(&StMoeModel::new(micro_config()).unwrap()).unwrap();
        let two = audit_parameters(
            &StMoeModel::new(ModelConfig {
                moe_layers: 2,
                ..micro_config()
            })
            .unwrap(),
        )
        .unwrap();
        assert_eq!(one.codec, two.codec);
        assert_eq!(two.layers.len(), 2);
        assert_eq!(two.layers[0], one.layers[0]);
        assert_eq!(two.total - two.codec, 2 * (one.total - one.codec));
    }

    #[test]
    fn default_parameter_total_is_stable() {
        let audit = audit_parameters(&StMoeModel::new(ModelConfig::default()).unwrap()).unwrap();
        assert_eq!(audit.total, DEFAULT_TOTAL, "{audit}");
    }

    // recorded at first build: codec 39948, router 184, spatial block 66375, temporal block 25965
    const DEFAULT_TOTAL: usize = 132_472;
}
