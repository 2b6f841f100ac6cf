//! Network configuration, named parameter tensors and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::spp_len;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Number of down- and up-sampling levels.
pub const DEPTH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    /// Channels at the first encoder level.
    pub base_width: usize,
    pub n_classes: usize,
    pub spp_levels: Vec<usize>,
    pub dropout_p: f64,
    pub fc_hidden: usize,
    /// Optional upper bound on any level's channel count.
    pub channel_cap: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: DEPTH,
            base_width: 8,
            n_classes: 2,
            spp_levels: vec![1, 2, 4],
            dropout_p: 0.5,
            fc_hidden: 256,
            channel_cap: None,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth != DEPTH {
            return bad(format!("depth must be {DEPTH}, got {}", self.depth));
        }
        if self.base_width == 0 {
            return bad("base_width must be >= 1".into());
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2".into());
        }
        if self.spp_levels.is_empty() || self.spp_levels.contains(&0) {
            return bad("spp_levels must be nonempty and positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.fc_hidden == 0 {
            return bad("fc_hidden must be >= 1".into());
        }
        if self.channel_cap == Some(0) {
            return bad("channel_cap must be >= 1".into());
        }
        Ok(())
    }

    fn cap(&self, c: usize) -> usize {
        self.channel_cap.map_or(c, |cap| c.min(cap))
    }

    /// Channels of encoder level `k` (1-based).
    pub fn level_channels(&self, k: usize) -> usize {
        self.cap(self.base_width << (k - 1))
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.cap(self.base_width << DEPTH)
    }

    /// Channels of the map feeding the classification branch (4th pool output).
    pub fn tap_channels(&self) -> usize {
        self.level_channels(4)
    }

    pub fn spp_features(&self) -> usize {
        spp_len(self.tap_channels(), &self.spp_levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Only weight tensors receive weight decay.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

impl<T> ParamTensor<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered named tensors; position in `tensors` is the parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub config: NetworkConfig,
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    kind: t.kind,
                    data: t.data.iter().map(|v| U::of(Scalar::to_f64(*v))).collect(),
                })
                .collect(),
        }
    }

    /// Zero buffers with the shape of every tensor.
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .map(|t| vec![T::zero(); t.data.len()])
            .collect()
    }
}

/// Total trainable scalars (running statistics excluded).
pub fn count_parameters<T>(params: &ParameterSet<T>) -> usize {
    params
        .tensors
        .iter()
        .filter(|t| t.kind.trainable())
        .map(|t| t.numel())
        .sum()
}

/// Tensor specification in parameter-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Fan-in for weight initialization.
    pub fan_in: usize,
}

/// Parameter ids of conv + batch-norm unit.
#[derive(Debug, Clone, Copy)]
pub struct UnitIds {
    pub weight: usize,
    pub bias: usize,
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PairIds {
    pub first: UnitIds,
    pub second: UnitIds,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub weight: usize,
    pub bias: usize,
    pub c_in: usize,
    pub c_out: usize,
}

/// Parameter ids for every layer, derived from a config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    /// Encoder conv pairs, levels 1..=5.
    pub enc: Vec<PairIds>,
    pub bottleneck: PairIds,
    /// Up-convolutions and conv pairs, levels 5 down to 1.
    pub up: Vec<LayerIds>,
    pub dec: Vec<PairIds>,
    pub head: LayerIds,
    pub fc1: LayerIds,
    pub fc2: LayerIds,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, fan_in: usize) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            kind,
            fan_in,
        });
        self.specs.len() - 1
    }

    fn unit(&mut self, prefix: &str, c_in: usize, c_out: usize) -> UnitIds {
        let fan = c_in * 9;
        UnitIds {
            weight: self.push(
                format!("{prefix}.conv.weight"),
                vec![c_out, c_in, 3, 3],
                ParamKind::Weight,
                fan,
            ),
            bias: self.push(format!("{prefix}.conv.bias"), vec![c_out], ParamKind::Bias, fan),
            gamma: self.push(format!("{prefix}.bn.scale"), vec![c_out], ParamKind::BnScale, 0),
            beta: self.push(format!("{prefix}.bn.shift"), vec![c_out], ParamKind::BnShift, 0),
            mean: self.push(
                format!("{prefix}.bn.running_mean"),
                vec![c_out],
                ParamKind::RunningMean,
                0,
            ),
            var: self.push(
                format!("{prefix}.bn.running_var"),
                vec![c_out],
                ParamKind::RunningVar,
                0,
            ),
            c_in,
            c_out,
        }
    }

    fn pair(&mut self, prefix: &str, c_in: usize, c_out: usize) -> PairIds {
        PairIds {
            first: self.unit(&format!("{prefix}.unit1"), c_in, c_out),
            second: self.unit(&format!("{prefix}.unit2"), c_out, c_out),
        }
    }

    fn layer(
        &mut self,
        prefix: &str,
        shape: Vec<usize>,
        fan_in: usize,
        c_in: usize,
        c_out: usize,
    ) -> LayerIds {
        LayerIds {
            weight: self.push(format!("{prefix}.weight"), shape, ParamKind::Weight, fan_in),
            bias: self.push(format!("{prefix}.bias"), vec![c_out], ParamKind::Bias, fan_in),
            c_in,
            c_out,
        }
    }
}

impl Layout {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let mut enc = Vec::with_capacity(DEPTH);
        let mut c_prev = 1;
        for k in 1..=DEPTH {
            let c = cfg.level_channels(k);
            enc.push(b.pair(&format!("enc{k}"), c_prev, c));
            c_prev = c;
        }
        let bottleneck = b.pair("bottleneck", c_prev, cfg.bottleneck_channels());
        c_prev = cfg.bottleneck_channels();
        let mut up = Vec::with_capacity(DEPTH);
        let mut dec = Vec::with_capacity(DEPTH);
        for k in (1..=DEPTH).rev() {
            let c = cfg.level_channels(k);
            up.push(b.layer(&format!("dec{k}.up"), vec![c_prev, c, 2, 2], c_prev, c_prev, c));
            dec.push(b.pair(&format!("dec{k}"), 2 * c, c));
            c_prev = c;
        }
        let head = b.layer(
            "head",
            vec![cfg.n_classes, c_prev, 1, 1],
            c_prev,
            c_prev,
            cfg.n_classes,
        );
        let feats = cfg.spp_features();
        let fc1 = b.layer(
            "cls.fc1",
            vec![cfg.fc_hidden, feats],
            feats,
            feats,
            cfg.fc_hidden,
        );
        let fc2 = b.layer("cls.fc2", vec![1, cfg.fc_hidden], cfg.fc_hidden, cfg.fc_hidden, 1);
        Ok(Layout {
            specs: b.specs,
            enc,
            bottleneck,
            up,
            dec,
            head,
            fc1,
            fc2,
        })
    }

    /// Ids of the classification-branch tensors.
    pub fn classifier_ids(&self) -> [usize; 4] {
        [self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]
    }
}

/// He-normal weights (variance 2 / fan_in), zero biases, identity batch norm.
pub fn init_parameters(cfg: &NetworkConfig, seed: u64) -> Result<ParameterSet<f32>> {
    let layout = Layout::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .specs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data = match s.kind {
                ParamKind::Weight => {
                    let normal = Normal::new(0.0, (2.0 / s.fan_in as f64).sqrt())
                        .expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                }
                ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean => vec![0.0; n],
                ParamKind::BnScale | ParamKind::RunningVar => vec![1.0; n],
            };
            ParamTensor {
                name: s.name.clone(),
                shape: s.shape.clone(),
                kind: s.kind,
                data,
            }
        })
        .collect();
    Ok(ParameterSet {
        config: cfg.clone(),
        tensors,
    })
}
