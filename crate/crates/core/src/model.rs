//! Full forecasting network: embedding, encoder tree, gated decoder and
//! per-node regression head, plus configuration and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, TimeIndex};
use crate::embedding::{DataEmbedding, EmbeddingConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::layers::Dense;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "FMPESTF-CKPT-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub nodes: usize,
    pub in_channels: usize,
    pub history: usize,
    pub horizon: usize,
    pub d1: usize,
    pub d2: usize,
    pub kernels: [usize; 2],
    pub diffusion_steps: usize,
    pub tau: usize,
    pub depth: usize,
    pub use_attention: bool,
    pub use_prompt: bool,
    pub use_dynamic: bool,
    pub slots_per_day: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 8,
            in_channels: 1,
            history: 12,
            horizon: 12,
            d1: 32,
            d2: 32,
            kernels: [7, 1],
            diffusion_steps: 2,
            tau: 10,
            depth: 2,
            use_attention: true,
            use_prompt: true,
            use_dynamic: true,
            slots_per_day: 288,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Total feature channels `C = d1 + d2`.
    pub fn channels(&self) -> usize {
        self.d1 + self.d2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("in_channels", self.in_channels),
            ("history", self.history),
            ("horizon", self.horizon),
            ("d1", self.d1),
            ("d2", self.d2),
            ("kernels[0]", self.kernels[0]),
            ("kernels[1]", self.kernels[1]),
            ("tau", self.tau),
            ("slots_per_day", self.slots_per_day),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let unit = 1usize << self.depth;
        if self.history % unit != 0 {
            return Err(Error::Config(format!(
                "history {} must be divisible by 2^depth = {unit}",
                self.history
            )));
        }
        if !self.use_prompt && !self.use_dynamic {
            return Err(Error::Config(
                "disabling both the adjacency prompt and the dynamic matrices leaves no graph".into(),
            ));
        }
        Ok(())
    }

    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            in_channels: self.in_channels,
            d1: self.d1,
            d2: self.d2,
            slots_per_day: self.slots_per_day,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            kernels: self.kernels,
            depth: self.depth,
            use_attention: self.use_attention,
            fusion: FusionConfig {
                channels: self.channels(),
                nodes: self.nodes,
                diffusion_steps: self.diffusion_steps,
                tau: self.tau,
                use_prompt: self.use_prompt,
                use_dynamic: self.use_dynamic,
            },
        }
    }

    /// Scalar parameter count of a model built from this config.
    pub fn param_count(&self) -> usize {
        let c = self.channels();
        self.embedding().param_count()
            + self.encoder().param_count()
            + 2 * Dense::param_count(c, c, true)
            + Dense::param_count(c * self.history, self.horizon, true)
    }

    /// Names of the fields that differ from `other`.
    pub fn differences(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(*v))
                .map(|(k, _)| k.clone())
                .collect(),
            _ => unreachable!("configs serialize to objects"),
        }
    }
}

/// Structure removed from the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoAtt,
    NoAdj,
    NoDyn,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoAtt, Ablation::NoAdj, Ablation::NoDyn];

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::NoAtt => c.use_attention = false,
            Ablation::NoAdj => c.use_prompt = false,
            Ablation::NoDyn => c.use_dynamic = false,
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::NoAtt => "no-att",
            Ablation::NoAdj => "no-adj",
            Ablation::NoDyn => "no-dyn",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-att" => Ok(Ablation::NoAtt),
            "no-adj" => Ok(Ablation::NoAdj),
            "no-dyn" => Ok(Ablation::NoDyn),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected no-att, no-adj or no-dyn)"
            ))),
        }
    }
}

/// Gated linear unit `a(h) ⊙ σ(b(h))` on the channel axis.
#[derive(Clone, Debug)]
pub struct Glu {
    pub a: Dense,
    pub b: Dense,
}

impl Glu {
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let a = self.a.apply(tape, store, h, 0)?;
        let b = self.b.apply(tape, store, h, 0)?;
        let g = tape.sigmoid(b)?;
        tape.mul(a, g)
    }
}

/// Parameter-free structure of the network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub embedding: DataEmbedding,
    pub encoder: Encoder,
    pub glu: Glu,
    /// Shared per-node map `[T', C·T]`.
    pub head: Dense,
}

/// Intermediate and final values of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub prediction: Var,
    pub graphs: Vec<(String, Var)>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { stage } => Error::NonFinite {
            stage: format!("{name} ({stage})"),
        },
        other => other,
    })
}

impl Network {
    /// Raw `[N, T']` forecast for one normalized history `[D, N, T]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        normalizer: &Normalizer,
        history: &Tensor,
        time_index: &[TimeIndex],
        prompt: Option<&Tensor>,
        record_graphs: bool,
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        let want = [cfg.in_channels, cfg.nodes, cfg.history];
        if history.shape() != want {
            return Err(Error::dim("model input", history.shape(), &want));
        }
        let prompt = match (cfg.use_prompt, prompt) {
            (true, None) => {
                return Err(Error::contract(
                    "this model uses the adjacency prompt but no adjacency was supplied",
                ))
            }
            (true, Some(p)) => Some(tape.constant(p.clone())?),
            (false, _) => None,
        };
        let x = tape.constant(history.clone())?;
        let h = stage("embedding", self.embedding.forward(tape, store, x, time_index))?;
        let mut graphs = Vec::new();
        let he = stage(
            "encoder",
            self.encoder
                .forward(tape, store, h, prompt, record_graphs.then_some(&mut graphs)),
        )?;
        let g = stage("glu", self.glu.apply(tape, store, he))?;
        let y = stage("regression head", self.regress(tape, store, g))?;
        let (scale, shift) = normalizer.target_affine();
        let prediction = stage("denormalize", tape.affine(y, scale, shift))?;
        Ok(Forward { prediction, graphs })
    }

    /// `[C, N, T] -> [N, T']` through the shared per-node linear map.
    pub fn regress(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let flat = tape.nodes_major(h)?;
        self.head.apply(tape, store, flat, 1)
    }
}

/// A network, its parameter values and the input normalization it was trained with.
#[derive(Clone, Debug)]
pub struct FmpestfModel {
    pub net: Network,
    pub store: ParamStore,
    pub normalizer: Normalizer,
}

impl FmpestfModel {
    /// Builds the (possibly ablated) model described by `cfg`, seeded by `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.channels();
        let embedding = DataEmbedding::new(&mut store, cfg.embedding(), &mut rng)?;
        let encoder = Encoder::new(&mut store, cfg.encoder(), &mut rng)?;
        let glu = Glu {
            a: Dense::new(&mut store, "glu.a", c, c, true, &mut rng)?,
            b: Dense::new(&mut store, "glu.b", c, c, true, &mut rng)?,
        };
        let head = Dense::new(&mut store, "head", c * cfg.history, cfg.horizon, true, &mut rng)?;
        let normalizer = Normalizer::identity(cfg.in_channels);
        Ok(Self {
            net: Network {
                cfg,
                embedding,
                encoder,
                glu,
                head,
            },
            store,
            normalizer,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        history: &Tensor,
        time_index: &[TimeIndex],
        prompt: Option<&Tensor>,
    ) -> Result<Var> {
        self.net
            .forward(tape, &self.store, &self.normalizer, history, time_index, prompt, false)
            .map(|f| f.prediction)
    }

    /// Forecast in raw units without keeping the tape.
    pub fn predict(
        &self,
        history: &Tensor,
        time_index: &[TimeIndex],
        prompt: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, history, time_index, prompt)?;
        Ok(tape.value(y).clone())
    }

    /// Forecast plus every relation matrix built by the encoder.
    pub fn predict_with_graphs(
        &self,
        history: &Tensor,
        time_index: &[TimeIndex],
        prompt: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        let mut tape = Tape::new();
        let f = self.net.forward(
            &mut tape,
            &self.store,
            &self.normalizer,
            history,
            time_index,
            prompt,
            true,
        )?;
        let graphs = f
            .graphs
            .into_iter()
            .map(|(name, v)| (name, tape.value(v).clone()))
            .collect();
        Ok((tape.value(f.prediction).clone(), graphs))
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let body = CheckpointBody {
            config: self.cfg().clone(),
            normalizer: self.normalizer.clone(),
            params: self
                .store
                .iter()
                .map(|(_, p)| ParamRecord {
                    id: p.id.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        };
        Ok(format!("{CHECKPOINT_HEADER}\n{}\n", serde_json::to_string(&body)?))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let (header, body) = text.split_once('\n').unwrap_or((text, ""));
        if header.trim_end() != CHECKPOINT_HEADER {
            return Err(Error::Checkpoint(format!(
                "expected header `{CHECKPOINT_HEADER}`, found `{}`",
                header.chars().take(40).collect::<String>()
            )));
        }
        let body: CheckpointBody = serde_json::from_str(body)?;
        let mut model = Self::new(body.config)?;
        if body.normalizer.mean.len() != model.cfg().in_channels
            || body.normalizer.std.len() != model.cfg().in_channels
        {
            return Err(Error::Checkpoint(
                "normalizer width does not match in_channels".into(),
            ));
        }
        model.normalizer = body.normalizer;
        if body.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config implies {}",
                body.params.len(),
                model.store.len()
            )));
        }
        for rec in body.params {
            let id = model
                .store
                .find(&rec.id)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", rec.id)))?;
            let t = Tensor::new(rec.shape, rec.values)
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", rec.id)))?;
            model
                .store
                .set_value(id, t)
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", rec.id)))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    id: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    config: ModelConfig,
    normalizer: Normalizer,
    params: Vec<ParamRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> ModelConfig {
        ModelConfig {
            nodes: 4,
            history: 8,
            horizon: 4,
            d1: 2,
            d2: 2,
            kernels: [3, 1],
            depth: 1,
            slots_per_day: 48,
            ..Default::default()
        }
    }

    fn window(cfg: &ModelConfig) -> (Tensor, Vec<TimeIndex>, Tensor) {
        let x = Tensor::from_fn(&[1, cfg.nodes, cfg.history], |i| ((i * 7) % 11) as f64 / 5.0 - 1.0);
        let ti = (0..cfg.history)
            .map(|t| TimeIndex { slot: t + 3, dow: 2 })
            .collect();
        let mut a = Tensor::zeros(&[cfg.nodes, cfg.nodes]);
        for i in 0..cfg.nodes {
            a.set(&[i, (i + 1) % cfg.nodes], 0.5);
            a.set(&[(i + 1) % cfg.nodes, i], 0.5);
        }
        (x, ti, a)
    }

    #[test]
    fn parameter_count_matches_formula() {
        for depth in 0..=2 {
            for flags in [(true, true, true), (false, true, true), (true, false, true), (true, true, false)] {
                let cfg = ModelConfig {
                    depth,
                    use_attention: flags.0,
                    use_prompt: flags.1,
                    use_dynamic: flags.2,
                    ..toy()
                };
                let m = FmpestfModel::new(cfg.clone()).unwrap();
                assert_eq!(m.store.scalar_count(), cfg.param_count(), "{cfg:?}");
            }
        }
        let full = ModelConfig::default();
        assert_eq!(FmpestfModel::new(full.clone()).unwrap().store.scalar_count(), full.param_count());
    }

    #[test]
    fn variants_remove_structure() {
        let full = FmpestfModel::new(toy()).unwrap();
        let no_att = FmpestfModel::new(Ablation::NoAtt.apply(&toy())).unwrap();
        let no_dyn = FmpestfModel::new(Ablation::NoDyn.apply(&toy())).unwrap();
        assert!(no_att.store.scalar_count() < full.store.scalar_count());
        assert!(!no_att.store.ids().any(|id| id.contains(".att.q")));
        assert!(!no_dyn.store.ids().any(|id| id.contains("pattern")));
        let both = ModelConfig {
            use_prompt: false,
            use_dynamic: false,
            ..toy()
        };
        assert!(matches!(FmpestfModel::new(both), Err(Error::Config(_))));
        let default_ids: Vec<_> = full.store.ids().collect();
        let again = FmpestfModel::new(toy()).unwrap();
        assert_eq!(default_ids, again.store.ids().collect::<Vec<_>>());
        assert!(full.store.values_bitwise_eq(&again.store));
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let cfg = toy();
        let m = FmpestfModel::new(cfg.clone()).unwrap();
        let (x, ti, a) = window(&cfg);
        let y1 = m.predict(&x, &ti, Some(&a)).unwrap();
        let y2 = m.predict(&x, &ti, Some(&a)).unwrap();
        assert_eq!(y1.shape(), &[4, 4]);
        assert!(y1.is_finite());
        assert!(y1.bitwise_eq(&y2));
        let def = ModelConfig {
            depth: 2,
            history: 12,
            horizon: 12,
            ..cfg
        };
        let m = FmpestfModel::new(def.clone()).unwrap();
        let (x, ti, a) = window(&def);
        assert_eq!(m.predict(&x, &ti, Some(&a)).unwrap().shape(), &[4, 12]);
    }

    #[test]
    fn missing_prompt_rejected_unless_ablated() {
        let cfg = toy();
        let (x, ti, _) = window(&cfg);
        let m = FmpestfModel::new(cfg.clone()).unwrap();
        assert!(matches!(m.predict(&x, &ti, None), Err(Error::Contract(_))));
        let m = FmpestfModel::new(Ablation::NoAdj.apply(&cfg)).unwrap();
        assert!(m.predict(&x, &ti, None).is_ok());
    }

    #[test]
    fn denormalization_is_the_documented_affine_map() {
        let cfg = toy();
        let (x, ti, a) = window(&cfg);
        let mut m = FmpestfModel::new(cfg).unwrap();
        let base = m.predict(&x, &ti, Some(&a)).unwrap();
        m.normalizer = Normalizer {
            mean: vec![120.0],
            std: vec![35.0],
        };
        let scaled = m.predict(&x, &ti, Some(&a)).unwrap();
        for (b, s) in base.data().iter().zip(scaled.data()) {
            assert_eq!(*s, b * 35.0 + 120.0);
        }
    }

    #[test]
    fn glu_gate_saturates() {
        let cfg = toy();
        let m = FmpestfModel::new(cfg.clone()).unwrap();
        let c = cfg.channels();
        let h = Tensor::from_fn(&[c, 2, 3], |i| (i as f64 * 0.3).sin());
        for (bias, open) in [(60.0, true), (-60.0, false)] {
            let mut store = m.store.clone();
            store.set_value(m.net.glu.b.w, Tensor::zeros(&[c, c])).unwrap();
            store.set_value(m.net.glu.b.b.unwrap(), Tensor::full(&[c], bias)).unwrap();
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone()).unwrap();
            let g = m.net.glu.apply(&mut tape, &store, hv).unwrap();
            let a = m.net.glu.a.apply(&mut tape, &store, hv, 0).unwrap();
            let want = if open { tape.value(a).clone() } else { Tensor::zeros(&[c, 2, 3]) };
            assert!(tape.value(g).max_abs_diff(&want) < 1e-20);
        }
    }

    #[test]
    fn zero_head_returns_bias_and_rows_are_per_node() {
        let cfg = toy();
        let m = FmpestfModel::new(cfg.clone()).unwrap();
        let c = cfg.channels();
        let mut store = m.store.clone();
        store
            .set_value(m.net.head.w, Tensor::zeros(&[cfg.horizon, c * cfg.history]))
            .unwrap();
        let bias = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        store.set_value(m.net.head.b.unwrap(), bias.clone()).unwrap();
        let h = Tensor::from_fn(&[c, 4, 8], |i| i as f64);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone()).unwrap();
        let y = m.net.regress(&mut tape, &store, hv).unwrap();
        for n in 0..4 {
            assert_eq!(tape.value(y).row(n), bias.data());
        }

        let mut tape = Tape::new();
        let hv = tape.constant(h.clone()).unwrap();
        let base = m.net.regress(&mut tape, &m.store, hv).unwrap();
        let mut h2 = h.clone();
        h2.set(&[1, 2, 5], 100.0);
        let hv2 = tape.constant(h2).unwrap();
        let moved = m.net.regress(&mut tape, &m.store, hv2).unwrap();
        for n in 0..4 {
            let same = tape.value(base).row(n) == tape.value(moved).row(n);
            assert_eq!(same, n != 2);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = toy();
        let mut m = FmpestfModel::new(cfg.clone()).unwrap();
        m.normalizer = Normalizer {
            mean: vec![0.1 + 0.2],
            std: vec![1.0 / 3.0],
        };
        let text = m.to_checkpoint_string().unwrap();
        assert!(text.starts_with("FMPESTF-CKPT-v1\n"));
        let back = FmpestfModel::from_checkpoint_str(&text).unwrap();
        assert!(back.store.values_bitwise_eq(&m.store));
        assert_eq!(back.normalizer, m.normalizer);
        assert_eq!(back.cfg(), m.cfg());
    }

    #[test]
    fn tampered_header_rejected() {
        let m = FmpestfModel::new(toy()).unwrap();
        let text = m.to_checkpoint_string().unwrap().replacen("v1", "v2", 1);
        assert!(matches!(
            FmpestfModel::from_checkpoint_str(&text),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn config_differences_name_fields() {
        let a = toy();
        let b = ModelConfig {
            tau: 3,
            depth: 2,
            ..toy()
        };
        let mut d = a.differences(&b);
        d.sort();
        assert_eq!(d, ["depth", "tau"]);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!("no-foo".parse::<Ablation>().is_err());
    }

    #[test]
    fn non_finite_names_stage() {
        let cfg = toy();
        let (x, ti, a) = window(&cfg);
        let mut m = FmpestfModel::new(cfg).unwrap();
        let id = m.store.find("glu.a.w").unwrap();
        m.store.set_value(id, Tensor::full(&[4, 4], f64::NAN)).unwrap();
        match m.predict(&x, &ti, Some(&a)) {
            Err(Error::NonFinite { stage }) => assert!(stage.starts_with("glu"), "{stage}"),
            other => panic!("expected non-finite, got {other:?}"),
        }
    }
}
