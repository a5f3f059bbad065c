//! The full network: embeddings, interest graph, fusion, extraction,
//! evolution and prediction, with the ablation switches.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::TrainingInstance;
use crate::error::{Error, Result};
use crate::evolution::{augru_forward, nll, predict_logit, EvolutionKind, GruParams, PredictionHead};
use crate::extraction::{
    assignment, pool, reg_relative_position, reg_same_mapping, reg_single_affiliation, readout, AssignmentParams, RegWeights,
    RegularizerTerms,
};
use crate::fusion::{Activation, FusionOptions, FusionParams};
use crate::graph_builder::{similarity_values, sparsify, InterestGraph, MetricHeads};
use crate::metrics::ScoredInstance;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub pooled_len: usize,
    pub epsilon: f64,
    pub hops: usize,
    pub attention_hidden: usize,
    pub hidden: usize,
    pub fusion: bool,
    pub cluster_aware: bool,
    pub query_aware: bool,
    pub per_head_scores: bool,
    pub activation: Activation,
    pub extraction: bool,
    pub readout: bool,
    pub regularization: bool,
    pub evolution: EvolutionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 40,
            heads: 2,
            pooled_len: 10,
            epsilon: 0.5,
            hops: 1,
            attention_hidden: 40,
            hidden: 40,
            fusion: true,
            cluster_aware: true,
            query_aware: true,
            per_head_scores: false,
            activation: Activation::LeakyRelu,
            extraction: true,
            readout: true,
            regularization: true,
            evolution: EvolutionKind::Augru,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.hidden == 0 || self.heads == 0 || self.attention_hidden == 0 {
            return fail("dim, hidden, heads and attention_hidden must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return fail(format!("epsilon {} outside (0, 1]", self.epsilon));
        }
        if self.hops == 0 {
            return fail("hops must be at least 1".into());
        }
        if self.extraction && (self.pooled_len == 0 || self.pooled_len > max_len) {
            return fail(format!("pooled_len {} outside 1..={max_len}", self.pooled_len));
        }
        Ok(())
    }

    /// The plain GRU baseline: embeddings straight into a GRU.
    pub fn gru_baseline(&self) -> Self {
        Self { fusion: false, extraction: false, readout: false, evolution: EvolutionKind::Gru, ..self.clone() }
    }

    /// Width of node states after fusion.
    pub fn node_width(&self) -> usize {
        if self.fusion {
            self.heads * self.dim
        } else {
            self.dim
        }
    }

    fn fusion_options(&self) -> FusionOptions {
        FusionOptions {
            heads: self.heads,
            hops: self.hops,
            attention_hidden: self.attention_hidden,
            cluster_aware: self.cluster_aware,
            query_aware: self.query_aware,
            per_head_scores: self.per_head_scores,
            activation: self.activation,
            propagate: self.fusion,
        }
    }
}

/// Tape handles for one instance.
#[derive(Clone, Debug)]
pub struct InstanceVars {
    pub logit: Var,
    /// `(L_M, L_A, L_P)` when extraction is on.
    pub regs: Option<[Var; 3]>,
    pub assignment: Option<Var>,
    /// Length of the sequence fed to the evolution layer.
    pub recurrent_steps: usize,
}

/// Concrete interest graph and assignment of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection<T> {
    pub graph: InterestGraph<T>,
    /// `n×m` soft assignment; `None` without extraction.
    pub assignment: Option<Array2<T>>,
}

/// Loss, gradients and regulariser means of one batch.
#[derive(Clone, Debug)]
pub struct BatchResult<T> {
    /// Mean of per-instance `NLL + Σ λ·reg`; the L2 term is left to the optimiser.
    pub loss: f64,
    pub grads: ParamGrads<T>,
    pub regs: RegularizerTerms,
}

/// Instances per parallel chunk; gradients are summed chunk by chunk in
/// instance order so results do not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SurgeModel<T> {
    pub config: ModelConfig,
    pub num_items: usize,
    pub max_len: usize,
    pub store: ParamStore<T>,
    pub embedding: ParamId,
    pub metric: ParamId,
    pub fusion: FusionParams,
    pub assignment: Option<AssignmentParams>,
    pub evolution: GruParams,
    pub head: PredictionHead,
}

impl<T: Scalar> SurgeModel<T> {
    /// Registers every parameter; `num_items` excludes the padding row.
    pub fn new<R: Rng>(config: ModelConfig, num_items: usize, max_len: usize, rng: &mut R) -> Result<Self> {
        config.validate(max_len)?;
        let mut store = ParamStore::new();
        let d = config.dim;
        let embedding = store.xavier("embedding.items", num_items + 1, d, rng);
        // no loss gradient reaches the heads through the hard mask, so they stay
        // out of the penalty (under Adam it alone would shrink them to zero)
        let metric = store.add("graph.metric_heads", Array2::from_elem((config.heads, d), T::one()), false);
        let fusion = FusionParams::register(&mut store, d, config.fusion_options(), rng);
        let width = config.node_width();
        let assignment = config.extraction.then(|| AssignmentParams::register(&mut store, width, config.pooled_len, rng));
        let evolution = GruParams::register(&mut store, width, config.hidden, rng);
        let head_in = PredictionHead::input_dim(config.readout.then_some(width), d, config.hidden);
        let head = PredictionHead::register(&mut store, head_in, rng);
        Ok(Self { config, num_items, max_len, store, embedding, metric, fusion, assignment, evolution, head })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    fn check(&self, inst: &TrainingInstance) -> Result<()> {
        crate::data::validate_instance(inst, self.max_len, self.num_items).map_err(Error::Data)
    }

    /// Hard adjacency over the valid nodes of `history`.
    pub fn adjacency(&self, history: &[usize]) -> Array2<T> {
        let table = self.store.get(self.embedding);
        let h = Array2::from_shape_fn((history.len(), self.config.dim), |(i, k)| table[[history[i], k]]);
        let m = similarity_values(h.view(), self.store.view(self.metric));
        sparsify(m.view(), self.config.epsilon)
    }

    /// Builds the forward pass of one instance on `g`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, inst: &TrainingInstance) -> InstanceVars {
        let history = inst.history();
        let cfg = &self.config;
        let adjacency = self.adjacency(history);
        let table = self.store.view(self.embedding);
        let h = g.gather(self.embedding, table, history);
        let target = g.gather(self.embedding, table, &[inst.target]);

        let nodes = self.fusion.forward(g, &self.store, h, target, adjacency.view(), cfg.fusion);
        let (seq, gates, regs, s) = match &self.assignment {
            Some(ap) => {
                let s = assignment(g, &self.store, nodes.fused, adjacency.view(), ap);
                let pooled = pool(g, s, nodes.fused, nodes.gamma);
                let regs = [
                    reg_same_mapping(g, adjacency.view(), s),
                    reg_single_affiliation(g, s),
                    reg_relative_position(g, s),
                ];
                (pooled.embeddings, pooled.scores, Some(regs), Some(s))
            }
            None => (nodes.fused, nodes.gamma, None, None),
        };
        let recurrent_steps = g.shape(seq).0;
        let gates = (cfg.evolution == EvolutionKind::Augru).then_some(gates);
        let h_s = augru_forward(g, &self.store, &self.evolution, seq, gates);
        let h_g = cfg.readout.then(|| readout(g, nodes.gamma, nodes.fused));
        let logit = predict_logit(g, &self.store, &self.head, h_s, h_g, target);
        InstanceVars { logit, regs, assignment: s, recurrent_steps }
    }

    /// Graph over the padded sequence and the assignment of one instance.
    pub fn inspect(&self, inst: &TrainingInstance) -> Result<Inspection<T>> {
        self.check(inst)?;
        let table = self.store.get(self.embedding);
        let rows = Array2::from_shape_fn((inst.item_seq.len(), self.config.dim), |(i, k)| table[[inst.item_seq[i], k]]);
        let mask: Vec<bool> = inst.item_seq.iter().map(|&it| it != crate::data::PAD).collect();
        let heads = MetricHeads::new(self.store.get(self.metric).clone())?;
        let graph = InterestGraph::build(rows.view(), &mask, &heads, self.config.epsilon)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, inst);
        let assignment = out.assignment.map(|s| g.value(s).to_owned());
        Ok(Inspection { graph, assignment })
    }

    /// Predicted probability of one instance.
    pub fn predict(&self, inst: &TrainingInstance) -> Result<f64> {
        self.check(inst)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, inst);
        Ok(crate::autograd::sigmoid(g.scalar(out.logit).as_f64()))
    }

    pub fn score(&self, instances: &[TrainingInstance]) -> Result<Vec<ScoredInstance>> {
        instances.iter().try_for_each(|i| self.check(i))?;
        let scores: Vec<f64> = instances
            .par_iter()
            .map(|inst| {
                let mut g = Graph::new();
                let out = self.forward(&mut g, inst);
                crate::autograd::sigmoid(g.scalar(out.logit).as_f64())
            })
            .collect();
        Ok(instances
            .iter()
            .zip(scores)
            .map(|(inst, score)| ScoredInstance {
                user: inst.user,
                group: inst.group,
                item: inst.target,
                score,
                label: inst.label,
                valid_len: inst.valid_len,
            })
            .collect())
    }

    /// Mean regulariser values over `instances`; zero without extraction.
    pub fn regularizer_means(&self, instances: &[TrainingInstance]) -> RegularizerTerms {
        let mut total = RegularizerTerms::default();
        if self.assignment.is_none() || instances.is_empty() {
            return total;
        }
        let per: Vec<RegularizerTerms> = instances
            .par_iter()
            .map(|inst| {
                let mut g = Graph::new();
                let out = self.forward(&mut g, inst);
                let [m, a, p] = out.regs.expect("extraction enabled");
                RegularizerTerms {
                    same_mapping: g.scalar(m).as_f64(),
                    single_affiliation: g.scalar(a).as_f64(),
                    relative_position: g.scalar(p).as_f64(),
                }
            })
            .collect();
        for r in &per {
            total.add(r);
        }
        total.scale(1.0 / instances.len() as f64);
        total
    }

    /// Loss of one instance on the tape: NLL plus weighted regularisers when
    /// regularisation is on.
    fn instance_loss<'a>(&'a self, g: &mut Graph<'a, T>, inst: &TrainingInstance, weights: &RegWeights) -> (Var, RegularizerTerms) {
        let out = self.forward(g, inst);
        let mut loss = nll(g, out.logit, inst.label);
        let mut terms = RegularizerTerms::default();
        if let Some([m, a, p]) = out.regs {
            terms = RegularizerTerms {
                same_mapping: g.scalar(m).as_f64(),
                single_affiliation: g.scalar(a).as_f64(),
                relative_position: g.scalar(p).as_f64(),
            };
            if self.config.regularization {
                for (v, w) in [(m, weights.same_mapping), (a, weights.single_affiliation), (p, weights.relative_position)] {
                    if w != 0.0 {
                        let scaled = g.scale(v, T::lit(w));
                        loss = g.add(loss, scaled);
                    }
                }
            }
        }
        (loss, terms)
    }

    /// Mean loss and gradients over `batch`.
    pub fn batch_gradients(&self, batch: &[&TrainingInstance], weights: &RegWeights) -> BatchResult<T> {
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut grads = ParamGrads::default();
        let mut loss = 0.0;
        let mut regs = RegularizerTerms::default();
        for chunk in batch.chunks(CHUNK) {
            let parts: Vec<(f64, ParamGrads<T>, RegularizerTerms)> = chunk
                .par_iter()
                .map(|inst| {
                    let mut g = Graph::new();
                    let (l, terms) = self.instance_loss(&mut g, inst, weights);
                    let mut pg = g.backward(l).params(&g);
                    pg.scale(T::lit(scale));
                    (g.scalar(l).as_f64(), pg, terms)
                })
                .collect();
            for (l, pg, terms) in parts {
                loss += l;
                grads.merge(pg);
                regs.add(&terms);
            }
        }
        regs.scale(scale);
        BatchResult { loss: loss * scale, grads, regs }
    }

    /// Per-group parameter counts in registration order.
    pub fn parameter_table(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for id in self.store.ids() {
            let group = self.store.group(id).to_string();
            let n = self.store.get(id).len();
            match out.last_mut() {
                Some((g, c)) if *g == group => *c += n,
                _ => out.push((group, n)),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::gradcheck::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { dim: 4, heads: 2, pooled_len: 3, epsilon: 0.4, attention_hidden: 5, hidden: 4, ..Default::default() }
    }

    fn data() -> crate::data::DatasetSplit {
        let cfg = SynthConfig { num_users: 6, num_items: 20, num_clusters: 4, seq_len: 10, max_len: 8, noise_rate: 0.2, ..Default::default() };
        generate_synthetic(&cfg).unwrap().0
    }

    #[test]
    fn inspection_matches_forward_adjacency() {
        let split = data();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model: SurgeModel<f64> = SurgeModel::new(tiny(), split.item_vocab_size, split.max_len, &mut rng).unwrap();
        let inst = &split.train[0];
        let view = model.inspect(inst).unwrap();
        assert_eq!(view.graph.adjacency, model.adjacency(inst.history()));
        assert_eq!(view.graph.positions.len(), inst.valid_len);
        let s = view.assignment.unwrap();
        assert_eq!(s.dim(), (inst.valid_len, 3));
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recurrent_length_is_pooled_length() {
        let split = data();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full: SurgeModel<f64> = SurgeModel::new(tiny(), 20, 8, &mut rng).unwrap();
        let flat: SurgeModel<f64> = SurgeModel::new(ModelConfig { extraction: false, ..tiny() }, 20, 8, &mut rng).unwrap();
        for inst in &split.test {
            let mut g = Graph::new();
            assert_eq!(full.forward(&mut g, inst).recurrent_steps, 3);
            let mut g = Graph::new();
            assert_eq!(flat.forward(&mut g, inst).recurrent_steps, inst.valid_len);
        }
    }

    #[test]
    fn switches_change_parameter_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let count = |c: ModelConfig, rng: &mut ChaCha8Rng| SurgeModel::<f64>::new(c, 20, 8, rng).unwrap().parameter_count();
        let full = count(tiny(), &mut rng);
        for variant in [
            ModelConfig { fusion: false, ..tiny() },
            ModelConfig { cluster_aware: false, ..tiny() },
            ModelConfig { query_aware: false, ..tiny() },
            ModelConfig { extraction: false, ..tiny() },
            ModelConfig { readout: false, ..tiny() },
        ] {
            assert!(count(variant, &mut rng) < full);
        }
        assert!(count(ModelConfig { per_head_scores: true, ..tiny() }, &mut rng) > full);
        // these two only change the computation, not the parameters
        assert_eq!(count(ModelConfig { regularization: false, ..tiny() }, &mut rng), full);
        assert_eq!(count(ModelConfig { evolution: EvolutionKind::Gru, ..tiny() }, &mut rng), full);
    }

    #[test]
    fn rejects_bad_configs_and_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(SurgeModel::<f64>::new(ModelConfig { pooled_len: 9, ..tiny() }, 20, 8, &mut rng).is_err());
        assert!(SurgeModel::<f64>::new(ModelConfig { epsilon: 0.0, ..tiny() }, 20, 8, &mut rng).is_err());
        let model = SurgeModel::<f64>::new(tiny(), 20, 8, &mut rng).unwrap();
        let mut inst = data().test[0].clone();
        inst.target = 21;
        assert!(matches!(model.predict(&inst), Err(Error::Data(_))));
    }

    #[test]
    fn identical_inputs_score_identically() {
        let split = data();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = SurgeModel::<f64>::new(tiny(), 20, 8, &mut rng).unwrap();
        let a = model.score(&split.test).unwrap();
        let b = model.score(&split.test).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.score > 0.0 && s.score < 1.0));
    }

    #[test]
    fn f32_model_tracks_f64_model() {
        let split = data();
        let m64 = SurgeModel::<f64>::new(tiny(), 20, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let m32 = SurgeModel::<f32>::new(tiny(), 20, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for inst in &split.test {
            assert!((m64.predict(inst).unwrap() - m32.predict(inst).unwrap()).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let split = data();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = SurgeModel::<f64>::new(tiny(), 20, 8, &mut rng).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            if !model.store.decays(id) {
                model.store.get_mut(id).mapv_inplace(|_| rng.gen_range(-0.1..0.1));
            }
        }
        let weights = RegWeights { same_mapping: 0.1, single_affiliation: 0.2, relative_position: 0.05 };
        let batch: Vec<&TrainingInstance> = split.train.iter().take(3).collect();
        let loss = |store: &ParamStore<f64>| {
            let m = SurgeModel { store: store.clone(), ..model.clone() };
            let r = m.batch_gradients(&batch, &weights);
            (r.loss, r.grads)
        };
        for (group, report) in check_param_gradients(&model.store, 1e-5, loss) {
            assert!(report.max_rel_error <= 1e-4, "{group}: {report:?}");
        }
    }
}
