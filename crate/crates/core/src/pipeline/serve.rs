use crate::adapters::LoraAdapter;
use crate::clusterer::ClusterModel;
use crate::corpus::{extract_answer, tokenize, Example, Vocab};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::gradfeat::{instance_direction, ProjectionSpec};
use crate::model::ParameterStore;
use crate::router::{route, RoutingWeights};
use crate::trainer::EpochRecord;

use super::stages::{load_backbone, load_epochs, load_experts, load_final};
use super::{Run, Stage};

/// A finished run loaded for inference on new prompts: the backbone, the
/// base adapter's epoch snapshots, the experts and their centroids.
pub struct Deployment {
    pub vocab: Vocab,
    backbone: ParameterStore,
    epochs: Vec<EpochRecord>,
    adapters: Vec<LoraAdapter>,
    centroids: Vec<Vec<f64>>,
    spec: ProjectionSpec,
    l_max: usize,
    pub max_new_tokens: usize,
}

/// One answered prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub generation: String,
    pub answer: Option<String>,
    pub weights: RoutingWeights,
    /// Set when the prompt had no usable gradient direction.
    pub featureless: bool,
}

impl Deployment {
    pub fn open(run: &Run) -> Result<Deployment> {
        let c = &run.config;
        let data = run.require(Stage::Synth)?;
        run.require(Stage::TrainExperts)?;
        let model = ClusterModel::load(&run.require(Stage::Cluster)?)?;
        let base_dir = run.require(Stage::TrainBase)?;
        let epochs = load_epochs(&base_dir, c.epochs)?;
        let mut adapters = vec![load_final(&base_dir, c.epochs)?];
        adapters.extend(load_experts(
            &run.path(Stage::TrainExperts),
            model.n_clusters(),
            c.expert_epochs,
        )?);
        let spec =
            ProjectionSpec::new(c.seed_projection, c.d_proj, epochs[0].adapter.param_count())?;
        Ok(Deployment {
            vocab: Vocab::load(&data.join("vocab.txt"))?,
            backbone: load_backbone(run)?,
            epochs,
            adapters,
            centroids: model.centroids,
            spec,
            l_max: c.l_max,
            max_new_tokens: c.max_new_tokens,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.centroids.len()
    }

    pub fn route(&self, instruction: &str) -> Result<(RoutingWeights, bool)> {
        let prompt = self.prompt(instruction)?;
        let dir = instance_direction(&self.backbone, &self.epochs, &prompt, &self.spec)?;
        let c = self.centroids.len();
        Ok(match dir.map(|d| route(&d, &self.centroids)) {
            Some(Ok(w)) => (w, false),
            Some(Err(Error::ZeroDirection)) | None => (RoutingWeights::featureless(c), true),
            Some(Err(e)) => return Err(e),
        })
    }

    /// Routes `instruction`, optionally keeps the `top_k` heaviest experts,
    /// and decodes greedily from the weighted logit sum.
    pub fn answer(&self, instruction: &str, top_k: Option<usize>) -> Result<Answer> {
        let (w, featureless) = self.route(instruction)?;
        let w = match top_k {
            Some(k) => w.top_k(k),
            None => w,
        };
        let prompt = self.prompt(instruction)?;
        let e = Ensemble::new(&self.backbone, self.adapters.iter().collect())?;
        let g = e.generate(&prompt.tokens, || Ok(w.as_vec()), self.max_new_tokens)?;
        let generation = g.text(&self.vocab);
        Ok(Answer {
            answer: extract_answer(&generation).map(str::to_string),
            generation,
            weights: w,
            featureless,
        })
    }

    fn prompt(&self, instruction: &str) -> Result<crate::corpus::TokenSequence> {
        let ex = Example {
            id: String::new(),
            instruction: instruction.to_string(),
            response: String::new(),
            source_tag: String::new(),
        };
        tokenize(&ex, &self.vocab, self.l_max - 1)
    }
}
