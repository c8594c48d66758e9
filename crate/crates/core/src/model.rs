//! The full model bundle: parameters, vocabulary, encoder, extractor and
//! loss predictor.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, Sentence, TaskSchema};
use crate::encoder::{EncoderConfig, EncoderOutput, SentenceEncoder, TransformerEncoder};
use crate::error::{Error, Result};
use crate::extractor::{decode, Extractor, ExtractorConfig, ExtractorVars, SamplePredictions};
use crate::graph::{Graph, Var};
use crate::mblp::{LossPredictor, PredictorConfig};
use crate::params::ParamStore;
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub extractor: ExtractorConfig,
    pub predictor: PredictorConfig,
}

/// Encoder plus extractor outputs for one sentence, evaluated off-tape.
#[derive(Debug, Clone)]
pub struct Forward {
    pub encoding: EncoderOutput,
    pub predictions: SamplePredictions,
}

/// A sentence's forward pass on a tape.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub tokens: Var,
    pub extractor: Option<ExtractorVars>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: TaskSchema,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: Arc<dyn SentenceEncoder>,
    pub extractor: Extractor,
    pub predictor: LossPredictor,
}

impl Model {
    /// Fresh model with the built-in transformer encoder. Initialisation is a
    /// pure function of `(config, schema, vocab, seed)`.
    pub fn new(config: &ModelConfig, schema: &TaskSchema, vocab: Vocab, seed: u64) -> Result<Self> {
        let vocab_size = vocab.len();
        Self::with_encoder(config, schema, vocab, seed, |store, rng| {
            Ok(TransformerEncoder::new(&config.encoder, vocab_size, store, rng)?.into_shared())
        })
    }

    /// Fresh model with a custom encoder. `build` must register its
    /// parameters in the store it is handed.
    pub fn with_encoder<F>(
        config: &ModelConfig,
        schema: &TaskSchema,
        vocab: Vocab,
        seed: u64,
        build: F,
    ) -> Result<Self>
    where
        F: FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<Arc<dyn SentenceEncoder>>,
    {
        schema.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = build(&mut store, &mut rng)?;
        let d_h = encoder.dim();
        let extractor = Extractor::new(
            &config.extractor,
            schema,
            d_h,
            config.encoder.heads,
            &mut store,
            &mut rng,
        )?;
        let predictor = LossPredictor::new(&config.predictor, schema, d_h, &mut store, &mut rng)?;
        Ok(Model {
            config: config.clone(),
            schema: schema.clone(),
            vocab,
            store,
            encoder,
            extractor,
            predictor,
        })
    }

    pub fn d_h(&self) -> usize {
        self.encoder.dim()
    }

    /// Encoder and extractor on `g`.
    pub fn forward_tape(&self, g: &mut Graph, sentence: &Sentence) -> Result<TapeForward> {
        if sentence.len() > self.encoder.max_len() {
            return Err(Error::InvalidSentence {
                id: sentence.id.clone(),
                reason: format!("longer than {} tokens", self.encoder.max_len()),
            });
        }
        let ids = self.vocab.ids(sentence);
        let tokens = self.encoder.encode(g, &self.store, &ids)?;
        let extractor = self.extractor.forward(g, &self.store, tokens, sentence)?;
        Ok(TapeForward { tokens, extractor })
    }

    pub fn forward(&self, sentence: &Sentence) -> Result<Forward> {
        let mut g = Graph::new();
        let f = self.forward_tape(&mut g, sentence)?;
        Ok(Forward {
            encoding: EncoderOutput {
                token_features: g.value(f.tokens).clone(),
            },
            predictions: self.extractor.predictions(&g, f.extractor.as_ref(), sentence),
        })
    }

    pub fn predict(&self, sentence: &Sentence) -> Result<LabelSet> {
        Ok(decode(&self.forward(sentence)?.predictions))
    }
}
