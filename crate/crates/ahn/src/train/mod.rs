//! Training: the MSE objective, Adam, the epoch loop with validation-based
//! checkpoint selection, evaluation, and checkpoint files.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, peek_checkpoint_echo, save_checkpoint, Checkpoint,
};
pub use gradcheck::{gradcheck, GradCheckOptions, GradCheckReport, GroupReport};

use crate::corpus::{Dataset, DocumentSet};
use crate::model::{forward, DropoutMode, ModelConfig, ModelParams, TraceLevel, Variant};
use crate::tensor::{Real, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("evaluation over an empty split")]
    EmptyEval,
    #[error("non-finite gradient for parameter '{param}'")]
    NanGradient { param: String },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("checkpoint vocabulary hash {checkpoint} does not match dataset vocabulary {dataset}")]
    VocabularyMismatch { checkpoint: String, dataset: String },
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<V> = std::result::Result<V, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Precision> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(TrainError::Config(format!(
                "unknown precision '{other}', expected f32|f64"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            max_epochs: 10,
            batch_size: 32,
            seed: 42,
            precision: Precision::F32,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Model dimensions not determined by the dataset.
#[derive(Debug, Clone)]
pub struct ModelDims {
    pub word_dim: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub id_dim: usize,
    pub fm_factors: usize,
    pub coattn_mlp_dim: Option<usize>,
    pub dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            word_dim: 300,
            hidden: 150,
            att_dim: 150,
            id_dim: 300,
            fm_factors: 10,
            coattn_mlp_dim: None,
            dropout: 0.5,
        }
    }
}

/// Assemble the full model configuration from chosen dimensions plus the
/// dataset's vocabulary, entity counts and document shape.
pub fn model_config_for(dataset: &Dataset, dims: &ModelDims) -> ModelConfig {
    ModelConfig {
        word_dim: dims.word_dim,
        hidden: dims.hidden,
        att_dim: dims.att_dim,
        id_dim: dims.id_dim,
        fm_factors: dims.fm_factors,
        vocab_size: dataset.vocab.len(),
        n_users: dataset.corpus.users.len(),
        n_items: dataset.corpus.items.len(),
        n: dataset.corpus.n as usize,
        m: dataset.corpus.m as usize,
        k: dataset.corpus.k as usize,
        l: dataset.corpus.l as usize,
        dropout: dims.dropout,
        coattn_mlp_dim: dims.coattn_mlp_dim,
    }
}

/// Canonical flat key=value echo of a full run configuration; embedded in
/// checkpoints and parseable back into a model configuration.
pub fn config_echo(model: &ModelConfig, variant: Variant, train: &TrainConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    kv("variant", variant.tag().to_string());
    kv("word_dim", model.word_dim.to_string());
    kv("hidden", model.hidden.to_string());
    kv("att_dim", model.att_dim.to_string());
    kv("id_dim", model.id_dim.to_string());
    kv("fm_factors", model.fm_factors.to_string());
    kv("vocab_size", model.vocab_size.to_string());
    kv("n_users", model.n_users.to_string());
    kv("n_items", model.n_items.to_string());
    kv("n", model.n.to_string());
    kv("m", model.m.to_string());
    kv("k", model.k.to_string());
    kv("l", model.l.to_string());
    kv("dropout", model.dropout.to_string());
    kv(
        "coattn_mlp_dim",
        model
            .coattn_mlp_dim
            .map(|d| d.to_string())
            .unwrap_or_else(|| "none".to_string()),
    );
    kv("learning_rate", train.learning_rate.to_string());
    kv("max_epochs", train.max_epochs.to_string());
    kv("batch_size", train.batch_size.to_string());
    kv("seed", train.seed.to_string());
    kv("precision", train.precision.tag().to_string());
    kv(
        "grad_clip",
        train
            .grad_clip
            .map(|c| c.to_string())
            .unwrap_or_else(|| "none".to_string()),
    );
    out
}

/// Recover the model configuration and variant from a config echo.
pub fn parse_config_echo(echo: &str) -> Result<(ModelConfig, Variant)> {
    let mut map = std::collections::HashMap::new();
    for line in echo.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("bad config line '{line}'")))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| TrainError::Config(format!("config echo missing '{k}'")))
    };
    let usize_of = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| TrainError::Config(format!("bad usize for '{k}'")))
    };
    let variant: Variant = get("variant")?.parse()?;
    let coattn_mlp_dim = match get("coattn_mlp_dim")?.as_str() {
        "none" => None,
        v => Some(
            v.parse()
                .map_err(|_| TrainError::Config("bad coattn_mlp_dim".into()))?,
        ),
    };
    let config = ModelConfig {
        word_dim: usize_of("word_dim")?,
        hidden: usize_of("hidden")?,
        att_dim: usize_of("att_dim")?,
        id_dim: usize_of("id_dim")?,
        fm_factors: usize_of("fm_factors")?,
        vocab_size: usize_of("vocab_size")?,
        n_users: usize_of("n_users")?,
        n_items: usize_of("n_items")?,
        n: usize_of("n")?,
        m: usize_of("m")?,
        k: usize_of("k")?,
        l: usize_of("l")?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| TrainError::Config("bad dropout".into()))?,
        coattn_mlp_dim,
    };
    Ok((config, variant))
}

/// Mean squared error over paired predictions and targets.
pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(TrainError::EmptyEval);
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (t - p) * (t - p))
        .sum();
    Ok(sum / predictions.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

pub struct TrainOutcome<T: Real> {
    pub checkpoint: Option<Checkpoint<T>>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub metrics: Vec<EpochMetrics>,
    /// Set when training aborted on a non-finite loss or gradient; the best
    /// checkpoint so far is preserved.
    pub diverged: Option<String>,
}

fn doc_pair_for(
    dataset: &Dataset,
    variant: Variant,
    user: u32,
    item: u32,
) -> (DocumentSet, DocumentSet) {
    if variant.uses_text() {
        dataset.corpus.encode_pair(user, item)
    } else {
        // the id-only variant never touches review text
        (
            DocumentSet::all_padding(0, 0, 0),
            DocumentSet::all_padding(0, 0, 0),
        )
    }
}

/// Train with per-epoch validation; the returned checkpoint is the one with
/// minimum validation MSE across epochs. Single-threaded and bit-reproducible
/// for a fixed seed.
pub fn train_loop<T: Real>(
    dataset: &Dataset,
    model_cfg: ModelConfig,
    variant: Variant,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    let train_ids = dataset.manifest.splits.train.clone();
    let val_ids = &dataset.manifest.splits.val;
    if train_ids.is_empty() {
        return Err(TrainError::EmptyEval);
    }

    let rating_mean = dataset.manifest.stats.train_rating_mean;
    let mut params =
        ModelParams::<T>::init(model_cfg.clone(), variant, train_cfg.seed, rating_mean)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let vocab_hash = dataset.vocab.content_hash();
    let echo = config_echo(&model_cfg, variant, train_cfg);

    let mut best: Option<(usize, f64, ModelParams<T>)> = None;
    let mut metrics = Vec::new();
    let mut diverged = None;

    'epochs: for epoch in 1..=train_cfg.max_epochs {
        let started = Instant::now();
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);

        let mut sq_err_sum = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut tape = Tape::<T>::new();
            let bound = params.bind(&mut tape);
            let mut preds = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &pair_id in batch {
                let pair = &dataset.corpus.pairs[pair_id as usize];
                let (u_doc, v_doc) = doc_pair_for(dataset, variant, pair.user, pair.item);
                let trace = forward(
                    &mut tape,
                    &params,
                    &bound,
                    &u_doc,
                    &v_doc,
                    pair.user,
                    pair.item,
                    DropoutMode::Train(&mut rng),
                    TraceLevel::Weights,
                )?;
                preds.push(trace.prediction);
                targets.push(pair.rating);
            }
            let pred_vec = tape.concat(&preds)?;
            let target_data: Vec<T> = targets.iter().map(|&t| T::from_f64(t)).collect();
            let target_vec = tape.leaf(target_data, vec![targets.len()], false);
            let diff = tape.sub(target_vec, pred_vec)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq);
            let loss = tape.scale(total, 1.0 / targets.len() as f64);

            let loss_value = tape.value(loss).as_f64();
            if !loss_value.is_finite() {
                diverged = Some(format!("non-finite loss in epoch {epoch}"));
                break 'epochs;
            }
            sq_err_sum += loss_value * targets.len() as f64;
            seen += targets.len();

            tape.backward(loss)?;
            let grads: Vec<Vec<T>> = bound
                .iter()
                .map(|(_, h)| tape.grad(h).expect("bound params track gradients").to_vec())
                .collect();
            match adam_step(
                &mut params,
                &grads,
                &mut adam,
                train_cfg.learning_rate,
                train_cfg.grad_clip,
            ) {
                Ok(()) => {}
                Err(TrainError::NanGradient { param }) => {
                    diverged = Some(format!(
                        "non-finite gradient for '{param}' in epoch {epoch}"
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let train_mse = sq_err_sum / seen.max(1) as f64;
        let val_mse = if val_ids.is_empty() {
            train_mse
        } else {
            evaluate(&params, dataset, val_ids)?.mse
        };
        let epoch_metrics = EpochMetrics {
            epoch,
            train_mse,
            val_mse,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&epoch_metrics);
        metrics.push(epoch_metrics);

        if best.as_ref().map_or(true, |(_, b, _)| val_mse < *b) {
            best = Some((epoch, val_mse, params.clone()));
        }
    }

    let (best_epoch, best_val_mse, checkpoint) = match best {
        Some((e, v, p)) => (
            Some(e),
            v,
            Some(Checkpoint {
                params: p,
                vocab_hash,
                config_echo: echo,
            }),
        ),
        None => (None, f64::INFINITY, None),
    };
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        best_val_mse,
        metrics,
        diverged,
    })
}

#[derive(Debug, Clone)]
pub struct PairPrediction {
    pub pair: u32,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mse: f64,
    pub predictions: Vec<PairPrediction>,
}

/// Deterministic evaluation with dropout off.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    pair_ids: &[u32],
) -> Result<EvalReport> {
    if pair_ids.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let mut predictions = Vec::with_capacity(pair_ids.len());
    for &pair_id in pair_ids {
        let pair = &dataset.corpus.pairs[pair_id as usize];
        let (u_doc, v_doc) = doc_pair_for(dataset, params.variant, pair.user, pair.item);
        let mut tape = Tape::<T>::new();
        let bound = params.bind_frozen(&mut tape);
        let trace = forward(
            &mut tape,
            params,
            &bound,
            &u_doc,
            &v_doc,
            pair.user,
            pair.item,
            DropoutMode::Disabled,
            TraceLevel::Weights,
        )?;
        predictions.push(PairPrediction {
            pair: pair_id,
            predicted: trace.predicted_rating,
            actual: pair.rating,
        });
    }
    let preds: Vec<f64> = predictions.iter().map(|p| p.predicted).collect();
    let actuals: Vec<f64> = predictions.iter().map(|p| p.actual).collect();
    Ok(EvalReport {
        mse: mse(&preds, &actuals)?,
        predictions,
    })
}
