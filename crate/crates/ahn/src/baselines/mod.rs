//! Ablation variants and the rating-only baseline, sharing the training
//! harness, plus the synthetic corpora for verification experiments.

pub mod synthetic;

use crate::corpus::Dataset;
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::tensor::Real;
use crate::train::{model_config_for, train_loop, ModelDims, TrainConfig, TrainOutcome};
use serde::Serialize;

pub use crate::train::{Result, TrainError};

/// One ablation row: which mechanism is disabled, plus any config overrides
/// the tag needs (none of the current tags require extra overrides beyond
/// what `build_variant` applies structurally).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub tag: Variant,
}

impl VariantSpec {
    pub fn parse(s: &str) -> Result<VariantSpec> {
        // Table rows are also addressable by their ablation letter.
        let tag = match s {
            "a" => Variant::NoItemAttention,
            "b" => Variant::SymmetricUser,
            "c" => Variant::NoAdaptedAffinity,
            "d" => Variant::DotProductHead,
            "e" => Variant::NoGating,
            other => other.parse::<Variant>()?,
        };
        Ok(VariantSpec { tag })
    }
}

/// Construct initial parameters for a variant. The tag fully determines the
/// structural overrides: which parameter tensors exist and how the forward
/// pass composes them.
pub fn build_variant<T: Real>(
    spec: &VariantSpec,
    base: &ModelConfig,
    seed: u64,
    rating_mean: f64,
) -> Result<ModelParams<T>> {
    Ok(ModelParams::init(base.clone(), spec.tag, seed, rating_mean)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub val_mse: f64,
    pub test_mse: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub variant: String,
    pub seeds: usize,
    pub mean_val_mse: f64,
    pub std_val_mse: f64,
    pub mean_test_mse: f64,
    pub std_test_mse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,best_epoch,val_mse,test_mse,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant,
                r.seed,
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                r.val_mse,
                r.test_mse,
                r.error.clone().unwrap_or_default()
            ));
        }
        out
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<22} {:>5} {:>12} {:>12} {:>12} {:>12}\n",
            "variant", "seeds", "val mean", "val std", "test mean", "test std"
        );
        for s in &self.summary {
            out.push_str(&format!(
                "{:<22} {:>5} {:>12.4} {:>12.4} {:>12.4} {:>12.4}\n",
                s.variant, s.seeds, s.mean_val_mse, s.std_val_mse, s.mean_test_mse, s.std_test_mse
            ));
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Train every requested variant with every seed and evaluate on val/test.
/// Per-run training failures are recorded in the row rather than aborting
/// the suite.
pub fn run_ablation_suite<T: Real>(
    dataset: &Dataset,
    variants: &[VariantSpec],
    seeds: &[u64],
    dims: &ModelDims,
    base_train: &TrainConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for spec in variants {
        for &seed in seeds {
            let train_cfg = TrainConfig {
                seed,
                ..base_train.clone()
            };
            let model_cfg = model_config_for(dataset, dims);
            let row = match run_one::<T>(dataset, model_cfg, spec.tag, &train_cfg) {
                Ok((outcome, test_mse)) => AblationRow {
                    variant: spec.tag.tag().to_string(),
                    seed,
                    best_epoch: outcome.best_epoch,
                    val_mse: outcome.best_val_mse,
                    test_mse,
                    error: outcome.diverged,
                },
                Err(e) => AblationRow {
                    variant: spec.tag.tag().to_string(),
                    seed,
                    best_epoch: None,
                    val_mse: f64::NAN,
                    test_mse: f64::NAN,
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }

    let mut summary = Vec::new();
    for spec in variants {
        let ok_rows: Vec<&AblationRow> = rows
            .iter()
            .filter(|r| r.variant == spec.tag.tag() && r.error.is_none())
            .collect();
        let vals: Vec<f64> = ok_rows.iter().map(|r| r.val_mse).collect();
        let tests: Vec<f64> = ok_rows.iter().map(|r| r.test_mse).collect();
        let (mv, sv) = mean_std(&vals);
        let (mt, st) = mean_std(&tests);
        summary.push(AblationSummary {
            variant: spec.tag.tag().to_string(),
            seeds: ok_rows.len(),
            mean_val_mse: mv,
            std_val_mse: sv,
            mean_test_mse: mt,
            std_test_mse: st,
        });
    }
    Ok(AblationTable { rows, summary })
}

fn run_one<T: Real>(
    dataset: &Dataset,
    model_cfg: ModelConfig,
    variant: Variant,
    train_cfg: &TrainConfig,
) -> Result<(TrainOutcome<T>, f64)> {
    let outcome = train_loop::<T>(dataset, model_cfg, variant, train_cfg, |_| {})?;
    let test_ids = &dataset.manifest.splits.test;
    let test_mse = match (&outcome.checkpoint, test_ids.is_empty()) {
        (Some(ckpt), false) => crate::train::evaluate(&ckpt.params, dataset, test_ids)?.mse,
        _ => f64::NAN,
    };
    Ok((outcome, test_mse))
}

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;
    use crate::corpus::{encode_pair_call_count, tokenize_call_count};
    use crate::model::{forward, DropoutMode, TraceLevel};
    use crate::tensor::Tape;
    use crate::train::Precision;

    fn small_dataset() -> Dataset {
        let interactions = overfit_corpus(11, 64);
        dataset_from_interactions(&interactions, &overfit_corpus_config(), 3, false).unwrap()
    }

    fn small_dims() -> ModelDims {
        ModelDims {
            word_dim: 8,
            hidden: 4,
            att_dim: 4,
            id_dim: 4,
            fm_factors: 2,
            coattn_mlp_dim: None,
            dropout: 0.0,
        }
    }

    fn small_train(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-4,
            max_epochs: epochs,
            batch_size: 8,
            seed,
            precision: Precision::F64,
            grad_clip: None,
        }
    }

    #[test]
    fn variant_spec_parses_tags_and_letters() {
        assert_eq!(VariantSpec::parse("full").unwrap().tag, Variant::Full);
        assert_eq!(VariantSpec::parse("b").unwrap().tag, Variant::SymmetricUser);
        assert_eq!(
            VariantSpec::parse("no_gating").unwrap().tag,
            Variant::NoGating
        );
        assert!(VariantSpec::parse("zz").is_err());
    }

    #[test]
    fn suite_over_two_variants_has_finite_mses() {
        let dataset = small_dataset();
        let table = run_ablation_suite::<f64>(
            &dataset,
            &[
                VariantSpec { tag: Variant::Full },
                VariantSpec {
                    tag: Variant::NoItemAttention,
                },
            ],
            &[1],
            &small_dims(),
            &small_train(1, 1),
        )
        .unwrap();
        assert_eq!(table.rows.len(), 2);
        for r in &table.rows {
            assert!(r.error.is_none(), "{:?}", r.error);
            assert!(r.val_mse.is_finite());
            assert!(r.test_mse.is_finite());
        }
        assert_eq!(table.summary.len(), 2);
    }

    #[test]
    fn suite_is_deterministic_for_identical_seeds() {
        let dataset = small_dataset();
        let run = || {
            run_ablation_suite::<f64>(
                &dataset,
                &[VariantSpec { tag: Variant::Full }],
                &[5, 6],
                &small_dims(),
                &small_train(0, 1),
            )
            .unwrap()
            .to_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fm_only_training_never_touches_review_text() {
        let dataset = small_dataset();
        let tok_before = tokenize_call_count();
        let enc_before = encode_pair_call_count();
        let table = run_ablation_suite::<f64>(
            &dataset,
            &[VariantSpec {
                tag: Variant::FmOnly,
            }],
            &[4],
            &small_dims(),
            &small_train(4, 2),
        )
        .unwrap();
        assert!(table.rows[0].error.is_none());
        assert_eq!(tokenize_call_count(), tok_before);
        assert_eq!(encode_pair_call_count(), enc_before);
    }

    // Forcing uniform attention scores: average pooling must equal the full
    // model when the full model's learned weights happen to be uniform.
    #[test]
    fn uniform_variant_equals_full_with_forced_uniform_scores() {
        let dataset = small_dataset();
        let model_cfg = model_config_for(&dataset, &small_dims());
        let full =
            ModelParams::<f64>::init(model_cfg.clone(), Variant::Full, 7, 3.0).unwrap();
        let mut uniform =
            ModelParams::<f64>::init(model_cfg, Variant::NoItemAttention, 7, 3.0).unwrap();

        // Share every tensor both variants have; zero the full model's item
        // attention scorers so its softmax outputs are exactly uniform.
        let mut full = full;
        for name in ["item_sent_attn.v", "item_rev_attn.v"] {
            for v in full.get_mut(name).unwrap().data.iter_mut() {
                *v = 0.0;
            }
        }
        let shared: Vec<String> = uniform.names().cloned().collect();
        for name in shared {
            let src = full.get(&name).unwrap().data.clone();
            uniform.get_mut(&name).unwrap().data = src;
        }

        let pair = &dataset.corpus.pairs[dataset.manifest.splits.train[0] as usize];
        let (u_doc, v_doc) = dataset.corpus.encode_pair(pair.user, pair.item);
        let run = |params: &ModelParams<f64>| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind_frozen(&mut tape);
            forward(
                &mut tape, params, &bound, &u_doc, &v_doc, pair.user, pair.item,
                DropoutMode::Disabled, TraceLevel::Weights,
            )
            .unwrap()
            .predicted_rating
        };
        let a = run(&full);
        let b = run(&uniform);
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}
