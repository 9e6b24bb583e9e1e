use ahn::baselines::synthetic::*;
use ahn::model::Variant;
use ahn::train::{evaluate, train_loop, model_config_for, ModelDims, Precision, TrainConfig};

fn run(variant: Variant, seed: u64, epochs: usize, lr: f64, batch: usize, id_dim: usize) -> (f64, f64) {
    let dims = ModelDims {
        word_dim: 8, hidden: 4, att_dim: 4, id_dim, fm_factors: 2,
        coattn_mlp_dim: None, dropout: 0.5,
    };
    let corpus = planted_asymmetry_corpus(1234, &PlantedConfig { topics: TOPICS, ..Default::default() });
    let dataset = dataset_from_interactions(&corpus, &planted_corpus_config(), 777, false).unwrap();
    let cfg = TrainConfig {
        learning_rate: lr, max_epochs: epochs, batch_size: batch, seed,
        precision: Precision::F32, grad_clip: None,
    };
    let started = std::time::Instant::now();
    let outcome = train_loop::<f32>(&dataset, model_config_for(&dataset, &dims), variant, &cfg, |m| {
        println!("  {variant} ep {} train {:.4} val {:.4}", m.epoch, m.train_mse, m.val_mse);
    }).unwrap();
    let ckpt = outcome.checkpoint.unwrap();
    let test = evaluate(&ckpt.params, &dataset, &dataset.manifest.splits.test).unwrap().mse;
    println!("{variant} seed {seed}: best val {:.4} test {:.4} total {:.0}s", outcome.best_val_mse, test, started.elapsed().as_secs_f64());
    (outcome.best_val_mse, test)
}

const TOPICS: usize = 1;

#[test]
fn calib_planted() {
    run(Variant::Full, 1, 10, 1e-3, 8, 4);
}
