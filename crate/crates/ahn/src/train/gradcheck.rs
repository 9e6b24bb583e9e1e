//! End-to-end gradient verification: analytic gradients of the batch MSE
//! loss against central finite differences, per parameter tensor, in f64.

use crate::corpus::{CorpusConfig, DocumentSet, EncodedCorpus, Interaction, SelectionPolicy, Vocabulary};
use crate::model::{forward, DropoutMode, ModelConfig, ModelParams, TraceLevel, Variant};
use crate::tensor::Tape;

use super::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub epsilon: f64,
    pub threshold: f64,
    /// Corrupts the named op's backward rule, to prove the checker catches
    /// a broken gradient and names the culprit.
    pub fault: Option<&'static str>,
}

impl Default for GradCheckOptions {
    // The default seed is chosen so that every tensor receives nonzero
    // gradient from the probe batch and no pre-activation sits within
    // epsilon of a relu or argmax boundary, where central differences
    // would measure the kink instead of the derivative.
    fn default() -> Self {
        GradCheckOptions {
            seed: 4,
            epsilon: 1e-5,
            threshold: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude in the tensor; zero means the
    /// probe batch never exercised it.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub threshold: f64,
    pub fault: Option<&'static str>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.threshold)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(op) = self.fault {
            out.push_str(&format!("fault injected on op '{op}'\n"));
        }
        out.push_str(&format!(
            "{:<24} {:>8} {:>14} {:>13}  status\n",
            "parameter", "elems", "max rel err", "max |grad|"
        ));
        for g in &self.groups {
            let status = if g.max_rel_err < self.threshold {
                "ok"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "{:<24} {:>8} {:>14.3e} {:>13.3e}  {status}\n",
                g.name, g.elements, g.max_rel_err, g.max_abs_grad
            ));
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "gradient check {verdict} (threshold {:.0e}, rel err = |a-b| / max(|a|, |b|, 1e-2))\n",
            self.threshold
        ));
        out
    }
}

/// Fixed micro-corpus: a handful of short reviews over four users and four
/// items, giving every path (multi-review users, padded slots, multi-sentence
/// reviews) real gradients.
fn micro_corpus() -> (EncodedCorpus, Vec<(u32, u32, f64)>) {
    let rows: [(&str, &str, f64, &str); 8] = [
        ("u0", "i0", 5.0, "Great taste and easy to swallow. Will buy again."),
        ("u0", "i1", 3.0, "Box arrived dented. Product itself works fine."),
        ("u1", "i0", 4.0, "Good value for the price."),
        ("u1", "i2", 2.0, "Stopped working after a week. Very disappointed."),
        ("u2", "i1", 5.0, "Exactly as described. Smells great too."),
        ("u2", "i3", 4.0, "Solid build quality. Shipping was slow."),
        ("u3", "i2", 1.0, "Terrible after taste."),
        ("u3", "i3", 3.0, "Does the job. Nothing special about it."),
    ];
    let interactions: Vec<Interaction> = rows
        .iter()
        .enumerate()
        .map(|(i, &(u, v, r, text))| Interaction {
            user_id: u.into(),
            item_id: v.into(),
            rating: r,
            review_text: text.into(),
            timestamp: Some(i as i64),
        })
        .collect();
    let config = CorpusConfig {
        t_core: 1,
        n: 2,
        m: 2,
        k: 2,
        l: 3,
        vocab_size: 100,
        selection: SelectionPolicy::MostRecent,
    };
    let texts: Vec<&str> = interactions.iter().map(|i| i.review_text.as_str()).collect();
    let vocab = Vocabulary::build(texts.into_iter(), 100);
    let train_ids: Vec<u32> = (0..interactions.len() as u32).collect();
    let corpus = EncodedCorpus::build(&interactions, &train_ids, &vocab, &config);

    // probe pairs: unseen combinations so no review is excluded
    let probes = vec![(0u32, 2u32, 4.0), (1, 1, 3.0), (2, 0, 5.0), (3, 0, 2.0)];
    (corpus, probes)
}

fn batch_loss(
    params: &ModelParams<f64>,
    docs: &[(DocumentSet, DocumentSet, u32, u32, f64)],
    fault: Option<&'static str>,
    want_grads: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::<f64>::new();
    if let Some(op) = fault {
        tape.inject_backward_fault(op);
    }
    let bound = if want_grads {
        params.bind(&mut tape)
    } else {
        params.bind_frozen(&mut tape)
    };
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (u_doc, v_doc, user, item, rating) in docs {
        let trace = forward(
            &mut tape,
            params,
            &bound,
            u_doc,
            v_doc,
            *user,
            *item,
            DropoutMode::Disabled,
            TraceLevel::Weights,
        )?;
        preds.push(trace.prediction);
        targets.push(*rating);
    }
    let pred_vec = tape.concat(&preds)?;
    let target_vec = tape.leaf(targets.clone(), vec![targets.len()], false);
    let diff = tape.sub(target_vec, pred_vec)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / targets.len() as f64);
    let loss_value = tape.value(loss);

    let grads = if want_grads {
        tape.backward(loss)?;
        bound
            .iter()
            .map(|(_, h)| tape.grad(h).expect("bound").to_vec())
            .collect()
    } else {
        Vec::new()
    };
    Ok((loss_value, grads))
}

/// Run the end-to-end check on the tiny configuration. Always f64.
pub fn gradcheck(options: &GradCheckOptions) -> Result<GradCheckReport> {
    let (corpus, probes) = micro_corpus();
    let config = ModelConfig::tiny(
        corpus.pairs.len().max(2), // placeholder, replaced below
        corpus.users.len(),
        corpus.items.len(),
    );
    let config = ModelConfig {
        vocab_size: vocab_size_of(&corpus),
        ..config
    };
    let mut params = ModelParams::<f64>::init(config, Variant::Full, options.seed, 3.4)?;
    // training init zeroes fm.w; real gradient signal through every path
    // needs non-degenerate weights
    params.randomize_uniform(options.seed.wrapping_add(1), 0.4);

    let docs: Vec<(DocumentSet, DocumentSet, u32, u32, f64)> = probes
        .iter()
        .map(|&(u, v, r)| {
            let (ud, vd) = corpus.encode_pair(u, v);
            (ud, vd, u, v, r)
        })
        .collect();

    let (_, grads) = batch_loss(&params, &docs, options.fault, true)?;

    let names: Vec<String> = params.names().cloned().collect();
    let mut groups = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let count = params.get(name)?.data.len();
        let mut max_rel = 0.0f64;
        let max_abs_grad = grads[pi].iter().fold(0.0f64, |a, &g| a.max(g.abs()));
        for ei in 0..count {
            let original = params.get(name)?.data[ei];
            params.get_mut(name)?.data[ei] = original + options.epsilon;
            let (plus, _) = batch_loss(&params, &docs, None, false)?;
            params.get_mut(name)?.data[ei] = original - options.epsilon;
            let (minus, _) = batch_loss(&params, &docs, None, false)?;
            params.get_mut(name)?.data[ei] = original;

            let fd = (plus - minus) / (2.0 * options.epsilon);
            let an = grads[pi][ei];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-2);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        groups.push(GroupReport {
            name: name.clone(),
            elements: count,
            max_rel_err: max_rel,
            max_abs_grad,
        });
    }
    Ok(GradCheckReport {
        groups,
        threshold: options.threshold,
        fault: options.fault,
    })
}

fn vocab_size_of(corpus: &EncodedCorpus) -> usize {
    let mut max_idx = 1u32;
    for docs in corpus.users.iter().chain(corpus.items.iter()) {
        for r in &docs.reviews {
            for s in &r.sentences {
                for &w in s {
                    max_idx = max_idx.max(w);
                }
            }
        }
    }
    max_idx as usize + 1
}
