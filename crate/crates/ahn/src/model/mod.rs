//! The rating predictor: shared BiLSTM sentence encoding, gated attention
//! over the item's sentences and reviews, item-guided co-attention over the
//! user's sentences and reviews, latent-id embeddings, and a factorization
//! machine on the concatenated user/item embeddings.

mod attention;
mod fm;
mod forward;
mod lstm;

pub use attention::{aggregate, coattention_weights, gated_attention, AttnHandles};
pub use fm::{fm_predict, FmHandles};
pub use forward::{forward, id_embed, DropoutMode, ForwardTrace, TraceLevel};
pub use lstm::{encode_review, BiLstmHandles, LstmHandles};

use crate::tensor::{Real, Tape, TensorRef};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("unknown variant tag '{0}'")]
    UnknownVariant(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<V> = std::result::Result<V, ModelError>;

/// Architecture variants. `Full` is the complete model; the others disable
/// one mechanism each and share every remaining component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Item attention replaced by average pooling.
    NoItemAttention,
    /// User side uses plain gated attention instead of co-attention, which
    /// makes the two sides symmetric.
    SymmetricUser,
    /// Affinity rows are not rescaled by the item's attention weights.
    NoAdaptedAffinity,
    /// Prediction is the dot product of the user and item embeddings.
    DotProductHead,
    /// Attention scores drop the sigmoid gate branch.
    NoGating,
    /// Ignores review text entirely; the FM runs on id embeddings alone.
    FmOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoItemAttention,
        Variant::SymmetricUser,
        Variant::NoAdaptedAffinity,
        Variant::DotProductHead,
        Variant::NoGating,
        Variant::FmOnly,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoItemAttention => "no_item_attention",
            Variant::SymmetricUser => "symmetric_user",
            Variant::NoAdaptedAffinity => "no_adapted_affinity",
            Variant::DotProductHead => "dot_product_head",
            Variant::NoGating => "no_gating",
            Variant::FmOnly => "fm_only",
        }
    }

    pub fn uses_text(self) -> bool {
        self != Variant::FmOnly
    }

    pub fn item_attention_uniform(self) -> bool {
        self == Variant::NoItemAttention
    }

    pub fn symmetric_user(self) -> bool {
        self == Variant::SymmetricUser
    }

    pub fn adapts_affinity(self) -> bool {
        self != Variant::NoAdaptedAffinity
    }

    pub fn gated(self) -> bool {
        self != Variant::NoGating
    }

    pub fn fm_head(self) -> bool {
        self != Variant::DotProductHead
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Dimensions and document-shape settings shared by params and forward.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Word embedding dimension.
    pub word_dim: usize,
    /// BiLSTM hidden size per direction; sentence and review embeddings are
    /// the two directions concatenated, so their dimension is `2 * hidden`.
    pub hidden: usize,
    /// Attention score hidden dimension.
    pub att_dim: usize,
    /// Latent-id embedding dimension.
    pub id_dim: usize,
    /// Factorization machine factor count.
    pub fm_factors: usize,
    pub vocab_size: usize,
    pub n_users: usize,
    pub n_items: usize,
    /// Review slots per user document.
    pub n: usize,
    /// Review slots per item document.
    pub m: usize,
    /// Sentence slots per review.
    pub k: usize,
    /// Word slots per sentence.
    pub l: usize,
    pub dropout: f64,
    /// When set, the co-attention mapping is a one-layer tanh MLP to this
    /// dimension; otherwise the identity, making the affinity map bilinear.
    pub coattn_mlp_dim: Option<usize>,
}

impl ModelConfig {
    /// Sentence/review embedding dimension.
    pub fn emb_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Dimension the co-attention affinity matrices operate in.
    pub fn coattn_dim(&self) -> usize {
        self.coattn_mlp_dim.unwrap_or_else(|| self.emb_dim())
    }

    /// One-sided final embedding dimension (text part plus id part).
    pub fn side_dim(&self, variant: Variant) -> usize {
        if variant.uses_text() {
            self.emb_dim() + self.id_dim
        } else {
            self.id_dim
        }
    }

    /// FM input dimension for a variant.
    pub fn fm_input_dim(&self, variant: Variant) -> usize {
        2 * self.side_dim(variant)
    }

    /// The small configuration used by gradient checking and the oracle
    /// equivalence tests.
    pub fn tiny(vocab_size: usize, n_users: usize, n_items: usize) -> ModelConfig {
        ModelConfig {
            word_dim: 8,
            hidden: 4,
            att_dim: 4,
            id_dim: 4,
            fm_factors: 2,
            vocab_size,
            n_users,
            n_items,
            n: 2,
            m: 2,
            k: 2,
            l: 3,
            dropout: 0.5,
            coattn_mlp_dim: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("word_dim", self.word_dim),
            ("hidden", self.hidden),
            ("att_dim", self.att_dim),
            ("id_dim", self.id_dim),
            ("fm_factors", self.fm_factors),
            ("vocab_size", self.vocab_size),
            ("n", self.n),
            ("m", self.m),
            ("k", self.k),
            ("l", self.l),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Every learnable tensor, keyed by a stable role name. Iteration order is
/// insertion order, which fixes the optimizer update order, the checkpoint
/// layout, and the gradient-check report.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Real> {
    pub config: ModelConfig,
    pub variant: Variant,
    entries: IndexMap<String, ParamTensor<T>>,
}

/// Dedicated id-table column for users/items unseen at training time.
pub fn cold_start_row(table_rows: usize) -> usize {
    table_rows - 1
}

impl<T: Real> ModelParams<T> {
    /// Random initialization. `rating_mean` seeds the FM bias so the model
    /// starts out predicting the training mean.
    pub fn init(config: ModelConfig, variant: Variant, seed: u64, rating_mean: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams {
            config: config.clone(),
            variant,
            entries: IndexMap::new(),
        };
        let emb = config.emb_dim();
        let h = config.hidden;

        let mut uniform = |params: &mut Self, name: &str, shape: Vec<usize>, scale: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64(rng.gen_range(-scale..scale)))
                .collect();
            params.entries.insert(name.to_string(), ParamTensor { shape, data });
        };

        if variant.uses_text() {
            uniform(
                &mut params,
                "word_embedding",
                vec![config.word_dim, config.vocab_size],
                0.1,
            );
            for (lstm, input_dim) in [("word_lstm", config.word_dim), ("ctx_lstm", emb)] {
                for dir in ["fwd", "bwd"] {
                    let ih_scale = 1.0 / (input_dim as f64).sqrt();
                    let hh_scale = 1.0 / (h as f64).sqrt();
                    uniform(&mut params, &format!("{lstm}.{dir}.w_ih"), vec![4 * h, input_dim], ih_scale);
                    uniform(&mut params, &format!("{lstm}.{dir}.w_hh"), vec![4 * h, h], hh_scale);
                    // forget-gate bias starts at 1 so early training does not
                    // wash out the cell state
                    let mut bias = vec![T::zero(); 4 * h];
                    for b in bias.iter_mut().take(2 * h).skip(h) {
                        *b = T::one();
                    }
                    params.entries.insert(
                        format!("{lstm}.{dir}.bias"),
                        ParamTensor {
                            shape: vec![4 * h],
                            data: bias,
                        },
                    );
                }
            }
            if !variant.item_attention_uniform() {
                for prefix in ["item_sent_attn", "item_rev_attn"] {
                    uniform(&mut params, &format!("{prefix}.w"), vec![config.att_dim, emb], 0.1);
                    if variant.gated() {
                        uniform(&mut params, &format!("{prefix}.w_gate"), vec![config.att_dim, emb], 0.1);
                    }
                    uniform(&mut params, &format!("{prefix}.v"), vec![config.att_dim], 0.1);
                }
            }
            if variant.symmetric_user() {
                for prefix in ["user_sent_attn", "user_rev_attn"] {
                    uniform(&mut params, &format!("{prefix}.w"), vec![config.att_dim, emb], 0.1);
                    if variant.gated() {
                        uniform(&mut params, &format!("{prefix}.w_gate"), vec![config.att_dim, emb], 0.1);
                    }
                    uniform(&mut params, &format!("{prefix}.v"), vec![config.att_dim], 0.1);
                }
            } else {
                let cd = config.coattn_dim();
                if let Some(md) = config.coattn_mlp_dim {
                    uniform(&mut params, "coattn_sent.f_w", vec![md, emb], 0.1);
                    uniform(&mut params, "coattn_rev.f_w", vec![md, emb], 0.1);
                }
                uniform(&mut params, "coattn_sent.m", vec![cd, cd], 0.1);
                uniform(&mut params, "coattn_rev.m", vec![cd, cd], 0.1);
            }
        }

        let mlp_scale = 1.0 / (config.id_dim as f64).sqrt();
        uniform(&mut params, "id_user.table", vec![config.id_dim, config.n_users + 1], 0.1);
        uniform(&mut params, "id_user.mlp_w", vec![config.id_dim, config.id_dim], mlp_scale);
        uniform(&mut params, "id_user.mlp_b", vec![config.id_dim], 0.1);
        uniform(&mut params, "id_item.table", vec![config.id_dim, config.n_items + 1], 0.1);
        uniform(&mut params, "id_item.mlp_w", vec![config.id_dim, config.id_dim], mlp_scale);
        uniform(&mut params, "id_item.mlp_b", vec![config.id_dim], 0.1);

        if variant.fm_head() {
            let d = config.fm_input_dim(variant);
            params.entries.insert(
                "fm.bias".to_string(),
                ParamTensor {
                    shape: vec![1],
                    data: vec![T::from_f64(rating_mean)],
                },
            );
            params.entries.insert(
                "fm.w".to_string(),
                ParamTensor {
                    shape: vec![d],
                    data: vec![T::zero(); d],
                },
            );
            let normal = Normal::new(0.0, 0.01).expect("valid normal");
            let z = (0..config.fm_factors * d)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect();
            params.entries.insert(
                "fm.z".to_string(),
                ParamTensor {
                    shape: vec![config.fm_factors, d],
                    data: z,
                },
            );
        }

        Ok(params)
    }

    pub fn from_entries(
        config: ModelConfig,
        variant: Variant,
        entries: IndexMap<String, ParamTensor<T>>,
    ) -> Self {
        ModelParams {
            config,
            variant,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor<T>)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Overwrite every tensor with uniform(-scale, scale) draws. Gradient
    /// checking and asymmetry probes need non-degenerate parameters; the
    /// training init deliberately zeroes the FM weights, which would leave
    /// the text path with vanishing gradient signal.
    pub fn randomize_uniform(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in self.entries.iter_mut() {
            for v in p.data.iter_mut() {
                *v = T::from_f64(rng.gen_range(-scale..scale));
            }
        }
    }

    /// Put every parameter on a tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Bind without gradient tracking, for evaluation-only forwards.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let mut map = IndexMap::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            let h = tape.leaf(p.data.clone(), p.shape.clone(), requires_grad);
            map.insert(name.clone(), h);
        }
        Bound { map }
    }
}

/// Handles of all bound parameters on the current tape, in params order.
pub struct Bound {
    map: IndexMap<String, TensorRef>,
}

impl Bound {
    pub fn get(&self, name: &str) -> TensorRef {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<TensorRef> {
        self.map.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, TensorRef)> {
        self.map.iter().map(|(n, &h)| (n, h))
    }
}
