use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::error::{DotError, Result};
use crate::tensor::{ParamId, ParamStore, Scalar};

/// Rows of the seven structural-id embedding tables: segment, column, row,
/// previous label, within-cell rank, inverse rank, numeric relation.
pub const TOKEN_TYPE_SIZES: [usize; 7] = [3, 256, 256, 2, 256, 256, 10];

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query_kernel: ParamId,
    pub query_bias: ParamId,
    pub key_kernel: ParamId,
    pub key_bias: ParamId,
    pub value_kernel: ParamId,
    pub value_bias: ParamId,
    pub attn_out_kernel: ParamId,
    pub attn_out_bias: ParamId,
    pub attn_norm_gain: ParamId,
    pub attn_norm_bias: ParamId,
    pub inter_kernel: ParamId,
    pub inter_bias: ParamId,
    pub out_kernel: ParamId,
    pub out_bias: ParamId,
    pub out_norm_gain: ParamId,
    pub out_norm_bias: ParamId,
}

/// Handles to one encoder's tensors inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub prefix: String,
    pub word: ParamId,
    pub position: ParamId,
    pub token_types: [ParamId; 7],
    pub emb_norm_gain: ParamId,
    pub emb_norm_bias: ParamId,
    pub layers: Vec<LayerWeights>,
    pub pooler_kernel: ParamId,
    pub pooler_bias: ParamId,
}

/// One tensor as charged by the used-parameter accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountingRow {
    pub name: String,
    pub physical: Vec<usize>,
    pub charged: u64,
}

pub(crate) fn truncated_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break T::c(v);
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Fill {
    Normal,
    Zeros,
    Ones,
}

/// Tensor names, shapes and initial fills in store order; [`EncoderWeights::ids`]
/// lists handles in the same order.
fn layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>, Fill)> {
    use Fill::*;
    let (h, hi) = (config.hidden, config.intermediate);
    let mut v = vec![
        ("embeddings.word_embeddings".to_string(), vec![config.vocab_size, h], Normal),
        ("embeddings.position_embeddings".to_string(), vec![config.max_input, h], Normal),
    ];
    for (i, &rows) in TOKEN_TYPE_SIZES.iter().enumerate() {
        v.push((format!("embeddings.token_type_embeddings_{i}"), vec![rows, h], Normal));
    }
    v.push(("embeddings.LayerNorm.gamma".into(), vec![h], Ones));
    v.push(("embeddings.LayerNorm.beta".into(), vec![h], Zeros));
    for l in 0..config.num_layers {
        let p = format!("encoder.layer.{l}.");
        for (name, shape, fill) in [
            ("attention.self.query.kernel", vec![h, h], Normal),
            ("attention.self.query.bias", vec![h], Zeros),
            ("attention.self.key.kernel", vec![h, h], Normal),
            ("attention.self.key.bias", vec![h], Zeros),
            ("attention.self.value.kernel", vec![h, h], Normal),
            ("attention.self.value.bias", vec![h], Zeros),
            ("attention.output.dense.kernel", vec![h, h], Normal),
            ("attention.output.dense.bias", vec![h], Zeros),
            ("attention.output.LayerNorm.gamma", vec![h], Ones),
            ("attention.output.LayerNorm.beta", vec![h], Zeros),
            ("intermediate.dense.kernel", vec![h, hi], Normal),
            ("intermediate.dense.bias", vec![hi], Zeros),
            ("output.dense.kernel", vec![hi, h], Normal),
            ("output.dense.bias", vec![h], Zeros),
            ("output.LayerNorm.gamma", vec![h], Ones),
            ("output.LayerNorm.beta", vec![h], Zeros),
        ] {
            v.push((format!("{p}{name}"), shape, fill));
        }
    }
    v.push(("pooler.dense.kernel".into(), vec![h, h], Normal));
    v.push(("pooler.dense.bias".into(), vec![h], Zeros));
    v
}

impl EncoderWeights {
    fn from_ids(config: &EncoderConfig, prefix: &str, ids: Vec<ParamId>) -> Self {
        let mut it = ids.into_iter();
        let mut next = || it.next().expect("layout and handle order agree");
        let word = next();
        let position = next();
        let token_types = std::array::from_fn(|_| next());
        let emb_norm_gain = next();
        let emb_norm_bias = next();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                query_kernel: next(),
                query_bias: next(),
                key_kernel: next(),
                key_bias: next(),
                value_kernel: next(),
                value_bias: next(),
                attn_out_kernel: next(),
                attn_out_bias: next(),
                attn_norm_gain: next(),
                attn_norm_bias: next(),
                inter_kernel: next(),
                inter_bias: next(),
                out_kernel: next(),
                out_bias: next(),
                out_norm_gain: next(),
                out_norm_bias: next(),
            })
            .collect();
        let pooler_kernel = next();
        let pooler_bias = next();
        EncoderWeights {
            config: config.clone(),
            prefix: prefix.to_string(),
            word,
            position,
            token_types,
            emb_norm_gain,
            emb_norm_bias,
            layers,
            pooler_kernel,
            pooler_bias,
        }
    }

    /// Allocates and initializes an encoder's tensors under `prefix`:
    /// truncated normal (std 0.02) kernels and embeddings, zero biases,
    /// unit layer-norm gains.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut ids = Vec::new();
        for (name, shape, fill) in layout(config) {
            let n: usize = shape.iter().product();
            let (data, decay) = match fill {
                Fill::Normal => (truncated_normal(rng, n), true),
                Fill::Zeros => (vec![T::zero(); n], false),
                Fill::Ones => (vec![T::one(); n], false),
            };
            ids.push(store.insert(format!("{prefix}{name}"), shape, data, decay)?);
        }
        Ok(Self::from_ids(config, prefix, ids))
    }

    /// Allocates every tensor filled with zeros. Cheap enough to instantiate
    /// the large presets for shape inspection and counting.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut ids = Vec::new();
        for (name, shape, fill) in layout(config) {
            let n: usize = shape.iter().product();
            let decay = matches!(fill, Fill::Normal);
            ids.push(store.insert(format!("{prefix}{name}"), shape, vec![T::zero(); n], decay)?);
        }
        Ok(Self::from_ids(config, prefix, ids))
    }

    /// Re-binds handles to an existing store by tensor name.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut ids = Vec::new();
        for (name, shape, _) in layout(config) {
            let full = format!("{prefix}{name}");
            let id = store
                .id(&full)
                .ok_or_else(|| DotError::Checkpoint(format!("missing tensor `{full}`")))?;
            if store.get(id).shape != shape {
                return Err(DotError::Checkpoint(format!(
                    "tensor `{full}` has shape {:?}, expected {shape:?}",
                    store.get(id).shape
                )));
            }
            ids.push(id);
        }
        Ok(Self::from_ids(config, prefix, ids))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.word, self.position];
        v.extend(self.token_types);
        v.extend([self.emb_norm_gain, self.emb_norm_bias]);
        for l in &self.layers {
            v.extend([
                l.query_kernel,
                l.query_bias,
                l.key_kernel,
                l.key_bias,
                l.value_kernel,
                l.value_bias,
                l.attn_out_kernel,
                l.attn_out_bias,
                l.attn_norm_gain,
                l.attn_norm_bias,
                l.inter_kernel,
                l.inter_bias,
                l.out_kernel,
                l.out_bias,
                l.out_norm_gain,
                l.out_norm_bias,
            ]);
        }
        v.extend([self.pooler_kernel, self.pooler_bias]);
        v
    }

    /// Number of scalars actually stored for this encoder.
    pub fn physical_count<T: Scalar>(&self, store: &ParamStore<T>) -> u64 {
        self.ids().into_iter().map(|id| store.get(id).numel() as u64).sum()
    }

    /// Walks the instantiated tensors and charges each one under the
    /// used-parameter accounting for an input of length `input_len`:
    ///
    /// * position rows, the query/key/value kernels and the pooler kernel are
    ///   charged as `[I, H]`;
    /// * the embedding layer norm is charged `[H] + [I]`;
    /// * the attention output projection kernel is not charged;
    /// * the intermediate bias is charged once for the whole stack.
    pub fn accounting_rows<T: Scalar>(&self, store: &ParamStore<T>, input_len: usize) -> Vec<AccountingRow> {
        let i = input_len as u64;
        let h = self.config.hidden as u64;
        let mut rows = Vec::new();
        let mut charge = |id: ParamId, charged: u64| {
            let p = store.get(id);
            rows.push(AccountingRow {
                name: p.name.clone(),
                physical: p.shape.clone(),
                charged,
            });
        };
        let full = |id: ParamId| store.get(id).numel() as u64;
        let per_input_row = |id: ParamId| i * store.get(id).shape[1] as u64;

        charge(self.word, full(self.word));
        charge(self.position, per_input_row(self.position));
        for &t in &self.token_types {
            charge(t, full(t));
        }
        charge(self.emb_norm_gain, h);
        charge(self.emb_norm_bias, i);
        for (n, l) in self.layers.iter().enumerate() {
            for k in [l.query_kernel, l.key_kernel, l.value_kernel] {
                charge(k, per_input_row(k));
            }
            for b in [l.query_bias, l.key_bias, l.value_bias, l.attn_out_bias] {
                charge(b, full(b));
            }
            charge(l.attn_out_kernel, 0);
            for id in [
                l.attn_norm_gain,
                l.attn_norm_bias,
                l.inter_kernel,
                l.out_kernel,
                l.out_bias,
                l.out_norm_gain,
                l.out_norm_bias,
            ] {
                charge(id, full(id));
            }
            charge(l.inter_bias, if n == 0 { full(l.inter_bias) } else { 0 });
        }
        charge(self.pooler_kernel, per_input_row(self.pooler_kernel));
        charge(self.pooler_bias, full(self.pooler_bias));
        rows
    }

    pub fn accounted_count<T: Scalar>(&self, store: &ParamStore<T>, input_len: usize) -> u64 {
        self.accounting_rows(store, input_len).iter().map(|r| r.charged).sum()
    }
}
