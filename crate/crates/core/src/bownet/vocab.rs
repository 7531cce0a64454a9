use super::model::soft_quantize_var;
use super::{Model, ModelError};
use crate::autodiff::{Tape, Tensor};
use crate::synthgen::Image;

/// K word-prototypes of dimension N_d, stored row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    k: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl Vocabulary {
    pub fn from_rows(k: usize, dim: usize, rows: Vec<f64>) -> Result<Self, ModelError> {
        if k == 0 || dim == 0 || rows.len() != k * dim {
            return Err(ModelError::Config(format!(
                "vocabulary of {} values cannot be {k}x{dim}",
                rows.len()
            )));
        }
        if rows.chunks(dim).any(|r| r.iter().all(|&x| x == 0.0)) {
            return Err(ModelError::Config("zero word-prototype".into()));
        }
        Ok(Self { k, dim, rows })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn prototypes(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks(self.dim)
    }

    /// As a 1×1 convolution weight `[K, N_d, 1, 1]`.
    pub fn as_conv_weight(&self) -> Tensor {
        Tensor::new(&[self.k, self.dim, 1, 1], self.rows.clone()).unwrap()
    }
}

/// `[φ^u(x)]_k = softmax_k(v_k · h^u(x))` for every location u; returns
/// `[N, K, H, W]`.
pub fn soft_quantize(features: &Tensor, vocab: &Vocabulary) -> Result<Tensor, ModelError> {
    let got = features.shape().get(1).copied().unwrap_or(0);
    if features.shape().len() != 4 || got != vocab.dim() {
        return Err(ModelError::ChannelMismatch {
            expected: vocab.dim(),
            got,
        });
    }
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let v = tape.constant(vocab.as_conv_weight());
    let out = soft_quantize_var(&mut tape, f, v)?;
    Ok(tape.value(out).clone())
}

/// Prototype-alignment score of one feature vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pas {
    pub value: f64,
    /// Set when the feature was the zero vector; `value` is then 0.
    pub zero_feature: bool,
}

/// `1 − min_k ℓ_cos(h, v_k)` with `ℓ_cos(a, b) = 1 − a·b / (‖a‖‖b‖)`, i.e. the
/// largest cosine similarity to any prototype.
pub fn pas(feature: &[f64], vocab: &Vocabulary) -> Result<Pas, ModelError> {
    if feature.len() != vocab.dim() {
        return Err(ModelError::ChannelMismatch {
            expected: vocab.dim(),
            got: feature.len(),
        });
    }
    let fnorm = feature.iter().map(|x| x * x).sum::<f64>().sqrt();
    if fnorm == 0.0 {
        return Ok(Pas {
            value: 0.0,
            zero_feature: true,
        });
    }
    let best = vocab
        .prototypes()
        .map(|v| {
            let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = v.iter().zip(feature).map(|(a, b)| a * b).sum();
            1.0 - dot / (fnorm * vnorm)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(Pas {
        value: (1.0 - best).clamp(-1.0, 1.0),
        zero_feature: false,
    })
}

/// Mean PAS over a set of feature vectors.
pub fn pas_of_vectors<'a>(
    vectors: impl IntoIterator<Item = &'a [f64]>,
    vocab: &Vocabulary,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for v in vectors {
        total += pas(v, vocab)?.value;
        n += 1;
    }
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    Ok(total / n as f64)
}

/// Mean PAS over every image and every spatial location of tap(`layer`).
pub fn pas_dataset(model: &Model, images: &[&Image], layer: usize) -> Result<f64, ModelError> {
    if images.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let vocab = model.vocabulary().ok_or(ModelError::NoVocabulary)?;
    let taps = model.tap_values(images, layer)?;
    let sh = taps.shape();
    let (n, c, s) = (sh[0], sh[1], sh[2] * sh[3]);
    if c != vocab.dim() {
        return Err(ModelError::ChannelMismatch {
            expected: vocab.dim(),
            got: c,
        });
    }
    let vals = taps.values();
    let mut vecs = Vec::with_capacity(n * s);
    for ni in 0..n {
        for si in 0..s {
            vecs.push((0..c).map(|ci| vals[(ni * c + ci) * s + si]).collect::<Vec<f64>>());
        }
    }
    pas_of_vectors(vecs.iter().map(Vec::as_slice), &vocab)
}
