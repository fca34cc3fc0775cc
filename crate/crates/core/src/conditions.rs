//! Dual content/style conditions and the synthetic conditional target distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::normalize;
use crate::rng::{self, STREAM_CONTENT_EMBED, STREAM_STYLE_EMBED, STREAM_TOY_LAYOUT};
use crate::{Error, Result, Scalar};

/// Content and style representation vectors. Ids are absent for synthetic
/// (perturbed) pairs that do not come from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPair<T> {
    pub content: Vec<T>,
    pub style: Vec<T>,
    pub content_id: Option<usize>,
    pub style_id: Option<usize>,
}

/// Input to a denoiser: either a representation pair or the null (unconditional) sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Condition<T> {
    Pair(ConditionPair<T>),
    Null,
}

impl<T> Condition<T> {
    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }

    pub fn as_pair(&self) -> Option<&ConditionPair<T>> {
        match self {
            Condition::Pair(p) => Some(p),
            Condition::Null => None,
        }
    }
}

impl<T> From<ConditionPair<T>> for Condition<T> {
    fn from(pair: ConditionPair<T>) -> Self {
        Condition::Pair(pair)
    }
}

/// Deterministic random unit-vector embeddings for content and style ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionEmbedder {
    pub content_vocab: usize,
    pub style_vocab: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub seed: u64,
}

impl ConditionEmbedder {
    pub fn validate(&self) -> Result<()> {
        if self.content_vocab == 0 {
            return Err(Error::config("content_vocab", "must be at least 1"));
        }
        if self.style_vocab == 0 {
            return Err(Error::config("style_vocab", "must be at least 1"));
        }
        if self.content_dim == 0 {
            return Err(Error::config("content_dim", "must be at least 1"));
        }
        if self.style_dim == 0 {
            return Err(Error::config("style_dim", "must be at least 1"));
        }
        Ok(())
    }

    pub fn content_vector<T: Scalar>(&self, content_id: usize) -> Result<Vec<T>> {
        if content_id >= self.content_vocab {
            return Err(Error::domain(format!(
                "content id {content_id} outside vocabulary of {}",
                self.content_vocab
            )));
        }
        Ok(unit_vector(
            self.seed,
            STREAM_CONTENT_EMBED | content_id as u64,
            self.content_dim,
        ))
    }

    pub fn style_vector<T: Scalar>(&self, style_id: usize) -> Result<Vec<T>> {
        if style_id >= self.style_vocab {
            return Err(Error::domain(format!(
                "style id {style_id} outside vocabulary of {}",
                self.style_vocab
            )));
        }
        Ok(unit_vector(
            self.seed,
            STREAM_STYLE_EMBED | style_id as u64,
            self.style_dim,
        ))
    }

    /// The positive prompt for `(content_id, style_id)`.
    pub fn embed<T: Scalar>(&self, content_id: usize, style_id: usize) -> Result<ConditionPair<T>> {
        Ok(ConditionPair {
            content: self.content_vector(content_id)?,
            style: self.style_vector(style_id)?,
            content_id: Some(content_id),
            style_id: Some(style_id),
        })
    }

    pub fn content_table<T: Scalar>(&self) -> Vec<Vec<T>> {
        (0..self.content_vocab)
            .map(|c| self.content_vector(c).expect("id in range"))
            .collect()
    }

    pub fn style_table<T: Scalar>(&self) -> Vec<Vec<T>> {
        (0..self.style_vocab)
            .map(|s| self.style_vector(s).expect("id in range"))
            .collect()
    }
}

fn unit_vector<T: Scalar>(seed: u64, stream: u64, dim: usize) -> Vec<T> {
    let mut rng = rng::derived(seed, stream);
    let mut v: Vec<T> = (0..dim).map(|_| T::standard_normal(&mut rng)).collect();
    normalize(&mut v);
    v
}

/// One isotropic Gaussian component; `sigma == 0` is a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent<T> {
    pub weight: T,
    pub mean: Vec<T>,
    pub sigma: T,
}

/// Gaussian mixture per `(content_id, style_id)` slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGmm<T> {
    dim: usize,
    content_vocab: usize,
    style_vocab: usize,
    slices: Vec<Vec<GmmComponent<T>>>,
}

impl<T: Scalar> ConditionalGmm<T> {
    /// `slices` is indexed by `content_id * style_vocab + style_id`.
    pub fn new(
        dim: usize,
        content_vocab: usize,
        style_vocab: usize,
        slices: Vec<Vec<GmmComponent<T>>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if content_vocab == 0 || style_vocab == 0 {
            return Err(Error::config(
                "vocab",
                "content and style vocabularies must be nonempty",
            ));
        }
        if slices.len() != content_vocab * style_vocab {
            return Err(Error::config(
                "slices",
                format!(
                    "expected {} slices, got {}",
                    content_vocab * style_vocab,
                    slices.len()
                ),
            ));
        }
        let tol = T::of(1e-12);
        for (i, slice) in slices.iter().enumerate() {
            if slice.is_empty() {
                return Err(Error::config(
                    "slices",
                    format!("slice {i} has no components"),
                ));
            }
            let mut total = T::zero();
            for comp in slice {
                if comp.mean.len() != dim {
                    return Err(Error::config(
                        "mean",
                        format!("slice {i}: mean has wrong dimension"),
                    ));
                }
                if !(comp.weight > T::zero()) {
                    return Err(Error::config(
                        "weight",
                        format!("slice {i}: weights must be positive"),
                    ));
                }
                if !(comp.sigma >= T::zero()) {
                    return Err(Error::config(
                        "sigma",
                        format!("slice {i}: sigma must be nonnegative"),
                    ));
                }
                total = total + comp.weight;
            }
            if (total - T::one()).abs() > tol {
                return Err(Error::config(
                    "weight",
                    format!("slice {i}: weights sum to {total}"),
                ));
            }
        }
        Ok(Self {
            dim,
            content_vocab,
            style_vocab,
            slices,
        })
    }

    /// A single-slice mixture (vocabularies of size one).
    pub fn single(dim: usize, components: Vec<GmmComponent<T>>) -> Result<Self> {
        Self::new(dim, 1, 1, vec![components])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn content_vocab(&self) -> usize {
        self.content_vocab
    }

    pub fn style_vocab(&self) -> usize {
        self.style_vocab
    }

    pub fn slice(&self, content_id: usize, style_id: usize) -> Result<&[GmmComponent<T>]> {
        if content_id >= self.content_vocab || style_id >= self.style_vocab {
            return Err(Error::domain(format!(
                "no slice for (content {content_id}, style {style_id})"
            )));
        }
        Ok(&self.slices[content_id * self.style_vocab + style_id])
    }

    pub fn slices(&self) -> impl Iterator<Item = ((usize, usize), &[GmmComponent<T>])> {
        let sv = self.style_vocab;
        self.slices
            .iter()
            .enumerate()
            .map(move |(i, s)| ((i / sv, i % sv), s.as_slice()))
    }

    /// Largest mean norm and largest sigma over every component.
    pub fn extent(&self) -> (T, T) {
        self.slices
            .iter()
            .flatten()
            .fold((T::zero(), T::zero()), |(m, s), c| {
                (m.max(crate::linalg::norm(&c.mean)), s.max(c.sigma))
            })
    }

    /// I.i.d. ancestral samples from one slice.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        content_id: usize,
        style_id: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<T>>> {
        if n == 0 {
            return Err(Error::domain("sample count must be at least 1"));
        }
        let slice = self.slice(content_id, style_id)?;
        Ok((0..n).map(|_| sample_component(slice, rng)).collect())
    }
}

fn sample_component<T: Scalar, R: Rng + ?Sized>(slice: &[GmmComponent<T>], rng: &mut R) -> Vec<T> {
    let u = T::unit_uniform(rng);
    let mut acc = T::zero();
    let mut chosen = &slice[slice.len() - 1];
    for comp in slice {
        acc = acc + comp.weight;
        if u < acc {
            chosen = comp;
            break;
        }
    }
    chosen
        .mean
        .iter()
        .map(|&m| m + chosen.sigma * T::standard_normal(rng))
        .collect()
}

/// Rotation and isotropic scale a style applies to a content's base arrangement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleTransform<T> {
    pub rotation: T,
    pub scale: T,
}

impl<T: Scalar> StyleTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: T::zero(),
            scale: T::one(),
        }
    }

    pub fn apply(&self, point: [T; 2]) -> [T; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            self.scale * (c * point[0] - s * point[1]),
            self.scale * (s * point[0] + c * point[1]),
        ]
    }
}

/// Parameters of the planar toy target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyGmmSpec {
    pub content_vocab: usize,
    pub style_vocab: usize,
    pub modes_per_content: usize,
    /// Nominal ring radius of every content's mode arrangement.
    pub radius: f64,
    /// Per-component standard deviation.
    pub sigma: f64,
    /// Largest style rotation in radians; style 0 is always the identity.
    pub max_style_rotation: f64,
    /// Style scales are drawn from `[1 - spread, 1 + spread]`.
    pub style_scale_spread: f64,
    pub seed: u64,
}

impl Default for ToyGmmSpec {
    fn default() -> Self {
        Self {
            content_vocab: 4,
            style_vocab: 3,
            modes_per_content: 4,
            radius: 2.0,
            sigma: 0.1,
            max_style_rotation: std::f64::consts::FRAC_PI_6,
            style_scale_spread: 0.2,
            seed: 7,
        }
    }
}

impl ToyGmmSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("content_vocab", self.content_vocab),
            ("style_vocab", self.style_vocab),
            ("modes_per_content", self.modes_per_content),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config("radius", "must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.style_scale_spread) {
            return Err(Error::config("style_scale_spread", "must lie in [0, 1)"));
        }
        if !(self.max_style_rotation >= 0.0 && self.max_style_rotation.is_finite()) {
            return Err(Error::config("max_style_rotation", "must be nonnegative"));
        }
        Ok(())
    }

    /// Mode positions for `content_id` before any style transform. Each
    /// content gets its own phase and per-mode radii, so the content id
    /// fixes the layout of the modes.
    pub fn base_arrangement<T: Scalar>(&self, content_id: usize) -> Vec<[T; 2]> {
        let mut rng = rng::derived(self.seed, STREAM_TOY_LAYOUT | (content_id as u64) << 1);
        let k = self.modes_per_content;
        let tau = std::f64::consts::TAU;
        let phase =
            tau * (content_id as f64 + rng.random::<f64>() * 0.5) / (k * self.content_vocab) as f64;
        (0..k)
            .map(|j| {
                let r = self.radius * (0.75 + 0.5 * rng.random::<f64>());
                let angle = phase + tau * j as f64 / k as f64;
                [T::of(r * angle.cos()), T::of(r * angle.sin())]
            })
            .collect()
    }

    pub fn style_transform<T: Scalar>(&self, style_id: usize) -> StyleTransform<T> {
        if style_id == 0 {
            return StyleTransform::identity();
        }
        let mut rng = rng::derived(self.seed, STREAM_TOY_LAYOUT | ((style_id as u64) << 1) | 1);
        let rotation = self.max_style_rotation * (2.0 * rng.random::<f64>() - 1.0);
        let scale = 1.0 + self.style_scale_spread * (2.0 * rng.random::<f64>() - 1.0);
        StyleTransform {
            rotation: T::of(rotation),
            scale: T::of(scale),
        }
    }

    /// Builds the planar conditional mixture: uniform weights `1/K` per slice.
    pub fn build<T: Scalar>(&self) -> Result<ConditionalGmm<T>> {
        self.validate()?;
        let k = self.modes_per_content;
        let weight = T::one() / T::of_usize(k);
        let mut slices = Vec::with_capacity(self.content_vocab * self.style_vocab);
        for c in 0..self.content_vocab {
            let base = self.base_arrangement::<T>(c);
            for s in 0..self.style_vocab {
                let transform = self.style_transform::<T>(s);
                slices.push(
                    base.iter()
                        .map(|&p| GmmComponent {
                            weight,
                            mean: transform.apply(p).to_vec(),
                            sigma: T::of(self.sigma),
                        })
                        .collect(),
                );
            }
        }
        ConditionalGmm::new(2, self.content_vocab, self.style_vocab, slices)
    }
}

/// Convenience wrapper over [`ToyGmmSpec::build`] with default geometry.
pub fn build_toy_gmm<T: Scalar>(
    content_vocab: usize,
    style_vocab: usize,
    modes_per_content: usize,
    seed: u64,
) -> Result<ConditionalGmm<T>> {
    ToyGmmSpec {
        content_vocab,
        style_vocab,
        modes_per_content,
        seed,
        ..ToyGmmSpec::default()
    }
    .build()
}
