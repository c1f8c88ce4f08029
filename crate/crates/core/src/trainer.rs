//! Contrastive alignment of the projection against attention-pooled visual
//! embeddings.
//!
//! Per batch: every attention head pools the patch grid into one embedding,
//! the head most similar to the sample's own caption is kept, and the B x B
//! cosine matrix between kept embeddings and projected captions feeds a
//! symmetric InfoNCE loss. Only the projection receives gradients; the head
//! choice is held fixed during backprop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    self, argmax_with_tiebreak, cosine_similarity, Grid2D, KahanSum, Matrix, Scalar,
};
use crate::projection::{ForwardCache, ProjectionGrads, ProjectionMode, ProjectionParams};
use crate::sample::{AttentionStack, DenseFeatureMap, SampleRecord};

/// Softmax-weighted average of the patch features under one head's logits.
pub fn pool_by_attention<F: Scalar>(
    features: &DenseFeatureMap<F>,
    logits: &Grid2D<F>,
) -> Result<Vec<F>> {
    if logits.dims() != (features.height(), features.width()) {
        return Err(Error::DimensionMismatch(format!(
            "attention grid {:?} vs feature grid {}x{}",
            logits.dims(),
            features.height(),
            features.width()
        )));
    }
    let weights = math::spatial_softmax(logits);
    let dim = features.dim();
    if features.cells() > math::COMPENSATED_THRESHOLD {
        let mut acc = vec![KahanSum::<F>::default(); dim];
        for (c, &w) in weights.values().iter().enumerate() {
            for (a, &v) in acc.iter_mut().zip(features.cell(c)) {
                a.add(w * v);
            }
        }
        return Ok(acc.iter().map(KahanSum::value).collect());
    }
    let mut out = vec![F::zero(); dim];
    for (c, &w) in weights.values().iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(features.cell(c)) {
            *o = *o + w * v;
        }
    }
    Ok(out)
}

/// One pooled embedding per attention head.
pub fn pool_all_heads<F: Scalar>(
    features: &DenseFeatureMap<F>,
    attn: &AttentionStack<F>,
) -> Result<Vec<Vec<F>>> {
    attn.heads()
        .iter()
        .map(|h| pool_by_attention(features, h))
        .collect()
}

pub fn head_similarities<F: Scalar>(
    features: &DenseFeatureMap<F>,
    attn: &AttentionStack<F>,
    params: &ProjectionParams<F>,
    text: &[F],
) -> Result<Vec<F>> {
    let projected = params.forward(text)?;
    pool_all_heads(features, attn)?
        .iter()
        .map(|pooled| cosine_similarity(pooled, &projected))
        .collect()
}

pub fn select_best_head<F: Scalar>(sims: &[F]) -> Result<usize> {
    argmax_with_tiebreak(sims)
}

fn check_square<F: Scalar>(sims: &Matrix<F>) -> Result<usize> {
    if sims.rows() != sims.cols() {
        return Err(Error::DimensionMismatch(format!(
            "InfoNCE needs a square matrix, got {}x{}",
            sims.rows(),
            sims.cols()
        )));
    }
    if sims.rows() == 0 {
        return Err(Error::Empty("InfoNCE over an empty batch"));
    }
    Ok(sims.rows())
}

// Column and row log-sum-exp of a square matrix.
fn lse_cols_rows<F: Scalar>(sims: &Matrix<F>) -> (Vec<F>, Vec<F>) {
    let b = sims.rows();
    let cols = (0..b)
        .map(|c| math::log_sum_exp((0..b).map(|r| sims.get(r, c))))
        .collect();
    let rows = (0..b)
        .map(|r| math::log_sum_exp(sims.row(r).iter().copied()))
        .collect();
    (cols, rows)
}

/// Symmetric InfoNCE over `sims[i][j] = sim(image_i, text_j)`.
///
/// Column `i` normalizes over images for caption `i`, row `i` over captions
/// for image `i`; both directions are averaged with weight `1/(2B)`.
pub fn info_nce<F: Scalar>(sims: &Matrix<F>) -> Result<F> {
    let b = check_square(sims)?;
    let (lse_col, lse_row) = lse_cols_rows(sims);
    let mut total = F::zero();
    for i in 0..b {
        let s = sims.get(i, i);
        total = total + (lse_col[i] - s) + (lse_row[i] - s);
    }
    let loss = total / F::from_usize(2 * b).unwrap();
    Ok(loss.max(F::zero()))
}

/// `dL/dsims` for [`info_nce`].
pub fn info_nce_backward<F: Scalar>(sims: &Matrix<F>) -> Result<Matrix<F>> {
    let b = check_square(sims)?;
    let (lse_col, lse_row) = lse_cols_rows(sims);
    let scale = F::one() / F::from_usize(2 * b).unwrap();
    let two = F::lit(2.0);
    let mut grad = Matrix::zeros(b, b);
    for r in 0..b {
        for c in 0..b {
            let s = sims.get(r, c);
            let p_col = (s - lse_col[c]).exp();
            let p_row = (s - lse_row[r]).exp();
            let diag = if r == c { two } else { F::zero() };
            grad.set(r, c, scale * (p_col + p_row - diag));
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct AdamState<F = f32> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step: u64,
    first: [Vec<F>; 4],
    second: [Vec<F>; 4],
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ProjectionParams<F>, lr: F, beta1: F, beta2: F, eps: F) -> Self {
        let zeros = |n: usize| vec![F::zero(); n];
        let sizes = [
            params.w_a.data().len(),
            params.b_a.len(),
            params.w_b.data().len(),
            params.b_b.len(),
        ];
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: sizes.map(zeros),
            second: sizes.map(zeros),
        }
    }

    pub fn with_defaults(params: &ProjectionParams<F>) -> Self {
        Self::new(
            params,
            F::lit(1e-4),
            F::lit(0.9),
            F::lit(0.999),
            F::lit(1e-8),
        )
    }
}

/// Bias-corrected Adam update, applied in place.
pub fn adam_step<F: Scalar>(
    params: &mut ProjectionParams<F>,
    grads: &ProjectionGrads<F>,
    state: &mut AdamState<F>,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = F::one() - state.beta1.powi(t);
    let bc2 = F::one() - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (k, (p, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .enumerate()
    {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        if p.len() != g.len() || m.len() != g.len() {
            return Err(Error::DimensionMismatch(
                "Adam state does not match parameters".into(),
            ));
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (F::one() - b1) * g[i];
            v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MaxHead,
    MeanHeads,
    ClsOnly,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_head" => Ok(Aggregation::MaxHead),
            "mean_heads" => Ok(Aggregation::MeanHeads),
            "cls_only" => Ok(Aggregation::ClsOnly),
            other => Err(Error::InvalidParameter(format!(
                "unknown aggregation `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::MaxHead => "max_head",
            Aggregation::MeanHeads => "mean_heads",
            Aggregation::ClsOnly => "cls_only",
        })
    }
}

/// One image-text pair of a batch, borrowed from the dataset.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a, F = f32> {
    pub features: &'a DenseFeatureMap<F>,
    pub attn: &'a AttentionStack<F>,
    pub text: &'a [F],
    pub cls: Option<&'a [F]>,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome<F = f32> {
    pub loss: F,
    pub grads: ProjectionGrads<F>,
    /// Head kept for each pair (max-head aggregation only).
    pub selected: Vec<Option<usize>>,
    pub sims: Matrix<F>,
}

struct PairForward<F> {
    visual: Vec<F>,
    projected: Vec<F>,
    cache: ForwardCache<F>,
    head: Option<usize>,
}

fn forward_pair<F: Scalar>(
    params: &ProjectionParams<F>,
    pair: &PairRef<'_, F>,
    aggregation: Aggregation,
) -> Result<PairForward<F>> {
    let (projected, cache) = params.forward_cached(pair.text)?;
    let (visual, head) = match aggregation {
        Aggregation::MaxHead => {
            let pooled = pool_all_heads(pair.features, pair.attn)?;
            let sims = pooled
                .iter()
                .map(|p| cosine_similarity(p, &projected))
                .collect::<Result<Vec<_>>>()?;
            let head = select_best_head(&sims)?;
            (pooled.into_iter().nth(head).unwrap(), Some(head))
        }
        Aggregation::MeanHeads => (mean_of_heads(pair.features, pair.attn)?, None),
        Aggregation::ClsOnly => {
            let cls = pair
                .cls
                .ok_or_else(|| Error::MissingRecord("cls_embedding".into()))?;
            (cls.to_vec(), None)
        }
    };
    if visual.len() != projected.len() {
        return Err(Error::DimensionMismatch(format!(
            "visual dim {} vs projected dim {}",
            visual.len(),
            projected.len()
        )));
    }
    Ok(PairForward {
        visual,
        projected,
        cache,
        head,
    })
}

/// Mean of the per-head pooled embeddings.
pub fn mean_of_heads<F: Scalar>(
    features: &DenseFeatureMap<F>,
    attn: &AttentionStack<F>,
) -> Result<Vec<F>> {
    let pooled = pool_all_heads(features, attn)?;
    let n = F::from_usize(pooled.len()).unwrap();
    let mut out = vec![F::zero(); features.dim()];
    for p in &pooled {
        for (o, &v) in out.iter_mut().zip(p) {
            *o = *o + v;
        }
    }
    Ok(out.into_iter().map(|v| v / n).collect())
}

// d cos(a, p) / d p
fn cosine_grad_wrt_second<F: Scalar>(a: &[F], p: &[F]) -> Result<Vec<F>> {
    let na = math::l2_norm(a);
    let np = math::l2_norm(p);
    if !(na > F::zero()) || !(np > F::zero()) {
        return Err(Error::DegenerateVector);
    }
    let cos = math::dot(a, p) / (na * np);
    let inv = F::one() / (na * np);
    let k = cos / (np * np);
    Ok(a.iter().zip(p).map(|(&x, &y)| x * inv - k * y).collect())
}

/// Loss and projection gradients for one batch.
///
/// Per-pair work runs on the rayon pool; reductions happen in pair order so
/// the result does not depend on thread count.
pub fn batch_loss_and_grads<F: Scalar>(
    params: &ProjectionParams<F>,
    pairs: &[PairRef<'_, F>],
    aggregation: Aggregation,
    temperature: F,
) -> Result<BatchOutcome<F>> {
    if pairs.is_empty() {
        return Err(Error::Empty("batch with no pairs"));
    }
    if !(temperature > F::zero()) {
        return Err(Error::InvalidParameter(
            "temperature must be positive".into(),
        ));
    }
    let forwards = pairs
        .par_iter()
        .map(|p| forward_pair(params, p, aggregation))
        .collect::<Result<Vec<_>>>()?;

    let b = pairs.len();
    let mut sims = Matrix::zeros(b, b);
    for (i, fi) in forwards.iter().enumerate() {
        for (j, fj) in forwards.iter().enumerate() {
            sims.set(
                i,
                j,
                cosine_similarity(&fi.visual, &fj.projected)? / temperature,
            );
        }
    }
    let loss = info_nce(&sims)?;
    let grad_sims = info_nce_backward(&sims)?;

    let per_text = (0..b)
        .into_par_iter()
        .map(|j| {
            let fj = &forwards[j];
            let mut grad_p = vec![F::zero(); fj.projected.len()];
            for (i, fi) in forwards.iter().enumerate() {
                let g = grad_sims.get(i, j) / temperature;
                if g == F::zero() {
                    continue;
                }
                let dc = cosine_grad_wrt_second(&fi.visual, &fj.projected)?;
                for (acc, d) in grad_p.iter_mut().zip(dc) {
                    *acc = *acc + g * d;
                }
            }
            params.backward(&fj.cache, &grad_p).map(|(grads, _)| grads)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = ProjectionGrads::zeros_like(params);
    for g in &per_text {
        grads.accumulate(g);
    }
    Ok(BatchOutcome {
        loss,
        grads,
        selected: forwards.iter().map(|f| f.head).collect(),
        sims,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSampling {
    /// One caption drawn uniformly per image per epoch.
    #[default]
    Uniform,
    /// Always the first caption.
    First,
}

impl std::str::FromStr for CaptionSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(CaptionSampling::Uniform),
            "first" => Ok(CaptionSampling::First),
            other => Err(Error::InvalidParameter(format!(
                "unknown caption sampling `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub temperature: f32,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub caption_sampling: CaptionSampling,
    pub projection_mode: ProjectionModeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionModeConfig {
    #[default]
    Tanh,
    Linear,
}

impl From<ProjectionModeConfig> for ProjectionMode {
    fn from(m: ProjectionModeConfig) -> Self {
        match m {
            ProjectionModeConfig::Tanh => ProjectionMode::Tanh,
            ProjectionModeConfig::Linear => ProjectionMode::Linear,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 100,
            max_steps: None,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            temperature: 1.0,
            seed: 0,
            aggregation: Aggregation::MaxHead,
            caption_sampling: CaptionSampling::Uniform,
            projection_mode: ProjectionModeConfig::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub head_counts: Vec<u64>,
    /// Percentage of selections per head; sums to 100 when any head was selected.
    pub head_histogram: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ProjectionParams,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetDims {
    pub text_dim: usize,
    pub visual_dim: usize,
    pub heads: usize,
}

/// Checks that every sample agrees on D_t, D_v and N and has a caption.
pub fn dataset_dims(dataset: &[SampleRecord]) -> Result<DatasetDims> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InconsistentDataset("dataset is empty".into()))?;
    let dims_of = |s: &SampleRecord| -> Result<DatasetDims> {
        let text_dim = s.text_dim().ok_or_else(|| {
            Error::InconsistentDataset(format!("sample `{}` has no captions", s.image_id))
        })?;
        Ok(DatasetDims {
            text_dim,
            visual_dim: s.visual_dim(),
            heads: s.num_heads(),
        })
    };
    let dims = dims_of(first)?;
    for s in dataset {
        let d = dims_of(s)?;
        if d != dims {
            return Err(Error::InconsistentDataset(format!(
                "sample `{}` has D_t={}, D_v={}, N={}; expected D_t={}, D_v={}, N={}",
                s.image_id,
                d.text_dim,
                d.visual_dim,
                d.heads,
                dims.text_dim,
                dims.visual_dim,
                dims.heads
            )));
        }
    }
    Ok(dims)
}

pub fn train(dataset: &[SampleRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, config, |_| {})
}

/// Like [`train`], calling `on_epoch` after every finished epoch.
pub fn train_with_progress(
    dataset: &[SampleRecord],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    let dims = dataset_dims(dataset)?;
    let mut params = ProjectionParams::<f32>::init(dims.text_dim, dims.visual_dim, config.seed)?
        .with_mode(config.projection_mode.into());
    let mut adam = AdamState::new(&params, config.lr, config.beta1, config.beta2, config.eps);
    // Separate stream from the initializer so changing one does not shift the other.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_da7a);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut total_steps = 0usize;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let captions: Vec<usize> = order
            .iter()
            .map(|&i| match config.caption_sampling {
                CaptionSampling::Uniform => rng.gen_range(0..dataset[i].captions.len()),
                CaptionSampling::First => 0,
            })
            .collect();

        let mut loss_sum = 0.0f64;
        let mut pairs_seen = 0usize;
        let mut steps = 0usize;
        let mut head_counts = vec![0u64; dims.heads];
        for (chunk, caps) in order
            .chunks(config.batch_size)
            .zip(captions.chunks(config.batch_size))
        {
            if config.max_steps.is_some_and(|m| total_steps >= m) {
                break;
            }
            let pairs: Vec<PairRef<'_>> = chunk
                .iter()
                .zip(caps)
                .map(|(&i, &c)| {
                    let s = &dataset[i];
                    PairRef {
                        features: &s.features,
                        attn: &s.attn,
                        text: &s.captions[c].embedding,
                        cls: s.cls_embedding.as_deref(),
                    }
                })
                .collect();
            let outcome =
                batch_loss_and_grads(&params, &pairs, config.aggregation, config.temperature)?;
            adam_step(&mut params, &outcome.grads, &mut adam)?;
            for h in outcome.selected.iter().flatten() {
                head_counts[*h] += 1;
            }
            loss_sum += outcome.loss as f64 * pairs.len() as f64;
            pairs_seen += pairs.len();
            steps += 1;
            total_steps += 1;
        }
        if steps == 0 {
            break 'epochs;
        }
        let selections: u64 = head_counts.iter().sum();
        let head_histogram = head_counts
            .iter()
            .map(|&c| {
                if selections == 0 {
                    0.0
                } else {
                    100.0 * c as f64 / selections as f64
                }
            })
            .collect();
        let entry = EpochLog {
            epoch,
            steps,
            mean_loss: loss_sum / pairs_seen as f64,
            head_counts,
            head_histogram,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}
