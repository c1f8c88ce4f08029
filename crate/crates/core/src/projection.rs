//! The learnable text-to-visual warp `psi(t) = W_b^T tanh(W_a^T t + b_a) + b_b`.
//!
//! Matrices are stored row-major with the input dimension as rows, so
//! `W_a` is `D_t x D_v` and `W_a^T t` is a sum of rows weighted by `t`.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{Matrix, Scalar};
use crate::tensor_store::{Container, DType, TensorRecord};

pub const CHECKPOINT_VERSION: i32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    /// Two affine maps with a tanh in between.
    #[default]
    Tanh,
    /// `W_a^T t + b_a` only; `W_b`, `b_b` are carried but unused.
    Linear,
}

impl ProjectionMode {
    fn code(self) -> i32 {
        match self {
            ProjectionMode::Tanh => 0,
            ProjectionMode::Linear => 1,
        }
    }

    fn from_code(code: i32) -> Result<Self> {
        match code {
            0 => Ok(ProjectionMode::Tanh),
            1 => Ok(ProjectionMode::Linear),
            other => Err(Error::InvalidRecord {
                name: "meta".into(),
                reason: format!("unknown projection mode {other}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<F = f32> {
    pub w_a: Matrix<F>,
    pub b_a: Vec<F>,
    pub w_b: Matrix<F>,
    pub b_b: Vec<F>,
    pub mode: ProjectionMode,
}

/// Gradients w.r.t. every parameter tensor, same shapes as the params.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrads<F = f32> {
    pub w_a: Matrix<F>,
    pub b_a: Vec<F>,
    pub w_b: Matrix<F>,
    pub b_b: Vec<F>,
}

/// Forward intermediates needed by [`ProjectionParams::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<F = f32> {
    pub input: Vec<F>,
    /// Pre-activation `W_a^T t + b_a`.
    pub z: Vec<F>,
    /// `tanh(z)`, or `z` in linear mode.
    pub u: Vec<F>,
}

impl<F: Scalar> ProjectionParams<F> {
    /// Xavier-uniform weights, zero biases; deterministic in `seed`.
    pub fn init(text_dim: usize, visual_dim: usize, seed: u64) -> Result<Self> {
        if text_dim == 0 || visual_dim == 0 {
            return Err(Error::InvalidParameter(
                "projection dims must be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let data = (0..fan_in * fan_out)
                .map(|_| F::lit(dist.sample(&mut rng)))
                .collect();
            Matrix::new(fan_in, fan_out, data)
        };
        let w_a = xavier(text_dim, visual_dim)?;
        let w_b = xavier(visual_dim, visual_dim)?;
        Ok(ProjectionParams {
            w_a,
            b_a: vec![F::zero(); visual_dim],
            w_b,
            b_b: vec![F::zero(); visual_dim],
            mode: ProjectionMode::Tanh,
        })
    }

    pub fn with_mode(mut self, mode: ProjectionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn text_dim(&self) -> usize {
        self.w_a.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.w_a.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (dt, dv) = (self.text_dim(), self.visual_dim());
        let ok = self.b_a.len() == dv
            && self.w_b.rows() == dv
            && self.w_b.cols() == dv
            && self.b_b.len() == dv;
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "projection shapes inconsistent with D_t={dt}, D_v={dv}"
            )));
        }
        let finite = self
            .w_a
            .data()
            .iter()
            .chain(&self.b_a)
            .chain(self.w_b.data())
            .chain(&self.b_b)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter(
                "non-finite projection parameter".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, t: &[F]) -> Result<Vec<F>> {
        self.forward_cached(t).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, t: &[F]) -> Result<(Vec<F>, ForwardCache<F>)> {
        if t.len() != self.text_dim() {
            return Err(Error::DimensionMismatch(format!(
                "text embedding has {} dims, projection expects {}",
                t.len(),
                self.text_dim()
            )));
        }
        let z = affine_t(&self.w_a, t, &self.b_a);
        let (out, u) = match self.mode {
            ProjectionMode::Tanh => {
                let u: Vec<F> = z.iter().map(|v| v.tanh()).collect();
                (affine_t(&self.w_b, &u, &self.b_b), u)
            }
            ProjectionMode::Linear => (z.clone(), z.clone()),
        };
        Ok((
            out,
            ForwardCache {
                input: t.to_vec(),
                z,
                u,
            },
        ))
    }

    /// Backpropagates `grad_out = dL/dpsi(t)`; returns parameter grads and `dL/dt`.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        grad_out: &[F],
    ) -> Result<(ProjectionGrads<F>, Vec<F>)> {
        let (dt, dv) = (self.text_dim(), self.visual_dim());
        if cache.input.len() != dt
            || cache.z.len() != dv
            || cache.u.len() != dv
            || grad_out.len() != dv
        {
            return Err(Error::DimensionMismatch(
                "stale forward cache or gradient shape".into(),
            ));
        }
        let mut grads = ProjectionGrads::zeros_like(self);
        let grad_z: Vec<F> = match self.mode {
            ProjectionMode::Tanh => {
                outer_into(&mut grads.w_b, &cache.u, grad_out);
                grads.b_b.copy_from_slice(grad_out);
                let grad_u = mat_vec(&self.w_b, grad_out);
                grad_u
                    .iter()
                    .zip(&cache.u)
                    .map(|(&g, &u)| g * (F::one() - u * u))
                    .collect()
            }
            ProjectionMode::Linear => grad_out.to_vec(),
        };
        outer_into(&mut grads.w_a, &cache.input, &grad_z);
        grads.b_a.copy_from_slice(&grad_z);
        let grad_t = mat_vec(&self.w_a, &grad_z);
        Ok((grads, grad_t))
    }

    pub fn to_f64(&self) -> ProjectionParams<f64> {
        let conv = |v: &[F]| v.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>();
        ProjectionParams {
            w_a: Matrix::new(self.w_a.rows(), self.w_a.cols(), conv(self.w_a.data())).unwrap(),
            b_a: conv(&self.b_a),
            w_b: Matrix::new(self.w_b.rows(), self.w_b.cols(), conv(self.w_b.data())).unwrap(),
            b_b: conv(&self.b_b),
            mode: self.mode,
        }
    }
}

impl ProjectionParams<f32> {
    pub fn to_records(&self) -> Result<Vec<TensorRecord>> {
        let (dt, dv) = (self.text_dim(), self.visual_dim());
        Ok(vec![
            TensorRecord::from_i32(
                "meta",
                vec![4],
                &[dt as i32, dv as i32, CHECKPOINT_VERSION, self.mode.code()],
            )?,
            TensorRecord::from_f32("W_a", vec![dt, dv], self.w_a.data())?,
            TensorRecord::from_f32("b_a", vec![dv], &self.b_a)?,
            TensorRecord::from_f32("W_b", vec![dv, dv], self.w_b.data())?,
            TensorRecord::from_f32("b_b", vec![dv], &self.b_b)?,
        ])
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        let meta = container.require("meta")?.to_i32()?;
        if meta.len() < 3 {
            return Err(Error::InvalidRecord {
                name: "meta".into(),
                reason: "expected [D_t, D_v, version, mode]".into(),
            });
        }
        if meta[2] != CHECKPOINT_VERSION {
            return Err(Error::InvalidRecord {
                name: "meta".into(),
                reason: format!("unsupported checkpoint version {}", meta[2]),
            });
        }
        let dims = |v: i32| {
            usize::try_from(v)
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::InvalidRecord {
                    name: "meta".into(),
                    reason: format!("invalid dimension {v}"),
                })
        };
        let (dt, dv) = (dims(meta[0])?, dims(meta[1])?);
        let mode = ProjectionMode::from_code(meta.get(3).copied().unwrap_or(0))?;

        let load = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let rec = container.require(name)?;
            if !matches!(rec.dtype, DType::F32 | DType::F16) || rec.shape != shape {
                return Err(Error::InvalidRecord {
                    name: name.into(),
                    reason: format!(
                        "expected float tensor {:?}, found {} {:?}",
                        shape,
                        rec.dtype.name(),
                        rec.shape
                    ),
                });
            }
            rec.to_f32()
        };
        let params = ProjectionParams {
            w_a: Matrix::new(dt, dv, load("W_a", &[dt, dv])?)?,
            b_a: load("b_a", &[dv])?,
            w_b: Matrix::new(dv, dv, load("W_b", &[dv, dv])?)?,
            b_b: load("b_b", &[dv])?,
            mode,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::tensor_store::write_container(path, &self.to_records()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

impl<F: Scalar> ProjectionGrads<F> {
    pub fn zeros_like(params: &ProjectionParams<F>) -> Self {
        ProjectionGrads {
            w_a: Matrix::zeros(params.w_a.rows(), params.w_a.cols()),
            b_a: vec![F::zero(); params.b_a.len()],
            w_b: Matrix::zeros(params.w_b.rows(), params.w_b.cols()),
            b_b: vec![F::zero(); params.b_b.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ProjectionGrads<F>) {
        add_into(self.w_a.data_mut(), other.w_a.data());
        add_into(&mut self.b_a, &other.b_a);
        add_into(self.w_b.data_mut(), other.w_b.data());
        add_into(&mut self.b_b, &other.b_b);
    }

    /// Parameter tensors in a fixed order: W_a, b_a, W_b, b_b.
    pub fn tensors(&self) -> [&[F]; 4] {
        [self.w_a.data(), &self.b_a, self.w_b.data(), &self.b_b]
    }
}

impl<F: Scalar> ProjectionParams<F> {
    /// Mutable parameter tensors, same order as [`ProjectionGrads::tensors`].
    pub fn tensors_mut(&mut self) -> [&mut [F]; 4] {
        [
            self.w_a.data_mut(),
            &mut self.b_a,
            self.w_b.data_mut(),
            &mut self.b_b,
        ]
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

// W^T x + b for W stored (in x out).
fn affine_t<F: Scalar>(w: &Matrix<F>, x: &[F], b: &[F]) -> Vec<F> {
    let mut out = b.to_vec();
    for (r, &xr) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(r)) {
            *o = *o + wv * xr;
        }
    }
    out
}

// W y for W stored (in x out), y of length out.
fn mat_vec<F: Scalar>(w: &Matrix<F>, y: &[F]) -> Vec<F> {
    (0..w.rows())
        .map(|r| {
            w.row(r)
                .iter()
                .zip(y)
                .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
        })
        .collect()
}

fn outer_into<F: Scalar>(dst: &mut Matrix<F>, left: &[F], right: &[F]) {
    for (r, &l) in left.iter().enumerate() {
        for (d, &rv) in dst.row_mut(r).iter_mut().zip(right) {
            *d = l * rv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(wa: f32, ba: f32, wb: f32, bb: f32) -> ProjectionParams {
        ProjectionParams {
            w_a: Matrix::new(1, 1, vec![wa]).unwrap(),
            b_a: vec![ba],
            w_b: Matrix::new(1, 1, vec![wb]).unwrap(),
            b_b: vec![bb],
            mode: ProjectionMode::Tanh,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = ProjectionParams::<f32>::init(5, 7, 42).unwrap();
        let b = ProjectionParams::<f32>::init(5, 7, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.b_a.iter().chain(&a.b_b).all(|&v| v == 0.0));
        assert_ne!(a, ProjectionParams::<f32>::init(5, 7, 43).unwrap());
    }

    #[test]
    fn init_variance_matches_xavier() {
        let p = ProjectionParams::<f64>::init(512, 512, 7).unwrap();
        let data = p.w_a.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (512.0 + 512.0);
        assert!(
            (var / expected - 1.0).abs() < 0.2,
            "variance {var} vs {expected}"
        );
    }

    #[test]
    fn zero_first_layer_gives_zero_output() {
        let mut p = ProjectionParams::<f32>::init(3, 3, 1).unwrap();
        p.w_a = Matrix::zeros(3, 3);
        p.w_b = Matrix::new(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(p.forward(&[0.3, -2.0, 5.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn scalar_forward_examples() {
        let p = scalar_params(1.0, 0.0, 2.0, 0.5);
        assert_eq!(p.forward(&[0.0]).unwrap(), vec![0.5]);
        assert!((p.forward(&[1000.0]).unwrap()[0] - 2.5).abs() < 1e-6);
        assert!(p.forward(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = ProjectionParams::<f32>::init(4, 3, 9).unwrap();
        let (_, cache) = p.forward_cached(&[1.0, -1.0, 0.5, 2.0]).unwrap();
        let (g, gt) = p.backward(&cache, &[0.0; 3]).unwrap();
        assert_eq!(g, ProjectionGrads::zeros_like(&p));
        assert!(gt.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tanh_derivative_at_zero_passes_gradient_through() {
        let mut p = ProjectionParams::<f32>::init(2, 2, 3).unwrap();
        p.w_a = Matrix::zeros(2, 2);
        p.w_b = Matrix::new(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let (_, cache) = p.forward_cached(&[0.7, -0.2]).unwrap();
        let (g, _) = p.backward(&cache, &[0.3, -1.5]).unwrap();
        assert_eq!(g.b_a, vec![0.3, -1.5]);
    }

    #[test]
    fn stale_cache_rejected() {
        let p = ProjectionParams::<f32>::init(2, 3, 3).unwrap();
        let q = ProjectionParams::<f32>::init(4, 3, 3).unwrap();
        let (_, cache) = q.forward_cached(&[0.0; 4]).unwrap();
        assert!(p.backward(&cache, &[0.0; 3]).is_err());
    }

    #[test]
    fn linear_mode_skips_second_layer() {
        let p = scalar_params(2.0, 1.0, 5.0, 3.0).with_mode(ProjectionMode::Linear);
        assert_eq!(p.forward(&[4.0]).unwrap(), vec![9.0]);
    }

    #[test]
    fn checkpoint_missing_record() {
        let p = ProjectionParams::<f32>::init(2, 3, 3).unwrap();
        let records: Vec<_> = p
            .to_records()
            .unwrap()
            .into_iter()
            .filter(|r| r.name != "W_b")
            .collect();
        let err = ProjectionParams::from_container(&Container::new(records)).unwrap_err();
        assert!(matches!(err, Error::MissingRecord(ref n) if n == "W_b"));
    }

    #[test]
    fn checkpoint_shape_mismatch() {
        let p = ProjectionParams::<f32>::init(2, 3, 3).unwrap();
        let mut records = p.to_records().unwrap();
        records[2] = TensorRecord::from_f32("b_a", vec![2], &[0.0, 0.0]).unwrap();
        assert!(ProjectionParams::from_container(&Container::new(records)).is_err());
    }
}
