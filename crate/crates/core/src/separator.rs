//! FiLM-conditioned spectral-mask separator with exact analytic gradients.
//!
//! Per STFT frame `t` of the mixture spectrogram `X`:
//!
//! ```text
//! f_t = ln(|X_t| + 1e-8)                       log-magnitude features
//! gamma = Wg c + bg ,  beta = Wb c + bb        FiLM from the condition
//! h_t = relu(gamma (.) (W1 f_t + b1) + beta)   modulated hidden state
//! m_t = sigmoid(W2 h_t + b2)                   real mask in (0,1)
//! estimate = istft(m (.) X)                    mixture-phase resynthesis
//! ```
//!
//! The whole map is differentiable by hand: the iSTFT adjoint comes from
//! [`crate::signal::Stft::istft_adjoint`], everything else is chain rule.
//! Encoders are frozen; the gradient with respect to the condition embedding
//! is computed for diagnostics but never propagated into them.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::condition::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, stream};
use crate::signal::{ComplexSpectrogram, Stft, Waveform};

/// Log-magnitude floor for silent bins.
pub const FEATURE_FLOOR: f64 = 1e-8;

/// Network shape: F frequency bins, H hidden units, D condition dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeparatorDims {
    pub n_bins: usize,
    pub hidden: usize,
    pub cond: usize,
}

impl Default for SeparatorDims {
    fn default() -> Self {
        SeparatorDims {
            n_bins: 257,
            hidden: 64,
            cond: 64,
        }
    }
}

impl SeparatorDims {
    pub fn param_count(&self) -> usize {
        let (f, h, d) = (self.n_bins, self.hidden, self.cond);
        h * f + h + 2 * (h * d + h) + f * h + f
    }
}

/// All trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorParams {
    pub dims: SeparatorDims,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w_gamma: Array2<f64>,
    pub b_gamma: Array1<f64>,
    pub w_beta: Array2<f64>,
    pub b_beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl SeparatorParams {
    /// Seeded init: weights uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// biases zero.
    pub fn init(dims: SeparatorDims, seed: u64) -> Self {
        let mut rng = derived_rng(seed, &[stream::MODEL_INIT]);
        let (f, h, d) = (dims.n_bins, dims.hidden, dims.cond);
        SeparatorParams {
            dims,
            w1: uniform_init(&mut rng, h, f, f),
            b1: Array1::zeros(h),
            w_gamma: uniform_init(&mut rng, h, d, d),
            b_gamma: Array1::zeros(h),
            w_beta: uniform_init(&mut rng, h, d, d),
            b_beta: Array1::zeros(h),
            w2: uniform_init(&mut rng, f, h, h),
            b2: Array1::zeros(f),
        }
    }

    pub fn param_count(&self) -> usize {
        self.dims.param_count()
    }

    fn fields(&self) -> [(&'static str, &[f64]); 8] {
        [
            ("w1", self.w1.as_slice().unwrap()),
            ("b1", self.b1.as_slice().unwrap()),
            ("w_gamma", self.w_gamma.as_slice().unwrap()),
            ("b_gamma", self.b_gamma.as_slice().unwrap()),
            ("w_beta", self.w_beta.as_slice().unwrap()),
            ("b_beta", self.b_beta.as_slice().unwrap()),
            ("w2", self.w2.as_slice().unwrap()),
            ("b2", self.b2.as_slice().unwrap()),
        ]
    }

    fn fields_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w_gamma.as_slice_mut().unwrap(),
            self.b_gamma.as_slice_mut().unwrap(),
            self.w_beta.as_slice_mut().unwrap(),
            self.b_beta.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    /// Write the checkpoint format: magic "SEP1", version, dims, then all
    /// matrices row-major little-endian f32 in field order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.param_count() * 4);
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dims.n_bins as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dims.hidden as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dims.cond as u32).to_le_bytes());
        for (_, field) in self.fields() {
            for &v in field {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        crate::fsutil::atomic_write(path, &buf)
    }

    /// Load a checkpoint written by [`SeparatorParams::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |offset: u64, reason: String| Error::CorruptCheckpoint { offset, reason };
        let mut offset = 0u64;
        let mut read_exact = |buf: &mut [u8], offset: &mut u64| -> Result<()> {
            file.read_exact(buf)
                .map_err(|_| corrupt(*offset, "unexpected end of file".into()))?;
            *offset += buf.len() as u64;
            Ok(())
        };
        let mut magic = [0u8; 4];
        read_exact(&mut magic, &mut offset)?;
        if &magic != CKPT_MAGIC {
            return Err(corrupt(0, format!("bad magic {magic:?}")));
        }
        let mut u32b = [0u8; 4];
        read_exact(&mut u32b, &mut offset)?;
        let version = u32::from_le_bytes(u32b);
        if version != CKPT_VERSION {
            return Err(corrupt(4, format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            read_exact(&mut u32b, &mut offset)?;
            *d = u32::from_le_bytes(u32b) as usize;
        }
        let dims = SeparatorDims {
            n_bins: dims[0],
            hidden: dims[1],
            cond: dims[2],
        };
        if dims.n_bins == 0 || dims.hidden == 0 || dims.cond == 0 {
            return Err(corrupt(8, "zero dimension".into()));
        }
        let mut params = SeparatorParams::init(dims, 0);
        let mut f32b = [0u8; 4];
        for field in params.fields_mut() {
            for v in field.iter_mut() {
                read_exact(&mut f32b, &mut offset)?;
                let x = f32::from_le_bytes(f32b);
                if !x.is_finite() {
                    return Err(corrupt(offset - 4, "non-finite parameter".into()));
                }
                *v = x as f64;
            }
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(corrupt(offset, "trailing bytes after parameters".into()));
        }
        Ok(params)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"SEP1";
const CKPT_VERSION: u32 = 1;

/// Gradients (or any parameter-shaped accumulator).
#[derive(Debug, Clone)]
pub struct SeparatorGrads {
    pub dims: SeparatorDims,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w_gamma: Array2<f64>,
    pub b_gamma: Array1<f64>,
    pub w_beta: Array2<f64>,
    pub b_beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl SeparatorGrads {
    pub fn zeros(dims: SeparatorDims) -> Self {
        let (f, h, d) = (dims.n_bins, dims.hidden, dims.cond);
        SeparatorGrads {
            dims,
            w1: Array2::zeros((h, f)),
            b1: Array1::zeros(h),
            w_gamma: Array2::zeros((h, d)),
            b_gamma: Array1::zeros(h),
            w_beta: Array2::zeros((h, d)),
            b_beta: Array1::zeros(h),
            w2: Array2::zeros((f, h)),
            b2: Array1::zeros(f),
        }
    }

    pub fn fields(&self) -> [(&'static str, &[f64]); 8] {
        [
            ("w1", self.w1.as_slice().unwrap()),
            ("b1", self.b1.as_slice().unwrap()),
            ("w_gamma", self.w_gamma.as_slice().unwrap()),
            ("b_gamma", self.b_gamma.as_slice().unwrap()),
            ("w_beta", self.w_beta.as_slice().unwrap()),
            ("b_beta", self.b_beta.as_slice().unwrap()),
            ("w2", self.w2.as_slice().unwrap()),
            ("b2", self.b2.as_slice().unwrap()),
        ]
    }

    fn fields_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w_gamma.as_slice_mut().unwrap(),
            self.b_gamma.as_slice_mut().unwrap(),
            self.w_beta.as_slice_mut().unwrap(),
            self.b_beta.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    /// Accumulate `other`, used for fixed-order batch reduction.
    pub fn add_assign(&mut self, other: &SeparatorGrads) {
        for (mine, (_, theirs)) in self.fields_mut().into_iter().zip(other.fields()) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for field in self.fields_mut() {
            for v in field {
                *v *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.fields()
            .iter()
            .flat_map(|(_, f)| f.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first field holding a non-finite value, if any.
    pub fn non_finite_field(&self) -> Option<&'static str> {
        self.fields()
            .iter()
            .find(|(_, f)| f.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| *name)
    }
}

/// Intermediates kept from a forward pass for backprop.
pub struct ForwardTrace {
    dims: SeparatorDims,
    length: usize,
    spec: ComplexSpectrogram,
    feats: Array2<f64>,
    pre_film: Array2<f64>,
    pre_relu: Array2<f64>,
    hidden: Array2<f64>,
    mask: Array2<f64>,
    gamma: Array1<f64>,
    cond: Array1<f64>,
}

impl ForwardTrace {
    pub fn mask(&self) -> &Array2<f64> {
        &self.mask
    }

    pub fn n_frames(&self) -> usize {
        self.spec.n_frames()
    }
}

/// The separator: parameters plus the STFT engine they operate on.
pub struct Separator {
    pub params: SeparatorParams,
    stft: Stft,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Separator {
    pub fn new(params: SeparatorParams) -> Self {
        crate::blas_init::single_thread();
        Separator {
            params,
            stft: Stft::default(),
        }
    }

    pub fn init(dims: SeparatorDims, seed: u64) -> Self {
        Separator::new(SeparatorParams::init(dims, seed))
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    /// Forward pass: masked mixture-phase resynthesis plus the trace needed
    /// for [`Separator::backward`].
    pub fn forward(
        &self,
        mixture: &Waveform,
        cond: &ConditionEmbedding,
    ) -> Result<(Waveform, ForwardTrace)> {
        let dims = self.params.dims;
        if cond.dim() != dims.cond {
            return Err(Error::DimensionMismatch {
                context: "condition embedding dimension",
                expected: dims.cond,
                got: cond.dim(),
            });
        }
        let spec = self.stft.stft(mixture)?;
        if spec.n_bins() != dims.n_bins {
            return Err(Error::DimensionMismatch {
                context: "spectrogram bins vs separator input",
                expected: dims.n_bins,
                got: spec.n_bins(),
            });
        }
        let n_frames = spec.n_frames();

        // plain sqrt instead of Complex::norm's hypot: magnitudes here are
        // far from overflow and this sits on the hot path
        let feats = spec
            .bins
            .mapv(|z| ((z.re * z.re + z.im * z.im).sqrt() + FEATURE_FLOOR).ln());
        let c = Array1::from_vec(cond.values.clone());
        let gamma = self.params.w_gamma.dot(&c) + &self.params.b_gamma;
        let beta = self.params.w_beta.dot(&c) + &self.params.b_beta;

        let mut pre_film = self.params.w1.dot(&feats);
        pre_film += &self.params.b1.view().insert_axis(Axis(1));
        let mut pre_relu = &pre_film * &gamma.view().insert_axis(Axis(1));
        pre_relu += &beta.view().insert_axis(Axis(1));
        let hidden = pre_relu.mapv(|z| z.max(0.0));

        let mut logits = self.params.w2.dot(&hidden);
        logits += &self.params.b2.view().insert_axis(Axis(1));
        let mask = logits.mapv(sigmoid);

        let mut masked = spec.clone();
        for (b, &m) in masked.bins.iter_mut().zip(mask.iter()) {
            *b *= m;
        }
        let samples = self.stft.istft(&masked, mixture.len())?;
        let estimate = Waveform::new(samples, mixture.sample_rate)?;

        let trace = ForwardTrace {
            dims,
            length: mixture.len(),
            spec,
            feats,
            pre_film,
            pre_relu,
            hidden,
            mask,
            gamma,
            cond: c,
        };
        debug_assert_eq!(trace.hidden.ncols(), n_frames);
        Ok((estimate, trace))
    }

    /// Exact chain rule from a time-domain gradient back to every parameter
    /// block, plus the condition-embedding gradient for diagnostics.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_estimate: &[f64],
    ) -> Result<(SeparatorGrads, Vec<f64>)> {
        if trace.dims != self.params.dims {
            return Err(Error::InvalidConfig(
                "trace was produced by a separator with different dimensions".into(),
            ));
        }
        if grad_estimate.len() != trace.length {
            return Err(Error::DimensionMismatch {
                context: "upstream gradient length",
                expected: trace.length,
                got: grad_estimate.len(),
            });
        }

        let d_spec = self.stft.istft_adjoint(grad_estimate, trace.n_frames());

        // real mask on complex bins: dm = Re(dS) Re(X) + Im(dS) Im(X)
        let mut d_mask = Array2::zeros(trace.mask.raw_dim());
        for ((dm, ds), x) in d_mask
            .iter_mut()
            .zip(d_spec.iter())
            .zip(trace.spec.bins.iter())
        {
            *dm = ds.re * x.re + ds.im * x.im;
        }

        // sigmoid
        let d_logits = &d_mask * &trace.mask.mapv(|m| m * (1.0 - m));

        let d_w2 = d_logits.dot(&trace.hidden.t());
        let d_b2 = d_logits.sum_axis(Axis(1));
        let d_hidden = self.params.w2.t().dot(&d_logits);

        // relu
        let d_pre_relu = &d_hidden * &trace.pre_relu.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });

        let d_gamma = (&d_pre_relu * &trace.pre_film).sum_axis(Axis(1));
        let d_beta = d_pre_relu.sum_axis(Axis(1));
        let d_pre_film = &d_pre_relu * &trace.gamma.view().insert_axis(Axis(1));

        let d_w1 = d_pre_film.dot(&trace.feats.t());
        let d_b1 = d_pre_film.sum_axis(Axis(1));

        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
        };
        let d_w_gamma = outer(&d_gamma, &trace.cond);
        let d_w_beta = outer(&d_beta, &trace.cond);

        let d_cond =
            self.params.w_gamma.t().dot(&d_gamma) + self.params.w_beta.t().dot(&d_beta);

        let grads = SeparatorGrads {
            dims: trace.dims,
            w1: d_w1,
            b1: d_b1,
            w_gamma: d_w_gamma,
            b_gamma: d_gamma,
            w_beta: d_w_beta,
            b_beta: d_beta,
            w2: d_w2,
            b2: d_b2,
        };
        Ok((grads, d_cond.to_vec()))
    }
}

/// Adam optimizer state over all parameter blocks.
pub struct AdamState {
    m: SeparatorGrads,
    v: SeparatorGrads,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dims: SeparatorDims) -> Self {
        AdamState {
            m: SeparatorGrads::zeros(dims),
            v: SeparatorGrads::zeros(dims),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub(crate) fn moments(&self) -> (&SeparatorGrads, &SeparatorGrads) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(dims: SeparatorDims, m: SeparatorGrads, v: SeparatorGrads, t: u64) -> Self {
        debug_assert_eq!(m.dims, dims);
        debug_assert_eq!(v.dims, dims);
        AdamState {
            m,
            v,
            t,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_finite(grads: &SeparatorGrads, step: u64) -> Result<()> {
    if let Some(field) = grads.non_finite_field() {
        return Err(Error::NanGradient {
            step,
            context: format!("parameter block {field}"),
        });
    }
    Ok(())
}

/// One Adam update. Deterministic; rejects non-finite gradients.
pub fn adam_step(
    params: &mut SeparatorParams,
    grads: &SeparatorGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    check_finite(grads, state.t)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .fields_mut()
        .into_iter()
        .zip(grads.fields())
        .zip(state.m.fields_mut())
        .zip(state.v.fields_mut())
    {
        let g = g.1;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain SGD update.
pub fn sgd_step(params: &mut SeparatorParams, grads: &SeparatorGrads, lr: f64) -> Result<()> {
    check_finite(grads, 0)?;
    for (p, (_, g)) in params.fields_mut().into_iter().zip(grads.fields()) {
        for i in 0..p.len() {
            p[i] -= lr * g[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::Provenance;
    use crate::metrics::loss_and_grad;
    use crate::rng::derived_rng;
    use rand::Rng;

    fn test_cond(dim: usize, seed: u64) -> ConditionEmbedding {
        let mut rng = derived_rng(seed, &[0xc0]);
        let mut values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.iter_mut().for_each(|v| *v /= n);
        ConditionEmbedding {
            values,
            provenance: Provenance::SupervisedText,
            noise_variance_applied: 0.0,
        }
    }

    fn random_mixture(n: usize, seed: u64) -> Waveform {
        let mut rng = derived_rng(seed, &[0xa0]);
        Waveform::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let dims = SeparatorDims::default();
        let a = SeparatorParams::init(dims, 11);
        let b = SeparatorParams::init(dims, 11);
        assert_eq!(a, b);
        let c = SeparatorParams::init(dims, 12);
        assert_ne!(a, c);
        assert!(a.b1.iter().all(|&x| x == 0.0));
        assert!(a.b2.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn param_count_matches_closed_form() {
        let dims = SeparatorDims::default();
        // H*F + H + 2*(H*D + H) + F*H + F with F=257, H=64, D=64
        assert_eq!(dims.param_count(), 41_537);
        let p = SeparatorParams::init(dims, 1);
        let total: usize = p.fields().iter().map(|(_, f)| f.len()).sum();
        assert_eq!(total, dims.param_count());
    }

    #[test]
    fn saturated_mask_passes_the_mixture_through() {
        let dims = SeparatorDims::default();
        let mut params = SeparatorParams::init(dims, 3);
        params.w2.fill(0.0);
        params.b2.fill(30.0);
        let sep = Separator::new(params);
        let mixture = random_mixture(4096, 5);
        let (est, _) = sep.forward(&mixture, &test_cond(dims.cond, 1)).unwrap();
        let num: f64 = mixture
            .samples
            .iter()
            .zip(&est.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = mixture.samples.iter().map(|a| a * a).sum();
        assert!((num / den).sqrt() < 1e-4, "rel err {}", (num / den).sqrt());
    }

    #[test]
    fn zero_logits_give_half_mixture() {
        let dims = SeparatorDims::default();
        let mut params = SeparatorParams::init(dims, 3);
        params.w2.fill(0.0);
        params.b2.fill(0.0);
        let sep = Separator::new(params);
        let mixture = random_mixture(4096, 6);
        let (est, trace) = sep.forward(&mixture, &test_cond(dims.cond, 2)).unwrap();
        assert!(trace.mask().iter().all(|&m| m == 0.5));
        for (a, b) in mixture.samples.iter().zip(&est.samples) {
            assert!((0.5 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn different_conditions_give_different_masks() {
        let dims = SeparatorDims::default();
        let sep = Separator::init(dims, 7);
        let mixture = random_mixture(4096, 8);
        let (_, t1) = sep.forward(&mixture, &test_cond(dims.cond, 10)).unwrap();
        let (_, t2) = sep.forward(&mixture, &test_cond(dims.cond, 20)).unwrap();
        let linf = t1
            .mask()
            .iter()
            .zip(t2.mask().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(linf > 0.0, "conditioning had no effect on the mask");
    }

    #[test]
    fn mask_stays_in_unit_interval() {
        let dims = SeparatorDims::default();
        let sep = Separator::init(dims, 9);
        let mixture = random_mixture(2048, 9);
        let (_, trace) = sep.forward(&mixture, &test_cond(dims.cond, 3)).unwrap();
        assert!(trace.mask().iter().all(|&m| m > 0.0 && m < 1.0));
        // masked magnitude never exceeds mixture magnitude per bin
        for ((k, t), m) in trace.mask().indexed_iter() {
            let orig = trace.spec.bins[[k, t]].norm();
            assert!(m * orig <= orig);
        }
    }

    #[test]
    fn zero_upstream_gradient_zeroes_all_parameter_gradients() {
        let dims = SeparatorDims::default();
        let sep = Separator::init(dims, 13);
        let mixture = random_mixture(2048, 13);
        let (_, trace) = sep.forward(&mixture, &test_cond(dims.cond, 4)).unwrap();
        let (grads, d_cond) = sep.backward(&trace, &vec![0.0; 2048]).unwrap();
        assert_eq!(grads.l2_norm(), 0.0);
        assert!(d_cond.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dead_relu_units_receive_no_gradient() {
        let dims = SeparatorDims::default();
        let mut params = SeparatorParams::init(dims, 17);
        // drive unit 0 permanently negative pre-relu
        params.w_gamma.row_mut(0).fill(0.0);
        params.b_gamma[0] = 0.0; // gamma_0 = 0
        params.w_beta.row_mut(0).fill(0.0);
        params.b_beta[0] = -5.0; // beta_0 = -5 => pre_relu row 0 = -5
        let sep = Separator::new(params);
        let mixture = random_mixture(2048, 18);
        let (est, trace) = sep.forward(&mixture, &test_cond(dims.cond, 5)).unwrap();
        let target = random_mixture(2048, 19);
        let (_, grad_est) = loss_and_grad(&est.samples, &target.samples).unwrap();
        let (grads, _) = sep.backward(&trace, &grad_est).unwrap();
        assert!(grads.w1.row(0).iter().all(|&g| g == 0.0));
        assert_eq!(grads.b1[0], 0.0);
        assert!(grads.w_gamma.row(0).iter().all(|&g| g == 0.0));
        assert_eq!(grads.b_beta[0], 0.0);
    }

    /// Full-loss gradient check against central finite differences on a few
    /// sampled coordinates per block (the acceptance suite covers 200).
    #[test]
    fn gradient_check_on_sampled_coordinates() {
        let dims = SeparatorDims::default();
        let sep = Separator::init(dims, 23);
        let mixture = random_mixture(2048, 23);
        let target = random_mixture(2048, 24);
        let cond = test_cond(dims.cond, 6);

        let loss_of = |sep: &Separator| -> f64 {
            let (est, _) = sep.forward(&mixture, &cond).unwrap();
            loss_and_grad(&est.samples, &target.samples).unwrap().0
        };

        let (est, trace) = sep.forward(&mixture, &cond).unwrap();
        let (_, grad_est) = loss_and_grad(&est.samples, &target.samples).unwrap();
        let (grads, _) = sep.backward(&trace, &grad_est).unwrap();

        let h = 1e-5;
        let mut rng = derived_rng(77, &[3]);
        for block in 0..8 {
            for _ in 0..6 {
                let len = grads.fields()[block].1.len();
                let idx = rng.gen_range(0..len);
                let analytic = grads.fields()[block].1[idx];
                let mut plus = Separator::new(sep.params.clone());
                plus.params.fields_mut()[block][idx] += h;
                let mut minus = Separator::new(sep.params.clone());
                minus.params.fields_mut()[block][idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    rel < 1e-4,
                    "block {} idx {idx}: analytic {analytic} fd {fd} rel {rel}",
                    grads.fields()[block].0
                );
            }
        }
    }

    #[test]
    fn adam_with_zero_gradient_keeps_params() {
        let dims = SeparatorDims::default();
        let mut params = SeparatorParams::init(dims, 31);
        let before = params.clone();
        let mut state = AdamState::new(dims);
        adam_step(&mut params, &SeparatorGrads::zeros(dims), &mut state, 1e-3).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Single-coordinate sanity: minimizing (w - 3)^2 via the w1[0,0] slot.
        let dims = SeparatorDims {
            n_bins: 2,
            hidden: 1,
            cond: 1,
        };
        let mut params = SeparatorParams::init(dims, 1);
        params.w1[[0, 0]] = 0.0;
        let mut state = AdamState::new(dims);
        for _ in 0..4000 {
            let mut grads = SeparatorGrads::zeros(dims);
            grads.w1[[0, 0]] = 2.0 * (params.w1[[0, 0]] - 3.0);
            adam_step(&mut params, &grads, &mut state, 1e-2).unwrap();
        }
        assert!((params.w1[[0, 0]] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn adam_rejects_nan_gradients() {
        let dims = SeparatorDims::default();
        let mut params = SeparatorParams::init(dims, 1);
        let mut grads = SeparatorGrads::zeros(dims);
        grads.w_beta[[0, 0]] = f64::NAN;
        let mut state = AdamState::new(dims);
        match adam_step(&mut params, &grads, &mut state, 1e-3) {
            Err(Error::NanGradient { context, .. }) => assert!(context.contains("w_beta")),
            other => panic!("expected NanGradient, got {other:?}"),
        }
    }

    #[test]
    fn estimate_is_linear_in_the_mask() {
        // Convex combinations of two parameter settings' masks combine
        // linearly in the estimate (istft linearity).
        let dims = SeparatorDims::default();
        let sep_a = Separator::init(dims, 41);
        let sep_b = Separator::init(dims, 42);
        let mixture = random_mixture(2048, 43);
        let cond = test_cond(dims.cond, 7);
        let (_, tr_a) = sep_a.forward(&mixture, &cond).unwrap();
        let (_, tr_b) = sep_b.forward(&mixture, &cond).unwrap();

        let stft = Stft::default();
        let spec = stft.stft(&mixture).unwrap();
        let apply = |mask: &Array2<f64>| -> Vec<f64> {
            let mut s = spec.clone();
            for ((k, t), m) in mask.indexed_iter() {
                s.bins[[k, t]] *= *m;
            }
            stft.istft(&s, mixture.len()).unwrap()
        };
        let alpha = 0.3;
        let blend = alpha * tr_a.mask() + (1.0 - alpha) * tr_b.mask();
        let lhs = apply(&blend);
        let ya = apply(tr_a.mask());
        let yb = apply(tr_b.mask());
        for i in 0..lhs.len() {
            let rhs = alpha * ya[i] + (1.0 - alpha) * yb[i];
            assert!((lhs[i] - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trips_through_f32() {
        let dims = SeparatorDims::default();
        let params = SeparatorParams::init(dims, 51);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sep1");
        params.save_checkpoint(&path).unwrap();
        let loaded = SeparatorParams::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dims, dims);
        for ((_, a), (_, b)) in params.fields().iter().zip(loaded.fields().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= (x.abs() + 1.0) * 1e-7);
            }
        }
        // saving again is byte-identical
        let path2 = dir.path().join("model2.sep1");
        loaded.save_checkpoint(&path2).unwrap();
        let reloaded = SeparatorParams::load_checkpoint(&path2).unwrap();
        for ((_, a), (_, b)) in loaded.fields().iter().zip(reloaded.fields().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_clean_error() {
        let dims = SeparatorDims::default();
        let params = SeparatorParams::init(dims, 52);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sep1");
        params.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            SeparatorParams::load_checkpoint(&path),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }
}
