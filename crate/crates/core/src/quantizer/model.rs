use super::{FactorAssignment, QuantizerConfig, QuantizerError, Result};
use crate::numerics::{
    nearest_row, Activation, HasParameters, Matrix, Mlp, MlpCache, Parameter, Rng, Scalar,
};

/// Encoder, decoder and `T` codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerModel<T> {
    pub config: QuantizerConfig,
    pub input_dim: usize,
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    /// One `K × D_q` parameter per level.
    pub codebooks: Vec<Parameter<T>>,
}

/// Everything one forward quantization produces for a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeOutput<T> {
    pub indices: Vec<u32>,
    /// Encoder output `x = r¹`.
    pub encoded: Vec<T>,
    /// `x̂ = Σ_t c_{m^t}^t`
    pub quantized: Vec<T>,
    /// Decoder output `v̂`.
    pub reconstruction: Vec<T>,
    /// `r¹ … r^{T+1}`
    pub residuals: Vec<Vec<T>>,
}

/// Mean-over-batch losses.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    pub rec: f64,
    pub com: f64,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.rec + self.com
    }
}

/// Stop-gradient values captured at one parameter point.
///
/// Evaluating [`QuantizerModel::surrogate_loss`] with these held fixed gives a
/// smooth function whose exact gradient is the straight-through gradient.
#[derive(Debug, Clone)]
pub struct FrozenQuantization<T> {
    pub indices: Vec<Vec<u32>>,
    /// `sg[r^t]` per row and level.
    pub residuals: Vec<Vec<Vec<T>>>,
    /// `sg[c_{m^t}^t]` per row and level.
    pub codes: Vec<Vec<Vec<T>>>,
    /// `sg[x − x̂]` per row.
    pub offset: Matrix<T>,
}

impl<T: Scalar> QuantizerModel<T> {
    /// Randomly initialized model; codebooks start at zero until [`Self::init_codebooks`].
    pub fn new(input_dim: usize, config: QuantizerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(QuantizerError::Config("input dimension must be positive".into()));
        }
        let mut enc_dims = vec![input_dim];
        enc_dims.extend(&config.hidden);
        enc_dims.push(config.code_dim);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let encoder = Mlp::new("encoder", &enc_dims, Activation::Relu, Activation::Identity, rng)?;
        let decoder = Mlp::new("decoder", &dec_dims, Activation::Relu, Activation::Identity, rng)?;
        let codebooks = (0..config.levels)
            .map(|t| {
                Parameter::new(
                    format!("codebook.{t}"),
                    Matrix::zeros(config.codebook_size, config.code_dim),
                )
            })
            .collect();
        Ok(Self {
            config,
            input_dim,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks.first().map_or(0, |c| c.value.rows())
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.input_dim {
            return Err(QuantizerError::Dimension {
                expected: self.input_dim,
                found,
            });
        }
        Ok(())
    }

    /// Residual quantization of an already-encoded vector.
    fn quantize_code(&self, x: &[T]) -> (Vec<u32>, Vec<Vec<T>>, Vec<T>) {
        let mut r = x.to_vec();
        let mut residuals = Vec::with_capacity(self.levels() + 1);
        let mut quantized = vec![T::zero(); x.len()];
        let mut indices = Vec::with_capacity(self.levels());
        for cb in &self.codebooks {
            residuals.push(r.clone());
            let (m, _) = nearest_row(&cb.value, &r);
            let code = cb.value.row(m);
            for ((ri, qi), &ci) in r.iter_mut().zip(quantized.iter_mut()).zip(code) {
                *ri -= ci;
                *qi += ci;
            }
            indices.push(m as u32);
        }
        residuals.push(r);
        (indices, residuals, quantized)
    }

    /// Full encode → quantize → decode pass for one vector.
    pub fn quantize_forward(&self, v: &[T]) -> Result<QuantizeOutput<T>> {
        self.check_dim(v.len())?;
        let input = Matrix::from_vec(1, v.len(), v.to_vec())?;
        let encoded = self.encoder.predict(&input)?.into_data();
        let (indices, residuals, quantized) = self.quantize_code(&encoded);
        let xq = Matrix::from_vec(1, quantized.len(), quantized.clone())?;
        let reconstruction = self.decoder.predict(&xq)?.into_data();
        Ok(QuantizeOutput {
            indices,
            encoded,
            quantized,
            reconstruction,
            residuals,
        })
    }

    /// Factor indices only: encoder plus per-level nearest-code search, no decoding.
    pub fn assign(&self, v: &[T]) -> Result<Vec<u32>> {
        self.check_dim(v.len())?;
        let input = Matrix::from_vec(1, v.len(), v.to_vec())?;
        let encoded = self.encoder.predict(&input)?.into_data();
        Ok(self.quantize_code(&encoded).0)
    }

    /// Incremental insertion of a new entity against the frozen codebooks.
    pub fn assign_incremental(&self, entity: u64, v: &[T]) -> Result<FactorAssignment> {
        Ok(FactorAssignment {
            entity,
            indices: self.assign(v)?,
        })
    }

    /// Assignments for every row of `vectors`.
    pub fn assign_batch(&self, vectors: &Matrix<T>) -> Result<Vec<Vec<u32>>> {
        self.check_dim(vectors.cols())?;
        let encoded = self.encoder.predict(vectors)?;
        Ok(encoded.iter_rows().map(|x| self.quantize_code(x).0).collect())
    }

    /// Encoder outputs for a batch.
    pub fn encode(&self, vectors: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_dim(vectors.cols())?;
        Ok(self.encoder.predict(vectors)?)
    }

    /// Losses of a batch without touching gradients.
    pub fn evaluate(&self, vectors: &Matrix<T>) -> Result<(BatchLoss, Vec<Vec<u32>>)> {
        let (loss, state) = self.forward_batch(vectors)?;
        Ok((loss, state.indices))
    }

    fn forward_batch(&self, v: &Matrix<T>) -> Result<(BatchLoss, BatchState<T>)> {
        self.check_dim(v.cols())?;
        let enc = self.encoder.forward(v)?;
        let x = enc.output();
        let b = v.rows();
        let mut quantized = Matrix::zeros(b, self.config.code_dim);
        let mut indices = Vec::with_capacity(b);
        let mut residuals = Vec::with_capacity(b);
        for r in 0..b {
            let (idx, res, q) = self.quantize_code(x.row(r));
            quantized.row_mut(r).copy_from_slice(&q);
            indices.push(idx);
            residuals.push(res);
        }
        let dec = self.decoder.forward(&quantized)?;
        let inv_b = 1.0 / b.max(1) as f64;
        let mut rec = 0.0;
        for (p, q) in dec.output().data().iter().zip(v.data()) {
            let d = (*p - *q).as_f64();
            rec += d * d;
        }
        let beta = self.config.beta;
        let mut com = 0.0;
        for (idx, res) in indices.iter().zip(&residuals) {
            for (t, &m) in idx.iter().enumerate() {
                let code = self.codebooks[t].value.row(m as usize);
                let d: f64 = res[t]
                    .iter()
                    .zip(code)
                    .map(|(a, c)| (*a - *c).as_f64().powi(2))
                    .sum();
                com += (1.0 + beta) * d;
            }
        }
        let loss = BatchLoss {
            rec: rec * inv_b,
            com: com * inv_b,
        };
        Ok((
            loss,
            BatchState {
                enc,
                dec,
                quantized,
                indices,
                residuals,
            },
        ))
    }

    /// Forward pass plus straight-through backward; gradients accumulate into parameters.
    ///
    /// Losses are averaged over the batch and summed over dimensions.
    pub fn loss_and_backward(&mut self, v: &Matrix<T>) -> Result<(BatchLoss, Vec<Vec<u32>>)> {
        self.backward_terms(v, true)
    }

    /// Like [`Self::loss_and_backward`]; `commitment = false` backpropagates `L_rec` only.
    pub fn backward_terms(
        &mut self,
        v: &Matrix<T>,
        commitment: bool,
    ) -> Result<(BatchLoss, Vec<Vec<u32>>)> {
        let (loss, state) = self.forward_batch(v)?;
        let b = v.rows();
        let scale = T::lit(2.0 / b.max(1) as f64);
        let beta = T::lit(self.config.beta);

        let d_vhat = Matrix::from_fn(b, v.cols(), |r, c| scale * (state.dec.output().get(r, c) - v.get(r, c)));
        // straight-through: dL/dx̂ passes unchanged to the encoder output
        let mut d_x = self.decoder.backward(&state.dec, &d_vhat)?;

        let terms = if commitment { state.indices.len() } else { 0 };
        for (r, (idx, res)) in state.indices.iter().zip(&state.residuals).enumerate().take(terms) {
            for (t, &m) in idx.iter().enumerate() {
                let m = m as usize;
                let diff: Vec<T> = res[t]
                    .iter()
                    .zip(self.codebooks[t].value.row(m))
                    .map(|(a, c)| *a - *c)
                    .collect();
                // ‖sg[r] − c‖² pulls the code toward the residual
                for (g, &d) in self.codebooks[t].grad.row_mut(m).iter_mut().zip(&diff) {
                    *g -= scale * d;
                }
                // β‖r − sg[c]‖² pulls the residual, which depends on x and earlier codes
                let d_r: Vec<T> = diff.iter().map(|&d| scale * beta * d).collect();
                for (g, &d) in d_x.row_mut(r).iter_mut().zip(&d_r) {
                    *g += d;
                }
                for s in 0..t {
                    let ms = idx[s] as usize;
                    for (g, &d) in self.codebooks[s].grad.row_mut(ms).iter_mut().zip(&d_r) {
                        *g -= d;
                    }
                }
            }
        }
        self.encoder.backward(&state.enc, &d_x)?;
        Ok((loss, state.indices))
    }

    /// Captures the stop-gradient quantities of the current parameters for `v`.
    pub fn freeze(&self, v: &Matrix<T>) -> Result<FrozenQuantization<T>> {
        let (_, state) = self.forward_batch(v)?;
        let x = state.enc.output();
        let mut offset = x.clone();
        offset.add_scaled(-T::one(), &state.quantized)?;
        let codes = state
            .indices
            .iter()
            .map(|idx| {
                idx.iter()
                    .enumerate()
                    .map(|(t, &m)| self.codebooks[t].value.row(m as usize).to_vec())
                    .collect()
            })
            .collect();
        Ok(FrozenQuantization {
            indices: state.indices,
            residuals: state
                .residuals
                .into_iter()
                .map(|mut r| {
                    r.pop();
                    r
                })
                .collect(),
            codes,
            offset,
        })
    }

    /// Objective whose true gradient equals the straight-through gradient.
    ///
    /// `x̂` is replaced by `x − sg[x − x̂]` and assignments plus every
    /// stop-gradient operand come from `frozen`.
    pub fn surrogate_loss(&self, v: &Matrix<T>, frozen: &FrozenQuantization<T>) -> Result<f64> {
        let l = self.surrogate_terms(v, frozen)?;
        Ok(l.total())
    }

    /// Reconstruction and commitment parts of [`Self::surrogate_loss`].
    pub fn surrogate_terms(
        &self,
        v: &Matrix<T>,
        frozen: &FrozenQuantization<T>,
    ) -> Result<BatchLoss> {
        let x = self.encoder.predict(v)?;
        let mut x_st = x.clone();
        x_st.add_scaled(-T::one(), &frozen.offset)?;
        let v_hat = self.decoder.predict(&x_st)?;
        let b = v.rows() as f64;
        let rec: f64 = v_hat
            .data()
            .iter()
            .zip(v.data())
            .map(|(p, q)| (*p - *q).as_f64().powi(2))
            .sum();
        let beta = self.config.beta;
        let mut com = 0.0;
        for r in 0..v.rows() {
            let mut resid: Vec<f64> = x.row(r).iter().map(|a| a.as_f64()).collect();
            for (t, &m) in frozen.indices[r].iter().enumerate() {
                let code = self.codebooks[t].value.row(m as usize);
                let first: f64 = frozen.residuals[r][t]
                    .iter()
                    .zip(code)
                    .map(|(a, c)| (a.as_f64() - c.as_f64()).powi(2))
                    .sum();
                let second: f64 = resid
                    .iter()
                    .zip(&frozen.codes[r][t])
                    .map(|(a, c)| (a - c.as_f64()).powi(2))
                    .sum();
                com += first + beta * second;
                for (ri, c) in resid.iter_mut().zip(code) {
                    *ri -= c.as_f64();
                }
            }
        }
        Ok(BatchLoss {
            rec: rec / b,
            com: com / b,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out.extend(self.codebooks.iter_mut());
        out
    }

    pub fn cast<U: Scalar>(&self) -> QuantizerModel<U> {
        QuantizerModel {
            config: self.config.clone(),
            input_dim: self.input_dim,
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            codebooks: self.codebooks.iter().map(Parameter::cast).collect(),
        }
    }
}

impl<T: Scalar> HasParameters<T> for QuantizerModel<T> {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.params_mut()
    }
}

struct BatchState<T> {
    enc: MlpCache<T>,
    dec: MlpCache<T>,
    quantized: Matrix<T>,
    indices: Vec<Vec<u32>>,
    residuals: Vec<Vec<Vec<T>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, Linear};

    fn config(levels: usize, k: usize, dq: usize, hidden: Vec<usize>) -> QuantizerConfig {
        QuantizerConfig {
            levels,
            codebook_size: k,
            code_dim: dq,
            hidden,
            ..Default::default()
        }
    }

    fn identity_model() -> QuantizerModel<f64> {
        let mut rng = Rng::new(0);
        let mut m = QuantizerModel::<f64>::new(2, config(1, 2, 2, vec![]), &mut rng).unwrap();
        let id = || Linear::from_parts("id", Matrix::identity(2), Matrix::zeros(1, 2));
        m.encoder = Mlp::from_layers(vec![id()], Activation::Relu, Activation::Identity).unwrap();
        m.decoder = Mlp::from_layers(vec![id()], Activation::Relu, Activation::Identity).unwrap();
        m.codebooks[0].value = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        m
    }

    #[test]
    fn nearest_code_and_residual() {
        let m = identity_model();
        let out = m.quantize_forward(&[0.9, 0.9]).unwrap();
        assert_eq!(out.indices, vec![1]);
        assert!((out.residuals[1][0] + 0.1).abs() < 1e-12);
        assert!((out.residuals[1][1] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn exact_code_leaves_zero_residual() {
        let m = identity_model();
        let out = m.quantize_forward(&[1.0, 1.0]).unwrap();
        assert!(out.residuals[1].iter().all(|&r| r == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let m = identity_model();
        assert!(matches!(
            m.quantize_forward(&[1.0, 2.0, 3.0]),
            Err(QuantizerError::Dimension { expected: 2, found: 3 })
        ));
    }

    fn random_model(levels: usize, k: usize, seed: u64) -> QuantizerModel<f64> {
        let mut rng = Rng::new(seed);
        let mut m = QuantizerModel::<f64>::new(6, config(levels, k, 4, vec![8]), &mut rng).unwrap();
        for cb in &mut m.codebooks {
            cb.value = Matrix::from_fn(k, 4, |_, _| rng.normal() * 0.5);
        }
        m
    }

    #[test]
    fn greedy_assignment_matches_brute_force_scan() {
        let m = random_model(3, 5, 1);
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let out = m.quantize_forward(&v).unwrap();
            // oracle: scan every code at each level explicitly
            let mut r = out.encoded.clone();
            for t in 0..3 {
                let cb = &m.codebooks[t].value;
                let mut best = (f64::INFINITY, 0usize);
                for k in 0..cb.rows() {
                    let d: f64 = r.iter().zip(cb.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                assert_eq!(out.indices[t] as usize, best.1);
                for (ri, c) in r.iter_mut().zip(cb.row(best.1)) {
                    *ri -= c;
                }
            }
            // residual telescoping: x = x̂ + r^{T+1}
            for d in 0..4 {
                let lhs = out.encoded[d];
                let rhs = out.quantized[d] + out.residuals[3][d];
                assert!((lhs - rhs).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn straight_through_gradient_matches_surrogate() {
        let mut m = random_model(2, 4, 3);
        let mut rng = Rng::new(4);
        let v = Matrix::from_fn(5, 6, |_, _| rng.normal());
        let frozen = m.freeze(&v).unwrap();
        m.loss_and_backward(&v).unwrap();
        let err = check_gradients(&mut m, 1e-6, |mm| mm.surrogate_loss(&v, &frozen).unwrap());
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn frozen_codebook_rec_gradient() {
        let mut m = random_model(2, 4, 5);
        let mut rng = Rng::new(6);
        let v = Matrix::from_fn(4, 6, |_, _| rng.normal());
        let frozen = m.freeze(&v).unwrap();
        let (loss, _) = m.backward_terms(&v, false).unwrap();
        let surrogate = m.surrogate_terms(&v, &frozen).unwrap();
        assert!((surrogate.rec - loss.rec).abs() < 1e-9);
        assert!((surrogate.com - loss.com).abs() < 1e-9);
        // only the encoder is perturbed; codebooks stay frozen
        let mut encoder_params: Vec<_> = m.encoder.params_mut().into_iter().map(|p| p.clone()).collect();
        let err = check_gradients(&mut encoder_params, 1e-6, |ps| {
            let mut mm = m.clone();
            for (dst, src) in mm.encoder.params_mut().into_iter().zip(ps) {
                dst.value = src.value.clone();
            }
            mm.surrogate_terms(&v, &frozen).unwrap().rec
        });
        assert!(err < 1e-4, "relative error {err}");
        assert!(m.codebooks.iter().all(|c| c.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn beta_zero_leaves_codebook_term_only() {
        let mut m = random_model(2, 3, 7);
        m.config.beta = 0.0;
        let mut rng = Rng::new(8);
        let v = Matrix::from_fn(3, 6, |_, _| rng.normal());
        let (loss, _) = m.evaluate(&v).unwrap();
        let mut expected_com = 0.0;
        let mut expected_rec = 0.0;
        for r in 0..3 {
            let out = m.quantize_forward(v.row(r)).unwrap();
            for t in 0..2 {
                let c = m.codebooks[t].value.row(out.indices[t] as usize);
                expected_com += out.residuals[t].iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            expected_rec += out.reconstruction.iter().zip(v.row(r)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        assert!((loss.com - expected_com / 3.0).abs() < 1e-9);
        assert!((loss.rec - expected_rec / 3.0).abs() < 1e-9);
        assert!((loss.total() - (loss.rec + loss.com)).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_gets_valid_assignment() {
        let m = random_model(3, 5, 9);
        let a = m.assign_incremental(1, &[0.0; 6]).unwrap();
        assert_eq!(a.indices.len(), 3);
        assert!(a.indices.iter().all(|&i| i < 5));
    }
}
