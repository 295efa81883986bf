//! Fully-connected layer.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, rand_normal, Tensor};

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// `y = x·Wᵀ + b` with weights `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        weights.expect_rank(2, "dense weights")?;
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match weights {:?}",
                bias.shape(),
                weights.shape()
            )));
        }
        Ok(DenseLayer { weights, bias })
    }

    /// He-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        let weights = rand_normal(rng, &[outputs, inputs], 0.0, (2.0 / inputs as f64).sqrt())?;
        DenseLayer::new(weights, Tensor::zeros(&[outputs]))
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        input.expect_rank(2, "dense")?;
        if input.shape()[1] != self.inputs() {
            return Err(Error::Dimension(format!(
                "dense layer expects width {}, got shape {:?}",
                self.inputs(),
                input.shape()
            )));
        }
        Ok(input.shape()[0])
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let batch = self.check_input(input)?;
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let mut out = Vec::with_capacity(batch * n_out);
        for _ in 0..batch {
            out.extend_from_slice(self.bias.data());
        }
        gemm(batch, n_in, n_out, input.data(), false, self.weights.data(), true, &mut out, 1.0);
        Tensor::new(vec![batch, n_out], out)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
        let batch = self.check_input(input)?;
        let (n_in, n_out) = (self.inputs(), self.outputs());
        if grad_out.shape() != [batch, n_out] {
            return Err(Error::Dimension(format!(
                "dense backward: grad shape {:?}, expected {:?}",
                grad_out.shape(),
                [batch, n_out]
            )));
        }
        let mut gx = vec![0.0; batch * n_in];
        gemm(batch, n_out, n_in, grad_out.data(), false, self.weights.data(), false, &mut gx, 0.0);
        let mut gw = vec![0.0; n_out * n_in];
        gemm(n_out, batch, n_in, grad_out.data(), true, input.data(), false, &mut gw, 0.0);
        let mut gb = vec![0.0; n_out];
        for row in grad_out.data().chunks(n_out) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        Ok(DenseGrads {
            input: Tensor::new(vec![batch, n_in], gx)?,
            weights: Tensor::new(vec![n_out, n_in], gw)?,
            bias: Tensor::new(vec![n_out], gb)?,
        })
    }
}
