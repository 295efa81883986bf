//! 2×2 max pooling with recorded switches, and unpooling by duplication.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argmax positions of a 2×2 max-pool: one flat index into the pre-pool
/// tensor per pooled element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSwitches {
    input_shape: Vec<usize>,
    indices: Vec<usize>,
}

impl PoolSwitches {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    t.expect_rank(4, what)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Non-overlapping 2×2 max pooling. Ties go to the first element in
/// row-major window order.
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, PoolSwitches)> {
    let (b, c, h, w) = dims4(input, "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "2x2 max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut indices = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                indices.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, oh, ow], out)?,
        PoolSwitches {
            input_shape: input.shape().to_vec(),
            indices,
        },
    ))
}

/// Routes each pooled gradient to its argmax position.
pub fn maxpool2_backward(switches: &PoolSwitches, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != switches.indices.len() {
        return Err(Error::Dimension(format!(
            "maxpool2 backward: grad shape {:?} does not match {} switches",
            grad_out.shape(),
            switches.indices.len()
        )));
    }
    let mut gx = Tensor::zeros(&switches.input_shape);
    let data = gx.data_mut();
    for (&idx, &g) in switches.indices.iter().zip(grad_out.data()) {
        data[idx] += g;
    }
    Ok(gx)
}

/// Copies every element into all four cells of its 2×2 output block.
pub fn unpool_duplicate_forward(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = dims4(input, "unpool")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; b * c * oh * ow];
    for (src, dst) in input.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// Sums each 2×2 block of the upstream gradient.
pub fn unpool_duplicate_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, oh, ow) = dims4(grad_out, "unpool backward")?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::Dimension(format!(
            "unpool backward needs even spatial dims, got {oh}x{ow}"
        )));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = vec![0.0; b * c * h * w];
    for (src, dst) in grad_out.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / 2) * w + j / 2] += src[i * ow + j];
            }
        }
    }
    Tensor::new(vec![b, c, h, w], gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::rand_normal;

    #[test]
    fn picks_bottom_right_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, sw) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(sw.indices(), &[3]);
    }

    #[test]
    fn ties_go_to_first_position() {
        let x = Tensor::full(&[1, 2, 4, 4], 0.7);
        let (y, sw) = maxpool2_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        for (k, &idx) in sw.indices().iter().enumerate() {
            let plane = k / 4;
            let (i, j) = ((k % 4) / 2, k % 2);
            assert_eq!(idx, plane * 16 + 2 * i * 4 + 2 * j);
        }
    }

    #[test]
    fn matches_window_scan() {
        let x = rand_normal(&mut Rng::new(1), &[1, 1, 4, 4], 0.0, 1.0).unwrap();
        let (y, _) = maxpool2_forward(&x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        m = m.max(x.get(&[0, 0, 2 * i + di, 2 * j + dj]).unwrap());
                    }
                }
                assert_eq!(y.get(&[0, 0, i, j]).unwrap(), m);
            }
        }
    }

    #[test]
    fn rejects_odd_dims() {
        assert!(matches!(
            maxpool2_forward(&Tensor::zeros(&[1, 1, 5, 4])),
            Err(Error::Dimension(_))
        ));
        assert!(unpool_duplicate_backward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn backward_routes_one_per_window() {
        let x = rand_normal(&mut Rng::new(2), &[2, 3, 6, 4], 0.0, 1.0).unwrap();
        let (y, sw) = maxpool2_forward(&x).unwrap();
        let gx = maxpool2_backward(&sw, &Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(gx.sum(), y.len() as f64);
        for plane in gx.data().chunks(24) {
            for i in 0..3 {
                for j in 0..2 {
                    let s: f64 = [0, 1, 4, 5]
                        .iter()
                        .map(|o| plane[2 * i * 4 + 2 * j + o])
                        .sum();
                    assert_eq!(s, 1.0);
                }
            }
        }
        let g = rand_normal(&mut Rng::new(3), y.shape(), 0.0, 1.0).unwrap();
        let gx = maxpool2_backward(&sw, &g).unwrap();
        assert!((gx.sum() - g.sum()).abs() < 1e-12);
    }

    #[test]
    fn duplicates_each_value() {
        let y = unpool_duplicate_forward(&Tensor::full(&[1, 1, 1, 1], 5.0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0; 4]);

        let c = Tensor::full(&[1, 2, 4, 6], 3.0);
        let (p, _) = maxpool2_forward(&c).unwrap();
        assert_eq!(unpool_duplicate_forward(&p).unwrap(), c);
    }

    #[test]
    fn unpool_backward_sums_blocks() {
        let g = unpool_duplicate_backward(&Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
        assert_eq!(g.data(), &[4.0; 4]);
        let r = rand_normal(&mut Rng::new(4), &[2, 2, 4, 6], 0.0, 1.0).unwrap();
        assert!((unpool_duplicate_backward(&r).unwrap().sum() - r.sum()).abs() < 1e-12);
    }

    #[test]
    fn unpool_adjoint_identity() {
        let mut rng = Rng::new(5);
        let x = rand_normal(&mut rng, &[2, 3, 3, 4], 0.0, 1.0).unwrap();
        let y = rand_normal(&mut rng, &[2, 3, 6, 8], 0.0, 1.0).unwrap();
        let lhs = unpool_duplicate_forward(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&unpool_duplicate_backward(&y).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
