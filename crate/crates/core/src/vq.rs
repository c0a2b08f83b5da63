//! Vector-quantization bottleneck.
//!
//! Latent tensors are channel-last, `(n1, n2, n3, D)`; each length-`D`
//! fiber is replaced by the index of its nearest codebook entry.

use rand::Rng;

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

/// Largest codebook representable with `u16` indices.
pub const MAX_CODES: usize = 1 << 16;

/// Shared codebook of `L` codes of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    // (L, D): row l is code c_l.
    codes: Tensor,
}

impl Codebook {
    /// Codes given as rows of an `(L, D)` tensor.
    pub fn from_rows(codes: Tensor) -> Result<Self> {
        if codes.ndim() != 2 || codes.shape()[0] == 0 || codes.shape()[1] == 0 {
            return Err(Error::InvalidArgument(format!(
                "codebook must be a non-empty (L, D) matrix, got {:?}",
                codes.shape()
            )));
        }
        if codes.shape()[0] > MAX_CODES {
            return Err(Error::InvalidArgument(format!(
                "codebook size {} exceeds {MAX_CODES}",
                codes.shape()[0]
            )));
        }
        Ok(Self { codes })
    }

    /// Codebook from the `D x L` matrix whose columns are the codes.
    pub fn from_matrix(matrix: &Tensor) -> Result<Self> {
        if matrix.ndim() != 2 {
            return Err(Error::InvalidArgument("codebook matrix must be 2D".into()));
        }
        let [d, l] = [matrix.shape()[0], matrix.shape()[1]];
        let mut rows = Tensor::zeros(&[l, d]);
        for i in 0..d {
            for j in 0..l {
                rows.data_mut()[j * d + i] = matrix.data()[i * l + j];
            }
        }
        Self::from_rows(rows)
    }

    /// The `D x L` matrix whose columns are the codes.
    pub fn to_matrix(&self) -> Tensor {
        let (l, d) = (self.size(), self.dim());
        let mut m = Tensor::zeros(&[d, l]);
        for j in 0..l {
            for i in 0..d {
                m.data_mut()[i * l + j] = self.codes.data()[j * d + i];
            }
        }
        m
    }

    /// Entries i.i.d. uniform on `[-1/L, 1/L]`.
    pub fn init<R: Rng + ?Sized>(dim: usize, size: usize, rng: &mut R) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::InvalidArgument("codebook dimensions must be positive".into()));
        }
        let bound = 1.0 / size as f64;
        Self::from_rows(Tensor::uniform(&[size, dim], -bound, bound, rng))
    }

    pub fn size(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn code(&self, index: usize) -> &[f64] {
        let d = self.dim();
        &self.codes.data()[index * d..(index + 1) * d]
    }

    /// Codes as `(L, D)` rows; this is also the layout of codebook gradients.
    pub fn rows(&self) -> &Tensor {
        &self.codes
    }

    pub fn rows_mut(&mut self) -> &mut Tensor {
        &mut self.codes
    }
}

/// Code indices for every latent position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    shape: Vec<usize>,
    indices: Vec<u16>,
}

impl IndexGrid {
    pub fn new(shape: Vec<usize>, indices: Vec<u16>) -> Result<Self> {
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::InvalidArgument(format!(
                "{} indices do not fill shape {shape:?}",
                indices.len()
            )));
        }
        Ok(Self { shape, indices })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_fibers(e: &Tensor, cb: &Codebook) -> Result<()> {
    if e.ndim() == 0 || *e.shape().last().unwrap() != cb.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![cb.dim()],
            actual: e.shape().to_vec(),
        });
    }
    Ok(())
}

/// Nearest-code search per fiber; ties go to the lowest index.
pub fn quantize(e: &Tensor, cb: &Codebook) -> Result<IndexGrid> {
    check_fibers(e, cb)?;
    let d = cb.dim();
    let indices = e
        .data()
        .chunks(d)
        .map(|fiber| {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for l in 0..cb.size() {
                let dist = squared_distance(fiber, cb.code(l));
                if dist < best_dist {
                    best = l;
                    best_dist = dist;
                }
            }
            best as u16
        })
        .collect();
    IndexGrid::new(e.shape()[..e.ndim() - 1].to_vec(), indices)
}

/// Replaces each index by its code, giving a channel-last tensor.
pub fn dequantize(q: &IndexGrid, cb: &Codebook) -> Result<Tensor> {
    let d = cb.dim();
    let mut data = Vec::with_capacity(q.len() * d);
    for &i in q.indices() {
        let i = i as usize;
        if i >= cb.size() {
            return Err(Error::IndexOutOfRange {
                index: i,
                size: cb.size(),
            });
        }
        data.extend_from_slice(cb.code(i));
    }
    let mut shape = q.shape().to_vec();
    shape.push(d);
    Tensor::from_vec(&shape, data)
}

/// Gradient through quantize-then-dequantize, treated as the identity.
pub fn straight_through_backward(grad_wrt_e_tilde: &Tensor, e_shape: &[usize]) -> Result<Tensor> {
    ensure_shape(e_shape, grad_wrt_e_tilde.shape())?;
    Ok(grad_wrt_e_tilde.clone())
}

/// Codebook and commitment terms with their one-sided gradients.
#[derive(Debug, Clone)]
pub struct VqLoss {
    /// `sum ||sg(e) - c_q||^2`.
    pub codebook_loss: f64,
    /// `sum ||e - sg(c_q)||^2`.
    pub commitment_loss: f64,
    /// Gradient of the codebook term w.r.t. the `(L, D)` code rows.
    pub grad_codebook: Tensor,
    /// Gradient of the commitment term w.r.t. `e`.
    pub grad_e: Tensor,
}

/// Evaluates both VQ loss terms for assignment `q`, which the caller must
/// have obtained from `quantize(e, cb)`; other assignments are accepted but
/// then the terms no longer measure distance to the nearest code.
pub fn vq_loss_terms(e: &Tensor, cb: &Codebook, q: &IndexGrid) -> Result<VqLoss> {
    check_fibers(e, cb)?;
    ensure_shape(&e.shape()[..e.ndim() - 1], q.shape())?;
    let d = cb.dim();
    let mut grad_codebook = Tensor::zeros(cb.rows().shape());
    let mut grad_e = Tensor::zeros(e.shape());
    let mut loss = 0.0;
    for ((fiber, ge), &qi) in e
        .data()
        .chunks(d)
        .zip(grad_e.data_mut().chunks_mut(d))
        .zip(q.indices())
    {
        let qi = qi as usize;
        if qi >= cb.size() {
            return Err(Error::IndexOutOfRange {
                index: qi,
                size: cb.size(),
            });
        }
        let code = cb.code(qi);
        let gc = &mut grad_codebook.data_mut()[qi * d..(qi + 1) * d];
        for k in 0..d {
            let diff = fiber[k] - code[k];
            loss += diff * diff;
            ge[k] = 2.0 * diff;
            gc[k] -= 2.0 * diff;
        }
    }
    Ok(VqLoss {
        codebook_loss: loss,
        commitment_loss: loss,
        grad_codebook,
        grad_e,
    })
}

/// Fraction of the codebook referenced by at least one of the grids.
pub fn codebook_utilization<'a>(grids: impl IntoIterator<Item = &'a IndexGrid>, size: usize) -> f64 {
    let mut used = vec![false; size];
    for g in grids {
        for &i in g.indices() {
            if let Some(u) = used.get_mut(i as usize) {
                *u = true;
            }
        }
    }
    used.iter().filter(|&&u| u).count() as f64 / size as f64
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn book(rows: &[&[f64]]) -> Codebook {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::from_rows(Tensor::from_vec(&[rows.len(), d], data).unwrap()).unwrap()
    }

    #[test]
    fn exact_code_is_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::from_rows(Tensor::uniform(&[8, 4], -1.0, 1.0, &mut rng)).unwrap();
        let e = Tensor::from_vec(&[1, 1, 1, 4], cb.code(3).to_vec()).unwrap();
        assert_eq!(quantize(&e, &cb).unwrap().indices(), &[3]);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let cb = book(&[&[5.0, 5.0], &[4.0, 4.0], &[1.0, 0.0], &[9.0, 9.0], &[7.0, 7.0], &[-1.0, 0.0]]);
        let e = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(quantize(&e, &cb).unwrap().indices(), &[2]);
    }

    #[test]
    fn dequantize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = Codebook::from_rows(Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng)).unwrap();
        let q = IndexGrid::new(vec![2, 1, 2], vec![0; 4]).unwrap();
        let e = dequantize(&q, &cb).unwrap();
        assert_eq!(e.shape(), &[2, 1, 2, 3]);
        for fiber in e.data().chunks(3) {
            assert_eq!(fiber, cb.code(0));
        }
        let bad = IndexGrid::new(vec![1], vec![5]).unwrap();
        assert!(matches!(dequantize(&bad, &cb), Err(Error::IndexOutOfRange { index: 5, size: 5 })));
    }

    #[test]
    fn round_trip_on_codebook_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook::from_rows(Tensor::uniform(&[16, 4], -1.0, 1.0, &mut rng)).unwrap();
        let picks: Vec<usize> = (0..12).map(|_| rng.gen_range(0..16)).collect();
        let data = picks.iter().flat_map(|&i| cb.code(i).to_vec()).collect();
        let e = Tensor::from_vec(&[3, 2, 2, 4], data).unwrap();
        let q = quantize(&e, &cb).unwrap();
        assert_eq!(dequantize(&q, &cb).unwrap(), e);
    }

    #[test]
    fn matrix_layout_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = Codebook::init(3, 7, &mut rng).unwrap();
        let m = cb.to_matrix();
        assert_eq!(m.shape(), &[3, 7]);
        assert_eq!(m.get(&[2, 5]), cb.code(5)[2]);
        assert_eq!(Codebook::from_matrix(&m).unwrap(), cb);
        assert!(cb.rows().data().iter().all(|v| v.abs() <= 1.0 / 7.0));
    }

    #[test]
    fn loss_terms_single_fiber() {
        let cb = book(&[&[0.0, 0.0]]);
        let e = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let q = quantize(&e, &cb).unwrap();
        let l = vq_loss_terms(&e, &cb, &q).unwrap();
        assert_eq!(l.codebook_loss, 1.0);
        assert_eq!(l.commitment_loss, 1.0);
        assert_eq!(l.grad_codebook.data(), &[-2.0, 0.0]);
        assert_eq!(l.grad_e.data(), &[2.0, 0.0]);
    }

    #[test]
    fn loss_zero_on_codes() {
        let cb = book(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let e = Tensor::from_vec(&[2, 1, 1, 2], vec![3.0, -1.0, 1.0, 2.0]).unwrap();
        let q = quantize(&e, &cb).unwrap();
        let l = vq_loss_terms(&e, &cb, &q).unwrap();
        assert_eq!(l.codebook_loss, 0.0);
        assert!(l.grad_e.data().iter().chain(l.grad_codebook.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn straight_through_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Tensor::uniform(&[2, 2, 2, 3], -1.0, 1.0, &mut rng);
        let out = straight_through_backward(&g, &[2, 2, 2, 3]).unwrap();
        assert_eq!(out.data(), g.data());
        let z = straight_through_backward(&Tensor::zeros(&[1, 3]), &[1, 3]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(straight_through_backward(&g, &[2, 2, 3]).is_err());
    }

    #[test]
    fn utilization_counts_distinct_codes() {
        let a = IndexGrid::new(vec![3], vec![0, 0, 2]).unwrap();
        let b = IndexGrid::new(vec![2], vec![2, 3]).unwrap();
        assert_eq!(codebook_utilization([&a, &b], 8), 3.0 / 8.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cb = book(&[&[0.0, 0.0]]);
        assert!(quantize(&Tensor::zeros(&[2, 3]), &cb).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn far_codes_do_not_change_winners(seed in any::<u64>(), extra in 1usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cb = Codebook::from_rows(Tensor::uniform(&[6, 3], -1.0, 1.0, &mut rng)).unwrap();
                let e = Tensor::uniform(&[4, 2, 1, 3], -1.0, 1.0, &mut rng);
                let q = quantize(&e, &cb).unwrap();
                let mut rows = cb.rows().data().to_vec();
                rows.extend((0..extra * 3).map(|_| rand::Rng::gen_range(&mut rng, 100.0..200.0)));
                let bigger = Codebook::from_rows(Tensor::from_vec(&[6 + extra, 3], rows).unwrap()).unwrap();
                prop_assert_eq!(quantize(&e, &bigger).unwrap(), q);
            }

            #[test]
            fn codebook_step_decreases_distance(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cb = Codebook::from_rows(Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng)).unwrap();
                let e = Tensor::uniform(&[5, 1, 1, 3], -1.0, 1.0, &mut rng);
                let q = quantize(&e, &cb).unwrap();
                let before = vq_loss_terms(&e, &cb, &q).unwrap();
                prop_assert_eq!(before.codebook_loss, before.commitment_loss);
                if before.codebook_loss > 0.0 {
                    let mut stepped = cb.clone();
                    stepped.rows_mut().add_scaled(&before.grad_codebook, -1e-3).unwrap();
                    let after = vq_loss_terms(&e, &stepped, &q).unwrap();
                    prop_assert!(after.codebook_loss < before.codebook_loss);
                }
            }
        }
    }
}
