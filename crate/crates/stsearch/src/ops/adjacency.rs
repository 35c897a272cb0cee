//! Graph matrices derived from a raw adjacency matrix.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Precomputed graph matrices: the raw adjacency `A`, the symmetrically
/// normalized `Â = D^{-1/2}(A + I)D^{-1/2}`, and the forward/backward
/// transition matrices `P_f = A / rowsum(A)`, `P_b = Aᵀ / rowsum(Aᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencySet<E: Element = f64> {
    a: Tensor<E>,
    a_hat: Tensor<E>,
    p_f: Tensor<E>,
    p_b: Tensor<E>,
}

impl<E: Element> AdjacencySet<E> {
    pub fn node_count(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn a(&self) -> &Tensor<E> {
        &self.a
    }

    pub fn a_hat(&self) -> &Tensor<E> {
        &self.a_hat
    }

    pub fn p_f(&self) -> &Tensor<E> {
        &self.p_f
    }

    pub fn p_b(&self) -> &Tensor<E> {
        &self.p_b
    }
}

/// Builds the full matrix set from a square, non-negative adjacency.
/// Rows with no outgoing weight map to zero rows in `P_f`/`P_b`.
pub fn build_adjacency_set<E: Element>(a: &Tensor<E>) -> Result<AdjacencySet<E>> {
    let sh = a.shape();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::Input(format!("adjacency must be square, got {sh:?}")));
    }
    let n = sh[0];
    for (i, &v) in a.data().iter().enumerate() {
        if !v.is_finite() || v < E::zero() {
            return Err(Error::Input(format!(
                "adjacency entry ({}, {}) is {v}, expected finite and non-negative",
                i / n,
                i % n
            )));
        }
    }

    // Ã = A + I, D = diag(rowsum(Ã)), Â = D^{-1/2} Ã D^{-1/2}
    let mut a_tilde = a.clone();
    for i in 0..n {
        let d = a_tilde.data_mut();
        d[i * n + i] = d[i * n + i] + E::one();
    }
    let deg: Vec<E> = (0..n)
        .map(|i| {
            a_tilde.data()[i * n..(i + 1) * n]
                .iter()
                .fold(E::zero(), |s, &v| s + v)
        })
        .collect();
    let mut a_hat = vec![E::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            a_hat[i * n + j] = a_tilde.data()[i * n + j] / (deg[i] * deg[j]).sqrt();
        }
    }

    let p_f = row_normalized(a.data(), n, false);
    let p_b = row_normalized(a.data(), n, true);

    Ok(AdjacencySet {
        a: a.clone(),
        a_hat: Tensor::new(vec![n, n], a_hat)?,
        p_f: Tensor::new(vec![n, n], p_f)?,
        p_b: Tensor::new(vec![n, n], p_b)?,
    })
}

fn row_normalized<E: Element>(a: &[E], n: usize, transpose: bool) -> Vec<E> {
    let at = |i: usize, j: usize| if transpose { a[j * n + i] } else { a[i * n + j] };
    let mut out = vec![E::zero(); n * n];
    for i in 0..n {
        let sum = (0..n).fold(E::zero(), |s, j| s + at(i, j));
        if sum > E::zero() {
            for j in 0..n {
                out[i * n + j] = at(i, j) / sum;
            }
        }
    }
    out
}

/// The three constant graph matrices registered on a tape for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AdjacencyVars {
    pub a_hat: Var,
    pub p_f: Var,
    pub p_b: Var,
}

impl AdjacencyVars {
    pub fn load<E: Element>(tape: &mut Tape<E>, adj: &AdjacencySet<E>) -> Self {
        AdjacencyVars {
            a_hat: tape.constant(adj.a_hat.clone()),
            p_f: tape.constant(adj.p_f.clone()),
            p_b: tape.constant(adj.p_b.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn symmetric_pair_normalizes_to_half() {
        let adj = build_adjacency_set(&t2(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        let expect = t2(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(adj.a_hat().max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn forward_transitions_row_normalize() {
        let adj = build_adjacency_set(&t2(&[vec![0.0, 2.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(adj.p_f(), &t2(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
    }

    #[test]
    fn isolated_nodes() {
        let adj = build_adjacency_set(&Tensor::zeros(vec![3, 3])).unwrap();
        let eye = t2(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert_eq!(adj.a_hat(), &eye);
        assert_eq!(adj.p_f(), &Tensor::zeros(vec![3, 3]));
        assert_eq!(adj.p_b(), &Tensor::zeros(vec![3, 3]));
    }

    #[test]
    fn rejects_negative_and_non_square() {
        assert!(build_adjacency_set(&t2(&[vec![0.0, -1.0], vec![1.0, 0.0]])).is_err());
        assert!(build_adjacency_set(&Tensor::<f64>::zeros(vec![2, 3])).is_err());
    }

    #[test]
    fn deterministic_rebuild() {
        let a = t2(&[vec![0.0, 0.3, 1.7], vec![0.0, 0.0, 2.0], vec![0.5, 0.0, 0.0]]);
        let first = build_adjacency_set(&a).unwrap();
        let second = build_adjacency_set(&a).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn symmetric_input_gives_symmetric_a_hat() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let w = rng.gen_range(0.0..2.0);
                a[i * n + j] = w;
                a[j * n + i] = w;
            }
        }
        let adj = build_adjacency_set(&Tensor::new(vec![n, n], a).unwrap()).unwrap();
        for i in 0..n {
            for j in 0..n {
                let d = (adj.a_hat().at2(i, j) - adj.a_hat().at2(j, i)).abs();
                assert!(d < 1e-12);
            }
        }
    }
}
