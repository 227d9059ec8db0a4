//! Spectral normalization of a weight viewed as a `(rows, rest)` matrix.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Smallest singular value estimate that is still divided by.
const SIGMA_FLOOR: f64 = 1e-12;

fn matrix_dims<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize)> {
    let rows = *w
        .shape()
        .first()
        .ok_or_else(|| Error::shape("spectral_normalize", "rank", "scalar weight"))?;
    Ok((rows, w.numel() / rows.max(1)))
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x = *x / n);
    }
}

/// `W v` for `W` of shape `(rows, cols)`.
pub fn mat_vec<T: Scalar>(w: &[T], rows: usize, cols: usize, v: &[T]) -> Vec<T> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// `W^T u`.
pub fn mat_t_vec<T: Scalar>(w: &[T], rows: usize, cols: usize, u: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for (o, &a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a * u[r];
        }
    }
    out
}

/// Persistent left/right singular vector estimates of one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> SpectralState<T> {
    /// Starts from a given left vector; `v` follows from one half-iteration.
    pub fn new(w: &Tensor<T>, mut u: Vec<T>) -> Result<Self> {
        let (rows, cols) = matrix_dims(w)?;
        if u.len() != rows {
            return Err(Error::shape("spectral_normalize", "u", format!("{} vs {rows} rows", u.len())));
        }
        normalize(&mut u);
        let mut v = mat_t_vec(w.data(), rows, cols, &u);
        normalize(&mut v);
        Ok(SpectralState { u, v })
    }

    /// One power-iteration step: `v <- W^T u / |.|`, `u <- W v / |.|`.
    pub fn power_iteration(&mut self, w: &Tensor<T>) -> Result<()> {
        let (rows, cols) = self.check(w)?;
        let mut v = mat_t_vec(w.data(), rows, cols, &self.u);
        normalize(&mut v);
        let mut u = mat_vec(w.data(), rows, cols, &v);
        normalize(&mut u);
        self.u = u;
        self.v = v;
        Ok(())
    }

    /// `u^T W v`.
    pub fn sigma(&self, w: &Tensor<T>) -> Result<T> {
        let (rows, cols) = self.check(w)?;
        Ok(mat_vec(w.data(), rows, cols, &self.v)
            .iter()
            .zip(&self.u)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    fn check(&self, w: &Tensor<T>) -> Result<(usize, usize)> {
        let (rows, cols) = matrix_dims(w)?;
        if self.u.len() != rows || self.v.len() != cols {
            return Err(Error::shape(
                "spectral_normalize",
                "state",
                format!("vectors ({}, {}) for a {rows}x{cols} weight", self.u.len(), self.v.len()),
            ));
        }
        Ok((rows, cols))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `W / sigma` with `sigma = u^T W v` and `u`, `v` held fixed.
    pub fn spectral_normalize(self, state: &SpectralState<T>) -> Result<Var<'g, T>> {
        let w = self.value();
        let (rows, cols) = state.check(&w)?;
        let sigma = state.sigma(&w)?;
        let floored = sigma.abs() < T::of(SIGMA_FLOOR);
        let s = if floored { T::one() } else { sigma };
        let y = w.map(|x| x / s);
        let (u, v) = (state.u.clone(), state.v.clone());
        Ok(self.graph().push(
            "spectral_normalize",
            y,
            &[self],
            Box::new(move |g, _| {
                let mut out = g.map(|x| x / s);
                if !floored {
                    let gw: T = g.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
                    let k = gw / (s * s);
                    for r in 0..rows {
                        for c in 0..cols {
                            out.data_mut()[r * cols + c] -= k * u[r] * v[c];
                        }
                    }
                }
                vec![Some(out)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn diagonal_converges_to_top_value() {
        let w = Tensor::<f64>::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut st = SpectralState::new(&w, vec![0.6, 0.8]).unwrap();
        for _ in 0..50 {
            st.power_iteration(&w).unwrap();
        }
        assert!((st.sigma(&w).unwrap() - 3.0).abs() < 1e-6);
        let g = Graph::new();
        let n = g.constant(w).spectral_normalize(&st).unwrap().value();
        assert!((n.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_is_unchanged() {
        let (c, s) = (0.6f64, 0.8f64);
        let w = Tensor::new(vec![2, 2], vec![c, -s, s, c]).unwrap();
        let mut st = SpectralState::new(&w, vec![1.0, 0.3]).unwrap();
        st.power_iteration(&w).unwrap();
        assert!((st.sigma(&w).unwrap() - 1.0).abs() < 1e-12);
        let g = Graph::new();
        let n = g.constant(w.clone()).spectral_normalize(&st).unwrap().value();
        assert!(n.max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn zero_weight_passes_through() {
        let w = Tensor::<f64>::zeros(vec![2, 3, 1, 1]);
        let st = SpectralState::new(&w, vec![1.0, 0.0]).unwrap();
        let g = Graph::new();
        let n = g.variable(w).spectral_normalize(&st).unwrap();
        assert!(n.value().data().iter().all(|&x| x == 0.0));
        assert!(SpectralState::new(&Tensor::<f64>::zeros(vec![2, 3]), vec![1.0]).is_err());
    }
}
