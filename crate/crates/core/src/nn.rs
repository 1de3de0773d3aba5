//! Dense ReLU networks over a flat parameter buffer.
//!
//! Weights are stored row-major as `[out, in]` followed by the `[out]` bias.
//! Activations are row-major `[batch, features]`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type usable by the networks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the shapes and strides must be in
    /// bounds of the corresponding pointer's allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("float conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Bounds-checked wrapper around [`Scalar::gemm_raw`] for non-negative strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: A out of bounds");
    assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: B out of bounds");
    assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: C out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above cover every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Location of one dense layer inside a flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Dense {
    pub fn param_count(&self) -> usize {
        self.input * self.output + self.output
    }

    pub fn end(&self) -> usize {
        self.bias + self.output
    }
}

/// Lays out a chain of dense layers starting at `offset`.
pub fn chain_layout(sizes: &[usize], offset: usize) -> Vec<Dense> {
    let mut at = offset;
    sizes
        .windows(2)
        .map(|w| {
            let d = Dense {
                input: w[0],
                output: w[1],
                weight: at,
                bias: at + w[0] * w[1],
            };
            at = d.end();
            d
        })
        .collect()
}

/// Forward pass through a ReLU chain with a linear last layer.
///
/// `acts[0]` must hold the input; on return `acts[l]` holds the output of
/// layer `l - 1` (post-activation for hidden layers).
pub fn mlp_forward<T: Scalar>(params: &[T], layers: &[Dense], batch: usize, acts: &mut Vec<Vec<T>>) {
    acts.truncate(1);
    for (li, d) in layers.iter().enumerate() {
        let mut out = vec![T::zero(); batch * d.output];
        let w = &params[d.weight..d.bias];
        let b = &params[d.bias..d.end()];
        for row in out.chunks_exact_mut(d.output) {
            row.copy_from_slice(b);
        }
        // out[batch, out] += x[batch, in] * W^T
        gemm(
            batch,
            d.input,
            d.output,
            T::one(),
            &acts[li],
            (d.input, 1),
            w,
            (1, d.input),
            T::one(),
            &mut out,
            (d.output, 1),
        );
        if li + 1 < layers.len() {
            for x in out.iter_mut() {
                if *x < T::zero() {
                    *x = T::zero();
                }
            }
        }
        acts.push(out);
    }
}

/// Accumulates parameter gradients of a chain given `d_out`, the gradient
/// with respect to the final linear output. `acts` comes from
/// [`mlp_forward`].
pub fn mlp_backward<T: Scalar>(
    params: &[T],
    layers: &[Dense],
    batch: usize,
    acts: &[Vec<T>],
    d_out: Vec<T>,
    grad: &mut [T],
) {
    let mut delta = d_out;
    for li in (0..layers.len()).rev() {
        let d = &layers[li];
        let input = &acts[li];
        // dW[out, in] += delta^T[out, batch] * x[batch, in]
        gemm(
            d.output,
            batch,
            d.input,
            T::one(),
            &delta,
            (1, d.output),
            input,
            (d.input, 1),
            T::one(),
            &mut grad[d.weight..d.bias],
            (d.input, 1),
        );
        let gb = &mut grad[d.bias..d.end()];
        for row in delta.chunks_exact(d.output) {
            for (g, &x) in gb.iter_mut().zip(row) {
                *g = *g + x;
            }
        }
        if li == 0 {
            break;
        }
        // dx[batch, in] = delta[batch, out] * W[out, in], masked by the ReLU
        let mut dx = vec![T::zero(); batch * d.input];
        gemm(
            batch,
            d.output,
            d.input,
            T::one(),
            &delta,
            (d.output, 1),
            &params[d.weight..d.bias],
            (d.input, 1),
            T::zero(),
            &mut dx,
            (d.input, 1),
        );
        for (g, &a) in dx.iter_mut().zip(input.iter()) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        delta = dx;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(params: &[f64], layers: &[Dense], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, d) in layers.iter().enumerate() {
            let mut out = vec![0.0; d.output];
            for o in 0..d.output {
                let mut acc = params[d.bias + o];
                for i in 0..d.input {
                    acc += params[d.weight + o * d.input + i] * h[i];
                }
                out[o] = if li + 1 < layers.len() { acc.max(0.0) } else { acc };
            }
            h = out;
        }
        h
    }

    #[test]
    fn layout_is_contiguous() {
        let l = chain_layout(&[20, 64, 64, 4], 7);
        assert_eq!(l[0].weight, 7);
        assert_eq!(l[1].weight, l[0].end());
        assert_eq!(l[2].end() - 7, 20 * 64 + 64 + 64 * 64 + 64 + 64 * 4 + 4);
    }

    #[test]
    fn batched_forward_matches_naive() {
        let layers = chain_layout(&[5, 7, 6, 3], 0);
        let n = layers.last().unwrap().end();
        let params: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let batch = 4;
        let x: Vec<f64> = (0..batch * 5).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut acts = vec![x.clone()];
        mlp_forward(&params, &layers, batch, &mut acts);
        for b in 0..batch {
            let want = naive_forward(&params, &layers, &x[b * 5..(b + 1) * 5]);
            for (o, w) in want.iter().enumerate() {
                assert!((acts[3][b * 3 + o] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let layers = chain_layout(&[3, 5, 4, 2], 0);
        let n = layers.last().unwrap().end();
        let params: Vec<f64> = (0..n).map(|i| ((i * 53 % 97) as f64 / 40.0) - 1.2).collect();
        let batch = 3;
        let x: Vec<f64> = (0..batch * 3).map(|i| (i as f64 * 0.7).cos()).collect();
        let weights = [0.3, -1.1];
        let loss = |p: &[f64]| {
            let mut acts = vec![x.clone()];
            mlp_forward(p, &layers, batch, &mut acts);
            acts[3]
                .chunks(2)
                .map(|r| r[0] * weights[0] + r[1] * weights[1])
                .sum::<f64>()
        };
        let mut acts = vec![x.clone()];
        mlp_forward(&params, &layers, batch, &mut acts);
        let d_out: Vec<f64> = (0..batch).flat_map(|_| weights).collect();
        let mut grad = vec![0.0; n];
        mlp_backward(&params, &layers, batch, &acts, d_out, &mut grad);
        for i in 0..n {
            let mut p = params.clone();
            p[i] += 1e-6;
            let up = loss(&p);
            p[i] -= 2e-6;
            let down = loss(&p);
            let fd = (up - down) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grad[i]);
        }
    }
}
