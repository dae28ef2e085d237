use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

#[derive(Clone, Copy)]
enum Layout {
    Plain,
    Transposed,
}

/// Logical (rows, cols, row stride, col stride) of a rank-2 operand.
fn view<T: Scalar>(t: &Tensor<T>, layout: Layout, op: &'static str) -> Result<(usize, usize, isize, isize)> {
    let (r, c) = t.dims2(op)?;
    Ok(match layout {
        Layout::Plain => (r, c, c as isize, 1),
        Layout::Transposed => (c, r, 1, c as isize),
    })
}

fn gemm<T: Scalar>(
    a: &Tensor<T>,
    la: Layout,
    b: &Tensor<T>,
    lb: Layout,
    beta: T,
    out: &mut Tensor<T>,
    op: &'static str,
) -> Result<()> {
    let (m, k, rsa, csa) = view(a, la, op)?;
    let (k2, n, rsb, csb) = view(b, lb, op)?;
    if k != k2 {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if out.shape() != [m, n] {
        return Err(Error::shape(op, out.shape(), &[m, n]));
    }
    // SAFETY: the strides above address exactly the m×k, k×n and m×n extents
    // of the three buffers, whose lengths were validated against their shapes.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// `a · b` for `a: m×n`, `b: n×p`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, _) = a.dims2("matmul")?;
    let (_, p) = b.dims2("matmul")?;
    let mut out = Tensor::zeros(&[m, p]);
    gemm(a, Layout::Plain, b, Layout::Plain, T::zero(), &mut out, "matmul")?;
    Ok(out)
}

/// `out += a · b`.
pub fn matmul_into<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) -> Result<()> {
    gemm(a, Layout::Plain, b, Layout::Plain, T::one(), out, "matmul_into")
}

/// `aᵀ · b`.
pub fn matmul_at_b<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, m) = a.dims2("matmul_at_b")?;
    let (_, p) = b.dims2("matmul_at_b")?;
    let mut out = Tensor::zeros(&[m, p]);
    gemm(
        a,
        Layout::Transposed,
        b,
        Layout::Plain,
        T::zero(),
        &mut out,
        "matmul_at_b",
    )?;
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_a_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, _) = a.dims2("matmul_a_bt")?;
    let (p, _) = b.dims2("matmul_a_bt")?;
    let mut out = Tensor::zeros(&[m, p]);
    gemm(
        a,
        Layout::Plain,
        b,
        Layout::Transposed,
        T::zero(),
        &mut out,
        "matmul_a_bt",
    )?;
    Ok(out)
}

/// Gradients of `c = a · b`: `(dc · bᵀ, aᵀ · dc)`.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dc: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_a_bt(dc, b)?, matmul_at_b(a, dc)?))
}
