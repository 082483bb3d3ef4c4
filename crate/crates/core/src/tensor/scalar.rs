use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Numeric element type of a [`Tensor`](super::Tensor).
///
/// Implemented for `f32` and `f64`. Other implementors (such as a counting
/// wrapper used for cost verification) only need the arithmetic below; the
/// matrix kernel has a portable default that performs exactly `m * k * n`
/// scalar multiplications.
pub trait Scalar:
    Copy
    + Debug
    + Display
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn abs(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// Marks the end of a named stage of a computation. No-op for plain
    /// floats; instrumented scalars use it to attribute work to sub-ops.
    fn stage(_name: &str) {}

    /// `C = A·B` (or `C += A·B` when `accumulate`), with arbitrary strides.
    ///
    /// `A` is `m×k`, `B` is `k×n`, `C` is `m×n`; element `(i, j)` of a matrix
    /// with strides `(rs, cs)` lives at `i*rs + j*cs`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        (rsa, csa): (usize, usize),
        b: &[Self],
        (rsb, csb): (usize, usize),
        c: &mut [Self],
        (rsc, csc): (usize, usize),
        accumulate: bool,
    ) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                let slot = &mut c[i * rsc + j * csc];
                if accumulate {
                    *slot += acc;
                } else {
                    *slot = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn check_extent(
    m: usize,
    k: usize,
    n: usize,
    alen: usize,
    (rsa, csa): (usize, usize),
    blen: usize,
    (rsb, csb): (usize, usize),
    clen: usize,
    (rsc, csc): (usize, usize),
) {
    let last = |r: usize, c: usize, rs: usize, cs: usize| {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * rs + (c - 1) * cs + 1
        }
    };
    assert!(last(m, k, rsa, csa) <= alen, "gemm: A out of bounds");
    assert!(last(k, n, rsb, csb) <= blen, "gemm: B out of bounds");
    assert!(last(m, n, rsc, csc) <= clen, "gemm: C out of bounds");
}

macro_rules! float_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: (usize, usize),
                b: &[Self],
                sb: (usize, usize),
                c: &mut [Self],
                sc: (usize, usize),
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: extents checked above; the slices do not alias.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0 as isize,
                        sa.1 as isize,
                        b.as_ptr(),
                        sb.0 as isize,
                        sb.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.0 as isize,
                        sc.1 as isize,
                    );
                }
            }
        }
    };
}

float_scalar!(f32, "f32", matrixmultiply::sgemm);
float_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Floating-point precision selector for runs that are dispatched at runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision '{other}' (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}
