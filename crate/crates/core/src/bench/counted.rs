//! A scalar that counts its own multiplications.

use std::cell::{Cell, RefCell};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::tensor::Scalar;

thread_local! {
    static MULS: Cell<u64> = const { Cell::new(0) };
    static STAGES: RefCell<Vec<(String, u64)>> = const { RefCell::new(Vec::new()) };
}

/// `f64` that increments a thread-local counter on every `*`.
///
/// Blocks call [`Scalar::stage`] after each sub-op; the multiplications since
/// the previous mark are attributed to that name.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

/// Clears the counter and the recorded stages on this thread.
pub fn reset() {
    MULS.with(|m| m.set(0));
    STAGES.with(|s| s.borrow_mut().clear());
}

/// Multiplications since the last stage mark or reset.
pub fn pending() -> u64 {
    MULS.with(|m| m.get())
}

/// Recorded `(stage, multiplications)` pairs, in order. Work after the last
/// mark is reported as `unattributed` when non-zero.
pub fn take_stages() -> Vec<(String, u64)> {
    let mut out = STAGES.with(|s| std::mem::take(&mut *s.borrow_mut()));
    let rest = MULS.with(|m| m.replace(0));
    if rest > 0 {
        out.push(("unattributed".to_string(), rest));
    }
    out
}

impl std::fmt::Display for Counted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Display::fmt(&self.0, f)
    }
}

impl Mul for Counted {
    type Output = Counted;
    fn mul(self, o: Counted) -> Counted {
        MULS.with(|m| m.set(m.get() + 1));
        Counted(self.0 * o.0)
    }
}

macro_rules! plain_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl $tr for Counted {
            type Output = Counted;
            fn $m(self, o: Counted) -> Counted {
                Counted(self.0 $op o.0)
            }
        }
    };
}
plain_op!(Add, add, +);
plain_op!(Sub, sub, -);
plain_op!(Div, div, /);

impl Neg for Counted {
    type Output = Counted;
    fn neg(self) -> Counted {
        Counted(-self.0)
    }
}

impl AddAssign for Counted {
    fn add_assign(&mut self, o: Counted) {
        self.0 += o.0;
    }
}

impl Sum for Counted {
    fn sum<I: Iterator<Item = Counted>>(iter: I) -> Counted {
        Counted(iter.map(|c| c.0).sum())
    }
}

impl Scalar for Counted {
    const NAME: &'static str = "counted";

    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn exp(self) -> Self {
        Counted(self.0.exp())
    }
    fn ln(self) -> Self {
        Counted(self.0.ln())
    }
    fn sqrt(self) -> Self {
        Counted(self.0.sqrt())
    }

    fn stage(name: &str) {
        let n = MULS.with(|m| m.replace(0));
        STAGES.with(|s| s.borrow_mut().push((name.to_string(), n)));
    }
}
