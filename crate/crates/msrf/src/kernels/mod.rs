//! Raw numeric kernels behind the tape operations.
//!
//! Each kernel is a pure function of its inputs. Backward kernels are
//! written in gather form (or scatter confined to one output plane per
//! task) so that parallel execution is bit-identical to serial execution.

pub mod conv;
pub mod dense;
pub mod pool;
pub mod resize;

/// Index range `[lo, hi)` of `j` (with `j < count`) such that
/// `0 <= j*stride + offset < limit`. Shared by the convolution kernels to
/// hoist all bounds checks out of the inner loops.
pub(crate) fn span(count: usize, stride: usize, offset: isize, limit: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 {
        ((-offset + s - 1) / s) as usize
    } else {
        0
    };
    let hi_excl = limit as isize - offset; // j*stride < hi_excl
    if hi_excl <= 0 {
        return (0, 0);
    }
    let hi = (((hi_excl - 1) / s) + 1) as usize;
    (lo.min(count), hi.min(count))
}
