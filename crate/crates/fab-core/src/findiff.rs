//! Central finite-difference probes.
//!
//! This is the independent oracle the gradient tests compare the tape
//! against: it only re-evaluates closures and never touches the backward
//! pass.

use crate::tensor::Matrix;

/// Central difference of `eval` with respect to one flat parameter
/// coordinate of `target`, where `params_of` exposes the parameter matrices
/// in a stable order.
pub fn central_difference<T>(
    target: &mut T,
    params_of: impl Fn(&mut T) -> Vec<&mut Matrix>,
    flat_index: usize,
    h: f64,
    mut eval: impl FnMut(&mut T) -> f64,
) -> f64 {
    let orig = {
        let mut ps = params_of(target);
        *locate(&mut ps, flat_index)
    };
    {
        let mut ps = params_of(target);
        *locate(&mut ps, flat_index) = orig + h;
    }
    let fp = eval(target);
    {
        let mut ps = params_of(target);
        *locate(&mut ps, flat_index) = orig - h;
    }
    let fm = eval(target);
    {
        let mut ps = params_of(target);
        *locate(&mut ps, flat_index) = orig;
    }
    (fp - fm) / (2.0 * h)
}

fn locate<'a>(params: &'a mut [&mut Matrix], mut idx: usize) -> &'a mut f64 {
    for p in params.iter_mut() {
        if idx < p.len() {
            return &mut p.data_mut()[idx];
        }
        idx -= p.len();
    }
    panic!("flat index out of range");
}

pub fn flat_param_count(params: &[&Matrix]) -> usize {
    params.iter().map(|p| p.len()).sum()
}

/// Relative error with a floor so that near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_square() {
        struct S {
            w: Matrix,
        }
        let mut s = S {
            w: Matrix::scalar(3.0),
        };
        let d = central_difference(
            &mut s,
            |s| vec![&mut s.w],
            0,
            1e-5,
            |s| s.w.scalar_value() * s.w.scalar_value(),
        );
        assert!((d - 6.0).abs() < 1e-8);
    }
}
