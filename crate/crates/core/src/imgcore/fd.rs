use super::Image;

/// Horizontal forward difference `x[i, j+1] - x[i, j]`; the last column is zero.
pub fn fd_h(x: &Image) -> Image {
    let (rows, cols) = x.dims();
    let mut out = Image::zeros(rows, cols);
    for r in 0..rows {
        let src = x.row(r);
        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for c in 0..cols.saturating_sub(1) {
            dst[c] = src[c + 1] - src[c];
        }
    }
    out
}

/// Vertical forward difference `x[i+1, j] - x[i, j]`; the last row is zero.
pub fn fd_v(x: &Image) -> Image {
    let (rows, cols) = x.dims();
    let mut out = Image::zeros(rows, cols);
    let src = x.data();
    let dst = out.data_mut();
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols {
            dst[r * cols + c] = src[(r + 1) * cols + c] - src[r * cols + c];
        }
    }
    out
}

/// Transpose of [`fd_h`] (a negative divergence along rows).
pub fn fd_h_adjoint(p: &Image) -> Image {
    let (rows, cols) = p.dims();
    let mut out = Image::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols.saturating_sub(1) {
            let v = p.get(r, c);
            let o = out.data_mut();
            o[r * cols + c + 1] += v;
            o[r * cols + c] -= v;
        }
    }
    out
}

/// Transpose of [`fd_v`].
pub fn fd_v_adjoint(p: &Image) -> Image {
    let (rows, cols) = p.dims();
    let mut out = Image::zeros(rows, cols);
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols {
            let v = p.get(r, c);
            let o = out.data_mut();
            o[(r + 1) * cols + c] += v;
            o[r * cols + c] -= v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_has_zero_differences() {
        let x = Image::filled(5, 7, 3.25);
        assert!(fd_h(&x).data().iter().all(|&v| v == 0.0));
        assert!(fd_v(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_stencils() {
        let x = Image::from_vec(1, 3, vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(fd_h(&x).data(), &[1.0, 2.0, 0.0]);
        let xt = Image::from_vec(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(fd_v(&xt).data(), &[1.0, 2.0, 0.0]);
    }

    #[test]
    fn single_column_is_boundary_only() {
        let x = Image::from_vec(4, 1, vec![1.0, -2.0, 5.0, 0.5]).unwrap();
        assert!(fd_h(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_difference_of_ramp_vanishes_inside() {
        let x = Image::from_fn(4, 9, |r, c| 0.5 * c as f64 + r as f64);
        let d2 = fd_h(&fd_h(&x));
        for r in 0..4 {
            for c in 0..9 - 2 {
                assert_eq!(d2.get(r, c), 0.0);
            }
        }
    }

    fn image_strategy() -> impl Strategy<Value = Image> {
        (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-8i32..8, r * c)
                .prop_map(move |v| Image::from_vec(r, c, v.into_iter().map(f64::from).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn vertical_is_transposed_horizontal(x in image_strategy()) {
            prop_assert_eq!(fd_v(&x), fd_h(&x.transpose()).transpose());
        }

        // integer-valued pixels keep every sum exact
        #[test]
        fn row_sums_telescope(x in image_strategy()) {
            let d = fd_h(&x);
            for r in 0..x.rows() {
                let s: f64 = d.row(r).iter().sum();
                prop_assert_eq!(s, x.get(r, x.cols() - 1) - x.get(r, 0));
            }
        }

        #[test]
        fn adjoints_match(x in image_strategy(), seed in 0u64..1000) {
            let mut rng = crate::imgcore::RngState::new(seed);
            let p = crate::imgcore::gaussian_field(x.rows(), x.cols(), &mut rng);
            let lhs = fd_h(&x).dot(&p);
            let rhs = x.dot(&fd_h_adjoint(&p));
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
            let lhs = fd_v(&x).dot(&p);
            let rhs = x.dot(&fd_v_adjoint(&p));
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
