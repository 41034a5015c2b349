use super::{Graph, Tensor, TensorError, Var};

/// Denominator floor for the elementwise relative error. Without it,
/// components whose true gradient is ~1e-12 would report pure rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares the tape gradient of `f` at `x` against central differences
/// `(f(x+h) - f(x-h)) / 2h`, elementwise.
///
/// The relative error of a component is
/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument(
            "step h must be positive".into(),
        ));
    }
    let eval = |point: &Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.leaf(point.clone(), true);
        let out = f(&mut g, v)?;
        let value = g
            .value(out)
            .item()
            .ok_or_else(|| TensorError::NonScalarLoss(g.value(out).shape().to_vec()))?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TensorError::NonFinite("finite_diff_check"))
        }
    };

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    let analytic = g.backward(out, &[v])?.into_vec().remove(0);

    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn quadratic_form_matches() {
        // f(x) = x^T A x with a fixed non-symmetric A
        let a = Tensor::matrix(3, 3, vec![2.0, -1.0, 0.5, 0.3, 1.0, 0.0, -0.7, 0.2, 3.0]).unwrap();
        let x = Tensor::matrix(3, 1, vec![0.4, -1.2, 0.9]).unwrap();
        let report = finite_diff_check(
            |g, x| {
                let a = g.constant(a.clone());
                let ax = g.matmul(a, x)?;
                let xt = g.transpose(x)?;
                let q = g.matmul(xt, ax)?;
                g.sum(q)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let report =
            finite_diff_check(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &x, 1e-5).unwrap();
        assert_eq!(report.max_abs_error, 0.0);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_non_finite_objective() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let big = g.scale(x, 1e200)?;
                let sq = g.mul(big, big)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }

    /// Every registered op against central differences at random points.
    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        type Case = Box<dyn Fn(&mut Graph, Var) -> Result<Var, TensorError>>;
        let w = random(&[3, 4], &mut rng);
        let w2 = random(&[5, 3], &mut rng);
        let gain = random(&[3], &mut rng);
        let bias = random(&[3], &mut rng);
        let row = random(&[3], &mut rng);
        let fixed = vec![0.3, -0.2, 0.1];
        let weights = random(&[2, 3], &mut rng);
        let cases: Vec<(&str, Case)> = vec![
            (
                "matmul",
                Box::new(move |g, x| {
                    let w = g.constant(w.clone());
                    let y = g.matmul(x, w)?;
                    let y2 = g.mul(y, y)?;
                    g.sum(y2)
                }),
            ),
            (
                "matmul_nt",
                Box::new(move |g, x| {
                    let w2 = g.constant(w2.clone());
                    let y = g.matmul_nt(x, w2)?;
                    let y2 = g.mul(y, y)?;
                    g.sum(y2)
                }),
            ),
            (
                "softmax",
                Box::new({
                    let weights = weights.clone();
                    move |g, x| {
                        let y0 = g.softmax(x, 0)?;
                        let y1 = g.softmax(x, 1)?;
                        let y = g.add(y0, y1)?;
                        let w = g.constant(weights.clone());
                        let s = g.mul(y, w)?;
                        g.sum(s)
                    }
                }),
            ),
            (
                "layer_norm",
                Box::new({
                    let weights = weights.clone();
                    move |g, x| {
                        let gn = g.leaf(gain.clone(), true);
                        let b = g.leaf(bias.clone(), true);
                        let y = g.layer_norm(x, gn, b, 1e-5)?;
                        let w = g.constant(weights.clone());
                        let s = g.mul(y, w)?;
                        g.sum(s)
                    }
                }),
            ),
            (
                "gelu+add_row",
                Box::new(move |g, x| {
                    let r = g.constant(row.clone());
                    let y = g.add_row(x, r)?;
                    let y = g.gelu(y)?;
                    g.sum(y)
                }),
            ),
            (
                "cross_entropy",
                Box::new(|g, x| {
                    let flat = g.reshape(x, &[6])?;
                    g.cross_entropy(flat, 4)
                }),
            ),
            (
                "slices+concat",
                Box::new(|g, x| {
                    let a = g.slice_cols(x, 1, 2)?;
                    let b = g.slice_rows(x, 1, 1)?;
                    let bt = g.transpose(b)?;
                    let bt = g.slice_rows(bt, 0, 2)?;
                    let bt = g.transpose(bt)?;
                    let r0 = g.slice_rows(a, 0, 1)?;
                    let c = g.concat_cols(&[r0, bt])?;
                    let f = g.concat_flat(&[c, x])?;
                    let f2 = g.mul(f, f)?;
                    g.sum(f2)
                }),
            ),
            (
                "gather",
                Box::new(|g, x| {
                    let rows = g.gather_rows(x, &[1, 0, 1])?;
                    let sq = g.mul(rows, rows)?;
                    g.sum(sq)
                }),
            ),
            (
                "overwrite",
                Box::new(move |g, x| {
                    let y = g.overwrite_rows(x, &[(0, &fixed)])?;
                    let y = g.gelu(y)?;
                    let y2 = g.mul(y, y)?;
                    g.sum(y2)
                }),
            ),
        ];
        for (name, f) in cases {
            let x = random(&[2, 3], &mut rng);
            let report = finite_diff_check(|g, x| f(g, x), &x, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 3], &mut rng);
        let w = random(&[3, 3], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.matmul(xv, wv).unwrap();
            let y = g.softmax(y, 1).unwrap();
            let y = g.gelu(y).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s, &[xv, wv]).unwrap().into_vec()
        };
        assert_eq!(run(), run());
    }
}
