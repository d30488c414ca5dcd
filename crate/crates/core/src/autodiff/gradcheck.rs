use super::{AdError, Tape, Tensor, Value};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error over the smooth coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose stencil straddles a kink (relu, min, abs).
    pub skipped_nonsmooth: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval<F, E>(f: &F, inputs: &[Tensor]) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Value<'t>]) -> Result<Value<'t>, E>,
{
    let tape = Tape::new();
    let vals: Vec<Value<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vals)?.item())
}

/// Checks the gradient of the scalar function `f` at `inputs` against
/// central differences with step `h`.
///
/// The relative error of a coordinate is `|ad - fd| / max(|ad|, |fd|, s)`
/// with `s = 1e-3` times the largest gradient entry, so coordinates with
/// negligible gradient are judged against the gradient's overall scale.
///
/// A coordinate is classed as non-smooth and skipped when it fails and its
/// forward and backward one-sided differences disagree by at least as much
/// as the failure itself. That is the signature of a kink inside the
/// stencil; a wrong derivative shows one-sided differences that agree with
/// each other but not with the reverse-mode value.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, &[Value<'t>]) -> Result<Value<'t>, E>,
    E: From<AdError>,
{
    let tape = Tape::new();
    let leaves: Vec<Value<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves)?;
    let f0 = out.item();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.wrt(l)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut one_sided_gap = Vec::with_capacity(inputs.len());
    for (k, t) in inputs.iter().enumerate() {
        let mut fd = vec![0.0; t.len()];
        let mut gap = vec![0.0; t.len()];
        for i in 0..t.len() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] = t.data()[i] + h;
            let fp = eval(&f, &shifted)?;
            shifted[k].data_mut()[i] = t.data()[i] - h;
            let fm = eval(&f, &shifted)?;
            fd[i] = (fp - fm) / (2.0 * h);
            gap[i] = ((fp - f0) / h - (f0 - fm) / h).abs();
        }
        numeric.push(fd);
        one_sided_gap.push(gap);
    }

    let scale = analytic
        .iter()
        .map(|a| a.max_abs())
        .chain(numeric.iter().flatten().map(|x| x.abs()))
        .fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_nonsmooth: 0,
        worst: None,
    };
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let (a, n) = (analytic[k].data()[i], numeric[k][i]);
            let diff = (a - n).abs();
            let rel = diff / a.abs().max(n.abs()).max(floor);
            if rel > 1e-7 && one_sided_gap[k][i] >= diff {
                report.skipped_nonsmooth += 1;
                continue;
            }
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((k, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_vec(2, 3, vec![0.1, -4.0, 2.5, 3.0, 0.0, 1.0]).unwrap();
        let r = grad_check(|_t, v: &[Value<'_>]| Ok::<_, AdError>(v[0].sum()), &[x], 1e-5).unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides x from the graph, so the reverse-mode gradient is 0
        let x = Tensor::column(vec![1.0, 2.0]);
        let r = grad_check(
            |_t, v: &[Value<'_>]| v[0].square().sum().add(&v[0].detach().square().sum()),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.skipped_nonsmooth, 0);
    }

    #[test]
    fn kink_is_skipped_not_failed() {
        let x = Tensor::column(vec![2e-6, 1.0]);
        let r = grad_check(|_t, v: &[Value<'_>]| Ok::<_, AdError>(v[0].abs().sum()), &[x], 1e-5).unwrap();
        assert_eq!(r.skipped_nonsmooth, 1);
        assert!(r.max_rel_error < 1e-9);
    }
}
