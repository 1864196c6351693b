//! Named-input evaluation, gradients and the central-difference oracle.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{AutodiffError, Tape, Tensor, Var};

/// Named input tensors for one evaluation.
pub type Bindings = BTreeMap<String, Tensor>;

/// Read access to bound inputs while building an expression.
///
/// Each input name maps to a single leaf per evaluation, however many times
/// it is read.
pub struct Scope<'t> {
    tape: &'t Tape,
    inputs: &'t Bindings,
    leaves: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t> Scope<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn input(&self, name: &str) -> Result<Var<'t>, AutodiffError> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(*v);
        }
        let value = self
            .inputs
            .get(name)
            .ok_or_else(|| AutodiffError::UnboundInput(name.to_string()))?;
        let var = self.tape.var(value.clone());
        self.leaves.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }
}

fn run<F, R>(inputs: &Bindings, f: &F, then: impl FnOnce(&Tape, &Scope<'_>, Var<'_>) -> Result<R, AutodiffError>) -> Result<R, AutodiffError>
where
    F: for<'t> Fn(&Scope<'t>) -> Result<Var<'t>, AutodiffError>,
{
    let tape = Tape::new();
    let scope = Scope {
        tape: &tape,
        inputs,
        leaves: RefCell::new(BTreeMap::new()),
    };
    let out = f(&scope)?;
    then(&tape, &scope, out)
}

/// Forward value of `f` at `inputs`.
pub fn evaluate<F>(f: F, inputs: &Bindings) -> Result<Tensor, AutodiffError>
where
    F: for<'t> Fn(&Scope<'t>) -> Result<Var<'t>, AutodiffError>,
{
    run(inputs, &f, |_, _, out| Ok(out.value()))
}

/// Reverse-mode gradient of scalar `f` with respect to each name in `wrt`.
///
/// A bound input the expression never reads gets a zero gradient.
pub fn grad<F>(f: F, inputs: &Bindings, wrt: &[&str]) -> Result<Bindings, AutodiffError>
where
    F: for<'t> Fn(&Scope<'t>) -> Result<Var<'t>, AutodiffError>,
{
    for name in wrt {
        if !inputs.contains_key(*name) {
            return Err(AutodiffError::UnboundInput(name.to_string()));
        }
    }
    run(inputs, &f, |tape, scope, out| {
        let grads = tape.backward(out)?;
        let leaves = scope.leaves.borrow();
        Ok(wrt
            .iter()
            .map(|name| {
                let g = match leaves.get(*name) {
                    Some(v) => grads.wrt(*v),
                    None => Tensor::zeros(inputs[*name].shape()),
                };
                (name.to_string(), g)
            })
            .collect())
    })
}

/// Central differences `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time.
pub fn finite_difference<F>(
    f: F,
    inputs: &Bindings,
    wrt: &[&str],
    h: f64,
) -> Result<Bindings, AutodiffError>
where
    F: for<'t> Fn(&Scope<'t>) -> Result<Var<'t>, AutodiffError>,
{
    if !(h > 0.0) {
        return Err(AutodiffError::BadStep(h));
    }
    let scalar_at = |bindings: &Bindings| -> Result<f64, AutodiffError> {
        let v = evaluate(&f, bindings)?;
        v.item()
            .ok_or_else(|| AutodiffError::NonScalarLoss(v.shape().to_vec()))
    };
    scalar_at(inputs)?;

    let mut out = Bindings::new();
    for name in wrt {
        let base = inputs
            .get(*name)
            .ok_or_else(|| AutodiffError::UnboundInput(name.to_string()))?;
        let mut g = Tensor::zeros(base.shape());
        let mut probe = inputs.clone();
        for i in 0..base.len() {
            let x = base.data()[i];
            probe.get_mut(*name).unwrap().data_mut()[i] = x + h;
            let up = scalar_at(&probe)?;
            probe.get_mut(*name).unwrap().data_mut()[i] = x - h;
            let down = scalar_at(&probe)?;
            probe.get_mut(*name).unwrap().data_mut()[i] = x;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.insert(name.to_string(), g);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn evaluate_square() {
        let inputs = bind(&[("x", Tensor::scalar(3.0))]);
        let v = evaluate(|s| { let x = s.input("x")?; x.mul(x) }, &inputs).unwrap();
        assert_eq!(v.item(), Some(9.0));
    }

    #[test]
    fn unbound_input_is_an_error() {
        let inputs = Bindings::new();
        let err = evaluate(|s| s.input("x"), &inputs).unwrap_err();
        assert_eq!(err, AutodiffError::UnboundInput("x".into()));
        let err = grad(|s| s.tape().var(Tensor::scalar(1.0)).exp().sum().add(s.tape().scalar(0.0)), &inputs, &["y"]).unwrap_err();
        assert_eq!(err, AutodiffError::UnboundInput("y".into()));
    }

    #[test]
    fn shape_mismatch_surfaces() {
        let inputs = bind(&[
            ("a", Tensor::vector(vec![1.0, 2.0])),
            ("b", Tensor::vector(vec![1.0, 2.0, 3.0])),
        ]);
        let err = evaluate(|s| s.input("a")?.add(s.input("b")?), &inputs).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
    }

    #[test]
    fn parameter_outside_graph_has_zero_gradient() {
        let inputs = bind(&[("x", Tensor::scalar(2.0)), ("w", Tensor::vector(vec![1.0, 1.0]))]);
        let g = grad(|s| Ok(s.input("x")?.exp()), &inputs, &["x", "w"]).unwrap();
        assert_eq!(g["w"].data(), &[0.0, 0.0]);
        assert!((g["x"].item().unwrap() - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn grad_rejects_vector_output() {
        let inputs = bind(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let err = grad(|s| Ok(s.input("x")?.exp()), &inputs, &["x"]).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarLoss(_)));
    }

    #[test]
    fn finite_difference_quadratic() {
        let inputs = bind(&[("x", Tensor::scalar(3.0))]);
        let g = finite_difference(|s| { let x = s.input("x")?; x.mul(x) }, &inputs, &["x"], 1e-5).unwrap();
        assert!((g["x"].item().unwrap() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn finite_difference_exp_at_zero() {
        let inputs = bind(&[("x", Tensor::scalar(0.0))]);
        let g = finite_difference(|s| Ok(s.input("x")?.exp()), &inputs, &["x"], 1e-4).unwrap();
        // truncation error of the central difference is about h²/6
        assert!((g["x"].item().unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn finite_difference_constant_is_zero() {
        let inputs = bind(&[("x", Tensor::vector(vec![0.5, -0.5, 2.0]))]);
        let g = finite_difference(
            |s| {
                s.input("x")?;
                Ok(s.tape().scalar(4.0))
            },
            &inputs,
            &["x"],
            1e-5,
        )
        .unwrap();
        assert_eq!(g["x"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let inputs = bind(&[("x", Tensor::scalar(0.0))]);
        for h in [0.0, -1.0, f64::NAN] {
            assert!(finite_difference(|s| s.input("x"), &inputs, &["x"], h).is_err());
        }
    }
}
