//! Finite-difference gradient oracle.
//!
//! The central-difference estimate is the correctness contract for the
//! reverse-mode tape: any composition of tape ops over store parameters must
//! agree with it.

use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of `f` with respect to every scalar element
/// of every parameter in `store`.
///
/// `f` must be deterministic: the baseline is evaluated twice and a mismatch
/// is reported as an oracle error. The store is restored to its original
/// values afterwards.
pub fn finite_diff_gradient<F, Func>(
    mut f: Func,
    store: &mut ParameterStore<F>,
    h: F,
) -> Result<BTreeMap<String, Tensor<F>>>
where
    F: Scalar,
    Func: FnMut(&ParameterStore<F>) -> Result<F>,
{
    if h <= F::zero() {
        return Err(Error::Contract {
            op: "finite_diff_gradient",
            reason: "step size h must be positive".into(),
        });
    }
    let base1 = f(store)?;
    let base2 = f(store)?;
    if base1 != base2 {
        return Err(Error::Oracle(format!(
            "objective is not deterministic: baseline evaluations differ ({base1} vs {base2})"
        )));
    }

    let two_h = F::from_f64(2.0) * h;
    let mut out = BTreeMap::new();
    for idx in 0..store.len() {
        let name = store.by_index(idx).name().to_string();
        let shape = store.by_index(idx).value().shape().to_vec();
        let original = store.by_index(idx).value().data().to_vec();
        let mut grad = vec![F::zero(); original.len()];

        for elem in 0..original.len() {
            let mut plus = original.clone();
            plus[elem] = plus[elem] + h;
            *store.value_mut(idx) = Tensor::new(shape.clone(), plus)?;
            let f_plus = f(store)?;

            let mut minus = original.clone();
            minus[elem] = minus[elem] - h;
            *store.value_mut(idx) = Tensor::new(shape.clone(), minus)?;
            let f_minus = f(store)?;

            grad[elem] = (f_plus - f_minus) / two_h;
        }
        *store.value_mut(idx) = Tensor::new(shape.clone(), original)?;
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}

/// Relative error between two gradient values, guarded for near-zero pairs.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale.max(1e-6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Graph;

    #[test]
    fn quadratic_gradient_at_three() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("p", Tensor::scalar(3.0)).unwrap();
        let grads = finite_diff_gradient(
            |s: &ParameterStore<f64>| {
                let v = s.get("p").unwrap().value().data()[0];
                Ok(v * v)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        let g = grads["p"].data()[0];
        assert!((g - 6.0).abs() < 1e-8, "{g}");
        // Store restored.
        assert_eq!(store.get("p").unwrap().value().data()[0], 3.0);
    }

    #[test]
    fn linear_function_is_exact_for_any_step() {
        let mut store = ParameterStore::<f64>::new();
        store
            .insert("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        for &h in &[1e-2, 1e-5, 1.0] {
            let grads = finite_diff_gradient(
                |s: &ParameterStore<f64>| {
                    let d = s.get("p").unwrap().value().data();
                    Ok(3.0 * d[0] - 7.0 * d[1])
                },
                &mut store,
                h,
            )
            .unwrap();
            assert!((grads["p"].data()[0] - 3.0).abs() < 1e-9);
            assert!((grads["p"].data()[1] + 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("p", Tensor::scalar(1.0)).unwrap();
        let mut counter = 0.0;
        let err = finite_diff_gradient(
            |_s: &ParameterStore<f64>| {
                counter += 1.0;
                Ok(counter)
            },
            &mut store,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    fn small_composition<'a>(
        s: &'a ParameterStore<f64>,
        x: &Tensor<f64>,
    ) -> Result<(f64, Graph<'a, f64>, super::super::tape::Var)> {
        let mut g = Graph::new(s);
        let xv = g.tape.leaf(x.clone());
        let w = g.param("w")?;
        let b = g.param("b")?;
        let y = g.tape.affine(xv, w, b)?;
        let act = g.tape.gelu(y);
        let loss = g.tape.sum_all(act);
        let v = g.tape.value(loss).data()[0];
        Ok((v, g, loss))
    }

    #[test]
    fn matches_tape_backward_on_small_composition() {
        let mut store = ParameterStore::<f64>::new();
        store
            .insert(
                "w",
                Tensor::new(vec![2, 2], vec![0.4, -0.3, 0.8, 0.1]).unwrap(),
            )
            .unwrap();
        store
            .insert("b", Tensor::new(vec![2], vec![0.05, -0.2]).unwrap())
            .unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.7, -1.3]).unwrap();

        let (_, graph, loss) = small_composition(&store, &x).unwrap();
        let param_grads = graph.backward(loss).unwrap();
        drop(graph);
        store.accumulate(&param_grads);

        let fd = finite_diff_gradient(
            |s: &ParameterStore<f64>| small_composition(s, &x).map(|(v, _, _)| v),
            &mut store,
            1e-5,
        )
        .unwrap();

        for name in ["w", "b"] {
            let ad = store.get(name).unwrap().grad().data();
            let oracle = fd[name].data();
            for (i, (&a, &o)) in ad.iter().zip(oracle.iter()).enumerate() {
                assert!(
                    relative_error(a, o) < 1e-7,
                    "{name}[{i}]: tape {a} vs oracle {o}"
                );
            }
        }
    }
}
