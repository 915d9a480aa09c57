//! Shared oracles for the integration suites: central finite differences and
//! parameter flattening. Everything here is independent of the reverse-mode
//! implementation it checks.
#![allow(dead_code)] // each test target uses a different subset

use mixmas::tensor::Tensor;

/// Central-difference gradient of `f` w.r.t. every coordinate of `params`.
pub fn numeric_grad(
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    params: &[Vec<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Vec<f64>> = params.to_vec();
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let up = f(&work);
            work[p][i] = orig - h;
            let down = f(&work);
            work[p][i] = orig;
            grad[i] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Assert every analytic/numeric pair agrees to `tol`.
pub fn assert_grads_close(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: param count");
    for (pi, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        assert_eq!(a.len(), n.len(), "{what}: param {pi} length");
        for (ci, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
            let err = rel_err(av, nv);
            assert!(
                err < tol,
                "{what}: param {pi} coord {ci}: analytic {av} vs numeric {nv} (rel err {err:e})"
            );
        }
    }
}

/// Ordered (name, data) snapshot of a model's parameters.
pub struct ParamVec {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn extract_params(visit: impl FnOnce(&mut dyn FnMut(&str, &Tensor))) -> ParamVec {
    let mut names = Vec::new();
    let mut values = Vec::new();
    visit(&mut |name, t| {
        names.push(name.to_string());
        values.push(t.data().to_vec());
    });
    ParamVec { names, values }
}

pub fn inject_params(visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)), params: &[Vec<f64>]) {
    let mut idx = 0;
    visit_mut(&mut |_name, t: &mut Tensor| {
        t.data_mut().copy_from_slice(&params[idx]);
        idx += 1;
    });
}

/// All permutations of `0..n` in a deterministic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            prefix.push(v);
            rec(prefix, rest, out);
            prefix.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}
