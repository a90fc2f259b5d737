//! Central finite-difference gradient verification.
//!
//! The analytic gradients from [`Graph::backward`] are compared coordinate by
//! coordinate against (f(w+h) - f(w-h)) / 2h on 64-bit data. Used by the test
//! suites and the `selfcheck` command.

use super::{Fault, Graph, ParamSet, TensorResult, Var};

pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Optional deliberate defect, for verifying the check actually fails.
    pub fault: Option<Fault>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-4, tolerance: 1e-3, fault: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub max_rel_err: f64,
    pub coordinates_checked: usize,
    /// "param_name[i]" of the worst coordinate.
    pub worst: String,
}

impl GradCheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

impl GradCheck {
    /// Checks d(loss)/d(param) for every coordinate of every parameter in
    /// `params`. `build` must construct the same loss from the current
    /// parameter values each time it is called.
    pub fn run<F>(&self, params: &mut ParamSet, mut build: F) -> TensorResult<GradCheckOutcome>
    where
        F: FnMut(&mut Graph, &ParamSet) -> TensorResult<Var>,
    {
        params.zero_grads();
        let mut graph = Graph::new();
        if let Some(fault) = self.fault {
            graph.inject_fault(fault);
        }
        let loss = build(&mut graph, params)?;
        graph.backward(loss, params)?;

        let analytic: Vec<Vec<f64>> = (0..params.len())
            .map(|i| {
                params
                    .grad(super::ParamId(i))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|_| vec![0.0; params.get(super::ParamId(i)).value.len()])
            })
            .collect();

        let mut outcome = GradCheckOutcome {
            max_rel_err: 0.0,
            coordinates_checked: 0,
            worst: String::new(),
        };
        for pi in 0..params.len() {
            let id = super::ParamId(pi);
            for ci in 0..params.get(id).value.len() {
                let original = params.get(id).value.data()[ci];

                params.get_mut(id).value.data_mut()[ci] = original + self.h;
                let mut g = Graph::new();
                let loss = build(&mut g, params)?;
                let plus = g.value(loss).item();

                params.get_mut(id).value.data_mut()[ci] = original - self.h;
                let mut g = Graph::new();
                let loss = build(&mut g, params)?;
                let minus = g.value(loss).item();

                params.get_mut(id).value.data_mut()[ci] = original;

                let numeric = (plus - minus) / (2.0 * self.h);
                let a = analytic[pi][ci];
                // The 1e-6 floor keeps near-zero gradients from turning
                // finite-difference noise into spurious failures.
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                outcome.coordinates_checked += 1;
                if rel > outcome.max_rel_err {
                    outcome.max_rel_err = rel;
                    outcome.worst = format!("{}[{}]", params.get(id).name, ci);
                }
            }
        }
        params.zero_grads();
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn matmul_leaky_mean_passes() {
        let mut params = ParamSet::new();
        let w = params.add(
            "w",
            Tensor::new(&[2, 3], vec![0.5, -0.3, 0.8, 1.2, -0.9, 0.1]).unwrap(),
            false,
        );
        let check = GradCheck::default();
        let outcome = check
            .run(&mut params, |g, ps| {
                let wv = g.param(ps, w);
                let x = g.input(Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 0.7, -1.1, 0.2]).unwrap());
                let y = g.matmul(wv, x)?;
                let a = g.leaky_relu(y, 0.1);
                Ok(g.mean(a))
            })
            .unwrap();
        assert!(outcome.passed(1e-3), "max rel err {}", outcome.max_rel_err);
    }

    #[test]
    fn injected_fault_is_caught() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::new(&[4], vec![0.5, -0.3, 0.8, -1.2]).unwrap(), false);
        let check = GradCheck {
            fault: Some(Fault::LeakyReluBackwardSlopeSign),
            ..GradCheck::default()
        };
        let outcome = check
            .run(&mut params, |g, ps| {
                let wv = g.param(ps, w);
                let a = g.leaky_relu(wv, 0.1);
                let sq = g.mul(a, a)?;
                Ok(g.sum(sq))
            })
            .unwrap();
        assert!(!outcome.passed(1e-3));
    }
}
