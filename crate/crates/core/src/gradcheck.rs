//! Central finite-difference gradient checking at 64-bit precision.
//!
//! Used by the unit tests of every differentiable block and by the acceptance
//! suite for the end-to-end loss. The builder closure reconstructs the graph
//! from scratch for every probe, so it must be a pure function of the inputs.

use ndarray::ArrayD;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Per input, at most this many coordinates are probed (sampled with a
    /// fixed seed when the input is larger).
    pub max_coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            max_coords_per_input: 24,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (input index, flat coordinate, analytic, finite-difference) of the
    /// worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely.
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Check the gradient of a scalar-valued graph with respect to every input.
///
/// `build` receives a fresh tape plus one leaf per entry of `inputs` and must
/// return a 0-d output.
pub fn check_gradients<B>(
    inputs: &[ArrayD<f64>],
    cfg: &GradCheckConfig,
    build: B,
) -> GradCheckReport
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |arrays: &[ArrayD<f64>]| -> (f64, Option<Vec<Option<ArrayD<f64>>>>, bool) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = build(&mut tape, &vars);
        assert!(
            tape.shape(root).is_empty(),
            "gradcheck: output must be 0-d, got {:?}",
            tape.shape(root)
        );
        let y = *tape.value(root).first().unwrap();
        (y, None, false)
    };

    // analytic gradients once
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = build(&mut tape, &vars);
    assert!(tape.shape(root).is_empty(), "gradcheck: output must be 0-d");
    let grads = tape.backward(root);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
        })
        .collect();
    drop(tape);

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };

    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_input {
            (0..n).collect()
        } else {
            (0..cfg.max_coords_per_input)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        for j in coords {
            let orig = work[i].as_slice().unwrap()[j];
            work[i].as_slice_mut().unwrap()[j] = orig + cfg.step;
            let (f_plus, _, _) = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig - cfg.step;
            let (f_minus, _, _) = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig;

            let fd = (f_plus - f_minus) / (2.0 * cfg.step);
            let an = analytic[i].as_slice().unwrap()[j];
            let err = rel_err(an, fd);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j, an, fd));
            }
        }
    }
    report
}
