//! Central finite-difference checks for tape gradients (f64 only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;

/// Gradient entries smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (tensor name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((name.to_string(), idx, analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

fn coords(n: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Checks `f` with respect to each input tensor.
///
/// `f` receives the bound input variables and returns a scalar. When
/// `limit` is set, at most that many coordinates per input are probed.
pub fn check_inputs<F>(inputs: &[(&str, Tensor<f64>)], limit: Option<usize>, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = grad;
                tape.leaf(t)
            })
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.data(loss)[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok((value, g))
    };
    let mut vals: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = eval(&vals, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for (ti, (name, _)) in inputs.iter().enumerate() {
        for idx in coords(vals[ti].numel(), limit, &mut rng) {
            let orig = vals[ti].data()[idx];
            vals[ti].data_mut()[idx] = orig + FD_EPS;
            let (plus, _) = eval(&vals, false)?;
            vals[ti].data_mut()[idx] = orig - FD_EPS;
            let (minus, _) = eval(&vals, false)?;
            vals[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            report.record(name, idx, analytic[ti][idx], numeric);
        }
    }
    Ok(report)
}

/// Checks `loss` with respect to every parameter in `store`.
pub fn check_params<F>(store: &mut ParamStore<f64>, limit: Option<usize>, seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?;
    store.zero_grads();
    store.accumulate_grads(&tape, &grads)?;
    let analytic: Vec<Vec<f64>> = store
        .entries()
        .iter()
        .map(|e| e.tensor.grad.clone().unwrap_or_else(|| vec![0.0; e.tensor.numel()]))
        .collect();
    store.zero_grads();
    let value = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        Ok(tape.data(l)[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for (pi, grad) in analytic.iter().enumerate() {
        let name = store.entries()[pi].name.clone();
        let n = store.entries()[pi].tensor.numel();
        for idx in coords(n, limit, &mut rng) {
            let orig = store.entries()[pi].tensor.data()[idx];
            store.entries_mut()[pi].tensor.data_mut()[idx] = orig + FD_EPS;
            let plus = value(store)?;
            store.entries_mut()[pi].tensor.data_mut()[idx] = orig - FD_EPS;
            let minus = value(store)?;
            store.entries_mut()[pi].tensor.data_mut()[idx] = orig;
            report.record(&name, idx, grad[idx], (plus - minus) / (2.0 * FD_EPS));
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[-scale, scale]` for check inputs.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches")
}

/// One named entry of the finite-difference suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

/// Tolerance for single primitive operations.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for the composed two-term training loss.
pub const COMPOSED_TOL: f64 = 1e-4;

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let n: usize = tape.shape(x).iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.weighted_sum(x, w)
}

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    use crate::tensor::ConvGeometry;
    vec![
        ("reshape", vec![vec![2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            project(t, y, 1)
        }),
        ("permute", vec![vec![2, 3, 4]], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            project(t, y, 2)
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 3)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 4)
        }),
        ("scale", vec![vec![5]], |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, 5)
        }),
        ("add_bias", vec![vec![2, 3, 4], vec![4]], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, 6)
        }),
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 7)
        }),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 5]], |t, v| {
            let y = t.bmm(v[0], v[1], false, false, 0.7)?;
            project(t, y, 8)
        }),
        ("bmm_transposed", vec![vec![2, 4, 3], vec![2, 5, 4]], |t, v| {
            let y = t.bmm(v[0], v[1], true, true, 1.3)?;
            project(t, y, 9)
        }),
        ("softmax", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 10)
        }),
        ("log_softmax", vec![vec![3, 5]], |t, v| {
            let y = t.log_softmax(v[0])?;
            project(t, y, 11)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 12)
        }),
        ("gelu", vec![vec![4, 5]], |t, v| {
            let y = t.gelu(v[0]);
            project(t, y, 13)
        }),
        (
            "conv2d_grouped",
            vec![vec![1, 5, 6, 4], vec![2, 18, 3], vec![6]],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::local(2))?;
                project(t, y, 14)
            },
        ),
        ("conv2d_strided", vec![vec![1, 6, 5, 2], vec![1, 18, 3]], |t, v| {
            let g = ConvGeometry {
                kernel: (3, 3),
                stride: (2, 1),
                padding: (1, 1),
                groups: 1,
            };
            let y = t.conv2d(v[0], v[1], None, g)?;
            project(t, y, 15)
        }),
        ("mean_axis", vec![vec![2, 3, 4]], |t, v| {
            let y = t.mean_axis(v[0], 1)?;
            project(t, y, 16)
        }),
        ("sum", vec![vec![2, 3]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        }),
        ("embedding", vec![vec![5, 3]], |t, v| {
            let y = t.embedding(v[0], &[4, 0, 4, 2])?;
            project(t, y, 17)
        }),
        ("cross_entropy", vec![vec![3, 5]], |t, v| {
            let y = crate::nn::cross_entropy(t, v[0], &[0, 4, 2])?;
            project(t, y, 18)
        }),
        ("ctc_loss", vec![vec![2, 6, 4]], |t, v| {
            let (y, _) = crate::ctc::ctc_loss_batch(t, v[0], &[vec![0, 1], vec![2, 2, 1]])?;
            project(t, y, 19)
        }),
        (
            "attention",
            vec![vec![2, 3, 8], vec![2, 4, 8], vec![2, 4, 8]],
            |t, v| {
                let (y, _) = crate::nn::multi_head_attention(t, v[0], v[1], v[2], 2)?;
                project(t, y, 20)
            },
        ),
    ]
}

/// Two-term training loss of a Nano model on a one-sample batch, checked
/// against every parameter tensor (`limit` coordinates each).
pub fn composed_loss_check(seed: u64, limit: Option<usize>) -> Result<GradCheckReport> {
    use crate::backbone::Variant;
    use crate::model::{ModelConfig, SvtrV2};
    use crate::train::{total_loss, Phase};
    let mut config = ModelConfig::new(Variant::Nano, 6);
    config.sgm = true;
    let (model, mut store) = SvtrV2::init::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    let image = random_tensor(&[1, 8, 16, 3], 1.0, &mut rng);
    let label = vec![vec![1, 4, 4]];
    check_params(&mut store, limit, seed, |tape, store| {
        let x = tape.constant(image.clone());
        Ok(total_loss(tape, &model, store, x, &label, Phase::B, 0.1, 1.0)?.total)
    })
}

/// Every primitive operation plus the composed loss.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, f) in primitive_cases() {
        let tensors: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(s, 1.0, &mut rng)).collect();
        let inputs: Vec<(&str, Tensor<f64>)> = tensors.into_iter().map(|t| (name, t)).collect();
        let report = check_inputs(&inputs, None, seed, f)?;
        out.push(SuiteEntry {
            name,
            tolerance: PRIMITIVE_TOL,
            report,
        });
    }
    out.push(SuiteEntry {
        name: "composed_loss",
        tolerance: COMPOSED_TOL,
        report: composed_loss_check(seed, Some(3))?,
    });
    Ok(out)
}
