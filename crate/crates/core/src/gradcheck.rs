//! Central finite-difference checks for every analytic gradient in the
//! crate: the loss functions (through the softmax) and each autodiff op.
//!
//! All checks run in `f64`. A check samples random instances, compares a
//! handful of coordinates per instance and reports the worst relative
//! error `|a - n| / max(|a|, |n|, REL_FLOOR)`.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::fcm::MembershipMatrix;
use crate::loss::{self, LabelField, LossConfig, LossKind, MembershipSource};
use crate::matrix::ClassMatrix;
use crate::nn::{Graph, ParamStore, Padding, Tensor, Var};
use crate::seed;

/// Pass threshold on the maximum relative error.
pub const MAX_REL_ERR: f64 = 1e-4;

/// Magnitudes below this are compared on an absolute scale of this size.
pub const REL_FLOOR: f64 = 1e-4;

/// Coordinates compared per instance and per differentiated tensor.
const COORDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub mode: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h e_k) - f(x - h e_k)) / 2h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[k] += h;
    let fp = f(&xp);
    xp[k] = x[k] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect()
}

fn coords(rng: &mut impl Rng, len: usize) -> Vec<usize> {
    sample(rng, len, COORDS.min(len)).into_vec()
}

fn random_labels(rng: &mut impl Rng, c: usize, n: usize) -> LabelField {
    let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    LabelField::from_labels(&l, c).expect("labels in range")
}

fn random_memberships(rng: &mut impl Rng, c: usize, n: usize) -> MembershipMatrix {
    let mut m = ClassMatrix::zeros(c, n);
    for j in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (i, r) in raw.iter().enumerate() {
            m.set(i, j, r / s);
        }
    }
    MembershipMatrix(m)
}

fn loss_shape(rng: &mut impl Rng) -> (usize, usize) {
    let c = if rng.random_bool(0.5) { 2 } else { 4 };
    let n = if rng.random_bool(0.5) { 1 } else { 16 };
    (c, n)
}

/// Checks a logit gradient against differences of `value(softmax(z))`.
fn check_logit_gradient(
    mode: &str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut instance: impl FnMut(&mut ChaCha8Rng) -> Result<(ClassMatrix, Box<dyn Fn(&ClassMatrix) -> Result<f64>>, ClassMatrix)>,
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (z, value, analytic) = instance(rng)?;
        let (c, n) = (z.classes(), z.pixels());
        for k in coords(rng, c * n) {
            let numeric = central_difference(
                |x| value(&ClassMatrix::from_vec(c, n, x.to_vec()).expect("shape")).expect("finite"),
                z.as_slice(),
                k,
                1e-4,
            );
            worst = worst.max(relative_error(analytic.as_slice()[k], numeric));
        }
    }
    Ok(CheckReport { mode: mode.into(), instances, max_rel_err: worst })
}

fn fcce_mode(source: Option<MembershipSource>, instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let name = match source {
        None => "cce".to_string(),
        Some(s) => format!("fcce_{s}"),
    };
    check_logit_gradient(&name, instances, rng, move |rng| {
        let (c, n) = loss_shape(rng);
        let z = ClassMatrix::from_vec(c, n, normal_vec(rng, c * n, 1.5))?;
        let y = random_labels(rng, c, n);
        let u = random_memberships(rng, c, n);
        let cfg = match source {
            None => LossConfig::cce(),
            Some(s) => LossConfig {
                kind: LossKind::Fcce,
                membership_source: s,
                blend_beta: rng.random_range(0.1..0.9),
                lambda: rng.random_range(0.1..2.0),
                epsilon: loss::LOG_EPSILON,
            },
        };
        let p = loss::softmax(&z)?;
        let analytic = loss::fcce_grad_logits(&y, &p, Some(&u), &cfg)?;
        let value = Box::new(move |zz: &ClassMatrix| loss::fcce(&y, &loss::softmax(zz)?, Some(&u), &cfg));
        Ok((z, value as Box<dyn Fn(&ClassMatrix) -> Result<f64>>, analytic))
    })
}

fn deep_supervision_mode(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    check_logit_gradient("deep_supervision", instances, rng, |rng| {
        let (c, n) = loss_shape(rng);
        let z = ClassMatrix::from_vec(c, n, normal_vec(rng, c * n, 1.5))?;
        let y = random_labels(rng, c, n);
        let p = loss::softmax(&z)?;
        let analytic = loss::deep_supervision_grad_logits(&y, &p)?;
        let value = Box::new(move |zz: &ClassMatrix| loss::deep_supervision_loss(&y, &loss::softmax(zz)?));
        Ok((z, value as Box<dyn Fn(&ClassMatrix) -> Result<f64>>, analytic))
    })
}

fn fuzzy_entropy_mode(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (c, n) = loss_shape(rng);
        let u: Vec<f64> = (0..c * n).map(|_| rng.random_range(0.01..0.99)).collect();
        let m = ClassMatrix::from_vec(c, n, u.clone())?;
        let analytic = loss::fuzzy_entropy_grad(&m)?;
        for k in coords(rng, c * n) {
            let numeric = central_difference(
                |x| loss::fuzzy_entropy(&ClassMatrix::from_vec(c, n, x.to_vec()).expect("shape")).expect("in range"),
                &u,
                k,
                1e-5,
            );
            worst = worst.max(relative_error(analytic.as_slice()[k], numeric));
        }
    }
    Ok(CheckReport { mode: "fuzzy_entropy".into(), instances, max_rel_err: worst })
}

/// A graph-level check: `build` receives one variable per input tensor and
/// returns a scalar. Every input is differentiated.
pub fn check_graph(
    inputs: &[Tensor<f64>],
    h: f64,
    rng: &mut impl Rng,
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root, &mut ParamStore::new())?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &vars).expect("forward succeeded once");
        g.value(root).data()[0]
    };

    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for k in coords(rng, t.numel()) {
            let numeric = central_difference(
                |x| {
                    let mut ins = inputs.to_vec();
                    ins[ti] = Tensor::new(t.shape(), x.to_vec()).expect("shape");
                    eval(&ins)
                },
                t.data(),
                k,
                h,
            );
            worst = worst.max(relative_error(analytic[ti][k], numeric));
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::new(shape, normal_vec(rng, shape.iter().product(), scale)).expect("shape")
}

/// `sum(weights * x)` with fixed random weights, so every output entry
/// carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, x: Var, weight_seed: u64) -> Result<Var> {
    let mut rng = seed::rng(weight_seed, &[]);
    let w = rand_tensor(&mut rng, g.shape(x), 1.0);
    let wv = g.input(w);
    let prod = g.mul(x, wv)?;
    Ok(g.sum(prod))
}

type OpCase = (Vec<Tensor<f64>>, f64, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn op_mode(
    mode: &str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng, u64) -> OpCase,
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let ws: u64 = rng.random();
        let (inputs, h, build) = make(rng, ws);
        worst = worst.max(check_graph(&inputs, h, rng, build.as_ref())?);
    }
    Ok(CheckReport { mode: mode.into(), instances, max_rel_err: worst })
}

fn small_dims(rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    (rng.random_range(1..=2), rng.random_range(1..=3), 2 * rng.random_range(2..=3), 2 * rng.random_range(2..=3))
}

/// Upper bound on how far one unit step in any conv input moves a
/// pre-activation.
fn reach(conv: &[Tensor<f64>]) -> f64 {
    conv.iter().flat_map(|t| t.data()).fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Smallest distance of the conv pre-activations to a ReLU kink or to a
/// tie between the two largest positive entries of a pooling window.
fn kink_margin(conv: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let v: Vec<Var> = conv.iter().map(|t| g.input(t.clone())).collect();
    let pre = g.conv2d(v[0], v[1], Some(v[2]), Padding::Same).expect("valid shapes");
    let t = g.value(pre);
    let (b, c, h, w) = t.dims4().expect("4-d");
    let mut margin = t.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    for plane in t.data().chunks(h * w).take(b * c) {
        for i in (0..h).step_by(2) {
            for j in (0..w).step_by(2) {
                let mut win = [plane[i * w + j], plane[i * w + j + 1], plane[(i + 1) * w + j], plane[(i + 1) * w + j + 1]];
                win.sort_by(|a, b| b.total_cmp(a));
                if win[0] > 0.0 {
                    margin = margin.min(win[0] - win[1].max(0.0));
                }
            }
        }
    }
    margin
}

/// Runs every check with `instances` random instances each.
pub fn run_suite(instances: usize, seed_value: u64) -> Result<Vec<CheckReport>> {
    let mut rng = seed::rng(seed_value, &[]);
    let r = &mut rng;
    let mut out = vec![
        fcce_mode(None, instances, r)?,
        fuzzy_entropy_mode(instances, r)?,
        fcce_mode(Some(MembershipSource::FcmFixed), instances, r)?,
        fcce_mode(Some(MembershipSource::Prediction), instances, r)?,
        fcce_mode(Some(MembershipSource::Blend), instances, r)?,
        deep_supervision_mode(instances, r)?,
    ];

    for (name, padding) in [("conv2d_same", Padding::Same), ("conv2d_valid", Padding::Valid)] {
        out.push(op_mode(name, instances, r, move |rng, ws| {
            let (b, cin, h, w) = small_dims(rng);
            let cout = rng.random_range(1..=3);
            let ins = vec![
                rand_tensor(rng, &[b, cin, h, w], 1.0),
                rand_tensor(rng, &[cout, cin, 3, 3], 0.5),
                rand_tensor(rng, &[cout], 0.5),
            ];
            let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), padding)?;
                weighted_sum(g, y, ws)
            });
            (ins, 1e-5, build)
        })?);
    }

    out.push(op_mode("upconv2", instances, r, |rng, ws| {
        let (b, cin, h, w) = small_dims(rng);
        let cout = rng.random_range(1..=3);
        let ins = vec![
            rand_tensor(rng, &[b, cin, h / 2, w / 2], 1.0),
            rand_tensor(rng, &[cin, cout, 2, 2], 0.5),
            rand_tensor(rng, &[cout], 0.5),
        ];
        let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.upconv2(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, ws)
        });
        (ins, 1e-5, build)
    })?);

    out.push(op_mode("maxpool2", instances, r, |rng, ws| {
        let (b, c, h, w) = small_dims(rng);
        let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.maxpool2(v[0])?;
            weighted_sum(g, y, ws)
        });
        (vec![rand_tensor(rng, &[b, c, h, w], 1.0)], 1e-6, build)
    })?);

    out.push(op_mode("relu", instances, r, |rng, ws| {
        let (b, c, h, w) = small_dims(rng);
        let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, ws)
        });
        (vec![rand_tensor(rng, &[b, c, h, w], 1.0)], 1e-6, build)
    })?);

    out.push(op_mode("concat", instances, r, |rng, ws| {
        let (b, c, h, w) = small_dims(rng);
        let ins: Vec<Tensor<f64>> =
            [c, rng.random_range(1..=3), rng.random_range(1..=2)].iter().map(|&ck| rand_tensor(rng, &[b, ck, h, w], 1.0)).collect();
        let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.concat_all(v)?;
            weighted_sum(g, y, ws)
        });
        (ins, 1e-5, build)
    })?);

    out.push(op_mode("batchnorm_train", instances, r, |rng, ws| {
        let (b, c, h, w) = small_dims(rng);
        let ins = vec![
            rand_tensor(rng, &[b, c, h, w], 1.0),
            rand_tensor(rng, &[c], 1.0),
            rand_tensor(rng, &[c], 1.0),
        ];
        let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, ws)
        });
        (ins, 1e-5, build)
    })?);

    out.push(op_mode("batchnorm_eval", instances, r, |rng, ws| {
        let (b, c, h, w) = small_dims(rng);
        let mean = normal_vec(rng, c, 0.5);
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let ins = vec![
            rand_tensor(rng, &[b, c, h, w], 1.0),
            rand_tensor(rng, &[c], 1.0),
            rand_tensor(rng, &[c], 1.0),
        ];
        let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            weighted_sum(g, y, ws)
        });
        (ins, 1e-5, build)
    })?);

    out.push(op_mode("dropout", instances, r, |rng, ws| {
        let (b, c, h, w) = small_dims(rng);
        let rate = rng.random_range(0.1..0.6);
        let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let mut mask_rng = seed::rng(ws, &[1]);
            let y = g.dropout(v[0], rate, true, &mut mask_rng)?;
            weighted_sum(g, y, ws)
        });
        (vec![rand_tensor(rng, &[b, c, h, w], 1.0)], 1e-5, build)
    })?);

    out.push(op_mode("linear", instances, r, |rng, ws| {
        let (b, f, o) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=4));
        let ins = vec![rand_tensor(rng, &[b, f], 1.0), rand_tensor(rng, &[o, f], 1.0), rand_tensor(rng, &[o], 1.0)];
        let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, ws)
        });
        (ins, 1e-5, build)
    })?);

    // conv -> relu -> pool -> dense at h = 1e-3, resampled until no ReLU or
    // pooling decision can flip under a single perturbation
    out.push(op_mode("composite", instances, r, |rng, ws| {
        let h = 1e-3;
        let ins = loop {
            let (b, cin, hh, w) = small_dims(rng);
            let cmid = rng.random_range(1..=3);
            let feats = cmid * (hh / 2) * (w / 2);
            let ins = vec![
                rand_tensor(rng, &[b, cin, hh, w], 1.0),
                rand_tensor(rng, &[cmid, cin, 3, 3], 0.5),
                rand_tensor(rng, &[cmid], 0.5),
                rand_tensor(rng, &[2, feats], 0.5),
                rand_tensor(rng, &[2], 0.5),
            ];
            if kink_margin(&ins[..3]) > 4.0 * h * reach(&ins[..3]) {
                break ins;
            }
        };
        let build = Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), Padding::Same)?;
            let y = g.relu(y);
            let y = g.maxpool2(y)?;
            let y = g.flatten(y)?;
            let y = g.linear(y, v[3], Some(v[4]))?;
            weighted_sum(g, y, ws)
        });
        (ins, h, build)
    })?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let d = central_difference(|x| x[0].powi(3), &[2.0], 0, 1e-4);
        assert!((d - 12.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn small_suite_passes() {
        for report in run_suite(3, 11).unwrap() {
            assert!(report.passed(), "{report:?}");
        }
    }
}
