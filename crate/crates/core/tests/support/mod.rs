//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::cell::RefCell;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segnet::data::Mask;
use segnet::metrics::{confusion, evaluate_patient};
use segnet::gradcheck::{check_gradients, GradCheckReport, DEFAULT_STEP};
use segnet::layers::{batch_norm, concat_channels, conv2d, maxpool2x2, upsample2x, Mode, UNet, UNetSpec};
use segnet::loss::{bce_loss, dice_loss};
use segnet::tensor::{Graph, Tensor, Var};
use segnet::Result;

/// Random cases per differentiable operation.
pub const GRAD_CASES: usize = 20;
/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Values with `lo <= |v| < hi` and a random sign.
pub fn away_from_zero(rng: &mut impl Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let t = uniform(rng, dims, lo, hi);
    let signs: Vec<f64> = (0..t.numel())
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let data = t.data().iter().zip(&signs).map(|(v, s)| v * s).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Distinct values spaced far beyond the finite-difference step, so every
/// max-pool window has a unique winner under perturbation.
pub fn distinct(rng: &mut impl Rng, dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5 * n as f64 * 0.01).collect();
    data.shuffle(rng);
    Tensor::new(dims.to_vec(), data).unwrap()
}

pub fn binary(rng: &mut impl Rng, dims: &[usize], p: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// `sum(out * R)` with `R` drawn from a stream fixed by `seed` and the shape of
/// `out`, so repeated forward passes see the same weights.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let dims = g.value(out)?.dims().to_vec();
    let mut r = rng(seed ^ dims.iter().fold(0u64, |h, &d| h.wrapping_mul(31).wrapping_add(d as u64)));
    let weights = g.constant(uniform(&mut r, &dims, -1.0, 1.0))?;
    let prod = g.mul(out, weights)?;
    g.sum(prod, None)
}

/// Quadruple-loop stride-1 cross-correlation with "same" zero padding:
/// `pad_before = (k-1)/2`, the remaining padding after the image.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let [n, c, h, wd] = <[usize; 4]>::try_from(x.dims()).unwrap();
    let [o, c2, k, k2] = <[usize; 4]>::try_from(w.dims()).unwrap();
    assert_eq!((c, k), (c2, k2));
    let before = (k - 1) / 2;
    let at = |t: &Tensor<f64>, d: [usize; 4], i: [usize; 4]| {
        t.data()[((i[0] * d[1] + i[1]) * d[2] + i[2]) * d[3] + i[3]]
    };
    let mut out = vec![0.0; n * o * h * wd];
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - before as isize;
                                let sx = xx as isize + kx as isize - before as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += at(x, [n, c, h, wd], [bi, ic, sy as usize, sx as usize])
                                    * at(w, [o, c, k, k], [oc, ic, ky, kx]);
                            }
                        }
                    }
                    out[((bi * o + oc) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, h, wd], out).unwrap()
}

pub type GradCase = fn(&mut ChaCha8Rng, u64) -> Result<GradCheckReport>;

fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    check_gradients(&inputs, DEFAULT_STEP, f)
}

fn small_dims(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r.random_range(1..=2), r.random_range(1..=3), r.random_range(2..=4), r.random_range(2..=4)]
}

fn case_add(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    check(vec![uniform(r, &d, -1.0, 1.0), uniform(r, &d, -1.0, 1.0)], move |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, s)
    })
}

fn case_sub(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    check(vec![uniform(r, &d, -1.0, 1.0), uniform(r, &d, -1.0, 1.0)], move |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, s)
    })
}

fn case_mul(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    check(vec![uniform(r, &d, -1.0, 1.0), uniform(r, &d, -1.0, 1.0)], move |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, s)
    })
}

fn case_div(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    // The denominator is floored at a tiny positive value, so it stays positive.
    let d = small_dims(r);
    check(vec![uniform(r, &d, -1.0, 1.0), uniform(r, &d, 0.5, 2.0)], move |g, v| {
        let y = g.div(v[0], v[1])?;
        weighted_sum(g, y, s)
    })
}

fn case_unary(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    // neg, add_scalar and mul_scalar chained, with random constants.
    let d = small_dims(r);
    let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
    check(vec![uniform(r, &d, -1.0, 1.0)], move |g, v| {
        let y = g.neg(v[0])?;
        let y = g.add_scalar(y, a)?;
        let y = g.mul_scalar(y, b)?;
        weighted_sum(g, y, s)
    })
}

fn case_relu(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    check(vec![away_from_zero(r, &d, 0.05, 1.0)], move |g, v| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y, s)
    })
}

fn case_exp_log(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    check(vec![uniform(r, &d, -1.0, 1.0), uniform(r, &d, 0.2, 3.0)], move |g, v| {
        let a = g.exp(v[0])?;
        let b = g.log(v[1])?;
        let y = g.add(a, b)?;
        weighted_sum(g, y, s)
    })
}

fn case_clamp(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    // Values stay at least 0.05 away from either bound.
    let d = small_dims(r);
    let n: usize = d.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| match r.random_range(0..3) {
            0 => r.random_range(-1.0..-0.35),
            1 => r.random_range(-0.25..0.25),
            _ => r.random_range(0.35..1.0),
        })
        .collect();
    check(vec![Tensor::new(d, data)?], move |g, v| {
        let y = g.clamp(v[0], -0.3, 0.3)?;
        weighted_sum(g, y, s)
    })
}

fn case_channel(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    let c = d[1];
    check(
        vec![uniform(r, &d, -1.0, 1.0), uniform(r, &[c], -1.0, 1.0), uniform(r, &[c], -1.0, 1.0)],
        move |g, v| {
            let y = g.channel_mul(v[0], v[1])?;
            let y = g.channel_add(y, v[2])?;
            weighted_sum(g, y, s)
        },
    )
}

fn case_matmul(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let (m, k, n) = (r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=5));
    check(vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)], move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, s)
    })
}

fn case_reduce(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    let axes: &'static [usize] = [&[1usize][..], &[0, 2], &[3], &[0, 1, 2, 3]][r.random_range(0..4)];
    check(vec![uniform(r, &d, -1.0, 1.0)], move |g, v| {
        let a = g.sum(v[0], Some(axes))?;
        let b = g.mean(v[0], Some(axes))?;
        let y = g.add(a, b)?;
        weighted_sum(g, y, s)
    })
}

fn case_conv(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let k = [1, 2, 3][r.random_range(0..3)];
    let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=2));
    let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
    check(
        vec![
            uniform(r, &[n, c, h, w], -1.0, 1.0),
            uniform(r, &[o, c, k, k], -1.0, 1.0),
            uniform(r, &[o], -1.0, 1.0),
        ],
        move |g, v| {
            let y = conv2d(g, v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, s)
        },
    )
}

fn case_maxpool(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = vec![r.random_range(1..=2), r.random_range(1..=2), 2 * r.random_range(1..=3), 2 * r.random_range(1..=3)];
    check(vec![distinct(r, &d)], move |g, v| {
        let y = maxpool2x2(g, v[0])?;
        weighted_sum(g, y, s)
    })
}

fn case_upsample(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    check(vec![uniform(r, &d, -1.0, 1.0)], move |g, v| {
        let y = upsample2x(g, v[0])?;
        weighted_sum(g, y, s)
    })
}

fn case_concat(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let a = small_dims(r);
    let mut b = a.clone();
    b[1] = r.random_range(1..=3);
    check(vec![uniform(r, &a, -1.0, 1.0), uniform(r, &b, -1.0, 1.0)], move |g, v| {
        let y = concat_channels(g, v[0], v[1])?;
        weighted_sum(g, y, s)
    })
}

fn case_batch_norm_train(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = vec![r.random_range(1..=3), r.random_range(1..=3), r.random_range(2..=4), r.random_range(2..=4)];
    let c = d[1];
    check(
        vec![uniform(r, &d, -1.0, 1.0), uniform(r, &[c], 0.5, 1.5), uniform(r, &[c], -0.5, 0.5)],
        move |g, v| {
            let (y, _, _) = batch_norm(g, v[0], v[1], v[2], 1e-5, None)?;
            weighted_sum(g, y, s)
        },
    )
}

fn case_batch_norm_eval(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    let c = d[1];
    let mean = uniform(r, &[c], -0.5, 0.5).into_data();
    let var = uniform(r, &[c], 0.2, 2.0).into_data();
    check(
        vec![uniform(r, &d, -1.0, 1.0), uniform(r, &[c], 0.5, 1.5), uniform(r, &[c], -0.5, 0.5)],
        move |g, v| {
            let (y, _, _) = batch_norm(g, v[0], v[1], v[2], 1e-5, Some((&mean, &var)))?;
            weighted_sum(g, y, s)
        },
    )
}

fn case_sigmoid_head(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let d = small_dims(r);
    check(
        vec![uniform(r, &d, -2.0, 2.0), uniform(r, &[1, d[1], 1, 1], -1.0, 1.0), uniform(r, &[1], -0.5, 0.5)],
        move |g, v| {
            let logits = conv2d(g, v[0], v[1], Some(v[2]))?;
            let y = g.sigmoid(logits)?;
            weighted_sum(g, y, s)
        },
    )
}

fn case_bce(r: &mut ChaCha8Rng, _s: u64) -> Result<GradCheckReport> {
    let mut d = small_dims(r);
    d[1] = 1;
    let target = binary(r, &d, 0.4);
    check(vec![uniform(r, &d, -3.0, 3.0)], move |g, v| {
        let p = g.sigmoid(v[0])?;
        bce_loss(g, p, &target)
    })
}

fn case_dice(r: &mut ChaCha8Rng, _s: u64) -> Result<GradCheckReport> {
    let mut d = small_dims(r);
    d[1] = 1;
    let target = binary(r, &d, 0.4);
    check(vec![uniform(r, &d, -3.0, 3.0)], move |g, v| {
        let p = g.sigmoid(v[0])?;
        dice_loss(g, p, &target)
    })
}

fn case_unet(r: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    // Whole network, gradient with respect to its input.
    let spec = UNetSpec::new(1, 1, 2)?;
    let model = RefCell::new(UNet::<f64>::new(spec, s)?);
    let n = r.random_range(2..=3);
    check(vec![uniform(r, &[n, 1, 4, 4], -1.0, 1.0)], move |g, v| {
        let y = model.borrow_mut().forward(g, v[0], Mode::Train)?;
        weighted_sum(g, y, s)
    })
}

/// Every differentiable operation with its case generator.
pub const GRAD_SUITE: &[(&str, GradCase)] = &[
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("div", case_div),
    ("neg/affine", case_unary),
    ("relu", case_relu),
    ("exp/log", case_exp_log),
    ("clamp", case_clamp),
    ("channel broadcast", case_channel),
    ("matmul", case_matmul),
    ("sum/mean", case_reduce),
    ("conv2d", case_conv),
    ("maxpool", case_maxpool),
    ("upsample", case_upsample),
    ("concat", case_concat),
    ("batch norm (train)", case_batch_norm_train),
    ("batch norm (eval)", case_batch_norm_eval),
    ("sigmoid head", case_sigmoid_head),
    ("cross-entropy loss", case_bce),
    ("dice loss", case_dice),
    ("u-net", case_unet),
];

/// Worst report over `GRAD_CASES` seeded cases of one operation.
pub fn run_grad_cases(name: &str, case: GradCase) -> GradCheckReport {
    let mut worst: Option<GradCheckReport> = None;
    for i in 0..GRAD_CASES as u64 {
        let seed = 1000 + i;
        let mut r = rng(seed);
        let report = case(&mut r, seed).unwrap_or_else(|e| panic!("{name} case {i}: {e}"));
        assert!(report.checked > 0, "{name} case {i} checked nothing");
        if worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
            worst = Some(report);
        }
    }
    worst.expect("at least one case")
}

/// Phantom cohort split 8/2/2 (scaled to `n`) and stratified by T-stage.
pub fn phantom_splits(
    n: usize,
    dims: [usize; 3],
    seed: u64,
) -> (Vec<segnet::data::PatientRecord>, Vec<segnet::data::PatientRecord>, Vec<segnet::data::PatientRecord>) {
    use segnet::data::{generate_phantom_cohort, stratified_split, SplitFractions, SplitName};
    let cohort = generate_phantom_cohort(n, dims, seed).unwrap();
    let keys: Vec<_> = cohort.iter().map(|r| r.key()).collect();
    let fractions = SplitFractions::new(8.0 / 12.0, 2.0 / 12.0, 2.0 / 12.0).unwrap();
    let m = stratified_split(&keys, fractions, seed).unwrap();
    let pick = |s| m.select(s, &cohort).unwrap();
    (pick(SplitName::Train), pick(SplitName::Validation), pick(SplitName::Test))
}

/// Bit patterns of a float slice, for exact comparisons.
pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// Metric oracle: counts by direct enumeration of every voxel.

pub const SIDE: usize = 16;

struct Enumerated {
    tp: u64,
    fp: u64,
    fn_: u64,
    tn: u64,
}

fn enumerate(pred: &Mask, truth: &Mask) -> Enumerated {
    let mut e = Enumerated { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for z in 0..SIDE {
        for y in 0..SIDE {
            for x in 0..SIDE {
                match (pred.get(z, y, x) == 1, truth.get(z, y, x) == 1) {
                    (true, true) => e.tp += 1,
                    (true, false) => e.fp += 1,
                    (false, true) => e.fn_ += 1,
                    (false, false) => e.tn += 1,
                }
            }
        }
    }
    e
}

fn frac(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn random_mask(r: &mut impl Rng, density: f64) -> Mask {
    let data = (0..SIDE * SIDE * SIDE).map(|_| u8::from(r.random_bool(density))).collect();
    Mask::new([SIDE; 3], data).unwrap()
}

/// Compare counts and metrics on `pairs` random 16^3 mask pairs; returns how
/// many pairs had the F1 identity defined.
pub fn check_metric_oracle(pairs: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut f1_checked = 0;
    for i in 0..pairs {
        // Densities from empty to full, so the undefined cases appear as well.
        let density = |r: &mut rand_chacha::ChaCha8Rng| match r.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            2 => 0.001,
            _ => r.random_range(0.0..1.0),
        };
        let (dp, dt) = (density(&mut r), density(&mut r));
        let pred = random_mask(&mut r, dp);
        let truth = random_mask(&mut r, dt);
        let e = enumerate(&pred, &truth);
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (e.tp, e.fp, e.fn_, e.tn), "pair {i}");

        let m = evaluate_patient("p", &pred, &truth).unwrap().values;
        let both_empty = e.tp + e.fp + e.fn_ == 0;
        let (dice, sens, ppv) = if both_empty {
            (Some(1.0), Some(1.0), Some(1.0))
        } else {
            (
                frac(2 * e.tp, 2 * e.tp + e.fp + e.fn_),
                frac(e.tp, e.tp + e.fn_),
                frac(e.tp, e.tp + e.fp),
            )
        };
        assert_eq!(m.dice, dice, "pair {i}");
        assert_eq!(m.sensitivity, sens, "pair {i}");
        assert_eq!(m.specificity, frac(e.tn, e.tn + e.fp), "pair {i}");
        assert_eq!(m.ppv, ppv, "pair {i}");

        if let (Some(d), Some(p), Some(s)) = (m.dice, m.ppv, m.sensitivity) {
            if p + s > 0.0 {
                assert!((d - 2.0 * p * s / (p + s)).abs() <= 1e-12, "F1 identity, pair {i}");
                f1_checked += 1;
            }
        }
    }
    f1_checked
}
