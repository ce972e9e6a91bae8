//! Built-in checks run by the `selftest` subcommand: finite-difference
//! gradients for every layer kind, and the structural invariants of the
//! classifier, ROC code, FFR oracle and checkpoint format.

use ffrmil_core::gradcheck::check_params;
use ffrmil_core::{Conv, Dense, Graph, NamedTensors, PRelu, ParamKind, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artery::ENCODING_LEN;
use crate::error::Result;
use crate::eval::roc_auc;
use crate::mil::{Bag, MilModel, Mode};
use crate::myo::FEATURE_LEN;
use crate::synth::{ffr_oracle, ArteryGeometry, FfrConstants, Stenosis};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Weighted sum of `y` with fixed random coefficients, so every output
/// element contributes a distinct gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rand_tensor(&mut rng, g.value(y).shape());
    let c = g.input(c);
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn grad_check<F>(name: &str, params: &ParamSet<f64>, build: F) -> Result<Check>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> ffrmil_core::Result<Var>,
{
    let report = check_params(params, FD_STEP, 5, build)?;
    let worst = report
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("at least one parameter");
    Ok(Check {
        name: format!("gradient {name}"),
        passed: report.iter().all(|r| r.passes(GRADIENT_TOLERANCE)),
        detail: format!("worst relative error {:.2e} ({})", worst.rel_error, worst.name),
    })
}

fn lift<T>(r: Result<T>) -> ffrmil_core::Result<T> {
    r.map_err(|e| ffrmil_core::CoreError::Config(e.to_string()))
}

/// Central finite differences (64-bit, step 1e-5) against backprop for
/// every layer kind; passes at relative error ≤ 1e-4.
pub fn gradient_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    // conv3d and its transpose
    {
        let mut p = ParamSet::<f64>::new();
        let x = p.add("x", ParamKind::Weight, rand_tensor(&mut rng, &[2, 2, 3, 5, 5]));
        let c = Conv::conv3d(&mut p, "conv", 2, 3, [2, 3, 3], [1, 2, 2], [0, 1, 1], &mut rng);
        out.push(grad_check("conv3d", &p, |g, p| {
            let xv = g.param(p, x);
            let y = c.forward(g, p, xv)?;
            lift(project(g, y, 1))
        })?);
        let mut p = ParamSet::<f64>::new();
        let y = p.add("y", ParamKind::Weight, rand_tensor(&mut rng, &[2, 3, 2, 3, 3]));
        let ct = Conv::conv3d_transposed(&mut p, "convt", 3, 2, [2, 4, 4], [1, 2, 2], [0, 1, 1], &mut rng);
        out.push(grad_check("conv3d_transposed", &p, |g, p| {
            let yv = g.param(p, y);
            let x = ct.forward(g, p, yv)?;
            lift(project(g, x, 2))
        })?);
    }
    // conv1d and its transpose
    {
        let mut p = ParamSet::<f64>::new();
        let x = p.add("x", ParamKind::Weight, rand_tensor(&mut rng, &[2, 2, 11]));
        let c = Conv::conv1d(&mut p, "conv", 2, 3, 3, 2, 1, &mut rng);
        out.push(grad_check("conv1d", &p, |g, p| {
            let xv = g.param(p, x);
            let y = c.forward(g, p, xv)?;
            lift(project(g, y, 3))
        })?);
        let mut p = ParamSet::<f64>::new();
        let y = p.add("y", ParamKind::Weight, rand_tensor(&mut rng, &[2, 3, 6]));
        let ct = Conv::conv1d_transposed(&mut p, "convt", 3, 2, 4, 2, 1, &mut rng);
        out.push(grad_check("conv1d_transposed", &p, |g, p| {
            let yv = g.param(p, y);
            let x = ct.forward(g, p, yv)?;
            lift(project(g, x, 4))
        })?);
    }
    // dense and PReLU
    {
        let mut p = ParamSet::<f64>::new();
        let x = p.add("x", ParamKind::Weight, rand_tensor(&mut rng, &[3, 6]));
        let d = Dense::new(&mut p, "dense", 6, 4, &mut rng);
        out.push(grad_check("dense", &p, |g, p| {
            let xv = g.param(p, x);
            let y = d.forward(g, p, xv)?;
            lift(project(g, y, 5))
        })?);
        let mut p = ParamSet::<f64>::new();
        let x = p.add("x", ParamKind::Weight, rand_tensor(&mut rng, &[3, 5]));
        let a = PRelu::new(&mut p, "prelu", 5);
        out.push(grad_check("prelu", &p, |g, p| {
            let xv = g.param(p, x);
            let y = a.forward(g, p, xv)?;
            lift(project(g, y, 6))
        })?);
    }
    // attention: tanh scoring, softmax, weighted sum
    {
        let mut p = ParamSet::<f64>::new();
        let h = p.add("h", ParamKind::Weight, rand_tensor(&mut rng, &[5, 6]));
        let v = p.add("v", ParamKind::Weight, rand_tensor(&mut rng, &[4, 6]));
        let w = p.add("w", ParamKind::Weight, rand_tensor(&mut rng, &[1, 4]));
        out.push(grad_check("softmax attention", &p, |g, p| {
            let (hv, vv, wv) = (g.param(p, h), g.param(p, v), g.param(p, w));
            let t = g.linear(hv, vv, None)?;
            let t = g.tanh(t);
            let s = g.linear(t, wv, None)?;
            let s = g.reshape(s, &[5])?;
            let a = g.softmax(s)?;
            let e = g.weighted_sum(a, hv)?;
            lift(project(g, e, 7))
        })?);
    }
    // sigmoid + BCE
    {
        let mut p = ParamSet::<f64>::new();
        let z = p.add("logit", ParamKind::Weight, rand_tensor(&mut rng, &[4]));
        out.push(grad_check("sigmoid + bce", &p, |g, p| {
            let zv = g.param(p, z);
            let prob = g.sigmoid(zv);
            let y = g.input(Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0]));
            g.bce(prob, y)
        })?);
    }
    // Gaussian KL with clamped logvar
    {
        let mut p = ParamSet::<f64>::new();
        let mu = p.add("mu", ParamKind::Weight, rand_tensor(&mut rng, &[2, 5]));
        let lv = p.add("logvar", ParamKind::Weight, rand_tensor(&mut rng, &[2, 5]));
        out.push(grad_check("gaussian kl", &p, |g, p| {
            let (m, l) = (g.param(p, mu), g.param(p, lv));
            let l = g.clamp(l, -10.0, 10.0);
            g.gaussian_kl(m, l)
        })?);
    }
    Ok(out)
}

pub fn random_bag(rng: &mut ChaCha8Rng, n: usize) -> Bag {
    Bag {
        arteries: (0..n)
            .map(|_| (0..ENCODING_LEN).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect(),
        myo: (0..FEATURE_LEN).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        label: rng.gen(),
    }
}

/// Attention simplex (32-bit) and permutation invariance (64-bit) over
/// `count` random bags with N ∈ [1, 30].
pub fn mil_invariants(count: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m32 = MilModel::<f32>::new(Mode::Combined, seed);
    let mut m64 = MilModel::<f64>::new(Mode::Combined, seed);
    m64.params = m32.params.cast();
    let (mut worst_sum, mut negative, mut single_ok, mut worst_perm) = (0f64, 0usize, true, 0f64);
    for _ in 0..count {
        let n = rng.gen_range(1..=30);
        let bag = random_bag(&mut rng, n);
        let w = m32.attention_weights(&bag)?;
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        negative += w.iter().filter(|&&x| x < 0.0).count();
        if n == 1 {
            single_ok &= w == [1.0];
        }
        let mut shuffled = bag.clone();
        shuffled.arteries.shuffle(&mut rng);
        let (a, b) = (m64.predict(&bag)?, m64.predict(&shuffled)?);
        worst_perm = worst_perm.max((a - b).abs());
    }
    Ok(vec![
        Check {
            name: "attention weights on the simplex".into(),
            passed: worst_sum <= 1e-6 && negative == 0,
            detail: format!("max |Σw − 1| = {worst_sum:.2e}, negative weights {negative}"),
        },
        Check {
            name: "single-instance weight is exactly 1".into(),
            passed: single_ok,
            detail: String::new(),
        },
        Check {
            name: "probability invariant to instance order".into(),
            passed: worst_perm <= 1e-9,
            detail: format!("max difference {worst_perm:.2e}"),
        },
    ])
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

pub fn invariant_suite() -> Result<Vec<Check>> {
    let mut out = mil_invariants(200, 17)?;

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0f64;
    for _ in 0..50 {
        let n = rng.gen_range(4..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
        let auc = roc_auc(&scores, &labels)?.auc;
        worst = worst.max((auc - pairwise_auc(&scores, &labels)).abs());
    }
    out.push(Check {
        name: "AUC equals pairwise concordance".into(),
        passed: worst <= 1e-12,
        detail: format!("max difference {worst:.2e}"),
    });

    let k = FfrConstants::default();
    let healthy = ArteryGeometry::healthy(200, 1.5);
    let mut last = ffr_oracle(&healthy, &k);
    let mut monotone = last == 1.0;
    for i in 1..=20 {
        let mut g = healthy.clone();
        g.stenoses.push(Stenosis {
            center: 100.0,
            length_mm: 10.0,
            r_min: 1.5 * (1.0 - i as f64 * 0.04),
            calcified: false,
        });
        let f = ffr_oracle(&g, &k);
        monotone &= f < last;
        last = f;
    }
    out.push(Check {
        name: "FFR oracle monotone in stenosis severity".into(),
        passed: monotone,
        detail: String::new(),
    });

    let model = MilModel::<f32>::new(Mode::Combined, 3);
    let bag = random_bag(&mut rng, 9);
    let back = NamedTensors::from_bytes(&model.to_named(None, 0).to_bytes())?;
    let (restored, _) = MilModel::<f32>::from_named(&back)?;
    let same = model.predict(&bag)?.to_bits() == restored.predict(&bag)?.to_bits();
    out.push(Check {
        name: "checkpoint round trip is bitwise".into(),
        passed: same,
        detail: String::new(),
    });
    Ok(out)
}
