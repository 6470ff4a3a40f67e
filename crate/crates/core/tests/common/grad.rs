//! Central finite differences (step 1e-5) against the analytic gradients.
//! Each check returns the worst norm-wise relative error over `points`
//! random cases.

use osdet::model::LabelSpace;
use osdet::rejection::GradientOracle;
use osdet::sim::{LinearHead, LogisticScorer, ToyDetector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn central(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[i] += H;
            lo[i] -= H;
            (f(&hi) - f(&lo)) / (2.0 * H)
        })
        .collect()
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn bce(z: f64, y: f64) -> f64 {
    y * (1.0 + (-z).exp()).ln() + (1.0 - y) * (1.0 + z.exp()).ln()
}

pub fn logistic(seed: u64, points: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let dim = rng.random_range(1..9);
        let xs: Vec<Vec<f64>> = (0..rng.random_range(1..6)).map(|_| random_vec(&mut rng, dim, 3.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let params = random_vec(&mut rng, dim + 1, 1.0);
        let loss = |p: &[f64]| {
            xs.iter()
                .zip(&ys)
                .map(|(x, y)| bce(x.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + p[dim], *y))
                .sum::<f64>()
                / xs.len() as f64
        };
        let scorer = LogisticScorer { weights: params[..dim].to_vec(), bias: params[dim] };
        let batch: Vec<(&[f64], f64)> = xs.iter().map(|x| x.as_slice()).zip(ys.iter().copied()).collect();
        let (l, gw, gb) = scorer.loss_and_grad(&batch);
        assert!((l - loss(&params)).abs() < 1e-12, "loss value disagrees");
        let mut analytic = gw;
        analytic.push(gb);
        worst = worst.max(rel_err(&analytic, &central(loss, &params)));
    }
    worst
}

pub fn softmax_ce(seed: u64, points: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let dim = rng.random_range(1..7);
        let slots = rng.random_range(2..6);
        let xs: Vec<Vec<f64>> = (0..rng.random_range(1..5)).map(|_| random_vec(&mut rng, dim, 3.0)).collect();
        let ys: Vec<usize> = xs.iter().map(|_| rng.random_range(0..slots)).collect();
        let params = random_vec(&mut rng, slots * (dim + 1), 1.0);
        let unpack = |p: &[f64]| LinearHead {
            weights: (0..slots).map(|k| p[k * dim..(k + 1) * dim].to_vec()).collect(),
            bias: p[slots * dim..].to_vec(),
        };
        let loss = |p: &[f64]| {
            let h = unpack(p);
            xs.iter()
                .zip(&ys)
                .map(|(x, &y)| {
                    let s: Vec<f64> = (0..slots)
                        .map(|k| h.weights[k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + h.bias[k])
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - s[y]
                })
                .sum::<f64>()
                / xs.len() as f64
        };
        let head = unpack(&params);
        let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| x.as_slice()).zip(ys.iter().copied()).collect();
        let (l, gw, gb) = head.loss_and_grad(&batch);
        assert!((l - loss(&params)).abs() < 1e-12, "loss value disagrees");
        let analytic: Vec<f64> = gw.into_iter().flatten().chain(gb).collect();
        worst = worst.max(rel_err(&analytic, &central(loss, &params)));
    }
    worst
}

/// `(1/R) sum_r log max softmax(s_r)` over known classes and background.
pub fn odin_objective(det: &ToyDetector, batch: &[Vec<f64>]) -> f64 {
    let width = det.label_space.num_known() + 1;
    batch
        .iter()
        .map(|x| {
            let s: Vec<f64> = det.classifier.logits(x)[..width].to_vec();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            -(s.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
        })
        .sum::<f64>()
        / batch.len() as f64
}

pub fn random_detector(rng: &mut impl Rng, unknown_slot: bool) -> ToyDetector {
    let k = rng.random_range(1..5);
    let dim = rng.random_range(2..8);
    let mut det = ToyDetector::new(LabelSpace::numbered(k, unknown_slot).unwrap(), dim);
    for row in &mut det.classifier.weights {
        *row = random_vec(rng, dim, 1.5);
    }
    det.classifier.bias = random_vec(rng, det.classifier.bias.len(), 1.0);
    det
}

pub struct OdinCase {
    pub detector: ToyDetector,
    pub batch: Vec<Vec<f64>>,
}

pub fn odin_cases(seed: u64, points: usize) -> Vec<OdinCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..points)
        .map(|i| {
            let detector = random_detector(&mut rng, i % 2 == 0);
            let batch = (0..rng.random_range(1..4))
                .map(|_| random_vec(&mut rng, detector.feature_dim, 3.0))
                .collect();
            OdinCase { detector, batch }
        })
        .collect()
}

/// Worst relative error of the ODIN input gradient, and whether every sign
/// the perturbation would use (components above 1e-6) agrees with the
/// finite-difference sign.
pub fn odin(seed: u64, points: usize) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut signs = true;
    for case in odin_cases(seed, points) {
        let analytic = GradientOracle::Available(&case.detector).gradient(&case.batch).unwrap();
        for (r, g) in analytic.iter().enumerate() {
            let numeric = central(
                |x| {
                    let mut b = case.batch.clone();
                    b[r] = x.to_vec();
                    odin_objective(&case.detector, &b)
                },
                &case.batch[r],
            );
            worst = worst.max(rel_err(g, &numeric));
            signs &= g
                .iter()
                .zip(&numeric)
                .all(|(a, n)| a.abs() <= 1e-6 || a.signum() == n.signum());
        }
    }
    (worst, signs)
}
