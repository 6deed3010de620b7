//! Central finite-difference gradient checks in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spine_cascade::autodiff::{Graph, RunningStats, Tensor, Var};

pub const STEP: f64 = 1e-6;

/// `||a - n||_2 / max(||a||_2, ||n||_2)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error over all inputs of `f`, which maps leaf vars to a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.len()])).collect();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= STEP;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic[ti], &numeric));
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

fn reduce(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..g.value(y).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.weighted_sum(y, &w).unwrap()
}

pub fn random_dims(rng: &mut ChaCha8Rng, max: usize) -> [usize; 3] {
    [rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max)]
}

pub fn conv3d(seed: u64, max_extent: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = random_dims(&mut rng, max_extent);
    let c = rng.random_range(1..=2);
    let k = rng.random_range(1..=2);
    let ins = [
        random_tensor(&mut rng, &[1, c, d, h, w], 1.0),
        random_tensor(&mut rng, &[k, c, 3, 3, 3], 0.5),
        random_tensor(&mut rng, &[k], 0.5),
    ];
    check(&ins, |g, v| {
        let y = g.conv3d(v[0], v[1], v[2]).unwrap();
        reduce(g, y, seed)
    })
}

pub fn deconv3d(seed: u64, max_extent: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = random_dims(&mut rng, max_extent / 2);
    let c = rng.random_range(1..=2);
    let k = rng.random_range(1..=2);
    let ins = [
        random_tensor(&mut rng, &[1, c, d, h, w], 1.0),
        random_tensor(&mut rng, &[c, k, 4, 4, 4], 0.5),
        random_tensor(&mut rng, &[k], 0.5),
    ];
    check(&ins, |g, v| {
        let y = g.deconv3d(v[0], v[1], v[2]).unwrap();
        reduce(g, y, seed)
    })
}

pub fn maxpool3d(seed: u64, max_extent: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = max_extent / 2;
    let dims = [2 * rng.random_range(1..=half), 2 * rng.random_range(1..=half), 2 * rng.random_range(1..=half)];
    let n: usize = 2 * dims.iter().product::<usize>();
    // distinct values spaced far beyond the finite-difference step keep away from ties
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::new(vec![1, 2, dims[0], dims[1], dims[2]], vals);
    check(&[x], |g, v| {
        let y = g.maxpool3d(v[0]).unwrap();
        reduce(g, y, seed)
    })
}

pub fn batchnorm(seed: u64, max_extent: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = random_dims(&mut rng, max_extent.min(4));
    let n = 2;
    let c = 2;
    let ins = [
        random_tensor(&mut rng, &[n, c, d.max(2), h, w], 1.0),
        random_tensor(&mut rng, &[c], 1.0),
        random_tensor(&mut rng, &[c], 1.0),
    ];
    check(&ins, |g, v| {
        let mut st = RunningStats::new(c);
        let y = g.batchnorm(v[0], v[1], v[2], &mut st, true).unwrap();
        reduce(g, y, seed)
    })
}

pub fn bootstrapped_ce(seed: u64, max_extent: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = random_dims(&mut rng, max_extent.min(5));
    let s = d * h * w;
    let target: Vec<u16> = (0..s).map(|_| rng.random_range(0..4)).collect();
    let logits = random_tensor(&mut rng, &[1, 4, d, h, w], 2.0);
    let keep = rng.random_range(0.1..1.0);
    check(&[logits], |g, v| g.bootstrapped_ce(v[0], &target, keep).unwrap())
}

pub fn dice_loss(seed: u64, max_extent: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = random_dims(&mut rng, max_extent);
    let s = d * h * w;
    let target: Vec<f64> = (0..s).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let logits = random_tensor(&mut rng, &[1, 1, d, h, w], 2.0);
    check(&[logits], |g, v| {
        let p = g.sigmoid(v[0]);
        g.dice_loss(p, &target).unwrap()
    })
}
