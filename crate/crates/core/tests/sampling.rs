//! Goodness-of-fit checks on the random streams feeding training.

use bitagent_core::experiment::{collect_for, ExperimentConfig};
use bitagent_core::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Pearson statistic and its critical value at `1 - alpha`.
fn chi_square(observed: &[usize], expected: &[f64], alpha: f64) -> (f64, f64) {
    let stat = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let dof = (observed.len() - 1) as f64;
    (stat, ChiSquared::new(dof).unwrap().inverse_cdf(1.0 - alpha))
}

#[test]
fn replay_windows_are_uniform() {
    let cfg = ExperimentConfig {
        episodes: 3,
        ..ExperimentConfig::default()
    };
    let data = collect_for(&cfg, "light").unwrap();
    let seq_len = 16;
    let per_ep: Vec<usize> = data.episodes.iter().map(|e| e.n_obs() - seq_len + 1).collect();
    let bins: usize = per_ep.iter().sum();
    let offsets: Vec<usize> = per_ep.iter().scan(0, |acc, n| Some(std::mem::replace(acc, *acc + n))).collect();

    let mut counts = vec![0usize; bins];
    let mut rng = Rng::new(17);
    let draws = 400 * bins;
    for _ in 0..draws / 100 {
        let b = data.sample_batch(100, seq_len, &mut rng).unwrap();
        for &(ep, start) in &b.origins {
            counts[offsets[ep] + start] += 1;
        }
    }
    let expected = vec![draws as f64 / bins as f64; bins];
    let (stat, crit) = chi_square(&counts, &expected, 1e-3);
    assert!(stat < crit, "chi-square {stat:.1} over {bins} windows exceeds {crit:.1}");
}

#[test]
fn normals_fit_the_standard_normal() {
    let edges = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
    let n = 200_000;
    let mut counts = vec![0usize; edges.len() + 1];
    for x in Rng::new(5).normals(n) {
        counts[edges.partition_point(|&e| e <= x)] += 1;
    }
    let phi = Normal::standard();
    let mut cdf: Vec<f64> = vec![0.0];
    cdf.extend(edges.iter().map(|&e| phi.cdf(e)));
    cdf.push(1.0);
    let expected: Vec<f64> = cdf.windows(2).map(|w| (w[1] - w[0]) * n as f64).collect();
    let (stat, crit) = chi_square(&counts, &expected, 1e-3);
    assert!(stat < crit, "chi-square {stat:.1} exceeds {crit:.1}");
}
