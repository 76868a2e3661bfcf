//! Seeded synthetic datasets for the training procedures.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::rng;

/// Two clusters in `[0, pi/2]^2` separated along `x2 - x1`; label 1 for the
/// cluster around `(0.45, 1.05)`, label 0 around `(1.05, 0.45)`, each a disk
/// of radius 0.2.
pub fn two_clusters_2d(m: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng::stream(seed, 0x3263);
    let mut xs = Vec::with_capacity(m);
    let mut ys = Vec::with_capacity(m);
    for i in 0..m {
        let label = (i % 2) as f64;
        let c = if label == 1.0 { [0.45, 1.05] } else { [1.05, 0.45] };
        let (rad, ang) = (0.2 * r.random::<f64>().sqrt(), r.random_range(0.0..2.0 * PI));
        xs.push(vec![c[0] + rad * ang.cos(), c[1] + rad * ang.sin()]);
        ys.push(label);
    }
    (xs, ys)
}

/// Inner disk (label 1, radius 0.3) and outer ring (label 0, radii 0.9 to 1.3)
/// around `(1.5, 1.5)`.
pub fn concentric_circles(m: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng::stream(seed, 0x6363);
    let mut xs = Vec::with_capacity(m);
    let mut ys = Vec::with_capacity(m);
    for i in 0..m {
        let label = (i % 2) as f64;
        let rad = if label == 1.0 { 0.3 * r.random::<f64>().sqrt() } else { r.random_range(0.9..1.3) };
        let ang = r.random_range(0.0..2.0 * PI);
        xs.push(vec![1.5 + rad * ang.cos(), 1.5 + rad * ang.sin()]);
        ys.push(label);
    }
    (xs, ys)
}

/// Four phases `(a, a, a + t, a + t) + noise` with `a, t ~ U[0, pi)`: a
/// one-parameter family (up to global phase) whose second qubit is always
/// close to `|+>`.
pub fn phase_family(m: usize, noise: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 0x7066);
    (0..m)
        .map(|_| {
            let (a, t) = (r.random_range(0.0..PI), r.random_range(0.0..PI));
            [a, a, a + t, a + t]
                .iter()
                .map(|v| v + if noise > 0.0 { r.random_range(-noise..noise) } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Unit Bloch vectors near `+axis` (label 0) and `-axis` (label 1) with
/// uniform perturbations of half-width `spread` before renormalisation.
pub fn bloch_clusters(m: usize, axis: [f64; 3], spread: f64, seed: u64) -> (Vec<[f64; 3]>, Vec<u8>) {
    let mut r = rng::stream(seed, 0x6263);
    let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut xs = Vec::with_capacity(m);
    let mut ys = Vec::with_capacity(m);
    for i in 0..m {
        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
        let v: Vec<f64> = axis.iter().map(|a| s * a / norm + r.random_range(-spread..=spread)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        xs.push([v[0] / n, v[1] / n, v[2] / n]);
        ys.push(if s > 0.0 { 0 } else { 1 });
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded_and_shaped() {
        assert_eq!(two_clusters_2d(10, 1), two_clusters_2d(10, 1));
        assert_ne!(two_clusters_2d(10, 1).0, two_clusters_2d(10, 2).0);
        let (xs, ys) = two_clusters_2d(100, 3);
        assert!(xs.iter().flatten().all(|v| (0.0..=PI / 2.0).contains(v)));
        assert_eq!(ys.iter().filter(|y| **y == 1.0).count(), 50);
        let (xs, ys) = concentric_circles(100, 3);
        for (x, y) in xs.iter().zip(&ys) {
            let r = ((x[0] - 1.5).powi(2) + (x[1] - 1.5).powi(2)).sqrt();
            assert!(if *y == 1.0 { r <= 0.3 } else { (0.9..=1.3).contains(&r) });
        }
        let fam = phase_family(20, 0.0, 1);
        assert!(fam.iter().all(|x| x[0] == x[1] && x[2] == x[3]));
        let (b, _) = bloch_clusters(20, [0.0, 0.0, 2.0], 0.1, 1);
        assert!(b.iter().all(|v| (v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12));
    }
}
