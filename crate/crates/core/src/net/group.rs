//! Orthogonal maps used to probe equivariance. All matrices are row-major
//! `d x d`.

use crate::rng::RngStream;

/// Rodrigues rotation by `angle` about the unit `axis` in three dimensions.
pub fn rotation_about(axis: &[f64], angle: f64) -> Vec<f64> {
    assert_eq!(axis.len(), 3, "rotation_about is three-dimensional");
    let (s, c) = angle.sin_cos();
    let [x, y, z] = [axis[0], axis[1], axis[2]];
    let t = 1.0 - c;
    vec![
        c + x * x * t,
        x * y * t - z * s,
        x * z * t + y * s,
        y * x * t + z * s,
        c + y * y * t,
        y * z * t - x * s,
        z * x * t - y * s,
        z * y * t + x * s,
        c + z * z * t,
    ]
}

fn planar_rotation(angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    vec![c, -s, s, c]
}

/// Unit vector orthogonal to `g_hat`, rotated by `angle` within the
/// orthogonal complement (three dimensions) or fixed up to sign (plane).
fn perpendicular(g_hat: &[f64], angle: f64) -> Vec<f64> {
    match g_hat.len() {
        2 => vec![-g_hat[1], g_hat[0]],
        3 => {
            let helper = if g_hat[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let dot: f64 = helper.iter().zip(g_hat).map(|(a, b)| a * b).sum();
            let mut u: Vec<f64> = helper.iter().zip(g_hat).map(|(h, g)| h - dot * g).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            let r = rotation_about(g_hat, angle);
            (0..3).map(|i| (0..3).map(|j| r[i * 3 + j] * u[j]).sum()).collect()
        }
        d => panic!("unsupported dimension {d}"),
    }
}

/// Householder reflection through the hyperplane with unit normal `n`.
fn reflection(n: &[f64]) -> Vec<f64> {
    let d = n.len();
    let mut o = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            o[i * d + j] = if i == j { 1.0 } else { 0.0 } - 2.0 * n[i] * n[j];
        }
    }
    o
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            for j in 0..d {
                out[i * d + j] += a[i * d + k] * b[k * d + j];
            }
        }
    }
    out
}

/// An orthogonal map with `O g_hat = g_hat`: rotation about `g_hat` by
/// `angle` (three dimensions only), optionally followed by the reflection
/// through the plane spanned by `g_hat` and the perpendicular at `mirror_angle`.
pub fn gravity_fixing_map(g_hat: &[f64], angle: f64, reflect: bool, mirror_angle: f64) -> Vec<f64> {
    let d = g_hat.len();
    let rot = if d == 3 {
        rotation_about(g_hat, angle)
    } else {
        let mut id = vec![0.0; d * d];
        (0..d).for_each(|i| id[i * d + i] = 1.0);
        id
    };
    if reflect {
        // The mirror plane contains g_hat, so its normal is perpendicular to it.
        let n = perpendicular(g_hat, mirror_angle);
        matmul(&reflection(&n), &rot, d)
    } else {
        rot
    }
}

/// A random element of the stabilizer of `g_hat`.
pub fn random_orthogonal(g_hat: &[f64], rng: &mut RngStream) -> Vec<f64> {
    let angle = rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
    let reflect = rng.uniform() < 0.5;
    let mirror = rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
    gravity_fixing_map(g_hat, angle, reflect, mirror)
}

/// A rotation that moves `g_hat` by an angle of at least 0.5 radians.
pub fn random_tilt(g_hat: &[f64], rng: &mut RngStream) -> Vec<f64> {
    let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let angle = sign * rng.uniform_range(0.5, std::f64::consts::PI - 0.5);
    match g_hat.len() {
        2 => planar_rotation(angle),
        3 => {
            let axis_angle = rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
            rotation_about(&perpendicular(g_hat, axis_angle), angle)
        }
        d => panic!("unsupported dimension {d}"),
    }
}
