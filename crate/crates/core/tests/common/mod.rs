#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvcsl::{expand_to_episodes, EpisodeRow, SubjectRecord};

/// Small random cohort. Times are drawn on a coarse grid when `ties` is set
/// so that tied event times occur regularly.
pub fn random_subjects(seed: u64, n: usize, p: usize, ties: bool) -> Vec<SubjectRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let time = |rng: &mut ChaCha8Rng| {
        if ties {
            rng.random_range(1..=6) as f64
        } else {
            rng.random_range(0.05..10.0)
        }
    };
    let mut out: Vec<SubjectRecord> = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.5..1.5)).collect();
            let u = time(&mut rng);
            let a = match rng.random_range(0..4) {
                0 => f64::INFINITY,
                1 => 0.0,
                _ => time(&mut rng),
            };
            SubjectRecord {
                id: i as u64 + 1,
                x,
                adoption_time: a,
                observed_time: u,
                event: rng.random_bool(0.7),
            }
        })
        .collect();
    // At least one event so the partial likelihood is not constant.
    out[0].event = true;
    out
}

/// Episodes with design `z = (x, W)` and random offsets.
pub fn episodes_with_treatment(subjects: &[SubjectRecord], offset_seed: u64) -> Vec<EpisodeRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(offset_seed);
    subjects
        .iter()
        .flat_map(expand_to_episodes)
        .map(|mut e| {
            e.z.push(if e.treated { 1.0 } else { 0.0 });
            e.offset = rng.random_range(-0.5..0.5);
            e
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Term-by-term Breslow log partial likelihood over `n_subjects`.
///
/// For each event row the risk set is every row with `start < t <= stop`.
pub fn brute_force_log_pl(rows: &[EpisodeRow], beta: &[f64], n_subjects: usize) -> f64 {
    let mut total = 0.0;
    for ev in rows.iter().filter(|r| r.event) {
        let t = ev.stop;
        let mut denom = 0.0;
        for r in rows {
            if r.start < t && t <= r.stop {
                denom += (dot(&r.z, beta) + r.offset).exp();
            }
        }
        total += dot(&ev.z, beta) + ev.offset - denom.ln();
    }
    total / n_subjects as f64
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, beta: &[f64], h: f64) -> Vec<f64> {
    (0..beta.len())
        .map(|j| {
            let mut up = beta.to_vec();
            let mut dn = beta.to_vec();
            up[j] += h;
            dn[j] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Ordinary Cox regression on `(time, event, x)` by Newton's method with
/// brute-force sums, written independently of the library.
pub fn naive_cox_fit(time: &[f64], event: &[bool], x: &[Vec<f64>]) -> Vec<f64> {
    let p = x[0].len();
    let n = time.len();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        for i in (0..n).filter(|&i| event[i]) {
            let (mut s0, mut s1, mut s2) = (0.0, vec![0.0; p], vec![vec![0.0; p]; p]);
            for j in (0..n).filter(|&j| time[j] >= time[i]) {
                let w = dot(&x[j], &beta).exp();
                s0 += w;
                for a in 0..p {
                    s1[a] += w * x[j][a];
                    for b in 0..p {
                        s2[a][b] += w * x[j][a] * x[j][b];
                    }
                }
            }
            for a in 0..p {
                g[a] += x[i][a] - s1[a] / s0;
                for b in 0..p {
                    h[a][b] -= s2[a][b] / s0 - s1[a] * s1[b] / (s0 * s0);
                }
            }
        }
        let step = solve(&h, &g);
        for a in 0..p {
            beta[a] -= step[a];
        }
        if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-13 {
            break;
        }
    }
    beta
}

/// Gaussian elimination with partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &v)| {
        let mut r = r.clone();
        r.push(v);
        r
    }).collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut out = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * out[k]).sum();
        out[r] = (m[r][n] - s) / m[r][r];
    }
    out
}

/// Line printed by every acceptance criterion.
pub fn report(criterion: &str, pass: bool, detail: &str) {
    println!("{} criterion {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
}
