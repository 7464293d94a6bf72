//! Small dense linear-algebra helpers: pivoted LU solve, randomized
//! truncated SVD, and seeded k-means. Sized for the dimensions this
//! pipeline actually uses (ranks up to ~64, matrices up to ~2k x 2k).

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Solve `A X = B` with partial pivoting. Returns `None` when `A` is
/// numerically singular.
pub fn solve_lu(a: &Array2<f64>, b: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "solve_lu needs a square matrix");
    assert_eq!(b.nrows(), n, "rhs rows must match");
    let m = b.ncols();
    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let mut piv = col;
        let mut best = lu[[col, col]].abs();
        for r in col + 1..n {
            let v = lu[[r, col]].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                lu.swap([col, c], [piv, c]);
            }
            for c in 0..m {
                x.swap([col, c], [piv, c]);
            }
        }
        let d = lu[[col, col]];
        for r in col + 1..n {
            let f = lu[[r, col]] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                lu[[r, c]] -= f * lu[[col, c]];
            }
            for c in 0..m {
                x[[r, c]] -= f * x[[col, c]];
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu[[col, col]];
        for c in 0..m {
            x[[col, c]] /= d;
        }
        for r in 0..col {
            let f = lu[[r, col]];
            if f == 0.0 {
                continue;
            }
            for c in 0..m {
                x[[r, c]] -= f * x[[col, c]];
            }
        }
    }
    Some(x)
}

/// Rank-`k` truncated SVD factors `(U, S, Vt)` of `a`, via randomized
/// subspace iteration with a small oversampling margin.
pub fn truncated_svd(
    a: &Array2<f64>,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let (m, n) = a.dim();
    let k = k.min(m.min(n));
    let p = (k + 8).min(n);
    let mut omega = Array2::zeros((n, p));
    for v in omega.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let mut q = orthonormalize(&a.dot(&omega));
    for _ in 0..3 {
        let z = orthonormalize(&a.t().dot(&q));
        q = orthonormalize(&a.dot(&z));
    }
    // Project and take the SVD of the small matrix B = Q^T A (p x n)
    // through the eigendecomposition of B B^T.
    let b = q.t().dot(a);
    let bbt = b.dot(&b.t());
    let eig = nalgebra::SymmetricEigen::new(nalgebra_from(&bbt));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());

    let mut u = Array2::zeros((m, k));
    let mut s = Array1::zeros(k);
    let mut vt = Array2::zeros((k, n));
    for (col, &idx) in order.iter().take(k).enumerate() {
        let lam = eig.eigenvalues[idx].max(0.0);
        let sigma = lam.sqrt();
        s[col] = sigma;
        let w: Vec<f64> = eig.eigenvectors.column(idx).iter().cloned().collect();
        let w = Array1::from_vec(w);
        let u_col = q.dot(&w);
        u.column_mut(col).assign(&u_col);
        if sigma > 1e-12 {
            let v_row = b.t().dot(&w) / sigma;
            vt.row_mut(col).assign(&v_row);
        }
    }
    (u, s, vt)
}

fn nalgebra_from(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Gram-Schmidt column orthonormalization (drops near-null columns to zero).
fn orthonormalize(a: &Array2<f64>) -> Array2<f64> {
    let mut q = a.clone();
    let cols = q.ncols();
    for j in 0..cols {
        for i in 0..j {
            let qi = q.column(i).to_owned();
            let proj = qi.dot(&q.column(j));
            let mut col = q.column_mut(j);
            col.scaled_add(-proj, &qi);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        if norm > 1e-12 {
            q.column_mut(j).mapv_inplace(|x| x / norm);
        } else {
            q.column_mut(j).fill(0.0);
        }
    }
    q
}

/// Largest singular value estimated by `iters` rounds of power iteration.
/// `u` (rows) and `v` (cols) are persistent state, updated in place.
pub fn power_iteration_sigma(
    w: &Array2<f64>,
    u: &mut Array1<f64>,
    v: &mut Array1<f64>,
    iters: usize,
) -> f64 {
    let normalize = |x: &mut Array1<f64>| {
        let n = x.dot(x).sqrt();
        if n > 1e-12 {
            x.mapv_inplace(|e| e / n);
        }
    };
    for _ in 0..iters {
        *v = w.t().dot(u);
        normalize(v);
        *u = w.dot(v);
        normalize(u);
    }
    u.dot(&w.dot(v))
}

/// Seeded Lloyd's k-means with k-means++ initialization.
/// Returns `(assignments, centroids)`.
pub fn kmeans(
    points: &Array2<f64>,
    k: usize,
    rng: &mut ChaCha12Rng,
    max_iters: usize,
) -> (Vec<usize>, Array2<f64>) {
    let n = points.nrows();
    let d = points.ncols();
    assert!(k >= 1 && k <= n, "k must be in [1, n]");

    // k-means++ seeding
    let mut centers: Vec<usize> = Vec::with_capacity(k);
    centers.push(rng.random_range(0..n));
    let mut dist2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = *centers.last().unwrap();
        for i in 0..n {
            let diff = &points.row(i) - &points.row(last);
            let d2 = diff.dot(&diff);
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                target -= d2;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(next);
    }

    let mut centroids = Array2::zeros((k, d));
    for (c, &i) in centers.iter().enumerate() {
        centroids.row_mut(c).assign(&points.row(i));
    }

    let mut assign = vec![0usize; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let diff = &points.row(i) - &centroids.row(c);
                let d2 = diff.dot(&diff);
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(assign[i]);
            row += &points.row(i);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let scaled = sums.row(c).mapv(|x| x / counts[c] as f64);
                centroids.row_mut(c).assign(&scaled);
            }
        }
        if !changed {
            break;
        }
    }
    (assign, centroids)
}

/// Mean of each column, `(1, cols)`.
pub fn col_means(a: &Array2<f64>) -> Array2<f64> {
    let m = a.nrows().max(1) as f64;
    a.sum_axis(Axis(0)).insert_axis(Axis(0)) / m
}
