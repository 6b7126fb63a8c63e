//! Release gate: one test per acceptance criterion, each printing a
//! single pass/fail line (run with `cargo test --test acceptance --
//! --nocapture` to see them all).

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jigsawhsi::decompose::{self, cube_to_matrix, Method};
use jigsawhsi::graph::{build, Model, NetworkSpec};
use jigsawhsi::io::generate_synthetic_scene;
use jigsawhsi::metrics::{render_report, ConfusionMatrix};
use jigsawhsi::nn::{self, Mat, Mode, Tensor4};
use jigsawhsi::tiler::{build_dataset, stratified_split, TileSet};
use jigsawhsi::trainer::{
    evaluate, train, Monitor, OptimizerKind, TrainConfig,
};

fn verdict(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({name}): {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite difference of `f` along coordinate `i` of `x`.
fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut up = x.to_vec();
    up[i] += h;
    let mut down = x.to_vec();
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

fn max_fd_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        worst = worst.max(rel_err(analytic[i], fd(f, x, i, 1e-5)));
    }
    worst
}

// Criterion 1: every layer passes 64-bit central finite-difference
// checks (h = 1e-5, relative error < 1e-4) over five seeds, and a
// whole-model spot check passes at 1e-3.
#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let tol = 1e-4;
    let mut worst = 0.0f64;

    for seed in 0..5u64 {
        let mut r = rng(seed);
        // Convolution: weighted-sum loss, gradients for x, w and b.
        let (h, w, cin, cout, k) = (5, 5, 2, 3, 3);
        let x = rand_vec(h * w * cin, &mut r);
        let wts = rand_vec(k * k * cin * cout, &mut r);
        let b = rand_vec(cout, &mut r);
        let probe = rand_vec(h * w * cout, &mut r);
        let conv_loss = |xv: &[f64], wv: &[f64], bv: &[f64]| -> f64 {
            let t = Tensor4::from_vec(1, h, w, cin, xv.to_vec());
            let y = nn::conv2d_forward(&t, wv, bv, k, cin, cout);
            y.data.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let dy = Tensor4::from_vec(1, h, w, cout, probe.clone());
        let xt = Tensor4::from_vec(1, h, w, cin, x.clone());
        let (dx, dw, db) = nn::conv2d_backward(&xt, &wts, &dy, k, cin, cout);
        worst = worst.max(max_fd_error(&|v| conv_loss(v, &wts, &b), &x, &dx.data));
        worst = worst.max(max_fd_error(&|v| conv_loss(&x, v, &b), &wts, &dw));
        worst = worst.max(max_fd_error(&|v| conv_loss(&x, &wts, v), &b, &db));

        // Dense layer.
        let (n, fin, fout) = (3, 4, 3);
        let x = rand_vec(n * fin, &mut r);
        let wts = rand_vec(fin * fout, &mut r);
        let b = rand_vec(fout, &mut r);
        let probe = rand_vec(n * fout, &mut r);
        let dense_loss = |xv: &[f64], wv: &[f64], bv: &[f64]| -> f64 {
            let y = nn::dense_forward(
                &Mat::from_vec(n, fin, xv.to_vec()),
                &Mat::from_vec(fin, fout, wv.to_vec()),
                bv,
            );
            y.data.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let (dx, dw, db) = nn::dense_backward(
            &Mat::from_vec(n, fin, x.clone()),
            &Mat::from_vec(fin, fout, wts.clone()),
            &Mat::from_vec(n, fout, probe.clone()),
        );
        worst = worst.max(max_fd_error(&|v| dense_loss(v, &wts, &b), &x, &dx.data));
        worst = worst.max(max_fd_error(&|v| dense_loss(&x, v, &b), &wts, &dw.data));
        worst = worst.max(max_fd_error(&|v| dense_loss(&x, &wts, v), &b, &db));

        // Relu (inputs are away from the kink with probability 1).
        let x = rand_vec(20, &mut r);
        let probe = rand_vec(20, &mut r);
        let dx = nn::relu_backward(&x, &probe);
        worst = worst.max(max_fd_error(
            &|v| nn::relu(v).iter().zip(&probe).map(|(a, p)| a * p).sum(),
            &x,
            &dx,
        ));

        // Pooling layers (no ties with probability 1).
        let (h, w, c) = (6, 5, 2);
        let x = rand_vec(h * w * c, &mut r);
        let (pooled, argmax) = nn::max_pool_forward(
            &Tensor4::from_vec(1, h, w, c, x.clone()),
            3,
        );
        let probe = rand_vec(pooled.data.len(), &mut r);
        let dy = Tensor4::from_vec(pooled.n, pooled.h, pooled.w, pooled.c, probe.clone());
        let dx = nn::max_pool_backward((1, h, w, c), &argmax, &dy);
        worst = worst.max(max_fd_error(
            &|v| {
                let (y, _) = nn::max_pool_forward(&Tensor4::from_vec(1, h, w, c, v.to_vec()), 3);
                y.data.iter().zip(&probe).map(|(a, p)| a * p).sum()
            },
            &x,
            &dx.data,
        ));

        let avg = nn::avg_pool_forward(&Tensor4::from_vec(1, h, w, c, x.clone()), 2);
        let probe = rand_vec(avg.data.len(), &mut r);
        let dy = Tensor4::from_vec(avg.n, avg.h, avg.w, avg.c, probe.clone());
        let dx = nn::avg_pool_backward((1, h, w, c), 2, &dy);
        worst = worst.max(max_fd_error(
            &|v| {
                let y = nn::avg_pool_forward(&Tensor4::from_vec(1, h, w, c, v.to_vec()), 2);
                y.data.iter().zip(&probe).map(|(a, p)| a * p).sum()
            },
            &x,
            &dx.data,
        ));

        // Softmax cross-entropy head.
        let (n, k) = (4, 3);
        let logits = rand_vec(n * k, &mut r);
        let mut targets = vec![0.0; n * k];
        for row in 0..n {
            targets[row * k + r.gen_range(0..k)] = 1.0;
        }
        let tmat = Mat::from_vec(n, k, targets);
        let (_, _, dlogits) = nn::softmax_xent(&Mat::from_vec(n, k, logits.clone()), &tmat);
        worst = worst.max(max_fd_error(
            &|v| {
                let (l, _, _) = nn::softmax_xent(&Mat::from_vec(n, k, v.to_vec()), &tmat);
                l
            },
            &logits,
            &dlogits.data,
        ));

        // Dropout with a frozen mask is linear in its input.
        let x = rand_vec(16, &mut r);
        let (_, mask) = nn::dropout(&x, 0.4, Mode::Train, &mut rng(seed + 50));
        let probe = rand_vec(16, &mut r);
        let dx = nn::dropout_backward(&mask, &probe);
        worst = worst.max(max_fd_error(
            &|v| {
                v.iter()
                    .zip(&mask)
                    .zip(&probe)
                    .map(|((xv, m), p)| xv * m * p)
                    .sum()
            },
            &x,
            &dx,
        ));
    }
    let layers_ok = worst < tol;

    // Whole-model check: jitter all parameters off zero (fresh biases sit
    // exactly on relu kinks), then spot-check against finite differences.
    let spec = NetworkSpec {
        input_size: 5,
        input_channels: 2,
        hsi_filters: Some(4),
        module_a: vec![3],
        max_filter_size: 3,
        branch_units: 2,
        nin_before: Some(3),
        nin_after: Some(3),
        avg_pool_size: 2,
        crop_enabled: true,
        dense_units: (8, 8),
        dropout_rate: 0.0,
        l2_coeff: 1e-3,
        num_classes: 3,
    };
    let mut model: Model<f64> = build(&spec, 13).unwrap();
    let mut jitter = rng(7);
    model.visit_params_mut(&mut |p| {
        for v in p.values.iter_mut() {
            *v += jitter.gen_range(0.01..0.05);
        }
    });
    let mut r = rng(14);
    let batch = Tensor4::from_vec(2, 5, 5, 2, rand_vec(100, &mut r));
    let mut targets = vec![0.0; 6];
    targets[0] = 1.0;
    targets[5] = 1.0;
    let targets = Mat::from_vec(2, 3, targets);

    let pass = model.forward(&batch, Mode::Train, &mut rng(0)).unwrap();
    let _ = model.backward(&pass, &targets);
    let mut grads = Vec::new();
    model.visit_params(&mut |p| grads.push(p.grads.clone()));

    let mut model_worst = 0.0f64;
    let mut pick = rng(99);
    for _ in 0..30 {
        let ti = pick.gen_range(0..grads.len());
        let ei = pick.gen_range(0..grads[ti].len());
        let h = 1e-5;
        let mut loss_with = |delta: f64| -> f64 {
            let mut i = 0;
            model.visit_params_mut(&mut |p| {
                if i == ti {
                    p.values[ei] += delta;
                }
                i += 1;
            });
            let pass = model.forward(&batch, Mode::Train, &mut rng(0)).unwrap();
            let (l, _, _) = nn::softmax_xent(&pass.logits, &targets);
            let total = l + model.l2_loss();
            let mut i = 0;
            model.visit_params_mut(&mut |p| {
                if i == ti {
                    p.values[ei] -= delta;
                }
                i += 1;
            });
            total
        };
        let numeric = (loss_with(h) - loss_with(-h)) / (2.0 * h);
        model_worst = model_worst.max(rel_err(grads[ti][ei], numeric));
    }
    let model_ok = model_worst < 1e-3;

    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient suite",
        layers_ok && model_ok && elapsed < 60.0,
        &format!(
            "layer max rel err {worst:.2e}, model max rel err {model_worst:.2e}, {elapsed:.1}s"
        ),
    );
}

/// Brute-force cross-correlation with same padding, written as plain
/// quadruple loops over output positions; the backward pass loops over
/// input positions instead so the index arithmetic is derived separately.
mod conv_oracle {
    pub fn forward(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        n: usize,
        h: usize,
        wd: usize,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Vec<f64> {
        let half = (k - 1) / 2;
        let mut y = vec![0.0; n * h * wd * cout];
        for bi in 0..n {
            for oy in 0..h {
                for ox in 0..wd {
                    for co in 0..cout {
                        let mut acc = b[co];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - half as isize;
                                let ix = ox as isize + kx as isize - half as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xi = ((bi * h + iy as usize) * wd + ix as usize) * cin + ci;
                                    let wi = ((ky * k + kx) * cin + ci) * cout + co;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        y[((bi * h + oy) * wd + ox) * cout + co] = acc;
                    }
                }
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        x: &[f64],
        w: &[f64],
        dy: &[f64],
        n: usize,
        h: usize,
        wd: usize,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let half = (k - 1) / 2;
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        // dx: each input position receives from the outputs it fed.
        for bi in 0..n {
            for iy in 0..h {
                for ix in 0..wd {
                    for ci in 0..cin {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = iy as isize - (ky as isize - half as isize);
                                let ox = ix as isize - (kx as isize - half as isize);
                                if oy < 0 || oy >= h as isize || ox < 0 || ox >= wd as isize {
                                    continue;
                                }
                                for co in 0..cout {
                                    let yi =
                                        ((bi * h + oy as usize) * wd + ox as usize) * cout + co;
                                    let wi = ((ky * k + kx) * cin + ci) * cout + co;
                                    acc += dy[yi] * w[wi];
                                }
                            }
                        }
                        dx[((bi * h + iy) * wd + ix) * cin + ci] = acc;
                    }
                }
            }
        }
        // dw and db: accumulate over every output position.
        for bi in 0..n {
            for oy in 0..h {
                for ox in 0..wd {
                    for co in 0..cout {
                        let g = dy[((bi * h + oy) * wd + ox) * cout + co];
                        db[co] += g;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - half as isize;
                                let ix = ox as isize + kx as isize - half as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xi = ((bi * h + iy as usize) * wd + ix as usize) * cin + ci;
                                    let wi = ((ky * k + kx) * cin + ci) * cout + co;
                                    dw[wi] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

// Criterion 2: conv2d forward and backward match the loop oracle within
// 1e-6 relative for kernel sizes 1, 3, 5, 7 and 9.
#[test]
fn criterion_2_convolution_oracle() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut r = rng(1234);
    for &k in &[1usize, 3, 5, 7, 9] {
        for cin in 1..=4usize {
            for cout in 1..=4usize {
                let (n, h, w) = (2, 11, 10);
                let x = rand_vec(n * h * w * cin, &mut r);
                let wts = rand_vec(k * k * cin * cout, &mut r);
                let b = rand_vec(cout, &mut r);
                let dy = rand_vec(n * h * w * cout, &mut r);

                let xt = Tensor4::from_vec(n, h, w, cin, x.clone());
                let y = nn::conv2d_forward(&xt, &wts, &b, k, cin, cout);
                let y_oracle = conv_oracle::forward(&x, &wts, &b, n, h, w, cin, cout, k);
                for (a, o) in y.data.iter().zip(&y_oracle) {
                    worst = worst.max(rel_err(*a, *o));
                }

                let dyt = Tensor4::from_vec(n, h, w, cout, dy.clone());
                let (dx, dw, db) = nn::conv2d_backward(&xt, &wts, &dyt, k, cin, cout);
                let (odx, odw, odb) =
                    conv_oracle::backward(&x, &wts, &dy, n, h, w, cin, cout, k);
                for (a, o) in dx.data.iter().zip(&odx) {
                    worst = worst.max(rel_err(*a, *o));
                }
                for (a, o) in dw.iter().zip(&odw) {
                    worst = worst.max(rel_err(*a, *o));
                }
                for (a, o) in db.iter().zip(&odb) {
                    worst = worst.max(rel_err(*a, *o));
                }
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        2,
        "convolution oracle",
        worst < 1e-6 && elapsed < 60.0,
        &format!("max rel err {worst:.2e}, {elapsed:.1}s"),
    );
}

// Criterion 3: the hand-derived confusion-matrix values, plus the perfect
// matrix scoring 100 everywhere.
#[test]
fn criterion_3_metrics_oracle() {
    let cm = ConfusionMatrix::from_counts(
        vec!["a".into(), "b".into()],
        vec![9, 1, 2, 8],
    )
    .unwrap();
    let oa = cm.overall_accuracy().unwrap();
    let kappa = cm.cohen_kappa().unwrap();
    let aa = cm.average_accuracy().unwrap();

    let perfect = ConfusionMatrix::from_counts(
        vec!["a".into(), "b".into(), "c".into()],
        vec![5, 0, 0, 0, 7, 0, 0, 0, 2],
    )
    .unwrap();
    let all_100 = perfect.overall_accuracy().unwrap() == 100.0
        && perfect.cohen_kappa().unwrap() == 100.0
        && perfect.average_accuracy().unwrap() == 100.0;

    verdict(
        3,
        "metrics oracle",
        (oa - 85.0).abs() < 1e-9
            && (kappa - 70.0).abs() < 1e-9
            && (aa - 85.0).abs() < 1e-9
            && all_100,
        &format!("OA {oa:.2}, Kappa {kappa:.2}, AA {aa:.2}"),
    );
}

/// Cyclic Jacobi eigensolver over plain `Vec` rows: an implementation of
/// symmetric eigendecomposition independent of the library's backend.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (aip, aiq) = (a[i][p], a[i][q]);
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let (apj, aqj) = (a[p][j], a[q][j]);
                    a[p][j] = c * apj - s * aqj;
                    a[q][j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let (vip, viq) = (v[i][p], v[i][q]);
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].partial_cmp(&a[x][x]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&j| (0..n).map(|i| v[i][j]).collect())
        .collect();
    (values, vectors)
}

/// Recovers the fitted loading matrix through the public transform:
/// `transform(x) = (x - mean) L`, so rows of `transform(I) - transform(0)`
/// are the rows of L.
fn extract_loadings(d: &decompose::Decomposer, bands: usize, c: usize) -> Vec<Vec<f64>> {
    let eye = DMatrix::<f64>::identity(bands, bands);
    let zero = DMatrix::<f64>::zeros(1, bands);
    let se = d.transform(&eye).unwrap();
    let sz = d.transform(&zero).unwrap();
    (0..bands)
        .map(|b| (0..c).map(|j| se[(b, j)] - sz[(0, j)]).collect())
        .collect()
}

// Criterion 4: decomposition suite with an independent eigensolver
// oracle, rank recovery, and monotone FA/NMF objectives.
#[test]
fn criterion_4_decomposition_suite() {
    let started = Instant::now();
    let bands = 8;
    let n = 200;
    let rank = 3;
    let mut r = rng(42);

    // Low-rank data with small noise.
    let basis = DMatrix::from_fn(rank, bands, |_, _| r.gen_range(-1.0..1.0f64));
    let coeff = DMatrix::from_fn(n, rank, |_, _| r.gen_range(-1.0..1.0f64));
    let noise = DMatrix::from_fn(n, bands, |_, _| r.gen_range(-1e-4..1e-4f64));
    let x = &coeff * &basis + noise;

    // PCA against the Jacobi oracle: same covariance eigenvalues, aligned
    // eigenvectors (up to sign).
    let pca = decompose::fit(Method::Pca, &x, rank, 0).unwrap();
    let mean: Vec<f64> = (0..bands)
        .map(|b| x.column(b).sum() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0; bands]; bands];
    for i in 0..bands {
        for j in 0..bands {
            let mut acc = 0.0;
            for row in 0..n {
                acc += (x[(row, i)] - mean[i]) * (x[(row, j)] - mean[j]);
            }
            cov[i][j] = acc / (n as f64 - 1.0);
        }
    }
    let (evals, evecs) = jacobi_eigen(cov);
    let loadings = extract_loadings(&pca, bands, rank);
    let mut pca_ok = true;
    for c in 0..rank {
        if rel_err(pca.explained[c], evals[c]) > 1e-8 {
            pca_ok = false;
        }
        let dot: f64 = (0..bands).map(|b| loadings[b][c] * evecs[c][b]).sum();
        if (dot.abs() - 1.0).abs() > 1e-8 {
            pca_ok = false;
        }
    }

    // Rank recovery: with `rank` components the reconstruction residual is
    // at the noise floor for both PCA and TSVD.
    let mut recon_ok = true;
    for method in [Method::Pca, Method::Tsvd] {
        let d = decompose::fit(method, &x, rank, 0).unwrap();
        let xhat = d.inverse_transform(&d.transform(&x).unwrap());
        let resid = (&x - &xhat).norm() / x.norm();
        if resid > 1e-3 {
            recon_ok = false;
        }
    }

    // FA: log-likelihood history is monotone non-decreasing.
    let fa = decompose::fit(Method::Fa, &x, rank, 0).unwrap();
    let fa_ok = !fa.history.is_empty()
        && fa.history.windows(2).all(|w| w[1] >= w[0] - 1e-9);

    // NMF: objective monotone non-increasing, factors nonnegative.
    let xpos = x.map(|v| v.abs() + 0.1);
    let nmf = decompose::fit(Method::Nmf, &xpos, rank, 3).unwrap();
    let nmf_monotone = !nmf.history.is_empty()
        && nmf.history.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    let w_loadings = extract_loadings(&nmf, bands, rank);
    let nmf_nonneg = w_loadings.iter().flatten().all(|&v| v >= 0.0);
    let scores = nmf.transform(&xpos).unwrap();
    let scores_nonneg = scores.iter().all(|&v| v >= 0.0);

    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        4,
        "decomposition suite",
        pca_ok && recon_ok && fa_ok && nmf_monotone && nmf_nonneg && scores_nonneg && elapsed < 120.0,
        &format!(
            "pca-oracle {pca_ok}, rank {recon_ok}, fa-monotone {fa_ok}, \
             nmf-monotone {nmf_monotone}, nonneg {}, {elapsed:.1}s",
            nmf_nonneg && scores_nonneg
        ),
    );
}

struct DeskScaleRun {
    report_a: String,
    report_b: String,
    oa: f64,
    kappa: f64,
    seconds: f64,
}

fn desk_scale() -> &'static DeskScaleRun {
    static RUN: OnceLock<DeskScaleRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let started = Instant::now();
        let run = || -> (String, f64, f64) {
            let (cube, labels) =
                generate_synthetic_scene(64, 64, 32, 6, 12, 0.05, 2024).unwrap();
            let x = cube_to_matrix(&cube);
            let d = decompose::fit(Method::Fa, &x, 6, 2024).unwrap();
            let reduced = decompose::transform_cube(&d, &cube).unwrap();
            let tiles = build_dataset(&reduced, &labels, 9).unwrap();
            let (train_tiles, test_tiles) = stratified_split(&tiles, 0.3, 2024).unwrap();
            let spec = NetworkSpec {
                input_size: 9,
                input_channels: 6,
                hsi_filters: None,
                module_a: vec![],
                max_filter_size: 5,
                branch_units: 16,
                nin_before: None,
                nin_after: None,
                avg_pool_size: 2,
                crop_enabled: true,
                dense_units: (64, 32),
                dropout_rate: 0.2,
                l2_coeff: 1e-4,
                num_classes: 6,
            };
            let mut model: Model<f32> = build(&spec, 2024).unwrap();
            let cfg = TrainConfig {
                optimizer: OptimizerKind::Adadelta,
                learning_rate: 0.1,
                batch_size: 64,
                max_epochs: 500,
                patience: 10,
                val_fraction: 0.1,
                seed: 2024,
                monitor: Monitor::ValAccuracy,
            };
            train(&mut model, &train_tiles, &cfg).unwrap();
            let (cm, _) = evaluate(&model, &test_tiles).unwrap();
            let report = render_report(&cm).unwrap();
            (
                report,
                cm.overall_accuracy().unwrap(),
                cm.cohen_kappa().unwrap(),
            )
        };
        let (report_a, oa, kappa) = run();
        let (report_b, _, _) = run();
        DeskScaleRun {
            report_a,
            report_b,
            oa,
            kappa,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

// Criterion 5: desk-scale end-to-end run reaches OA >= 95 and
// Kappa >= 93 on the 70% test split in under ten minutes.
#[test]
fn criterion_5_desk_scale_end_to_end() {
    let run = desk_scale();
    // Both pipeline executions share the ten-minute budget.
    verdict(
        5,
        "desk-scale end-to-end",
        run.oa >= 95.0 && run.kappa >= 93.0 && run.seconds < 600.0,
        &format!(
            "OA {:.2}, Kappa {:.2}, {:.0}s for two runs",
            run.oa, run.kappa, run.seconds
        ),
    );
}

// Criterion 6: a 40-tile subset is memorized perfectly within 200 epochs.
#[test]
fn criterion_6_overfit_sanity() {
    let (cube, labels) = generate_synthetic_scene(32, 32, 8, 4, 8, 0.05, 7).unwrap();
    let x = cube_to_matrix(&cube);
    let d = decompose::fit(Method::Pca, &x, 4, 7).unwrap();
    let reduced = decompose::transform_cube(&d, &cube).unwrap();
    let tiles = build_dataset(&reduced, &labels, 5).unwrap();
    // 10 tiles per class, 40 total.
    let mut keep = Vec::new();
    let mut counts = [0usize; 5];
    for t in &tiles.tiles {
        if counts[t.label as usize] < 10 {
            counts[t.label as usize] += 1;
            keep.push(t.clone());
        }
    }
    assert_eq!(keep.len(), 40);
    let subset = TileSet {
        tiles: keep,
        class_counts: {
            let mut c = vec![0; 5];
            for k in 1..=4 {
                c[k] = 10;
            }
            c
        },
        ..tiles.clone()
    };

    let spec = NetworkSpec {
        input_size: 5,
        input_channels: 4,
        hsi_filters: None,
        module_a: vec![],
        max_filter_size: 3,
        branch_units: 8,
        nin_before: None,
        nin_after: None,
        avg_pool_size: 2,
        crop_enabled: true,
        dense_units: (32, 16),
        dropout_rate: 0.0,
        l2_coeff: 0.0,
        num_classes: 4,
    };
    let mut model: Model<f32> = build(&spec, 7).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 0.002,
        batch_size: 8,
        max_epochs: 200,
        patience: 200,
        val_fraction: 0.0,
        seed: 7,
        monitor: Monitor::TrainLoss,
    };
    let history = train(&mut model, &subset, &cfg).unwrap();
    let (cm, _) = evaluate(&model, &subset).unwrap();
    let oa = cm.overall_accuracy().unwrap();
    verdict(
        6,
        "overfit sanity",
        oa == 100.0 && history.stopped_epoch <= 200,
        &format!("training OA {oa:.2} after {} epochs", history.stopped_epoch),
    );
}

// Criterion 7: the desk-scale pipeline is bit-deterministic; two
// identically seeded runs render identical metrics reports.
#[test]
fn criterion_7_determinism() {
    let run = desk_scale();
    verdict(
        7,
        "determinism",
        run.report_a == run.report_b,
        &format!("{} report bytes", run.report_a.len()),
    );
}

// Criterion 8: with a monitor frozen after epoch 1, training stops at
// exactly best_epoch + patience and carries the best weights.
#[test]
fn criterion_8_early_stopping() {
    let (cube, labels) = generate_synthetic_scene(24, 24, 4, 3, 6, 0.02, 11).unwrap();
    let tiles = build_dataset(&cube, &labels, 5).unwrap();
    let spec = NetworkSpec {
        input_size: 5,
        input_channels: 4,
        hsi_filters: None,
        module_a: vec![],
        max_filter_size: 3,
        branch_units: 4,
        nin_before: None,
        nin_after: None,
        avg_pool_size: 2,
        crop_enabled: true,
        dense_units: (16, 16),
        dropout_rate: 0.0,
        l2_coeff: 0.0,
        num_classes: 3,
    };
    let mut model: Model<f32> = build(&spec, 11).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e-12, // effectively frozen: the monitor plateaus
        batch_size: 16,
        max_epochs: 100,
        patience: 6,
        val_fraction: 0.2,
        seed: 11,
        monitor: Monitor::ValAccuracy,
    };
    let history = train(&mut model, &tiles, &cfg).unwrap();

    // The restored weights reproduce the recorded best monitor value.
    let (_, val) = stratified_split(&tiles, 1.0 - cfg.val_fraction, cfg.seed ^ 0x5eed).unwrap();
    let (cm, _) = evaluate(&model, &val).unwrap();
    let monitor_now = cm.overall_accuracy().unwrap();

    verdict(
        8,
        "early stopping",
        history.best_epoch == 1
            && history.stopped_epoch == history.best_epoch + cfg.patience
            && (monitor_now - history.best_monitor).abs() < 1e-9,
        &format!(
            "best {}, stopped {}, monitor {:.4} vs recorded {:.4}",
            history.best_epoch, history.stopped_epoch, monitor_now, history.best_monitor
        ),
    );
}

// Criterion 9: the published full-dataset accuracy figures are declared
// out of scope at desk scale; the README documents the conversion and
// long-running check procedure instead.
#[test]
fn criterion_9_full_scale_declared_not_reproduced() {
    let readme = include_str!("../../../README.md");
    let documented = readme.contains("long-running check") && readme.contains("not CI");
    verdict(
        9,
        "full-scale results declared out of scope",
        documented,
        "full-dataset runs are a documented manual procedure, not part of this suite",
    );
}
