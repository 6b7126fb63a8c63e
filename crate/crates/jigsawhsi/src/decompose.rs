//! Spectral dimensionality reduction: PCA, factor analysis, truncated SVD
//! and non-negative matrix factorization, mapping an (H*W) x B pixel matrix
//! down to c components.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::io::HsiCube;

const FA_MAX_ITER: usize = 1000;
const FA_TOL: f64 = 1e-3;
const NMF_MAX_ITER: usize = 200;
const NMF_TOL: f64 = 1e-4;
const NMF_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("components {components} exceed limit {limit} ({what})")]
    TooManyComponents {
        components: usize,
        limit: usize,
        what: &'static str,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("band count mismatch: decomposer fitted on {expected} bands, input has {actual}")]
    BandMismatch { expected: usize, actual: usize },
    #[error("unknown decomposition method `{0}` (expected PCA, FA, SVD or NMF)")]
    UnknownMethod(String),
    #[error("{path}: {msg}")]
    Serde { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Pca,
    Fa,
    Tsvd,
    Nmf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pca => "PCA",
            Method::Fa => "FA",
            Method::Tsvd => "SVD",
            Method::Nmf => "NMF",
        }
    }
}

impl FromStr for Method {
    type Err = DecomposeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PCA" => Ok(Method::Pca),
            "FA" => Ok(Method::Fa),
            "SVD" | "TSVD" => Ok(Method::Tsvd),
            "NMF" => Ok(Method::Nmf),
            other => Err(DecomposeError::UnknownMethod(other.to_string())),
        }
    }
}

/// A fitted reduction. Immutable once fitted; `transform` never mutates.
#[derive(Debug, Clone)]
pub struct Decomposer {
    pub method: Method,
    pub components: usize,
    pub bands: usize,
    /// Column means (PCA/FA); zeros for TSVD/NMF.
    mean: DVector<f64>,
    /// B x c loading/basis matrix (PCA/TSVD loadings, FA factor loadings,
    /// NMF basis).
    loadings: DMatrix<f64>,
    /// FA diagonal noise variances; empty otherwise.
    noise: DVector<f64>,
    /// Added to every element before NMF when the input has negatives.
    pub shift: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Final fit objective: total explained variance (PCA/TSVD),
    /// log-likelihood (FA), Frobenius residual (NMF).
    pub objective: f64,
    /// PCA eigenvalues / TSVD singular values, descending; empty for FA/NMF.
    pub explained: Vec<f64>,
    /// Objective value after each iteration (FA/NMF), for convergence
    /// inspection.
    pub history: Vec<f64>,
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

fn center(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

/// Symmetric eigendecomposition with eigenvalues sorted descending and a
/// deterministic sign convention (largest-magnitude loading positive).
fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(m.nrows(), order.len());
    for (j, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        fix_sign(&mut col);
        vectors.set_column(j, &col);
    }
    (values, vectors)
}

fn fix_sign(col: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..col.len() {
        if col[i].abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        *col = -&*col;
    }
}

fn check_components(c: usize, x: &DMatrix<f64>) -> Result<(), DecomposeError> {
    if c == 0 {
        return Err(DecomposeError::Degenerate("components must be >= 1".into()));
    }
    if c > x.ncols() {
        return Err(DecomposeError::TooManyComponents {
            components: c,
            limit: x.ncols(),
            what: "bands",
        });
    }
    if c > x.nrows() {
        return Err(DecomposeError::TooManyComponents {
            components: c,
            limit: x.nrows(),
            what: "samples",
        });
    }
    Ok(())
}

/// Fits a decomposition on an N x B sample matrix. Deterministic for a
/// fixed seed (only NMF consumes randomness).
pub fn fit(
    method: Method,
    x: &DMatrix<f64>,
    components: usize,
    seed: u64,
) -> Result<Decomposer, DecomposeError> {
    check_components(components, x)?;
    match method {
        Method::Pca => fit_pca(x, components, seed),
        Method::Tsvd => fit_tsvd(x, components, seed),
        Method::Fa => fit_fa(x, components, seed),
        Method::Nmf => fit_nmf(x, components, seed),
    }
}

fn fit_pca(x: &DMatrix<f64>, c: usize, seed: u64) -> Result<Decomposer, DecomposeError> {
    let bands = x.ncols();
    let mean = column_means(x);
    let xc = center(x, &mean);
    let denom = (x.nrows().max(2) - 1) as f64;
    let cov = xc.transpose() * &xc / denom;
    let (values, vectors) = sorted_eigen(&cov);
    let loadings = vectors.columns(0, c).clone_owned();
    let explained: Vec<f64> = values[..c].iter().map(|v| v.max(0.0)).collect();
    Ok(Decomposer {
        method: Method::Pca,
        components: c,
        bands,
        mean,
        loadings,
        noise: DVector::zeros(0),
        shift: 0.0,
        seed,
        iterations: 1,
        objective: explained.iter().sum(),
        explained,
        history: Vec::new(),
    })
}

fn fit_tsvd(x: &DMatrix<f64>, c: usize, seed: u64) -> Result<Decomposer, DecomposeError> {
    let bands = x.ncols();
    let svd = SVD::new(x.clone(), false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| DecomposeError::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let mut loadings = DMatrix::zeros(bands, c);
    let mut explained = Vec::with_capacity(c);
    for (j, &i) in order.iter().take(c).enumerate() {
        let mut col = v_t.row(i).transpose();
        fix_sign(&mut col);
        loadings.set_column(j, &col);
        explained.push(svd.singular_values[i]);
    }
    Ok(Decomposer {
        method: Method::Tsvd,
        components: c,
        bands,
        mean: DVector::zeros(bands),
        loadings,
        noise: DVector::zeros(0),
        shift: 0.0,
        seed,
        iterations: 1,
        objective: explained.iter().sum(),
        explained,
        history: Vec::new(),
    })
}

/// Maximum-likelihood factor analysis, x ~ N(mu, L L^T + Psi), fit by EM
/// with a diagonal noise model.
fn fit_fa(x: &DMatrix<f64>, c: usize, seed: u64) -> Result<Decomposer, DecomposeError> {
    let n = x.nrows() as f64;
    let bands = x.ncols();
    let mean = column_means(x);
    let xc = center(x, &mean);
    let s = xc.transpose() * &xc / n;
    if s.diagonal().iter().all(|&v| v < 1e-12) {
        return Err(DecomposeError::Degenerate(
            "zero variance in all bands".into(),
        ));
    }

    // Init from the principal axes.
    let (values, vectors) = sorted_eigen(&s);
    let mut loadings = DMatrix::zeros(bands, c);
    for j in 0..c {
        let scale = values[j].max(0.0).sqrt();
        loadings.set_column(j, &(vectors.column(j) * scale));
    }
    let mut psi = DVector::from_iterator(
        bands,
        (0..bands).map(|i| {
            let resid = s[(i, i)] - loadings.row(i).iter().map(|v| v * v).sum::<f64>();
            resid.max(1e-10)
        }),
    );

    let log_likelihood = |l: &DMatrix<f64>, p: &DVector<f64>| -> f64 {
        let mut sigma = l * l.transpose();
        for i in 0..bands {
            sigma[(i, i)] += p[i];
        }
        let chol = Cholesky::new(sigma).expect("FA covariance not positive definite");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let trace = chol.solve(&s).trace();
        -0.5 * n * (bands as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + trace)
    };

    let mut history = Vec::new();
    let mut ll = log_likelihood(&loadings, &psi);
    history.push(ll);
    let mut iterations = 0;
    for _ in 0..FA_MAX_ITER {
        iterations += 1;
        // E-step quantities: beta = G L^T Psi^{-1}, G = (I + L^T Psi^{-1} L)^{-1}.
        let mut lt_psi_inv = loadings.transpose();
        for j in 0..bands {
            let inv = 1.0 / psi[j];
            for i in 0..c {
                lt_psi_inv[(i, j)] *= inv;
            }
        }
        let g = (DMatrix::identity(c, c) + &lt_psi_inv * &loadings)
            .try_inverse()
            .ok_or_else(|| DecomposeError::Degenerate("singular FA posterior".into()))?;
        let beta = &g * &lt_psi_inv;
        let beta_s = &beta * &s;
        let ezz = &g + &beta_s * beta.transpose();
        // M-step.
        let new_loadings = beta_s.transpose()
            * ezz
                .clone()
                .try_inverse()
                .ok_or_else(|| DecomposeError::Degenerate("singular FA moment matrix".into()))?;
        let lbs = &new_loadings * &beta_s;
        for i in 0..bands {
            psi[i] = (s[(i, i)] - lbs[(i, i)]).max(1e-10);
        }
        loadings = new_loadings;

        let new_ll = log_likelihood(&loadings, &psi);
        history.push(new_ll);
        let gain = new_ll - ll;
        ll = new_ll;
        if gain.abs() < FA_TOL {
            break;
        }
    }

    Ok(Decomposer {
        method: Method::Fa,
        components: c,
        bands,
        mean,
        loadings,
        noise: psi,
        shift: 0.0,
        seed,
        iterations,
        objective: ll,
        explained: Vec::new(),
        history,
    })
}

fn nmf_init(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen::<f64>() * scale)
}

fn nmf_objective(x: &DMatrix<f64>, w: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let resid = x - w * h.transpose();
    resid.norm()
}

/// One multiplicative update of the coefficient matrix W against a frozen
/// basis H, for X ~ W H^T.
fn nmf_update_w(x: &DMatrix<f64>, w: &mut DMatrix<f64>, h: &DMatrix<f64>) {
    let xh = x * h;
    let hth = h.transpose() * h;
    let denom = &*w * hth;
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            w[(i, j)] *= xh[(i, j)] / (denom[(i, j)] + NMF_EPS);
        }
    }
}

fn fit_nmf(x: &DMatrix<f64>, c: usize, seed: u64) -> Result<Decomposer, DecomposeError> {
    let bands = x.ncols();
    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { -min } else { 0.0 };
    let x = x.add_scalar(shift);
    let mean = x.sum() / (x.nrows() * x.ncols()) as f64;
    let scale = (mean / c as f64).max(1e-12).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = nmf_init(x.nrows(), c, scale, &mut rng);
    let mut h = nmf_init(bands, c, scale, &mut rng);

    let mut history = Vec::new();
    let mut obj = nmf_objective(&x, &w, &h);
    history.push(obj);
    let mut iterations = 0;
    for _ in 0..NMF_MAX_ITER {
        iterations += 1;
        nmf_update_w(&x, &mut w, &h);
        // Same update for H on the transposed problem X^T ~ H W^T.
        let xt = x.transpose();
        nmf_update_w(&xt, &mut h, &w);

        let new_obj = nmf_objective(&x, &w, &h);
        history.push(new_obj);
        let rel = (obj - new_obj).abs() / obj.max(1e-12);
        obj = new_obj;
        if rel < NMF_TOL {
            break;
        }
    }

    Ok(Decomposer {
        method: Method::Nmf,
        components: c,
        bands,
        mean: DVector::zeros(bands),
        loadings: h,
        noise: DVector::zeros(0),
        shift,
        seed,
        iterations,
        objective: obj,
        explained: Vec::new(),
        history,
    })
}

impl Decomposer {
    /// Projects an N x B matrix to N x c scores.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DecomposeError> {
        if x.ncols() != self.bands {
            return Err(DecomposeError::BandMismatch {
                expected: self.bands,
                actual: x.ncols(),
            });
        }
        match self.method {
            Method::Pca => Ok(center(x, &self.mean) * &self.loadings),
            Method::Tsvd => Ok(x * &self.loadings),
            Method::Fa => {
                // (L^T Psi^{-1} L + I)^{-1} L^T Psi^{-1} (x - mu)
                let c = self.components;
                let mut lt_psi_inv = self.loadings.transpose();
                for j in 0..self.bands {
                    let inv = 1.0 / self.noise[j];
                    for i in 0..c {
                        lt_psi_inv[(i, j)] *= inv;
                    }
                }
                let g = (DMatrix::identity(c, c) + &lt_psi_inv * &self.loadings)
                    .try_inverse()
                    .ok_or_else(|| DecomposeError::Degenerate("singular FA posterior".into()))?;
                let beta = g * lt_psi_inv;
                Ok(center(x, &self.mean) * beta.transpose())
            }
            Method::Nmf => {
                let x = x.add_scalar(self.shift);
                let mean = x.sum() / (x.nrows() * x.ncols()) as f64;
                let scale = (mean / self.components as f64).max(1e-12).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut w = nmf_init(x.nrows(), self.components, scale, &mut rng);
                let mut prev = nmf_objective(&x, &w, &self.loadings);
                for _ in 0..NMF_MAX_ITER {
                    nmf_update_w(&x, &mut w, &self.loadings);
                    let obj = nmf_objective(&x, &w, &self.loadings);
                    let rel = (prev - obj).abs() / prev.max(1e-12);
                    prev = obj;
                    if rel < NMF_TOL {
                        break;
                    }
                }
                Ok(w)
            }
        }
    }

    /// Maps scores back to band space (PCA/TSVD/NMF reconstruction).
    pub fn inverse_transform(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        match self.method {
            Method::Pca | Method::Fa => {
                let mut out = scores * self.loadings.transpose();
                for mut row in out.row_iter_mut() {
                    row += self.mean.transpose();
                }
                out
            }
            Method::Tsvd => scores * self.loadings.transpose(),
            Method::Nmf => (scores * self.loadings.transpose()).add_scalar(-self.shift),
        }
    }
}

/// Flattens a cube to its (H*W) x B pixel matrix, row-major over pixels.
pub fn cube_to_matrix(cube: &HsiCube) -> DMatrix<f64> {
    let plane = cube.height * cube.width;
    DMatrix::from_fn(plane, cube.bands, |pix, b| {
        cube.data()[b * plane + pix] as f64
    })
}

fn matrix_to_cube(m: &DMatrix<f64>, height: usize, width: usize) -> HsiCube {
    let plane = height * width;
    let bands = m.ncols();
    let mut data = vec![0f32; plane * bands];
    for b in 0..bands {
        for pix in 0..plane {
            data[b * plane + pix] = m[(pix, b)] as f32;
        }
    }
    HsiCube::new(height, width, bands, data).expect("shape by construction")
}

/// Fits on all pixels of the cube and returns the reduced H x W x c cube
/// together with the fitted decomposer for prediction-time reuse.
pub fn reduce_cube(
    cube: &HsiCube,
    method: Method,
    components: usize,
    seed: u64,
) -> Result<(HsiCube, Decomposer), DecomposeError> {
    let x = cube_to_matrix(cube);
    let d = fit(method, &x, components, seed)?;
    let scores = d.transform(&x)?;
    Ok((matrix_to_cube(&scores, cube.height, cube.width), d))
}

/// Applies an already-fitted decomposer to a cube.
pub fn transform_cube(d: &Decomposer, cube: &HsiCube) -> Result<HsiCube, DecomposeError> {
    let x = cube_to_matrix(cube);
    let scores = d.transform(&x)?;
    Ok(matrix_to_cube(&scores, cube.height, cube.width))
}

/// Serializes a decomposer as a text header plus a little-endian float64
/// payload, bit-exact on round trip.
pub fn save_decomposer(d: &Decomposer, path: &Path) -> Result<(), DecomposeError> {
    let header = format!(
        "# jigsawhsi decomposer\nmethod={}\ncomponents={}\nbands={}\nshift={}\nseed={}\niterations={}\nobjective={}\nnoise_len={}\nexplained_len={}\n",
        d.method.name(),
        d.components,
        d.bands,
        d.shift.to_bits(),
        d.seed,
        d.iterations,
        d.objective.to_bits(),
        d.noise.len(),
        d.explained.len(),
    );
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |vals: &mut dyn Iterator<Item = f64>| {
        for v in vals {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    push(&mut d.mean.iter().copied());
    // loadings row-major
    push(&mut (0..d.bands).flat_map(|i| (0..d.components).map(move |j| (i, j)))
        .map(|(i, j)| d.loadings[(i, j)]));
    push(&mut d.noise.iter().copied());
    push(&mut d.explained.iter().copied());
    fs::write(path, header).map_err(|e| DecomposeError::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    let raw = path.with_extension("raw");
    fs::write(&raw, payload).map_err(|e| DecomposeError::File {
        path: raw.clone(),
        source: e,
    })
}

pub fn load_decomposer(path: &Path) -> Result<Decomposer, DecomposeError> {
    let serr = |msg: String| DecomposeError::Serde {
        path: path.to_path_buf(),
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| DecomposeError::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| serr(format!("bad header line `{line}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| {
        kv.get(key)
            .cloned()
            .ok_or_else(|| serr(format!("missing key `{key}`")))
    };
    let parse_usize =
        |key: &str| -> Result<usize, DecomposeError> {
            get(key)?.parse().map_err(|_| serr(format!("bad `{key}`")))
        };
    let method: Method = get("method")?.parse()?;
    let components = parse_usize("components")?;
    let bands = parse_usize("bands")?;
    let noise_len = parse_usize("noise_len")?;
    let explained_len = parse_usize("explained_len")?;
    let shift = f64::from_bits(
        get("shift")?
            .parse::<u64>()
            .map_err(|_| serr("bad `shift`".into()))?,
    );
    let objective = f64::from_bits(
        get("objective")?
            .parse::<u64>()
            .map_err(|_| serr("bad `objective`".into()))?,
    );
    let seed: u64 = get("seed")?.parse().map_err(|_| serr("bad `seed`".into()))?;
    let iterations = parse_usize("iterations")?;

    let raw = path.with_extension("raw");
    let bytes = fs::read(&raw).map_err(|e| DecomposeError::File {
        path: raw.clone(),
        source: e,
    })?;
    let expected = (bands + bands * components + noise_len + explained_len) * 8;
    if bytes.len() != expected {
        return Err(serr(format!(
            "payload holds {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut vals = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mean = DVector::from_iterator(bands, vals.by_ref().take(bands));
    let mut loadings = DMatrix::zeros(bands, components);
    for i in 0..bands {
        for j in 0..components {
            loadings[(i, j)] = vals.next().unwrap();
        }
    }
    let noise = DVector::from_iterator(noise_len, vals.by_ref().take(noise_len));
    let explained: Vec<f64> = vals.by_ref().take(explained_len).collect();

    Ok(Decomposer {
        method,
        components,
        bands,
        mean,
        loadings,
        noise,
        shift,
        seed,
        iterations,
        objective,
        explained,
        history: Vec::new(),
    })
}
