use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FactorError;
use crate::readout::{grouped_split, ProbeDataset};
use crate::stats::{mean, sample_std};

pub const ENCODER_VERSION: u32 = 1;
const FACTOR: usize = 8;
const OUT: usize = 2 * FACTOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Control {
    None,
    ShuffleDelta,
    ShuffleCursor,
}

impl Control {
    pub const ALL: [Control; 3] = [Control::None, Control::ShuffleDelta, Control::ShuffleCursor];

    pub fn as_str(self) -> &'static str {
        match self {
            Control::None => "none",
            Control::ShuffleDelta => "shuffle-delta",
            Control::ShuffleCursor => "shuffle-cursor",
        }
    }
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Control {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown control {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub w_delta: f64,
    pub w_cursor: f64,
    pub w_leak: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of training groups held out for early stopping.
    pub val_fraction: f64,
    /// Ridge added to the batch Gram matrix of the leakage fit, per row.
    pub leak_ridge: f64,
    /// Multiplier on the 1/√fan_in standard deviation of the first layer.
    pub init_scale: f64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            batch_size: 256,
            learning_rate: 3e-3,
            w_delta: 1.0,
            w_cursor: 1.0,
            w_leak: 0.1,
            patience: 50,
            val_fraction: 0.2,
            leak_ridge: 1e-3,
            init_scale: 1.0,
        }
    }
}

impl FactorConfig {
    /// Parses a TOML table; missing keys take their defaults.
    pub fn from_toml_str(s: &str) -> Result<Self, FactorError> {
        let cfg: Self = toml::from_str(s).map_err(|e| FactorError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), FactorError> {
        let bad = |m: &str| Err(FactorError::Config(m.to_string()));
        if self.hidden == 0 || self.batch_size == 0 {
            return bad("hidden width and batch size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if [self.w_delta, self.w_cursor, self.w_leak, self.leak_ridge]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return bad("loss weights must be finite and nonnegative");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Params {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    au: DVector<f64>,
    cu: DVector<f64>,
    av: DVector<f64>,
    cv: DVector<f64>,
}

impl Params {
    fn init(d: usize, hidden: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut gauss = |rows: usize, cols: usize, fan_in: usize, scale: f64| {
            let n = Normal::new(0.0, scale / (fan_in as f64).sqrt()).expect("positive std");
            DMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
        };
        let w1 = gauss(hidden, d, d.max(1), scale);
        let w2 = gauss(OUT, hidden, hidden, 1.0);
        let au = gauss(FACTOR, 1, FACTOR, 1.0);
        let av = gauss(FACTOR, 1, FACTOR, 1.0);
        Self {
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: DVector::zeros(OUT),
            au: DVector::from_column_slice(au.as_slice()),
            cu: DVector::zeros(1),
            av: DVector::from_column_slice(av.as_slice()),
            cv: DVector::zeros(1),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: DVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: DVector::zeros(self.b2.len()),
            au: DVector::zeros(FACTOR),
            cu: DVector::zeros(1),
            av: DVector::zeros(FACTOR),
            cv: DVector::zeros(1),
        }
    }

    fn slices(&self) -> [&[f64]; 8] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.au.as_slice(),
            self.cu.as_slice(),
            self.av.as_slice(),
            self.cv.as_slice(),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.au.as_mut_slice(),
            self.cu.as_mut_slice(),
            self.av.as_mut_slice(),
            self.cv.as_mut_slice(),
        ]
    }
}

struct Forward {
    h: DMatrix<f64>,
    z: DMatrix<f64>,
    yd: DVector<f64>,
    yp: DVector<f64>,
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        row += b.transpose();
    }
}

fn forward(p: &Params, x: &DMatrix<f64>) -> Forward {
    let mut a1 = x * p.w1.transpose();
    add_row_bias(&mut a1, &p.b1);
    let h = a1.map(f64::tanh);
    let mut z = &h * p.w2.transpose();
    add_row_bias(&mut z, &p.b2);
    let yd = z.columns(0, FACTOR) * &p.au + DVector::from_element(z.nrows(), p.cu[0]);
    let yp = z.columns(FACTOR, FACTOR) * &p.av + DVector::from_element(z.nrows(), p.cv[0]);
    Forward { h, z, yd, yp }
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    let n = m.nrows() as f64;
    for mut col in c.column_iter_mut() {
        let mu = col.sum() / n;
        col.add_scalar_mut(-mu);
    }
    c
}

/// In-batch ridge-regularized R² of `y` on the columns of `m`, with its
/// gradient with respect to `m`.
fn leak_r2(m: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> (f64, DMatrix<f64>) {
    let n = m.nrows();
    let mc = center_columns(m);
    let ybar = y.sum() / n as f64;
    let yc = y.add_scalar(-ybar);
    let sst = yc.dot(&yc);
    if sst <= 1e-12 || n < 2 {
        return (0.0, DMatrix::zeros(n, m.ncols()));
    }
    let mut a = mc.tr_mul(&mc);
    for j in 0..a.ncols() {
        a[(j, j)] += ridge * n as f64;
    }
    let rhs = mc.tr_mul(&yc);
    let beta = match a.cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => return (0.0, DMatrix::zeros(n, m.ncols())),
    };
    let fit = &mc * &beta;
    let r2 = yc.dot(&fit) / sst;
    // d(yᵀ P y)/dM = 2 r βᵀ with r = y − Mβ; centering passes through since r sums to zero.
    let resid = yc - fit;
    let grad = (resid * beta.transpose()) * (2.0 / sst);
    (r2, grad)
}

struct Batch<'a> {
    x: &'a DMatrix<f64>,
    td: &'a DVector<f64>,
    tp: &'a DVector<f64>,
}

/// Loss and (optionally) gradients on one batch.
fn loss_and_grad(p: &Params, b: &Batch<'_>, cfg: &FactorConfig, want_grad: bool) -> (f64, Option<Params>) {
    let n = b.x.nrows();
    let f = forward(p, b.x);
    let ed = &f.yd - b.td;
    let ep = &f.yp - b.tp;
    let ld = ed.dot(&ed) / n as f64;
    let lp = ep.dot(&ep) / n as f64;
    let u = f.z.columns(0, FACTOR).into_owned();
    let v = f.z.columns(FACTOR, FACTOR).into_owned();
    let use_leak = cfg.w_leak > 0.0 && n > 2 * FACTOR;
    let (r_dv, g_dv) = if use_leak { leak_r2(&v, b.td, cfg.leak_ridge) } else { (0.0, DMatrix::zeros(n, FACTOR)) };
    let (r_pu, g_pu) = if use_leak { leak_r2(&u, b.tp, cfg.leak_ridge) } else { (0.0, DMatrix::zeros(n, FACTOR)) };
    let loss = cfg.w_delta * ld + cfg.w_cursor * lp + cfg.w_leak * (r_dv + r_pu);
    if !want_grad {
        return (loss, None);
    }
    let gd = ed * (2.0 * cfg.w_delta / n as f64);
    let gp = ep * (2.0 * cfg.w_cursor / n as f64);
    let mut g = p.zeros_like();
    g.au = u.tr_mul(&gd);
    g.cu[0] = gd.sum();
    g.av = v.tr_mul(&gp);
    g.cv[0] = gp.sum();
    let du = &gd * p.au.transpose() + g_pu * cfg.w_leak;
    let dv = &gp * p.av.transpose() + g_dv * cfg.w_leak;
    let mut dz = DMatrix::zeros(n, OUT);
    dz.columns_mut(0, FACTOR).copy_from(&du);
    dz.columns_mut(FACTOR, FACTOR).copy_from(&dv);
    g.w2 = dz.tr_mul(&f.h);
    g.b2 = DVector::from_iterator(OUT, dz.column_iter().map(|c| c.sum()));
    let dh = &dz * &p.w2;
    let da = dh.zip_map(&f.h, |d, h| d * (1.0 - h * h));
    g.w1 = da.tr_mul(b.x);
    g.b1 = DVector::from_iterator(da.ncols(), da.column_iter().map(|c| c.sum()));
    (loss, Some(g))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(p: &Params, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = p.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, p: &mut Params, g: &Params) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (k, (ps, gs)) in p.slices_mut().into_iter().zip(g.slices()).enumerate() {
            for i in 0..ps.len() {
                let gi = gs[i];
                self.m[k][i] = B1 * self.m[k][i] + (1.0 - B1) * gi;
                self.v[k][i] = B2 * self.v[k][i] + (1.0 - B2) * gi * gi;
                ps[i] -= self.lr * (self.m[k][i] / c1) / ((self.v[k][i] / c2).sqrt() + EPS);
            }
        }
    }
}

/// Trained encoder plus heads, with everything needed to apply it to raw
/// features. Serializes to versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorEncoder {
    pub version: u32,
    pub seed: u64,
    pub control: Control,
    pub config: FactorConfig,
    pub feature: String,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Standardization of (δ, progress) training targets.
    pub target_mean: [f64; 2],
    pub target_scale: [f64; 2],
    /// Row-major `hidden x input`.
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    /// Row-major `16 x hidden`; rows 0..8 produce u, rows 8..16 produce v.
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub head_u: Vec<f64>,
    pub head_u_bias: f64,
    pub head_v: Vec<f64>,
    pub head_v_bias: f64,
    pub summary: TrainSummary,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j])
}

impl FactorEncoder {
    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    fn params(&self) -> Params {
        Params {
            w1: from_rows(&self.w1),
            b1: DVector::from_vec(self.b1.clone()),
            w2: from_rows(&self.w2),
            b2: DVector::from_vec(self.b2.clone()),
            au: DVector::from_vec(self.head_u.clone()),
            cu: DVector::from_element(1, self.head_u_bias),
            av: DVector::from_vec(self.head_v.clone()),
            cv: DVector::from_element(1, self.head_v_bias),
        }
    }

    fn standardize(&self, rows: &[&[f64]]) -> Result<DMatrix<f64>, FactorError> {
        let d = self.input_dim();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(FactorError::Dimension {
                expected: d,
                got: r.len(),
            });
        }
        Ok(DMatrix::from_fn(rows.len(), d, |i, j| {
            (rows[i][j] - self.input_mean[j]) / self.input_scale[j]
        }))
    }

    /// `(u, v)` per row.
    pub fn encode(&self, rows: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), FactorError> {
        let x = self.standardize(rows)?;
        let f = forward(&self.params(), &x);
        let u = f.z.row_iter().map(|r| r.iter().take(FACTOR).copied().collect()).collect();
        let v = f.z.row_iter().map(|r| r.iter().skip(FACTOR).copied().collect()).collect();
        Ok((u, v))
    }

    /// Head predictions of (δ, progress) in target units.
    pub fn predict_heads(&self, rows: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>), FactorError> {
        let x = self.standardize(rows)?;
        let f = forward(&self.params(), &x);
        let un = |v: &DVector<f64>, k: usize| v.iter().map(|y| y * self.target_scale[k] + self.target_mean[k]).collect();
        Ok((un(&f.yd, 0), un(&f.yp, 1)))
    }

    pub fn to_json(&self) -> Result<String, FactorError> {
        serde_json::to_string_pretty(self).map_err(|e| FactorError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, FactorError> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| FactorError::Serde(e.to_string()))?;
        let version = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if version != ENCODER_VERSION {
            return Err(FactorError::Version(version));
        }
        serde_json::from_value(v).map_err(|e| FactorError::Serde(e.to_string()))
    }
}

/// Per-column means and one shared scale, the root mean column variance.
/// A shared scale keeps the input geometry rotation-equivariant, matching
/// the isotropic weight initialization.
fn column_stats(rows: &[&[f64]], d: usize) -> (Vec<f64>, Vec<f64>) {
    let (means, vars): (Vec<f64>, Vec<f64>) = (0..d)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            (mean(&col).unwrap_or(0.0), sample_std(&col).unwrap_or(0.0).powi(2))
        })
        .unzip();
    let s = mean(&vars).unwrap_or(0.0).sqrt();
    (means, vec![if s > 0.0 { s } else { 1.0 }; d])
}

fn target_stats(y: &[f64]) -> (f64, f64) {
    let s = sample_std(y).unwrap_or(0.0);
    (mean(y).unwrap_or(0.0), if s > 0.0 { s } else { 1.0 })
}

/// Permutes the control's target across rows.
fn apply_control(ds: &ProbeDataset, control: Control, seed: u64) -> ProbeDataset {
    let mut out = ds.clone();
    if control == Control::None {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_0000_0001);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng);
    for (row, &src) in out.rows.iter_mut().zip(&idx) {
        match control {
            Control::ShuffleDelta => row.delta = ds.rows[src].delta,
            Control::ShuffleCursor => row.progress = ds.rows[src].progress,
            Control::None => {}
        }
    }
    out
}

struct Prepared {
    x: DMatrix<f64>,
    td: DVector<f64>,
    tp: DVector<f64>,
}

fn prepare(ds: &ProbeDataset, enc: &FactorEncoder) -> Result<Prepared, FactorError> {
    let x = enc.standardize(&ds.features())?;
    let td = DVector::from_iterator(ds.len(), ds.rows.iter().map(|r| (r.delta - enc.target_mean[0]) / enc.target_scale[0]));
    let tp = DVector::from_iterator(
        ds.len(),
        ds.rows.iter().map(|r| (r.progress - enc.target_mean[1]) / enc.target_scale[1]),
    );
    Ok(Prepared { x, td, tp })
}

fn full_loss(p: &Params, d: &Prepared, cfg: &FactorConfig) -> f64 {
    loss_and_grad(
        p,
        &Batch {
            x: &d.x,
            td: &d.td,
            tp: &d.tp,
        },
        cfg,
        false,
    )
    .0
}

fn store(enc: &mut FactorEncoder, p: &Params) {
    enc.w1 = rows_of(&p.w1);
    enc.b1 = p.b1.iter().copied().collect();
    enc.w2 = rows_of(&p.w2);
    enc.b2 = p.b2.iter().copied().collect();
    enc.head_u = p.au.iter().copied().collect();
    enc.head_u_bias = p.cu[0];
    enc.head_v = p.av.iter().copied().collect();
    enc.head_v_bias = p.cv[0];
}

/// Trains the encoder and heads with Adam on minibatches, stopping early on
/// a grouped validation split. Deterministic given `seed`.
pub fn fit_factorizer(
    ds: &ProbeDataset,
    cfg: &FactorConfig,
    seed: u64,
    control: Control,
) -> Result<FactorEncoder, FactorError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(FactorError::Readout(crate::readout::ReadoutError::Empty));
    }
    let data = apply_control(ds, control, seed);
    let (train, val) = if cfg.val_fraction > 0.0 && data.n_groups() >= 4 {
        let (t, v) = grouped_split(&data, 1.0 - cfg.val_fraction, seed ^ 0x0a11_d00d)?;
        (t, Some(v))
    } else {
        (data, None)
    };

    let feats = train.features();
    let (input_mean, input_scale) = column_stats(&feats, train.dim);
    let (dm, ds_) = target_stats(&train.deltas());
    let (pm, ps) = target_stats(&train.progress());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::init(train.dim, cfg.hidden, cfg.init_scale, &mut rng);
    let mut enc = FactorEncoder {
        version: ENCODER_VERSION,
        seed,
        control,
        config: *cfg,
        feature: ds.feature.clone(),
        input_mean,
        input_scale,
        target_mean: [dm, pm],
        target_scale: [ds_, ps],
        w1: Vec::new(),
        b1: Vec::new(),
        w2: Vec::new(),
        b2: Vec::new(),
        head_u: Vec::new(),
        head_u_bias: 0.0,
        head_v: Vec::new(),
        head_v_bias: 0.0,
        summary: TrainSummary {
            epochs_run: 0,
            best_epoch: 0,
            train_loss: f64::NAN,
            val_loss: None,
        },
    };
    let tr = prepare(&train, &enc)?;
    let va = match &val {
        Some(v) => Some(prepare(v, &enc)?),
        None => None,
    };
    let monitor = |p: &Params| va.as_ref().map_or_else(|| full_loss(p, &tr, cfg), |v| full_loss(p, v, cfg));

    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut best = params.clone();
    let mut best_loss = monitor(&params);
    if !best_loss.is_finite() {
        return Err(FactorError::NonFinite { seed, epoch: 0 });
    }
    let mut best_epoch = 0;
    let mut epochs_run = 0;
    let n = tr.x.nrows();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let x = tr.x.select_rows(chunk.iter());
            let td = tr.td.select_rows(chunk.iter());
            let tp = tr.tp.select_rows(chunk.iter());
            let (loss, g) = loss_and_grad(&params, &Batch { x: &x, td: &td, tp: &tp }, cfg, true);
            if !loss.is_finite() {
                return Err(FactorError::NonFinite { seed, epoch });
            }
            adam.step(&mut params, &g.expect("gradient requested"));
        }
        epochs_run = epoch;
        let l = monitor(&params);
        if !l.is_finite() {
            return Err(FactorError::NonFinite { seed, epoch });
        }
        if l < best_loss {
            best_loss = l;
            best = params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    store(&mut enc, &best);
    enc.summary = TrainSummary {
        epochs_run,
        best_epoch,
        train_loss: full_loss(&best, &tr, cfg),
        val_loss: va.as_ref().map(|v| full_loss(&best, v, cfg)),
    };
    log::debug!(
        "factorizer seed {seed} control {control}: {} epochs, best {}, train loss {:.4}",
        epochs_run,
        best_epoch,
        enc.summary.train_loss
    );
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthesize_batch, MixingKind, SyntheticWorld};

    fn small_params(rng: &mut ChaCha8Rng) -> Params {
        let mut p = Params::init(3, 5, 1.0, rng);
        let n = Normal::new(0.0, 0.3).unwrap();
        p.b1 = DVector::from_fn(5, |_, _| n.sample(rng));
        p.b2 = DVector::from_fn(OUT, |_, _| n.sample(rng));
        p
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = small_params(&mut rng);
        let n = Normal::new(0.0, 1.0).unwrap();
        let rows = 40;
        let x = DMatrix::from_fn(rows, 3, |_, _| n.sample(&mut rng));
        let td = DVector::from_fn(rows, |i, _| x[(i, 0)] + 0.3 * x[(i, 1)]);
        let tp = DVector::from_fn(rows, |i, _| x[(i, 2)] - 0.2 * x[(i, 0)]);
        let cfg = FactorConfig {
            w_leak: 0.7,
            leak_ridge: 0.05,
            ..FactorConfig::default()
        };
        let b = Batch { x: &x, td: &td, tp: &tp };
        let (_, g) = loss_and_grad(&p, &b, &cfg, true);
        let g = g.unwrap();
        let h = 1e-6;
        for k in 0..8 {
            for i in 0..p.slices()[k].len() {
                let mut plus = p.clone();
                plus.slices_mut()[k][i] += h;
                let mut minus = p.clone();
                minus.slices_mut()[k][i] -= h;
                let num = (loss_and_grad(&plus, &b, &cfg, false).0 - loss_and_grad(&minus, &b, &cfg, false).0) / (2.0 * h);
                let an = g.slices()[k][i];
                assert!((num - an).abs() < 1e-6 * (1.0 + num.abs()), "param {k}[{i}]: {num} vs {an}");
            }
        }
    }

    #[test]
    fn leak_r2_of_exact_fit_is_near_one() {
        let m = DMatrix::from_fn(30, 2, |i, j| ((i * (j + 2)) as f64).sin());
        let y = DVector::from_fn(30, |i, _| 2.0 * m[(i, 0)] - m[(i, 1)]);
        let (r2, _) = leak_r2(&m, &y, 1e-9);
        assert!((r2 - 1.0).abs() < 1e-6);
    }

    fn world_data() -> ProbeDataset {
        let w = SyntheticWorld::new(&["a"], MixingKind::Shared, 5).with_feature_noise(0.0);
        ProbeDataset::from_traces(&synthesize_batch(&w, 12, 2).unwrap(), "last_L21").unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = world_data();
        let cfg = FactorConfig {
            epochs: 0,
            ..FactorConfig::default()
        };
        let a = fit_factorizer(&ds, &cfg, 1, Control::None).unwrap();
        assert_eq!(a.summary.epochs_run, 0);
        assert_eq!(a, fit_factorizer(&ds, &cfg, 1, Control::None).unwrap());
        assert_eq!(a.w1.len(), 64);
        assert_eq!(a.w2.len(), 16);
    }

    #[test]
    fn json_roundtrip_and_version_check() {
        let ds = world_data();
        let cfg = FactorConfig {
            epochs: 2,
            ..FactorConfig::default()
        };
        let e = fit_factorizer(&ds, &cfg, 4, Control::ShuffleDelta).unwrap();
        let s = e.to_json().unwrap();
        let back = FactorEncoder::from_json(&s).unwrap();
        assert_eq!(back, e);
        let bumped = s.replacen("\"version\": 1", "\"version\": 9", 1);
        assert_eq!(FactorEncoder::from_json(&bumped), Err(FactorError::Version(9)));
        let (u, v) = e.encode(&ds.features()[..3]).unwrap();
        assert_eq!((u[0].len(), v[0].len()), (8, 8));
        assert!(matches!(e.encode(&[&[1.0][..]]), Err(FactorError::Dimension { .. })));
    }

    #[test]
    fn control_permutes_only_its_target() {
        let ds = world_data();
        let sd = apply_control(&ds, Control::ShuffleDelta, 0);
        assert_eq!(sd.progress(), ds.progress());
        assert_ne!(sd.deltas(), ds.deltas());
        let mut a = sd.deltas();
        let mut b = ds.deltas();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        let sc = apply_control(&ds, Control::ShuffleCursor, 0);
        assert_eq!(sc.deltas(), ds.deltas());
        assert_ne!(sc.progress(), ds.progress());
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = FactorConfig {
            learning_rate: 0.0,
            ..FactorConfig::default()
        };
        assert!(matches!(fit_factorizer(&world_data(), &cfg, 0, Control::None), Err(FactorError::Config(_))));
    }
}
