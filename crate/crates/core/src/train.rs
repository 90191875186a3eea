//! Stochastic gradient descent over whole volumes with step-decayed learning
//! rate and decayed deep-supervision weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::labels::LabelVolume;
use crate::net::{self, build_network_with_init, ArchitectureConfig, Eta, Init, NetworkParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub eta0: Eta,
    pub eta_decay_every: usize,
    pub eta_decay_factor: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub momentum: f64,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            lr_drop_every: 50,
            lr_drop_factor: 10.0,
            eta0: [(3, 0.3), (6, 0.4)].into(),
            eta_decay_every: 10,
            eta_decay_factor: 0.95,
            lambda: 5e-4,
            epochs: 100,
            seed: 0,
            momentum: 0.0,
            init: Init::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lr0", self.lr0),
            ("lambda", self.lambda),
            ("momentum", self.momentum),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let (Init::Gaussian(scale) | Init::He(scale)) = self.init;
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("init scale must be finite and >= 0, got {scale}")));
        }
        if !(self.lr_drop_factor > 0.0) || !(self.eta_decay_factor > 0.0) {
            return Err(Error::Config("decay factors must be positive".into()));
        }
        if self.lr_drop_every == 0 || self.eta_decay_every == 0 {
            return Err(Error::Config("decay intervals must be at least one epoch".into()));
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config(format!("momentum must be below 1, got {}", self.momentum)));
        }
        if let Some((d, e)) = self.eta0.iter().find(|(_, &e)| !(e >= 0.0)) {
            return Err(Error::Config(format!("eta for layer {d} must be >= 0, got {e}")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr0", self.lr0);
        kv.set("lr_drop_every", self.lr_drop_every);
        kv.set("lr_drop_factor", self.lr_drop_factor);
        for (d, e) in &self.eta0 {
            kv.set(format!("eta.{d}"), e);
        }
        kv.set("eta_decay_every", self.eta_decay_every);
        kv.set("eta_decay_factor", self.eta_decay_factor);
        kv.set("lambda", self.lambda);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("init", self.init);
        kv.set("momentum", self.momentum);
        kv
    }

    /// Keys present in `kv` override fields; any `eta.*` key replaces the whole map.
    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        self.lr0 = kv.parsed_or("lr0", self.lr0)?;
        self.lr_drop_every = kv.parsed_or("lr_drop_every", self.lr_drop_every)?;
        self.lr_drop_factor = kv.parsed_or("lr_drop_factor", self.lr_drop_factor)?;
        self.eta_decay_every = kv.parsed_or("eta_decay_every", self.eta_decay_every)?;
        self.eta_decay_factor = kv.parsed_or("eta_decay_factor", self.eta_decay_factor)?;
        self.lambda = kv.parsed_or("lambda", self.lambda)?;
        self.epochs = kv.parsed_or("epochs", self.epochs)?;
        self.seed = kv.parsed_or("seed", self.seed)?;
        self.momentum = kv.parsed_or("momentum", self.momentum)?;
        if let Some(v) = kv.get("init") {
            self.init = v.parse()?;
        }
        let etas = kv.with_prefix("eta.");
        if etas.keys().next().is_some() {
            self.eta0.clear();
            for (d, _) in etas.iter() {
                let layer: usize = d
                    .parse()
                    .map_err(|_| Error::Config(format!("bad key `eta.{d}`")))?;
                self.eta0.insert(layer, etas.parsed(d)?.expect("present"));
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn is_train_key(key: &str) -> bool {
        matches!(
            key,
            "lr0"
                | "lr_drop_every"
                | "lr_drop_factor"
                | "eta_decay_every"
                | "eta_decay_factor"
                | "lambda"
                | "epochs"
                | "seed"
                | "momentum"
                | "init"
        ) || key.starts_with("eta.")
    }
}

/// `lr0 / lr_drop_factor^floor(epoch / lr_drop_every)`, with 0-based epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = (epoch / cfg.lr_drop_every) as i32;
    cfg.lr0 / cfg.lr_drop_factor.powi(drops)
}

/// `eta0_d * eta_decay_factor^floor(epoch / eta_decay_every)`.
pub fn eta_at(epoch: usize, cfg: &TrainConfig) -> Eta {
    let steps = (epoch / cfg.eta_decay_every) as i32;
    let f = cfg.eta_decay_factor.powi(steps);
    cfg.eta0.iter().map(|(&d, &e)| (d, e * f)).collect()
}

/// SGD with optional heavy-ball momentum: `v <- m v + g`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<NetworkParams>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) -> Result<()> {
        params.check_compatible(grads)?;
        for (name, g) in grads.named_tensors() {
            g.ensure_finite(&format!("gradient of {name}"))?;
        }
        let direction = if self.momentum > 0.0 {
            let v = self.velocity.get_or_insert_with(|| grads.zeros_like());
            for (vt, gt) in v.tensors_mut().into_iter().zip(grads.tensors()) {
                for (a, b) in vt.data_mut().iter_mut().zip(gt.data()) {
                    *a = self.momentum * *a + b;
                }
            }
            &*v
        } else {
            grads
        };
        for (pt, dt) in params.tensors_mut().into_iter().zip(direction.tensors()) {
            for (a, b) in pt.data_mut().iter_mut().zip(dt.data()) {
                *a -= lr * b;
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after SGD step".into()));
        }
        Ok(())
    }
}

/// One plain SGD update `p <- p - lr g`.
pub fn sgd_step(params: &NetworkParams, grads: &NetworkParams, lr: f64) -> Result<NetworkParams> {
    let mut out = params.clone();
    Sgd::new(0.0).step(&mut out, grads, lr)?;
    Ok(out)
}

/// A normalized input volume with its reference labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub labels: LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    /// Objective summed over the epoch's steps, each evaluated before its update.
    pub loss_total: f64,
    pub loss_main: f64,
    pub loss_aux: BTreeMap<usize, f64>,
    /// Misclassified voxel fraction of the last-layer argmax after the epoch.
    pub val_error: f64,
    pub lr: f64,
    pub eta: Eta,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    pub records: Vec<EpochRecord>,
}

impl LearningCurve {
    /// Columns: `epoch, loss_total, loss_main, loss_aux_<d>..., val_error, lr, eta_<d>...`.
    pub fn to_csv(&self, supervised: &[usize]) -> String {
        let mut s = String::from("epoch,loss_total,loss_main");
        for d in supervised {
            write!(s, ",loss_aux_{d}").unwrap();
        }
        s.push_str(",val_error,lr");
        for d in supervised {
            write!(s, ",eta_{d}").unwrap();
        }
        s.push('\n');
        for r in &self.records {
            write!(s, "{},{},{}", r.epoch, r.loss_total, r.loss_main).unwrap();
            for d in supervised {
                write!(s, ",{}", r.loss_aux.get(d).copied().unwrap_or(0.0)).unwrap();
            }
            write!(s, ",{},{}", r.val_error, r.lr).unwrap();
            for d in supervised {
                write!(s, ",{}", r.eta.get(d).copied().unwrap_or(0.0)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// First epoch whose main loss is at or below `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.loss_main <= threshold)
            .map(|r| r.epoch)
    }
}

/// Fraction of voxels whose last-layer argmax disagrees with the labels.
pub fn error_rate(params: &NetworkParams, samples: &[Sample]) -> Result<f64> {
    let mut wrong = 0usize;
    let mut total = 0usize;
    for s in samples {
        let pred = net::forward(params, &s.input)?.argmax_labels();
        wrong += pred
            .data()
            .iter()
            .zip(s.labels.data())
            .filter(|(a, b)| a != b)
            .count();
        total += s.labels.len();
    }
    Ok(if total == 0 { 0.0 } else { wrong as f64 / total as f64 })
}

/// Trains from a fresh seeded initialization.
///
/// Each step back-propagates one whole volume. Volumes are visited in a
/// seeded random order per epoch. `observer` sees every finished epoch and
/// the parameters after it; returning an error aborts training. Validation
/// falls back to the training set when `validation` is empty.
pub fn train(
    training: &[Sample],
    validation: &[Sample],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &NetworkParams) -> Result<()>,
) -> Result<(NetworkParams, LearningCurve)> {
    cfg.validate()?;
    arch.validate()?;
    if training.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    let eta_keys: Vec<_> = cfg.eta0.keys().copied().collect();
    let sup: Vec<_> = arch.supervised.iter().copied().collect();
    if eta_keys != sup {
        return Err(Error::Config(format!(
            "eta layers {eta_keys:?} do not match supervised layers {sup:?}"
        )));
    }
    for s in training.iter().chain(validation) {
        let [_, d, h, w] = s.input.dims4()?;
        arch.check_input([d, h, w])?;
    }
    let mut params = build_network_with_init(arch, cfg.init, &mut Rng::new(cfg.seed))?;
    let mut order_rng = Rng::with_stream(cfg.seed, 1);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut curve = LearningCurve::default();
    let val_set = if validation.is_empty() { training } else { validation };
    let mut order: Vec<usize> = (0..training.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let eta = eta_at(epoch, cfg);
        order_rng.shuffle(&mut order);
        let mut loss_total = 0.0;
        let mut loss_main = 0.0;
        let mut loss_aux: BTreeMap<usize, f64> = eta.keys().map(|&d| (d, 0.0)).collect();
        let numeric = |e: Error| match e {
            Error::NonFinite(reason) => Error::Numeric {
                epoch: epoch + 1,
                reason,
            },
            other => other,
        };
        for &i in &order {
            let s = &training[i];
            let (grads, loss) =
                net::backward(&params, &s.input, &s.labels, &eta, cfg.lambda).map_err(numeric)?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric {
                    epoch: epoch + 1,
                    reason: "loss is not finite".into(),
                });
            }
            loss_total += loss.total;
            loss_main += loss.main;
            for (d, l) in &loss.aux {
                *loss_aux.get_mut(d).expect("aux slot") += l;
            }
            sgd.step(&mut params, &grads, lr).map_err(numeric)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss_total,
            loss_main,
            loss_aux,
            val_error: error_rate(&params, val_set)?,
            lr,
            eta,
        };
        observer(&record, &params)?;
        curve.records.push(record);
    }
    Ok((params, curve))
}
