//! SGD training with the poly schedule, checkpoint/resume and run
//! directories.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::config::RunConfig;
use crate::data::{augment, class_frequencies, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::labels::LabelMap;
use crate::metrics::Metrics;
use crate::network::Network;
use crate::nn::loss::OHEM_MIN_KEEP_FRACTION;
use crate::nn::{median_frequency_weights, ohem_ce, softmax_cross_entropy};
use crate::optim::Sgd;
use crate::par;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iter: usize,
    /// Training crop `(H, W)`.
    pub crop: (usize, usize),
    pub scale_range: (f64, f64),
    pub ohem: bool,
    pub ohem_thresh: f64,
    /// Median-frequency class weights on the main and auxiliary losses.
    pub class_balanced: bool,
    pub aux_weight: f64,
    pub seed: u64,
    /// Validation mIoU is logged every this many iterations (0: only at the
    /// end).
    pub eval_every: usize,
    /// A checkpoint is written every this many iterations (0: only at the
    /// end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-2,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            max_iter: 6000,
            crop: (96, 96),
            scale_range: crate::data::SCALE_RANGE,
            ohem: false,
            ohem_thresh: crate::nn::loss::OHEM_KEEP_THRESH,
            class_balanced: false,
            aux_weight: 0.4,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return bad("power must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_iter == 0 {
            return bad("batch_size and max_iter must be positive");
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return bad("crop must be non-empty");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale range must satisfy 0 < scale_min <= scale_max");
        }
        if !(self.ohem_thresh > 0.0 && self.ohem_thresh <= 1.0) {
            return bad("ohem_thresh must lie in (0, 1]");
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return bad("aux_weight must be non-negative");
        }
        Ok(())
    }
}

/// `lr0 * (1 - iter / max_iter)^power`.
pub fn poly_lr(cfg: &TrainConfig, iter: usize) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::invalid(format!(
            "iteration {iter} is past max_iter {}",
            cfg.max_iter
        )));
    }
    Ok(cfg.lr0 * (1.0 - iter as f64 / cfg.max_iter as f64).powf(cfg.power))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
}

pub const LOG_HEADER: &str = "iter,lr,loss,miou";

impl LogRow {
    pub fn to_csv(&self) -> String {
        match self.miou {
            Some(m) => format!("{},{},{},{}", self.iter, self.lr, self.loss, m),
            None => format!("{},{},{},", self.iter, self.lr, self.loss),
        }
    }
}

/// Random stream for batch item `item` of iteration `iter`.
fn item_rng(seed: u64, iter: usize, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iter as u64) << 20) | item as u64);
    rng
}

/// Network, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Network<f32>,
    pub sgd: Sgd<f32>,
    /// Completed iterations.
    pub iter: usize,
    class_weights: Option<Vec<f64>>,
    recent: VecDeque<f64>,
}

impl Trainer {
    /// Fresh network initialised from the training seed. Class frequencies
    /// for the balanced loss come from `train`.
    pub fn new(cfg: RunConfig, train: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        let net = Network::build(&cfg.network, cfg.train.seed)?;
        let sgd = Sgd::new(&net.store, cfg.train.momentum, cfg.train.weight_decay);
        let class_weights = cfg
            .train
            .class_balanced
            .then(|| median_frequency_weights(&class_frequencies(train, cfg.network.num_classes)));
        Ok(Self {
            cfg,
            net,
            sgd,
            iter: 0,
            class_weights,
            recent: VecDeque::new(),
        })
    }

    /// Restores a trainer, including optimizer velocities and iteration.
    pub fn from_checkpoint(ckpt: &Checkpoint, train: &[Sample]) -> Result<Self> {
        let cfg = RunConfig::parse(&ckpt.config)?;
        if cfg.train.seed != ckpt.rng_seed {
            return Err(Error::invalid("checkpoint seed disagrees with its config"));
        }
        let mut t = Self::new(cfg, train)?;
        load_tensors(&mut t.net, &ckpt.tensors)?;
        for v in &ckpt.velocities {
            let id = t
                .net
                .store
                .find(&v.name)
                .ok_or_else(|| Error::invalid(format!("checkpoint velocity for unknown parameter {}", v.name)))?;
            t.sgd.set_velocity(id, v.value.clone())?;
        }
        t.iter = ckpt.iteration as usize;
        if t.iter > t.cfg.train.max_iter {
            return Err(Error::invalid("checkpoint iteration is past max_iter"));
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.net.store;
        Checkpoint {
            config: self.cfg.render(),
            tensors: store
                .entries()
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    value: e.value.clone(),
                })
                .collect(),
            velocities: self
                .sgd
                .velocities()
                .iter()
                .map(|(id, v)| NamedTensor {
                    name: store.entry(*id).name.clone(),
                    value: v.clone(),
                })
                .collect(),
            iteration: self.iter as u64,
            rng_seed: self.cfg.train.seed,
        }
    }

    pub fn finished(&self) -> bool {
        self.iter >= self.cfg.train.max_iter
    }

    /// Assembles the augmented batch of iteration `iter`. The result only
    /// depends on the seed, the iteration and the training set.
    pub fn batch(&self, train: &[Sample], iter: usize) -> Result<(Tensor4<f32>, LabelMap)> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let t = &self.cfg.train;
        let items = par::map_indices(t.batch_size, |b| {
            let mut rng = item_rng(t.seed, iter, b);
            let idx = rng.gen_range(0..train.len());
            augment(&train[idx], t.crop, t.scale_range, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let images: Vec<Tensor4<f32>> = items.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<LabelMap> = items.into_iter().map(|s| s.labels).collect();
        Ok((Tensor4::stack(&images)?, LabelMap::stack(&labels)?))
    }

    fn seg_loss(&self, graph: &mut Graph<f32>, logits: Var, labels: &LabelMap) -> Result<Var> {
        let t = &self.cfg.train;
        let out = if t.ohem {
            ohem_ce(graph, logits, labels, t.ohem_thresh, OHEM_MIN_KEEP_FRACTION)?
        } else {
            softmax_cross_entropy(graph, logits, labels, self.class_weights.as_deref())?
        };
        Ok(out.loss)
    }

    /// Forward pass and loss on a given batch without updating anything.
    pub fn loss_on(&mut self, images: &Tensor4<f32>, labels: &LabelMap) -> Result<(Graph<f32>, Var)> {
        let mut graph = Graph::new();
        let out = self.net.forward(&mut graph, images, true)?;
        let mut total = self.seg_loss(&mut graph, out.logits, labels)?;
        if let Some(aux) = out.aux_logits {
            if self.cfg.train.aux_weight > 0.0 {
                let a = self.seg_loss(&mut graph, aux, labels)?;
                let a = graph.scale(a, self.cfg.train.aux_weight as f32)?;
                total = graph.add(total, a)?;
            }
        }
        Ok((graph, total))
    }

    /// Runs one iteration and returns its log row (without mIoU).
    pub fn step(&mut self, train: &[Sample]) -> Result<LogRow> {
        let iter = self.iter;
        let lr = poly_lr(&self.cfg.train, iter)?;
        if iter >= self.cfg.train.max_iter {
            return Err(Error::invalid("training already finished"));
        }
        let (images, labels) = self.batch(train, iter)?;
        let diverged = |recent: &VecDeque<f64>, loss: f64| Error::Diverged {
            iter,
            lr,
            loss,
            recent: recent.iter().copied().collect(),
        };
        let (graph, total) = match self.loss_on(&images, &labels) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(diverged(&self.recent, f64::NAN)),
            Err(e) => return Err(e),
        };
        let loss = graph.value(total).data()[0] as f64;
        if !loss.is_finite() {
            return Err(diverged(&self.recent, loss));
        }
        let grads = match graph.backward(total) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Err(diverged(&self.recent, loss)),
            Err(e) => return Err(e),
        };
        let param_grads = graph.param_grads(&grads);
        self.sgd.step(&mut self.net.store, &param_grads, lr)?;
        self.iter += 1;
        self.recent.push_back(loss);
        if self.recent.len() > 10 {
            self.recent.pop_front();
        }
        Ok(LogRow {
            iter,
            lr,
            loss,
            miou: None,
        })
    }

    /// Whether iteration `iter` (0-based) ends with a validation pass.
    pub fn is_eval_iter(&self, iter: usize) -> bool {
        let t = &self.cfg.train;
        iter + 1 == t.max_iter || (t.eval_every > 0 && (iter + 1) % t.eval_every == 0)
    }

    fn is_checkpoint_iter(&self, iter: usize) -> bool {
        let t = &self.cfg.train;
        iter + 1 == t.max_iter || (t.checkpoint_every > 0 && (iter + 1) % t.checkpoint_every == 0)
    }

    /// Trains until `max_iter` (or `stop_at` completed iterations), reporting
    /// each row and checkpoint to `observer`.
    pub fn run(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        stop_at: Option<usize>,
        observer: &mut dyn Observer,
    ) -> Result<()> {
        let end = stop_at.unwrap_or(usize::MAX).min(self.cfg.train.max_iter);
        while self.iter < end {
            let mut row = self.step(train)?;
            if self.is_eval_iter(row.iter) && !val.is_empty() {
                row.miou = Some(evaluate(&self.net, val, &[1.0], false)?.miou);
            }
            observer.row(&row)?;
            if self.is_checkpoint_iter(row.iter) {
                observer.checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Copies named tensors into a network, checking that every parameter is
/// present with the right shape.
pub fn load_tensors(net: &mut Network<f32>, tensors: &[NamedTensor]) -> Result<()> {
    let expected = net.store.len();
    if tensors.len() != expected {
        return Err(Error::invalid(format!(
            "checkpoint has {} tensors, network expects {expected}",
            tensors.len()
        )));
    }
    for t in tensors {
        let id = net
            .store
            .find(&t.name)
            .ok_or_else(|| Error::invalid(format!("checkpoint tensor {} is not a network parameter", t.name)))?;
        net.store.set(id, t.value.clone())?;
    }
    Ok(())
}

/// Rebuilds the network stored in a checkpoint.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, Network<f32>)> {
    let cfg = RunConfig::parse(&ckpt.config)?;
    let mut net = Network::build(&cfg.network, cfg.train.seed)?;
    load_tensors(&mut net, &ckpt.tensors)?;
    Ok((cfg, net))
}

/// Receives log rows and checkpoint events from [`Trainer::run`].
pub trait Observer {
    fn row(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

/// Keeps rows in memory.
#[derive(Default)]
pub struct MemoryLog {
    pub rows: Vec<LogRow>,
}

impl Observer for MemoryLog {
    fn row(&mut self, row: &LogRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

/// A run directory: `resolved.cfg`, `log.csv`, `ckpt_<iter>.bin`,
/// `last.bin` and, once training ends, `metrics.txt`.
pub struct RunDir {
    pub dir: PathBuf,
    log: fs::File,
}

impl RunDir {
    pub const LOG: &'static str = "log.csv";
    pub const LAST: &'static str = "last.bin";
    pub const CONFIG: &'static str = "resolved.cfg";
    pub const METRICS: &'static str = "metrics.txt";

    /// Starts a fresh run directory.
    pub fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(Self::CONFIG), cfg.render())?;
        let mut log = fs::File::create(dir.join(Self::LOG))?;
        writeln!(log, "{LOG_HEADER}")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    /// Reopens a run directory for a resume at `iteration`, dropping log
    /// rows from that iteration on.
    pub fn reopen(dir: &Path, iteration: usize) -> Result<Self> {
        let path = dir.join(Self::LOG);
        let text = fs::read_to_string(&path).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let mut kept = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != LOG_HEADER {
                    return Err(Error::Format {
                        path,
                        detail: "unexpected log header".into(),
                    });
                }
            } else {
                let it: usize = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format {
                        path: path.clone(),
                        detail: format!("bad log line {}", i + 1),
                    })?;
                if it >= iteration {
                    break;
                }
            }
            kept.push_str(line);
            kept.push('\n');
        }
        fs::write(&path, &kept)?;
        let log = fs::OpenOptions::new().append(true).open(&path)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    pub fn checkpoint_path(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("ckpt_{iteration:06}.bin"))
    }

    pub fn write_metrics(&self, metrics: &Metrics) -> Result<()> {
        fs::write(self.dir.join(Self::METRICS), metrics.to_string())?;
        Ok(())
    }
}

impl Observer for RunDir {
    fn row(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.log, "{}", row.to_csv())?;
        self.log.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, trainer: &Trainer) -> Result<()> {
        let ckpt = trainer.checkpoint();
        ckpt.save(&self.checkpoint_path(trainer.iter))?;
        ckpt.save(&self.dir.join(Self::LAST))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        let cfg = TrainConfig {
            max_iter: 100,
            ..TrainConfig::default()
        };
        assert_eq!(poly_lr(&cfg, 0).unwrap(), 1e-2);
        assert_eq!(poly_lr(&cfg, 100).unwrap(), 0.0);
        assert!(poly_lr(&cfg, 101).is_err());
        let mid = poly_lr(&cfg, 50).unwrap();
        assert!((mid - 5.358867e-3).abs() < 1e-8, "{mid}");
    }

    #[test]
    fn csv_rows() {
        let r = LogRow {
            iter: 3,
            lr: 0.5,
            loss: 1.25,
            miou: None,
        };
        assert_eq!(r.to_csv(), "3,0.5,1.25,");
        assert_eq!(LogRow { miou: Some(0.75), ..r }.to_csv(), "3,0.5,1.25,0.75");
    }
}
