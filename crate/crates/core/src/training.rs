//! The training loop: shuffled, augmented mini-batches, AdamW updates,
//! delayed validation with a reduce-on-plateau schedule, early stopping,
//! and best/last checkpoint hand-off.
//!
//! File access stays outside: samples come from a [`PairSource`], and
//! records and checkpoints go to a [`TrainSink`].

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{augment, normalize, AugmentationConfig, ChannelStats, ImagePair};
use crate::error::{Error, Result};
use crate::losses::{compute_loss, threshold, LossReport, LossVariant, LossWeights, Targets};
use crate::metrics::{ConfusionCounts, MetricsReport};
use crate::network::Network;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Ctx, ParamStore};
use crate::rng;
use crate::schedule::{PlateauConfig, PlateauEvent, PlateauSchedule, PlateauState};
use crate::tensor::{ClassMap, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub plateau_patience_epochs: usize,
    pub plateau_factor: f64,
    pub max_reductions_before_stop: usize,
    /// First validated epoch, counting from 0.
    pub validation_start_epoch: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub loss_variant: LossVariant,
    pub loss_weights: LossWeights,
    /// Steps before the auxiliary losses switch on.
    pub aux_warmup_steps: u64,
    /// Weight of the current batch in the running normalization averages.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            weight_decay: 0.001,
            batch_size: 8,
            plateau_patience_epochs: 10,
            plateau_factor: 0.3,
            max_reductions_before_stop: 3,
            validation_start_epoch: 30,
            max_epochs: 300,
            max_steps: None,
            loss_variant: LossVariant::BinarySsl,
            loss_weights: LossWeights::default(),
            aux_warmup_steps: 0,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            learning_rate: self.learning_rate,
            factor: self.plateau_factor,
            patience: self.plateau_patience_epochs,
            max_reductions: self.max_reductions_before_stop,
            validation_start_epoch: self.validation_start_epoch,
            max_epochs: self.max_epochs,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plateau().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("normalization momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub current_lr: f64,
    pub plateau: PlateauState,
    pub params: ParamStore<T>,
    pub optimizer: AdamW<T>,
    /// All randomness is derived from this seed and the epoch/sample keys.
    pub seed: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(net: &Network, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = net.init_params(cfg.seed);
        let optimizer = AdamW::new(cfg.adamw(), &params);
        let schedule = PlateauSchedule::new(cfg.plateau())?;
        Ok(Self {
            epoch: 0,
            step: 0,
            current_lr: schedule.lr(),
            plateau: schedule.state,
            params,
            optimizer,
            seed: cfg.seed,
        })
    }

    pub fn best_val_f1(&self) -> Option<f64> {
        self.plateau.best_score
    }
}

/// Indexed access to samples.
pub trait PairSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<ImagePair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [ImagePair] {
    fn len(&self) -> usize {
        <[ImagePair]>::len(self)
    }

    fn get(&self, index: usize) -> Result<ImagePair> {
        Ok(self[index].clone())
    }
}

impl PairSource for Vec<ImagePair> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn get(&self, index: usize) -> Result<ImagePair> {
        Ok(self[index].clone())
    }
}

/// Produces the validation score of an epoch.
pub trait Validator<T: Real> {
    fn validate(&mut self, net: &Network, params: &ParamStore<T>, epoch: usize) -> Result<MetricsReport>;
}

/// Validation F1 over a held-out split.
pub struct SplitValidator<'a, S: ?Sized> {
    pub pairs: &'a S,
    pub stats: &'a ChannelStats,
    pub batch_size: usize,
}

impl<T: Real, S: PairSource + ?Sized> Validator<T> for SplitValidator<'_, S> {
    fn validate(&mut self, net: &Network, params: &ParamStore<T>, _epoch: usize) -> Result<MetricsReport> {
        validate(net, params, self.pairs, self.stats, self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<PlateauEvent>,
}

/// Receives records and checkpoints as training proceeds.
pub trait TrainSink<T: Real> {
    fn on_step(&mut self, _rec: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _rec: &EpochRecord) -> Result<()> {
        Ok(())
    }
    /// Called whenever validation F1 reaches a new maximum.
    fn save_best(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
    /// Called after every epoch and when training ends.
    fn save_last(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
    /// Called before a non-finite loss aborts training.
    fn dump_state(&mut self, _state: &TrainState<T>, _detail: &str) -> Result<()> {
        Ok(())
    }
}

/// A sink that keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySink<T> {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best: Option<(usize, ParamStore<T>)>,
    pub last: Option<ParamStore<T>>,
}

impl<T: Real> TrainSink<T> for MemorySink<T> {
    fn on_step(&mut self, rec: &StepRecord) -> Result<()> {
        self.steps.push(rec.clone());
        Ok(())
    }
    fn on_epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        self.epochs.push(rec.clone());
        Ok(())
    }
    fn save_best(&mut self, state: &TrainState<T>) -> Result<()> {
        self.best = Some((state.epoch, state.params.clone()));
        Ok(())
    }
    fn save_last(&mut self, state: &TrainState<T>) -> Result<()> {
        self.last = Some(state.params.clone());
        Ok(())
    }
}

/// Network-ready mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    pub t1: Tensor<T>,
    pub t2: Tensor<T>,
    pub change: Option<Tensor<T>>,
    pub classes: Option<(ClassMap, ClassMap)>,
}

fn stack_classes(maps: &[ClassMap]) -> Result<ClassMap> {
    let first = maps.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let [_, h, w] = first.shape;
    let mut data = Vec::new();
    for m in maps {
        if m.shape[1..] != first.shape[1..] {
            return Err(Error::InvalidInput("class maps differ in size".into()));
        }
        data.extend_from_slice(&m.data);
    }
    ClassMap::new([maps.len(), h, w], data)
}

/// Normalizes and stacks pairs. Class maps are included only when
/// `with_classes` is set and every pair has them.
pub fn make_batch<T: Real>(pairs: &[ImagePair], stats: &ChannelStats, with_classes: bool) -> Result<Batch<T>> {
    let norm = pairs
        .iter()
        .map(|p| normalize::<T>(p, stats))
        .collect::<Result<Vec<_>>>()?;
    let t1 = Tensor::stack_batch(&norm.iter().map(|n| n.t1.clone()).collect::<Vec<_>>())?;
    let t2 = Tensor::stack_batch(&norm.iter().map(|n| n.t2.clone()).collect::<Vec<_>>())?;
    let change = if norm.iter().all(|n| n.change.is_some()) {
        let c: Vec<_> = norm.iter().map(|n| n.change.clone().expect("checked")).collect();
        Some(Tensor::stack_batch(&c)?)
    } else {
        None
    };
    let classes = if with_classes && norm.iter().all(|n| n.seg1.is_some() && n.seg2.is_some()) {
        let a: Vec<_> = norm.iter().map(|n| n.seg1.clone().expect("checked")).collect();
        let b: Vec<_> = norm.iter().map(|n| n.seg2.clone().expect("checked")).collect();
        Some((stack_classes(&a)?, stack_classes(&b)?))
    } else {
        None
    };
    Ok(Batch {
        ids: norm.into_iter().map(|n| n.id).collect(),
        t1,
        t2,
        change,
        classes,
    })
}

/// Trains until the schedule stops, the epoch cap or the step cap.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Real, S: PairSource + ?Sized>(
    net: &Network,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    stats: &ChannelStats,
    train_pairs: &S,
    validator: &mut dyn Validator<T>,
    sink: &mut dyn TrainSink<T>,
    state: &mut TrainState<T>,
) -> Result<()> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if cfg.loss_variant.needs_seg_heads() && net.seg_head.is_none() {
        return Err(Error::MissingSegHeads);
    }
    let bs = cfg.batch_size;
    if train_pairs.len() < bs {
        return Err(Error::InvalidInput(alloc::format!(
            "training split has {} samples, fewer than one batch of {bs}",
            train_pairs.len()
        )));
    }
    let mut schedule = PlateauSchedule::resume(cfg.plateau(), state.plateau)?;
    let with_classes = cfg.loss_variant == LossVariant::MulticlassSsl;
    let momentum = T::lit(cfg.bn_momentum);
    let step_cap = cfg.max_steps.unwrap_or(u64::MAX);

    while schedule.may_run(state.epoch) && state.step < step_cap {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut rng::rng_for(&[state.seed, rng::stream::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        // The final short batch is dropped.
        for chunk in order.chunks_exact(bs) {
            if state.step >= step_cap {
                break;
            }
            let pairs = chunk
                .iter()
                .map(|&i| {
                    let p = train_pairs.get(i)?;
                    let mut r = rng::rng_for(&[
                        state.seed,
                        rng::stream::AUGMENT,
                        rng::hash_id(&p.id),
                        epoch as u64,
                    ]);
                    Ok(augment(&p, aug, &mut r))
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = make_batch::<T>(&pairs, stats, with_classes)?;
            let change = batch
                .change
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("training samples need change labels".into()))?;

            let mut ctx = Ctx::train(&state.params);
            let out = net.forward(
                &mut ctx,
                &Var::constant(batch.t1.clone()),
                &Var::constant(batch.t2.clone()),
            )?;
            let targets = Targets {
                change,
                classes: batch.classes.as_ref().map(|(a, b)| (a, b)),
            };
            let aux_active = state.step >= cfg.aux_warmup_steps;
            let loss = compute_loss(cfg.loss_variant, &out, &targets, &cfg.loss_weights, aux_active)?;
            if !loss.report.total.is_finite() {
                let detail = alloc::format!("{:?} on batch {:?}", loss.report, batch.ids);
                sink.dump_state(state, &detail)?;
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: state.step as usize,
                    detail,
                });
            }
            let mut grads = loss.total.backward();
            let pg = ctx.param_grads(&mut grads);
            let updates = ctx.take_stat_updates();
            drop(ctx);
            state.optimizer.step(&mut state.params, &pg, schedule.lr());
            state.params.apply_stat_updates(updates, momentum);
            state.step += 1;
            loss_sum += loss.report.total;
            batches += 1;
            sink.on_step(&StepRecord {
                epoch,
                step: state.step,
                lr: schedule.lr(),
                loss: loss.report,
            })?;
        }

        let epoch_done = batches == order.len() / bs;
        let mut rec = EpochRecord {
            epoch,
            step: state.step,
            lr: schedule.lr(),
            mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            validation: None,
            event: None,
        };
        if epoch_done {
            state.epoch += 1;
        }
        if epoch_done && schedule.should_validate(epoch) {
            let report = validator.validate(net, &state.params, epoch)?;
            let event = schedule.observe(epoch, report.f1);
            rec.validation = Some(report);
            rec.event = Some(event);
            state.plateau = schedule.state;
            state.current_lr = schedule.lr();
            if event == PlateauEvent::Improved {
                sink.save_best(state)?;
            }
        }
        state.plateau = schedule.state;
        state.current_lr = schedule.lr();
        sink.on_epoch(&rec)?;
        sink.save_last(state)?;
        if !epoch_done {
            break;
        }
    }
    Ok(())
}

/// Change-mask metrics over a labelled split, thresholding at 0.5. The
/// final short batch is kept.
pub fn validate<T: Real, S: PairSource + ?Sized>(
    net: &Network,
    params: &ParamStore<T>,
    pairs: &S,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<MetricsReport> {
    Ok(confusion(net, params, pairs, stats, batch_size)?.report())
}

/// Change-mask confusion counts over a labelled split.
pub fn confusion<T: Real, S: PairSource + ?Sized>(
    net: &Network,
    params: &ParamStore<T>,
    pairs: &S,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<ConfusionCounts> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit("validation".to_string()));
    }
    let bs = batch_size.max(1);
    let mut counts = ConfusionCounts::default();
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(bs) {
        let ps = chunk.iter().map(|&i| pairs.get(i)).collect::<Result<Vec<_>>>()?;
        let batch = make_batch::<T>(&ps, stats, false)?;
        let label = batch
            .change
            .ok_or_else(|| Error::InvalidInput("evaluation samples need change labels".into()))?;
        let out = net.predict(params, &batch.t1, &batch.t2)?;
        counts.accumulate(&threshold(&out.change_score), &label)?;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::network::NetworkConfig;

    fn data(n: usize, seed: u64) -> Vec<ImagePair> {
        gen_synthetic(n, 16, seed, &SynthConfig::default()).unwrap()
    }

    fn tiny() -> Network {
        Network::new(&NetworkConfig::fccdn(0.125)).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            validation_start_epoch: 1,
            max_epochs: 3,
            ..TrainConfig::default()
        }
    }

    /// Replays a fixed F1 sequence, one value per validated epoch.
    struct Scripted(Vec<f64>, usize);

    impl<T: Real> Validator<T> for Scripted {
        fn validate(&mut self, _: &Network, _: &ParamStore<T>, _: usize) -> Result<MetricsReport> {
            let f1 = self.0.get(self.1).copied().unwrap_or(0.0);
            self.1 += 1;
            Ok(MetricsReport {
                f1,
                ..MetricsReport::default()
            })
        }
    }

    fn run(net: &Network, cfg: &TrainConfig, pairs: &[ImagePair], state: &mut TrainState<f32>) -> MemorySink<f32> {
        let stats = ChannelStats::compute(pairs).unwrap();
        let mut v = SplitValidator {
            pairs,
            stats: &stats,
            batch_size: 3,
        };
        let mut sink = MemorySink::default();
        train(net, cfg, &AugmentationConfig::default(), &stats, pairs, &mut v, &mut sink, state).unwrap();
        sink
    }

    #[test]
    fn batches_stack_in_order() {
        let ps = data(3, 0);
        let b = make_batch::<f32>(&ps, &ChannelStats::identity(3), true).unwrap();
        assert_eq!(b.t1.shape(), [3, 3, 16, 16]);
        assert_eq!(b.change.unwrap().shape(), [3, 1, 16, 16]);
        assert_eq!(b.classes.unwrap().0.shape, [3, 16, 16]);
        assert_eq!(b.ids, ps.iter().map(|p| p.id.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn short_final_batch_is_dropped_and_runs_are_reproducible() {
        let net = tiny();
        let ps = data(5, 1);
        let mut a = TrainState::new(&net, &cfg()).unwrap();
        let sa = run(&net, &cfg(), &ps, &mut a);
        assert_eq!(a.step, 6);
        assert_eq!(a.epoch, 3);
        assert_eq!(sa.epochs.len(), 3);
        assert!(sa.epochs[0].validation.is_none());
        assert!(sa.epochs[1].validation.is_some());
        let mut b = TrainState::new(&net, &cfg()).unwrap();
        let sb = run(&net, &cfg(), &ps, &mut b);
        assert_eq!(a, b);
        assert_eq!(sa.steps, sb.steps);
        assert_eq!(sa.epochs, sb.epochs);
    }

    #[test]
    fn resuming_at_an_epoch_boundary_matches_an_uninterrupted_run() {
        let net = tiny();
        let ps = data(4, 2);
        let mut full = TrainState::new(&net, &cfg()).unwrap();
        run(&net, &cfg(), &ps, &mut full);

        let first = TrainConfig {
            max_epochs: 2,
            ..cfg()
        };
        let mut part = TrainState::new(&net, &first).unwrap();
        run(&net, &first, &ps, &mut part);
        assert_eq!(part.epoch, 2);
        run(&net, &cfg(), &ps, &mut part);
        assert_eq!(part, full);
    }

    #[test]
    fn step_cap_stops_mid_epoch_without_counting_it() {
        let net = tiny();
        let ps = data(6, 3);
        let c = TrainConfig {
            max_steps: Some(4),
            ..cfg()
        };
        let mut s = TrainState::new(&net, &c).unwrap();
        let sink = run(&net, &c, &ps, &mut s);
        assert_eq!((s.step, s.epoch), (4, 1));
        assert_eq!(sink.steps.len(), 4);
    }

    #[test]
    fn scripted_plateau_run() {
        let net = tiny();
        let ps = data(2, 4);
        let stats = ChannelStats::compute(&ps).unwrap();
        let c = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let script = alloc::vec![0.1, 0.4, 0.9, 0.3, 0.2];
        let mut v = Scripted(script, 0);
        let mut sink = MemorySink::<f32>::default();
        let mut s = TrainState::new(&net, &c).unwrap();
        train(&net, &c, &AugmentationConfig::none(), &stats, &ps, &mut v, &mut sink, &mut s).unwrap();
        assert!(sink.epochs.iter().all(|e| (e.epoch < 30) == e.validation.is_none()));
        let mut lrs: Vec<f64> = Vec::new();
        for e in &sink.epochs {
            if lrs.last() != Some(&e.lr) {
                lrs.push(e.lr);
            }
        }
        let want = [0.002, 6e-4, 1.8e-4, 5.4e-5];
        assert_eq!(lrs.len(), 4);
        assert!(lrs.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(sink.epochs.last().unwrap().event, Some(PlateauEvent::Stop));
        assert_eq!(sink.best.as_ref().unwrap().0, 33);
        assert_eq!(s.plateau.best_epoch, Some(32));
        assert_eq!(s.plateau.reductions_done, 3);
    }

    #[test]
    fn ssl_needs_seg_heads() {
        let net = Network::new(&NetworkConfig::ded(0.125)).unwrap();
        let ps = data(2, 0);
        let stats = ChannelStats::identity(3);
        let c = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut s = TrainState::<f32>::new(&net, &c).unwrap();
        let err = train(
            &net,
            &c,
            &AugmentationConfig::none(),
            &stats,
            &ps,
            &mut Scripted(Vec::new(), 0),
            &mut MemorySink::<f32>::default(),
            &mut s,
        );
        assert!(matches!(err, Err(Error::MissingSegHeads)));
    }

    #[test]
    fn diverging_runs_dump_their_state() {
        struct Dumps(usize);
        impl TrainSink<f32> for Dumps {
            fn dump_state(&mut self, _: &TrainState<f32>, _: &str) -> Result<()> {
                self.0 += 1;
                Ok(())
            }
        }
        let net = tiny();
        let ps = data(2, 0);
        let c = TrainConfig {
            batch_size: 2,
            learning_rate: 1e30,
            max_epochs: 50,
            loss_variant: LossVariant::None,
            ..TrainConfig::default()
        };
        let mut s = TrainState::<f32>::new(&net, &c).unwrap();
        let mut sink = Dumps(0);
        let r = train(
            &net,
            &c,
            &AugmentationConfig::none(),
            &ChannelStats::identity(3),
            &ps,
            &mut Scripted(Vec::new(), 0),
            &mut sink,
            &mut s,
        );
        assert!(matches!(r, Err(Error::NonFiniteLoss { .. })), "{r:?}");
        assert_eq!(sink.0, 1);
    }

    #[test]
    fn validation_is_invariant_to_batch_size() {
        let net = tiny();
        let p = net.init_params::<f32>(3);
        let ps = data(7, 5);
        let stats = ChannelStats::compute(&ps).unwrap();
        let a = confusion(&net, &p, &ps, &stats, 1).unwrap();
        for bs in [2, 3, 7, 10] {
            assert_eq!(confusion(&net, &p, &ps, &stats, bs).unwrap(), a);
        }
        assert_eq!(a.total(), 7 * 16 * 16);
        assert!(matches!(confusion(&net, &p, &ps[..0], &stats, 2), Err(Error::EmptySplit(_))));
    }
}
