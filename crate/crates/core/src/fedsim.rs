//! In-process federated training: client registration and selection, local
//! updates with optional augmentation, sample-weighted averaging, and
//! per-round evaluation on held-out users.
//!
//! Every client draws from its own seeded streams and updates are averaged
//! in user-id order, so running clients concurrently never changes results.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::Sample;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_model, split_dataset, MetricsReport, SplitSpec, SplitUnit};
use crate::models::{fit, train_epoch_capped, ArchConfig, History, Model, TrainConfig};
use crate::numcore::{AdamState, ParamSet};
use crate::rng::{self, tag, Rng};

/// Share of users above which the augmentation pool is no longer "small".
pub const AUGMENTATION_USER_SHARE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub user_id: String,
    pub samples: Vec<Sample>,
    pub registered: bool,
    pub seed: u64,
    optimizer: Option<AdamState>,
}

impl ClientState {
    pub fn new(user_id: impl Into<String>, samples: Vec<Sample>, seed: u64) -> Self {
        Self { user_id: user_id.into(), samples, registered: false, seed, optimizer: None }
    }

    pub fn register(&mut self) {
        self.registered = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    SampleCount,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub local_batch_size: usize,
    pub augmentation_samples_per_client: usize,
    pub lr: f64,
    /// Deadline stand-in: optimizer steps a client may take per round.
    pub max_local_steps: Option<usize>,
    /// Discard updates from clients that hit the step cap.
    pub drop_stragglers: bool,
    /// Keep each client's Adam moments across rounds instead of starting
    /// fresh every round.
    pub persist_client_optimizer: bool,
    pub weighting: Weighting,
}

impl RoundConfig {
    pub fn desk() -> Self {
        Self {
            clients_per_round: 10,
            local_epochs: 1,
            local_batch_size: 32,
            augmentation_samples_per_client: 100,
            lr: 3e-3,
            max_local_steps: None,
            drop_stragglers: false,
            persist_client_optimizer: false,
            weighting: Weighting::SampleCount,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 || self.local_epochs == 0 || self.local_batch_size == 0 {
            return Err(Error::invalid("clients_per_round, local_epochs and local_batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub user_id: String,
    pub params: ParamSet,
    pub n_samples: usize,
    pub final_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientOutcome {
    Updated(ClientUpdate),
    Skipped { user_id: String, reason: String },
}

/// Uniform choice of `n` user ids without replacement, keyed by
/// (`seed`, `round`) and returned sorted.
pub fn select_clients(pool: &[String], n: usize, seed: u64, round: usize) -> Result<Vec<String>> {
    if n > pool.len() {
        return Err(Error::InsufficientData(format!("cannot select {n} clients from a pool of {}", pool.len())));
    }
    let mut sorted: Vec<&String> = pool.iter().collect();
    sorted.sort();
    let mut r = rng::stream(seed, &[tag::SELECT, round as u64]);
    let mut picked: Vec<String> = index::sample(&mut r, sorted.len(), n).into_iter().map(|i| sorted[i].clone()).collect();
    picked.sort();
    Ok(picked)
}

/// Local samples plus `n` draws without replacement from the shared pool,
/// shuffled together.
pub fn augment_local(local: &[Sample], aug: &[Sample], n: usize, r: &mut Rng) -> Result<Vec<Sample>> {
    if n > aug.len() {
        return Err(Error::InsufficientData(format!(
            "cannot draw {n} augmentation samples from a pool of {}",
            aug.len()
        )));
    }
    if n == 0 {
        return Ok(local.to_vec());
    }
    let mut out = local.to_vec();
    out.extend(index::sample(r, aug.len(), n).into_iter().map(|i| aug[i].clone()));
    out.shuffle(r);
    Ok(out)
}

/// Trains a copy of the global model on `samples`. Epoch `e` of round `round`
/// (both 0-based) uses shuffle/dropout streams keyed by the client seed and
/// `round * local_epochs + e`.
pub fn client_update(
    template: &Model,
    global: &ParamSet,
    client: &mut ClientState,
    samples: &[Sample],
    cfg: &RoundConfig,
    round: usize,
) -> Result<ClientOutcome> {
    if samples.is_empty() {
        return Ok(ClientOutcome::Skipped { user_id: client.user_id.clone(), reason: "no local samples".into() });
    }
    let mut model = template.clone();
    model.set_params(global.clone())?;
    let mut adam = match (cfg.persist_client_optimizer, client.optimizer.take()) {
        (true, Some(mut a)) => {
            a.lr = cfg.lr;
            a
        }
        _ => AdamState::new(global, cfg.lr),
    };
    let mut budget = cfg.max_local_steps;
    let mut steps = 0;
    let mut final_loss = f64::NAN;
    let mut truncated = false;
    for e in 0..cfg.local_epochs {
        if budget == Some(0) {
            truncated = true;
            break;
        }
        let epoch = (round * cfg.local_epochs + e) as u64;
        let o = train_epoch_capped(&mut model, &mut adam, samples, cfg.local_batch_size, client.seed, epoch, budget)?;
        steps += o.steps;
        final_loss = o.loss;
        budget = budget.map(|b| b - o.steps);
        if o.truncated {
            truncated = true;
            break;
        }
    }
    if cfg.persist_client_optimizer {
        client.optimizer = Some(adam);
    }
    if truncated && cfg.drop_stragglers {
        return Ok(ClientOutcome::Skipped {
            user_id: client.user_id.clone(),
            reason: format!("missed the deadline after {steps} steps"),
        });
    }
    Ok(ClientOutcome::Updated(ClientUpdate {
        user_id: client.user_id.clone(),
        params: model.params,
        n_samples: samples.len(),
        final_loss,
        steps,
    }))
}

/// Weighted mean of client parameters, accumulated in user-id order.
pub fn fed_average(updates: &[ClientUpdate], weighting: Weighting) -> Result<ParamSet> {
    let first = updates.first().ok_or_else(|| Error::InsufficientData("no client updates to average".into()))?;
    for u in updates {
        first.params.check_same_layout(&u.params)?;
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.n_samples.cmp(&b.n_samples)));
    let weights: Vec<f64> = match weighting {
        Weighting::SampleCount => {
            let total: usize = order.iter().map(|u| u.n_samples).sum();
            if total == 0 {
                return Err(Error::InsufficientData("client updates carry no samples".into()));
            }
            order.iter().map(|u| u.n_samples as f64 / total as f64).collect()
        }
        Weighting::Uniform => vec![1.0 / order.len() as f64; order.len()],
    };
    let mut out = first.params.zeros_like();
    for (u, w) in order.iter().zip(&weights) {
        for (acc, p) in out.iter_mut().zip(u.params.iter()) {
            for (a, &v) in acc.tensor.data_mut().iter_mut().zip(p.tensor.data()) {
                *a += w * v;
            }
        }
    }
    Ok(out)
}

/// True when the augmentation pool stays within the small-share guideline;
/// logs a warning otherwise.
pub fn check_augmentation_share(aug_users: usize, total_users: usize) -> bool {
    let ok = total_users > 0 && aug_users as f64 <= AUGMENTATION_USER_SHARE * total_users as f64;
    if !ok {
        log::warn!(
            "augmentation pool holds {aug_users} of {total_users} users, above the {:.0}% guideline",
            AUGMENTATION_USER_SHARE * 100.0
        );
    }
    ok
}

/// Central training on the shared augmentation pool; the result seeds the
/// federated rounds.
pub fn pretrain_augmentation(
    aug_train: &[Sample],
    aug_val: &[Sample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(Model, History)> {
    if aug_train.is_empty() {
        return Err(Error::InsufficientData("augmentation set is empty".into()));
    }
    let mut model = Model::build(arch)?;
    let history = fit(&mut model, aug_train, aug_val, cfg)?;
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub round: RoundConfig,
    pub augmentation: bool,
    pub pretrain: TrainConfig,
    pub seed: u64,
}

/// Clients, held-out test samples, and the shared augmentation pool.
#[derive(Debug, Clone, Default)]
pub struct FedData {
    pub clients: Vec<ClientState>,
    pub test: Vec<Sample>,
    pub aug_train: Vec<Sample>,
    pub aug_val: Vec<Sample>,
}

impl FedData {
    /// One registered client per user, with seeds derived from `seed`.
    pub fn from_user_samples(train: Vec<Sample>, test: Vec<Sample>, aug: Vec<Sample>, aug_val: Vec<Sample>, seed: u64) -> Self {
        let mut by_user: std::collections::BTreeMap<String, Vec<Sample>> = Default::default();
        for s in train {
            by_user.entry(s.user_id.clone()).or_default().push(s);
        }
        let clients = by_user
            .into_iter()
            .map(|(u, s)| {
                let mut c = ClientState::new(u.clone(), s, rng::derive_seed(seed, &[tag::CLIENT, rng::hash_str(&u)]));
                c.register();
                c
            })
            .collect();
        Self { clients, test, aug_train: aug, aug_val }
    }
}

/// Who ended up where in [`partition_users`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub client_users: usize,
    pub validation_users: usize,
    pub test_users: usize,
    pub augmentation_users: Vec<String>,
}

/// User-level 4:1:1 split into clients, validation users and held-out test
/// users. A share `aug_fraction` of all users is moved from the client side
/// into the augmentation pool, and the validation users' samples become the
/// pool's validation set.
pub fn partition_users(samples: &[Sample], aug_fraction: f64, seed: u64) -> Result<(FedData, PartitionSummary)> {
    if !(0.0..1.0).contains(&aug_fraction) {
        return Err(Error::invalid(format!("augmentation user fraction must be in [0, 1), got {aug_fraction}")));
    }
    let parts = split_dataset(samples, &SplitSpec::four_one_one(SplitUnit::User, seed))?;
    let users = |s: &[Sample]| s.iter().map(|x| x.user_id.clone()).collect::<BTreeSet<String>>();
    let train_users: Vec<String> = users(&parts.train).into_iter().collect();
    let total = train_users.len() + users(&parts.val).len() + users(&parts.test).len();
    let n_aug = (aug_fraction * total as f64).floor() as usize;
    if n_aug >= train_users.len() {
        return Err(Error::InsufficientData(format!(
            "{n_aug} augmentation users would leave no clients among {} training users",
            train_users.len()
        )));
    }
    let mut shuffled = train_users;
    shuffled.shuffle(&mut rng::stream(seed, &[tag::SPLIT, 1]));
    let aug_users: BTreeSet<String> = shuffled.into_iter().take(n_aug).collect();
    let (aug, clients): (Vec<Sample>, Vec<Sample>) = parts.train.into_iter().partition(|s| aug_users.contains(&s.user_id));
    let summary = PartitionSummary {
        client_users: users(&clients).len(),
        validation_users: users(&parts.val).len(),
        test_users: users(&parts.test).len(),
        augmentation_users: aug_users.into_iter().collect(),
    };
    Ok((FedData::from_user_samples(clients, parts.test, aug, parts.val, seed), summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<String>,
    /// Training samples per selected client, after augmentation.
    pub sample_counts: Vec<usize>,
    pub skipped: Vec<String>,
    pub mean_client_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: f64,
    pub test_weighted_f1: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub samples_checked: usize,
    pub violations: usize,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub history: Vec<RoundRecord>,
    pub model: Model,
    pub initial: MetricsReport,
    /// Round whose global model is returned; `None` when no round ran.
    pub best_round: Option<usize>,
    pub pretrain_history: Option<History>,
    pub audit: LeakageAudit,
}

/// Runs `cfg.rounds` federated rounds with at most `jobs` client updates in
/// flight, returning the per-round history and the best round's model.
pub fn run_rounds(arch: &ArchConfig, data: &mut FedData, cfg: &FedConfig, jobs: usize) -> Result<FedOutcome> {
    cfg.round.validate()?;
    let test_users: BTreeSet<&str> = data.test.iter().map(|s| s.user_id.as_str()).collect();
    let pool: Vec<String> = data.clients.iter().filter(|c| c.registered).map(|c| c.user_id.clone()).collect();
    if let Some(u) = pool.iter().find(|u| test_users.contains(u.as_str())) {
        return Err(Error::invalid(format!("test user '{u}' is registered as a training client")));
    }
    if let Some(s) = data.aug_train.iter().find(|s| test_users.contains(s.user_id.as_str())) {
        return Err(Error::invalid(format!("test user '{}' appears in the augmentation pool", s.user_id)));
    }
    if pool.len() < cfg.round.clients_per_round {
        return Err(Error::InsufficientData(format!(
            "{} registered clients, {} needed per round",
            pool.len(),
            cfg.round.clients_per_round
        )));
    }
    let aug_n = if cfg.augmentation { cfg.round.augmentation_samples_per_client } else { 0 };
    if aug_n > data.aug_train.len() {
        return Err(Error::InsufficientData(format!(
            "{aug_n} augmentation samples per client, pool has {}",
            data.aug_train.len()
        )));
    }

    let (mut model, pretrain_history) = if cfg.augmentation {
        let aug_users: BTreeSet<&str> = data.aug_train.iter().map(|s| s.user_id.as_str()).collect();
        let mut everyone: BTreeSet<&str> = data.clients.iter().map(|c| c.user_id.as_str()).collect();
        everyone.extend(data.aug_val.iter().map(|s| s.user_id.as_str()));
        everyone.extend(aug_users.iter().copied());
        everyone.extend(test_users.iter().copied());
        check_augmentation_share(aug_users.len(), everyone.len());
        let (m, h) = pretrain_augmentation(&data.aug_train, &data.aug_val, arch, &cfg.pretrain)?;
        (m, Some(h))
    } else {
        (Model::build(arch)?, None)
    };
    let initial = evaluate_model(&model, &data.test)?;

    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut audit = LeakageAudit::default();
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let aug_pool = &data.aug_train;

    for r in 0..cfg.rounds {
        let started = Instant::now();
        let selected = select_clients(&pool, cfg.round.clients_per_round, cfg.seed, r)?;
        let global = model.params.clone();
        let template = &model;
        let outcomes: Vec<Result<(ClientOutcome, usize, usize)>> = threads.install(|| {
            data.clients
                .par_iter_mut()
                .filter(|c| selected.binary_search(&c.user_id).is_ok())
                .map(|client| {
                    let mut ar = rng::stream(client.seed, &[tag::AUGMENT, r as u64]);
                    let samples = augment_local(&client.samples, aug_pool, aug_n, &mut ar)?;
                    let leaked = samples.iter().filter(|s| test_users.contains(s.user_id.as_str())).count();
                    let n = samples.len();
                    Ok((client_update(template, &global, client, &samples, &cfg.round, r)?, n, leaked))
                })
                .collect()
        });
        let mut updates = Vec::new();
        let mut skipped = Vec::new();
        let mut sample_counts = Vec::new();
        for o in outcomes {
            let (outcome, n, leaked) = o?;
            audit.samples_checked += n;
            audit.violations += leaked;
            sample_counts.push(n);
            match outcome {
                ClientOutcome::Updated(u) => updates.push(u),
                ClientOutcome::Skipped { user_id, reason } => {
                    log::info!("round {}: client {user_id} skipped ({reason})", r + 1);
                    skipped.push(user_id);
                }
            }
        }
        if !updates.is_empty() {
            model.set_params(fed_average(&updates, cfg.round.weighting)?)?;
        }
        let report = evaluate_model(&model, &data.test)?;
        let mean_client_loss = (!updates.is_empty())
            .then(|| updates.iter().map(|u| u.final_loss).sum::<f64>() / updates.len() as f64);
        log::info!("round {}: test accuracy {:.4}", r + 1, report.accuracy);
        if best.as_ref().is_none_or(|(acc, _, _)| report.accuracy > *acc) {
            best = Some((report.accuracy, r + 1, model.params.clone()));
        }
        history.push(RoundRecord {
            round: r + 1,
            selected,
            sample_counts,
            skipped,
            mean_client_loss,
            test_loss: report.loss,
            test_accuracy: report.accuracy,
            test_weighted_f1: report.weighted_f1,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    let best_round = best.as_ref().map(|b| b.1);
    if let Some((_, _, params)) = best {
        model.set_params(params)?;
    }
    Ok(FedOutcome { history, model, initial, best_round, pretrain_history, audit })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(user: &str, n: usize, v: f64) -> ClientUpdate {
        let mut p = ParamSet::new();
        p.push("w", crate::numcore::Tensor::filled(&[1], v), true).unwrap();
        ClientUpdate { user_id: user.into(), params: p, n_samples: n, final_loss: 0.0, steps: 1 }
    }

    #[test]
    fn weighted_mean_arithmetic() {
        let avg = fed_average(&[update("a", 1, 0.0), update("b", 3, 4.0)], Weighting::SampleCount).unwrap();
        assert_eq!(avg.get(0).data(), &[3.0]);
        let avg = fed_average(&[update("a", 1, 0.0), update("b", 3, 4.0)], Weighting::Uniform).unwrap();
        assert_eq!(avg.get(0).data(), &[2.0]);
        let single = fed_average(&[update("a", 5, 1.25)], Weighting::SampleCount).unwrap();
        assert_eq!(single.get(0).data(), &[1.25]);
        assert!(fed_average(&[], Weighting::SampleCount).is_err());
    }

    #[test]
    fn selection_contract() {
        let pool: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let mut all = select_clients(&pool, 10, 1, 0).unwrap();
        all.sort();
        let mut expect = pool.clone();
        expect.sort();
        assert_eq!(all, expect);
        assert_eq!(select_clients(&pool, 4, 1, 3).unwrap(), select_clients(&pool, 4, 1, 3).unwrap());
        assert!(select_clients(&pool, 11, 1, 0).is_err());
    }

    #[test]
    fn augmentation_share_warning() {
        assert!(check_augmentation_share(2, 40));
        assert!(!check_augmentation_share(3, 40));
    }
}
