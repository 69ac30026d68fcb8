//! Synchronous federated averaging over simulated clients.
//!
//! A round broadcasts the global parameters, trains every client locally
//! (in parallel, each client owning its model and shard), averages the
//! returned parameter vectors, and records the full-data loss before and
//! after together with `‖∇L(w_t)‖²` so the per-round descent slack
//! `δ_t = L(w_{t+1}) − L(w_t) + η‖∇L(w_t)‖²` can be audited.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::models::{Classifier, ParamVector};
use crate::numkit::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    /// One gradient step per epoch on the whole shard, in storage order.
    Full,
    Mini(usize),
}

impl std::str::FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BatchSize::Full),
            n => match n.parse::<usize>() {
                Ok(0) | Err(_) => Err(Error::Config(format!("batch size {n:?}: expected 'full' or a positive integer"))),
                Ok(b) => Ok(BatchSize::Mini(b)),
            },
        }
    }
}

impl std::fmt::Display for BatchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchSize::Full => f.write_str("full"),
            BatchSize::Mini(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: BatchSize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 1,
            batch: BatchSize::Mini(32),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState<M> {
    pub id: usize,
    pub data: Dataset,
    pub model: M,
    pub rng: Rng,
}

impl<M: Classifier> ClientState<M> {
    pub fn new(id: usize, data: Dataset, model: M, rng: Rng) -> Result<Self> {
        if data.dim() != model.input_dim() {
            return Err(Error::dims(
                "ClientState::new",
                format!("shard with {} features", data.dim()),
                format!("model input {}", model.input_dim()),
            ));
        }
        Ok(Self { id, data, model, rng })
    }
}

/// Plain SGD on the client's shard. Returns the trained parameters and the
/// size-weighted mean batch loss of every epoch.
pub fn local_train<M: Classifier>(
    client: &mut ClientState<M>,
    epochs: usize,
    lr: f64,
    batch: BatchSize,
) -> Result<(ParamVector, Vec<f64>)> {
    if epochs == 0 {
        return Err(Error::Config("local training needs at least one epoch".into()));
    }
    let n = client.data.len();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let context = |e: Error| match e {
            Error::Divergence(msg) => Error::Divergence(format!("client {} epoch {epoch}: {msg}", client.id)),
            other => other,
        };
        match batch {
            BatchSize::Full => {
                let (loss, grads) = client
                    .model
                    .loss_and_param_grads(client.data.features(), client.data.labels())
                    .map_err(context)?;
                client.model.sgd_step(&grads, lr)?;
                trace.push(loss);
            }
            BatchSize::Mini(size) => {
                let mut order: Vec<usize> = (0..n).collect();
                client.rng.shuffle(&mut order);
                let mut total = 0.0;
                for chunk in order.chunks(size) {
                    let x = client.data.features().select_rows(chunk);
                    let y: Vec<usize> = chunk.iter().map(|&i| client.data.labels()[i]).collect();
                    let (loss, grads) = client.model.loss_and_param_grads(&x, &y).map_err(context)?;
                    client.model.sgd_step(&grads, lr)?;
                    total += loss * chunk.len() as f64;
                }
                trace.push(total / n as f64);
            }
        }
    }
    if client.model.params().iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("client {}: non-finite parameters", client.id)));
    }
    Ok((client.model.flatten(), trace))
}

/// Unweighted elementwise mean. Each coordinate is averaged over its sorted
/// values with a running mean, so the result is exactly invariant to client
/// order and `fedavg(θ, …, θ) = θ` bit for bit.
pub fn fedavg(params: &[ParamVector]) -> Result<ParamVector> {
    let first = params
        .first()
        .ok_or_else(|| Error::Aggregation("no parameter vectors to average".into()))?;
    for (k, p) in params.iter().enumerate() {
        if p.layout_hash() != first.layout_hash() || p.len() != first.len() {
            return Err(Error::Aggregation(format!(
                "client {k} layout {:016x}/{} differs from {:016x}/{}",
                p.layout_hash(),
                p.len(),
                first.layout_hash(),
                first.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(first.len());
    let mut column = Vec::with_capacity(params.len());
    for i in 0..first.len() {
        column.clear();
        column.extend(params.iter().map(|p| p.values()[i]));
        column.sort_by(f64::total_cmp);
        let mut mean = 0.0;
        for (k, v) in column.iter().enumerate() {
            mean += (v - mean) / (k + 1) as f64;
        }
        out.push(mean);
    }
    Ok(ParamVector::new(out, first.layout_hash()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm_sq: Option<f64>,
    pub slack: Option<f64>,
    /// Last-epoch training loss reported by each client.
    pub client_losses: Vec<f64>,
}

impl RoundRecord {
    pub fn from_measurements(
        round: usize,
        loss_before: f64,
        loss_after: f64,
        grad_norm_sq: Option<f64>,
        lr: f64,
        client_losses: Vec<f64>,
    ) -> Self {
        let slack = grad_norm_sq.map(|g| loss_after - loss_before + lr * g);
        Self {
            round,
            loss_before,
            loss_after,
            grad_norm_sq,
            slack,
            client_losses,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: ParamVector,
    pub history: Vec<RoundRecord>,
}

impl ServerState {
    pub fn new(global: ParamVector) -> Self {
        Self {
            global,
            history: Vec::new(),
        }
    }
}

pub fn broadcast<M: Classifier>(server: &ServerState, clients: &mut [ClientState<M>]) -> Result<()> {
    for c in clients {
        c.model.unflatten(&server.global)?;
    }
    Ok(())
}

fn global_eval<M: Classifier>(template: &M, params: &ParamVector, data: &Dataset, gradient: bool) -> Result<(f64, Option<f64>)> {
    let mut model = template.clone();
    model.unflatten(params)?;
    if gradient {
        let (loss, g) = model.loss_and_param_grads(data.features(), data.labels())?;
        Ok((loss, Some(g.norm_sq())))
    } else {
        Ok((model.loss(data.features(), data.labels())?, None))
    }
}

/// One synchronous round: broadcast, parallel local training, FedAvg,
/// broadcast. `audit_data` is the union of the client shards; the gradient
/// norm at `w_t` is only computed when `with_gradient` is set.
pub fn run_round<M: Classifier>(
    server: &mut ServerState,
    clients: &mut [ClientState<M>],
    cfg: &TrainConfig,
    audit_data: &Dataset,
    with_gradient: bool,
) -> Result<RoundRecord> {
    let round = server.history.len();
    let template = clients
        .first()
        .map(|c| c.model.clone())
        .ok_or_else(|| Error::Config("a round needs at least one client".into()))?;
    let (loss_before, grad_norm_sq) = global_eval(&template, &server.global, audit_data, with_gradient)
        .map_err(|e| round_context(e, round, None))?;

    broadcast(server, clients)?;
    let results: Vec<Result<(ParamVector, Vec<f64>)>> = clients
        .par_iter_mut()
        .map(|c| {
            let id = c.id;
            local_train(c, cfg.epochs, cfg.lr, cfg.batch).map_err(|e| round_context(e, round, Some(id)))
        })
        .collect();
    let mut updates = Vec::with_capacity(results.len());
    let mut client_losses = Vec::with_capacity(results.len());
    for r in results {
        let (p, trace) = r?;
        updates.push(p);
        client_losses.push(*trace.last().unwrap());
    }
    server.global = fedavg(&updates)?;
    broadcast(server, clients)?;

    let (loss_after, _) = global_eval(&template, &server.global, audit_data, false)
        .map_err(|e| round_context(e, round, None))?;
    let record = RoundRecord::from_measurements(round, loss_before, loss_after, grad_norm_sq, cfg.lr, client_losses);
    server.history.push(record.clone());
    Ok(record)
}

fn round_context(e: Error, round: usize, client: Option<usize>) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(match client {
            Some(c) => format!("round {round}, client {c}: {msg}"),
            None => format!("round {round}, global evaluation: {msg}"),
        }),
        other => other,
    }
}

/// Server plus clients plus the pooled audit data.
#[derive(Debug, Clone)]
pub struct Federation<M> {
    pub server: ServerState,
    pub clients: Vec<ClientState<M>>,
    pub config: TrainConfig,
    pub with_gradient: bool,
    audit_data: Dataset,
}

impl<M: Classifier> Federation<M> {
    /// Every client starts from `initial`; client `k` draws batches from
    /// `rng.split(k)`.
    pub fn new(initial: M, shards: Vec<Dataset>, config: TrainConfig, rng: &Rng) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        let audit_data = Dataset::concat(&shards.iter().collect::<Vec<_>>())?;
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(k, shard)| ClientState::new(k, shard, initial.clone(), rng.split(k as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            server: ServerState::new(initial.flatten()),
            clients,
            config,
            with_gradient: true,
            audit_data,
        })
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        run_round(&mut self.server, &mut self.clients, &self.config, &self.audit_data, self.with_gradient)
    }

    pub fn run(&mut self, rounds: usize) -> Result<&[RoundRecord]> {
        for _ in 0..rounds {
            self.run_round()?;
        }
        Ok(&self.server.history)
    }

    pub fn global_model(&self) -> Result<M> {
        let mut m = self.clients[0].model.clone();
        m.unflatten(&self.server.global)?;
        Ok(m)
    }

    pub fn audit_data(&self) -> &Dataset {
        &self.audit_data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub tol: f64,
    pub slacks: Vec<f64>,
    pub within: usize,
    pub fraction_within: f64,
    pub max_slack: f64,
}

/// Measures the descent slack of every round and the fraction with
/// `δ_t ≤ tol`. Reports only; the inequality is not enforced.
pub fn descent_audit(history: &[RoundRecord], tol: f64) -> Result<AuditReport> {
    if history.len() < 2 {
        return Err(Error::Audit(format!("need at least 2 rounds, have {}", history.len())));
    }
    let slacks = history
        .iter()
        .map(|r| {
            r.slack
                .ok_or_else(|| Error::Audit(format!("round {} has no gradient-norm measurement", r.round)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let within = slacks.iter().filter(|&&s| s <= tol).count();
    Ok(AuditReport {
        tol,
        within,
        fraction_within: within as f64 / slacks.len() as f64,
        max_slack: slacks.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        slacks,
    })
}

/// `round,loss_before,loss_after,grad_norm_sq,slack,client_0,…`
pub fn history_csv(history: &[RoundRecord]) -> String {
    let clients = history.iter().map(|r| r.client_losses.len()).max().unwrap_or(0);
    let mut s = String::from("round,loss_before,loss_after,grad_norm_sq,slack");
    for k in 0..clients {
        let _ = write!(s, ",client_{k}");
    }
    s.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in history {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            r.round,
            r.loss_before,
            r.loss_after,
            opt(r.grad_norm_sq),
            opt(r.slack)
        );
        for l in &r.client_losses {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
    }
    s
}

pub fn write_history_csv(history: &[RoundRecord], path: &Path) -> Result<()> {
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
