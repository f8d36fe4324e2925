"""Synchronous federated averaging across household clients.

Each global round broadcasts the global parameter vector, lets every client
run its local epochs of momentum SGD, and replaces the global model with the
unweighted mean of the returned vectors.  Client momentum persists across
rounds, which makes a single-client federation bit-identical to centralized
training with the same seeds.  The centralized baseline is the degenerate
single-model mode of the same loop.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelConfig, NilmModel
from .tensor import LayoutError, OptimizerState, ParamVector, check_same_layout
from .tensor import sgd_momentum_step_raw, softmax2_bce


class FederationError(Exception):
    """A round could not complete."""


class EmptyClientError(FederationError):
    """A client has no training windows and is excluded from the round."""


@dataclass(frozen=True)
class FederationConfig:
    """Protocol and optimizer constants shared by server and clients."""

    n_clients: int
    global_rounds: int
    local_epochs: int = 10
    local_batch: int = 32
    global_batch: int = 32
    eta: float = 1e-4
    rho: float = 0.5
    dropout: float = 0.1
    global_seed: int = 0
    client_seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.global_rounds < 0:
            raise ValueError("global_rounds must be >= 0")
        for fname in ("local_epochs", "local_batch", "global_batch"):
            if getattr(self, fname) < 0 or (fname != "local_epochs" and getattr(self, fname) < 1):
                raise ValueError(f"{fname} must be positive")
        if self.client_seeds and len(self.client_seeds) != self.n_clients:
            raise ValueError(
                f"{len(self.client_seeds)} client seeds for {self.n_clients} clients"
            )

    def client_seed(self, client_id: int) -> int:
        if self.client_seeds:
            return self.client_seeds[client_id]
        # deterministic derivation when seeds are not given explicitly
        return (self.global_seed + 0x9E3779B9 * (client_id + 1)) % 2**64


@dataclass
class RoundReport:
    """Per-global-round record for logs and the training-time study."""

    round_index: int
    client_losses: dict[int, float]
    wall_time_s: float
    bytes_up: dict[int, int]
    bytes_down: dict[int, int]
    excluded: tuple[int, ...] = ()
    metrics: dict | None = None


class ClientState:
    """One household's model, momentum and data; single-owner."""

    def __init__(
        self,
        client_id: int,
        model_config: ModelConfig,
        x: np.ndarray,
        y: np.ndarray,
        seed: int,
        eta: float,
        rho: float,
    ):
        self.client_id = client_id
        self.model = NilmModel(model_config)
        self.x = np.ascontiguousarray(x, dtype=np.float32)
        self.y = np.ascontiguousarray(y, dtype=np.uint8)
        self.rng = np.random.default_rng(seed)
        self.opt = OptimizerState(
            velocity=np.zeros(self.model.param_count, dtype=self.model.params_buffer().dtype),
            eta=eta,
            rho=rho,
        )

    @property
    def n_windows(self) -> int:
        return int(self.x.shape[0])


def train_epochs(
    model: NilmModel,
    opt: OptimizerState,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """Run momentum-SGD epochs in place; returns the mean batch loss.

    Each epoch shuffles the window order with `rng` and keeps the final
    partial batch.  Dropout inside the model draws from the same stream.
    """
    n = x.shape[0]
    if n == 0:
        raise EmptyClientError("no training windows")
    model.train_mode()
    values = model.params_buffer()
    grads = model.grads_buffer()
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            model.zero_grad()
            logits = model.forward(x[idx], rng=rng)
            loss, glogits = softmax2_bce(logits, y[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss {loss}")
            model.backward(glogits)
            sgd_momentum_step_raw(values, grads, opt.velocity, opt.eta, opt.rho)
            losses.append(loss)
    model.eval_mode()
    return float(np.mean(losses)) if losses else math.nan


def households_update(
    client: ClientState, global_params: ParamVector, epochs: int, batch_size: int
) -> tuple[ParamVector, float]:
    """One client's contribution to a round: local training from the broadcast
    parameters; momentum is retained for the next round."""
    client.model.load_params(global_params)
    if client.n_windows == 0:
        raise EmptyClientError(f"client {client.client_id} has no training windows")
    mean_loss = train_epochs(
        client.model, client.opt, client.x, client.y, epochs, batch_size, client.rng
    )
    # losses are reported at wire precision so in-process and networked runs
    # produce identical round reports
    return client.model.flatten_params(), float(np.float32(mean_loss))


def fedavg(updates: list[tuple[int, ParamVector]]) -> ParamVector:
    """Unweighted elementwise mean, summed in ascending client-id order.

    The canonical summation order makes the result independent of arrival
    order, bit for bit; accumulating at 64-bit and rounding once keeps the
    mean of N identical vectors exactly equal to that vector for any N.
    """
    if not updates:
        raise FederationError("fedavg needs at least one update")
    ids = [cid for cid, _ in updates]
    if len(set(ids)) != len(ids):
        raise FederationError(f"duplicate client ids in updates: {sorted(ids)}")
    ordered = sorted(updates, key=lambda item: item[0])
    first = ordered[0][1]
    acc = first.values.astype(np.float64)
    for _, pv in ordered[1:]:
        check_same_layout(first, pv)
        acc += pv.values
    acc /= float(len(ordered))
    return ParamVector(acc.astype(first.values.dtype), first.layout)


def run_federated(
    config: FederationConfig,
    model_config: ModelConfig,
    datasets: list[tuple[np.ndarray, np.ndarray]],
    eval_fn=None,
    parallel: bool = True,
) -> tuple[ParamVector, list[RoundReport]]:
    """Algorithm: broadcast, local epochs on every client in parallel, average.

    One dataset (X, Y) per client.  A round completes only when every
    non-excluded client's update has arrived; reports carry the logical
    payload bytes (param_count × 4 each way per client).
    """
    if len(datasets) != config.n_clients:
        raise FederationError(
            f"{len(datasets)} datasets for {config.n_clients} clients"
        )
    model_config = replace(model_config, init_seed=config.global_seed, dropout_p=config.dropout)
    global_model = NilmModel(model_config)
    clients = [
        ClientState(
            i, model_config, x, y, config.client_seed(i), config.eta, config.rho
        )
        for i, (x, y) in enumerate(datasets)
    ]
    payload = 4 * global_model.param_count
    reports: list[RoundReport] = []
    global_params = global_model.flatten_params()

    def one_client(client: ClientState) -> tuple[int, ParamVector, float]:
        pv, loss = households_update(
            client, global_params, config.local_epochs, config.local_batch
        )
        return client.client_id, pv, loss

    for r in range(1, config.global_rounds + 1):
        t0 = time.perf_counter()
        updates: list[tuple[int, ParamVector]] = []
        losses: dict[int, float] = {}
        excluded: list[int] = []
        if parallel and len(clients) > 1:
            with ThreadPoolExecutor(max_workers=len(clients)) as pool:
                futures = [pool.submit(one_client, c) for c in clients]
                results = []
                for fut in futures:
                    try:
                        results.append(fut.result())
                    except EmptyClientError:
                        results.append(None)
            for client, res in zip(clients, results):
                if res is None:
                    excluded.append(client.client_id)
                else:
                    cid, pv, loss = res
                    updates.append((cid, pv))
                    losses[cid] = loss
        else:
            for client in clients:
                try:
                    cid, pv, loss = one_client(client)
                except EmptyClientError:
                    excluded.append(client.client_id)
                    continue
                updates.append((cid, pv))
                losses[cid] = loss
        if not updates:
            raise FederationError(f"round {r}: every client was excluded")
        global_params = fedavg(updates)
        global_model.load_params(global_params)
        report = RoundReport(
            round_index=r,
            client_losses=losses,
            wall_time_s=time.perf_counter() - t0,
            bytes_up={cid: payload for cid, _ in updates},
            bytes_down={c.client_id: payload for c in clients},
            excluded=tuple(excluded),
        )
        if eval_fn is not None:
            report.metrics = eval_fn(global_model)
        reports.append(report)
    return global_params, reports


def run_centralized(
    config: FederationConfig,
    model_config: ModelConfig,
    dataset: tuple[np.ndarray, np.ndarray],
    eval_fn=None,
) -> tuple[ParamVector, list[RoundReport]]:
    """Single-model baseline: global_rounds × local_epochs epochs on pooled data.

    Reports come in blocks of local_epochs so the round grid lines up with
    the federated runs.  With one client and equal seeds this is bit-identical
    to `run_federated`, which is the property that pins momentum persistence.
    """
    x, y = dataset
    model_config = replace(model_config, init_seed=config.global_seed, dropout_p=config.dropout)
    client = ClientState(
        0, model_config, x, y, config.client_seed(0), config.eta, config.rho
    )
    reports: list[RoundReport] = []
    for r in range(1, config.global_rounds + 1):
        t0 = time.perf_counter()
        mean_loss = train_epochs(
            client.model, client.opt, client.x, client.y,
            config.local_epochs, config.local_batch, client.rng,
        )
        report = RoundReport(
            round_index=r,
            client_losses={0: float(np.float32(mean_loss))},
            wall_time_s=time.perf_counter() - t0,
            bytes_up={0: 0},
            bytes_down={0: 0},
        )
        if eval_fn is not None:
            report.metrics = eval_fn(client.model)
        reports.append(report)
    return client.model.flatten_params(), reports
