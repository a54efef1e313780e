"""Multi-client split learning over an in-memory transport.

Clients train one after another against a single server.  Before a client
starts it copies the weights of the client that trained last.  Each batch
goes client -> server as a :class:`SmashedMsg` and the split-layer gradient
comes back as a :class:`GradMsg`.  When the server's review policy is on,
every incoming batch is duplicated and the copy gets extra Gaussian noise so
the server keeps seeing the noisiest client distribution.

The server-side functions only ever receive messages, never raw inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import nn
from .dp import PrivacyBudget, add_gaussian, clamp01, compose_review_sigma
from .nn import DTYPE, Sequential, ShapeError
from .optim import Adam, AdamState, adam_step
from .zoo import SplitModelSpec

VALUE_BYTES = 8
LABEL_BYTES = 8


class NoisyHead:
    """Client part with clamp-to-[0,1] and Gaussian noise at one internal position.

    ``noise_index`` counts client layers run before the noise (0 = on the raw
    input); ``None`` gives a plain head with no clamp.  Noise is a
    pass-through for gradients; the clamp passes gradient only where its
    input was inside [0, 1].
    """

    def __init__(self, model: Sequential, noise_index: int | None):
        k = len(model) if noise_index is None else noise_index
        self.noise_index = noise_index
        self.pre = Sequential(model.layers[:k], model.input_shape)
        self.post = Sequential(model.layers[k:], self.pre.output_shape)
        self.layers = model.layers
        self.input_shape = model.input_shape

    @property
    def output_shape(self):
        return self.post.output_shape

    def parameters(self) -> list[np.ndarray]:
        return self.pre.parameters() + self.post.parameters()

    def set_parameters(self, values: Sequence[np.ndarray]) -> None:
        n = len(self.pre.parameters())
        self.pre.set_parameters(values[:n])
        self.post.set_parameters(values[n:])

    def bump(self) -> None:
        self.pre.version += 1
        self.post.version += 1

    def forward(self, x: np.ndarray, sigma: float, rng: np.random.Generator | None):
        h, t_pre = nn.forward(self.pre, x)
        mask = None
        if self.noise_index is not None:
            mask = (h >= 0.0) & (h <= 1.0)
            h = add_gaussian(clamp01(h), sigma, rng)
        z, t_post = nn.forward(self.post, h)
        return z, (t_pre, mask, t_post)

    def backward(self, ctx, grad_z: np.ndarray):
        t_pre, mask, t_post = ctx
        g, grads_post = nn.backward(self.post, t_post, grad_z)
        if mask is not None:
            g = g * mask
        gx, grads_pre = nn.backward(self.pre, t_pre, g)
        return gx, grads_pre + grads_post

    def smash(self, x: np.ndarray, sigma: float, rng, batch_size: int = 512) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch_size], sigma, rng)[0]
                               for i in range(0, len(x), batch_size)])


@dataclass
class ReviewPolicy:
    enabled: bool = False
    target: str | float = "max"  # "max" over client sigmas, or a fixed sigma

    def target_sigma(self, clients: Sequence["ClientState"]) -> float:
        if self.target == "max":
            return max(c.sigma for c in clients)
        return float(self.target)


@dataclass
class ClientState:
    id: int
    head: NoisyHead
    budget: PrivacyBudget | None
    images: np.ndarray
    labels: np.ndarray
    noise_rng: np.random.Generator
    batch_rng: np.random.Generator
    opt: AdamState = field(init=False)
    pending: object = field(default=None, repr=False)

    def __post_init__(self):
        self.opt = AdamState.for_params(self.head.parameters())

    @property
    def sigma(self) -> float:
        return self.budget.sigma if self.budget is not None else 0.0

    def batches(self, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.batch_rng.permutation(len(self.labels))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield self.images[idx], self.labels[idx]


@dataclass
class ServerState:
    model: Sequential
    review: ReviewPolicy
    rng: np.random.Generator
    last_trained: int | None = None
    optimizer: Adam = field(init=False)

    def __post_init__(self):
        self.optimizer = Adam(self.model)


@dataclass
class SmashedMsg:
    features: np.ndarray
    labels: np.ndarray
    byte_count: int

    @classmethod
    def of(cls, features, labels) -> "SmashedMsg":
        return cls(features, labels, VALUE_BYTES * features.size + LABEL_BYTES * labels.size)


@dataclass
class GradMsg:
    grad: np.ndarray
    byte_count: int


def make_client(cid: int, spec: SplitModelSpec, budget: PrivacyBudget | None, images, labels,
                noise_rng, batch_rng) -> ClientState:
    return ClientState(cid, NoisyHead(spec.client_model(), spec.noise_index), budget,
                       images, labels, noise_rng, batch_rng)


def make_server(spec: SplitModelSpec, review: ReviewPolicy | None = None, rng=None) -> ServerState:
    return ServerState(spec.server_model(), review or ReviewPolicy(), rng or np.random.default_rng(0))


def shuffle_schedule(clients: Sequence, rng: np.random.Generator) -> list:
    if not clients:
        raise ValueError("no clients to schedule")
    return [clients[i] for i in rng.permutation(len(clients))]


def handoff_weights(src: ClientState, dst: ClientState) -> ClientState:
    if src is dst:
        return dst
    ps, pd = src.head.parameters(), dst.head.parameters()
    if len(ps) != len(pd) or any(a.shape != b.shape for a, b in zip(ps, pd)):
        raise ShapeError(f"client {src.id} and client {dst.id} have different client architectures")
    dst.head.set_parameters([p.copy() for p in ps])
    return dst


def client_forward(client: ClientState, x: np.ndarray, y: np.ndarray) -> SmashedMsg:
    z, ctx = client.head.forward(x, client.sigma, client.noise_rng)
    client.pending = ctx
    return SmashedMsg.of(z, np.asarray(y))


def server_prepare_data(msg: SmashedMsg, sigma_hat: float, rng: np.random.Generator):
    """Stack the batch on top of a noisier copy of itself; labels are repeated."""
    dup = add_gaussian(msg.features, sigma_hat, rng)
    return np.concatenate([msg.features, dup]), np.concatenate([msg.labels, msg.labels])


def server_gradients(server: ServerState, features: np.ndarray, labels: np.ndarray):
    """Loss, gradient w.r.t. ``features`` and server parameter gradients (no update)."""
    logits, trace = nn.forward(server.model, features)
    loss, dlogits = nn.softmax_cross_entropy(logits, labels)
    dfeat, grads = nn.backward(server.model, trace, dlogits)
    return loss, dfeat, grads


def server_train_step(server: ServerState, features: np.ndarray, labels: np.ndarray, lr: float):
    loss, dfeat, grads = server_gradients(server, features, labels)
    server.optimizer.step(grads, lr)
    return dfeat, loss


def slice_split_gradients(full_grad: np.ndarray, original: SmashedMsg) -> GradMsg:
    b = original.features.shape[0]
    if full_grad.shape[0] != 2 * b:
        raise ShapeError(f"expected {2 * b} gradient rows, got {full_grad.shape[0]}")
    g = full_grad[:b]
    return GradMsg(g, VALUE_BYTES * g.size)


def client_backward(client: ClientState, grad: GradMsg, lr: float) -> ClientState:
    if client.pending is None:
        raise nn.TraceError(f"client {client.id} has no forward pass awaiting gradients")
    expected = client.pending[2].output_shape
    if grad.grad.shape != expected:
        raise ShapeError(f"gradient shape {grad.grad.shape} != smashed shape {expected}")
    _, grads = client.head.backward(client.pending, grad.grad)
    client.pending = None
    adam_step(client.head.parameters(), grads, client.opt, lr)
    client.head.bump()
    return client


def select_review_sigma(current: ClientState, clients: Sequence[ClientState], policy: ReviewPolicy) -> float:
    target = policy.target_sigma(clients)
    if target < current.sigma:
        raise ValueError(f"review target {target} is below client {current.id}'s sigma {current.sigma}")
    return compose_review_sigma(current.sigma, target)


@dataclass
class EpochReport:
    order: list[int]
    loss: dict[int, float]
    bytes_up: dict[int, int]
    bytes_down: dict[int, int]
    batches: dict[int, int]


def server_exchange(server: ServerState, msg: SmashedMsg, lr: float, sigma_hat: float | None):
    """Server half of one batch: train on the message and return (GradMsg, loss).

    ``sigma_hat=None`` means plain split learning (no duplication)."""
    if sigma_hat is None:
        grad_full, loss = server_train_step(server, msg.features, msg.labels, lr)
        return GradMsg(grad_full, VALUE_BYTES * grad_full.size), loss
    feats, labels = server_prepare_data(msg, sigma_hat, server.rng)
    grad_full, loss = server_train_step(server, feats, labels, lr)
    return slice_split_gradients(grad_full, msg), loss


def run_global_epoch(clients: Sequence[ClientState], server: ServerState, rng: np.random.Generator,
                     lr: float, batch_size: int = 64) -> EpochReport:
    by_id = {c.id: c for c in clients}
    report = EpochReport([], {}, {}, {}, {})
    for client in shuffle_schedule(list(clients), rng):
        if server.last_trained is not None and server.last_trained in by_id:
            handoff_weights(by_id[server.last_trained], client)
        sigma_hat = select_review_sigma(client, clients, server.review) if server.review.enabled else None
        losses, up, down, nb = [], 0, 0, 0
        for x, y in client.batches(batch_size):
            msg = client_forward(client, x, y)
            back, loss = server_exchange(server, msg, lr, sigma_hat)
            client_backward(client, back, lr)
            losses.append(loss)
            up += msg.byte_count
            down += back.byte_count
            nb += 1
        server.last_trained = client.id
        report.order.append(client.id)
        report.loss[client.id] = float(np.mean(losses)) if losses else float("nan")
        report.bytes_up[client.id] = up
        report.bytes_down[client.id] = down
        report.batches[client.id] = nb
    return report


def predict(head: NoisyHead, server_model: Sequential, images: np.ndarray, sigma: float, rng,
            batch_size: int = 500) -> np.ndarray:
    preds = []
    for i in range(0, len(images), batch_size):
        z, _ = head.forward(images[i:i + batch_size].astype(DTYPE), sigma, rng)
        preds.append(server_model(z).argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)
