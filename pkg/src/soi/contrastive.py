"""Meta-training: dual encoders, momentum target update, embedding queue, InfoNCE.

Each step augments every pooled image into two views; the target network
embeds one view into e1 (no gradient flows there), the online network embeds
the other into the query q.  The batch's e1 vectors join the queue bank
*before* the loss, so other images of the same batch act as negatives.  The
loss per query is softmax cross-entropy over cosine similarities scaled by
the temperature; by default the positive sits in the denominator (proper
cross-entropy, non-negative loss), with the exclusive variant behind a flag.

To keep failed steps side-effect free, the new e1 rows are only committed to
the queue after the gradient and parameter update succeed; the loss sees a
bank that already includes them, which is exactly the committed outcome.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from soi.augment import AugmentationPolicy, augment_pair
from soi.errors import DataError, DomainError, NumericFault, ShapeError
from soi.nn import Encoder, EncoderConfig, HeadConfig, Mode, ProjectionHead, parameters_dict
from soi.tensor import Tensor, l2_normalize, matmul

_EPOCH_TAG = 0xE90C4  # namespaces the per-epoch shuffle stream


@dataclass
class TrainConfig:
    temperature: float = 0.07
    momentum: float = 0.99
    learning_rate: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    queue_capacity: int = 4096
    total_steps: int = 1000
    seed: int = 0
    include_positive: bool = True
    lr_schedule: str = "constant"
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0,1]")
        if self.batch_size <= 0 or self.queue_capacity <= 0 or self.total_steps < 0:
            raise ValueError("batch_size/queue_capacity must be positive, total_steps >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine" and self.total_steps > 0:
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))
        return self.learning_rate


class EmbeddingQueue:
    """Fixed-capacity FIFO ring of unit-norm embedding vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0 or dim <= 0:
            raise ValueError("capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self.data = np.zeros((capacity, dim), dtype=np.float32)
        self.size = 0
        self.cursor = 0

    def enqueue(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ShapeError(f"queue holds dim-{self.dim} vectors, got shape {vec.shape}")
        self.data[self.cursor] = vec
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def snapshot(self) -> np.ndarray:
        """Entries in age order, oldest first."""
        if self.size < self.capacity:
            return self.data[: self.size].copy()
        return np.concatenate([self.data[self.cursor :], self.data[: self.cursor]])

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "queue.data": self.data,
            "queue.meta": np.array([self.size, self.cursor], dtype=np.float32),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        data = arrays["queue.data"]
        if data.shape != self.data.shape:
            raise ShapeError(f"queue shape mismatch: {data.shape} vs {self.data.shape}")
        self.data[...] = data
        self.size, self.cursor = (int(v) for v in arrays["queue.meta"])


def info_nce(q, positive, negatives, temperature: float,
             include_positive: bool = True) -> Tensor:
    """Contrastive loss for one query against a positive and N negatives.

    All vectors are expected unit-norm (so dot products are cosines); inputs
    that are off by more than 1e-5 are normalized defensively with a warning.
    Differentiable w.r.t. q.
    """
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64))
    positive = np.asarray(positive, dtype=q.data.dtype)
    negatives = np.asarray(negatives, dtype=q.data.dtype)
    if negatives.size == 0:
        negatives = negatives.reshape(0, positive.shape[0])
    if positive.shape != q.data.shape or (negatives.shape[1:] != positive.shape):
        raise ShapeError("q, positive and negatives must share the embedding dim")

    if abs(float(np.linalg.norm(q.data)) - 1.0) > 1e-5:
        warnings.warn("info_nce: non-unit query normalized defensively")
        q = l2_normalize(q)
    bank = np.concatenate([positive[None, :], negatives], axis=0)
    norms = np.linalg.norm(bank, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        warnings.warn("info_nce: non-unit keys normalized defensively")
        bank = bank / norms[:, None]

    if not include_positive and len(negatives) == 0:
        raise DomainError("exclusive-denominator loss needs at least one negative")

    logits = matmul(Tensor(bank), q.reshape(-1, 1)).reshape(len(bank)) * (1.0 / temperature)
    shift = float(logits.data.max())
    z = (logits - shift).exp()
    pos_mask = np.zeros(len(bank), dtype=bank.dtype)
    pos_mask[0] = 1.0
    pos_logit = (logits * pos_mask).sum()
    if include_positive:
        denom = z.sum()
    else:
        denom = (z * (1.0 - pos_mask)).sum()
    return denom.log() + shift - pos_logit


def momentum_update(target_params: dict[str, Tensor], online_params: dict[str, Tensor],
                    eta: float) -> None:
    """In-place: every target scalar <- eta*target + (1-eta)*online."""
    if target_params.keys() != online_params.keys():
        raise ShapeError("parameter sets are not aligned")
    for name, t in target_params.items():
        o = online_params[name]
        if t.data.shape != o.data.shape:
            raise ShapeError(f"shape mismatch for {name}")
        t.data *= eta
        t.data += (1.0 - eta) * o.data


class SGD:
    """Momentum SGD; weight decay enters the gradient (classic L2 coupling)."""

    def __init__(self, params: dict[str, Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads_finite(self) -> bool:
        return all(p.grad is None or np.all(np.isfinite(p.grad)) for p in self.params.values())

    def state_arrays(self, prefix: str = "opt") -> dict[str, np.ndarray]:
        return {f"{prefix}.{name}": v for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "opt") -> None:
        for name, v in self.velocity.items():
            v[...] = arrays[f"{prefix}.{name}"]


class DualEncoderState:
    """Online/target encoder+head parameter sets plus the step counter."""

    def __init__(self, encoder_config: EncoderConfig, head_config: HeadConfig, seed: int):
        self.encoder_config = encoder_config
        self.head_config = head_config
        self.online_encoder = Encoder(encoder_config, seed)
        self.online_head = ProjectionHead(encoder_config.embed_dim, head_config, seed + 1)
        # identical construction = exact copy at step 0
        self.target_encoder = Encoder(encoder_config, seed)
        self.target_head = ProjectionHead(encoder_config.embed_dim, head_config, seed + 1)
        for _, p in self._target_params().items():
            p.requires_grad = False  # gradient towards the target path is blocked
        self.step_count = 0

    # both sides use one key space so the dicts align pairwise for the blend
    def _online_params(self) -> dict[str, Tensor]:
        d = parameters_dict(self.online_encoder, "online_enc")
        d.update(parameters_dict(self.online_head, "online_head"))
        return d

    def _target_params(self) -> dict[str, Tensor]:
        d = parameters_dict(self.target_encoder, "online_enc")
        d.update(parameters_dict(self.target_head, "online_head"))
        return d

    def momentum_refresh(self, eta: float) -> None:
        momentum_update(self._target_params(), self._online_params(), eta)


def _batch_loss(q: Tensor, bank: np.ndarray, e1: np.ndarray, slots: np.ndarray,
                cfg: TrainConfig) -> Tensor:
    """Mean InfoNCE over the batch against a shared bank.

    ``slots[i]`` is the row of ``bank`` holding query i's positive (-1 if it
    was evicted before the loss).  The positive term is always computed from
    e1 directly; the bank slot, when present, is excluded from the negative
    mask so the positive never counts twice.
    """
    b, m = q.data.shape[0], bank.shape[0]
    inv_t = 1.0 / cfg.temperature
    scaled = matmul(q, Tensor(bank.T)) * inv_t                    # (B, M)
    pos = (q * Tensor(e1)).sum(axis=1) * inv_t                    # (B,)

    neg_mask = np.ones((b, m), dtype=np.float32)
    for i, s in enumerate(slots):
        if s >= 0:
            neg_mask[i, s] = 0.0

    shift = np.maximum(scaled.data.max(axis=1), pos.data)         # (B,) constant
    z = (scaled - shift.reshape(-1, 1)).exp() * neg_mask
    denom = z.sum(axis=1)
    if cfg.include_positive:
        denom = denom + (pos - shift).exp()
    return (denom.log() + shift - pos).mean()


def train_step(state: DualEncoderState, image_batch, queue: EmbeddingQueue,
               cfg: TrainConfig, policy: AugmentationPolicy, optimizer: SGD) -> float:
    """One training step; a numeric fault aborts it with full state rollback."""
    if len(image_batch) == 0:
        raise DataError("empty batch")
    views_m, views_n = [], []
    for i, img in enumerate(image_batch):
        pair = augment_pair(img, policy, (cfg.seed, state.step_count, i))
        views_m.append(pair.x_m)
        views_n.append(pair.x_n)
    x_m = Tensor(np.stack(views_m))
    x_n = Tensor(np.stack(views_n))

    # the train-mode forwards update running statistics; keep copies so an
    # aborted step leaves no trace (parameters are only touched after checks)
    buffers = [
        (buf, buf.copy())
        for module in (state.online_encoder, state.target_encoder)
        for _, buf in module.named_buffers()
    ]
    try:
        e1 = state.target_head(state.target_encoder(x_m, Mode.TRAIN)).data  # (B,D), no grad
        q = state.online_head(state.online_encoder(x_n, Mode.TRAIN))         # (B,D), grad

        existing = queue.snapshot()
        combined = np.concatenate([existing, e1], axis=0)
        evicted = max(0, combined.shape[0] - queue.capacity)
        bank = combined[evicted:]
        slots = np.array([existing.shape[0] + i - evicted for i in range(len(e1))])
        slots[slots < 0] = -1

        loss = _batch_loss(q, bank, e1, slots, cfg)
        if not np.isfinite(loss.data):
            raise NumericFault(f"non-finite loss at step {state.step_count}")
        optimizer.zero_grad()
        loss.backward()
        if not optimizer.grads_finite():
            raise NumericFault(f"non-finite gradient at step {state.step_count}")
    except NumericFault:
        for buf, saved in buffers:
            buf[...] = saved
        raise

    optimizer.step(cfg.lr_at(state.step_count))
    state.momentum_refresh(cfg.momentum)
    for row in e1:
        queue.enqueue(row)
    state.step_count += 1
    return float(loss.data)


def epoch_permutation(pool_size: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, _EPOCH_TAG, epoch)))
    return rng.permutation(pool_size)


# -- checkpoint payloads ------------------------------------------------------------


def _config_snapshot(kind: str, cfg: TrainConfig, encoder_config: EncoderConfig,
                     head_config: HeadConfig, step_count: int) -> dict:
    from dataclasses import asdict

    enc = asdict(encoder_config)
    enc["stages"] = [list(s) for s in enc["stages"]]
    enc["input_size"] = list(enc["input_size"])
    return {
        "kind": kind,
        "step_count": step_count,
        "train": asdict(cfg),
        "encoder": enc,
        "head": asdict(head_config),
    }


def training_state_arrays(state: DualEncoderState, queue: EmbeddingQueue,
                          optimizer: SGD) -> dict[str, np.ndarray]:
    """Everything a resumed run needs, as named float arrays."""
    from soi.nn import state_dict

    arrays = {}
    arrays.update(state_dict(state.online_encoder, "online_enc"))
    arrays.update(state_dict(state.online_head, "online_head"))
    arrays.update(state_dict(state.target_encoder, "target_enc"))
    arrays.update(state_dict(state.target_head, "target_head"))
    arrays.update(optimizer.state_arrays())
    arrays.update(queue.state_arrays())
    return arrays


def save_training_checkpoint(path, state: DualEncoderState, queue: EmbeddingQueue,
                             optimizer: SGD, cfg: TrainConfig) -> None:
    from soi.data import save_checkpoint

    snapshot = _config_snapshot("train_state", cfg, state.encoder_config,
                                state.head_config, state.step_count)
    save_checkpoint(path, training_state_arrays(state, queue, optimizer), snapshot)


def save_encoder_checkpoint(path, encoder: Encoder, cfg: TrainConfig,
                            head_config: HeadConfig, step_count: int) -> None:
    """The frozen-encoder artifact: the only part kept after pretraining."""
    from soi.data import save_checkpoint
    from soi.nn import state_dict

    snapshot = _config_snapshot("encoder", cfg, encoder.config, head_config, step_count)
    save_checkpoint(path, state_dict(encoder, "enc"), snapshot)


def _configs_from_snapshot(snapshot: dict):
    enc = dict(snapshot["encoder"])
    enc["stages"] = tuple(tuple(s) for s in enc["stages"])
    enc["input_size"] = tuple(enc["input_size"])
    return TrainConfig(**snapshot["train"]), EncoderConfig(**enc), HeadConfig(**snapshot["head"])


def load_training_checkpoint(path):
    """Restore (state, queue, optimizer, cfg) from a train_state checkpoint."""
    from soi.data import load_checkpoint
    from soi.errors import ConfigError
    from soi.nn import load_state_dict

    arrays, snapshot = load_checkpoint(path)
    if snapshot.get("kind") != "train_state":
        raise ConfigError(f"expected a train_state checkpoint, got {snapshot.get('kind')!r}")
    cfg, enc_cfg, head_cfg = _configs_from_snapshot(snapshot)
    state = DualEncoderState(enc_cfg, head_cfg, cfg.seed)
    load_state_dict(state.online_encoder, arrays, "online_enc")
    load_state_dict(state.online_head, arrays, "online_head")
    load_state_dict(state.target_encoder, arrays, "target_enc")
    load_state_dict(state.target_head, arrays, "target_head")
    state.step_count = int(snapshot["step_count"])
    queue = EmbeddingQueue(cfg.queue_capacity, head_cfg.out_dim)
    queue.load_state_arrays(arrays)
    optimizer = SGD(state._online_params(), cfg.sgd_momentum, cfg.weight_decay)
    optimizer.load_state_arrays(arrays)
    return state, queue, optimizer, cfg


def load_encoder_checkpoint(path) -> tuple[Encoder, dict]:
    """Restore the frozen encoder (and the full config snapshot) for eval."""
    from soi.data import load_checkpoint
    from soi.errors import ConfigError
    from soi.nn import load_state_dict

    arrays, snapshot = load_checkpoint(path)
    if snapshot.get("kind") != "encoder":
        raise ConfigError(f"expected an encoder checkpoint, got {snapshot.get('kind')!r}")
    _, enc_cfg, _ = _configs_from_snapshot(snapshot)
    encoder = Encoder(enc_cfg, seed=0)
    load_state_dict(encoder, arrays, "enc")
    return encoder.freeze(), snapshot


def pretrain(pool_images, cfg: TrainConfig, encoder_config: EncoderConfig,
             head_config: HeadConfig, policy: AugmentationPolicy | None = None,
             checkpoint_sink=None, log_sink=None,
             state: DualEncoderState | None = None,
             queue: EmbeddingQueue | None = None,
             optimizer: SGD | None = None) -> Encoder:
    """Run the training loop and return the frozen online encoder.

    ``pool_images`` is a sequence of decoded (C,H,W) arrays in [0,1].  Pass a
    previously restored (state, queue, optimizer) triple to resume; all
    randomness is derived from (seed, step) so a resumed run reproduces the
    uninterrupted loss sequence exactly.
    """
    n = len(pool_images)
    if n == 0:
        raise DataError("empty pool")
    policy = policy or AugmentationPolicy(output_size=encoder_config.input_size[1:])
    state = state or DualEncoderState(encoder_config, head_config, cfg.seed)
    queue = queue or EmbeddingQueue(cfg.queue_capacity, head_config.out_dim)
    optimizer = optimizer or SGD(state._online_params(), cfg.sgd_momentum, cfg.weight_decay)

    batch = min(cfg.batch_size, n)
    steps_per_epoch = max(1, n // batch)
    perm_epoch, perm = -1, None
    for step in range(state.step_count, cfg.total_steps):
        epoch, offset = divmod(step, steps_per_epoch)
        if epoch != perm_epoch:
            perm = epoch_permutation(n, cfg.seed, epoch)
            perm_epoch = epoch
        ids = perm[offset * batch : offset * batch + batch]
        images = [pool_images[i] for i in ids]
        loss = train_step(state, images, queue, cfg, policy, optimizer)
        if log_sink is not None:
            log_sink(step + 1, loss, cfg.lr_at(step), queue.size)
        if (checkpoint_sink is not None and cfg.checkpoint_interval
                and (step + 1) % cfg.checkpoint_interval == 0
                and (step + 1) != cfg.total_steps):
            checkpoint_sink(state, queue, optimizer, final=False)
    if checkpoint_sink is not None:
        checkpoint_sink(state, queue, optimizer, final=True)
    return state.online_encoder.freeze()
