"""Training protocol: hierarchical expert/timestep sampling, per-interval
denoising loss, annealed one-hot prior regularization, pretrained replication.

Each step activates exactly one expert: sample i uniformly, sample timesteps
inside interval i, mix the expert, backpropagate through loss plus prior, and
apply one optimizer update. All basis models stay updatable through the mixing
coefficients no matter which expert was drawn.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from . import remix
from .denoiser import MixedDenoiser, ModelConfig, denoiser_forward, init_plain_params
from .diffusion import DiffusionSchedule, build_schedule, forward_diffuse
from .numerics import Adam, NonFiniteError, Tensor, clip_global_norm

METRIC_FIELDS = ("step", "expert", "loss", "reg", "gamma", "lr")


@dataclass
class TrainConfig:
    total_steps: int = 20000
    batch_size: int = 128
    learning_rate: float = 1e-4
    seed: int = 0
    gamma0: float = 0.1
    anneal_steps: int = -1          # -1: first half of training
    mixer_kind: str = "softmax"
    mixer_scope: str = "global"
    n_experts: int = 20
    n_basis: int = 4
    denoise_weight: float = 1.0
    grad_clip: float = 1.0
    label_dropout: float = 0.1
    checkpoint_every: int = 0       # 0: final checkpoint only

    def resolved_anneal(self) -> int:
        return self.total_steps // 2 if self.anneal_steps < 0 else self.anneal_steps

    def validate(self) -> None:
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        if self.gamma0 < 0.0:
            raise ValueError(f"gamma0 must be >= 0, got {self.gamma0}")
        if self.resolved_anneal() > self.total_steps:
            raise ValueError("anneal_steps must not exceed total_steps")
        if self.mixer_kind not in remix.MIXER_KINDS:
            raise ValueError(f"unknown mixer kind '{self.mixer_kind}'")
        if self.mixer_scope not in remix.MIXER_SCOPES:
            raise ValueError(f"unknown mixer scope '{self.mixer_scope}'")
        if not (1 <= self.n_basis):
            raise ValueError("n_basis must be >= 1")
        if not (0.0 <= self.label_dropout < 1.0):
            raise ValueError("label_dropout must be in [0, 1)")


def prior_coefficients(N: int, K: int) -> np.ndarray:
    """One-hot prior rows assigning bases sequentially to interval blocks:
    row i is the indicator of basis floor(i*K/N)."""
    prior = np.zeros((N, K), dtype=np.float64)
    for i in range(N):
        prior[i, remix.onehot_basis_index(i, N, K)] = 1.0
    return prior


def gamma_schedule(step: int, anneal_steps: int, gamma0: float) -> float:
    """Linearly annealed prior strength: gamma0 * max(0, 1 - step/anneal_steps)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if anneal_steps <= 0:
        return 0.0
    return gamma0 * max(0.0, 1.0 - step / anneal_steps)


def prior_regularizer(alpha_rows: Tensor, prior: np.ndarray, gamma: float) -> Tensor:
    """Cross-entropy pull toward the one-hot prior: -gamma * sum a*_{ik} log a_{ik}.

    ``alpha_rows`` must be distribution rows (softmax kind). log is floored at
    1e-12 inside the log op.
    """
    if alpha_rows.shape != prior.shape:
        raise ValueError(f"alpha {alpha_rows.shape} and prior {prior.shape} differ")
    prior_t = Tensor(prior.astype(alpha_rows.dtype))
    ce = nx.reduce_sum(prior_t * nx.log(alpha_rows))
    return ce * (-gamma)


def sample_expert_and_timestep(
    rng: np.random.Generator, partition: remix.IntervalPartition
) -> tuple[int, int]:
    """Hierarchical draw: expert i uniform on [0, N), then t uniform on its
    half-open interval."""
    i = int(rng.integers(partition.N))
    lo, hi = remix.interval_bounds(partition, i)
    t = int(rng.integers(lo, hi))
    return i, t


def expert_loss(
    model,
    alpha,
    x0: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    sched: DiffusionSchedule,
    labels: np.ndarray | None = None,
    partition: remix.IntervalPartition | None = None,
    expert: int | None = None,
) -> Tensor:
    """Mean over the batch of ||eps - eps_hat(x_t, t)||^2 with x_t diffused
    from x0. When partition/expert are given, every t must belong to the
    expert's interval."""
    if partition is not None and expert is not None:
        for tv in np.atleast_1d(t):
            if remix.interval_of(int(tv), partition) != expert:
                raise AssertionError(
                    f"timestep {tv} outside expert {expert}'s interval"
                )
    x_t = forward_diffuse(x0, t, eps, sched)
    eps_pred = model.predict_noise(alpha, x_t, t, labels)
    return nx.mse(eps_pred, Tensor(eps.astype(eps_pred.dtype, copy=False)))


class PlainDenoiser:
    """Single un-widened model driven through the same training loop; the
    coefficient argument is accepted and ignored."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def build(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        arrays = init_plain_params(cfg, rng, dtype)
        return cls(cfg, {n: Tensor(a, requires_grad=True) for n, a in arrays.items()})

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]):
        return cls(cfg, {n: Tensor(a.copy(), requires_grad=True) for n, a in arrays.items()})

    def predict_noise(self, alpha, x, t, y=None) -> Tensor:
        return denoiser_forward(self.cfg, self.params, x, t, y)

    def trainable(self) -> dict[str, Tensor]:
        return self.params

    def plain_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}


def init_from_pretrained(
    plain: dict[str, np.ndarray] | str, K: int, cfg: ModelConfig
) -> MixedDenoiser:
    """Bank built by replicating pretrained plain weights K times, so every
    basis slice starts exactly equal to the checkpoint."""
    if isinstance(plain, str):
        bundle = load_bundle(plain)
        if bundle.kind != "plain":
            raise ValueError(f"expected a plain checkpoint, got kind '{bundle.kind}'")
        plain = bundle.model.plain_arrays()
        cfg = bundle.model_cfg
    return MixedDenoiser.from_plain(cfg, plain, K)


@dataclass
class TrainState:
    train_cfg: TrainConfig
    model_cfg: ModelConfig
    sched: DiffusionSchedule
    model: MixedDenoiser | PlainDenoiser
    mixer: remix.MixerTable | None
    partition: remix.IntervalPartition
    prior: np.ndarray | None
    optimizer: Adam
    rng_train: np.random.Generator
    step: int = 0

    @property
    def is_remix(self) -> bool:
        return self.mixer is not None


def init_train_state(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    sched: DiffusionSchedule | None = None,
    *,
    plain: bool = False,
    init_from: dict[str, np.ndarray] | str | None = None,
    dtype=np.float32,
) -> TrainState:
    """Build model, mixer, optimizer and rng streams from the configs.

    Three independent seed streams (parameters, mixer, training loop) are
    spawned from the config seed, so a plain run and a mixed run consume
    identical randomness where their structure overlaps.
    """
    train_cfg.validate()
    model_cfg.validate()
    sched = sched or build_schedule()
    ss = np.random.SeedSequence(train_cfg.seed)
    seed_init, seed_mixer, seed_train = ss.spawn(3)
    rng_init = np.random.default_rng(seed_init)
    rng_train = np.random.default_rng(seed_train)

    mixer = None
    if plain:
        if init_from is not None:
            arrays = init_from if isinstance(init_from, dict) else _plain_arrays_from(init_from)
            model: MixedDenoiser | PlainDenoiser = PlainDenoiser.from_arrays(model_cfg, arrays)
        else:
            model = PlainDenoiser.build(model_cfg, rng_init, dtype)
    else:
        if init_from is not None:
            arrays = init_from if isinstance(init_from, dict) else _plain_arrays_from(init_from)
            model = MixedDenoiser.from_plain(model_cfg, arrays, train_cfg.n_basis)
        else:
            model = MixedDenoiser.build(model_cfg, train_cfg.n_basis, rng_init, dtype)
        mixer = remix.create_mixer(
            train_cfg.mixer_kind,
            train_cfg.mixer_scope,
            train_cfg.n_experts,
            train_cfg.n_basis,
            np.random.default_rng(seed_mixer),
            layer_names=list(model.bank.layers),
            dtype=dtype,
        )

    params = dict(model.trainable())
    lazy = set()
    if mixer is not None:
        mixer_params = mixer.trainable()
        params.update(mixer_params)
        lazy = set(mixer_params)
    optimizer = Adam(params, lr=train_cfg.learning_rate, lazy_rows=lazy)

    # Training uses the non-plain partition for timestep sampling so that a
    # plain baseline and a mixed run draw identical (i, t) sequences.
    sampling_partition = remix.IntervalPartition(T=sched.T, N=train_cfg.n_experts)
    prior = prior_coefficients(train_cfg.n_experts, train_cfg.n_basis)
    return TrainState(
        train_cfg=train_cfg,
        model_cfg=model_cfg,
        sched=sched,
        model=model,
        mixer=mixer,
        partition=sampling_partition,
        prior=prior,
        optimizer=optimizer,
        rng_train=rng_train,
    )


def _plain_arrays_from(path: str) -> dict[str, np.ndarray]:
    bundle = load_bundle(path)
    if bundle.kind != "plain":
        raise ValueError(f"expected a plain checkpoint at {path}, got '{bundle.kind}'")
    return bundle.model.plain_arrays()


def train_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray | None]) -> dict:
    """One protocol step: hierarchical (i, t) sample, forward/backward over
    denoising loss plus the full prior sum, then one optimizer update."""
    cfg = state.train_cfg
    x0, labels = batch
    rng = state.rng_train
    dtype = x0.dtype

    i = int(rng.integers(state.partition.N))
    lo, hi = remix.interval_bounds(state.partition, i)
    t = rng.integers(lo, hi, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape).astype(dtype)
    if labels is not None and cfg.label_dropout > 0.0:
        drop = rng.random(labels.shape[0]) < cfg.label_dropout
        labels = np.where(drop, state.model_cfg.num_classes, labels)

    alpha = None
    if state.is_remix:
        alpha = state.model.alpha_for_expert(state.mixer, i)

    try:
        loss = expert_loss(
            state.model, alpha, x0, t, eps, state.sched, labels,
            partition=state.partition, expert=i,
        )
    except NonFiniteError as exc:
        raise NonFiniteError(f"non-finite loss at step {state.step} (expert {i}): {exc}") from exc

    gamma = 0.0
    reg_val = 0.0
    total = loss if cfg.denoise_weight == 1.0 else loss * cfg.denoise_weight
    if state.is_remix and state.mixer.kind == "softmax":
        gamma = gamma_schedule(state.step, cfg.resolved_anneal(), cfg.gamma0)
        if gamma > 0.0:
            reg = _prior_term(state, gamma)
            reg_val = reg.item()
            total = total + reg

    state.optimizer.zero_grad()
    total.backward()
    if cfg.grad_clip > 0.0:
        clip_global_norm(state.optimizer.params, cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return {
        "step": state.step,
        "expert": i,
        "loss": loss.item(),
        "reg": reg_val,
        "gamma": gamma,
        "lr": cfg.learning_rate,
    }


def _prior_term(state: TrainState, gamma: float) -> Tensor:
    """Prior cross-entropy over the full N x K table (all rows, every step).
    Local-scope mixers average the per-layer terms so gamma keeps its scale."""
    mixer = state.mixer
    if mixer.scope == "global":
        return prior_regularizer(remix.coefficient_rows(mixer), state.prior, gamma)
    terms = None
    names = list(mixer.logits)
    for name in names:
        r = prior_regularizer(remix.coefficient_rows(mixer, name), state.prior, gamma)
        terms = r if terms is None else terms + r
    return terms * (1.0 / len(names))


def train(
    state: TrainState,
    dataset,
    out_dir: str | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Run the configured number of steps; optionally write metrics.csv and
    checkpoint.npz (plus periodic checkpoints) under ``out_dir``."""
    cfg = state.train_cfg
    x_all = dataset.samples
    y_all = dataset.labels if state.model_cfg.num_classes > 0 else None
    metrics: list[dict] = []
    ckpt_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.npz")
    for _ in range(cfg.total_steps):
        idx = state.rng_train.integers(x_all.shape[0], size=cfg.batch_size)
        batch = (x_all[idx], y_all[idx] if y_all is not None else None)
        row = train_step(state, batch)
        metrics.append(row)
        if log_fn is not None:
            log_fn(row)
        if (
            ckpt_path
            and cfg.checkpoint_every > 0
            and state.step % cfg.checkpoint_every == 0
            and state.step < cfg.total_steps
        ):
            save_bundle(ckpt_path, state)
    if out_dir:
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
        save_bundle(ckpt_path, state)
    return metrics


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_FIELDS})


# -- checkpoint bundles ----------------------------------------------------------


@dataclass
class Bundle:
    kind: str                     # "remix" | "plain"
    model_cfg: ModelConfig
    sched: DiffusionSchedule
    model: MixedDenoiser | PlainDenoiser
    mixer: remix.MixerTable | None
    partition: remix.IntervalPartition | None
    train_cfg: dict | None
    step: int

    def n_experts(self) -> int:
        return self.partition.N if self.partition else 1


def bundle_from_state(state: TrainState) -> Bundle:
    """In-memory Bundle view of a training state (no file round trip)."""
    partition = None
    if state.is_remix:
        partition = remix.IntervalPartition(T=state.sched.T, N=state.train_cfg.n_experts)
    return Bundle(
        kind="remix" if state.is_remix else "plain",
        model_cfg=state.model_cfg,
        sched=state.sched,
        model=state.model,
        mixer=state.mixer,
        partition=partition,
        train_cfg=asdict(state.train_cfg),
        step=state.step,
    )


def save_bundle(path: str, state: TrainState) -> None:
    """Persist model, mixer and optimizer state with a versioned header."""
    meta = {
        "kind": "remix" if state.is_remix else "plain",
        "model": asdict(state.model_cfg),
        "schedule": {
            "kind": "linear",
            "T": state.sched.T,
            "beta_start": float(state.sched.beta[0]),
            "beta_end": float(state.sched.beta[-1]),
        },
        "train": asdict(state.train_cfg),
        "step": state.step,
    }
    arrays: dict[str, np.ndarray] = {}
    if state.is_remix:
        bank = state.model.bank
        meta["K"] = bank.K
        meta["N"] = state.train_cfg.n_experts
        meta["mixer"] = {"kind": state.mixer.kind, "scope": state.mixer.scope}
        meta["shared_names"] = sorted(bank.shared)
        for name, t in bank.layers.items():
            arrays[f"bank/{name}"] = t.data
        for name, t in bank.shared.items():
            arrays[f"sharedp/{name}"] = t.data
        for name, t in state.mixer.trainable().items():
            arrays[name] = t.data
    else:
        for name, t in state.model.params.items():
            arrays[f"param/{name}"] = t.data
    for name, arr in state.optimizer.state_arrays().items():
        arrays[f"opt/{name}"] = arr
    nx.save_arrays(path, arrays, meta)


def load_bundle(path: str) -> Bundle:
    arrays, meta = nx.load_arrays(path)
    model_cfg = ModelConfig(**meta["model"])
    s = meta["schedule"]
    sched = build_schedule(s["kind"], s["T"], s["beta_start"], s["beta_end"])
    train_cfg = meta.get("train")
    if meta["kind"] == "plain":
        plain = {
            name[len("param/"):]: arr
            for name, arr in arrays.items()
            if name.startswith("param/")
        }
        model: MixedDenoiser | PlainDenoiser = PlainDenoiser.from_arrays(model_cfg, plain)
        return Bundle("plain", model_cfg, sched, model, None, None, train_cfg, meta["step"])

    K = meta["K"]
    N = meta["N"]
    layers = {}
    shared = {}
    for name, arr in arrays.items():
        if name.startswith("bank/"):
            layers[name[len("bank/"):]] = Tensor(arr.copy(), requires_grad=True)
        elif name.startswith("sharedp/"):
            shared[name[len("sharedp/"):]] = Tensor(arr.copy(), requires_grad=True)
    bank = remix.BasisBank(K, layers, shared)
    model = MixedDenoiser(model_cfg, bank)

    kind = meta["mixer"]["kind"]
    scope = meta["mixer"]["scope"]
    logits: Tensor | dict[str, Tensor] | None = None
    if kind != "onehot":
        if scope == "global":
            logits = Tensor(arrays["mixer/logits"].copy(), requires_grad=True)
        else:
            prefix = "mixer/logits/"
            logits = {
                name[len(prefix):]: Tensor(arr.copy(), requires_grad=True)
                for name, arr in arrays.items()
                if name.startswith(prefix)
            }
    mixer = remix.MixerTable(kind, scope, N, K, logits)
    partition = remix.IntervalPartition(T=sched.T, N=N)
    return Bundle("remix", model_cfg, sched, model, mixer, partition, train_cfg, meta["step"])
