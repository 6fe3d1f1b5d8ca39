"""Operator entry point: train, sample, analyze, bench, gradcheck.

Configs are flat key=value text files with '#' comments; command-line
``--set key=value`` flags override file keys, and the resolved config is
echoed into the output directory. Exit codes: 0 ok, 1 check failure,
2 usage/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import evalbench, remix, training
from . import numerics as nx
from .denoiser import (
    MixedDenoiser,
    ModelConfig,
    plain_provider,
    precomputed_provider,
    runtime_mix_provider,
)
from .diffusion import SamplerConfig, build_schedule, sample
from .numerics import NonFiniteError, Tensor, check_gradients, relative_error

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Union of model, schedule, training, dataset and output settings,
    serializable as flat key=value text. Unknown keys are rejected."""

    # model
    arch: str = "mlp"
    data_dim: int = 2
    width: int = 128
    depth: int = 4
    image_size: int = 8
    patch_size: int = 2
    num_heads: int = 4
    num_classes: int = 0
    time_embed_dim: int = 64
    # schedule
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # training
    total_steps: int = 20000
    batch_size: int = 128
    learning_rate: float = 1e-4
    seed: int = 0
    gamma0: float = 0.1
    anneal_steps: int = -1
    mixer_kind: str = "softmax"
    mixer_scope: str = "global"
    n_experts: int = 20
    n_basis: int = 4
    denoise_weight: float = 1.0
    grad_clip: float = 1.0
    label_dropout: float = 0.1
    checkpoint_every: int = 0
    plain: bool = False
    init_from: str = ""
    # data
    dataset: str = "gauss8"
    dataset_size: int = 8000
    data_seed: int = 0
    # output
    out_dir: str = "runs/default"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            arch=self.arch,
            data_dim=self.data_dim,
            width=self.width,
            depth=self.depth,
            image_size=self.image_size,
            patch_size=self.patch_size,
            num_heads=self.num_heads,
            num_classes=self.num_classes,
            time_embed_dim=self.time_embed_dim,
        )

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            total_steps=self.total_steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            gamma0=self.gamma0,
            anneal_steps=self.anneal_steps,
            mixer_kind=self.mixer_kind,
            mixer_scope=self.mixer_scope,
            n_experts=self.n_experts,
            n_basis=self.n_basis,
            denoise_weight=self.denoise_weight,
            grad_clip=self.grad_clip,
            label_dropout=self.label_dropout,
            checkpoint_every=self.checkpoint_every,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool" or kind is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"key '{key}': cannot parse '{raw}' as bool")
    try:
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key '{key}': {exc}") from exc
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got '{stripped}'")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_run_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """Merge file keys and --set overrides into a RunConfig; REMIX_SEED in the
    environment takes precedence over the configured seed."""
    raw: dict[str, str] = {}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            raw.update(parse_config_text(fh.read()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    unknown = set(raw) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in raw.items()})
    env_seed = os.environ.get("REMIX_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


def write_resolved_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        for key, value in asdict(cfg).items():
            fh.write(f"{key}={value}\n")


# -- commands ------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config, args.set)
        if args.out:
            cfg.out_dir = args.out
        model_cfg = cfg.model_config()
        train_cfg = cfg.train_config()
        sched = build_schedule("linear", cfg.T, cfg.beta_start, cfg.beta_end)
        dataset = evalbench.make_dataset(cfg.dataset, cfg.dataset_size, cfg.data_seed)
        if model_cfg.num_classes > 0 and dataset.labels is None:
            raise ConfigError(f"dataset '{cfg.dataset}' has no labels for a conditional model")
        if model_cfg.sample_dim != dataset.dim:
            raise ConfigError(
                f"model expects dim {model_cfg.sample_dim}, dataset '{cfg.dataset}' has {dataset.dim}"
            )
        state = training.init_train_state(
            train_cfg, model_cfg, sched,
            plain=cfg.plain, init_from=cfg.init_from or None,
        )
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    os.makedirs(cfg.out_dir, exist_ok=True)
    write_resolved_config(cfg, os.path.join(cfg.out_dir, "config.txt"))
    try:
        training.train(state, dataset, out_dir=cfg.out_dir)
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {train_cfg.total_steps} steps -> {cfg.out_dir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    try:
        bundle = training.load_bundle(args.checkpoint)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.n < 0:
        print("error: --n must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    if args.steps is not None and not (1 <= args.steps <= bundle.sched.T):
        print(f"error: --steps must be in [1, {bundle.sched.T}]", file=sys.stderr)
        return EXIT_USAGE

    seed = args.seed
    env_seed = os.environ.get("REMIX_SEED")
    if env_seed is not None and args.seed == 0:
        seed = int(env_seed)
    sampler = SamplerConfig(
        n_steps=args.steps if args.steps is not None else bundle.sched.T,
        guidance_scale=args.guidance,
        stochastic=not args.deterministic,
        seed=seed,
    )

    if bundle.kind == "plain":
        provider = plain_provider(bundle.model_cfg, bundle.model.plain_arrays())
    elif args.runtime_mix:
        provider = runtime_mix_provider(bundle.model, bundle.mixer, bundle.partition)
    else:
        experts = remix.precompute_experts(bundle.model.bank, bundle.mixer, bundle.partition)
        provider = precomputed_provider(bundle.model_cfg, experts, bundle.partition)

    label = args.label if args.label >= 0 else None
    if label is not None and bundle.model_cfg.num_classes == 0:
        print("error: checkpoint is unconditional, cannot sample a class", file=sys.stderr)
        return EXIT_USAGE
    try:
        out = sample(
            provider, bundle.sched, sampler, args.n,
            (bundle.model_cfg.sample_dim,), class_label=label,
        )
    except (ArithmeticError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_samples(args.out, out, bundle.model_cfg, label)
    print(f"wrote {out.shape[0]} samples -> {args.out}")
    return EXIT_OK


def _write_samples(path: str, out: np.ndarray, model_cfg: ModelConfig, label) -> None:
    if model_cfg.arch == "mlp" and model_cfg.data_dim == 2:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "label"])
            for row in out:
                writer.writerow([repr(float(row[0])), repr(float(row[1])),
                                 -1 if label is None else label])
    else:
        np.save(path, out)


def cmd_analyze(args) -> int:
    try:
        bundle = training.load_bundle(args.checkpoint)
        kind = args.dataset or (bundle.train_cfg or {}).get("dataset", "gauss8")
        dataset = evalbench.make_dataset(kind if isinstance(kind, str) else "gauss8",
                                         args.n, args.data_seed)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)

    grid = evalbench.loss_by_timestep(bundle, dataset, t_per_interval=args.t_per_interval)
    evalbench.write_losses_csv(os.path.join(args.out, "losses.csv"), grid)
    lines = [
        f"experts={grid.matrix.shape[0]} intervals={grid.matrix.shape[1]}",
        f"diagonal_mean={grid.diagonal_mean():.6f}",
        f"offdiagonal_mean={grid.offdiagonal_mean():.6f}",
    ]
    if bundle.kind == "remix":
        evalbench.export_coefficients(bundle, os.path.join(args.out, "coefficients.csv"))
        coeffs = remix.coefficient_matrix(bundle.mixer)
        adj, far = evalbench.adjacent_vs_distant_cosine(coeffs)
        lines.append(f"adjacent_cosine={adj:.6f}")
        lines.append(f"distant_cosine={far:.6f}")
    summary = "\n".join(lines)
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        bundle = training.load_bundle(args.checkpoint)
        if bundle.kind != "remix":
            raise ValueError("bench needs a mixed-model checkpoint")
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    results = [
        evalbench.bench_latency(bundle, mode, batch=args.batch, reps=args.reps)
        for mode in ("runtime-mix", "precomputed")
    ]
    evalbench.write_bench_csv(args.out, results)
    for r in results:
        print(f"{r.mode}: mean {r.mean_ms:.3f} ms, p50 {r.p50_ms:.3f} ms, p95 {r.p95_ms:.3f} ms")
    return EXIT_OK


# -- gradcheck suite -------------------------------------------------------------------


def _gradcheck_ops(rng: np.random.Generator) -> list[tuple[str, float, bool]]:
    """Finite-difference checks for each differentiable op on small inputs."""
    reports: list[tuple[str, float, bool]] = []

    def p(shape) -> Tensor:
        return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)

    cases = {
        "matmul": (lambda ps: nx.reduce_sum(nx.matmul(ps["a"], ps["b"])),
                   {"a": p((3, 4)), "b": p((4, 2))}),
        "add_mul": (lambda ps: nx.reduce_sum(ps["a"] * ps["b"] + ps["a"]),
                    {"a": p((2, 5)), "b": p((2, 5))}),
        "broadcast_bias": (lambda ps: nx.reduce_sum(ps["a"] + ps["b"]),
                           {"a": p((4, 3)), "b": p((3,))}),
        "softmax": (lambda ps: nx.reduce_sum(nx.softmax(ps["a"]) * ps["w"]),
                    {"a": p((3, 5)), "w": p((3, 5))}),
        "silu": (lambda ps: nx.reduce_sum(nx.silu(ps["a"])), {"a": p((4, 4))}),
        "gelu": (lambda ps: nx.reduce_sum(nx.gelu(ps["a"])), {"a": p((4, 4))}),
        "layernorm": (
            lambda ps: nx.reduce_sum(nx.layernorm(ps["x"], ps["g"], ps["b"]) * ps["w"]),
            {"x": p((3, 6)), "g": p((6,)), "b": p((6,)), "w": p((3, 6))},
        ),
        "reduce_mean": (lambda ps: nx.reduce_sum(nx.reduce_mean(ps["a"], axis=1) * ps["w"]),
                        {"a": p((3, 4)), "w": p((3,))}),
        "slice": (lambda ps: nx.reduce_sum(ps["a"][:, 1:3] * ps["a"][:, 0:2]),
                  {"a": p((3, 4))}),
        "mix": (lambda ps: nx.reduce_sum(nx.mix(ps["c"], ps["w"]) * ps["x"]),
                {"c": p((3,)), "w": p((3, 4, 2)), "x": p((4, 2))}),
        "log": (lambda ps: nx.reduce_sum(nx.log(nx.softmax(ps["a"]))), {"a": p((2, 4))}),
    }
    for name, (loss_fn, params) in cases.items():
        for (pname, err, ok) in check_gradients(loss_fn, params):
            reports.append((f"{name}/{pname}", err, ok))
    return reports


def _gradcheck_model(arch: str) -> list[tuple[str, float, bool]]:
    """End-to-end check: d(loss + prior)/d(logits) and a bank slice on a tiny
    mixed model, in float64, against central differences."""
    rng = np.random.default_rng(7)
    if arch == "mlp":
        cfg = ModelConfig(arch="mlp", data_dim=2, width=8, depth=2, time_embed_dim=8)
    else:
        cfg = ModelConfig(arch="dit-tiny", width=8, depth=1, image_size=8,
                          patch_size=4, num_heads=2, time_embed_dim=8)
    K, N = 3, 5
    sched = build_schedule(T=20)
    partition = remix.IntervalPartition(T=20, N=N)
    model = MixedDenoiser.build(cfg, K, rng, dtype=np.float64)
    mixer = remix.create_mixer("softmax", "global", N, K, rng, dtype=np.float64)
    prior = training.prior_coefficients(N, K)

    batch = 4 if arch == "dit-tiny" else 8
    i = 2
    lo, hi = remix.interval_bounds(partition, i)
    x0 = rng.standard_normal((batch, cfg.sample_dim))
    t = rng.integers(lo, hi, size=batch)
    eps = rng.standard_normal(x0.shape)
    gamma = 0.3

    def loss_fn(_params) -> Tensor:
        alpha = remix.coefficients(mixer, i)
        loss = training.expert_loss(model, alpha, x0, t, eps, sched)
        reg = training.prior_regularizer(remix.coefficient_rows(mixer), prior, gamma)
        return loss + reg

    params = {"mixer/logits": mixer.logits}
    # One small widened tensor rides along to exercise the bank path.
    bank_name = "out.b" if arch == "mlp" else "head.b"
    params[f"bank/{bank_name}"] = model.bank.layers[bank_name]
    return [(f"{arch}/{name}", err, ok) for name, err, ok in check_gradients(loss_fn, params)]


def _gradcheck_coeff_oracle() -> list[tuple[str, float, bool]]:
    """analytic coefficient gradient (inner products with the bases) against
    finite differences of the loss w.r.t. alpha directly."""
    rng = np.random.default_rng(11)
    cfg = ModelConfig(arch="mlp", data_dim=2, width=8, depth=2, time_embed_dim=8)
    K = 3
    sched = build_schedule(T=20)
    model = MixedDenoiser.build(cfg, K, rng, dtype=np.float64)
    x0 = rng.standard_normal((8, 2))
    t = rng.integers(0, 20, size=8)
    eps = rng.standard_normal(x0.shape)
    alpha = Tensor(np.array([0.5, 0.3, 0.2]), requires_grad=True, dtype=np.float64)

    loss = training.expert_loss(model, alpha, x0, t, eps, sched)
    loss.backward()
    autodiff_alpha = alpha.grad.copy()

    # Route two: gradient w.r.t. the materialized expert, folded with the bank.
    theta = {n: Tensor(arr, requires_grad=True)
             for n, arr in remix.materialize_expert(model.bank, alpha.data).items()}
    plain = training.PlainDenoiser(cfg, theta)
    loss2 = training.expert_loss(plain, None, x0, t, eps, sched)
    loss2.backward()
    grad_theta = {n: p.grad for n, p in theta.items()}
    analytic = remix.analytic_coeff_grad(grad_theta, model.bank)

    def scalar_loss() -> float:
        a = Tensor(alpha.data)
        return training.expert_loss(model, a, x0, t, eps, sched).item()

    numeric = nx.finite_difference_grads(scalar_loss, {"alpha": alpha.data})["alpha"]
    return [
        ("coeff/analytic_vs_fd", relative_error(analytic, numeric),
         relative_error(analytic, numeric) <= 1e-3),
        ("coeff/autodiff_vs_fd", relative_error(autodiff_alpha, numeric),
         relative_error(autodiff_alpha, numeric) <= 1e-3),
    ]


def _gradcheck_onehot_isolation() -> list[tuple[str, float, bool]]:
    """With the onehot mixer, gradient blocks of non-selected bases are exactly
    zero after a training backward pass."""
    rng = np.random.default_rng(13)
    cfg = ModelConfig(arch="mlp", data_dim=2, width=8, depth=2, time_embed_dim=8)
    K, N = 3, 6
    sched = build_schedule(T=30)
    partition = remix.IntervalPartition(T=30, N=N)
    model = MixedDenoiser.build(cfg, K, rng, dtype=np.float64)
    mixer = remix.create_mixer("onehot", "global", N, K, rng, dtype=np.float64)
    i = 4
    selected = remix.onehot_basis_index(i, N, K)
    lo, hi = remix.interval_bounds(partition, i)
    x0 = rng.standard_normal((8, 2))
    t = rng.integers(lo, hi, size=8)
    eps = rng.standard_normal(x0.shape)
    loss = training.expert_loss(model, remix.coefficients(mixer, i), x0, t, eps, sched)
    loss.backward()
    ok = True
    for name, widened in model.bank.layers.items():
        if widened.grad is None:
            continue
        for k in range(K):
            block = widened.grad[k]
            if k == selected:
                continue
            if np.any(block != 0.0):
                ok = False
    return [("onehot/isolation", 0.0 if ok else 1.0, ok)]


def run_gradcheck_suite(arch: str = "mlp", verbose: bool = True) -> bool:
    rng = np.random.default_rng(3)
    reports = []
    reports += _gradcheck_ops(rng)
    reports += _gradcheck_model("mlp")
    if arch == "dit-tiny":
        reports += _gradcheck_model("dit-tiny")
    reports += _gradcheck_coeff_oracle()
    reports += _gradcheck_onehot_isolation()
    all_ok = True
    for name, err, ok in reports:
        all_ok &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name}: rel_err={err:.3e}")
    return all_ok


def cmd_gradcheck(args) -> int:
    ok = run_gradcheck_suite(arch=args.arch)
    print("gradcheck:", "all checks passed" if ok else "FAILURES detected")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# -- argument parsing --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="remixdiff",
        description="Multi-expert diffusion at desk scale: train, sample, analyze, bench.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a key=value config")
    p_train.add_argument("config", nargs="?", default=None, help="config file path")
    p_train.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    p_train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config key")
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="draw samples from a checkpoint")
    p_sample.add_argument("checkpoint")
    p_sample.add_argument("--n", type=int, required=True)
    p_sample.add_argument("--out", required=True)
    mode = p_sample.add_mutually_exclusive_group()
    mode.add_argument("--precompute", action="store_true", default=True)
    mode.add_argument("--runtime-mix", dest="runtime_mix", action="store_true")
    p_sample.add_argument("--guidance", type=float, default=1.5)
    p_sample.add_argument("--steps", type=int, default=None)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--label", type=int, default=-1, help="class label (-1 = unconditional)")
    p_sample.add_argument("--deterministic", action="store_true")
    p_sample.set_defaults(func=cmd_sample)

    p_an = sub.add_parser("analyze", help="export coefficients.csv / losses.csv / summary")
    p_an.add_argument("checkpoint")
    p_an.add_argument("--dataset", default=None)
    p_an.add_argument("--n", type=int, default=4000)
    p_an.add_argument("--data-seed", type=int, default=0)
    p_an.add_argument("--t-per-interval", type=int, default=5)
    p_an.add_argument("--out", default="analysis")
    p_an.set_defaults(func=cmd_analyze)

    p_bench = sub.add_parser("bench", help="latency of runtime mixing vs precomputed experts")
    p_bench.add_argument("checkpoint")
    p_bench.add_argument("--batch", type=int, default=16)
    p_bench.add_argument("--reps", type=int, default=100)
    p_bench.add_argument("--out", default="bench.csv")
    p_bench.set_defaults(func=cmd_bench)

    p_gc = sub.add_parser("gradcheck", help="64-bit finite-difference verification suite")
    p_gc.add_argument("--arch", choices=("mlp", "dit-tiny"), default="mlp")
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    return args.func(args)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
