"""Config-driven experiment runner.

Subcommands: ``warmup``, ``train``, ``rl``, ``vaa-probe``, ``gradcheck``,
``report``. Experiments are described by a JSON config (see configs/ in
the repository); ``--set key=value`` overrides any field with a dotted
path, ``--scale`` uniformly shrinks sample counts, widths, epochs and
episode budgets for desk-scale runs. Exit codes: 0 success, 1 config
validation failure, 2 runtime failure (partial artifacts are left in
place). MNIST IDX files are looked up in ``task_params.data_dir`` or the
``RNNWARMUP_DATA`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import datasets as ds
from . import kernels, tmaze
from .cells import CellKind, LayerSpec, init_network
from .drqn import DrqnConfig, train_drqn
from .reporting import read_json, summarize, write_csv, write_json
from .training import TrainConfig, evaluate, train_supervised
from .vaa import LayerDynamics, VaaConfig, estimate_vaa_mean, probe, random_hidden_states, vaa_star
from .warmup import WarmupConfig, warmup

TASKS = ("copy", "denoise", "pmnist", "plmnist", "tmaze")
WARMUP_MODES = ("none", "full", "double")
TASK_DIMS = {"copy": (1, 1), "denoise": (2, 1), "pmnist": (1, 10), "plmnist": (28, 10), "tmaze": (8, 4)}
SUPERVISED = ("copy", "denoise", "pmnist", "plmnist")

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field."""


@dataclass
class ExperimentConfig:
    task: str
    seeds: list
    output_dir: str
    scale: float = 1.0
    warmup_mode: str = "none"
    architecture: dict = field(default_factory=dict)
    warmup: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    rl: dict = field(default_factory=dict)
    task_params: dict = field(default_factory=dict)

    def scaled(self, value, minimum=1):
        return max(minimum, int(round(value * self.scale)))


def _apply_override(raw, dotted, text):
    node = raw
    parts = dotted.split(".")
    for key in parts[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: cannot override inside non-object field")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node[parts[-1]] = value


def load_config(path, overrides=(), scale=None, output_dir=None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: invalid JSON ({err})")
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        _apply_override(raw, key, value)
    if scale is not None:
        raw["scale"] = scale
    if output_dir is not None:
        raw["output_dir"] = output_dir
    return validate_config(raw)


def validate_config(raw):
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown config field")
    for required in ("task", "seeds", "output_dir"):
        if required not in raw:
            raise ConfigError(f"{required}: required field is missing")
    if raw["task"] not in TASKS:
        raise ConfigError(f"task: unknown task id {raw['task']!r}; one of {TASKS}")
    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: must be a non-empty list of integers")
    for name in ("architecture", "warmup", "train", "rl", "task_params"):
        if name in raw and not isinstance(raw[name], dict):
            raise ConfigError(f"{name}: must be an object")
    cfg = ExperimentConfig(**raw)
    if not isinstance(cfg.scale, (int, float)) or cfg.scale <= 0:
        raise ConfigError("scale: must be a positive number")
    if cfg.warmup_mode not in WARMUP_MODES:
        raise ConfigError(f"warmup_mode: {cfg.warmup_mode!r} is not one of {WARMUP_MODES}")
    arch = cfg.architecture
    if arch.get("cell", "gru") not in ("gru", "lstm", "mgu"):
        raise ConfigError(f"architecture.cell: unknown cell {arch.get('cell')!r}")
    widths = arch.get("widths", [64])
    if not isinstance(widths, list) or not widths or not all(
        isinstance(w, int) and w > 0 for w in widths
    ):
        raise ConfigError("architecture.widths: must be a non-empty list of positive integers")
    if cfg.warmup_mode == "double" and any(cfg.scaled(w) < 2 for w in widths):
        raise ConfigError("architecture.widths: double mode needs width >= 2 per layer")
    return cfg


def build_network(cfg, seed):
    arch = cfg.architecture
    kind = CellKind(arch.get("cell", "gru"), arch.get("chrono_t_max"))
    fraction = 0.5 if cfg.warmup_mode == "double" else 1.0
    widths = [cfg.scaled(w, minimum=2 if fraction == 0.5 else 1) for w in arch.get("widths", [64])]
    specs = [LayerSpec(kind, w, warmed_fraction=fraction) for w in widths]
    input_dim, output_dim = TASK_DIMS[cfg.task]
    return init_network(specs, input_dim, output_dim, seed=seed)


def _find_mnist(data_dir, split):
    images_name, labels_name = MNIST_FILES[split]
    paths = []
    for name in (images_name, labels_name):
        plain = Path(data_dir) / name
        gz = Path(data_dir) / (name + ".gz")
        if plain.exists():
            paths.append(plain)
        elif gz.exists():
            paths.append(gz)
        else:
            return None
    return paths


def build_datasets(cfg):
    """(train, test) datasets for the supervised tasks; None for tmaze."""
    p = cfg.task_params
    if cfg.task == "tmaze":
        return None, None
    if cfg.task == "copy":
        length = p.get("length", 50)
        train = ds.gen_copy_first_input(
            ds.CopyFirstInputSpec(length, cfg.scaled(p.get("train_count", 40_000)), p.get("data_seed", 1234))
        )
        test = ds.gen_copy_first_input(
            ds.CopyFirstInputSpec(length, cfg.scaled(p.get("test_count", 50_000)), p.get("data_seed", 1234) + 1)
        )
        return train, test
    if cfg.task == "denoise":
        length = p.get("length", 200)
        forgetting = p.get("forgetting", 5)
        try:
            spec_train = ds.DenoisingSpec(
                length, forgetting, cfg.scaled(p.get("train_count", 40_000)), p.get("data_seed", 1234)
            )
            spec_test = ds.DenoisingSpec(
                length, forgetting, cfg.scaled(p.get("test_count", 50_000)), p.get("data_seed", 1234) + 1
            )
        except ValueError as err:
            raise ConfigError(f"task_params: {err}")
        return ds.gen_denoising(spec_train), ds.gen_denoising(spec_test)

    # permuted MNIST variants
    mode = "pixel" if cfg.task == "pmnist" else "line"
    black = p.get("black_lines", 72) if mode == "line" else 0
    spec = ds.PermutedMnistSpec(mode, p.get("permutation_seed", 0), black_lines=black)
    data_dir = p.get("data_dir") or os.environ.get("RNNWARMUP_DATA")
    if data_dir and _find_mnist(data_dir, "train") and _find_mnist(data_dir, "test"):
        tr_img, tr_lab = ds.load_mnist_idx(*_find_mnist(data_dir, "train"))
        te_img, te_lab = ds.load_mnist_idx(*_find_mnist(data_dir, "test"))
    elif p.get("synthetic_count"):
        count = cfg.scaled(p["synthetic_count"])
        tr_img8, tr_lab = ds.synthetic_mnist_arrays(count, p.get("data_seed", 1234))
        te_img8, te_lab = ds.synthetic_mnist_arrays(
            max(1, count // 6), p.get("data_seed", 1234) + 1
        )
        tr_img, te_img = tr_img8 / 255.0, te_img8 / 255.0
    else:
        raise ConfigError(
            "task_params.data_dir: MNIST IDX files not found (set data_dir or "
            "RNNWARMUP_DATA, or set task_params.synthetic_count for generated data)"
        )
    limit = p.get("train_limit")
    if limit:
        limit = cfg.scaled(limit)
        tr_img, tr_lab = tr_img[:limit], tr_lab[:limit]
    train = ds.make_permuted_sequences(tr_img, tr_lab, spec)
    test = ds.make_permuted_sequences(te_img, te_lab, spec)
    return train, test


def _warmup_config(cfg, dataset_count):
    w = cfg.warmup
    return WarmupConfig(
        steps=w.get("steps", 100),
        batch_size=min(w.get("batch_size", 200), dataset_count),
        learning_rate=w.get("learning_rate", 1e-2),
        target=w.get("target", 0.95),
        max_stabilization=w.get("max_stabilization", 200),
        stabilization_increment=w.get("stabilization_increment", 10),
        tolerance=w.get("tolerance", 1e-4),
        update_rule=w.get("update_rule", "adam"),
        increment_cap=w.get("increment_cap", False),
        history_window=w.get("history_window"),
    )


def _train_config(cfg):
    t = cfg.train
    return TrainConfig(
        epochs=cfg.scaled(t.get("epochs", 50)),
        batch_size=t.get("batch_size", 100),
        learning_rate=t.get("learning_rate", 1e-3),
        validation_fraction=t.get("validation_fraction", 0.1),
        probe_period=t.get("probe_period", 1),
        probe_stabilization=t.get("probe_stabilization", 2000),
        probe_batch=t.get("probe_batch", 50),
        probe_tolerance=t.get("probe_tolerance", 1e-4),
        clip_norm=t.get("clip_norm"),
    )


def _rl_config(cfg):
    r = cfg.rl
    return DrqnConfig(
        episodes=cfg.scaled(r.get("episodes", 3000)),
        buffer_capacity=r.get("buffer_capacity", 50_000),
        target_period=r.get("target_period", 25),
        grad_steps=r.get("grad_steps", 10),
        batch_size=r.get("batch_size", 32),
        exploration_rate=r.get("exploration_rate", 0.1),
        learning_rate=r.get("learning_rate", 1e-3),
        prefill_fraction=r.get("prefill_fraction", 0.1),
        warmup_enabled=cfg.warmup_mode != "none",
        warmup_config=_warmup_config(cfg, dataset_count=10**9),
        horizon=r.get("horizon"),
        eval_period=r.get("eval_period", 1),
        optimal_window=r.get("optimal_window", 50),
        stop_when_optimal=r.get("stop_when_optimal", False),
        probe_period=r.get("probe_period", 0),
        probe_stabilization=r.get("probe_stabilization", 10_000),
        probe_batch=r.get("probe_batch", 32),
    )


def _emit_warmup_trace(path, trace):
    rows = [
        (r.step, r.sampled_m, layer, value, r.loss)
        for r in trace
        for layer, value in enumerate(r.layer_values)
    ]
    write_csv(path, ["step", "sampled_m", "layer", "vaa_star", "loss"], rows)


def _emit_train_trace(path, trace):
    rows = [
        (r.epoch, r.split, r.loss, r.accuracy, r.vaa, r.wall_time_s) for r in trace
    ]
    write_csv(path, ["epoch", "split", "loss", "accuracy", "vaa", "wall_time_s"], rows)


def _emit_rl_trace(path, trace):
    rows = [
        (r.episode, r.return_, r.smoothed_return, r.eval_return, r.vaa, r.epsilon, r.buffer_size)
        for r in trace
    ]
    write_csv(
        path,
        ["episode", "return", "smoothed_return", "eval_return", "vaa", "epsilon", "buffer_size"],
        rows,
    )


def run_seed(cfg, pipeline, seed, seed_dir, train_data, test_data):
    """One seed of the selected pipeline; returns the final metric dict."""
    seed_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    network = build_network(cfg, seed)
    final = {}

    if pipeline == "rl":
        env = tmaze.TMazeConfig(
            length=cfg.task_params.get("length", 20),
            discount=cfg.task_params.get("discount", 0.98),
        )
        result = train_drqn(env, network, _rl_config(cfg), rng)
        if result.trace:
            _emit_rl_trace(seed_dir / "rl_trace.csv", result.trace)
        final["optimal_episode"] = result.optimal_episode
        final["episodes_run"] = result.episodes_run
        final["final_smoothed_return"] = (
            result.trace[-1].smoothed_return if result.trace else None
        )
    else:
        if cfg.warmup_mode != "none":
            wcfg = _warmup_config(cfg, train_data.count)
            trace = warmup(train_data.inputs, network, wcfg, rng)
            if trace:
                _emit_warmup_trace(seed_dir / "warmup_trace.csv", trace)
                final["warmup_final_scores"] = list(trace[-1].layer_values)
        if pipeline == "warmup":
            w = cfg.warmup
            cfg_probe = VaaConfig(
                w.get("probe_stabilization", 500), tolerance=w.get("tolerance", 1e-4)
            )
            final["post_warmup_vaa"] = estimate_vaa_mean(
                train_data.inputs, network, cfg_probe, w.get("probe_batch", 50), rng
            )
        elif pipeline == "train":
            tcfg = _train_config(cfg)
            result = train_supervised(train_data, network, tcfg, rng)
            if result.trace:
                _emit_train_trace(seed_dir / "train_trace.csv", result.trace)
            final["aborted"] = result.aborted
            val_rows = [r for r in result.trace if r.split == "val"]
            final["final_val_loss"] = val_rows[-1].loss if val_rows else None
            probes = [r.vaa for r in val_rows if r.vaa is not None]
            final["final_vaa"] = probes[-1] if probes else None
            test_loss, test_acc = evaluate(test_data, network)
            final["test_loss"] = test_loss
            if test_acc is not None:
                final["test_accuracy"] = test_acc

    network.save(seed_dir / "checkpoint.json")
    write_json(seed_dir / "final.json", final)
    return final


def _summary(cfg, finals):
    keys = sorted({k for f in finals for k in f if not isinstance(f.get(k), (list, bool))})
    metrics = {key: summarize([f.get(key) for f in finals]) for key in keys}
    return {
        "schema_version": 1,
        "task": cfg.task,
        "seeds": list(cfg.seeds),
        "scale": float(cfg.scale),
        "warmup_mode": cfg.warmup_mode,
        "metrics": metrics,
    }


def run_experiment(cfg, pipeline):
    """Run every seed and write traces, checkpoints, and the summary."""
    if pipeline == "rl" and cfg.task != "tmaze":
        raise ConfigError(f"task: {cfg.task!r} is not run by the rl subcommand")
    if pipeline in ("train", "warmup") and cfg.task not in SUPERVISED:
        raise ConfigError(f"task: {cfg.task!r} is not a supervised task (use the rl subcommand)")
    if pipeline == "warmup" and cfg.warmup_mode == "none":
        raise ConfigError("warmup_mode: the warmup pipeline needs mode 'full' or 'double'")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    train_data, test_data = build_datasets(cfg)
    echo = {f: getattr(cfg, f) for f in ExperimentConfig.__dataclass_fields__}
    write_json(out / "config.json", echo)
    finals = []
    for seed in cfg.seeds:
        finals.append(run_seed(cfg, pipeline, seed, out / f"seed{seed}", train_data, test_data))
    write_json(out / "summary.json", _summary(cfg, finals))
    write_json(
        out / "run_meta.json",
        {
            "wall_time_s": time.perf_counter() - started,
            "backend": kernels.active_backend(),
            "version": __version__,
            "pipeline": pipeline,
        },
    )
    return finals


def run_vaa_probe(cfg, checkpoint=None):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_data, _ = build_datasets(cfg)
    if train_data is None:
        raise ConfigError("task: vaa-probe needs a supervised task's dataset")
    p = cfg.task_params
    probe_cfg = VaaConfig(
        p.get("probe_stabilization", 2000), tolerance=p.get("tolerance", 1e-4)
    )
    rows = []
    for seed in cfg.seeds:
        network = build_network(cfg, seed)
        if checkpoint:
            network.load(checkpoint)
        rng = np.random.default_rng(seed)
        for r in probe(network, train_data.inputs, probe_cfg, p.get("probe_batch", 50), rng):
            rows.append((0, r.layer, r.vaa, r.vaa_star, r.size, r.stabilization, r.tolerance))
    write_csv(
        out / "vaa_probe.csv",
        ["step", "layer", "vaa", "vaa_star", "size", "stabilization", "tolerance"],
        rows,
    )
    return rows


def gradcheck_battery(width=4, seq_len=6, state_count=3, stabilization=8, step=1e-5):
    """Finite-difference verification of BPTT and the smooth attractor score.

    Returns (name, max relative error) pairs: one unroll check per cell
    kind and one attractor-score check per cell kind, gradients taken
    w.r.t. every parameter (and the unroll inputs).
    """
    results = []
    rng = np.random.default_rng(0)
    for kind in ("gru", "lstm", "mgu"):
        net = init_network([LayerSpec(CellKind(kind), width)], 2, 1, seed=1)
        inputs = ad.Tensor(rng.normal(0, 1, (seq_len, 2, 2)), requires_grad=True)

        def bptt_loss(_params):
            _, outputs = net.unroll(inputs)
            return ad.tsum(ad.square(net.head(outputs[-1])))

        err = ad.gradient_check(bptt_loss, net.parameters() + [inputs], step=step)
        results.append((f"{kind}-bptt", err))

        net2 = init_network([LayerSpec(CellKind(kind), width)], 2, 1, seed=2)
        seqs = rng.normal(0, 1, (state_count, 4, 2))
        u = rng.standard_normal(2)
        score_cfg = VaaConfig(stabilization)
        state_rng_seed = int(rng.integers(0, 2**32))

        def score_loss(_params):
            states = random_hidden_states(net2, seqs, np.random.default_rng(state_rng_seed))
            system = LayerDynamics(net2, 0, half=0)
            return vaa_star(system, states.half_states[0][0], u, score_cfg)

        err = ad.gradient_check(score_loss, net2.layer_parameters(), step=step)
        results.append((f"{kind}-attractor-score", err))
    return results


def run_report(run_dir):
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise ConfigError(f"config: no config.json under {run_dir}")
    cfg = validate_config(read_json(config_path))
    finals = []
    for seed in cfg.seeds:
        final_path = run_dir / f"seed{seed}" / "final.json"
        if not final_path.exists():
            raise ConfigError(f"seeds: missing artifact {final_path}")
        finals.append(read_json(final_path))
    summary = _summary(cfg, finals)
    write_json(run_dir / "summary.json", summary)
    return summary


def _print_summary(summary, stream=sys.stdout):
    print(f"task={summary['task']} seeds={summary['seeds']} scale={summary['scale']}", file=stream)
    for key, entry in sorted(summary["metrics"].items()):
        mean = entry["mean"]
        std = entry["std"]
        shown = "n/a" if mean is None else f"{mean:.6g} +/- {std:.3g}"
        print(f"  {key}: {shown}  (n={entry['count']})", file=stream)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="rnnwarmup", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (dotted path, JSON value)")
        p.add_argument("--scale", type=float, default=None)
        p.add_argument("--output-dir", default=None)

    for name in ("warmup", "train", "rl"):
        add_config_args(sub.add_parser(name, help=f"run the {name} pipeline"))
    probe_p = sub.add_parser("vaa-probe", help="attractor probe of a (checkpointed) network")
    add_config_args(probe_p)
    probe_p.add_argument("--checkpoint", default=None)

    grad_p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    grad_p.add_argument("--width", type=int, default=4)
    grad_p.add_argument("--length", type=int, default=6)
    grad_p.add_argument("--states", type=int, default=3)
    grad_p.add_argument("--stabilization", type=int, default=8)
    grad_p.add_argument("--tol", type=float, default=1e-4)

    report_p = sub.add_parser("report", help="rebuild summary.json from per-seed artifacts")
    report_p.add_argument("--run-dir", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "gradcheck":
            results = gradcheck_battery(
                width=args.width, seq_len=args.length,
                state_count=args.states, stabilization=args.stabilization,
            )
            worst = max(err for _, err in results)
            for name, err in results:
                status = "ok" if err <= args.tol else "FAIL"
                print(f"{name}: max relative error {err:.3e} [{status}]")
            return 0 if worst <= args.tol else 2
        if args.command == "report":
            _print_summary(run_report(args.run_dir))
            return 0
        cfg = load_config(args.config, args.set, scale=args.scale, output_dir=args.output_dir)
        if args.command == "vaa-probe":
            run_vaa_probe(cfg, checkpoint=args.checkpoint)
            return 0
        run_experiment(cfg, pipeline=args.command)
        summary = read_json(Path(cfg.output_dir) / "summary.json")
        _print_summary(summary)
        return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure: keep partial artifacts
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
