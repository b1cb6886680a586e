"""Command-line surface: meta-train pooling layers, adapt and evaluate on
few-shot episodes, measure noise robustness, export parameter maps, and run
the built-in verification suites.

Configs are flat ``key=value`` text files; unknown keys are hard errors so a
typo can never silently change an experiment.  Every command is reproducible:
(config, seed) fully determines all written artifacts, which are written
atomically (write-temp-then-rename).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass, fields

import numpy as np

from metapool import data as D
from metapool import meta as M
from metapool import nn as N
from metapool import pooling as P
from metapool import tensor as T
from metapool.tensor import Record, Tensor


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "synthetic-1d"    # synthetic-1d | synthetic-2d | character
    seed: int = 0
    # meta-learning
    epochs: int = 2000
    tasks: int = 2000
    batch_size: int = 32
    inner_lr: float = 0.1
    outer_lr: float = 0.001
    outer_optimizer: str = "adam"
    order: str = "second"
    inner_steps: int = 1
    temperature: float = 0.2
    chunk_size: int = 8
    # synthetic experiments
    in_dim: int = 60
    sets_per_task: int = 20
    holdout_tasks: int = 100
    # character experiment
    dataset_root: str = "builtin"
    glyph_classes: int = 60
    meta_train_classes: int = 40
    image_size: int = 28
    filters: int = 8
    way: int = 5
    shot: int = 1
    queries: int = 5
    eval_queries: int = 19
    episodes: int = 100
    adapt_steps: int = 60
    adapt_lr: float = 0.1
    maml_epochs: int = 0
    rotations: bool = False
    noise_ratios: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)

    def __post_init__(self):
        if self.experiment not in ("synthetic-1d", "synthetic-2d", "character"):
            raise ConfigError(f"unknown experiment kind {self.experiment!r}")
        for name in ("epochs", "tasks", "batch_size", "episodes", "adapt_steps",
                     "maml_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("inner_lr", "outer_lr", "temperature", "adapt_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for r in self.noise_ratios:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"noise ratio {r} outside [0, 1]")

    def meta_config(self) -> M.MetaConfig:
        inner_target = (M.INNER_META_PARAMS if self.experiment.startswith("synthetic")
                        else M.INNER_OTHER_LAYERS)
        return M.MetaConfig(inner_lr=self.inner_lr, outer_lr=self.outer_lr,
                            batch_size=self.batch_size, epochs=self.epochs,
                            inner_steps=self.inner_steps,
                            temperature=self.temperature,
                            inner_target=inner_target, order=self.order,
                            outer_optimizer=self.outer_optimizer,
                            seed=self.seed, chunk_size=self.chunk_size)


def _coerce(name: str, text: str, kind):
    if kind is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if kind is tuple:
        return tuple(float(tok) for tok in text.split(",") if tok.strip())
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    kinds = {"experiment": str, "seed": int, "epochs": int, "tasks": int,
             "batch_size": int, "inner_lr": float, "outer_lr": float,
             "outer_optimizer": str, "order": str, "inner_steps": int,
             "temperature": float, "chunk_size": int, "in_dim": int,
             "sets_per_task": int, "holdout_tasks": int, "dataset_root": str,
             "glyph_classes": int, "meta_train_classes": int, "image_size": int,
             "filters": int, "way": int, "shot": int, "queries": int,
             "eval_queries": int, "episodes": int, "adapt_steps": int,
             "adapt_lr": float, "maml_epochs": int, "rotations": bool,
             "noise_ratios": tuple}
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, text = line.partition("=")
            key, text = key.strip(), text.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, text, kinds[key])
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# atomic artifact writing
# ---------------------------------------------------------------------------

def _atomic_write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: str, payload) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: str, records) -> None:
    _atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# ---------------------------------------------------------------------------
# experiment assembly
# ---------------------------------------------------------------------------

def build_synthetic(cfg: ExperimentConfig):
    dim = "1d" if cfg.experiment == "synthetic-1d" else "2d"
    spec = D.SyntheticTaskSpec(dim, in_dim=cfg.in_dim,
                               sets_per_task=cfg.sets_per_task,
                               task_count=cfg.tasks, seed=cfg.seed)
    tasks = D.gen_synthetic_tasks(spec)
    held_spec = D.SyntheticTaskSpec(dim, in_dim=cfg.in_dim,
                                    sets_per_task=cfg.sets_per_task,
                                    task_count=cfg.holdout_tasks,
                                    seed=cfg.seed + 990_001)
    held = D.gen_synthetic_tasks(held_spec)
    if dim == "1d":
        model = N.DensePoolModel(cfg.in_dim, cfg.in_dim // 2, cfg.temperature)
    else:
        model = N.WindowPoolModel((cfg.in_dim, cfg.in_dim), (2, 2), cfg.temperature)
    return model, tasks, held


def character_stores(cfg: ExperimentConfig):
    if cfg.dataset_root == "builtin":
        store = D.make_glyph_store(cfg.glyph_classes, instances=20,
                                   size=cfg.image_size, seed=cfg.seed + 17)
    else:
        store = D.load_character_dataset(cfg.dataset_root, cfg.image_size)
    if cfg.rotations:
        store = D.augment_rotations(store)
    return D.split_classes(store, cfg.meta_train_classes, seed=cfg.seed + 29)


def character_model(cfg: ExperimentConfig, pooling_kind: str) -> N.ConvPoolClassifier:
    return N.ConvPoolClassifier(image_size=cfg.image_size, filters=cfg.filters,
                                way=cfg.way, temperature=cfg.temperature,
                                pooling_kind=pooling_kind)


def character_tasks(cfg: ExperimentConfig, store, count: int, seed: int,
                    queries: int) -> D.TaskSet:
    tasks = [D.sample_episode(store, cfg.way, cfg.shot, queries, seed=seed + i)
             for i in range(count)]
    for i, t in enumerate(tasks):
        t.task_id = i
    return D.TaskSet(tasks, seed=seed)


def ground_truth_pattern(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.experiment == "synthetic-1d":
        out = cfg.in_dim // 2
        truth = np.zeros((out, cfg.in_dim))
        for k in range(out):
            truth[k, 2 * k] = truth[k, 2 * k + 1] = 1.0
        return truth
    grid = cfg.in_dim // 2
    return np.tile(np.array([1.0, 0.0, 1.0, 0.0]), (grid * grid, 1))


def reconstruction_report(cfg: ExperimentConfig, model, meta_arrays,
                          held: D.TaskSet) -> dict:
    params = model.pooling_params(meta_arrays, P.MODE_EVAL)
    w_binary = params.shape_matrix()
    truth = ground_truth_pattern(cfg)
    p = np.exp(meta_arrays["p_tilde"]).reshape(-1)
    mse = M.evaluate_reconstruction(model, meta_arrays, held.tasks)
    report = {
        "holdout_mse": mse,
        "w_pattern_match": float(np.mean(w_binary == truth)),
        "p_values": [float(v) for v in p],
    }
    if cfg.experiment == "synthetic-1d":
        half = len(p) // 2
        report["p_max_half_min"] = float(p[:half].min())
        report["p_avg_half"] = [float(v) for v in p[half:]]
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_meta_train(cfg: ExperimentConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    mcfg = cfg.meta_config()
    log_path = os.path.join(out_dir, "train_log.jsonl")
    records = []

    if cfg.experiment.startswith("synthetic"):
        model, tasks, held = build_synthetic(cfg)
        meta_arrays, log = M.meta_train(model, tasks, mcfg,
                                        log_callback=records.append)
        report = reconstruction_report(cfg, model, meta_arrays, held)
        _write_json(os.path.join(out_dir, "recon_metrics.json"), report)
    else:
        train_store, _ = character_stores(cfg)
        tasks = character_tasks(cfg, train_store, cfg.tasks, cfg.seed + 1000,
                                cfg.queries)
        model = character_model(cfg, "meta")
        meta_arrays, log = M.meta_train(model, tasks, mcfg,
                                        log_callback=records.append)

    _write_jsonl(log_path, log)
    params = model.pooling_params(meta_arrays, P.MODE_META)
    P.export_params(params, out_dir)
    N.save_checkpoint(os.path.join(out_dir, "checkpoint"), meta_arrays,
                      {"seed": cfg.seed, "experiment": cfg.experiment,
                       "config_hash": N.config_hash(vars(cfg))})
    print(f"meta-train: wrote artifacts to {out_dir}")
    return 0


def _theta_init_for(cfg: ExperimentConfig, model, meta_arrays, store) -> dict:
    if cfg.maml_epochs > 0:
        maml_cfg = cfg.meta_config()
        from dataclasses import replace
        maml_cfg = replace(maml_cfg, epochs=cfg.maml_epochs)
        tasks = character_tasks(cfg, store, max(cfg.batch_size * 4, 64),
                                cfg.seed + 5000, cfg.queries)
        theta, _ = M.maml_init(model, tasks, maml_cfg, meta_arrays)
        return theta
    return model.init_theta(cfg.seed + 73)


def cmd_adapt_eval(cfg: ExperimentConfig, checkpoint: str, pooling: str,
                   out_dir: str) -> int:
    if cfg.experiment != "character":
        raise ConfigError("adapt-eval applies to the character experiment")
    os.makedirs(out_dir, exist_ok=True)
    meta_arrays = None
    if pooling == "meta":
        arrays, manifest = N.load_checkpoint(checkpoint)
        meta_arrays = arrays
    model = character_model(cfg, pooling)
    train_store, held_store = character_stores(cfg)
    theta0 = _theta_init_for(cfg, model, meta_arrays, train_store)

    rows = ["episode,seed,accuracy"]
    accs = []
    for i in range(cfg.episodes):
        ep_seed = cfg.seed + 20_000 + i
        episode = D.sample_episode(held_store, cfg.way, cfg.shot,
                                   cfg.eval_queries, seed=ep_seed)
        theta, bn_stats = M.adapt_theta(model, meta_arrays, theta0, episode,
                                        cfg.adapt_steps, cfg.adapt_lr)
        acc = M.evaluate_accuracy(model, meta_arrays, theta, bn_stats,
                                  episode.x_val, episode.y_val)
        accs.append(acc)
        rows.append(f"{i},{ep_seed},{T._format_value(acc)}")
        adapted = dict(theta)
        adapted["bn_mean"] = bn_stats["mean"]
        adapted["bn_var"] = bn_stats["var"]
        N.save_checkpoint(os.path.join(out_dir, "adapted", f"ep{i:03d}"),
                          adapted, {"episode_seed": ep_seed, "pooling": pooling})
    _atomic_write(os.path.join(out_dir, "metrics.csv"), "\n".join(rows) + "\n")
    _write_json(os.path.join(out_dir, "summary.json"),
                {"pooling": pooling, "episodes": cfg.episodes,
                 "mean_accuracy": float(np.mean(accs)),
                 "std_accuracy": float(np.std(accs))})
    print(f"adapt-eval[{pooling}]: mean accuracy {np.mean(accs):.4f} "
          f"+- {np.std(accs):.4f} over {cfg.episodes} episodes")
    return 0


def cmd_eval_noise(cfg: ExperimentConfig, checkpoint: str, pooling: str,
                   adapted_dir: str, out_dir: str) -> int:
    if not os.path.isdir(os.path.join(adapted_dir, "adapted")):
        raise ConfigError(f"no adapted weights under {adapted_dir}; "
                          "run adapt-eval first")
    os.makedirs(out_dir, exist_ok=True)
    meta_arrays = None
    if pooling == "meta":
        meta_arrays, _ = N.load_checkpoint(checkpoint)
    model = character_model(cfg, pooling)
    _, held_store = character_stores(cfg)

    ratios = [0.0] + [float(r) for r in cfg.noise_ratios]
    rows = ["ratio,episode,accuracy"]
    summary = {}
    for ratio in ratios:
        accs = []
        for i in range(cfg.episodes):
            ck_dir = os.path.join(adapted_dir, "adapted", f"ep{i:03d}")
            arrays, manifest = N.load_checkpoint(ck_dir)
            ep_seed = int(manifest["episode_seed"])
            episode = D.sample_episode(held_store, cfg.way, cfg.shot,
                                       cfg.eval_queries, seed=ep_seed)
            bn_stats = {"mean": arrays.pop("bn_mean"), "var": arrays.pop("bn_var")}
            x_val = episode.x_val
            if ratio > 0:
                noise_seed = cfg.seed + 31_000 + i
                x_val = np.stack([
                    D.add_salt_pepper(img, ratio, seed=noise_seed * 1000 + j)
                    for j, img in enumerate(x_val)])
            acc = M.evaluate_accuracy(model, meta_arrays, arrays, bn_stats,
                                      x_val, episode.y_val)
            accs.append(acc)
            rows.append(f"{T._format_value(ratio)},{i},{T._format_value(acc)}")
        summary[f"{ratio:.1f}"] = {"mean_accuracy": float(np.mean(accs)),
                                   "std_accuracy": float(np.std(accs))}
        print(f"eval-noise[{pooling}] ratio {ratio:.1f}: "
              f"mean accuracy {np.mean(accs):.4f}")
    _atomic_write(os.path.join(out_dir, "noise_metrics.csv"), "\n".join(rows) + "\n")
    _write_json(os.path.join(out_dir, "noise_summary.json"),
                {"pooling": pooling, "ratios": summary})
    return 0


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------

def _suite_gradient_check(flip_sign: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    sign = -1.0 if flip_sign else 1.0

    def check(fn, point):
        nonlocal worst
        with Record() as rec:
            x = rec.leaf(point)
            y = fn(x)
            g = sign * T.grad(y, [x])[0].numpy()
        fd = np.zeros_like(point)
        h = 1e-6
        for i in range(point.size):
            hi, lo = point.copy(), point.copy()
            hi.reshape(-1)[i] += h
            lo.reshape(-1)[i] -= h
            with Record() as r2:
                up = fn(r2.leaf(hi)).item()
            with Record() as r3:
                down = fn(r3.leaf(lo)).item()
            fd.reshape(-1)[i] = (up - down) / (2 * h)
        scale = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-12)
        worst = max(worst, float(np.max(np.abs(g - fd) / scale)))

    x0 = rng.uniform(0.2, 1.0, size=6)
    sig_coeff = rng.normal(size=6)
    check(lambda x: ((x * 2.0).exp().sum()).log(), x0)
    check(lambda x: (x.sigmoid() * Tensor(sig_coeff)).sum(), x0)
    k0 = rng.normal(size=18)
    img = rng.uniform(size=(1, 4, 4))
    coeff = rng.normal(size=(2, 4, 4))
    check(lambda k: (N.conv2d(Tensor(img), k.reshape((2, 1, 3, 3)),
                              Tensor(np.zeros(2))) * Tensor(coeff)).sum(), k0)
    params = P.init_pooling_params(2, 4, 0.2, seed=1)
    xp = rng.uniform(0.1, 1.0, size=4)
    check(lambda wt: (P.pool_dense(Tensor(xp),
                                   P.PoolingParams(wt.reshape((2, 4)),
                                                   params.p_tilde, 0.2)) *
                      Tensor(np.ones(2))).sum(),
          np.asarray(params.w_tilde).reshape(-1).copy())
    return worst <= 1e-4, f"max relative gradient error {worst:.2e} (limit 1e-4)"


def _suite_lp_limits() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst_avg, worst_max = 0.0, 0.0
    for _ in range(1000):
        j = int(rng.integers(2, 9))
        x = rng.uniform(0.1, 1.0, size=j)
        params = P.PoolingParams(np.ones((1, j)), np.zeros(1), 0.2, P.MODE_EVAL)
        with Record():
            got = P.pool_dense(x, params).numpy()[0]
        worst_avg = max(worst_avg, abs(got - x.mean()) / abs(x.mean()))
        w = (rng.uniform(size=j) > 0.5).astype(float)
        if not w.any():
            w[int(rng.integers(j))] = 1.0
        params = P.PoolingParams(w.reshape(1, j), np.log(np.array([1e4])),
                                 0.2, P.MODE_EVAL)
        with Record():
            got = P.pool_dense(x, params).numpy()[0]
        sel_max = x[w > 0].max()
        worst_max = max(worst_max, abs(got - sel_max) / sel_max)
    ok = worst_avg <= 1e-12 and worst_max <= 1e-3
    return ok, (f"avg identity err {worst_avg:.2e} (limit 1e-12), "
                f"max limit err {worst_max:.2e} (limit 1e-3)")


def _suite_second_order() -> tuple[bool, str]:
    from metapool.nn import sgd_step

    with Record() as rec:
        theta, w = rec.leaf(0.0), rec.leaf(1.0)
        (g,) = T.grad((theta - w) * (theta - w), [theta])
        theta_p = sgd_step(theta, g, 0.25)
        (gw,) = T.grad((theta_p - w) * (theta_p - w), [w])
    toy_err = abs(gw.item() - 0.5)

    model = N.DensePoolModel(2, 1, 0.2)
    rng = np.random.default_rng(3)
    meta = {"w_tilde": rng.uniform(0.4, 0.6, size=(1, 2)),
            "p_tilde": rng.uniform(-0.2, 0.4, size=1)}
    x = rng.uniform(0.1, 1.0, size=(6, 2))
    y = x.max(axis=1, keepdims=True)
    task = D.Task(x[:1], y[:1], x[1:], y[1:], task_id=0)
    cfg = M.MetaConfig(inner_lr=0.1, inner_target=M.INNER_META_PARAMS, epochs=1)
    grads, _ = M.outer_gradients(model, meta, {}, [task], cfg)

    def val_loss(bump):
        _, stats = M.outer_gradients(model, bump, {}, [task], cfg)
        return float(np.sum(stats["val_losses"]))

    h = 1e-6
    worst = toy_err / 0.5
    for key in ("w_tilde", "p_tilde"):
        flat = meta[key].reshape(-1)
        for i in range(flat.size):
            plus = {k: v.copy() for k, v in meta.items()}
            plus[key].reshape(-1)[i] += h
            minus = {k: v.copy() for k, v in meta.items()}
            minus[key].reshape(-1)[i] -= h
            fd = (val_loss(plus) - val_loss(minus)) / (2 * h)
            got = grads[key].reshape(-1)[i]
            worst = max(worst, abs(got - fd) / max(abs(fd), 1e-9))
    return worst <= 1e-3, f"max meta-gradient error {worst:.2e} (limit 1e-3)"


def _suite_synthetic_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    for _ in range(1000):
        x = rng.uniform(size=60)
        got = D.reference_pool_1d(x)
        want = np.array([max(x[2 * k], x[2 * k + 1]) if k < 15
                         else (x[2 * k] + x[2 * k + 1]) / 2 for k in range(30)])
        if not np.array_equal(got, want):
            return False, "synthetic 1D targets deviate from the brute-force rule"
    return True, "synthetic targets equal the brute-force rule on 1000 cases"


def cmd_verify(inject_fault: bool = False) -> int:
    suites = [
        ("gradient-check", lambda: _suite_gradient_check(inject_fault)),
        ("lp-limit", _suite_lp_limits),
        ("second-order", _suite_second_order),
        ("synthetic-oracle", _suite_synthetic_oracle),
    ]
    failures = 0
    for name, fn in suites:
        ok, detail = fn()
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += 0 if ok else 1
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="metapool",
        description="Meta-learned pooling experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="pooling checkpoint directory")
            p.add_argument("--pooling", choices=("meta", "max", "avg"),
                           default="meta")

    add_common(sub.add_parser("meta-train", help="meta-learn the pooling layer"))
    add_common(sub.add_parser("adapt-eval", help="few-shot adaptation protocol"),
               checkpoint=True)
    noise = sub.add_parser("eval-noise", help="noise-robustness protocol")
    add_common(noise, checkpoint=True)
    noise.add_argument("--adapted", required=True,
                       help="adapt-eval output directory to reuse")
    verify = sub.add_parser("verify", help="run the verification suites")
    verify.add_argument("--inject-fault", action="store_true",
                        help="test hook: flip a gradient sign to prove the "
                             "suites can fail")

    args = parser.parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.inject_fault)
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = ExperimentConfig(**{**vars(cfg), "seed": args.seed})
        if args.command == "meta-train":
            return cmd_meta_train(cfg, args.out)
        if args.command == "adapt-eval":
            return cmd_adapt_eval(cfg, args.checkpoint, args.pooling, args.out)
        if args.command == "eval-noise":
            return cmd_eval_noise(cfg, args.checkpoint, args.pooling,
                                  args.adapted, args.out)
    except (ConfigError, D.DataError, M.MetaError, P.PoolingError,
            N.NNError, T.TensorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
