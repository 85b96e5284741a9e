"""Command-line experiment runner.

Subcommands ``ingest``, ``train``, ``optimize``, ``evaluate``, ``explain`` and
``erase`` each write into a fresh run directory together with a ``run.json``
manifest holding the fully resolved configuration, input file hashes and the
kernel backend.  Values resolve as built-in defaults, then the
``--desk-scale`` preset, then the ``--config`` file, then explicit flags.

Exit codes: 0 on success, 1 on a configuration error, 2 on a runtime failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

_logger = logging.getLogger("cmbrec")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("ingest", "train", "optimize", "evaluate", "explain", "erase")

DEFAULTS: dict[str, dict] = {
    "ingest": {
        "format": "movielens",
        "ratings": None,
        "movies": None,
        "topics": None,
        "meta": None,
        "top_categories": 30,
        "cache": None,
        "force": False,
        "ratios": [0.8, 0.1, 0.1],
        "threshold": 4.0,
        "seed": 0,
    },
    "train": {
        "data": None,
        "model": "bprmf",
        "d": 50,
        "lr": 0.005,
        "reg": 1e-4,
        "epochs": 100,
        "n_neg": 3,
        "layers": 3,
        "batch_size": 2048,
        "init_std": 0.01,
        "patience": 10,
        "seed": 0,
        "Ks": [10, 20],
    },
    "optimize": {
        "data": None,
        "factors": None,
        "A": 0.3,
        "n_A": 61,
        "epsilon": 0.1,
        "T": 200,
        "lambda1": 5.0,
        "lambda2": 0.9,
        "K": 20,
        "diversity": "ilad",
        "accuracy": "ndcg",
        "alpha": 0.5,
        "split": "valid",
        "eval_user_sample": None,
        "seed": 0,
    },
    "evaluate": {
        "data": None,
        "factors": None,
        "delta": None,
        "Ks": [10, 20],
        "split": "test",
        "alpha": 0.5,
        "mmr": False,
        "theta": 0.9,
        "pool": 100,
        "save_lists": False,
    },
    "explain": {
        "delta": None,
        "data": None,
        "strategy": "both",
        "F": 5,
        "feature_names": None,
    },
    "erase": {
        "data": None,
        "factors": None,
        "delta": None,
        "strategy": "shared",
        "manner": "top",
        "F": 5,
        "seed": 0,
        "Ks": [10, 20],
        "split": "test",
        "alpha": 0.5,
    },
}

DESK_SCALE = {"d": 16, "T": 50, "eval_user_sample": 500}

# keys naming files that must exist when the command starts
INPUT_KEYS = ("ratings", "movies", "topics", "meta", "data", "factors", "delta", "feature_names")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _known_keys() -> set:
    return set().union(*(d.keys() for d in DEFAULTS.values()))


def load_config_file(path) -> dict:
    """Read a TOML file; top-level keys apply to every command that knows
    them, ``[command]`` tables to one command only."""
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = _known_keys()
    for key, value in data.items():
        if key in COMMANDS:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: [{key}] must be a table")
            bad = set(value) - set(DEFAULTS[key])
            if bad:
                raise ConfigError(f"{path}: unknown key(s) for {key}: {sorted(bad)}")
        elif key not in known:
            raise ConfigError(f"{path}: unknown key {key!r}")
    return data


def resolve_config(command: str, flags: dict, config_path=None, desk_scale: bool = False) -> dict:
    cfg = dict(DEFAULTS[command])
    if desk_scale:
        cfg.update({k: v for k, v in DESK_SCALE.items() if k in cfg})
    if config_path is not None:
        data = load_config_file(config_path)
        cfg.update({k: v for k, v in data.items() if k in cfg and k not in COMMANDS})
        cfg.update(data.get(command, {}))
    cfg.update(flags)
    for key in INPUT_KEYS:
        if key in cfg and cfg[key] is not None:
            cfg[key] = str(cfg[key])
            if not Path(cfg[key]).is_file():
                raise ConfigError(f"{key}: file not found: {cfg[key]}")
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(missing))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_run_dir(out: str, command: str, run_dir: str | None = None) -> Path:
    if run_dir is not None:
        path = Path(run_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{command}-{stamp}"
    path, n = base, 0
    while path.exists():
        n += 1
        path = Path(f"{base}-{n}")
    path.mkdir(parents=True)
    return path


def write_manifest(run: Path, command: str, cfg: dict) -> dict:
    from . import __version__
    from ._accel import BACKEND

    inputs = {k: {"path": cfg[k], "sha256": sha256_file(cfg[k])} for k in INPUT_KEYS if cfg.get(k) is not None}
    manifest = {
        "command": command,
        "config": cfg,
        "inputs": inputs,
        "backend": BACKEND,
        "version": __version__,
    }
    with open(run / "run.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _ks(cfg, n_items):
    Ks = sorted({int(k) for k in cfg["Ks"]})
    if not Ks or Ks[0] < 1 or Ks[-1] > n_items:
        raise ConfigError(f"Ks must lie in [1, {n_items}]")
    return Ks


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(cfg: dict, run: Path) -> int:
    from .dataset import binarize_and_split, dataset_stats, load_amazon, load_csv, load_movielens, save_dataset

    _require(cfg, "ratings", "cache")
    cache = Path(cfg["cache"])
    if cache.exists() and not cfg["force"]:
        print(f"cache {cache} exists; nothing to do (use --force to rebuild)")
        return EXIT_OK
    fmt = cfg["format"]
    if fmt == "movielens":
        _require(cfg, "movies")
        raw, topics = load_movielens(cfg["ratings"], cfg["movies"])
    elif fmt == "csv":
        raw, topics = load_csv(cfg["ratings"], cfg["topics"])
    elif fmt == "amazon":
        _require(cfg, "meta")
        raw, topics = load_amazon(cfg["ratings"], cfg["meta"], cfg["top_categories"])
    else:
        raise ConfigError(f"unknown format {fmt!r}")
    try:
        ratios = tuple(float(r) for r in cfg["ratios"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ratios: {exc}") from exc
    ds = binarize_and_split(raw, ratios, seed=cfg["seed"], item_topics=topics, threshold=cfg["threshold"])
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, cache)
    stats = dataset_stats(ds)
    with open(run / "stats.json", "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
    print(
        f"users={stats['users']} items={stats['items']} subtopics={stats['subtopics']} "
        f"interactions={stats['interactions']} density={stats['density']:.4f}"
    )
    return EXIT_OK


def _train_config(cfg):
    from .models import TrainConfig

    try:
        return TrainConfig(
            d=cfg["d"],
            lr=cfg["lr"],
            reg=cfg["reg"],
            epochs=cfg["epochs"],
            n_neg=cfg["n_neg"],
            L=cfg["layers"],
            seed=cfg["seed"],
            batch_size=cfg["batch_size"],
            init_std=cfg["init_std"],
            patience=cfg["patience"],
            eval_k=min(cfg["Ks"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(cfg: dict, run: Path) -> int:
    from .dataset import load_dataset
    from .metrics import evaluate
    from .models import save_factors, train_bprmf, train_lightgcn
    from .ranking import topk_recommend

    _require(cfg, "data")
    if cfg["model"] not in ("bprmf", "lightgcn"):
        raise ConfigError("model must be bprmf or lightgcn")
    tc = _train_config(cfg)
    ds = load_dataset(cfg["data"])
    Ks = _ks(cfg, ds.n_items)
    f = (train_bprmf if cfg["model"] == "bprmf" else train_lightgcn)(ds, tc)
    save_factors(f, run / "factors.bin")
    with open(run / "history.csv", "w") as fh:
        fh.write("epoch,loss,valid_recall\n")
        for h in f.history or []:
            fh.write(f"{h['epoch']},{h['loss']!r},{h['valid_recall']!r}\n")
    recs = topk_recommend(f, ds, max(Ks))
    report = evaluate(recs, ds, f.Q, Ks, split="valid", metrics=("recall", "ndcg"))
    report.to_csv(run / "report.csv")
    print(f"valid recall@{Ks[0]}={report.get('recall', Ks[0]):.4f}")
    return EXIT_OK


def cmd_optimize(cfg: dict, run: Path) -> int:
    from .bandit import BanditConfig, InvalidConfigError, ObjectiveSpec, run_cmb, save_delta
    from .dataset import load_dataset
    from .models import load_factors

    _require(cfg, "data", "factors")
    accuracy = cfg["accuracy"]
    if accuracy in ("", "none"):
        accuracy = None
    try:
        spec = ObjectiveSpec(
            diversity_metric=cfg["diversity"],
            accuracy_metric=accuracy,
            lambda2=cfg["lambda2"],
            lambda1=cfg["lambda1"],
            K=cfg["K"],
            alpha=cfg["alpha"],
            split=cfg["split"],
        )
        bc = BanditConfig(
            A=cfg["A"],
            n_A=cfg["n_A"],
            epsilon=cfg["epsilon"],
            T=cfg["T"],
            spec=spec,
            seed=cfg["seed"],
            eval_user_sample=cfg["eval_user_sample"],
        )
        from .bandit import init_arms

        init_arms(bc.A, bc.n_A)
    except (InvalidConfigError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    ds = load_dataset(cfg["data"])
    if not 1 <= spec.K <= ds.n_items:
        raise ConfigError(f"K must lie in [1, {ds.n_items}]")
    f = load_factors(cfg["factors"])
    delta, trace = run_cmb(f, ds, bc)
    save_delta(delta, run / "delta.bin")
    trace.to_csv(run / "trace.csv")
    print(f"iterations={len(trace)} final reward={trace.rewards[-1] if trace.rewards else float('nan'):.6f}")
    return EXIT_OK


def _load_model_data(cfg):
    from .dataset import load_dataset
    from .models import load_factors

    _require(cfg, "data", "factors")
    ds = load_dataset(cfg["data"])
    f = load_factors(cfg["factors"])
    if f.n_users != ds.n_users or f.n_items != ds.n_items:
        raise ConfigError("factors do not match the dataset dimensions")
    return ds, f


def _load_delta(cfg, f):
    from .bandit import load_delta

    if cfg.get("delta") is None:
        return None
    delta = load_delta(cfg["delta"])
    if delta.shape != f.Q.shape:
        raise ConfigError(f"delta shape {delta.shape} does not match item factors {f.Q.shape}")
    return delta


def _write_report(report, run: Path, stem="report"):
    report.to_csv(run / f"{stem}.csv")
    report.to_json(run / f"{stem}.json")
    for (m, K), v in report.rows():
        print(f"{m}@{K}={v:.4f}")


def cmd_evaluate(cfg: dict, run: Path) -> int:
    from .metrics import evaluate
    from .ranking import perturbed_item_matrix, save_recommendations_csv, topk_recommend
    from .rerank import MmrConfig, mmr_recommend

    ds, f = _load_model_data(cfg)
    Ks = _ks(cfg, ds.n_items)
    delta = _load_delta(cfg, f)
    if cfg["mmr"]:
        if delta is not None:
            raise ConfigError("--mmr re-ranks the base model; do not combine it with --delta")
        try:
            mc = MmrConfig(theta=cfg["theta"], candidate_pool=cfg["pool"], K=max(Ks))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        recs = mmr_recommend(f, ds, mc)
    else:
        Q = None if delta is None else perturbed_item_matrix(f.Q, delta)
        recs = topk_recommend(f, ds, max(Ks), Q=Q)
    report = evaluate(recs, ds, f.Q, Ks, split=cfg["split"], alpha=cfg["alpha"])
    _write_report(report, run)
    if cfg["save_lists"]:
        save_recommendations_csv(recs, run / "recommendations.csv", ds.user_ids, ds.item_ids)
    return EXIT_OK


def cmd_explain(cfg: dict, run: Path) -> int:
    from .bandit import load_delta
    from .explain import export_importance_csv, export_item_explanations_csv, read_feature_names

    _require(cfg, "delta")
    if cfg["strategy"] not in ("shared", "individual", "both"):
        raise ConfigError("strategy must be shared, individual or both")
    delta = load_delta(cfg["delta"])
    if not 1 <= cfg["F"] <= delta.shape[0]:
        raise ConfigError(f"F must lie in [1, {delta.shape[0]}]")
    names = read_feature_names(cfg["feature_names"]) if cfg["feature_names"] else None
    if names is not None and len(names) != delta.shape[0]:
        raise ConfigError("feature name count does not match delta rows")
    item_ids = None
    if cfg["data"] is not None:
        from .dataset import load_dataset

        item_ids = load_dataset(cfg["data"]).item_ids
    if cfg["strategy"] in ("shared", "both"):
        export_importance_csv(delta, run / "importance.csv", names)
    if cfg["strategy"] in ("individual", "both"):
        export_item_explanations_csv(delta, cfg["F"], run / "item_explanations.csv", names, item_ids)
    print(f"explanations written to {run}")
    return EXIT_OK


def cmd_erase(cfg: dict, run: Path) -> int:
    from .bandit import save_delta
    from .explain import MANNERS, STRATEGIES, erase, evaluate_erasure

    _require(cfg, "delta")
    if cfg["strategy"] not in STRATEGIES or cfg["manner"] not in MANNERS:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, manner one of {MANNERS}")
    ds, f = _load_model_data(cfg)
    Ks = _ks(cfg, ds.n_items)
    delta = _load_delta(cfg, f)
    if not 0 <= cfg["F"] <= delta.shape[0]:
        raise ConfigError(f"F must lie in [0, {delta.shape[0]}]")
    erased = erase(delta, cfg["strategy"], cfg["manner"], cfg["F"], seed=cfg["seed"])
    save_delta(erased, run / "erased_delta.bin")
    report = evaluate_erasure(f, ds, erased, Ks, split=cfg["split"], alpha=cfg["alpha"])
    _write_report(report, run)
    return EXIT_OK


HANDLERS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "erase": cmd_erase,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmbrec", description="Counterfactual bandit diversification of recommenders.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--out", default="runs", help="parent directory of run directories")
        p.add_argument("--run-dir", default=None, help="exact run directory (skips timestamping)")
        p.add_argument("--desk-scale", action="store_true", help="small preset: d=16, T=50, 500 eval users")
        p.add_argument("--threads", type=int, default=None, help="cap on worker threads")

    p = sub.add_parser("ingest", help="parse raw ratings into a dataset cache")
    common(p)
    _flag(p, "format", choices=["movielens", "csv", "amazon"])
    _flag(p, "ratings")
    _flag(p, "movies")
    _flag(p, "topics")
    _flag(p, "meta")
    _flag(p, "top_categories", type=int)
    _flag(p, "cache")
    _flag(p, "force", action="store_true")
    _flag(p, "ratios", type=float, nargs=3, metavar=("TRAIN", "TEST", "VALID"))
    _flag(p, "threshold", type=float)
    _flag(p, "seed", type=int)

    p = sub.add_parser("train", help="fit BPRMF or LightGCN factors")
    common(p)
    _flag(p, "data")
    _flag(p, "model", choices=["bprmf", "lightgcn"])
    _flag(p, "d", type=int)
    _flag(p, "lr", type=float)
    _flag(p, "reg", type=float)
    _flag(p, "epochs", type=int)
    _flag(p, "n_neg", type=int)
    _flag(p, "layers", type=int)
    _flag(p, "batch_size", type=int)
    _flag(p, "init_std", type=float)
    _flag(p, "patience", type=int)
    _flag(p, "seed", type=int)
    _flag(p, "Ks", type=int, nargs="+")

    p = sub.add_parser("optimize", help="learn the perturbation matrix with the bandit")
    common(p)
    _flag(p, "data")
    _flag(p, "factors")
    _flag(p, "A", type=float)
    _flag(p, "n_A", type=int)
    _flag(p, "epsilon", type=float)
    _flag(p, "T", type=int)
    _flag(p, "lambda1", type=float)
    _flag(p, "lambda2", type=float)
    _flag(p, "K", type=int)
    _flag(p, "diversity", choices=["alpha_ndcg", "sc", "pc", "ilad"])
    _flag(p, "accuracy", choices=["recall", "ndcg", "none"])
    _flag(p, "alpha", type=float)
    _flag(p, "split", choices=["train", "valid", "test"])
    _flag(p, "eval_user_sample", type=int)
    _flag(p, "seed", type=int)

    p = sub.add_parser("evaluate", help="metric report for base, perturbed or MMR lists")
    common(p)
    _flag(p, "data")
    _flag(p, "factors")
    _flag(p, "delta")
    _flag(p, "Ks", type=int, nargs="+")
    _flag(p, "split", choices=["train", "valid", "test"])
    _flag(p, "alpha", type=float)
    _flag(p, "mmr", action="store_true")
    _flag(p, "theta", type=float)
    _flag(p, "pool", type=int)
    _flag(p, "save_lists", action="store_true")

    p = sub.add_parser("explain", help="feature importance from a perturbation matrix")
    common(p)
    _flag(p, "delta")
    _flag(p, "data")
    _flag(p, "strategy", choices=["shared", "individual", "both"])
    _flag(p, "F", type=int)
    _flag(p, "feature_names")

    p = sub.add_parser("erase", help="metric report after erasing selected features")
    common(p)
    _flag(p, "data")
    _flag(p, "factors")
    _flag(p, "delta")
    _flag(p, "strategy", choices=["individual", "shared"])
    _flag(p, "manner", choices=["top", "least", "random"])
    _flag(p, "F", type=int)
    _flag(p, "seed", type=int)
    _flag(p, "Ks", type=int, nargs="+")
    _flag(p, "split", choices=["train", "valid", "test"])
    _flag(p, "alpha", type=float)
    return parser


_CONTROL = {"command", "verbose", "config", "out", "run_dir", "desk_scale", "threads"}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
                os.environ[var] = str(args.threads)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        flags = {k: v for k, v in vars(args).items() if k not in _CONTROL}
        cfg = resolve_config(args.command, flags, args.config, args.desk_scale)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.threads is not None:
            from ._accel import set_threads

            set_threads(args.threads)
        run = make_run_dir(args.out, args.command, args.run_dir)
        write_manifest(run, args.command, cfg)
        print(f"run directory: {run}")
        return HANDLERS[args.command](cfg, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        _logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
