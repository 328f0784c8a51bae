"""Command-line entry point: ``idm fetch | train | verify-theory``.

Exit codes: 0 success, 1 property or download failure, 2 usage or config
error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import urllib.error
import urllib.request
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, checks, nn
from .data import (MNIST_DIMS, MNIST_FILES, EnvSpec, build_colored_mnist, default_data_dir,
                   find_mnist_file, grayscale_eval_set, load_mnist, parse_idx,
                   synthetic_two_feature)
from .errors import FormatError, InvalidArgument, NumericAbort
from .trainer import (TrainConfig, penalty_traces, select_model, summary_rows, train,
                      write_metrics, write_summary)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

# keys accepted in a config file besides the TrainConfig fields
DATA_KEYS = {"dataset": "cmnist", "samples_per_env": None}

_CMNIST = {"hidden_dim": 433, "lr": 4.49e-4, "weight_decay": 3.4e-4, "steps": 501,
           "warmup_g": 154, "lambda1": 2888595.180638}
_SYNTHETIC = {"dataset": "synthetic", "samples_per_env": 2000, "hidden_dim": 64, "steps": 300,
              "warmup_g": 100, "lr": 3e-3, "weight_decay": 1e-3, "lambda1": 1e4,
              "gamma1": 0.9, "reset_optimizer": True}

PROFILES = {
    **{f"cmnist-{mode}": dict(_CMNIST, dataset="cmnist", penalty_mode=mode)
       for mode in ("idm", "erm", "irm", "vrex", "iga", "fishr")},
    "synthetic-idm": dict(_SYNTHETIC, penalty_mode="idm"),
    "synthetic-erm": dict(_SYNTHETIC, penalty_mode="erm"),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# fetch


def _valid_file(path: Path, key: str) -> bool:
    try:
        dims, _ = parse_idx(path.read_bytes())
    except (FormatError, OSError, EOFError):
        return False
    return dims == MNIST_DIMS[key]


def _download(url: str, dest: Path, timeout: float = 60.0) -> None:
    part = dest.with_name(dest.name + ".part")
    with urllib.request.urlopen(url, timeout=timeout) as resp, open(part, "wb") as fh:
        while True:
            chunk = resp.read(1 << 20)
            if not chunk:
                break
            fh.write(chunk)
    part.replace(dest)


def cmd_fetch(mirror_url: str, out_dir, log=print) -> int:
    """Download the four MNIST IDX files; files that already parse are kept."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = mirror_url.rstrip("/")
    for key, name in MNIST_FILES.items():
        existing = find_mnist_file(out, key)
        if existing is not None and _valid_file(existing, key):
            log(f"ok       {existing.name} (already present)")
            continue
        if existing is not None:
            log(f"invalid  {existing.name}; downloading again")
            existing.unlink()
        fetched = None
        for candidate in (name + ".gz", name):
            try:
                _download(f"{base}/{candidate}", out / candidate)
            except urllib.error.HTTPError as exc:
                if exc.code == 404:
                    continue
                log(f"error: {base}/{candidate}: HTTP {exc.code} (retriable)", file=sys.stderr)
                return EXIT_FAIL
            except (urllib.error.URLError, OSError) as exc:
                log(f"error: {base}/{candidate}: {exc} (retriable)", file=sys.stderr)
                return EXIT_FAIL
            fetched = out / candidate
            break
        if fetched is None:
            log(f"error: {name}[.gz] not found on mirror {base}", file=sys.stderr)
            return EXIT_FAIL
        try:
            dims, _ = parse_idx(fetched.read_bytes())
        except (FormatError, EOFError, OSError) as exc:
            log(f"error: format error in {fetched.name}: {exc}", file=sys.stderr)
            return EXIT_FAIL
        if dims != MNIST_DIMS[key]:
            log(f"error: format error in {fetched.name}: dims {dims}, "
                f"expected {MNIST_DIMS[key]}", file=sys.stderr)
            return EXIT_FAIL
        log(f"fetched  {fetched.name} {dims}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def resolve_config(config_path=None, profile=None, seed=None) -> tuple:
    """(TrainConfig, data options) from a JSON file or a built-in profile."""
    if (config_path is None) == (profile is None):
        raise UsageError("exactly one of --config or --profile is required")
    if profile is not None:
        if profile not in PROFILES:
            raise UsageError(f"unknown profile {profile!r}; known: {sorted(PROFILES)}")
        raw = dict(PROFILES[profile])
    else:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"{config_path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{config_path}: top level must be a JSON object")
    opts = {k: raw.pop(k, v) for k, v in DATA_KEYS.items()}
    if opts["dataset"] not in ("cmnist", "synthetic"):
        raise UsageError(f"dataset: must be 'cmnist' or 'synthetic', got {opts['dataset']!r}")
    if opts["samples_per_env"] is not None and (
            not isinstance(opts["samples_per_env"], int) or opts["samples_per_env"] < 1):
        raise UsageError("samples_per_env: must be a positive integer")
    if seed is not None:
        raw["seed"] = seed
    try:
        cfg = TrainConfig.from_dict(raw)
    except (InvalidArgument, TypeError) as exc:
        raise UsageError(str(exc)) from None
    return cfg, opts


def _fingerprint(ds) -> dict:
    return {"env_id": ds.env_id, "color_prob": ds.color_prob, "samples": len(ds),
            "features": ds.dim, "bytes": int(ds.features.nbytes + len(ds)),
            "label_mean": float(np.mean(ds.labels))}


def build_datasets(opts: dict, seed: int, data_dir=None) -> tuple:
    """(train domains, eval sets, provenance notes) for a run."""
    if opts["dataset"] == "synthetic":
        n = opts["samples_per_env"] or 2000
        train_domains = [synthetic_two_feature(n, EnvSpec(p), seed=seed * 10 + i)
                         for i, p in enumerate((0.9, 0.8))]
        evals = {"test": synthetic_two_feature(n, EnvSpec(0.1), seed=seed * 10 + 5),
                 "gray": synthetic_two_feature(n, EnvSpec(0.5), seed=seed * 10 + 6)}
        return train_domains, evals, {"source": "synthetic_two_feature", "gray": "color_prob 0.5"}
    data_dir = data_dir or default_data_dir()
    if not data_dir:
        raise UsageError("Colored MNIST needs --data DIR or IDM_DATA_DIR")
    mnist = load_mnist(data_dir)
    per_env = opts["samples_per_env"] or 25000
    total = mnist["train_images"].shape[0]
    test_count = total - 2 * per_env
    if test_count < 1:
        raise UsageError(f"samples_per_env: {per_env} leaves no examples for the test env")
    envs = [EnvSpec(0.9, sample_count=per_env), EnvSpec(0.8, sample_count=per_env),
            EnvSpec(0.1, sample_count=test_count)]
    domains = build_colored_mnist(mnist["train_images"], mnist["train_labels"], envs, seed)
    gray = grayscale_eval_set(mnist["test_images"], mnist["test_labels"],
                              mnist["test_images"].shape[0], seed)
    files = {}
    for key in MNIST_FILES:
        path = find_mnist_file(data_dir, key)
        files[path.name] = path.stat().st_size
    notes = {"source": "mnist", "files": files,
             "test_env": f"remaining {test_count} MNIST-train examples at color_prob 0.1",
             "gray": "MNIST t10k split, both channels equal"}
    return domains[:2], {"test": domains[2], "gray": gray}, notes


def _artifact(path: Path) -> dict:
    return {"path": path.name, "bytes": path.stat().st_size}


def cmd_train(cfg: TrainConfig, opts: dict, out_dir, data_dir=None, log=print) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    train_domains, evals, notes = build_datasets(opts, cfg.seed, data_dir)
    manifest = {
        "library_version": __version__,
        "config": cfg.to_dict(),
        "data": dict(opts, **notes),
        "datasets": {"train": [_fingerprint(d) for d in train_domains],
                     **{name: _fingerprint(d) for name, d in evals.items()}},
        "artifacts": [],
    }
    try:
        model, history = train(cfg, train_domains, evals)
    except NumericAbort as exc:
        diag = out / "diagnostics.json"
        diag.write_text(json.dumps({"error": str(exc), "record": exc.record}, indent=2,
                                   sort_keys=True), encoding="utf-8")
        log(f"numeric abort: {exc}; diagnostics in {diag}", file=sys.stderr)
        return EXIT_NUMERIC

    paths = {"metrics": out / "metrics.jsonl", "summary": out / "summary.csv",
             "traces": out / "traces.csv", "checkpoint": out / "model.idm1"}
    write_metrics(history, paths["metrics"])
    write_summary(history, paths["summary"])
    if cfg.record_traces:
        table = penalty_traces(history, warmup=cfg.warmup_g)
        paths["traces"].write_text(table.to_csv(), encoding="utf-8")
        manifest["traces"] = {"normalization": "divided by value at first step >= warmup_g",
                              "start_step": table.start_step, "flagged": table.flagged}
    else:
        del paths["traces"]
    nn.save_checkpoint(model, paths["checkpoint"])
    manifest["artifacts"] = [dict(_artifact(p), kind=k) for k, p in paths.items()]
    manifest["artifacts"].append({"path": "manifest.json", "kind": "manifest"})
    manifest["selected_step"] = history[select_model(history)].step
    manifest["wall_clock"] = {
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "seconds": round(time.time() - started, 3)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True),
                                       encoding="utf-8")
    for row in summary_rows(history):
        gray = "n/a" if row["gray_acc"] is None else f"{row['gray_acc']:.4f}"
        log(f"{row['row']:<17} step {row['step']:>4}  train {row['train_acc']:.4f}  "
            f"test {row['test_acc']:.4f}  gray {gray}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify-theory


def cmd_verify_theory(report_path, seed: int = 0, fault: str | None = None,
                      scale: float = 1.0, log=print) -> int:
    results = checks.run_all(seed, fault, scale)
    report = {"seed": seed, "fault": fault, "scale": scale,
              "all_passed": all(r.passed for r in results),
              "checks": [r.as_dict() for r in results]}
    Path(report_path).write_text(json.dumps(report, indent=2, sort_keys=True),
                                 encoding="utf-8")
    for r in results:
        log(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<36} n={r.instances:<5} "
            f"margin={r.margin:.3e}")
    return EXIT_OK if report["all_passed"] else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download the MNIST IDX files")
    p.add_argument("--mirror", required=True, help="base URL holding the four IDX files")
    p.add_argument("--out", required=True, help="destination directory")

    p = sub.add_parser("train", help="train one configuration")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="JSON config file")
    src.add_argument("--profile", help=f"built-in profile: {', '.join(sorted(PROFILES))}")
    p.add_argument("--data", default=None, help="MNIST directory (default: $IDM_DATA_DIR)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("verify-theory", help="run the randomized property suite")
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", choices=checks.FAULTS, default=None)
    p.add_argument("--scale", type=float, default=1.0,
                   help="multiply instance counts (1.0 = full suite)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fetch":
            return cmd_fetch(args.mirror, args.out)
        if args.command == "train":
            cfg, opts = resolve_config(args.config, args.profile, args.seed)
            return cmd_train(cfg, opts, args.out, args.data)
        if not args.scale > 0:
            raise UsageError("--scale must be positive")
        return cmd_verify_theory(args.report, args.seed, args.inject_fault, args.scale)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
