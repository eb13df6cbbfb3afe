"""Command-line entry point: synth, train, eval, explain, gradcheck,
probe-report, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. After the declared flags of ``train`` and ``ablate``, any
``--<dotted.key> <value>`` pair overrides the configuration file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from . import evaluation, oracles, pooling, synth
from .data import ImageStore, augment, ingest_directory, relabel_pids, split_samples
from .errors import ConfigError, DataError, EsnetError, NumericError
from .model import build_model, load_checkpoint
from .saliency import cg_ram, overlay, write_map_txt
from .trainer import fit


def _parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            i += 1
            if i >= len(tokens):
                raise ConfigError(f"override --{key} is missing a value")
            value = tokens[i]
        overrides.append((key, value))
        i += 1
    return overrides


# ---- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.preset == "reference":
        spec = synth.reference_preset()
    elif args.preset == "hard":
        spec = synth.hard_preset()
    else:
        spec = synth.SynthSpec()
    if args.spec is not None:
        path = Path(args.spec)
        if not path.exists():
            raise ConfigError(f"spec file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"spec file is not valid JSON: {exc}") from exc
        known = {f.name for f in dataclass_fields(synth.SynthSpec)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
        base = {f.name: getattr(spec, f.name) for f in dataclass_fields(synth.SynthSpec)}
        base.update(raw)
        if "image_size" in base:
            base["image_size"] = tuple(base["image_size"])
        spec = synth.SynthSpec(**base)
    if args.seed is not None:
        values = {f.name: getattr(spec, f.name) for f in dataclass_fields(synth.SynthSpec)}
        values["seed"] = args.seed
        spec = synth.SynthSpec(**values)
    manifest = synth.generate_synthetic(spec, args.out)
    print(f"wrote {manifest['num_images']} images under {args.out}")
    return 0


# ---- train -------------------------------------------------------------------


def _train_from_config(cfg: dict, run_dir: Path):
    root = cfg["data"]["root"]
    if not root:
        raise ConfigError("data.root is not set")
    samples = ingest_directory(root)
    train_samples = split_samples(samples, "train")
    num_ids = len(relabel_pids(train_samples))
    model = build_model(
        cfgmod.make_backbone_config(cfg), *cfgmod.make_head_configs(cfg),
        num_identities=num_ids, seed=cfg["seed"],
    )
    train_cfg = cfgmod.make_train_config(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.echo_config(cfg, run_dir / "config.json")
    result = fit(model, samples, train_cfg, run_dir, config_echo=cfg)
    return model, result, samples


def cmd_train(args, extra: list[str]) -> int:
    cfg = cfgmod.load_config(args.config, _parse_overrides(extra))
    run_dir = Path(args.run_dir)
    model, result, _ = _train_from_config(cfg, run_dir)
    print(f"run directory: {result.run_dir}")
    print(f"steps: {result.steps}  final L_total: {result.final_loss:.6f}")
    print(f"parameters: {model.num_parameters()}")
    return 0


# ---- eval --------------------------------------------------------------------


def _evaluate_checkpoint(checkpoint, data_root, rank_max=None):
    model, payload = load_checkpoint(checkpoint)
    samples = ingest_directory(data_root)
    store = ImageStore()
    size = tuple(model.cfg.input_size)

    def load(sample):
        return augment(store.get(sample), None, "test", size)

    query = split_samples(samples, "query")
    gallery = split_samples(samples, "gallery")
    q_desc = evaluation.extract_features(model, query, load)
    g_desc = evaluation.extract_features(model, gallery, load)
    result = evaluation.cmc_map(
        q_desc, [s.pid for s in query], [s.cam for s in query],
        g_desc, [s.pid for s in gallery], [s.cam for s in gallery],
        rank_max=rank_max,
    )
    return result, payload


def cmd_eval(args) -> int:
    result, _ = _evaluate_checkpoint(args.checkpoint, args.data, args.rank_max)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    evaluation.write_result(result, out_dir)
    print(f"mAP: {result.mAP:.4f}  Rank-1: {result.rank(1):.4f}  "
          f"(kept {result.kept_queries}, dropped {result.dropped_queries})")
    print(f"results under {out_dir}")
    return 0


# ---- explain -----------------------------------------------------------------


def _load_rgb(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def cmd_explain(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    size = tuple(model.cfg.input_size)
    query_raw = _load_rgb(args.query)
    gallery_raw = _load_rgb(args.gallery)
    query_t = augment(query_raw, None, "test", size)
    gallery_t = augment(gallery_raw, None, "test", size)

    tap = args.layer  # None lets the model pick its default tap
    smap = cg_ram(model, query_t, gallery_t, tap=tap, resize_to=size)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    display = np.asarray(
        Image.fromarray(query_raw).resize((size[1], size[0]), Image.BILINEAR)
    )
    Image.fromarray(overlay(display, smap)).save(out_dir / "overlay.png")
    write_map_txt(smap.values, out_dir / "map.txt")
    (out_dir / "score.json").write_text(json.dumps({"score": smap.score}, indent=2))
    print(f"score: {smap.score:.6f}; artifacts under {out_dir}")
    return 0


# ---- gradcheck ---------------------------------------------------------------


def run_gradcheck(cases: int, seed: int, step: float = 1e-4, tol: float = 1e-5,
                  l_values=(1.0, 8.0)) -> dict:
    """Random pooling-gradient checks against central differences.

    Returns the report dict; raises NumericError when any norm-relative
    error exceeds ``tol``.
    """
    rng = np.random.default_rng(seed)
    worst_l = 0.0
    worst_in = 0.0
    lo, hi = l_values
    for _ in range(cases):
        c = int(rng.integers(1, 4))
        h = int(rng.integers(2, 6))
        w = int(rng.integers(2, 6))
        a = rng.uniform(1e-6, 10.0, size=(c, h, w))
        l = float(rng.uniform(lo, hi))
        layer = pooling.PPoolingLayer(l=l)

        grad_l = pooling.ppool_grad_l(a, layer)
        fd_l = np.array([
            oracles.oracle_fd(
                lambda x, k=k: pooling.ppool_forward(a[k:k + 1], pooling.PPoolingLayer(l=float(x)))[0],
                l, step,
            )
            for k in range(c)
        ])
        worst_l = max(worst_l, oracles.fd_rel_error(grad_l, fd_l))

        grad_in = pooling.ppool_grad_input(a, layer)
        fd_in = np.zeros_like(a)
        for k in range(c):
            def chan_fn(x, k=k):
                b = a.copy()
                b[k] = x
                return pooling.ppool_forward(b[k:k + 1], layer)[0]
            fd_in[k] = oracles.oracle_fd(chan_fn, a[k], step)
        worst_in = max(worst_in, oracles.fd_rel_error(grad_in, fd_in))

    report = {
        "cases": cases,
        "seed": seed,
        "step": step,
        "tolerance": tol,
        "max_rel_error_grad_l": worst_l,
        "max_rel_error_grad_input": worst_in,
        "passed": worst_l < tol and worst_in < tol,
    }
    if not report["passed"]:
        raise NumericError(f"gradient check failed: {report}")
    return report


def cmd_gradcheck(args) -> int:
    if args.l is not None:
        layer = pooling.PPoolingLayer(l=args.l)
        rng = np.random.default_rng(args.seed)
        a = rng.uniform(1e-6, 10.0, size=(4, 5, 6))
        pp = pooling.ppool_forward(a, layer)
        if args.l == 1.0:
            ref = pooling.gap(np.maximum(a, layer.eps))
            print(f"l=1: max |ppool - gap| = {np.abs(pp - ref).max():.3e} (exact match: "
                  f"{bool(np.array_equal(pp, ref))})")
        else:
            ref = pooling.gmp(a)
            print(f"l={args.l}: max rel gap to gmp = {float(np.abs(pp - ref).max() / ref.max()):.3e}")
    report = run_gradcheck(args.cases, args.seed, args.step, args.tol)
    print(f"gradient check over {report['cases']} cases (seed {report['seed']}):")
    print(f"  exponent gradient max rel err: {report['max_rel_error_grad_l']:.3e}")
    print(f"  input gradient max rel err:    {report['max_rel_error_grad_input']:.3e}")
    print(f"  tolerance {report['tolerance']:.1e}: PASS")
    return 0


# ---- probe-report --------------------------------------------------------------


def load_probe_rows(run_dir) -> list[dict]:
    path = Path(run_dir) / "probe.csv"
    if not path.exists():
        raise DataError(f"no probe.csv under {run_dir}")
    with open(path) as fh:
        return [
            {"epoch": int(r["epoch"]),
             "loss_on_erased": float(r["loss_on_erased"]),
             "loss_on_clean": float(r["loss_on_clean"])}
            for r in csv.DictReader(fh)
        ]


def probe_summary(rows: list[dict]) -> dict:
    diffs = [r["loss_on_erased"] - r["loss_on_clean"] for r in rows]
    q = max(1, len(diffs) // 4)
    first = sum(diffs[:q]) / q
    last = sum(diffs[-q:]) / q
    return {
        "epochs": len(diffs),
        "first_quarter_mean_gap": first,
        "last_quarter_mean_gap": last,
        "gap_increased": last > first,
    }


def cmd_probe_report(args) -> int:
    rows = load_probe_rows(args.run)
    summary = probe_summary(rows)
    (Path(args.run) / "probe_report.json").write_text(json.dumps(summary, indent=2))
    print(f"epochs: {summary['epochs']}")
    print(f"erased-minus-clean loss gap: first quarter {summary['first_quarter_mean_gap']:.4f}, "
          f"last quarter {summary['last_quarter_mean_gap']:.4f}")
    print("direction: " + ("increasing (relies more on salient areas)"
                           if summary["gap_increased"] else "not increasing"))
    return 0


# ---- ablate --------------------------------------------------------------------


R_SWEEP = (0.0, 0.05, 0.10, 0.20, 0.40)
JK_SWEEP = ((8, 8), (16, 4), (32, 2))


def cmd_ablate(args, extra: list[str]) -> int:
    base_overrides = _parse_overrides(extra)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    if args.axis == "R":
        for r_value in R_SWEEP:
            cfg = cfgmod.load_config(args.config, base_overrides)
            cfgmod.apply_override(cfg, "besm.R", repr(r_value))
            run_dir = out_dir / f"R_{r_value:.2f}"
            _, result, _ = _train_from_config(cfg, run_dir)
            eval_res, _ = _evaluate_checkpoint(result.final_checkpoint, cfg["data"]["root"])
            rows.append({"R": r_value, "mAP": eval_res.mAP, "rank1": eval_res.rank(1)})
            print(f"R={r_value:.2f}: mAP={eval_res.mAP:.4f} rank1={eval_res.rank(1):.4f}")
        out_csv = out_dir / "ablate_R.csv"
        header = ["R", "mAP", "rank1"]
    else:  # JK
        for j, k in JK_SWEEP:
            cfg = cfgmod.load_config(args.config, base_overrides)
            cfgmod.apply_override(cfg, "sampler.J", str(j))
            cfgmod.apply_override(cfg, "sampler.K", str(k))
            run_dir = out_dir / f"J{j}_K{k}"
            _, result, _ = _train_from_config(cfg, run_dir)
            eval_res, _ = _evaluate_checkpoint(result.final_checkpoint, cfg["data"]["root"])
            rows.append({"J": j, "K": k, "mAP": eval_res.mAP, "rank1": eval_res.rank(1)})
            print(f"J={j} K={k}: mAP={eval_res.mAP:.4f} rank1={eval_res.rank(1):.4f}")
        out_csv = out_dir / "ablate_JK.csv"
        header = ["J", "K", "mAP", "rank1"]

    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep table: {out_csv}")
    return 0


# ---- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esnet",
        description="Two-branch re-identification lab: train, evaluate, explain.",
        epilog=cfgmod.key_help_table(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--spec", help="JSON file of generator fields")
    p.add_argument("--preset", choices=["reference", "hard"], help="named preset")
    p.add_argument("--seed", type=int, help="override the generator seed")

    p = sub.add_parser("train", help="train a model from a config")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--run-dir", required=True, help="output run directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", help="output directory (default: <checkpoint dir>/eval)")
    p.add_argument("--rank-max", type=int, default=None, help="truncate the CMC curve")

    p = sub.add_parser("explain", help="salient map + score for a query/gallery pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", help="tap name (default: final ESB stage)")

    p = sub.add_parser("gradcheck", help="pooling gradients vs. finite differences")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--l", type=float, default=None,
                   help="also report the fixed-exponent behavior at this l")

    p = sub.add_parser("probe-report", help="summarize a run's erasure-sensitivity probe")
    p.add_argument("--run", required=True, help="run directory")

    p = sub.add_parser("ablate", help="sweep one axis, training per point")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--axis", required=True, choices=["R", "JK"])
    p.add_argument("--out", required=True, help="sweep output directory")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "synth":
            if extra:
                raise ConfigError(f"unrecognized arguments: {extra}")
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            if extra:
                raise ConfigError(f"unrecognized arguments: {extra}")
            return cmd_eval(args)
        if args.command == "explain":
            if extra:
                raise ConfigError(f"unrecognized arguments: {extra}")
            return cmd_explain(args)
        if args.command == "gradcheck":
            if extra:
                raise ConfigError(f"unrecognized arguments: {extra}")
            return cmd_gradcheck(args)
        if args.command == "probe-report":
            if extra:
                raise ConfigError(f"unrecognized arguments: {extra}")
            return cmd_probe_report(args)
        if args.command == "ablate":
            return cmd_ablate(args, extra)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except EsnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
