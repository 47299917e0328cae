"""Command-line interface: ``jacseg <command> [options]``.

Every command takes ``--config`` (a ``key = value`` text file), ``--seed``,
``--threads`` and ``--out``; flags override config values. Each run writes
``manifest.json`` into ``--out`` with the resolved configuration and
SHA-256 checksums of inputs and outputs, and ``jacseg replay`` reruns a
manifest.

Exit codes: 0 success, 1 numerical failure (training divergence or a replay
whose outputs differ), 2 usage or input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .clstm import RNNSegNet
from .data import (
    FoldPlan,
    SynthParams,
    Volume,
    VSEGFormatError,
    load_dataset,
    load_volume,
    make_folds,
    read_vseg,
    save_volume,
    synth_dataset,
    write_vseg,
)
from .metrics import DEFAULT_THRESHOLDS, CaseScore, aggregate, dsc, jaccard_index, threshold_sweep
from .metrics import write_aggregate_csv, write_scores_csv
from .network import SegNetConfig, build_network, count_parameters
from .trainer import (
    VARIANTS,
    TrainConfig,
    TrainingDivergence,
    finetune_rnn,
    model_select,
    predict_volume,
    prepare_cases,
)

log = logging.getLogger("jacseg")

MANIFEST = "manifest.json"
SYNTH_KEYS = {f.name for f in fields(SynthParams)} - {"seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
NETWORK_KEYS = {"scales", "cbr_per_block", "channels"}
OTHER_KEYS = {"cases", "folds", "window"}
KNOWN_KEYS = SYNTH_KEYS | TRAIN_KEYS | NETWORK_KEYS | OTHER_KEYS

# gray levels burned into overlays
TRUTH_LEVEL = 255
PRED_LEVEL = 200
INTENSITY_MAX = 150


class UsageError(Exception):
    """Bad arguments, configuration or inputs (exit code 2)."""


# ---------------------------------------------------------------- config


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _check_keys(config: dict) -> None:
    unknown = sorted(set(config) - KNOWN_KEYS - {"seed"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")


def _train_config(config: dict, seed: int) -> TrainConfig:
    try:
        return replace(TrainConfig.from_mapping({k: v for k, v in config.items() if k in TRAIN_KEYS}), seed=seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _synth_params(config: dict, seed: int) -> SynthParams:
    kwargs = {}
    tuples = {"dims": int, "radius_range": float}
    types = {"blob_count": int}
    try:
        for key in SYNTH_KEYS & set(config):
            raw = config[key]
            if key in tuples:
                kwargs[key] = tuple(tuples[key](x) for x in str(raw).split(","))
            else:
                kwargs[key] = types.get(key, float)(raw)
        return SynthParams(seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthesis config: {exc}") from exc


def _network_config(variant: str, config: dict) -> SegNetConfig:
    base = VARIANTS[variant].network
    if not NETWORK_KEYS & set(config):
        return base
    try:
        return SegNetConfig.uniform(
            int(config.get("scales", len(base.scale_blocks))),
            int(config.get("cbr_per_block", base.scale_blocks[0].cbr_count)),
            int(config.get("channels", base.base_channels)),
        )
    except ValueError as exc:
        raise UsageError(f"invalid network config: {exc}") from exc


# ---------------------------------------------------------------- manifest helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree_checksums(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                out[str(f)] = _sha256(f)
        elif p.is_file():
            out[str(p)] = _sha256(p)
    return out


def _write_manifest(out: Path, args, config: dict, inputs, outputs) -> Path:
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config": dict(sorted(config.items())),
        "seed": args.seed,
        "inputs": _tree_checksums(inputs),
        "outputs": {str(Path(p).relative_to(out)): _sha256(Path(p)) for p in sorted(outputs)},
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _load_cases(data_dir) -> list[Volume]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    cases = load_dataset(data_dir)
    if not cases:
        raise UsageError(f"no *.img.vseg cases found in {data_dir}")
    return cases


def _select_cases(cases, plan_path, fold, held_out: bool):
    if plan_path is None:
        if fold is not None:
            raise UsageError("--fold requires --plan")
        return cases
    plan = FoldPlan.from_csv(plan_path)
    if fold is None:
        ids = set(plan.assignments)
    elif not 0 <= fold < plan.k:
        raise UsageError(f"fold {fold} outside 0..{plan.k - 1}")
    else:
        ids = set(plan.fold_cases(fold) if held_out else plan.train_cases(fold))
    chosen = [v for v in cases if v.case_id in ids]
    missing = ids - {v.case_id for v in chosen}
    if missing:
        raise UsageError(f"fold plan lists cases missing from the data directory: {sorted(missing)[:5]}")
    return chosen


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint {path} not found") from exc


def _window(net, config: dict, meta: dict) -> int | None:
    if not isinstance(net, RNNSegNet):
        return None
    if "window" in config:
        return int(config["window"])
    return int(meta.get("window", 3))


# ---------------------------------------------------------------- commands


def cmd_synth(args, config: dict) -> tuple[list, list]:
    out = _out_dir(args)
    params = _synth_params(config, args.seed)
    n = int(config.get("cases", 40)) if args.cases is None else args.cases
    k = int(config.get("folds", 4)) if args.folds is None else args.folds
    if n < 1:
        raise UsageError("--cases must be >= 1")
    try:
        cases = synth_dataset(n, params)
        plan = make_folds([v.case_id for v in cases], k, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    written = []
    for v in cases:
        written.extend(save_volume(v, out))
    plan_path = out / "folds.csv"
    plan.to_csv(plan_path)
    written.append(plan_path)
    print(f"wrote {n} cases and a {k}-fold plan (sizes {plan.sizes()}) to {out}")
    return [], written


def cmd_train(args, config: dict) -> tuple[list, list]:
    cases = _load_cases(args.data)
    out = _out_dir(args)
    cfg = _train_config(config, args.seed)
    train = _select_cases(cases, args.plan, args.fold, held_out=False)
    variant = VARIANTS[args.variant]
    netcfg = _network_config(args.variant, config)
    train = prepare_cases(train, cfg)
    net = build_network(netcfg, seed=cfg.seed, dtype=cfg.dtype)
    model, tlog = model_select(net, train, cfg)
    if variant.recurrent:
        model, rlog = finetune_rnn(model, train, cfg)
        tlog.extend(rlog)
    for w in tlog.warnings:
        log.warning(w)
    meta = {
        "variant": args.variant,
        "train_config": cfg.to_dict(),
        "acc_t": tlog.acc_t,
        "window": cfg.unroll - 1,
        "trained_on": sorted(v.case_id for v in train),
    }
    ckpt = save_checkpoint(model, out / "model.segn", meta)
    log_path = out / "trainlog.csv"
    tlog.to_csv(log_path)
    print(f"{args.variant}: {count_parameters(model)} parameters, checkpoint {ckpt}")
    inputs = [args.data] + ([args.plan] if args.plan else [])
    return inputs, [ckpt, log_path]


def _prob_maps_from_dir(pred_dir: Path, cases):
    for v in cases:
        path = pred_dir / f"{v.case_id}.prob.vseg"
        if not path.exists():
            raise UsageError(f"missing prediction {path}")
        prob, code = read_vseg(path)
        if code != 0 or prob.shape != v.labels.shape:
            raise UsageError(f"{path}: expected float32 probabilities of shape {v.labels.shape}")
        yield v, prob


def _prob_maps(args, config, cases):
    if args.predictions is not None:
        if args.checkpoint is not None:
            raise UsageError("give either --checkpoint or --predictions, not both")
        yield from _prob_maps_from_dir(Path(args.predictions), cases)
        return
    if args.checkpoint is None:
        raise UsageError("--checkpoint or --predictions is required")
    net, meta = _load_model(args.checkpoint)
    window = _window(net, config, meta)
    normalize = meta.get("train_config", {}).get("normalize", True)
    prepped = prepare_cases(cases, TrainConfig(normalize=normalize))
    for v in prepped:
        yield v, predict_volume(net, v, window)


def _threshold(config: dict) -> float:
    try:
        return float(config.get("threshold", 0.5))
    except ValueError as exc:
        raise UsageError(f"invalid threshold: {exc}") from exc


def cmd_eval(args, config: dict) -> tuple[list, list]:
    cases = _select_cases(_load_cases(args.data), args.plan, args.fold, held_out=True)
    out = _out_dir(args)
    t = _threshold(config)
    scores = []
    for v, prob in _prob_maps(args, config, cases):
        mask = prob >= t
        scores.append(CaseScore(v.case_id, dsc(mask, v.labels), jaccard_index(mask, v.labels), t))
    report = aggregate(scores)
    per_case = out / "scores.csv"
    summary = out / "aggregate.csv"
    write_scores_csv(scores, per_case)
    write_aggregate_csv(report, summary)
    print(f"DSC {report.dsc}  JI {report.ji}  over {report.count} cases")
    inputs = [args.data] + [p for p in (args.plan, args.checkpoint, args.predictions) if p]
    return inputs, [per_case, summary]


def cmd_sweep(args, config: dict) -> tuple[list, list]:
    cases = _select_cases(_load_cases(args.data), args.plan, args.fold, held_out=True)
    out = _out_dir(args)
    scores = []
    for v, prob in _prob_maps(args, config, cases):
        scores.extend(threshold_sweep(prob, v.labels, DEFAULT_THRESHOLDS, case_id=v.case_id))
    per_case = out / "sweep.csv"
    write_scores_csv(scores, per_case)
    curve = out / "sweep_curve.csv"
    rows = ["threshold,dsc_mean,dsc_std,dsc_worst,dsc_best"]
    for t in DEFAULT_THRESHOLDS:
        m = aggregate([s for s in scores if s.threshold == t]).dsc
        rows.append(f"{t!r},{m.mean!r},{m.std!r},{m.worst!r},{m.best!r}")
    curve.write_text("\n".join(rows) + "\n")
    means = [aggregate([s for s in scores if s.threshold == t]).dsc.mean for t in DEFAULT_THRESHOLDS]
    print(f"DSC spread over {len(DEFAULT_THRESHOLDS)} thresholds: {max(means) - min(means):.4f}")
    inputs = [args.data] + [p for p in (args.plan, args.checkpoint, args.predictions) if p]
    return inputs, [per_case, curve]


def _contour(mask: np.ndarray) -> np.ndarray:
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def overlay_slice(image: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """8-bit overlay: intensities in [0, 150], prediction contour 200, truth contour 255."""
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros(image.shape) if hi == lo else (image - lo) / (hi - lo)
    out = np.round(scaled * INTENSITY_MAX).astype(np.uint8)
    out[_contour(pred.astype(bool))] = PRED_LEVEL
    out[_contour(truth.astype(bool))] = TRUTH_LEVEL
    return out


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def cmd_predict(args, config: dict) -> tuple[list, list]:
    net, meta = _load_model(args.checkpoint)
    try:
        volume = load_volume(args.volume, require_labels=False)
    except FileNotFoundError as exc:
        raise UsageError(f"volume {args.volume} not found") from exc
    out = _out_dir(args)
    normalize = meta.get("train_config", {}).get("normalize", True)
    (prepped,) = prepare_cases([volume], TrainConfig(normalize=normalize))
    prob = predict_volume(net, prepped, _window(net, config, meta))
    mask = (prob >= _threshold(config)).astype(np.uint8)
    mask_path = out / f"{volume.case_id}.pred.vseg"
    write_vseg(mask_path, mask, 1)
    overlays = out / "overlays"
    overlays.mkdir(exist_ok=True)
    written = [mask_path]
    for z in range(volume.depth):
        p = overlays / f"{volume.case_id}_z{z:03d}.pgm"
        write_pgm(p, overlay_slice(volume.intensities[z], volume.labels[z], mask[z]))
        written.append(p)
    print(f"wrote {mask_path} and {volume.depth} overlays")
    return [args.checkpoint, args.volume], written


def cmd_params(args, config: dict) -> tuple[list, list]:
    if (args.checkpoint is None) == (args.variant is None):
        raise UsageError("give exactly one of --checkpoint or --variant")
    if args.checkpoint is not None:
        net, _ = _load_model(args.checkpoint)
    else:
        net = build_network(_network_config(args.variant, config), seed=0, dtype=np.float32)
    n = count_parameters(net)
    print(n)
    if args.out is None:
        return [], []
    out = _out_dir(args)
    path = out / "params.txt"
    path.write_text(f"{n}\n")
    return ([args.checkpoint] if args.checkpoint else []), [path]


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
    "params": cmd_params,
}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config; default 0)")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit; 1 is deterministic")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="jacseg", description="Slice-based segmentation with a Jaccard loss and ConvLSTM refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset and fold plan")
    p.add_argument("--cases", type=int)
    p.add_argument("--folds", type=int)

    variants = sorted(VARIANTS)
    p = sub.add_parser("train", parents=[common], help="train a variant and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=variants, default="jac64")
    p.add_argument("--plan", help="fold plan CSV; with --fold, train on the other folds")
    p.add_argument("--fold", type=int)

    for name, text in (("eval", "per-case and aggregate scores"), ("sweep", "19-threshold DSC sweep")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint")
        p.add_argument("--predictions", help="directory of <case>.prob.vseg maps used instead of a checkpoint")
        p.add_argument("--plan", help="fold plan CSV; with --fold, score only that held-out fold")
        p.add_argument("--fold", type=int)

    p = sub.add_parser("predict", parents=[common], help="label volume plus per-slice PGM overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help="<case>.img.vseg path or <dir>/<case> prefix")

    p = sub.add_parser("params", parents=[common], help="print the trainable-parameter count")
    p.add_argument("--checkpoint")
    p.add_argument("--variant", choices=variants)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="directory for the rerun's outputs")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--verify", action="store_true", help="exit 1 unless every output checksum matches")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _run(args, config: dict) -> int:
    callback = COMMANDS[args.command]
    inputs, outputs = callback(args, config)
    if args.out is not None and (outputs or args.command != "params"):
        _write_manifest(Path(args.out), args, config, inputs, outputs)
    return 0


def _strip_out(argv: list[str]) -> list[str]:
    """Command-line tokens minus --out / --threads / --config, which replay supplies itself."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok in ("--out", "--threads", "--config"):
            skip = True
            continue
        if tok.startswith(("--out=", "--threads=", "--config=")):
            continue
        out.append(tok)
    return out


def _replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from exc
    parser = build_parser()
    rerun = parser.parse_args(manifest["argv"] + ["--out", args.out])
    rerun.argv = manifest["argv"]
    rerun.seed = manifest["seed"]
    config = dict(manifest["config"])
    _run(rerun, config)
    if not args.verify:
        return 0
    fresh = json.loads((Path(args.out) / MANIFEST).read_text())["outputs"]
    mismatched = sorted(k for k in set(fresh) | set(manifest["outputs"]) if fresh.get(k) != manifest["outputs"].get(k))
    for k in mismatched:
        print(f"MISMATCH {k}", file=sys.stderr)
    print(f"replay: {len(fresh) - len(mismatched)}/{len(fresh)} outputs identical")
    return 1 if mismatched else 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            if args.command == "replay":
                return _replay(args)
            config = read_config(args.config) if args.config else {}
            _check_keys(config)
            if args.seed is None:
                args.seed = int(config.get("seed", 0))
            config.pop("seed", None)
            args.argv = _strip_out(argv)
            return _run(args, config)
    except TrainingDivergence as exc:
        print(f"jacseg: error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"jacseg: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (UsageError, VSEGFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"jacseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
