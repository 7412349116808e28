"""Command-line interface for the pseudo-mask pipeline.

Subcommands mirror the stages: ``divide`` extracts or ingests coarse masks,
``conquer`` builds hierarchies for given coarse masks, ``pipeline`` runs
divide+conquer+assemble end to end, ``fuse`` merges unsupervised masks into
ground truth, ``selftrain-merge`` folds confident predictions into pseudo
labels, and ``eval`` produces a metrics report. Inputs may be single files
or directories (paired by file stem); outputs are written atomically and a
failing run leaves no partial files.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from hiermask import io as hio
from hiermask import pipeline as hpipe
from hiermask.evaluate import build_report
from hiermask.postprocess import (
    AnnotationSet,
    assemble_pseudo_labels,
    fuse_with_gt,
    self_train_merge,
)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--tau", type=float, help="divide-stage confidence threshold")
    p.add_argument("--thetas", type=str, help="comma-separated descending merge ladder")
    p.add_argument("--tau-self-train", dest="tau_self_train", type=float)
    p.add_argument("--selftrain-dedup-iou", dest="selftrain_dedup_iou", type=float)
    p.add_argument("--tau-plus", dest="tau_plus", type=float)
    p.add_argument("--tau-ncut", dest="tau_ncut", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--nms-iou", dest="nms_iou", type=float)
    p.add_argument("--k-point", dest="k_point", type=int)
    p.add_argument("--min-area", dest="min_area", type=int)


_OVERRIDE_KEYS = (
    "tau", "tau_self_train", "selftrain_dedup_iou", "tau_plus", "tau_ncut",
    "epsilon", "t_max", "nms_iou", "k_point", "min_area",
)


def _resolve_config(args: argparse.Namespace) -> hio.PipelineConfig:
    overrides: Dict[str, object] = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
    thetas = getattr(args, "thetas", None)
    if thetas is not None:
        body = thetas.strip().lstrip("[").rstrip("]")
        overrides["thetas"] = tuple(float(v) for v in body.split(",") if v.strip())
    if args.config is not None:
        return hio.load_config(args.config, overrides)
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    return hio.PipelineConfig(**kwargs)


def _collect(path: Path, suffix: str) -> List[Tuple[str, Path]]:
    """(image_id, path) pairs for a file or a directory of files."""
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    if path.is_dir():
        entries = sorted(p for p in path.iterdir() if p.suffix == suffix)
        if not entries:
            raise FileNotFoundError(f"no *{suffix} files in {path}")
        return [(p.stem, p) for p in entries]
    return [(path.stem, path)]


def _pair_inputs(
    primary: List[Tuple[str, Path]], secondary: Optional[List[Tuple[str, Path]]]
) -> List[Tuple[str, Path, Optional[Path]]]:
    if secondary is None:
        return [(iid, p, None) for iid, p in primary]
    smap = dict(secondary)
    if len(primary) == 1 and len(secondary) == 1:
        # Single-file invocations pair regardless of stem.
        (iid, p), (_, s) = primary[0], secondary[0]
        return [(iid, p, s)]
    missing = [iid for iid, _ in primary if iid not in smap]
    if missing:
        raise FileNotFoundError(f"no paired input for image ids: {missing}")
    return [(iid, p, smap[iid]) for iid, p in primary]


def _write_outputs(out: Path, results: List[Tuple[str, bytes]], multi: bool) -> None:
    if multi:
        out.mkdir(parents=True, exist_ok=True)
        for image_id, payload in results:
            hio._atomic_write_bytes(out / f"{image_id}.json", payload)
    else:
        if out.parent and not out.parent.exists():
            out.parent.mkdir(parents=True, exist_ok=True)
        (_, payload), = results
        hio._atomic_write_bytes(out, payload)


def _run_one(task) -> Tuple[str, bytes]:
    image_id, feature_path, proposal_path, config, mode, local_side = task
    grid = hio.read_feature_grid(feature_path) if feature_path else None
    proposals = hio.read_annotation_set(proposal_path) if proposal_path else None
    if mode == "divide":
        parents = hpipe.coarse_masks(grid, proposals, config)
        height = grid.pixel_height if grid else proposals.height
        width = grid.pixel_width if grid else proposals.width
        aset = AnnotationSet(image_id, height, width, parents)
    elif mode == "conquer":
        parents = [
            m if m.mask_id is not None else replace(m, mask_id=f"d{i}")
            for i, m in enumerate(proposals.masks)
        ]
        hierarchies = hpipe.conquer_all(grid, parents, config, local_side)
        aset = assemble_pseudo_labels(
            parents, hierarchies, nms_thresh=config.nms_iou, min_area=config.min_area,
            image_id=image_id, height=grid.pixel_height, width=grid.pixel_width,
        )
    else:
        aset = hpipe.run_image(
            grid, config, proposals, image_id=image_id, local_grid_side=local_side
        )
    return image_id, hio.annotation_bytes(aset)


def _run_stage(args: argparse.Namespace, mode: str) -> int:
    config = _resolve_config(args)
    features = _collect(args.features, ".ufg") if args.features else None
    proposals = _collect(args.proposals, ".json") if args.proposals else None
    if mode in ("conquer",) and (features is None or proposals is None):
        raise ValueError("conquer needs both --features and --proposals")
    if features is None and proposals is None:
        raise ValueError("need --features and/or --proposals")

    if features is not None:
        paired = _pair_inputs(features, proposals)
        tasks = [
            (iid, fp, pp, config, mode, getattr(args, "local_grid_side", None))
            for iid, fp, pp in paired
        ]
        multi = args.features.is_dir()
    else:
        tasks = [
            (iid, None, pp, config, mode, None) for iid, pp in proposals
        ]
        multi = args.proposals.is_dir()

    workers = getattr(args, "workers", 1) or 1
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    _write_outputs(args.out, results, multi)
    return 0


def _load_pairs(a_path: Path, b_path: Path) -> List[Tuple[AnnotationSet, AnnotationSet]]:
    a_entries = _collect(a_path, ".json")
    b_entries = _collect(b_path, ".json")
    paired = _pair_inputs(a_entries, b_entries)
    return [
        (hio.read_annotation_set(pa), hio.read_annotation_set(pb))
        for _, pa, pb in paired
    ]


def _cmd_fuse(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    pairs = _load_pairs(args.gt, args.proposals)
    results = []
    for gt, unsup in pairs:
        fused = fuse_with_gt(gt, unsup, config.tau_plus)
        results.append((str(gt.image_id), hio.annotation_bytes(fused)))
    _write_outputs(args.out, results, args.gt.is_dir())
    return 0


def _cmd_selftrain(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    pairs = _load_pairs(args.gt, args.proposals)
    results = []
    for pseudo, predictions in pairs:
        merged = self_train_merge(
            pseudo, predictions, config.tau_self_train, config.selftrain_dedup_iou
        )
        results.append((str(pseudo.image_id), hio.annotation_bytes(merged)))
    _write_outputs(args.out, results, args.gt.is_dir())
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    pairs = _load_pairs(args.gt, args.proposals)
    gts = [g for g, _ in pairs]
    preds = [p for _, p in pairs]
    report = build_report(preds, gts, k_point=config.k_point, max_dets=args.max_dets)
    if args.out:
        hio._atomic_write_bytes(args.out, (report.to_json() + "\n").encode("utf-8"))
    print(report.to_table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiermask", description="hierarchical pseudo-mask pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def stage_parser(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.add_argument("--features", type=Path, help="UFG1 file or directory")
        p.add_argument("--proposals", type=Path, help="annotation JSON file or directory")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--local-grid-side", dest="local_grid_side", type=int,
                       help="resample each parent crop to this square patch grid")
        return p

    p = stage_parser("divide", "extract or ingest coarse masks")
    p.set_defaults(func=lambda a: _run_stage(a, "divide"))
    p = stage_parser("conquer", "build hierarchies for existing coarse masks")
    p.set_defaults(func=lambda a: _run_stage(a, "conquer"))
    p = stage_parser("pipeline", "divide + conquer + assemble")
    p.set_defaults(func=lambda a: _run_stage(a, "pipeline"))

    p = sub.add_parser("fuse", help="merge unsupervised masks into ground truth")
    _add_config_flags(p)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--proposals", type=Path, required=True, help="unsupervised masks")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("selftrain-merge", help="merge confident predictions into pseudo labels")
    _add_config_flags(p)
    p.add_argument("--gt", type=Path, required=True, help="current pseudo labels")
    p.add_argument("--proposals", type=Path, required=True, help="model predictions")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_selftrain)

    p = sub.add_parser("eval", help="recall/precision and point-prompt report")
    _add_config_flags(p)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--proposals", type=Path, required=True, help="predictions")
    p.add_argument("--out", type=Path, help="write the report JSON here")
    p.add_argument("--max-dets", dest="max_dets", type=int, default=1000)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
