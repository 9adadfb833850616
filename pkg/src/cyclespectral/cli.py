"""Command-line entry point: ``cyclespectral {generate,train,infer,eval,report}``.

Exit status: 0 success, 2 configuration error, 3 ingestion error, 4 runtime
error.  Every command writes ``resolved_config.yaml`` into its ``--out``
directory.
"""

import argparse
import csv
import logging
from pathlib import Path
import sys

import cv2
import numpy as np
import torch
import yaml

from . import io
from .config import load_config, to_dict
from .dualcycle import infer_flows
from .errors import ConfigError, ContractViolation, CycleSpectralError, IngestionError, TrainingDivergence
from .evaluation import AGGREGATE_CSV, MetricReport, emit_report, evaluate_pair, flow_to_color
from .synthdata import MAX_FLOW_FRACTION, check_flow_bound, synthetic_pair
from .warp import bilinear_warp, warp_tensor

log = logging.getLogger("cyclespectral")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INGESTION = 3
EXIT_RUNTIME = 4
SNAPSHOT_NAME = "resolved_config.yaml"
MANIFEST_NAME = "manifest.csv"
# Middlebury convention: components above this mark unknown flow.
UNKNOWN_FLOW = 1e9


def flow_name(pair_id, direction):
    return f"{pair_id}_{direction}.flo"


def write_snapshot(cfg, out_dir, args):
    out_dir.mkdir(parents=True, exist_ok=True)
    data = to_dict(cfg)
    data["run"] = {
        "command": args.command,
        "seed": args.seed,
        "manifest": getattr(args, "manifest", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "overrides": list(args.set or []),
    }
    with open(out_dir / SNAPSHOT_NAME, "w") as f:
        yaml.safe_dump(data, f, sort_keys=True)


def _pair_seed(base_seed, index):
    return int(base_seed) * 1_000_003 + int(index)


def _random_mask(h, w, rng):
    mask = np.zeros((h, w), dtype=np.uint8)
    center = (int(rng.integers(w // 4, 3 * w // 4)), int(rng.integers(h // 4, 3 * h // 4)))
    axes = (int(rng.integers(w // 8, w // 3)), int(rng.integers(h // 8, h // 3)))
    cv2.ellipse(mask, center, axes, float(rng.uniform(0, 180)), 0, 360, 1, -1)
    return mask.astype(np.float64)


def _synthetic_points(gt, n, rng):
    """Correspondences from B pixels: ``x_a = x_b + gt(x_b)``."""
    _, _, h, w = gt.shape
    xb = rng.integers(0, w, size=n).astype(np.float64)
    yb = rng.integers(0, h, size=n).astype(np.float64)
    u = gt[0, 0].numpy()[yb.astype(int), xb.astype(int)]
    v = gt[0, 1].numpy()[yb.astype(int), xb.astype(int)]
    cats = rng.choice(["near", "far"], size=n)
    pts = []
    for i in range(n):
        xa, ya = xb[i] + u[i], yb[i] + v[i]
        if 0 <= xa <= w - 1 and 0 <= ya <= h - 1:
            pts.append((round(float(xa), 4), round(float(ya), 4), xb[i], yb[i], str(cats[i])))
    return pts


def cmd_generate(args, cfg):
    gen = cfg.generate
    out = Path(args.out)
    if gen.flow.kind == "smooth" and not gen.flow.max_magnitude < MAX_FLOW_FRACTION * gen.width:
        check_flow_bound(np.array([[[gen.flow.max_magnitude]], [[0.0]]]), gen.width)
    write_snapshot(cfg, out, args)
    pair_dir = out / "pairs"
    pair_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(gen.n):
        seed = _pair_seed(gen.seed, i)
        s = synthetic_pair(gen.height, gen.width, gen.flow, gen.transform, seed, spectrum=gen.spectrum_a)
        pid = f"pair_{i:05d}"
        entry = io.ManifestEntry(pid, f"pairs/{pid}_a.png", s.img_a.spectrum, f"pairs/{pid}_b.png",
                                 s.img_b.spectrum, gt_flow_path=f"pairs/{pid}_gt.flo")
        io.write_image(out / entry.path_a, s.img_a.data[0], bits=16)
        io.write_image(out / entry.path_b, s.img_b.data[0], bits=16)
        io.write_flo(out / entry.gt_flow_path, s.gt_flow[0])
        rng = np.random.default_rng([seed, 31])
        if gen.masks:
            mask_a = _random_mask(gen.height, gen.width, rng)
            # mask_b(p) = mask_a(p + gt(p)), the same sampling that built img_b.
            warped, _ = warp_tensor(torch.from_numpy(mask_a)[None, None], s.gt_flow.double())
            mask_b = (warped[0, 0].numpy() >= 0.5).astype(np.float64)
            entry.mask_a, entry.mask_b = f"pairs/{pid}_mask_a.png", f"pairs/{pid}_mask_b.png"
            io.write_mask(out / entry.mask_a, mask_a)
            io.write_mask(out / entry.mask_b, mask_b)
        if gen.points:
            entry.points_path = f"pairs/{pid}_points.txt"
            io.write_points(out / entry.points_path, _synthetic_points(s.gt_flow, gen.points, rng))
        entries.append(entry)
    io.write_manifest(out / MANIFEST_NAME, entries)
    log.info("wrote %d pairs to %s", gen.n, out)
    return EXIT_OK


def _require(args, name):
    value = getattr(args, name, None)
    if value is None:
        raise ConfigError(f"--{name} is required for '{args.command}'", key=f"--{name}")
    return value


def cmd_train(args, cfg):
    from .training import train

    manifest = _require(args, "manifest")
    out = Path(args.out)
    dataset = list(io.load_manifest(manifest))
    if not dataset:
        raise IngestionError("training manifest lists no pairs", entry=manifest)
    write_snapshot(cfg, out, args)
    resume_from = args.checkpoint
    state = train(cfg.train, dataset, out, resume_from=resume_from)
    log.info("finished at iteration %d", state.iteration)
    return EXIT_OK


def _load_model(path):
    from .checkpoint import load_checkpoint

    model, _, meta = load_checkpoint(path)
    model.eval()
    return model, meta


def cmd_infer(args, cfg):
    out = Path(args.out)
    model, _ = _load_model(_require(args, "checkpoint"))
    entries = io.read_manifest(_require(args, "manifest"))
    want = set(model.spectra)
    for entry in entries:
        have = {entry.spectrum_a, entry.spectrum_b}
        if have != want:
            raise ConfigError(
                f"checkpoint spectra {sorted(want)} do not match manifest spectra {sorted(have)} "
                f"(line {entry.lineno}, {entry.pair_id})", key="spectrum")
    write_snapshot(cfg, out, args)
    root = Path(args.manifest).parent
    for entry in entries:
        s = io.load_entry(entry, root)
        f_AB, f_BA = infer_flows(s.img_a, s.img_b, model)
        io.write_flo(out / flow_name(entry.pair_id, "AB"), f_AB[0])
        io.write_flo(out / flow_name(entry.pair_id, "BA"), f_BA[0])
        if args.warped:
            io.write_image(out / f"{entry.pair_id}_AB.png", bilinear_warp(s.img_a, f_AB).data[0])
            io.write_image(out / f"{entry.pair_id}_BA.png", bilinear_warp(s.img_b, f_BA).data[0])
    log.info("wrote flows for %d pairs to %s", len(entries), out)
    return EXIT_OK


def _read_flow(flows_dir, pair_id, direction):
    path = Path(flows_dir) / flow_name(pair_id, direction)
    if not path.is_file():
        raise IngestionError(f"flow file not found: {path}", entry=pair_id)
    return torch.from_numpy(io.read_flo(path)).unsqueeze(0)


def cmd_eval(args, cfg):
    out = Path(args.out)
    flows_dir = _require(args, "flows")
    manifest = _require(args, "manifest")
    entries = io.read_manifest(manifest)
    if not any(e.gt_flow_path or (e.mask_a and e.mask_b) or e.points_path for e in entries):
        raise IngestionError("nothing to evaluate: no entry has gt flow, masks or points", entry=manifest)
    write_snapshot(cfg, out, args)
    root = Path(manifest).parent
    pairs = []
    for entry in entries:
        s = io.load_entry(entry, root)
        f_AB = _read_flow(flows_dir, entry.pair_id, "AB")
        f_BA = _read_flow(flows_dir, entry.pair_id, "BA") if s.points is not None else None
        valid = None
        if s.gt_flow is not None:
            gt = s.gt_flow.double()
            valid = (torch.isfinite(gt).all(dim=1) & (gt.abs() < UNKNOWN_FLOW).all(dim=1)).double()
            gt = torch.where(valid.bool()[:, None].expand_as(gt), gt, torch.zeros_like(gt))
        else:
            gt = None
        pairs.append(evaluate_pair(entry.pair_id, f_AB, f_BA, gt, valid, s.mask_a, s.mask_b, s.points,
                                   cfg.evaluate.threshold, cfg.evaluate.u_only))
    emit_report(MetricReport(pairs), out)
    log.info("evaluated %d pairs into %s", len(pairs), out)
    return EXIT_OK


def cmd_report(args, cfg):
    out = Path(args.out)
    if args.flows is None and args.metrics is None:
        raise ConfigError("report needs --flows and/or --metrics", key="--flows")
    write_snapshot(cfg, out, args)
    if args.flows is not None:
        files = sorted(Path(args.flows).glob("*.flo"))
        if not files:
            raise IngestionError("no .flo files found", entry=args.flows)
        for path in files:
            rgb = flow_to_color(io.read_flo(path))
            cv2.imwrite(str(out / f"{path.stem}.png"), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
    if args.metrics is not None:
        src = Path(args.metrics)
        src = src / AGGREGATE_CSV if src.is_dir() else src
        if not src.is_file():
            raise IngestionError("aggregate metrics file not found", entry=str(src))
        with open(src, newline="") as f:
            rows = list(csv.DictReader(f))
        lines = ["| metric | category | value | pairs |", "|---|---|---|---|"]
        for r in rows:
            value = f"{float(r['value']):.4f}" if r["value"] else "n/a"
            lines.append(f"| {r['metric']} | {r['category']} | {value} | {r['n_pairs']} |")
        text = "\n".join(lines) + "\n"
        (out / "summary.md").write_text(text)
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="cyclespectral", description="Cross-spectral dense correspondence.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the command's seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        return p

    common(sub.add_parser("generate", help="write a synthetic dataset and manifest"))
    p = common(sub.add_parser("train", help="self-supervised training"))
    p.add_argument("--manifest", help="training pairs")
    p.add_argument("--checkpoint", help="resume from this checkpoint ('latest' picks the newest in --out)")
    p = common(sub.add_parser("infer", help="estimate flows for every pair of a manifest"))
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--warped", action="store_true", help="also write warped images")
    p = common(sub.add_parser("eval", help="score flows against manifest annotations"))
    p.add_argument("--manifest")
    p.add_argument("--flows", help="directory written by 'infer'")
    p.add_argument("--checkpoint", help=argparse.SUPPRESS)
    p = common(sub.add_parser("report", help="render flow images and summarise metrics"))
    p.add_argument("--flows", help="directory of .flo files")
    p.add_argument("--metrics", help="eval output directory or aggregate CSV")
    return parser


def resolve(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        section = {"generate": "generate", "train": "train"}.get(args.command)
        if section:
            overrides.append(f"{section}.seed={args.seed}")
    return load_config(args.config, overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGESTION
    except (TrainingDivergence, ContractViolation, CycleSpectralError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
