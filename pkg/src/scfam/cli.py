"""Command-line entry point: ``scfam <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness.config import OUTPUT_ROOT_ENV, load_config, output_root


def _cmd_rf(args) -> int:
    from .rf import load_stack, project_field, receptive_field_size

    stack = load_stack(args.stack)
    if args.pos is None:
        print(receptive_field_size(stack, args.layer))
        return 0
    if args.image is None:
        raise SystemExit("rf: --pos needs --image H W")
    r = project_field(stack, args.layer, args.pos[0], args.pos[1], tuple(args.image))
    print(f"{r.x0} {r.y0} {r.x1} {r.y1}")
    return 0


def _cmd_label(args) -> int:
    from .labels import LabelingConfig, label_map_local, label_map_mid, label_global, load_scene, read_annotations
    from .rf import load_stack

    stack = load_stack(args.stack)
    k1 = args.local_layer or stack.tap("F1")
    k2 = args.mid_layer or stack.tap("F2")
    records = read_annotations(args.scene)
    root = Path(args.scene).parent
    k = args.num_classes or max([int(b["class"]) for r in records for b in r.get("boxes", [])], default=0) + 1
    cfg = LabelingConfig(args.zeta, k)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for rec in records:
            size = tuple(args.image) if args.image else None
            scene = load_scene(rec, root, size)
            dump = {
                "image": rec.get("image"),
                "local": label_map_local(scene, stack, k1, cfg.zeta).astype(int).tolist(),
                "mid": label_map_mid(scene, stack, k2, k, cfg.zeta).astype(int).tolist(),
                "global": label_global(scene, k).astype(int).tolist(),
            }
            out.write(json.dumps(dump) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _cmd_divergence(args) -> int:
    from .divergence import DomainFeatureSet, TrainerConfig, estimate_mch

    features = DomainFeatureSet.read_jsonl(args.features)
    cfg = TrainerConfig(hidden=args.hidden, epochs=args.epochs, restarts=args.restarts, seed=args.seed)
    rep = estimate_mch(features, cfg)
    out = Path(args.out) if args.out else output_root() / "divergence"
    out.mkdir(parents=True, exist_ok=True)
    rep.write_json(out / "divergence.json")
    rep.write_csv(out / "divergence.csv")
    print(json.dumps(rep.to_dict(), indent=2))
    return 0


def _cmd_synth(args) -> int:
    import yaml

    from .synthdata import LIGHT_FOG, SceneConfig, ShiftParams, generate_dataset, save_dataset

    raw = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    raw = raw or {}
    data = raw.get("data", raw)
    scene = SceneConfig(**data.get("scene", {}))
    shift = ShiftParams(**data["shift"]) if "shift" in data else LIGHT_FOG
    n_src = int(data.get("n_source_train", 256))
    n_tgt = int(data.get("n_target_train", 256))
    n_val = int(data.get("n_val", 48))
    out = Path(args.out)
    seed = scene.seed
    splits = {
        "source_train": (n_src, None, seed),
        "target_train": (n_tgt, shift, seed + 1),
        "source_val": (n_val, None, seed + 2),
        "target_val": (n_val, shift, seed + 3),
    }
    for name, (n, sh, s) in splits.items():
        ann = save_dataset(generate_dataset(scene, n, sh, s), out / name)
        print(ann)
    return 0


def _run_dir(name: str) -> Path:
    return output_root() / name


def _cmd_train(args) -> int:
    from .harness.train import train

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else _run_dir(cfg.name)
    result = train(cfg, out)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"iter {last.iteration} score {last.score!r} dH_F2 {last.dH_F2!r}")
    print(out)
    return 0


def _cmd_ablate(args) -> int:
    from .harness.ablation import load_grid, run_ablation

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else _run_dir(f"{cfg.name}_ablation")
    cells = load_grid(args.grid)
    rows = run_ablation(cfg, cells, out, workers=args.workers)
    print(out / "ablation.csv")
    return 0 if len(rows) == len(cells) else 1


def _cmd_report(args) -> int:
    from .harness.report import report

    out = Path(args.out) if args.out else _run_dir("report")
    for p in report(args.csv, out).values():
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scfam", epilog=f"output root: ${OUTPUT_ROOT_ENV} (default ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("rf", help="receptive field size or footprint")
    s.add_argument("--stack", required=True)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--pos", type=int, nargs=2, metavar=("U", "V"))
    s.add_argument("--image", type=int, nargs=2, metavar=("H", "W"))
    s.set_defaults(func=_cmd_rf)

    s = sub.add_parser("label", help="semantic label maps for annotated scenes")
    s.add_argument("--scene", required=True, help="line-delimited JSON annotations")
    s.add_argument("--stack", required=True)
    s.add_argument("--zeta", type=float, default=0.6)
    s.add_argument("--num-classes", type=int)
    s.add_argument("--local-layer", type=int)
    s.add_argument("--mid-layer", type=int)
    s.add_argument("--image", type=int, nargs=2, metavar=("H", "W"), help="size when image files are absent")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_label)

    s = sub.add_parser("divergence", help="mixed-class divergence of a feature file")
    s.add_argument("--features", required=True)
    s.add_argument("--hidden", type=int, default=32)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--restarts", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_divergence)

    s = sub.add_parser("synth", help="write a synthetic two-domain dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("train", help="train one configuration")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("ablate", help="train every cell of an ablation grid")
    s.add_argument("--config")
    s.add_argument("--grid", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_ablate)

    s = sub.add_parser("report", help="merge metrics CSVs and plot curves")
    s.add_argument("csv", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, IndexError, FileNotFoundError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # training divergence and the like
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
