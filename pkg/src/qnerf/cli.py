"""``qnerf`` command line: train, render, eval, inspect-circuit, dataset, config.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
``QNERF_OUTPUT_DIR`` overrides every output directory.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

OUTPUT_ENV = "QNERF_OUTPUT_DIR"
BUNDLED_PREFIX = "bundled:"


class UsageError(Exception):
    """Bad arguments or inputs the user must fix (exit code 2)."""


def bundled_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def resolve_dataset(path: str, base: Path | None = None) -> Path:
    if path.startswith(BUNDLED_PREFIX):
        p = bundled_path(path[len(BUNDLED_PREFIX) :])
    else:
        p = Path(path)
        if not p.is_absolute() and not p.exists() and base is not None and (base / p).exists():
            p = base / p
    if not p.exists():
        raise UsageError(f"dataset not found: {path}")
    return p


def output_dir(cli_value: str | None, fallback: str) -> Path:
    out = Path(os.environ.get(OUTPUT_ENV) or cli_value or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(path):
    from .config import load_config

    return load_config(path)


def _describe_heads(trainer) -> list[str]:
    from .qiren import QirenStack

    f = trainer.model.field
    lines = [f"field variant: {trainer.field_cfg.variant}"]
    for name, head in (("density head", f.density_head), ("color head", f.color_head)):
        kind = f"QIREN {head.spec.to_string()} on {head.layers[0].spec.n_qubits} qubits" if isinstance(head, QirenStack) else "MLP"
        params = f.density_head_params() if name == "density head" else f.color_head_params()
        lines.append(f"{name}: {kind}, count_params = {params}")
    return lines


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .config import ConfigError, dump_config
    from .dataset import load_dataset
    from .trainer import Trainer

    cfg = _load_cfg(args.config)
    field_cfg, proposal_cfg, train_cfg = cfg.build()
    if args.iters is not None:
        import dataclasses

        try:
            train_cfg = dataclasses.replace(train_cfg, total_iters=args.iters)
        except ValueError as exc:
            raise ConfigError(str(exc), None, "--iters") from exc
    ds_path = resolve_dataset(cfg.dataset.path, Path(args.config).resolve().parent)
    ds = load_dataset(ds_path, cfg.dataset.downscale, cfg.dataset.train_fraction, cfg.dataset.split_seed)
    out = output_dir(args.output, cfg.output.dir)
    metrics_path = out / "metrics.csv"
    config_text = dump_config(cfg)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, ds, metrics_path)
    else:
        if metrics_path.exists():
            metrics_path.unlink()
        trainer = Trainer(ds, field_cfg, proposal_cfg, train_cfg, metrics_path, {"config_toml": config_text, "dataset": str(ds_path)})
    (out / "config.toml").write_text(config_text)
    info = _describe_heads(trainer)
    info.append(f"frames: {len(ds)} (train {len(ds.train_indices)}, eval {len(ds.eval_indices)})")
    (out / "run.log").write_text("\n".join(info) + "\n")
    for line in info:
        print(line)
    final = out / "final.ckpt"
    try:
        trainer.fit(checkpoint_dir=out / "checkpoints")
    except KeyboardInterrupt:
        trainer.save(out / "interrupted.ckpt")
        print(f"interrupted at step {trainer.step}; resume with --resume {out / 'interrupted.ckpt'}", file=sys.stderr)
        return 1
    trainer.save(final)
    print(f"step {trainer.step}: loss {trainer.last_loss.as_floats()['total']:.6g}")
    dead = trainer.detector.dead()
    if dead:
        print(f"warning: parameter groups without gradient: {', '.join(dead)}")
    if ds.eval_indices and not args.no_eval:
        rep = trainer.evaluate(config=field_cfg.variant)
        from .eval import write_report_csv

        write_report_csv(rep, out / "eval.csv")
        print(f"held-out PSNR {rep.mean('psnr'):.2f} dB, SSIM {rep.mean('ssim'):.4f}")
    print(f"checkpoint: {final}")
    return 0


# ---------------------------------------------------------------------------
# render / eval


def _checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    from .trainer import load_model

    return load_model(path)


def _dataset_for(meta: dict, override: str | None, load_images: bool = True):
    from .config import parse_config
    from .dataset import load_dataset

    cfg = parse_config(meta["config_toml"]) if "config_toml" in meta else None
    path = override or meta.get("dataset")
    if path is None:
        raise UsageError("checkpoint does not record its dataset; pass --dataset")
    p = resolve_dataset(path)
    ds_cfg = cfg.dataset if cfg else None
    return load_dataset(
        p,
        ds_cfg.downscale if ds_cfg else None,
        ds_cfg.train_fraction if ds_cfg else 0.9,
        ds_cfg.split_seed if ds_cfg else None,
        load_images=load_images,
    )


def _parse_views(text: str | None, default: list[int], n: int) -> list[int]:
    if text is None:
        return default
    if text == "all":
        return list(range(n))
    try:
        views = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--views expects comma-separated integers, got {text!r}") from exc
    bad = [v for v in views if not 0 <= v < n]
    if bad:
        raise UsageError(f"view indices {bad} outside 0..{n - 1}")
    return views


def cmd_render(args) -> int:
    from .dataset import load_dataset
    from .render import render_image, write_float_dump, write_png

    model, meta = _checkpoint(args.checkpoint)
    if args.cameras:
        ds = load_dataset(args.cameras, load_images=False)
        default = list(range(len(ds)))
    else:
        ds = _dataset_for(meta, args.dataset, load_images=False)
        default = list(ds.eval_indices) or list(range(len(ds)))
    views = _parse_views(args.views, default, len(ds))
    out = output_dir(args.output, "renders")
    for v in views:
        cam = ds.frames[v].camera
        img = render_image(model, cam, chunk=args.chunk)
        write_png(out / f"view_{v:03d}.png", img.rgb)
        if args.float_dump:
            write_float_dump(out / f"view_{v:03d}.f32", img.rgb)
        print(f"view {v}: {cam.height}x{cam.width} -> {out / f'view_{v:03d}.png'}")
    return 0


def _read_external(spec: str) -> tuple[str, dict[int, float]]:
    name, sep, path = spec.partition("=")
    if not sep or not name:
        raise UsageError(f"--metric expects NAME=FILE.csv, got {spec!r}")
    scores = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                scores[int(row["view"])] = float(row[name] if name in row else row["value"])
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read metric file {path}: {exc}") from exc
    return name, scores


def cmd_eval(args) -> int:
    from .eval import evaluate_views, format_hsv_report, format_table, hsv_compare, write_report_csv
    from .render import render_image

    model, meta = _checkpoint(args.checkpoint)
    ds = _dataset_for(meta, args.dataset)
    views = list(ds.eval_indices)
    if not views:
        raise UsageError("dataset split has no held-out views")
    external = dict(_read_external(m) for m in args.metric or [])
    preds = {v: render_image(model, ds.frames[v].camera, chunk=args.chunk).rgb for v in views}
    gts = {v: ds.frames[v].image for v in views}
    cfg = meta.get("configs", {}).get("field", {})
    variant = cfg.get("variant", "")
    spec = cfg.get("color_qiren") if variant in ("q-color", "q-both") else cfg.get("density_qiren") if variant == "q-density" else ""
    layers = spec.split("+")[0] if spec else str(cfg.get("color_layers", ""))
    width = spec.split("+")[1] if spec else str(cfg.get("color_hidden", ""))
    params = model.field.color_head_params() if variant != "q-density" else model.field.density_head_params()
    rep = evaluate_views(preds, gts, external=external, config=args.label or variant, layers=layers, width=width, params=params)
    out = output_dir(args.output, "eval")
    write_report_csv(rep, out / "eval.csv")
    table = format_table([rep])
    (out / "eval.txt").write_text(table + "\n")
    print(table)
    if args.hsv:
        gt_all = np.concatenate([gts[v].reshape(-1, 3) for v in views])
        pr_all = np.concatenate([preds[v].reshape(-1, 3) for v in views])
        report = format_hsv_report([hsv_compare(gt_all, pr_all, "GT", args.label or variant)])
        (out / "hsv.txt").write_text(report + "\n")
        print(report)
    return 0


# ---------------------------------------------------------------------------
# inspection


def cmd_inspect_circuit(args) -> int:
    from .qiren import QirenStack, count_params, parse_stack_spec

    try:
        spec = parse_stack_spec(args.spec, args.qubits, args.in_dim, args.out_dim, args.profile)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    stack = QirenStack(spec)
    print(f"stack {spec.to_string()} ({args.profile} profile): in {args.in_dim} -> out {args.out_dim}")
    print(f"count_params: {count_params(spec)}")
    for i, layer in enumerate(stack.layers):
        ls = layer.spec
        print()
        print(f"== layer {i}: {ls.n_qubits} qubits, {ls.reuploads} re-uploads, layout {ls.layout}")
        print(f"pre-map: {ls.in_dim} -> {ls.n_features} angles ({ls.in_dim * ls.n_features + ls.n_features} params)")
        print(layer.program.describe())
    print()
    print(f"readout: {spec.layers[-1].n_qubits} <Z> -> {args.out_dim}")
    return 0


def cmd_dataset_inspect(args) -> int:
    from .dataset import load_dataset

    ds = load_dataset(resolve_dataset(args.path), _parse_hw(args.downscale), args.train_fraction, args.split_seed)
    print(ds.summary())
    return 0


def cmd_dataset_synth(args) -> int:
    from .dataset import write_synthetic_dataset

    out = write_synthetic_dataset(args.out, args.views, args.height, args.width)
    print(f"wrote {args.views} views to {out}")
    return 0


def cmd_config(args) -> int:
    from .config import default_config_text, load_config, schema_text

    if args.action == "default":
        print(default_config_text(), end="")
    elif args.action == "schema":
        print(schema_text())
    else:
        if not args.file:
            raise UsageError("config validate needs a file")
        load_config(args.file)
        print(f"{args.file}: ok")
    return 0


def _parse_hw(text):
    if text is None:
        return None
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"expected HEIGHTxWIDTH, got {text!r}") from exc
    return h, w


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qnerf", description="Hybrid quantum-classical radiance fields.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a field from a TOML config")
    t.add_argument("config", help="run configuration (TOML)")
    t.add_argument("--iters", type=int, help="override train.total_iters")
    t.add_argument("--output", help="output directory (default: output.dir)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--no-eval", action="store_true", help="skip the held-out evaluation at the end")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("checkpoint", help="trained model checkpoint")
    r.add_argument("--dataset", help="dataset whose cameras to render (default: the training dataset)")
    r.add_argument("--cameras", help="camera manifest (transforms.json); images are not needed")
    r.add_argument("--views", help="comma-separated frame indices or 'all' (default: held-out views)")
    r.add_argument("--output", help="output directory (default: ./renders)")
    r.add_argument("--float-dump", action="store_true", help="also write float32 raw images (.f32)")
    r.add_argument("--chunk", type=int, default=4096, help="rays per forward pass")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="score held-out views")
    e.add_argument("checkpoint", help="trained model checkpoint")
    e.add_argument("--dataset", help="dataset to evaluate on (default: the training dataset)")
    e.add_argument("--output", help="report directory (default: ./eval)")
    e.add_argument("--hsv", action="store_true", help="add HSV histogram KS report")
    e.add_argument("--label", help="name of this model in reports")
    e.add_argument("--metric", action="append", help="merge external per-view scores, NAME=FILE.csv (columns view,NAME)")
    e.add_argument("--chunk", type=int, default=4096, help="rays per forward pass")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("inspect-circuit", help="print the circuit of an 'xL+yS' stack")
    c.add_argument("spec", help="stack string, e.g. 2L+4S")
    c.add_argument("--qubits", type=int, default=8, help="qubits per layer (<= 8)")
    c.add_argument("--in-dim", type=int, default=18, help="input features")
    c.add_argument("--out-dim", type=int, default=3, help="output features")
    c.add_argument("--profile", default="default", help="circuit profile: default or qiren")
    c.set_defaults(fn=cmd_inspect_circuit)

    d = sub.add_parser("dataset", help="dataset utilities")
    dsub = d.add_subparsers(dest="dataset_command", required=True)
    di = dsub.add_parser("inspect", help="print frame and pose summary")
    di.add_argument("path", help="dataset directory, manifest, or bundled:NAME")
    di.add_argument("--downscale", help="HEIGHTxWIDTH")
    di.add_argument("--train-fraction", type=float, default=0.9, help="training share of frames")
    di.add_argument("--split-seed", type=int, help="seeded random split")
    di.set_defaults(fn=cmd_dataset_inspect)
    dsy = dsub.add_parser("synth", help="write the procedural analytic scene")
    dsy.add_argument("out", help="output directory")
    dsy.add_argument("--views", type=int, default=8, help="number of cameras")
    dsy.add_argument("--height", type=int, default=36, help="image height")
    dsy.add_argument("--width", type=int, default=64, help="image width")
    dsy.set_defaults(fn=cmd_dataset_synth)

    g = sub.add_parser("config", help="print the default config or its JSON schema, or validate a file")
    g.add_argument("action", choices=["default", "schema", "validate"], help="what to do: default, schema or validate")
    g.add_argument("file", nargs="?", help="config to validate")
    g.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .dataset import DatasetError, PoseError
    from .diff import CheckpointError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, PoseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
