"""Command-line entry point: synth, train, render, eval, ablate, gradcheck.

Exit codes: 0 success, 1 validation error, 2 non-finite numerics,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path


from . import gradcheck, plotting
from .data import (SceneFormatError, declared_scale, load_scene, merge_scenes, read_image, save_scene, synth_scene,
                   write_image)
from .evaluate import (ABLATION_LABELS, bicubic_baseline, mean_score, render_name, score_model, score_renders,
                       write_ablation_csv, write_metrics_csv)
from .model import ViewCache, parameter_count, render_view
from .trainer import CheckpointError, NonFiniteError, TrainConfig, load_checkpoint, train

log = logging.getLogger("ngpsr")

EXIT_OK, EXIT_INVALID, EXIT_NONFINITE, EXIT_GRADCHECK = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_settings(lines, source: str) -> dict:
    keys = TrainConfig.keys()
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, value, keys[key])
    return out


def build_config(config_path: str | None, overrides: list[str], **extra) -> TrainConfig:
    values = {}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        values.update(parse_settings(text.splitlines(), config_path))
    values.update(parse_settings(overrides or [], "--set"))
    values.update({k: v for k, v in extra.items() if v is not None})
    return TrainConfig(**values)


@contextlib.contextmanager
def _threads(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _progress(every: int):
    start = time.perf_counter()

    def report(step, total, loss):
        if step % every == 0 or step == total - 1:
            rate = (step + 1) / max(time.perf_counter() - start, 1e-9)
            log.info("step %d/%d  loss %.6f  %.2f steps/s", step + 1, total, loss, rate)

    return report


def _load_for_config(scenes: list[str], config: TrainConfig):
    """One scene trains per-scene; several are pooled for cross-scene training."""
    loaded = []
    for scene in scenes:
        recorded = declared_scale(scene)
        if recorded is not None and recorded != config.scale:
            raise ConfigError(f"scene {scene} has scale x{recorded} but the config asks for x{config.scale}; "
                              f"pass --set scale={recorded}")
        loaded.append(load_scene(scene, scale=config.scale, levels=config.levels))
    return merge_scenes(loaded)


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    ds = synth_scene(seed=args.seed, n_views=args.n_views, hr_size=args.hr_size, scale=args.scale)
    try:
        save_scene(ds, args.out)
    except OSError as exc:
        raise ConfigError(f"cannot write scene to {args.out}: {exc}") from None
    print(f"wrote {len(ds.views)} views ({len(ds.indices('train'))} train, "
          f"{len(ds.indices('test'))} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = build_config(args.config, args.set, ablation=args.ablation, seed=args.seed,
                          raw_weights=args.raw_weights)
    ds = _load_for_config(args.scene, config)
    out = Path(args.out)
    print(f"parameters: {parameter_count(config.model_config())}")
    result = train(ds, config, loss_csv=out / "loss.csv", checkpoint=out / "checkpoint.ngps",
                   progress=_progress(args.log_every))
    plotting.loss_curve(result.losses, out / "loss.png")
    steps = len(result.losses)
    print(f"steps: {steps}  steps/sec: {steps / max(result.seconds, 1e-9):.2f}  final loss: {result.final_loss:.6f}")
    print(f"checkpoint: {out / 'checkpoint.ngps'}")
    return EXIT_OK


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    scene_scale = args.scale if args.scale is not None else declared_scale(args.scene)
    if scene_scale is not None and scene_scale != cfg.scale:
        raise ConfigError(f"scene {args.scene} has scale x{scene_scale} but checkpoint "
                          f"{args.checkpoint} was trained at x{cfg.scale}")
    ds = load_scene(args.scene, scale=cfg.scale, levels=cfg.levels)
    cache = ViewCache(ds, cfg.levels)
    out = Path(args.out)
    for j, i in enumerate(ds.indices(args.split)):
        write_image(out / render_name(args.split, j), render_view(ckpt.model, cache, i))
    print(f"rendered {len(ds.indices(args.split))} {args.split} views to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    scale = args.scale or declared_scale(args.scene) or 2
    ds = load_scene(args.scene, scale=scale)
    scores, missing = score_renders(args.renders, ds, args.split)
    if missing:
        for name in missing:
            print(f"missing render: {name}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out) if args.out else Path(args.renders)
    write_metrics_csv(out / "metrics.csv", scores)
    plotting.metrics_bars(scores, out / "metrics.png")
    if scores:
        i0 = ds.indices(args.split)[0]
        plotting.comparison_panel(ds.views[i0].hr_image, bicubic_baseline(ds, i0),
                                  read_image(Path(args.renders) / scores[0].view), out / "comparison.png",
                                  title=scores[0].view)
    m = mean_score(scores)
    print(f"{'view':<14}{'psnr':>9}{'ssim':>8}{'bic_psnr':>10}{'bic_ssim':>10}")
    for s in scores + [m]:
        print(f"{s.view:<14}{s.psnr:9.2f}{s.ssim:8.4f}{s.bicubic_psnr:10.2f}{s.bicubic_ssim:10.4f}")
    return EXIT_OK


def run_ablation(ds, config: TrainConfig, progress=None) -> list[dict]:
    cache = ViewCache(ds, config.levels)
    rows = []
    for variant in ("no_gcam", "no_gcnn", "no_gfuse", "none"):
        cfg = replace(config, ablation=variant)
        result = train(cache, cfg, progress=progress)
        tr = mean_score(score_model(result.model, cache, ds, "train"))
        te_scores = score_model(result.model, cache, ds, "test") if ds.indices("test") else []
        te = mean_score(te_scores) if te_scores else None
        rows.append({
            "method": ABLATION_LABELS[variant], "psnr": tr.psnr, "ssim": tr.ssim, "lpips": "n/a",
            "test_psnr": te.psnr if te else float("nan"), "test_ssim": te.ssim if te else float("nan"),
            "seed": cfg.seed, "steps": len(result.losses),
        })
        log.info("%s: train PSNR %.2f", variant, tr.psnr)
    return rows


def cmd_ablate(args) -> int:
    config = build_config(args.config, args.set, seed=args.seed, raw_weights=args.raw_weights)
    ds = _load_for_config(args.scene, config)
    rows = run_ablation(ds, config, progress=_progress(args.log_every))
    out = Path(args.out)
    write_ablation_csv(out / "ablation.csv", rows)
    plotting.ablation_bars(rows, out / "ablation.png")
    print(f"{'method':<12}{'psnr':>9}{'ssim':>8}{'lpips':>7}{'test_psnr':>11}{'seed':>6}{'steps':>7}")
    for r in rows:
        print(f"{r['method']:<12}{r['psnr']:9.2f}{r['ssim']:8.4f}{r['lpips']:>7}{r['test_psnr']:11.2f}"
              f"{r['seed']:6d}{r['steps']:7d}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = False
    print(f"{'op':<20}{'rel. error':>14}")
    for name, check in gradcheck.op_suite(args.seed).items():
        err = check()
        bad = not err < gradcheck.OP_TOL
        failed |= bad
        print(f"{name:<20}{err:14.3e}{'  FAIL' if bad else ''}")
    report = gradcheck.end_to_end(seed=args.seed, n_params=args.params)
    bad = not report.worst < gradcheck.E2E_TOL or len(report.errors) < args.params
    failed |= bad
    print(f"{'end-to-end':<20}{report.worst:14.3e}{'  FAIL' if bad else ''}  "
          f"({len(report.errors)} parameters, {report.skipped} redrawn at kinks)")
    for name, idx, err, a, n in report.errors:
        print(f"  {name}{list(idx)}  analytic {a:+.6e}  numeric {n:+.6e}  rel {err:.2e}")
    print("learnable tensors:")
    for name in report.names:
        print(f"  {name}")
    print("gradcheck FAILED" if failed else "gradcheck passed")
    return EXIT_GRADCHECK if failed else EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ngpsr", description=__doc__.splitlines()[0])
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a procedural scene in the NeRF-Blender layout")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-views", type=int, default=8)
    s.add_argument("--hr-size", type=int, default=64)
    s.add_argument("--scale", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def config_args(sp):
        sp.add_argument("scene", nargs="+", help="one scene directory, or several for cross-scene training")
        sp.add_argument("--config", help="flat 'key = value' file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--raw-weights", action="store_true", default=None,
                        help="use the weight MLP output unnormalized (same as --set raw_weights=true)")
        sp.add_argument("--out", required=True)
        sp.add_argument("--log-every", type=int, default=100)

    t = sub.add_parser("train", help="train a model on a scene")
    config_args(t)
    t.add_argument("--ablation", choices=["none", "no_gcam", "no_gcnn", "no_gfuse"])
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render HR images for a split")
    r.add_argument("checkpoint")
    r.add_argument("scene")
    r.add_argument("--split", default="test", choices=["train", "test"])
    r.add_argument("--scale", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of renders against HR ground truth")
    e.add_argument("renders")
    e.add_argument("scene")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--scale", type=int, help="defaults to the scale recorded in the scene, else 2")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score the full model and its three ablations")
    config_args(a)
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the pixel loss")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--params", type=int, default=20)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _threads(args.deterministic):
            return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, SceneFormatError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
