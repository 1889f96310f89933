"""``adaptdiff`` command-line entry point.

One subcommand per pipeline stage plus the end-to-end run, the label
pollution study and a gradient check.  Every number printed is also written
to a file under ``--out``.  Exit codes: 0 success, 1 invalid input or usage,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import gridio, pipeline
from .config import ConfigError, PipelineConfig, parse_config
from .gridio import GridFormatError, Manifest
from .metrics import dice_scores, paired_t_test
from .nets import NonFiniteLossError, load_model, save_model

log = logging.getLogger("adaptdiff")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the CLI contract reserves 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_kv(path: Path, values: dict) -> None:
    lines = []
    for k, v in values.items():
        lines.append(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}")
    gridio.atomic_write_text(path, "\n".join(lines) + "\n")


def _data_root(args, cfg: PipelineConfig) -> Path:
    if args.data:
        return Path(args.data)
    return Path(cfg.data_dir) if cfg.data_dir else args.out


def _manifest(args, cfg: PipelineConfig, sub: str) -> Manifest:
    """``--data`` may name a manifest, its directory, or a data root holding ``sub``."""
    root = _data_root(args, cfg)
    if root.is_file() or (root / Manifest.FILENAME).exists():
        return Manifest.load(root)
    return Manifest.load(root / sub)


def _emit(args, path: Path, values: dict) -> None:
    _write_kv(path, values)
    if not args.quiet:
        for k, v in values.items():
            print(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}")


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args, cfg: PipelineConfig) -> int:
    made = pipeline.gen_data(cfg, args.out)
    _emit(args, args.out / "gen_data.txt", {f"{k}.records": len(m) for k, m in made.items()})
    return EXIT_OK


def cmd_train_seg(args, cfg: PipelineConfig) -> int:
    source = _manifest(args, cfg, "source")
    model, curve, heldout = pipeline.step1_train_source(cfg, source)
    save_model(args.out / "seg_source.adpt", model)
    gridio.atomic_write_text(args.out / "curve_seg_source.csv", curve.to_csv())
    _emit(args, args.out / "train_seg.txt", {"heldout_dice": heldout, "final_loss": curve.losses[-1]})
    return EXIT_OK


def cmd_pseudo_label(args, cfg: PipelineConfig) -> int:
    target = Manifest.load(_need(args.data, "--data (unlabelled target manifest)"))
    pipeline.check_provenance(target, cfg.source_style)
    model = load_model(_need(args.model, "--model (source segmenter)"))
    _, pseudo = pipeline.step1_pseudo_label(model, target, cfg.pseudo_threshold, args.out, cfg)
    empty = float(np.mean(pseudo.reshape(len(pseudo), -1).sum(1) == 0)) if len(pseudo) else 0.0
    _emit(args, args.out / "pseudo_label.txt", {
        "records": len(pseudo),
        "mask_density": float(pseudo.mean()) if len(pseudo) else 0.0,
        "empty_fraction": empty,
    })
    return EXIT_OK


def cmd_train_diffusion(args, cfg: PipelineConfig) -> int:
    pseudo = Manifest.load(_need(args.data, "--data (pseudo-labelled manifest)"))
    model, curve = pipeline.step2_train_conditional_diffusion(pseudo, cfg)
    save_model(args.out / "denoiser.adpt", model)
    gridio.atomic_write_text(args.out / "curve_diffusion.csv", curve.to_csv())
    _emit(args, args.out / "train_diffusion.txt", {"epochs": len(curve.losses), "final_loss": curve.losses[-1]})
    return EXIT_OK


def cmd_sample(args, cfg: PipelineConfig) -> int:
    labels = _manifest(args, cfg, "source")
    pipeline.check_provenance(labels, cfg.source_style)
    model = load_model(_need(args.model, "--model (denoiser)"))
    domain = args.target or cfg.target_styles[0]
    man, images, _ = pipeline.step3_synthesize(model, labels.masks(), cfg.sample_count, cfg, domain, args.out)
    _emit(args, args.out / "sample.txt", {"records": len(man), "mean_intensity": float(images.mean())})
    return EXIT_OK


def cmd_finetune(args, cfg: PipelineConfig) -> int:
    synthetic = Manifest.load(_need(args.data, "--data (synthetic manifest)"))
    seg = load_model(_need(args.model, "--model (source segmenter)"))
    model, curve = pipeline.step4_finetune(seg, synthetic, cfg)
    save_model(args.out / "seg_adapted.adpt", model)
    gridio.atomic_write_text(args.out / "curve_finetune.csv", curve.to_csv())
    _emit(args, args.out / "finetune.txt", {"epochs": len(curve.losses), "final_loss": curve.losses[-1]})
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    test = Manifest.load(_need(args.data, "--data (labelled test manifest)"))
    model = load_model(_need(args.model, "--model (segmenter)"))
    domain = test.records[0].domain if len(test) else cfg.source_style
    x, y = pipeline.prepare(test.images(), domain, cfg), test.masks()
    scores = dice_scores(pipeline.resegment(model, x, cfg.pseudo_threshold), y)
    values = {"n": len(scores), "mean_dice": float(scores.mean())}
    rows = ["id,dice"] + [f"{r.id},{s:.6f}" for r, s in zip(test, scores)]
    if args.baseline:
        base = dice_scores(pipeline.resegment(load_model(args.baseline), x, cfg.pseudo_threshold), y)
        tt = paired_t_test(scores, base)
        values.update(baseline_dice=float(base.mean()), delta_dice=float(scores.mean() - base.mean()),
                      t_statistic=tt.t, p_value=f"{tt.p:.6e}")
        rows = ["id,dice,baseline_dice"] + [
            f"{r.id},{s:.6f},{b:.6f}" for r, s, b in zip(test, scores, base)
        ]
    gridio.atomic_write_text(args.out / "scores.csv", "\n".join(rows) + "\n")
    _emit(args, args.out / "evaluate.txt", values)
    return EXIT_OK


def cmd_run_all(args, cfg: PipelineConfig) -> int:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = args.out / f"{stamp}_seed{cfg.seed}"
    n = 1
    while run_dir.exists():
        n += 1
        run_dir = args.out / f"{stamp}_seed{cfg.seed}_{n}"
    targets = [args.target] if args.target else None
    report = pipeline.run_adaptdiff(cfg, run_dir, targets)
    if not args.quiet:
        print(f"run directory: {run_dir}")
        sys.stdout.write(report.render())
    return EXIT_OK


def cmd_pollute_study(args, cfg: PipelineConfig) -> int:
    from . import plotting

    def progress(fp, fn, result):
        if not args.quiet:
            print(f"r_fp={fp:g} r_fn={fn:g} dice={result.cell(fp, fn):.4f}", flush=True)

    result = pipeline.pollution_study(cfg, _data_root(args, cfg), args.target, progress)
    gridio.atomic_write_text(args.out / "robustness.csv", result.to_csv())
    if result.errors:
        gridio.atomic_write_text(args.out / "robustness_errors.txt",
                                 "".join(f"{k[0]:g},{k[1]:g}: {v}\n" for k, v in result.errors.items()))
    tiles = [result.examples[(fp, fn)] if (fp, fn) in result.examples else np.zeros((cfg.image_size,) * 2)
             for fp in result.fp_rates for fn in result.fn_rates]
    gridio.write_pgm(args.out / "robustness_montage.pgm", _tile(tiles, len(result.fn_rates)))
    try:
        plotting.robustness_heatmap(result, args.out / "robustness.png")
    except Exception as exc:  # noqa: BLE001
        log.warning("heatmap rendering failed: %s", exc)
    return EXIT_OK if result.valid.any() else EXIT_RUNTIME


def _tile(images: list[np.ndarray], cols: int, gap: int = 2) -> np.ndarray:
    h, w = images[0].shape
    rows = -(-len(images) // cols)
    out = np.ones((rows * (h + gap) - gap, cols * (w + gap) - gap))
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        out[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = im
    return out


def cmd_grad_check(args, cfg: PipelineConfig) -> int:
    from .gradcheck import run_grad_checks

    errors = run_grad_checks(seed=cfg.seed)
    values = {f"{k}.max_rel_error": f"{v:.3e}" for k, v in errors.items()}
    values["tolerance"] = f"{GRAD_TOLERANCE:g}"
    values["passed"] = all(v < GRAD_TOLERANCE for v in errors.values())
    _emit(args, args.out / "grad_check.txt", values)
    return EXIT_OK if values["passed"] else EXIT_RUNTIME


def _need(value, what: str):
    if not value:
        raise UsageError(f"missing required option {what}")
    return value


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the phantom suite (source, targets, held-out truth and test splits)"),
    "train-seg": (cmd_train_seg, "train the source segmenter"),
    "pseudo-label": (cmd_pseudo_label, "pseudo-label unlabelled target images"),
    "train-diffusion": (cmd_train_diffusion, "train the mask-conditioned denoiser on pseudo-labels"),
    "sample": (cmd_sample, "synthesize target-style images from source labels"),
    "finetune": (cmd_finetune, "fine-tune a segmenter on synthetic pairs"),
    "evaluate": (cmd_evaluate, "score a segmenter on a labelled test manifest"),
    "run-all": (cmd_run_all, "run every stage end to end and write a report"),
    "pollute-study": (cmd_pollute_study, "label pollution robustness grid"),
    "grad-check": (cmd_grad_check, "finite-difference check of both networks' gradients"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--quiet", action="store_true", help="print nothing except errors")
    common.add_argument("--target", help="target style name (default: from config)")
    common.add_argument("--data", help="input manifest or data directory")
    common.add_argument("--model", help="input checkpoint")
    common.add_argument("--baseline", help="second checkpoint for a paired comparison (evaluate)")
    common.add_argument("--export-pgm", action="store_true", help="also write viewable PGM copies")
    parser = _Parser(prog="adaptdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def _configure_threads() -> None:
    raw = os.environ.get("ADAPTDIFF_THREADS")
    if not raw:
        return
    import torch

    n = int(raw)
    if n < 1:
        raise ConfigError(f"ADAPTDIFF_THREADS must be >= 1, got {raw!r}")
    torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, _ = COMMANDS[args.command]
    try:
        _configure_threads()
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.export_pgm:
            cfg = cfg.replace(export_pgm=True)
        cfg.validate()
        args.out.mkdir(parents=True, exist_ok=True)
        return fn(args, cfg)
    except (UsageError, ConfigError, GridFormatError, pipeline.ProvenanceError, FileNotFoundError) as exc:
        print(f"adaptdiff {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"adaptdiff {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteLossError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"adaptdiff {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
