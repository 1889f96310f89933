"""The four adaptation stages and the end-to-end driver.

1. train a segmenter on labelled source pairs, pseudo-label the target images;
2. train a mask-conditioned denoiser on (target image, pseudo-label) pairs;
3. sample target-looking images conditioned on the *source* labels;
4. fine-tune the segmenter on those synthetic pairs.

Stages talk through :class:`~adaptdiff.gridio.Manifest` objects.  Masks of
target-domain records with provenance ``real`` are ground truth and must never
reach a training stage; :func:`check_provenance` enforces this.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import gridio
from .config import PipelineConfig
from .diffusion import sample as ancestral_sample
from .gridio import Manifest
from .metrics import dice_scores, paired_t_test
from .nets import (
    build_model,
    diffusion_objective,
    load_model,
    save_model,
    segmentation_objective,
    train_epoch,
)
from .phantom import BranchingConfig, get_style, make_pairs
from .preprocess import binarize, prepare_source

log = logging.getLogger(__name__)


class ProvenanceError(RuntimeError):
    """Target ground truth was about to be used for training."""


def check_provenance(manifest: Manifest, source_domain: str) -> None:
    for r in manifest:
        if r.mask is not None and r.provenance == "real" and r.domain != source_domain:
            raise ProvenanceError(
                f"record {r.id!r} carries real {r.domain!r} labels; target truth may not be used for training"
            )


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def _tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[:, None]


def prepare(images: np.ndarray, domain: str, cfg: PipelineConfig) -> np.ndarray:
    """Domain-specific input normalization for the segmenter."""
    if domain != cfg.source_style:
        return np.asarray(images, dtype=np.float32)
    ccfg = cfg.clahe()
    return np.stack([prepare_source(im, ccfg) for im in images]).astype(np.float32)


@dataclass
class Curve:
    name: str
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,lr,loss"] + [
            f"{i + 1},{lr:.8g},{loss:.8f}" for i, (lr, loss) in enumerate(zip(self.lrs, self.losses))
        ]
        return "\n".join(rows) + "\n"


def _fit(model, images, masks, objective, epochs, lr, decay_every, cfg, seed, name) -> Curve:
    if epochs < 1:
        raise ValueError(f"{name}: epochs must be >= 1, got {epochs}")
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=decay_every, gamma=cfg.lr_decay_factor)
    gen = _gen(seed)
    data = (_tensor(images), _tensor(masks))
    curve = Curve(name)
    for epoch in range(epochs):
        lr_now = opt.param_groups[0]["lr"]
        loss = train_epoch(model, data, objective, opt, gen, cfg.batch_size)
        sched.step()
        curve.losses.append(loss)
        curve.lrs.append(lr_now)
        log.debug("%s epoch %d lr %.2e loss %.5f", name, epoch + 1, lr_now, loss)
    return curve


def fit_segmenter(images, masks, cfg: PipelineConfig, *, epochs=None, lr=None, decay_every=None,
                  model=None, seed=None, name="seg"):
    seed = cfg.seed if seed is None else seed
    if model is None:
        torch.manual_seed(seed * 1000 + 11)
        model = build_model(cfg.arch("segmenter"))
    curve = _fit(
        model, images, masks, segmentation_objective(cfg.dice_weight, cfg.ce_weight),
        cfg.epochs_seg if epochs is None else epochs,
        cfg.lr_seg if lr is None else lr,
        cfg.lr_decay_every_seg if decay_every is None else decay_every,
        cfg, seed * 1000 + 12, name,
    )
    return model, curve


def fit_denoiser(images, masks, cfg: PipelineConfig, *, epochs=None, seed=None, name="diffusion"):
    if len(images) == 0:
        raise ValueError("cannot train the denoiser on an empty manifest")
    seed = cfg.seed if seed is None else seed
    torch.manual_seed(seed * 1000 + 21)
    model = build_model(cfg.arch("denoiser"))
    curve = _fit(
        model, images, masks, diffusion_objective(cfg.schedule()),
        cfg.epochs_diffusion if epochs is None else epochs,
        cfg.lr_diffusion, cfg.lr_decay_every_diffusion, cfg, seed * 1000 + 22, name,
    )
    return model, curve


@torch.no_grad()
def segment(model, images: np.ndarray, batch: int = 64) -> np.ndarray:
    model.eval()
    x = _tensor(images).to(model.arch.torch_dtype)
    out = [model(x[i:i + batch]) for i in range(0, len(x), batch)]
    return torch.cat(out)[:, 0].double().numpy() if out else np.zeros((0,) + images.shape[1:])


def resegment(model, images: np.ndarray, threshold: float) -> np.ndarray:
    return binarize(segment(model, images), threshold)


def synthesize(model, masks: np.ndarray, cfg: PipelineConfig, seed: int | None = None) -> np.ndarray:
    if len(masks) == 0:
        return np.zeros((0, cfg.image_size, cfg.image_size), dtype=np.float32)
    seed = cfg.seed if seed is None else seed
    out = ancestral_sample(model, _tensor(masks), cfg.schedule(), _gen(seed * 1000 + 31), cfg.sample_batch)
    return out[:, 0].numpy().astype(np.float32)


# -- data ------------------------------------------------------------------------


def gen_data(cfg: PipelineConfig, out_dir: str | Path) -> dict[str, Manifest]:
    """Phantom suite: labelled source pairs and, per target style, unlabelled
    images plus separately stored truth and a labelled test split."""
    out_dir = Path(out_dir)
    size = cfg.image_size
    branching = BranchingConfig()
    made = {}
    imgs, masks = make_pairs(cfg.seed, cfg.n_source, get_style(cfg.source_style), size, branching, stream=0)
    made["source"] = Manifest.write(out_dir / "source", cfg.source_style, imgs, masks,
                                    export_pgm=cfg.export_pgm)
    for k, name in enumerate(cfg.target_styles):
        style = get_style(name)
        imgs, masks = make_pairs(cfg.seed, cfg.n_target, style, size, branching, stream=1 + k)
        ids = [f"{name}_{i:04d}" for i in range(len(imgs))]
        made[name] = Manifest.write(out_dir / name, name, imgs, None, ids=ids, export_pgm=cfg.export_pgm)
        made[f"{name}_truth"] = Manifest.write(out_dir / f"{name}_truth", name, imgs, masks, ids=ids)
        imgs, masks = make_pairs(cfg.seed, cfg.n_test, style, size, branching, stream=101 + k)
        made[f"{name}_test"] = Manifest.write(out_dir / f"{name}_test", name, imgs, masks,
                                              ids=[f"{name}_test_{i:04d}" for i in range(len(imgs))])
    return made


def data_paths(cfg: PipelineConfig, out_dir: Path) -> Path:
    return Path(cfg.data_dir) if cfg.data_dir else Path(out_dir) / "data"


def split_source(cfg: PipelineConfig, n: int) -> tuple[slice, slice]:
    n_hold = max(1, int(round(n * cfg.source_holdout)))
    return slice(0, n - n_hold), slice(n - n_hold, n)


# -- stages ----------------------------------------------------------------------


def step1_train_source(cfg: PipelineConfig, source: Manifest):
    """Train on the source training split; return (model, curve, held-out Dice)."""
    check_provenance(source, cfg.source_style)
    if cfg.epochs_seg < 1:
        raise ValueError("epochs_seg must be >= 1")
    images = prepare(source.images(), cfg.source_style, cfg)
    masks = source.masks()
    train, hold = split_source(cfg, len(images))
    model, curve = fit_segmenter(images[train], masks[train], cfg, name="seg_source")
    heldout = float(dice_scores(resegment(model, images[hold], cfg.pseudo_threshold), masks[hold]).mean())
    return model, curve, heldout


def step1_pseudo_label(model, target: Manifest, threshold: float, out_dir: Path | None = None,
                       cfg: PipelineConfig | None = None) -> tuple[Manifest, np.ndarray]:
    """Label every target image with the source segmenter; any stored masks are ignored."""
    domain = target.records[0].domain if len(target) else "target"
    images = target.images() if len(target) else np.zeros((0, 1, 1))
    if cfg is not None:
        images = prepare(images, domain, cfg)
    size = getattr(model, "image_size", None)
    if len(images) and size is not None and images.shape[-2:] != (size, size):
        raise ValueError(f"target resolution {images.shape[-2:]} != model resolution {size}")
    probs = segment(model, images)
    pseudo = binarize(probs, threshold) if len(images) else np.zeros((0,) + images.shape[1:], np.uint8)
    empty = float(np.mean(pseudo.reshape(len(pseudo), -1).sum(1) == 0)) if len(pseudo) else 0.0
    if empty > 0.5:
        log.warning("%.0f%% of pseudo-labels for %s are empty", 100 * empty, domain)
    ids = [r.id for r in target]
    if out_dir is None:
        man = Manifest(Path("."), [
            gridio.Record(r.id, r.image, None, domain, "pseudo") for r in target
        ])
    else:
        man = Manifest.write(out_dir, domain, images, pseudo, provenance="pseudo", ids=ids)
    return man, pseudo


def step2_train_conditional_diffusion(pseudo: Manifest, cfg: PipelineConfig, source_domain: str | None = None):
    if len(pseudo) == 0:
        raise ValueError("pseudo-labelled manifest is empty")
    check_provenance(pseudo, source_domain or cfg.source_style)
    domain = pseudo.records[0].domain
    return fit_denoiser(pseudo.images(), pseudo.masks(), cfg, name=f"diffusion_{domain}")


def step3_synthesize(denoiser, labels: np.ndarray, count: int | None, cfg: PipelineConfig,
                     domain: str, out_dir: Path | None = None, seed: int | None = None):
    """One sample per selected source label; returns (manifest or None, images, masks)."""
    count = len(labels) if count is None else min(int(count), len(labels))
    masks = np.asarray(labels[:count], dtype=np.uint8)
    images = synthesize(denoiser, masks, cfg, seed)
    man = None
    if out_dir is not None:
        man = Manifest.write(out_dir, domain, images, masks, provenance="synthetic",
                             ids=[f"{domain}_syn_{i:04d}" for i in range(count)], export_pgm=cfg.export_pgm)
    return man, images, masks


def step4_finetune(seg, synthetic: Manifest, cfg: PipelineConfig, extra=None):
    """Fine-tune a copy of ``seg`` on the synthetic pairs (all parameters trainable)."""
    if len(synthetic) == 0:
        raise ValueError("synthetic manifest is empty")
    check_provenance(synthetic, cfg.source_style)
    images, masks = synthetic.images(), synthetic.masks()
    if extra is not None:
        images = np.concatenate([images, extra[0]])
        masks = np.concatenate([masks, extra[1]])
    model = copy.deepcopy(seg)
    domain = synthetic.records[0].domain
    model, curve = fit_segmenter(
        images, masks, cfg, epochs=cfg.epochs_finetune, lr=cfg.lr_finetune,
        decay_every=cfg.lr_decay_every_finetune, model=model, seed=cfg.seed + 1,
        name=f"finetune_{domain}",
    )
    return model, curve


def train_oracle(truth: Manifest, cfg: PipelineConfig):
    """Segmenter trained directly on real target pairs; evaluation use only."""
    domain = truth.records[0].domain
    return fit_segmenter(prepare(truth.images(), domain, cfg), truth.masks(), cfg,
                         epochs=cfg.epochs_oracle, seed=cfg.seed + 2, name=f"oracle_{domain}")


def pollution_study(cfg: PipelineConfig, data_dir: str | Path, target: str | None = None, progress=None):
    """Label-pollution grid on one target style; generates its data if absent.

    Returns the :class:`~adaptdiff.metrics.RobustnessGridResult`.
    """
    from .metrics import robustness_study

    name = target or cfg.grid_target
    data_dir = Path(data_dir)
    if not (data_dir / f"{name}_truth").exists():
        gen_data(cfg.replace(target_styles=(name,)), data_dir)
    truth = Manifest.load(data_dir / f"{name}_truth")
    test = Manifest.load(data_dir / f"{name}_test")
    oracle, _ = train_oracle(truth, cfg)
    images = prepare(truth.images()[:cfg.n_grid_train], name, cfg)
    masks = truth.masks()[:cfg.n_grid_train]
    eval_masks = test.masks()[:cfg.n_grid_eval]
    return robustness_study(images, masks, eval_masks, oracle, cfg, progress=progress)


# -- end to end ------------------------------------------------------------------


@dataclass
class TargetResult:
    name: str
    baseline: np.ndarray
    adapted: np.ndarray
    oracle: np.ndarray
    fidelity: np.ndarray
    ttest: object
    pseudo_density: float
    pseudo_empty: float
    pseudo_dice: float
    truth_density: float
    test_ids: list[str]


@dataclass
class Report:
    cfg: PipelineConfig
    source_heldout_dice: float
    source_density: float
    targets: list[TargetResult]
    curves: list[Curve]
    artifacts: dict[str, str]
    timings: dict[str, float] = field(default_factory=dict)

    def render(self) -> str:
        """``key: value`` lines; contains no timestamps or absolute paths."""
        out = [
            f"seed: {self.cfg.seed}",
            f"image_size: {self.cfg.image_size}",
            f"T: {self.cfg.T}",
            f"beta_start: {self.cfg.beta_start:g}",
            f"beta_end: {self.cfg.beta_end:g}",
            f"source.style: {self.cfg.source_style}",
            f"source.heldout_dice: {self.source_heldout_dice:.6f}",
            f"source.mask_density: {self.source_density:.6f}",
        ]
        for t in self.targets:
            p = t.name
            out += [
                f"{p}.n_test: {len(t.baseline)}",
                f"{p}.baseline_dice: {t.baseline.mean():.6f}",
                f"{p}.adapted_dice: {t.adapted.mean():.6f}",
                f"{p}.delta_dice: {t.adapted.mean() - t.baseline.mean():.6f}",
                f"{p}.t_statistic: {t.ttest.t:.6f}",
                f"{p}.p_value: {t.ttest.p:.6e}",
                f"{p}.oracle_dice: {t.oracle.mean():.6f}",
                f"{p}.sample_fidelity_dice: {t.fidelity.mean():.6f}",
                f"{p}.pseudo_label_dice: {t.pseudo_dice:.6f}",
                f"{p}.pseudo_mask_density: {t.pseudo_density:.6f}",
                f"{p}.pseudo_empty_fraction: {t.pseudo_empty:.6f}",
                f"{p}.truth_mask_density: {t.truth_density:.6f}",
            ]
        for k in sorted(self.artifacts):
            out.append(f"artifact.{k}: {self.artifacts[k]}")
        return "\n".join(out) + "\n"


def _density(masks: np.ndarray) -> float:
    return float(np.asarray(masks, dtype=np.float64).mean()) if len(masks) else 0.0


def run_adaptdiff(cfg: PipelineConfig, run_dir: str | Path, targets=None) -> Report:
    """Execute all four stages per target and write the report under ``run_dir``."""
    from . import plotting

    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    targets = list(targets or cfg.target_styles)
    timings: dict[str, float] = {}
    artifacts: dict[str, str] = {}
    curves: list[Curve] = []

    tick = time.perf_counter()
    data_dir = data_paths(cfg, run_dir)
    if not cfg.data_dir:
        gen_data(cfg.replace(target_styles=tuple(targets)), data_dir)
    source = Manifest.load(data_dir / "source")
    timings["data"] = time.perf_counter() - tick

    tick = time.perf_counter()
    seg, curve, heldout = step1_train_source(cfg, source)
    curves.append(curve)
    save_model(run_dir / "models" / "seg_source.adpt", seg)
    artifacts["seg_source"] = "models/seg_source.adpt"
    timings["step1"] = time.perf_counter() - tick
    source_masks = source.masks()

    results = []
    for name in targets:
        tick = time.perf_counter()
        target = Manifest.load(data_dir / name)
        pseudo_man, pseudo = step1_pseudo_label(seg, target, cfg.pseudo_threshold, run_dir / "pseudo" / name, cfg)
        artifacts[f"pseudo_{name}"] = f"pseudo/{name}/manifest.tsv"

        denoiser, dcurve = step2_train_conditional_diffusion(pseudo_man, cfg)
        curves.append(dcurve)
        save_model(run_dir / "models" / f"denoiser_{name}.adpt", denoiser)
        artifacts[f"denoiser_{name}"] = f"models/denoiser_{name}.adpt"

        syn_man, syn_images, syn_masks = step3_synthesize(
            denoiser, source_masks, cfg.sample_count, cfg, name, run_dir / "synthetic" / name
        )
        artifacts[f"synthetic_{name}"] = f"synthetic/{name}/manifest.tsv"

        extra = None
        if cfg.finetune_mix_source:
            extra = (prepare(source.images(), cfg.source_style, cfg), source_masks)
        adapted, fcurve = step4_finetune(seg, syn_man, cfg, extra)
        curves.append(fcurve)
        save_model(run_dir / "models" / f"seg_adapted_{name}.adpt", adapted)
        artifacts[f"seg_adapted_{name}"] = f"models/seg_adapted_{name}.adpt"

        # evaluation only from here on: ground truth is read
        truth = Manifest.load(data_dir / f"{name}_truth")
        test = Manifest.load(data_dir / f"{name}_test")
        test_x = prepare(test.images(), name, cfg)
        test_y = test.masks()
        oracle, ocurve = train_oracle(truth, cfg)
        curves.append(ocurve)
        baseline = dice_scores(resegment(seg, test_x, cfg.pseudo_threshold), test_y)
        adapted_scores = dice_scores(resegment(adapted, test_x, cfg.pseudo_threshold), test_y)
        oracle_scores = dice_scores(resegment(oracle, test_x, cfg.pseudo_threshold), test_y)
        fidelity = dice_scores(resegment(oracle, syn_images, cfg.pseudo_threshold), syn_masks)
        truth_masks = truth.masks()
        results.append(TargetResult(
            name, baseline, adapted_scores, oracle_scores, fidelity,
            paired_t_test(adapted_scores, baseline),
            _density(pseudo), float(np.mean(pseudo.reshape(len(pseudo), -1).sum(1) == 0)),
            float(dice_scores(pseudo, truth_masks).mean()), _density(truth_masks),
            [r.id for r in test],
        ))
        timings[name] = time.perf_counter() - tick
        log.info("%s: baseline %.4f adapted %.4f", name, baseline.mean(), adapted_scores.mean())

    report = Report(cfg, heldout, _density(source_masks), results, curves, artifacts, timings)
    write_report(report, run_dir)
    try:
        plotting.render_run(report, run_dir, syn_preview={r.name: run_dir / "synthetic" / r.name for r in results})
    except Exception as exc:  # noqa: BLE001 - figures are a convenience
        log.warning("figure rendering failed: %s", exc)
    return report


def write_report(report: Report, run_dir: Path) -> None:
    run_dir = Path(run_dir)
    for c in report.curves:
        gridio.atomic_write_text(run_dir / "curves" / f"{c.name}.csv", c.to_csv())
        report.artifacts.setdefault(f"curve_{c.name}", f"curves/{c.name}.csv")
    for t in report.targets:
        rows = ["id,baseline_dice,adapted_dice"] + [
            f"{i},{b:.6f},{a:.6f}" for i, b, a in zip(t.test_ids, t.baseline, t.adapted)
        ]
        gridio.atomic_write_text(run_dir / f"scores_{t.name}.csv", "\n".join(rows) + "\n")
        report.artifacts.setdefault(f"scores_{t.name}", f"scores_{t.name}.csv")
    gridio.atomic_write_text(run_dir / "config.txt", report.cfg.dumps())
    gridio.atomic_write_text(run_dir / "report.txt", report.render())
    timing = "\n".join(f"{k}: {v:.1f}" for k, v in report.timings.items()) + "\n"
    gridio.atomic_write_text(run_dir / "timings.txt", timing)


def load_segmenter(path):
    return load_model(path)
