"""Joint contrastive + captioning training loop and the loss-weight sweep.

One step: encode both modalities with the frozen trunks, project and
normalize into the shared space, take the in-batch contrastive loss, run
the decoder with teacher forcing for the captioning cross-entropy, and
combine as total = contrastive + lambda * captioning. Only trainable
parameters update; the schedule is cosine over the epoch horizon.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import info_nce, project_and_normalize
from .autodiff import AdamW, no_grad
from .errors import ConfigError, NumericAbort
from .model import CaptionModel, ModelConfig
from .pointcloud import PointCloud, load_scene
from .text_encoder import BOS, EOS, CaptionSequence, Vocabulary, build_vocab
from .decoder import DecodeParams

REQUIRED_CONFIG_KEYS = (
    "lambda", "batch_size", "epochs", "lr", "seed", "d_model", "n_layers",
    "m_task", "k_neighbors", "m_patches", "loss_reduction",
)


@dataclass
class TrainConfig:
    lambda_: float = 1.0
    batch_size: int = 8
    epochs: int = 10
    lr: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 0      # epochs between checkpoints; 0 = final only
    loss_reduction: str = "mean"
    weight_decay: float = 0.0         # decoupled decay; off so zero-grad params hold still
    symmetric_contrastive: bool = False

    def __post_init__(self):
        if self.lambda_ < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lambda must be >= 0 and batch size/epochs >= 1")


# Learning rate reported in the source experiments; kept as a named constant
# because it is far outside the range that converges at this scale.
PAPER_LR = 0.1


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    HEADER = "step,l_con,l_cap,l_total,lr,wall_ms"

    def append(self, step: int, l_con: float, l_cap: float, l_total: float,
               lr: float, wall_ms: float) -> None:
        self.records.append({"step": step, "l_con": l_con, "l_cap": l_cap,
                             "l_total": l_total, "lr": lr, "wall_ms": wall_ms})

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.HEADER + "\n")
            for r in self.records:
                fh.write(f"{r['step']},{r['l_con']!r},{r['l_cap']!r},"
                         f"{r['l_total']!r},{r['lr']!r},{r['wall_ms']:.3f}\n")


def make_optimizer(model: CaptionModel, tc: TrainConfig) -> AdamW:
    return AdamW(model.trainable_parameters(), lr=tc.lr,
                 weight_decay=tc.weight_decay, schedule_epochs=tc.epochs)


def batch_losses(model: CaptionModel, batch: list[tuple[PointCloud, CaptionSequence]],
                 tc: TrainConfig):
    """Forward pass over a batch; returns (contrastive, captioning) loss tensors."""
    if not batch:
        raise ValueError("training batch is empty")
    pairs = []
    cap_losses = []
    for cloud, caption in batch:
        scene = model.scene_encoder.encode_scene(cloud)
        text = model.text_encoder.encode(caption.ids)
        pairs.append(project_and_normalize(scene.vector, text, model.heads))
        input_ids = [BOS] + caption.ids
        target_ids = caption.ids + [EOS]
        logits = model.decoder.forward(input_ids, scene)
        cap_losses.append(model.decoder.loss(logits, target_ids, tc.loss_reduction))
    l_con = info_nce(pairs, model.heads.tau_tensor(), tc.symmetric_contrastive)
    l_cap = cap_losses[0]
    for extra in cap_losses[1:]:
        l_cap = l_cap + extra
    l_cap = l_cap * (1.0 / len(cap_losses))
    return l_con, l_cap


def train_step(model: CaptionModel, batch, optimizer: AdamW, tc: TrainConfig,
               epoch: float, step_index: int = 0):
    """One optimizer update; returns (l_con, l_cap, l_total) as floats."""
    l_con, l_cap = batch_losses(model, batch, tc)
    if not math.isfinite(l_con.item()):
        raise NumericAbort(f"non-finite contrastive loss (Con) at step {step_index}")
    if not math.isfinite(l_cap.item()):
        raise NumericAbort(f"non-finite captioning loss (Cap) at step {step_index}")
    l_total = l_con + tc.lambda_ * l_cap
    optimizer.zero_grad()
    l_total.backward()
    optimizer.step(epoch=epoch)
    return l_con.item(), l_cap.item(), l_total.item()


def fit(model: CaptionModel, dataset: list[tuple[PointCloud, CaptionSequence]],
        tc: TrainConfig, out_dir=None, vocab_path=None) -> TrainLog:
    """Seeded epoch loop with cosine learning-rate annealing and checkpointing."""
    if not dataset:
        raise ValueError("dataset must contain at least one pair")
    optimizer = make_optimizer(model, tc)
    rng = np.random.default_rng(tc.seed)
    log = TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    step = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(dataset), tc.batch_size):
            batch = [dataset[i] for i in order[lo:lo + tc.batch_size]]
            t0 = time.perf_counter()
            l_con, l_cap, l_total = train_step(model, batch, optimizer, tc,
                                               epoch=epoch, step_index=step)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            log.append(step, l_con, l_cap, l_total,
                       optimizer.current_lr(epoch), wall_ms)
            step += 1
        if out is not None and tc.checkpoint_interval and \
                (epoch + 1) % tc.checkpoint_interval == 0:
            model.save(out / f"epoch{epoch + 1}.ckpt", vocab_path=vocab_path)
    if out is not None:
        model.save(out / "model.ckpt", vocab_path=vocab_path)
        log.save(out / "trainlog.csv")
    return log


# ----------------------------------------------------------------------
# dataset and config-file handling
# ----------------------------------------------------------------------
def load_dataset(data_dir, vocab: Vocabulary | None = None,
                 min_count: int = 1):
    """Scene/caption pairs from a directory of annotated scene files.

    Every reference caption of every annotated object yields one pair.
    When no vocabulary is supplied one is built from all captions seen.
    """
    paths = sorted(Path(data_dir).glob("*.json")) + sorted(Path(data_dir).glob("*.pcv2"))
    scenes = [load_scene(p) for p in paths]
    texts = [cap for s in scenes for obj in s.objects for cap in obj.reference_captions]
    if not texts:
        raise ValueError(f"no captions found under {data_dir}")
    if vocab is None:
        vocab = build_vocab(texts, min_count=min_count)
    pairs = []
    for scene in scenes:
        for obj in scene.objects:
            for cap in obj.reference_captions:
                pairs.append((scene, CaptionSequence.from_text(cap, vocab)))
    return pairs, vocab


_CONFIG_TYPES = {
    "lambda": float, "batch_size": int, "epochs": int, "lr": float, "seed": int,
    "d_model": int, "n_layers": int, "m_task": int, "k_neighbors": int,
    "m_patches": int, "loss_reduction": str,
    # optional extras
    "weight_decay": float, "checkpoint_interval": int, "d_patch": int,
    "d_shared": int, "n_heads": int, "text_layers": int, "max_len": int,
    "feature_dim": int, "freeze_seed": int, "init_seed": int, "pool": str,
    "min_count": int, "symmetric_contrastive": int, "tau_init": float,
}


def parse_config(path) -> dict:
    """Flat `key = value` file with `#` comments; all required keys checked."""
    values: dict = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        try:
            values[key] = _CONFIG_TYPES[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from exc
    for key in REQUIRED_CONFIG_KEYS:
        if key not in values:
            raise ConfigError(f"config missing required key '{key}'")
    return values


def configs_from_values(values: dict) -> tuple[ModelConfig, TrainConfig]:
    model_keys = {f.name for f in ModelConfig.__dataclass_fields__.values()}
    mc_kwargs = {k: v for k, v in values.items() if k in model_keys}
    if "n_layers" in values:
        mc_kwargs["n_layers"] = values["n_layers"]
    mc = ModelConfig(**mc_kwargs)
    tc = TrainConfig(
        lambda_=values["lambda"], batch_size=values["batch_size"],
        epochs=values["epochs"], lr=values["lr"], seed=values["seed"],
        checkpoint_interval=values.get("checkpoint_interval", 0),
        loss_reduction=values["loss_reduction"],
        weight_decay=values.get("weight_decay", 0.0),
        symmetric_contrastive=bool(values.get("symmetric_contrastive", 0)),
    )
    return mc, tc


def lambda_sweep(make_model, dataset, lambdas: list[float], eval_set,
                 tc: TrainConfig) -> list[dict]:
    """Train one model per loss weight and score each on the eval set.

    ``make_model`` builds a fresh model (shared seed lives inside it);
    ``eval_set`` is a list of (PointCloud, references, scene_vocab) items.
    Rows mirror the sweep table: lambda, C/B-4/M/R at IoU 0.25.
    """
    from .metrics import CorpusItem, evaluate_corpus

    if not lambdas:
        raise ValueError("lambda sweep needs at least one value")
    rows = []
    for lam in lambdas:
        model = make_model()
        cfg = TrainConfig(lambda_=lam, batch_size=tc.batch_size, epochs=tc.epochs,
                          lr=tc.lr, seed=tc.seed, loss_reduction=tc.loss_reduction,
                          weight_decay=tc.weight_decay,
                          symmetric_contrastive=tc.symmetric_contrastive)
        fit(model, dataset, cfg)
        items = []
        with no_grad():
            for cloud, references, scene_vocab in eval_set:
                scene = model.scene_encoder.encode_scene(cloud)
                cap = model.decoder.decode(scene, DecodeParams(strategy="greedy"),
                                           model.vocab)
                items.append(CorpusItem(candidate=cap.text, references=references,
                                        pred_box=None, gt_box=None,
                                        scene_vocab=set(scene_vocab)))
        report = evaluate_corpus(items, thresholds=(0.25,), oracle_boxes=True)
        rows.append({
            "lambda": lam,
            "C@0.25": report["metrics"]["C@0.25"],
            "B-4@0.25": report["metrics"]["B4@0.25"],
            "M@0.25": report["metrics"]["M@0.25"],
            "R@0.25": report["metrics"]["R@0.25"],
        })
    return rows


def sweep_table(rows: list[dict]) -> str:
    header = "lambda\tC@0.25\tB-4@0.25\tM@0.25\tR@0.25"
    lines = [header]
    for r in rows:
        lines.append(f"{r['lambda']}\t{r['C@0.25']:.4f}\t{r['B-4@0.25']:.4f}"
                     f"\t{r['M@0.25']:.4f}\t{r['R@0.25']:.4f}")
    return "\n".join(lines)
