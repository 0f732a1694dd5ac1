"""Training loop wiring every component together, plus checkpoint round-trips.

Per step: draw an identity-balanced batch, augment each sample (augmented
ones are flagged), encode, pool the pre-selection feature for the
contrastive term against the memory bank, run token selection and blending
for the identity losses, sum everything, backprop, Adam, and finally
refresh the bank with the clean samples in batch order.

All randomness is counter-based from (seed, purpose, epoch, step, sample),
so a run is bit-reproducible and a resumed run draws exactly the batches an
uninterrupted run would have drawn.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import MaskEntry, load_mask_bank, random_erase, cut_paste, roa, synth_masks
from .checkpoint import load_arrays, save_arrays
from .config import RunConfig
from .data import DatasetSplits, IdentitySample, pk_sample, synth_dataset, load_folder
from .model import Model
from .objective import (
    LossReport,
    MemoryBank,
    classification_loss_batch,
    info_nce_rows,
    update_bank,
)
from .optim import AdamState, adam_step, cosine_lr, zero_grads
from .tensor import Tape


def resolve_mask_bank(spec: str, seed: int) -> list[MaskEntry]:
    """'synthetic:<count>' generates a bank; anything else is a directory."""
    if spec.startswith("synthetic:"):
        count = int(spec.split(":", 1)[1])
        derived = int(np.random.default_rng([seed, 13]).integers(2**31))
        return synth_masks(seed=derived, count=count)
    return load_mask_bank(spec)


def build_dataset(cfg: RunConfig) -> DatasetSplits:
    if cfg.data.kind == "synthetic":
        return synth_dataset(
            seed=cfg.seed,
            num_ids=cfg.data.num_ids,
            imgs_per_id=cfg.data.imgs_per_id,
            cams=cfg.data.cams,
            image_h=cfg.encoder.image_h,
            image_w=cfg.encoder.image_w,
        )
    if cfg.data.kind == "folder":
        if not cfg.data.folder:
            raise ValueError("data.kind='folder' needs data.folder")
        samples = load_folder(cfg.data.folder)
        ids = sorted({s.identity for s in samples})
        remap = {old: new for new, old in enumerate(ids)}
        for s in samples:
            s.identity = remap[s.identity]
        # Bring-your-own-data mode trains on everything; queries/gallery come
        # from separate folders via the eval CLI.
        return DatasetSplits(samples, [], [], len(ids), cfg.encoder.image_h, cfg.encoder.image_w)
    raise ValueError(f"unknown data kind '{cfg.data.kind}'")


def init_bank_from_dataset(model: Model, samples: list[IdentitySample], momentum: float) -> MemoryBank:
    """One clean (non-augmented, no-gradient) pass to average per-identity features."""
    feats: dict[int, list[np.ndarray]] = {}
    for s in samples:
        feats.setdefault(s.identity, []).append(model.pooled_feature(s.image))
    from .objective import init_bank

    return init_bank(feats, momentum)


def init_final_bank_from_dataset(model: Model, samples: list[IdentitySample], momentum: float) -> MemoryBank:
    """Same, but over final descriptors (the optional extra contrastive term)."""
    feats: dict[int, list[np.ndarray]] = {}
    for s in samples:
        vec = model.descriptor(s.image)
        vec = vec / np.linalg.norm(vec)
        feats.setdefault(s.identity, []).append(vec.astype(np.float32))
    from .objective import init_bank

    return init_bank(feats, momentum)


def _augment_sample(
    sample: IdentitySample,
    cfg: RunConfig,
    bank_masks: list[MaskEntry],
    rng: np.random.Generator,
) -> tuple[np.ndarray, bool]:
    method = cfg.augmentation
    if method == "none" or rng.random() >= cfg.aug_prob:
        return sample.image, False
    if method == "roa":
        out, _ = roa(sample.image, bank_masks, cfg.roa, rng)
    elif method == "cutpaste":
        out, _ = cut_paste(sample.image, bank_masks, cfg.roa, rng)
    elif method == "re":
        out, _ = random_erase(sample.image, rng, cfg.erase)
    else:
        raise ValueError(f"unknown augmentation '{method}'")
    return out, True


class Trainer:
    """Owns the model, memory bank(s), optimizer state, and the step counter."""

    def __init__(self, cfg: RunConfig, num_identities: int):
        self.cfg = cfg
        self.model = Model(cfg, num_identities, np.random.default_rng([cfg.seed, 5]))
        self.opt = AdamState()
        self.bank: MemoryBank | None = None
        self.final_bank: MemoryBank | None = None
        self.mask_bank: list[MaskEntry] = []
        if cfg.augmentation in ("roa", "cutpaste"):
            self.mask_bank = resolve_mask_bank(cfg.mask_bank, cfg.seed)
        self.global_step = 0
        self.epoch = 0

    def prepare(self, train_samples: list[IdentitySample]) -> None:
        if self.bank is None:
            self.bank = init_bank_from_dataset(self.model, train_samples, self.cfg.bank_momentum)
        if self.cfg.contrastive_after_fbm and self.final_bank is None:
            self.final_bank = init_final_bank_from_dataset(
                self.model, train_samples, self.cfg.bank_momentum
            )

    def steps_per_epoch(self, n_train: int) -> int:
        return max(1, math.ceil(n_train / self.cfg.batch_size))

    def total_steps(self, n_train: int) -> int:
        return self.cfg.epochs * self.steps_per_epoch(n_train)

    def train_step(self, batch: list[IdentitySample], lr: float) -> LossReport:
        cfg = self.cfg
        if self.bank is None:
            raise RuntimeError("bank not initialized; call prepare() first")
        params = self.model.params()
        zero_grads(params)

        images = []
        flags: list[bool] = []
        for i, sample in enumerate(batch):
            rng = np.random.default_rng([cfg.seed, 11, self.epoch, self.global_step, i])
            image, aug_flag = _augment_sample(sample, cfg, self.mask_bank, rng)
            images.append(image)
            flags.append(aug_flag)
        stack = np.stack(images)
        labels = np.array([s.identity for s in batch], dtype=np.int64)
        con_weights = np.where(flags, cfg.aug_contrastive_weight, 1.0)

        with Tape() as tape:
            fwd = self.model.forward_batch(stack, update_head_stats=True)
            fq_values = fwd.f_q.data.copy()
            con_rows = info_nce_rows(fwd.f_q, self.bank, labels, cfg.tau, con_weights)
            if cfg.contrastive_after_fbm:
                norm_final = T.l2_normalize(fwd.f_final)
                ffinal_values = norm_final.data.copy()
                con_rows = T.add(
                    con_rows,
                    info_nce_rows(norm_final, self.final_bank, labels, cfg.tau, con_weights),
                )
            cls_rows, breakdown = classification_loss_batch(
                self.model.heads, fwd.head_features, labels
            )
            batch_loss = T.mean_all(T.add(con_rows, cls_rows))
            tape.backward(batch_loss)

        adam_step(params, self.opt, lr, cfg.weight_decay)
        zero_grads(params)

        for i, sample in enumerate(batch):
            if not flags[i]:
                update_bank(self.bank, sample.identity, fq_values[i])
                if cfg.contrastive_after_fbm and self.final_bank is not None:
                    update_bank(self.final_bank, sample.identity, ffinal_values[i])

        self.global_step += 1
        return LossReport(
            l_con=float(con_rows.data.mean()),
            l_cls=float(cls_rows.data.mean()),
            l_total=batch_loss.item(),
            head_terms=breakdown,
            roa_flags=flags,
        )

    # -- persistence ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for name, p in self.model.params().items():
            arrays["param/" + name] = p.data
        for name, buf in self.model.buffers().items():
            arrays["buffer/" + name] = buf
        if self.bank is not None:
            arrays["bank/vectors"] = self.bank.vectors
            arrays["bank/momentum"] = np.array([self.bank.momentum], dtype=np.float32)
        if self.final_bank is not None:
            arrays["final_bank/vectors"] = self.final_bank.vectors
            arrays["final_bank/momentum"] = np.array([self.final_bank.momentum], dtype=np.float32)
        for name, m in self.opt.m.items():
            arrays["opt/m/" + name] = m
        for name, v in self.opt.v.items():
            arrays["opt/v/" + name] = v
        arrays["opt/step"] = np.array([self.opt.step], dtype=np.float32)
        arrays["trainer/global_step"] = np.array([self.global_step], dtype=np.float32)
        arrays["trainer/epoch"] = np.array([self.epoch], dtype=np.float32)
        return arrays

    def save(self, path) -> None:
        save_arrays(path, self.state_arrays())

    def load(self, path) -> None:
        arrays = load_arrays(path)
        params = self.model.params()
        for name, p in params.items():
            key = "param/" + name
            if key not in arrays:
                raise ValueError(f"checkpoint missing parameter '{name}'")
            if arrays[key].shape != p.data.shape:
                raise ValueError(
                    f"checkpoint shape {arrays[key].shape} != {p.data.shape} for '{name}'"
                )
            p.data = arrays[key].copy()
            p.grad = None
        self.model.load_buffers(
            {k[len("buffer/"):]: v for k, v in arrays.items() if k.startswith("buffer/")}
        )
        if "bank/vectors" in arrays:
            self.bank = MemoryBank(arrays["bank/vectors"], float(arrays["bank/momentum"][0]))
        if "final_bank/vectors" in arrays:
            self.final_bank = MemoryBank(
                arrays["final_bank/vectors"], float(arrays["final_bank/momentum"][0])
            )
        self.opt = AdamState()
        self.opt.step = int(arrays["opt/step"][0])
        for key, val in arrays.items():
            if key.startswith("opt/m/"):
                self.opt.m[key[len("opt/m/"):]] = val.copy()
            elif key.startswith("opt/v/"):
                self.opt.v[key[len("opt/v/"):]] = val.copy()
        self.global_step = int(arrays["trainer/global_step"][0])
        self.epoch = int(arrays["trainer/epoch"][0])


@dataclass
class TrainResult:
    trainer: Trainer
    dataset: DatasetSplits
    loss_rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    seconds: float = 0.0


def train_run(
    cfg: RunConfig,
    dataset: DatasetSplits | None = None,
    out_dir=None,
    epochs: int | None = None,
    trainer: Trainer | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Train for cfg.epochs (or a cap) and optionally write run artifacts.

    Artifacts in out_dir: the effective config, a loss CSV with one row per
    step, and a final checkpoint.
    """
    t0 = time.time()
    if dataset is None:
        dataset = build_dataset(cfg)
    if trainer is None:
        trainer = Trainer(cfg, dataset.num_identities)
        trainer.prepare(dataset.train)
    n_train = len(dataset.train)
    spe = trainer.steps_per_epoch(n_train)
    total = trainer.total_steps(n_train)
    run_epochs = cfg.epochs if epochs is None else epochs

    rows: list[tuple[int, float, float, float]] = []
    start_epoch = trainer.epoch
    for epoch in range(start_epoch, min(start_epoch + run_epochs, cfg.epochs)):
        trainer.epoch = epoch
        for it in range(spe):
            rng = np.random.default_rng([cfg.seed, 7, epoch, it])
            batch = pk_sample(
                dataset.train,
                min(cfg.k_id, dataset.num_identities),
                cfg.k_img,
                rng,
            )
            lr = cosine_lr(cfg.lr, trainer.global_step, total)
            report = trainer.train_step(batch, lr)
            rows.append((trainer.global_step, report.l_con, report.l_cls, report.l_total))
            if verbose:
                print(
                    f"epoch {epoch} step {trainer.global_step}: "
                    f"con {report.l_con:.4f} cls {report.l_cls:.4f} total {report.l_total:.4f}"
                )
        trainer.epoch = epoch + 1

    result = TrainResult(trainer, dataset, rows, time.time() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        write_loss_csv(out / "loss.csv", rows)
        trainer.save(out / "checkpoint.bin")
    return result


def write_loss_csv(path, rows: list[tuple[int, float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_con", "l_cls", "l_total"])
        for step, l_con, l_cls, l_total in rows:
            writer.writerow([step, f"{l_con:.9e}", f"{l_cls:.9e}", f"{l_total:.9e}"])
