"""Training loop, evaluation and checkpointing."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import dcq, ftre
from .config import RunConfig
from .data import MODALITIES, Dataset, iter_batches, read_dataset, score
from .model import FineModel, accon_config, build, compute_losses, loss_weights
from .numcore import NonFiniteError, PrecisionMode

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "l_mp", "l_up", "l_cl", "l_aux", "i_sha", "i_uni", "i_str", "i_utr", "l_recon", "l_total"]


class TrainingError(RuntimeError):
    pass


SCHEDULES = ("constant", "linear", "cosine")


def lr_at(step: int, total_steps: int, peak: float, warmup: float, schedule: str = "constant") -> float:
    """Linear warmup over the first ``warmup`` fraction of steps, then ``schedule``.

    ``linear`` and ``cosine`` decay from the peak towards zero at ``total_steps``.
    """
    warm = max(1, int(round(warmup * total_steps)))
    if step + 1 <= warm or schedule == "constant":
        return peak * min(1.0, (step + 1) / warm)
    frac = (step + 1 - warm) / max(1, total_steps - warm)
    frac = min(1.0, frac)
    if schedule == "linear":
        return peak * (1.0 - frac)
    if schedule == "cosine":
        return peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown lr schedule {schedule!r}; expected one of {SCHEDULES}")


def _shuffle_seed(seed: int, epoch: int):
    return [int(seed), int(epoch)]


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class TrainState:
    epoch: int = 0
    batch_in_epoch: int = 0
    step: int = 0
    epoch_losses: List[float] = field(default_factory=list)


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Optional[Dataset] = None):
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else read_dataset(cfg["data.path"])
        self.dtype = PrecisionMode.parse(cfg["precision"]).dtype
        ds = self.dataset
        self.label_range = ds.label_range
        dims = {m: int(ds.features[m].shape[2]) for m in MODALITIES}
        self.model, self.critics, self.generator = build(cfg, dims, self.label_range, self.dtype)
        self.acc_cfg = accon_config(cfg, self.label_range)
        self.weights = loss_weights(cfg)
        self.opt = torch.optim.AdamW(self.model.parameters(), lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                                     foreach=True)
        self.critic_opt = torch.optim.AdamW(self.critics.parameters(), lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                                     foreach=True)
        self.use_queue = not cfg["disable_dcq"]
        train_labels = ds.labels[ds.splits["train"]]
        self.queue = dcq.QueueState.for_labels(train_labels, self.acc_cfg) if self.use_queue else None
        n_train = len(ds.splits["train"])
        self.steps_per_epoch = math.ceil(n_train / cfg["batch_size"])
        self.total_steps = self.steps_per_epoch * cfg["epochs"]
        self.state = TrainState()
        self.diagnostics: Dict[str, int] = {"queue_updates": 0, "skipped": 0, "empty_pool": 0}

    # --- checkpoints ---------------------------------------------------
    def checkpoint(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "model": self.model.state_dict(),
            "critics": self.critics.state_dict(),
            "opt": self.opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "queue": self.queue.state_dict() if self.queue is not None else None,
            "state": vars(self.state).copy(),
            "rng": self.generator.get_state(),
            "diagnostics": dict(self.diagnostics),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.checkpoint(), path)
        return path

    def restore(self, ckpt: dict) -> None:
        self.model.load_state_dict(ckpt["model"])
        self.critics.load_state_dict(ckpt["critics"])
        self.opt.load_state_dict(ckpt["opt"])
        self.critic_opt.load_state_dict(ckpt["critic_opt"])
        if ckpt["queue"] is not None:
            self.queue = dcq.QueueState.from_state_dict(ckpt["queue"])
        st = ckpt["state"]
        self.state = TrainState(st["epoch"], st["batch_in_epoch"], st["step"], list(st["epoch_losses"]))
        self.generator.set_state(ckpt["rng"])
        self.diagnostics = dict(ckpt["diagnostics"])

    # --- one step --------------------------------------------------------
    def step(self, batch) -> Dict[str, float]:
        cfg = self.cfg
        batch = batch.to(self.dtype)
        lr = lr_at(self.state.step, self.total_steps, cfg["lr"], cfg["warmup"], cfg["lr_schedule"])
        for opt in (self.opt, self.critic_opt):
            for g in opt.param_groups:
                g["lr"] = lr
        if not self.model.training:
            self.model.train()
        out = self.model(batch)
        stats: Dict[str, int] = {}
        try:
            report = compute_losses(self.model, self.critics, out, batch, self.queue, self.acc_cfg,
                                    self.weights, stats)
        except NonFiniteError as exc:
            raise TrainingError(f"step {self.state.step}: {exc}") from exc
        if not torch.isfinite(report.l_total):
            raise TrainingError(f"step {self.state.step}: non-finite total loss {report.as_floats()}")
        self.opt.zero_grad(set_to_none=True)
        report.l_total.backward()

        # critic pass: InfoNCE on detached features; encoder-pass gradients on critics are discarded
        self.critic_opt.zero_grad(set_to_none=True)
        if self.model.ftre_enabled and batch.size >= 2:
            c_loss = ftre.critic_objective(out.feats, out.labels, self.critics)
            c_loss.backward()
            if cfg["grad_clip"] > 0:
                torch.nn.utils.clip_grad_norm_(self.critics.parameters(), cfg["grad_clip"], foreach=True)
            self.critic_opt.step()

        if cfg["grad_clip"] > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg["grad_clip"], foreach=True)
        self.opt.step()

        if self.queue is not None:
            self.queue.update(out.z.detach(), batch.labels)
            self.diagnostics["queue_updates"] += 1
        for k in ("skipped", "empty_pool"):
            self.diagnostics[k] += stats.get(k, 0)
        vals = report.as_floats()
        for k in ("i_sha", "i_uni", "i_str", "i_utr", "l_recon"):
            vals.setdefault(k, 0.0)
        self.state.step += 1
        vals["step"] = self.state.step
        return vals

    # --- loop ---------------------------------------------------------------
    def run(self, out_dir, stop_at_step: Optional[int] = None) -> Path:
        t0 = time.perf_counter()
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True))
        losses_path = out / "losses.csv"
        new_file = not losses_path.exists()
        every = self.cfg["checkpoint_every"]
        with open(losses_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_file:
                writer.writerow(LOSS_COLUMNS)
            while self.state.epoch < self.cfg["epochs"]:
                batches = list(iter_batches(self.dataset, self.cfg["batch_size"],
                                            _shuffle_seed(self.cfg["seed"], self.state.epoch), "train"))
                for batch in batches[self.state.batch_in_epoch:]:
                    vals = self.step(batch)
                    writer.writerow([vals["step"]] + [_fmt(vals[c]) for c in LOSS_COLUMNS[1:]])
                    self.state.epoch_losses.append(vals["l_total"])
                    self.state.batch_in_epoch += 1
                    if every and self.state.step % every == 0:
                        fh.flush()
                        self.save(out / "checkpoints" / f"step_{self.state.step:06d}.pt")
                    if stop_at_step is not None and self.state.step >= stop_at_step:
                        fh.flush()
                        self.save(out / "checkpoints" / "last.pt")
                        return out
                record = {"epoch": self.state.epoch + 1, "step": self.state.step, "split": "val"}
                record.update(self.evaluate("val"))
                record["train_l_total_median"] = statistics.median(self.state.epoch_losses)
                with open(out / "metrics.jsonl", "a") as mf:
                    mf.write(json.dumps(record, sort_keys=True) + "\n")
                log.info("epoch %d: %s", record["epoch"], record)
                self.state.epoch += 1
                self.state.batch_in_epoch = 0
                self.state.epoch_losses = []
                fh.flush()
                self.save(out / "checkpoints" / "last.pt")
        summary = {"test": self.evaluate("test"), "val": self.evaluate("val"),
                   "similarity": self.similarity("test"), "diagnostics": self.diagnostics,
                   "seconds": time.perf_counter() - t0}
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        return out

    # --- evaluation ---------------------------------------------------------
    @torch.no_grad()
    def predict(self, split: str):
        if split not in self.dataset.splits:
            raise KeyError(f"no split named {split!r}")
        self.model.eval()
        preds, labels = [], []
        for batch in iter_batches(self.dataset, 256, None, split):
            batch = batch.to(self.dtype)
            preds.append(self.model(batch).y_hat)
            labels.append(batch.labels)
        return torch.cat(preds).double(), torch.cat(labels).double()

    def evaluate(self, split: str) -> Dict[str, float]:
        pred, label = self.predict(split)
        return score(pred, label)

    @torch.no_grad()
    def similarity(self, split: str) -> Dict[str, float]:
        """Mean same-sample cosine similarity across modality pairs for each task-relevant branch."""
        self.model.eval()
        sims = {"x_str": [], "x_utr": []}
        for batch in iter_batches(self.dataset, 256, None, split):
            out = self.model(batch.to(self.dtype))
            for key in sims:
                for a, b in ftre.modality_pairs(MODALITIES):
                    va, vb = getattr(out.feats[a], key), getattr(out.feats[b], key)
                    sims[key].append(torch.nn.functional.cosine_similarity(va, vb, dim=-1).double())
        res = {k: float(torch.cat(v).mean()) for k, v in sims.items()}
        res["gap"] = res["x_str"] - res["x_utr"]
        return res


RESUMABLE = ("epochs", "checkpoint_every")


def train(cfg: RunConfig, out_dir=None, resume_from=None, stop_at_step: Optional[int] = None,
          dataset: Optional[Dataset] = None) -> Path:
    out_dir = Path(out_dir or cfg["out_dir"])
    if resume_from is not None:
        ckpt = torch.load(resume_from, weights_only=False)
        saved = RunConfig(ckpt["config"])
        # the run's own config wins, except for keys that only extend it
        for k in RESUMABLE:
            saved.set(k, cfg[k])
        trainer = Trainer(saved, dataset)
        trainer.restore(ckpt)
    else:
        trainer = Trainer(cfg, dataset)
    return trainer.run(out_dir, stop_at_step)


def load_trainer(ckpt_path, dataset: Optional[Dataset] = None) -> Trainer:
    ckpt = torch.load(ckpt_path, weights_only=False)
    trainer = Trainer(RunConfig(ckpt["config"]), dataset)
    trainer.restore(ckpt)
    return trainer


def evaluate(ckpt_path, split: str = "test", dataset: Optional[Dataset] = None) -> Dict[str, float]:
    return load_trainer(ckpt_path, dataset).evaluate(split)


def read_losses(path) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def epoch_medians(rows: List[Dict[str, float]], steps_per_epoch: int) -> List[float]:
    vals = [r["l_total"] for r in rows]
    return [float(np.median(vals[i:i + steps_per_epoch])) for i in range(0, len(vals), steps_per_epoch)]
