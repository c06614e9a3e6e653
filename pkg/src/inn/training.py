"""Optimization loop: AdamW, one-cycle schedule, clipping, checkpoints,
and the ablation harness over communication modes.

Reproducibility contract: the batch order, the dropout stream, and the
learning rate are pure functions of (training seed, step index), and the
optimizer state round-trips bit-exactly through checkpoints. Resuming from a
checkpoint therefore reproduces the uninterrupted metric trace.
"""

from __future__ import annotations

import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np

from . import archive
from . import tensor as T
from .data import CorpusSplit, batchify, bpc, evaluate_nll
from .errors import CheckpointError, ContractError, TrainingDiverged
from .model import InnConfig, InnModel, inn_forward, mamba_stack_config
from .tensor import GradTape, Tensor, backward, cross_entropy, zero_grads

# Seed-material tags so the per-step RNG streams never collide.
_PERM_TAG = 7919
_DROP_TAG = 104729


@dataclass
class SchedulerConfig:
    max_lr: float = 4e-4
    total_steps: int = 3000
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ContractError(f"warmup_frac must be in (0,1), got {self.warmup_frac}")
        if self.div_factor <= 1.0 or self.final_div_factor <= 1.0:
            raise ContractError("div factors must exceed 1")


def onecycle_lr(step: int, cfg: SchedulerConfig) -> float:
    """Linear ramp to max_lr, then cosine decay; clamps outside [0, total]."""
    step = min(max(step, 0), cfg.total_steps)
    warmup = cfg.warmup_frac * cfg.total_steps
    start = cfg.max_lr / cfg.div_factor
    final = cfg.max_lr / cfg.final_div_factor
    if step <= warmup:
        frac = step / warmup if warmup > 0 else 1.0
        return start + (cfg.max_lr - start) * frac
    frac = (step - warmup) / (cfg.total_steps - warmup)
    return final + (cfg.max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step_count: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1

    @classmethod
    def init(cls, params: "OrderedDict[str, Tensor]", weight_decay: float = 0.1,
             betas=(0.9, 0.999), eps: float = 1e-8) -> "OptimizerState":
        return cls(
            m=OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items()),
            v=OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items()),
            step_count=0, betas=tuple(betas), eps=eps, weight_decay=weight_decay)


def adamw_step(params: "OrderedDict[str, Tensor]",
               grads: "dict[str, np.ndarray]",
               state: OptimizerState, lr: float,
               decay_mask: "dict[str, bool] | None" = None) -> None:
    """Decoupled weight decay, then a bias-corrected Adam update, in place."""
    state.step_count += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        if decay_mask is None or decay_mask.get(name, True):
            if state.weight_decay:
                p.data -= (lr * state.weight_decay) * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: "dict[str, np.ndarray]", max_norm: float = 1.0) -> float:
    """Scale all grads so the global L2 norm is at most max_norm; returns the
    pre-clip norm."""
    sq = 0.0
    for g in grads.values():
        sq += float(np.vdot(g, g))
    total = math.sqrt(sq)
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


@dataclass
class TrainConfig:
    """Protocol defaults: AdamW at 4e-4 peak with one-cycle schedule and
    global-norm clipping at 1.0."""

    max_lr: float = 4e-4
    total_steps: int = 3000
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    batch_size: int = 16
    window: int = 128
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eval_interval: int = 200
    eval_batches: int = 8
    checkpoint_interval: int = 1000
    seed: int = 0
    early_stop_train_bpc: float | None = None

    def scheduler(self) -> SchedulerConfig:
        return SchedulerConfig(max_lr=self.max_lr, total_steps=self.total_steps,
                               warmup_frac=self.warmup_frac,
                               div_factor=self.div_factor,
                               final_div_factor=self.final_div_factor)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown train config keys: {sorted(extra)}")
        if "betas" in d:
            d = dict(d, betas=tuple(d["betas"]))
        return cls(**d)


@dataclass
class MetricRecord:
    step: int
    lr: float
    train_bpc: float
    valid_bpc: float
    grad_norm: float

    def as_row(self) -> np.ndarray:
        return np.asarray([self.step, self.lr, self.train_bpc,
                           self.valid_bpc, self.grad_norm], dtype=np.float32)

    @classmethod
    def from_row(cls, row: np.ndarray) -> "MetricRecord":
        return cls(step=int(row[0]), lr=float(row[1]), train_bpc=float(row[2]),
                   valid_bpc=float(row[3]), grad_norm=float(row[4]))


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(path: str, model: InnModel, opt: OptimizerState, step: int,
                    metrics: list[MetricRecord]) -> None:
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    cfg_json = model.config.canonical_json()
    entries["meta/config_json"] = archive.encode_text(cfg_json)
    entries["meta/config_hash"] = archive.encode_text(model.config.config_hash())
    entries["meta/zero_identity"] = np.asarray(
        [0.0 if model.neuron_embeddings.requires_grad else 1.0], dtype=np.float32)
    entries["meta/step"] = np.asarray([step], dtype=np.float32)
    entries["meta/opt_step"] = np.asarray([opt.step_count], dtype=np.float32)
    entries["meta/opt_hparams"] = np.asarray(
        [opt.betas[0], opt.betas[1], opt.eps, opt.weight_decay], dtype=np.float32)
    if metrics:
        entries["meta/metrics"] = np.stack([r.as_row() for r in metrics])
    else:
        entries["meta/metrics"] = np.zeros((0, 5), dtype=np.float32)
    for name, t in model.named_parameters(trainable_only=False).items():
        entries[f"p/{name}"] = t.data.astype(np.float32, copy=False)
    for name, arr in opt.m.items():
        entries[f"m/{name}"] = arr
    for name, arr in opt.v.items():
        entries[f"v/{name}"] = arr
    archive.save_tensors(path, entries)


def load_checkpoint(path: str, expected_config: InnConfig | None = None,
                    override_config_mismatch: bool = False
                    ) -> tuple[InnModel, OptimizerState, int, list[MetricRecord]]:
    entries = archive.load_tensors(path)
    try:
        cfg_json = archive.decode_text(entries["meta/config_json"])
        stored_hash = archive.decode_text(entries["meta/config_hash"])
    except KeyError as e:
        raise CheckpointError(f"{path}: missing checkpoint entry {e}") from None
    config = InnConfig.from_dict(json.loads(cfg_json))
    if config.config_hash() != stored_hash:
        raise CheckpointError(f"{path}: stored config hash does not match its "
                              f"own config payload")
    if expected_config is not None and \
            expected_config.config_hash() != stored_hash and \
            not override_config_mismatch:
        raise CheckpointError(
            f"{path}: checkpoint config hash {stored_hash[:12]}... does not "
            f"match the requested config "
            f"{expected_config.config_hash()[:12]}...; pass override to force")
    zero_identity = bool(entries["meta/zero_identity"][0] > 0.5)
    model = InnModel.init(config, zero_identity=zero_identity)
    state = {name: entries[f"p/{name}"]
             for name in model.named_parameters(trainable_only=False)}
    model.load_state(state)
    params = model.named_parameters()
    hp = entries["meta/opt_hparams"]
    opt = OptimizerState(
        m=OrderedDict((k, entries[f"m/{k}"].copy()) for k in params),
        v=OrderedDict((k, entries[f"v/{k}"].copy()) for k in params),
        step_count=int(entries["meta/opt_step"][0]),
        betas=(float(hp[0]), float(hp[1])), eps=float(hp[2]),
        weight_decay=float(hp[3]))
    step = int(entries["meta/step"][0])
    metrics = [MetricRecord.from_row(r) for r in entries["meta/metrics"]]
    return model, opt, step, metrics


# -- the loop -------------------------------------------------------------------


def _batch_for_step(batches: list, step: int, seed: int):
    epoch, offset = divmod(step, len(batches))
    perm = np.random.default_rng([seed, _PERM_TAG, epoch]).permutation(len(batches))
    return batches[int(perm[offset])]


def train(model: InnModel, corpus: CorpusSplit, cfg: TrainConfig,
          out_dir: str | None = None, opt: OptimizerState | None = None,
          start_step: int = 0,
          metrics: list[MetricRecord] | None = None) -> list[MetricRecord]:
    """Run the optimization loop; returns the metric history.

    Pass `opt`, `start_step`, and `metrics` from a loaded checkpoint to
    resume. Raises TrainingDiverged on a non-finite loss, referencing the
    last checkpoint written.
    """
    sched = cfg.scheduler()
    params = model.named_parameters()
    decay_mask = {name: InnModel.decays(name) for name in params}
    if opt is None:
        opt = OptimizerState.init(params, weight_decay=cfg.weight_decay,
                                  betas=cfg.betas, eps=cfg.eps)
    metrics = list(metrics) if metrics else []
    batches = batchify(corpus.train_ids, cfg.batch_size, cfg.window)
    can_eval = len(corpus.valid_ids) >= cfg.batch_size * (cfg.window + 1)

    jsonl = None
    last_ckpt: str | None = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        jsonl = open(os.path.join(out_dir, "metrics.jsonl"), "a")

    def write_ckpt(step_done: int) -> str:
        path = os.path.join(out_dir, f"ckpt_{step_done:07d}.innt")
        save_checkpoint(path, model, opt, step_done, metrics)
        return path

    try:
        for step in range(start_step, cfg.total_steps):
            lr = onecycle_lr(step, sched)
            batch = _batch_for_step(batches, step, cfg.seed)
            drop_rng = np.random.default_rng([cfg.seed, _DROP_TAG, step])
            with GradTape():
                logits, _ = inn_forward(batch.inputs, model, training=True,
                                        rng=drop_rng)
                loss = cross_entropy(logits, batch.targets)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise TrainingDiverged(step, last_ckpt)
                backward(loss)
            grads = {name: t.grad for name, t in params.items()}
            grad_norm = clip_grad_norm(grads, cfg.clip_norm)
            adamw_step(params, grads, opt, lr, decay_mask)
            zero_grads(params.values())

            done = step + 1
            train_bpc = bpc(loss_val)
            stop = (cfg.early_stop_train_bpc is not None
                    and train_bpc < cfg.early_stop_train_bpc)
            if done % cfg.eval_interval == 0 or done == cfg.total_steps or stop:
                if can_eval:
                    valid = bpc(evaluate_nll(model, corpus.valid_ids,
                                             cfg.batch_size, cfg.window,
                                             max_batches=cfg.eval_batches))
                else:
                    valid = float("nan")
                rec = MetricRecord.from_row(MetricRecord(
                    step=done, lr=lr, train_bpc=train_bpc, valid_bpc=valid,
                    grad_norm=grad_norm).as_row())
                metrics.append(rec)
                if jsonl:
                    jsonl.write(json.dumps(asdict(rec)) + "\n")
                    jsonl.flush()
            if out_dir and (done % cfg.checkpoint_interval == 0
                            or done == cfg.total_steps or stop):
                last_ckpt = write_ckpt(done)
            if stop:
                break
    finally:
        if jsonl:
            jsonl.close()
    return metrics


# -- ablation harness -----------------------------------------------------------


ABLATION_VARIANTS = [
    ("INN Standard (Full)", "learned", False),
    ("Mamba Stack (Baseline)", "stack", True),
    ("No-Communication", "none", False),
    ("Static-Communication", "static", False),
]


def run_ablation(corpus: CorpusSplit, base_cfg: InnConfig, train_cfg: TrainConfig,
                 seeds: list[int] | None = None,
                 out_dir: str | None = None) -> list[dict]:
    """Train all four variants under identical budgets and seeds.

    Returns one summary row per variant with per-seed final train/valid BPC
    and medians. A diverged run is recorded, not raised, so the table always
    has all four rows.
    """
    seeds = seeds or [train_cfg.seed]
    table = []
    for title, kind, zero_identity in ABLATION_VARIANTS:
        if kind == "stack":
            cfg = mamba_stack_config(base_cfg)
        else:
            cfg = base_cfg.replace(comm_mode=kind)
        runs = []
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed)
            tcfg = TrainConfig(**{**asdict(train_cfg), "seed": seed})
            model = InnModel.init(run_cfg, zero_identity=zero_identity)
            run_out = None
            if out_dir:
                tag = title.lower().replace(" ", "_").replace("(", "").replace(")", "")
                run_out = os.path.join(out_dir, f"{tag}_seed{seed}")
            try:
                history = train(model, corpus, tcfg, out_dir=run_out)
                last = history[-1]
                runs.append({"seed": seed, "train_bpc": last.train_bpc,
                             "valid_bpc": last.valid_bpc, "diverged": False})
            except TrainingDiverged as e:
                runs.append({"seed": seed, "train_bpc": float("nan"),
                             "valid_bpc": float("nan"), "diverged": True,
                             "diverged_at": e.step})
        valid_vals = [r["valid_bpc"] for r in runs if not r["diverged"]]
        train_vals = [r["train_bpc"] for r in runs if not r["diverged"]]
        table.append({
            "variant": title,
            "comm_mode": "none" if kind == "stack" else kind,
            "n_neurons": 1 if kind == "stack" else base_cfg.n_neurons,
            "runs": runs,
            "median_train_bpc": float(np.median(train_vals)) if train_vals else float("nan"),
            "median_valid_bpc": float(np.median(valid_vals)) if valid_vals else float("nan"),
            "any_diverged": any(r["diverged"] for r in runs),
        })
    return table


def format_ablation_table(table: list[dict]) -> str:
    lines = [f"{'Variant':<28} {'Train BPC':>10} {'Valid BPC':>10} {'Diverged':>9}"]
    for row in table:
        lines.append(f"{row['variant']:<28} {row['median_train_bpc']:>10.4f} "
                     f"{row['median_valid_bpc']:>10.4f} "
                     f"{str(row['any_diverged']):>9}")
    return "\n".join(lines)
