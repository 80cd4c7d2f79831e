"""Three-stage curriculum: deconvolution, causal mapping, joint fine-tuning.

Each stage runs AdamW with a linear warmup and cosine decay (evaluated per
step at fractional epochs) and global-norm gradient clipping, and keeps the
parameters of its best validation epoch. Every trace reaching the second
stage is standardized per sequence, as the BOLD route already is; unscaled
estimates leave ROI features nearly identical and the zero-initialized
adapters never separate them.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .causal_map import Stage2Model
from .condmamba import MambaConfig, conditioning_ablation
from .deconv import Stage1Model, stage1_loss, zscore
from .layers import Module
from .metrics import causality_accuracy, discretize
from .simgen import downsample
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no-stage1", "no-stage2", "only-stage3", "bold2causal", "shuffled-roi", "shared-adapter")
STAGES = ("1", "2", "3", "all")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "all"
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    lr_stage3: float = 1e-5
    batch_size: int = 128
    epochs: int = 100
    weight_decay: float = 1e-2
    warmup_epochs: int = 5
    grad_clip: float = 1.0
    seed: int = 0
    d_model: int = 64
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    dropout: float = 0.1
    ablation: str = "none"
    stage2_input: str = "estimate"      # or "truth": ground-truth neural traces on the TR grid
    only_stage3_factor: int = 3         # epoch multiplier keeping the ablation's budget equal
    splits: tuple[float, float] = (0.8, 0.1)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.stage2_input not in ("estimate", "truth"):
            raise ValueError("stage2_input must be 'estimate' or 'truth'")
        for name in ("lr_stage1", "lr_stage2", "lr_stage3", "batch_size", "epochs", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("weight_decay and warmup_epochs must be non-negative")
        if self.lr_stage3 >= self.lr_stage1:
            raise ValueError("lr_stage3 must be below lr_stage1")
        self.splits = tuple(self.splits)

    def mamba(self) -> MambaConfig:
        return MambaConfig(d_model=self.d_model, d_state=self.d_state, d_conv=self.d_conv,
                           expand=self.expand, dropout_p=self.dropout)

    @property
    def conditioning(self) -> str:
        return {"shuffled-roi": "shuffled_ids", "shared-adapter": "shared_adapter"}.get(self.ablation, "normal")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["splits"] = list(self.splits)
        return d


# -- optimisation primitives ---------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: OptimizerState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-2) -> None:
    """In-place AdamW update with weight decay applied directly to the weights."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule(epoch: float, base_lr: float, epochs: int, warmup_epochs: float) -> float:
    """Linear ramp from 0 over the warmup, then cosine decay reaching 0 at ``epochs``."""
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    span = epochs - warmup_epochs
    if span <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup_epochs) / span))


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, max_norm: float = 1.0) -> tuple[list[np.ndarray], float]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


# -- data ------------------------------------------------------------------------

def split_indices(n: int, fractions=(0.8, 0.1)) -> dict[str, np.ndarray]:
    """Contiguous train/val/test ranges by sample index."""
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    idx = np.arange(n)
    return {"train": idx[:n_train], "val": idx[n_train:n_train + n_val], "test": idx[n_train + n_val:]}


@dataclass
class PreparedData:
    bold_z: np.ndarray
    coupling: np.ndarray
    delay: np.ndarray
    event_time: np.ndarray
    event_amp: np.ndarray
    event_width: np.ndarray
    event_mask: np.ndarray
    neural_tr: np.ndarray
    splits: dict = field(default_factory=dict)

    @property
    def n_roi(self) -> int:
        return self.bold_z.shape[1]

    def batch(self, idx) -> dict:
        return {k: getattr(self, k)[idx] for k in ("bold_z", "coupling", "delay", "event_time", "event_amp",
                                                  "event_width", "event_mask", "neural_tr")}


def prepare(dataset: dict, fractions=(0.8, 0.1)) -> PreparedData:
    neural = np.asarray(dataset["neural"], float)
    factor = neural.shape[-1] // dataset["bold"].shape[-1]
    return PreparedData(
        bold_z=zscore(dataset["bold"]),
        coupling=np.asarray(dataset["coupling"], float),
        delay=np.asarray(dataset["delay"], float),
        event_time=np.asarray(dataset["event_time"], float),
        event_amp=np.asarray(dataset["event_amp"], float),
        event_width=np.asarray(dataset["event_width"], float),
        event_mask=np.asarray(dataset["event_mask"]).astype(bool),
        neural_tr=downsample(neural, factor),
        splits=split_indices(len(dataset["bold"]), fractions),
    )


# -- models and losses -------------------------------------------------------------

@dataclass
class CurriculumModels:
    stage1: Stage1Model | None
    stage2: Stage2Model

    def modules(self) -> list[Module]:
        return [m for m in (self.stage1, self.stage2) if m is not None]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, m in (("stage1.", self.stage1), ("stage2.", self.stage2)):
            if m is not None:
                out.update({prefix + k: v for k, v in m.state_dict().items()})
        return out

    def load_state_dict(self, state: dict) -> None:
        for prefix, m in (("stage1.", self.stage1), ("stage2.", self.stage2)):
            if m is not None:
                m.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})


def build_models(cfg: TrainConfig) -> CurriculumModels:
    rng = np.random.default_rng(cfg.seed)
    mc = cfg.mamba()
    stage1 = None if cfg.ablation == "bold2causal" else Stage1Model(mc, rng)
    return CurriculumModels(stage1=stage1, stage2=Stage2Model(mc, rng))


def roi_ids_for(cfg: TrainConfig, n_roi: int, n_roi_max: int, step: int) -> np.ndarray:
    """Effective ROI ids; shuffled conditioning draws a fresh permutation per step."""
    return conditioning_ablation(cfg.conditioning, np.arange(n_roi), seed=cfg.seed + step, n_roi_max=n_roi_max)


def _s1_loss(model: Stage1Model, b: dict, ids) -> tuple[dict, object]:
    out = model(b["bold_z"], ids)
    return stage1_loss(out, b["bold_z"], b["event_time"], b["event_amp"], b["event_width"], b["event_mask"]), out


def _s2_loss(model: Stage2Model, traces, b: dict, ids) -> tuple[dict, object]:
    from .causal_map import stage2_loss

    pred = model(traces, ids)
    return stage2_loss(pred, b["coupling"], b["delay"]), pred


def stage1_traces(model: Stage1Model, bold_z: np.ndarray, ids, batch_size: int = 64) -> np.ndarray:
    """Standardized neural estimates from a frozen first stage (no tape, eval mode)."""
    was = model.training
    model.eval()
    outs = [model(bold_z[k:k + batch_size], ids).neural_hat.data for k in range(0, len(bold_z), batch_size)]
    model.train(was)
    return zscore(np.concatenate(outs)) if outs else np.zeros(bold_z.shape)


def _check_finite(losses: dict, where: str) -> None:
    for k, v in losses.items():
        if isinstance(v, (str, tuple)):
            continue
        val = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise TrainingDivergedError(f"{where}: non-finite {k} loss ({val}); lower the learning rate")


# -- the curriculum ---------------------------------------------------------------

class MetricLog:
    """Per-epoch records; written as CSV with a fixed column order."""

    COLUMNS = ("stage", "epoch", "lr", "train_total", "train_bold", "train_timing", "train_width",
               "train_amplitude", "train_coupling", "train_delay", "val_total", "val_bold", "val_coupling",
               "val_delay", "val_accuracy", "grad_norm_pre", "grad_norm_post")

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **row) -> None:
        self.rows.append({c: row.get(c, "") for c in self.COLUMNS})

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def stage_rows(self, stage: str) -> list[dict]:
        return [r for r in self.rows if r["stage"] == stage]


@dataclass
class TrainResult:
    models: CurriculumModels
    log: MetricLog
    config: TrainConfig
    checkpoints: dict = field(default_factory=dict)


class Curriculum:
    def __init__(self, cfg: TrainConfig, data: PreparedData, models: CurriculumModels | None = None):
        self.cfg = cfg
        self.data = data
        self.models = models or build_models(cfg)
        self.log = MetricLog()
        self.n_roi_max = self.models.stage2.cfg.n_roi_max
        self.step = 0
        self._traces: np.ndarray | None = None
        self.infer_source = "bold" if self.stage2_source() == "bold" else "estimate"

    # input for the second stage ---------------------------------------------
    def stage2_source(self) -> str:
        """Trace type the second stage is pre-trained on."""
        if self.cfg.ablation in ("no-stage1", "bold2causal"):
            return "bold"
        return "truth" if self.cfg.stage2_input == "truth" else "estimate"

    def traces(self, idx, source: str | None = None) -> np.ndarray:
        src = source or self.stage2_source()
        if src == "bold":
            return self.data.bold_z[idx]
        if src == "truth":
            return zscore(self.data.neural_tr[idx])
        if self._traces is None:
            ids = np.arange(self.data.n_roi)
            self._traces = stage1_traces(self.models.stage1, self.data.bold_z, ids)
        return self._traces[idx]

    # evaluation --------------------------------------------------------------
    def evaluate(self, split: str, joint: bool = False) -> dict:
        """Second-stage losses and causality accuracy; ``joint`` adds first-stage terms."""
        idx = self.data.splits[split]
        b = self.data.batch(idx)
        ids = np.arange(self.data.n_roi)
        for m in self.models.modules():
            m.eval()
        out = {}
        if joint:
            l1, s1 = _s1_loss(self.models.stage1, b, ids)
            out.update({"bold": l1["bold"].item(), "s1_total": l1["total"].item()})
            traces = zscore(s1.neural_hat.data)
        else:
            traces = self.traces(idx, self.infer_source)
        l2, pred = _s2_loss(self.models.stage2, traces, b, ids)
        out.update({"coupling": l2["coupling"].item(), "delay": l2["delay"].item()})
        out["accuracy"] = causality_accuracy(discretize(pred.S.data), discretize(b["coupling"]))
        return out

    def evaluate_stage1(self, split: str) -> dict:
        b = self.data.batch(self.data.splits[split])
        self.models.stage1.eval()
        l1, _ = _s1_loss(self.models.stage1, b, np.arange(self.data.n_roi))
        return {k: v.item() for k, v in l1.items()}

    def predict(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Coupling and delay predictions for a split through the inference path."""
        return self.predict_bold(self.data.bold_z[self.data.splits[split]])

    def predict_bold(self, bold_z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ids = np.arange(bold_z.shape[1])
        if self.infer_source == "bold":
            traces = bold_z
        else:
            traces = stage1_traces(self.models.stage1, bold_z, ids)
        self.models.stage2.eval()
        pred = self.models.stage2(traces, ids)
        return pred.S.data, pred.delays.data

    # one optimisation stage ------------------------------------------------------
    def _run_stage(self, stage: str, params, loss_fn, lr: float, epochs: int, select) -> None:
        cfg = self.cfg
        train_idx = self.data.splits["train"]
        n_batches = max(1, math.ceil(len(train_idx) / cfg.batch_size))
        opt = OptimizerState.for_params(params)
        best_key, best_state = None, None
        for epoch in range(epochs):
            order = np.random.default_rng([cfg.seed, int(stage), epoch]).permutation(train_idx)
            sums: dict[str, float] = {}
            pre_max = post_max = 0.0
            for k in range(n_batches):
                bidx = np.sort(order[k * cfg.batch_size:(k + 1) * cfg.batch_size])
                lr_now = lr_schedule(epoch + k / n_batches, lr, epochs, cfg.warmup_epochs)
                for m in self.models.modules():
                    m.train()
                ids = roi_ids_for(cfg, self.data.n_roi, self.n_roi_max, self.step)
                with Tape() as tape:
                    losses = loss_fn(self.data.batch(bidx), bidx, ids)
                _check_finite(losses, f"stage {stage} epoch {epoch} batch {k}")
                grads_map = tape.backward(losses["total"], params)
                grads, pre = clip_gradients([grads_map[p] for p in params], cfg.grad_clip)
                adamw_step(params, grads, opt, lr_now, weight_decay=cfg.weight_decay)
                self.step += 1
                pre_max = max(pre_max, pre)
                post_max = max(post_max, min(pre, cfg.grad_clip))
                for name, v in losses.items():
                    sums[name] = sums.get(name, 0.0) + v.item() / n_batches
            val = select(stage)
            self.log.add(stage=stage, epoch=epoch, lr=lr_now, grad_norm_pre=pre_max, grad_norm_post=post_max,
                         **{f"train_{k}": v for k, v in sums.items()}, **{f"val_{k}": v for k, v in val.items()
                                                                           if f"val_{k}" in MetricLog.COLUMNS})
            _check_finite(val, f"stage {stage} validation")
            key = val["_key"]
            log.info("stage %s epoch %d train %.4f val %s", stage, epoch, sums["total"], key)
            if best_key is None or key > best_key:
                best_key = key
                best_state = self.models.state_dict()
        self.models.load_state_dict(best_state)
        self._traces = None

    def _select1(self, stage):
        v = self.evaluate_stage1("val")
        return {"total": v["total"], "bold": v["bold"], "_key": -v["total"]}

    def _select2(self, stage, joint=False):
        v = self.evaluate("val", joint=joint)
        total = v["coupling"] + v["delay"] + v.get("s1_total", 0.0)
        out = {"total": total, "coupling": v["coupling"], "delay": v["delay"], "accuracy": v["accuracy"],
               "_key": (v["accuracy"], -total)}
        if joint:
            out["bold"] = v["bold"]
        return out

    def train_stage1(self, epochs: int) -> None:
        m = self.models.stage1

        def loss_fn(b, bidx, ids):
            return _s1_loss(m, b, ids)[0]

        self._run_stage("1", m.parameters(), loss_fn, self.cfg.lr_stage1, epochs, self._select1)

    def train_stage2(self, epochs: int) -> None:
        m = self.models.stage2

        def loss_fn(b, bidx, ids):
            return _s2_loss(m, self.traces(bidx), b, ids)[0]

        self.infer_source = self.stage2_source()
        self._run_stage("2", m.parameters(), loss_fn, self.cfg.lr_stage2, epochs, self._select2)
        if self.infer_source == "truth":
            self.infer_source = "estimate"

    def train_stage3(self, epochs: int, lr: float | None = None) -> None:
        s1, s2 = self.models.stage1, self.models.stage2
        params = s1.parameters() + s2.parameters()
        self.infer_source = "estimate"

        def loss_fn(b, bidx, ids):
            l1, out = _s1_loss(s1, b, ids)
            l2, _ = _s2_loss(s2, zscore(out.neural_hat), b, ids)
            return {"total": l1["total"] + l2["total"], "bold": l1["bold"], "timing": l1["timing"],
                    "width": l1["width"], "amplitude": l1["amplitude"], "coupling": l2["coupling"],
                    "delay": l2["delay"]}

        self._run_stage("3", params, loss_fn, lr or self.cfg.lr_stage3, epochs,
                        lambda st: self._select2(st, joint=True))

    def run(self) -> TrainResult:
        cfg = self.cfg
        E = cfg.epochs
        plan = {
            "none": ("1", "2", "3"), "shuffled-roi": ("1", "2", "3"), "shared-adapter": ("1", "2", "3"),
            "no-stage1": ("2", "3"), "no-stage2": ("1", "3"), "only-stage3": ("3*",), "bold2causal": ("2",),
        }[cfg.ablation]
        if cfg.stage != "all":
            plan = tuple(s for s in plan if s.rstrip("*") == cfg.stage)
        for st in plan:
            if st == "1":
                self.train_stage1(E)
            elif st == "2":
                self.train_stage2(E)
            elif st == "3":
                self.train_stage3(E)
            else:
                # end-to-end from scratch: no warm start, so it uses the first-stage rate
                self.train_stage3(E * cfg.only_stage3_factor, lr=cfg.lr_stage1)
        return TrainResult(models=self.models, log=self.log, config=cfg)


def train_curriculum(cfg: TrainConfig, dataset: dict, log_path=None) -> TrainResult:
    """Run the configured curriculum on a dataset dict; optionally write the CSV log."""
    data = prepare(dataset, cfg.splits)
    result = Curriculum(cfg, data).run()
    if log_path is not None:
        result.log.write(log_path)
    return result


def save_checkpoint(path, curriculum: Curriculum) -> None:
    from .io import write_container

    meta = {"kind": "checkpoint", "config": curriculum.cfg.to_dict(), "infer_source": curriculum.infer_source,
            "n_roi": curriculum.data.n_roi}
    write_container(path, curriculum.models.state_dict(), meta=meta)


def load_checkpoint(path, dataset: dict | None = None) -> Curriculum:
    """Rebuild a curriculum (models plus inference route) from a checkpoint container."""
    from .io import read_container

    state, meta = read_container(path, with_meta=True)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a checkpoint container")
    cfg_d = dict(meta["config"])
    cfg_d["splits"] = tuple(cfg_d["splits"])
    cfg = TrainConfig(**cfg_d)
    models = build_models(cfg)
    models.load_state_dict(state)
    data = prepare(dataset, cfg.splits) if dataset is not None else None
    cur = Curriculum.__new__(Curriculum)
    cur.cfg, cur.data, cur.models = cfg, data, models
    cur.log, cur.step, cur._traces = MetricLog(), 0, None
    cur.n_roi_max = models.stage2.cfg.n_roi_max
    cur.infer_source = meta["infer_source"]
    return cur
