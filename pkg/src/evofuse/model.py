"""The hierarchical expert network.

Three modality experts and one shared expert produce level-0 stream
representations. At each further level every modality stream is fused
with the shared stream, while the shared stream is fused with all three
modality streams. Final-level streams feed task towers whose inputs are
gated by task-attention weights, plus lightweight per-stream probe heads
that emit the distributions used for cross-stream knowledge transfer.

All parameters live in one flat float64 buffer; every layer's arrays are
views into it, so flatten/unflatten and optimizer steps are copy-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, ShapeError
from .losses import ALL_STREAMS, MODALITY_STREAMS, TaskDescriptor, DEFAULT_TASKS
from .nets import (
    DenseLayer,
    GradTape,
    Mlp,
    ParamSlot,
    ParamVector,
    build_layout,
    init_block,
    layout_size,
)

STREAM_ORDER = ("text", "audio", "visual", "shared")  # tower-input concat order


@dataclass(frozen=True)
class ModelConfig:
    d_text: int = 16
    d_audio: int = 16
    d_visual: int = 16
    expert_widths: dict = None  # stream -> tuple of layer widths
    levels: int = 2
    fusion_widths: tuple = None  # per level: stream -> tuple of widths
    tower_widths: dict = None  # task id -> tuple of hidden widths
    tasks: tuple[TaskDescriptor, ...] = DEFAULT_TASKS
    scorer_widths: tuple[int, ...] = ()
    probe_task: str = "class7"
    crossmodal: bool = True
    linear_fusion: bool = False
    use_attention: bool = True

    def __post_init__(self):
        if self.expert_widths is None:
            object.__setattr__(
                self, "expert_widths", {s: (32, 16) for s in STREAM_ORDER}
            )
        if self.fusion_widths is None:
            object.__setattr__(
                self,
                "fusion_widths",
                tuple({s: (16,) for s in STREAM_ORDER} for _ in range(self.levels)),
            )
        if self.tower_widths is None:
            object.__setattr__(self, "tower_widths", {t.id: (16,) for t in self.tasks})
        self.validate()

    def validate(self):
        if min(self.d_text, self.d_audio, self.d_visual) < 1:
            raise ConfigError("input dims must be >= 1")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if not self.tasks:
            raise ConfigError("tasks must be nonempty")
        for s in STREAM_ORDER:
            if s not in self.expert_widths or not self.expert_widths[s]:
                raise ConfigError(f"missing expert widths for stream {s!r}")
            if any(w < 1 for w in self.expert_widths[s]):
                raise ConfigError("expert widths must be >= 1")
        if len(self.fusion_widths) != self.levels:
            raise ConfigError(
                f"fusion_widths has {len(self.fusion_widths)} levels, expected {self.levels}"
            )
        for lvl in self.fusion_widths:
            for s in STREAM_ORDER:
                if s not in lvl or not lvl[s] or any(w < 1 for w in lvl[s]):
                    raise ConfigError("each level needs positive widths for all streams")
        task_ids = [t.id for t in self.tasks]
        if len(set(task_ids)) != len(task_ids):
            raise ConfigError("task ids must be unique")
        for tid in task_ids:
            if tid not in self.tower_widths:
                raise ConfigError(f"missing tower widths for task {tid!r}")
        probe = next((t for t in self.tasks if t.id == self.probe_task), None)
        if probe is None or probe.kind != "classification":
            raise ConfigError("probe_task must name a classification task")

    # stream representation dim after level i (0 = expert output)
    def stream_dim(self, stream: str, level: int) -> int:
        if level == 0:
            return self.expert_widths[stream][-1]
        return self.fusion_widths[level - 1][stream][-1]

    def input_dim(self, stream: str) -> int:
        if stream == "text":
            return self.d_text
        if stream == "audio":
            return self.d_audio
        if stream == "visual":
            return self.d_visual
        return self.d_text + self.d_audio + self.d_visual

    def fusion_in_dim(self, stream: str, level: int) -> int:
        prev = level - 1
        if stream == "shared":
            return sum(self.stream_dim(s, prev) for s in ("shared", "text", "audio", "visual"))
        if self.crossmodal:
            return self.stream_dim(stream, prev) + self.stream_dim("shared", prev)
        return self.stream_dim(stream, prev)

    @property
    def tower_in_dim(self) -> int:
        return sum(self.stream_dim(s, self.levels) for s in STREAM_ORDER)

    @property
    def probe_classes(self) -> int:
        return next(t for t in self.tasks if t.id == self.probe_task).num_classes

    def task(self, task_id: str) -> TaskDescriptor:
        return next(t for t in self.tasks if t.id == task_id)

    def to_dict(self) -> dict:
        return {
            "d_text": self.d_text,
            "d_audio": self.d_audio,
            "d_visual": self.d_visual,
            "expert_widths": {s: list(w) for s, w in self.expert_widths.items()},
            "levels": self.levels,
            "fusion_widths": [
                {s: list(w) for s, w in lvl.items()} for lvl in self.fusion_widths
            ],
            "tower_widths": {t: list(w) for t, w in self.tower_widths.items()},
            "tasks": [
                {
                    "id": t.id,
                    "kind": t.kind,
                    "num_classes": t.num_classes,
                    "loss_fn": t.loss_fn,
                }
                for t in self.tasks
            ],
            "scorer_widths": list(self.scorer_widths),
            "probe_task": self.probe_task,
            "crossmodal": self.crossmodal,
            "linear_fusion": self.linear_fusion,
            "use_attention": self.use_attention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            d_text=d["d_text"],
            d_audio=d["d_audio"],
            d_visual=d["d_visual"],
            expert_widths={s: tuple(w) for s, w in d["expert_widths"].items()},
            levels=d["levels"],
            fusion_widths=tuple(
                {s: tuple(w) for s, w in lvl.items()} for lvl in d["fusion_widths"]
            ),
            tower_widths={t: tuple(w) for t, w in d["tower_widths"].items()},
            tasks=tuple(TaskDescriptor(**t) for t in d["tasks"]),
            scorer_widths=tuple(d["scorer_widths"]),
            probe_task=d["probe_task"],
            crossmodal=d["crossmodal"],
            linear_fusion=d["linear_fusion"],
            use_attention=d["use_attention"],
        )


@dataclass
class ForwardRecord:
    """Everything the backward pass needs from one batched forward."""

    n: int
    states: dict = field(default_factory=dict)  # (stream, level) -> (n, d)
    tapes: dict = field(default_factory=dict)  # block prefix -> GradTape
    tower_inputs: np.ndarray | None = None  # concatenated final streams (n, D)
    gates: dict = field(default_factory=dict)  # task id -> scalar gate multiplier
    weights: dict = field(default_factory=dict)  # task id -> reported attention weight
    active: tuple = ()
    task_outputs: dict = field(default_factory=dict)  # task id -> (n, out_dim)
    probe_logits: dict = field(default_factory=dict)  # stream -> (n, C)
    stream_probs: dict = field(default_factory=dict)  # stream -> (n, C)


def _mlp_entries(prefix: str, dims: list[int]) -> list[tuple[str, tuple[int, ...]]]:
    entries = []
    for i in range(len(dims) - 1):
        entries.append((f"{prefix}.{i}.W", (dims[i + 1], dims[i])))
        entries.append((f"{prefix}.{i}.b", (dims[i + 1],)))
    return entries


def model_layout(config: ModelConfig) -> tuple[ParamSlot, ...]:
    """Deterministic (name, shape, offset) layout for every parameter block."""
    entries: list[tuple[str, tuple[int, ...]]] = []
    for s in STREAM_ORDER:
        dims = [config.input_dim(s), *config.expert_widths[s]]
        entries += _mlp_entries(f"expert_{s}", dims)
    for level in range(1, config.levels + 1):
        for s in STREAM_ORDER:
            dims = [config.fusion_in_dim(s, level), *config.fusion_widths[level - 1][s]]
            entries += _mlp_entries(f"fuse_{s}.{level}", dims)
    for t in config.tasks:
        dims = [config.tower_in_dim, *config.tower_widths[t.id], t.output_dim]
        entries += _mlp_entries(f"tower_{t.id}", dims)
    for s in ALL_STREAMS:
        entries += _mlp_entries(
            f"probe_{s}", [config.stream_dim(s, config.levels), config.probe_classes]
        )
    entries += _mlp_entries(
        "scorer",
        [config.stream_dim("shared", config.levels), *config.scorer_widths, len(config.tasks)],
    )
    return build_layout(entries)


class HierarchicalExpertModel:
    """Instantiated network over one flat parameter buffer."""

    def __init__(self, config: ModelConfig, params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.layout = model_layout(config)
        size = layout_size(self.layout)
        self.params = np.zeros(size)
        self._slots = {slot.name: slot for slot in self.layout}
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (size,):
                raise ShapeError(f"params length {params.size} != layout size {size}")
            self.params[...] = params
        elif rng is not None:
            for slot in self.layout:
                self._view(slot)[...] = init_block(slot.name, slot.shape, rng)
        self._build_blocks()

    def _view(self, slot: ParamSlot) -> np.ndarray:
        return self.params[slot.offset : slot.offset + slot.size].reshape(slot.shape)

    def _make_mlp(self, prefix: str, n_layers: int, activations: list[str]) -> Mlp:
        layers = []
        for i in range(n_layers):
            w = self._view(self._slots[f"{prefix}.{i}.W"])
            b = self._view(self._slots[f"{prefix}.{i}.b"])
            layers.append(DenseLayer(w, b, activations[i]))
        return Mlp(layers)

    def _build_blocks(self):
        cfg = self.config
        fusion_act = "identity" if cfg.linear_fusion else "tanh"
        self.experts = {
            s: self._make_mlp(
                f"expert_{s}", len(cfg.expert_widths[s]), ["tanh"] * len(cfg.expert_widths[s])
            )
            for s in STREAM_ORDER
        }
        self.fusions = {}
        for level in range(1, cfg.levels + 1):
            for s in STREAM_ORDER:
                n = len(cfg.fusion_widths[level - 1][s])
                self.fusions[(s, level)] = self._make_mlp(
                    f"fuse_{s}.{level}", n, [fusion_act] * n
                )
        self.towers = {}
        for t in cfg.tasks:
            hidden = len(cfg.tower_widths[t.id])
            head_act = "softmax" if t.kind == "classification" else "identity"
            self.towers[t.id] = self._make_mlp(
                f"tower_{t.id}", hidden + 1, ["tanh"] * hidden + [head_act]
            )
        self.probes = {
            s: self._make_mlp(f"probe_{s}", 1, ["identity"]) for s in ALL_STREAMS
        }
        n_scorer = len(cfg.scorer_widths) + 1
        self.scorer = self._make_mlp(
            "scorer", n_scorer, ["tanh"] * len(cfg.scorer_widths) + ["identity"]
        )

    # -- parameter plumbing -------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.params.size

    def get_flat(self) -> np.ndarray:
        return self.params.copy()

    def set_flat(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise ShapeError("flat vector length does not match model layout")
        self.params[...] = values

    def param_vector(self) -> ParamVector:
        return ParamVector(self.get_flat(), self.layout)

    def grad_buffer(self) -> np.ndarray:
        return np.zeros_like(self.params)

    def _write_grads(self, buf: np.ndarray, prefix: str, grads):
        for i, (dw, db) in enumerate(grads):
            ws = self._slots[f"{prefix}.{i}.W"]
            bs = self._slots[f"{prefix}.{i}.b"]
            buf[ws.offset : ws.offset + ws.size] = dw.ravel()
            buf[bs.offset : bs.offset + bs.size] = db.ravel()

    # -- forward ------------------------------------------------------------

    def _check_inputs(self, x_text, x_audio, x_visual):
        arrs = []
        for name, x, d in (
            ("text", x_text, self.config.d_text),
            ("audio", x_audio, self.config.d_audio),
            ("visual", x_visual, self.config.d_visual),
        ):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 1:
                x = x[None, :]
            if x.ndim != 2 or x.shape[1] != d:
                raise ShapeError(f"{name} features must have dim {d}, got {x.shape}")
            arrs.append(x)
        if len({a.shape[0] for a in arrs}) != 1:
            raise ShapeError("modality batches must have equal length")
        return arrs

    def forward_batch(
        self,
        x_text: np.ndarray,
        x_audio: np.ndarray,
        x_visual: np.ndarray,
        active: tuple[str, ...] | None = None,
        with_tapes: bool = False,
        kl_temperature: float = 1.0,
    ) -> ForwardRecord:
        cfg = self.config
        x_text, x_audio, x_visual = self._check_inputs(x_text, x_audio, x_visual)
        n = x_text.shape[0]
        if active is None:
            active = tuple(t.id for t in cfg.tasks)
        rec = ForwardRecord(n=n, active=tuple(active))

        def run(prefix: str, net: Mlp, x: np.ndarray) -> np.ndarray:
            tape = None
            if with_tapes:
                tape = GradTape()
                rec.tapes[prefix] = tape
            return net.forward(x, tape)

        rec.states[("text", 0)] = run("expert_text", self.experts["text"], x_text)
        rec.states[("audio", 0)] = run("expert_audio", self.experts["audio"], x_audio)
        rec.states[("visual", 0)] = run("expert_visual", self.experts["visual"], x_visual)
        rec.states[("shared", 0)] = run(
            "expert_shared",
            self.experts["shared"],
            np.concatenate([x_text, x_audio, x_visual], axis=1),
        )

        for level in range(1, cfg.levels + 1):
            prev = {s: rec.states[(s, level - 1)] for s in STREAM_ORDER}
            for s in MODALITY_STREAMS:
                x = (
                    np.concatenate([prev[s], prev["shared"]], axis=1)
                    if cfg.crossmodal
                    else prev[s]
                )
                rec.states[(s, level)] = run(f"fuse_{s}.{level}", self.fusions[(s, level)], x)
            x = np.concatenate(
                [prev["shared"], prev["text"], prev["audio"], prev["visual"]], axis=1
            )
            rec.states[("shared", level)] = run(
                f"fuse_shared.{level}", self.fusions[("shared", level)], x
            )

        top = {s: rec.states[(s, cfg.levels)] for s in STREAM_ORDER}
        rec.tower_inputs = np.concatenate([top[s] for s in STREAM_ORDER], axis=1)

        task_ids = [t.id for t in cfg.tasks]
        if cfg.use_attention:
            logits = run("scorer", self.scorer, top["shared"])  # (n, n_tasks)
            mean_logits = logits.mean(axis=0)
            idx = [task_ids.index(t) for t in active]
            sub = mean_logits[idx] - mean_logits[idx].max()
            e = np.exp(sub)
            w = e / e.sum()
            rec.weights = {t: float(w[i]) for i, t in enumerate(active)}
            rec.gates = dict(rec.weights)
        else:
            rec.weights = {t: 1.0 / len(active) for t in active}
            rec.gates = {t: 1.0 for t in active}

        for tid in active:
            gated = rec.gates[tid] * rec.tower_inputs
            rec.task_outputs[tid] = run(f"tower_{tid}", self.towers[tid], gated)

        for s in ALL_STREAMS:
            logits = run(f"probe_{s}", self.probes[s], top[s])
            rec.probe_logits[s] = logits
            scaled = logits / kl_temperature
            scaled = scaled - scaled.max(axis=1, keepdims=True)
            e = np.exp(scaled)
            rec.stream_probs[s] = e / e.sum(axis=1, keepdims=True)
        return rec

    # -- backward -----------------------------------------------------------

    def backward(
        self,
        rec: ForwardRecord,
        task_output_grads: dict[str, np.ndarray],
        probe_logit_grads: dict[str, np.ndarray],
        weight_grads: dict[str, float] | None = None,
    ) -> np.ndarray:
        """Accumulate dLoss/dParams for the recorded forward.

        task_output_grads seed each tower's output; probe_logit_grads seed
        the modality probes (the shared probe is a detached target);
        weight_grads carry any loss term that multiplies the attention
        weights directly.
        """
        cfg = self.config
        if not rec.tapes:
            raise ShapeError("forward was not recorded with tapes")
        buf = self.grad_buffer()
        n = rec.n
        dz = np.zeros_like(rec.tower_inputs)
        task_ids = [t.id for t in cfg.tasks]
        dw = {t: float(weight_grads.get(t, 0.0)) if weight_grads else 0.0 for t in rec.active}

        for tid in rec.active:
            seed = task_output_grads.get(tid)
            if seed is None:
                continue
            grads, din = self.towers[tid].backward(rec.tapes[f"tower_{tid}"], seed)
            self._write_grads(buf, f"tower_{tid}", grads)
            dz += rec.gates[tid] * din
            if cfg.use_attention:
                dw[tid] += float(np.sum(din * rec.tower_inputs))

        # split tower-input grad back into final-level streams
        d_top = {}
        start = 0
        for s in STREAM_ORDER:
            d = cfg.stream_dim(s, cfg.levels)
            d_top[s] = dz[:, start : start + d].copy()
            start += d

        for s in MODALITY_STREAMS:
            seed = probe_logit_grads.get(s)
            if seed is None:
                continue
            grads, din = self.probes[s].backward(rec.tapes[f"probe_{s}"], seed)
            self._write_grads(buf, f"probe_{s}", grads)
            d_top[s] += din

        if cfg.use_attention and any(v != 0.0 for v in dw.values()):
            w = np.array([rec.weights[t] for t in rec.active])
            g = np.array([dw[t] for t in rec.active])
            d_sub = w * (g - float(np.dot(g, w)))  # softmax jacobian
            d_logits_mean = np.zeros(len(task_ids))
            for i, t in enumerate(rec.active):
                d_logits_mean[task_ids.index(t)] = d_sub[i]
            d_logits = np.tile(d_logits_mean / n, (n, 1))
            grads, din = self.scorer.backward(rec.tapes["scorer"], d_logits)
            self._write_grads(buf, "scorer", grads)
            d_top["shared"] += din

        d_state = {(s, cfg.levels): d_top[s] for s in STREAM_ORDER}
        for level in range(cfg.levels, 0, -1):
            d_prev = {s: np.zeros_like(rec.states[(s, level - 1)]) for s in STREAM_ORDER}
            for s in MODALITY_STREAMS:
                grads, din = self.fusions[(s, level)].backward(
                    rec.tapes[f"fuse_{s}.{level}"], d_state[(s, level)]
                )
                self._write_grads(buf, f"fuse_{s}.{level}", grads)
                if cfg.crossmodal:
                    dm = cfg.stream_dim(s, level - 1)
                    d_prev[s] += din[:, :dm]
                    d_prev["shared"] += din[:, dm:]
                else:
                    d_prev[s] += din
            grads, din = self.fusions[("shared", level)].backward(
                rec.tapes[f"fuse_shared.{level}"], d_state[("shared", level)]
            )
            self._write_grads(buf, f"fuse_shared.{level}", grads)
            start = 0
            for s in ("shared", "text", "audio", "visual"):
                d = cfg.stream_dim(s, level - 1)
                d_prev[s] += din[:, start : start + d]
                start += d
            d_state = {(s, level - 1): d_prev[s] for s in STREAM_ORDER}

        for s in STREAM_ORDER:
            grads, _ = self.experts[s].backward(
                rec.tapes[f"expert_{s}"], d_state[(s, 0)]
            )
            self._write_grads(buf, f"expert_{s}", grads)
        return buf

    # -- convenience --------------------------------------------------------

    def predict(self, x_text, x_audio, x_visual) -> dict[str, np.ndarray]:
        """Per-task outputs without tapes: (n,) for regression, (n, C)
        probabilities for classification."""
        rec = self.forward_batch(x_text, x_audio, x_visual)
        out = {}
        for t in self.config.tasks:
            y = rec.task_outputs[t.id]
            out[t.id] = y[:, 0] if t.kind == "regression" else y
        return out

    def embed(self, x_text, x_audio, x_visual) -> np.ndarray:
        """Final-level shared-stream representation."""
        rec = self.forward_batch(x_text, x_audio, x_visual)
        return rec.states[("shared", self.config.levels)]


CHECKPOINT_VERSION = 1


def save_checkpoint(model: HierarchicalExpertModel, path: str | Path) -> None:
    """Byte-stable JSON checkpoint: config plus the flat parameter vector."""
    payload = {
        "format": "evofuse-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": model.get_flat().tolist(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))


def load_checkpoint(path: str | Path) -> HierarchicalExpertModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = json.loads(path.read_text())
    if payload.get("format") != "evofuse-checkpoint":
        raise ValueError(f"not a model checkpoint: {path}")
    config = ModelConfig.from_dict(payload["config"])
    return HierarchicalExpertModel(config, params=np.asarray(payload["params"]))
