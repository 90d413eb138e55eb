"""Periodically time-varying bidirectional recurrent APP detector.

One network serves one SIC stage.  Stage s of S processes the inputs of all
remaining stages j = s..S in unrolled order (t-major, phase-inner), so the
input process is cyclostationary with period S-s+1; every recurrent layer
therefore carries one forward and one backward cell *per phase*, cycling
with that period.  A cell applies its own affine input map plus the affine
state map of the phase the incoming state was produced in; activations are
rectified linear.  Forward and backward half-states are concatenated into
the next layer's input, and a final affine-plus-softmax cell reads out APPs
at the current stage's phase only.

Input vectors pair a window of channel outputs centered on the target
symbol's output chunk with the closest already-decided symbols; both parts
are standardized with statistics stored on the model, and zero padding
extends windows past the block edges.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .apps import AppMatrix, MultCounter
from .sic import SicPlan, StageView, ic_window_indices, kappa

_MAGIC = b"NLSICRNN"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RnnShape:
    """Layer input widths (dims[0] = observation window + decided-symbol
    window) plus the SIC geometry the network is built for."""

    dims: tuple
    l_y: int
    l_ic: int
    n_stages: int
    s: int
    m_symbols: int
    n_os: int

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ValueError("need at least one recurrent layer and the output layer")
        if self.dims[0] != self.l_y + self.l_ic:
            raise ValueError(
                f"dims[0]={self.dims[0]} must equal l_y+l_ic={self.l_y + self.l_ic}")
        if any(d % 2 != 0 for d in self.dims[1:]):
            raise ValueError("recurrent layer widths must be even (two half-states)")
        if not 1 <= self.s <= self.n_stages:
            raise ValueError(f"stage {self.s} out of range 1..{self.n_stages}")

    @property
    def phases(self) -> int:
        return self.n_stages - self.s + 1

    @property
    def n_recurrent(self) -> int:
        return len(self.dims) - 1

    def capturable_memory(self, t_rnn: int) -> int:
        """Largest symbol memory the unrolled network can represent."""
        return self.l_y // self.n_os + (t_rnn - 1)


@dataclass
class Normalization:
    """Input standardization constants learned at training time."""

    y_mean: float = 0.0
    y_std: float = 1.0
    sym_scale: float = 1.0


class RnnModel:
    """Phase-indexed parameter tensors of the time-varying network."""

    def __init__(self, shape: RnnShape, norm: Optional[Normalization] = None,
                 provenance: Optional[dict] = None):
        self.shape = shape
        self.norm = norm or Normalization()
        self.provenance = provenance or {}
        p = shape.phases
        self.fw_in_w, self.fw_in_b = [], []
        self.fw_st_w, self.fw_st_b = [], []
        self.bw_in_w, self.bw_in_b = [], []
        self.bw_st_w, self.bw_st_b = [], []
        for i in range(shape.n_recurrent):
            half = shape.dims[i + 1] // 2
            d_in = shape.dims[i]
            self.fw_in_w.append([np.zeros((half, d_in)) for _ in range(p)])
            self.fw_in_b.append([np.zeros(half) for _ in range(p)])
            self.fw_st_w.append([np.zeros((half, half)) for _ in range(p)])
            self.fw_st_b.append([np.zeros(half) for _ in range(p)])
            self.bw_in_w.append([np.zeros((half, d_in)) for _ in range(p)])
            self.bw_in_b.append([np.zeros(half) for _ in range(p)])
            self.bw_st_w.append([np.zeros((half, half)) for _ in range(p)])
            self.bw_st_b.append([np.zeros(half) for _ in range(p)])
        self.out_w = np.zeros((shape.m_symbols, shape.dims[-1]))
        self.out_b = np.zeros(shape.m_symbols)

    def parameters(self):
        """(name, array) pairs in the canonical order used everywhere."""
        for i in range(self.shape.n_recurrent):
            for p in range(self.shape.phases):
                yield f"layer{i}.phase{p}.fw_in.w", self.fw_in_w[i][p]
                yield f"layer{i}.phase{p}.fw_in.b", self.fw_in_b[i][p]
                yield f"layer{i}.phase{p}.fw_st.w", self.fw_st_w[i][p]
                yield f"layer{i}.phase{p}.fw_st.b", self.fw_st_b[i][p]
                yield f"layer{i}.phase{p}.bw_in.w", self.bw_in_w[i][p]
                yield f"layer{i}.phase{p}.bw_in.b", self.bw_in_b[i][p]
                yield f"layer{i}.phase{p}.bw_st.w", self.bw_st_w[i][p]
                yield f"layer{i}.phase{p}.bw_st.b", self.bw_st_b[i][p]
        yield "out.w", self.out_w
        yield "out.b", self.out_b

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.parameters())

    def copy(self) -> "RnnModel":
        other = RnnModel(self.shape, Normalization(**vars(self.norm)),
                         dict(self.provenance))
        for (_, dst), (_, src) in zip(other.parameters(), self.parameters()):
            dst[...] = src
        return other


def init_model(shape: RnnShape, rng: np.random.Generator,
               norm: Optional[Normalization] = None) -> RnnModel:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per tensor, which
    keeps the initial recurrence sub-contractive under ReLU."""
    model = RnnModel(shape, norm=norm)
    for _, arr in model.parameters():
        fan_in = arr.shape[1] if arr.ndim == 2 else arr.shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        arr[...] = rng.uniform(-bound, bound, size=arr.shape)
    return model


# ---------------------------------------------------------------------------
# Input assembly


@dataclass(frozen=True, eq=False)
class InputIndexer:
    """Gather maps from one block's (y, x) onto the unrolled input sequence.

    Index matrices depend only on the SIC geometry, so they are built once
    and reused across blocks; -1 marks a zero-padded slot.
    """

    shape: RnnShape
    plan: SicPlan
    y_idx: np.ndarray          # (T, l_y) into the observation vector
    v_idx: np.ndarray          # (T, l_ic) serial symbol positions
    phase_idx: np.ndarray      # (T,) 0 <-> phase j = s
    out_steps: np.ndarray      # steps producing APP rows
    target_serial: np.ndarray  # (N,) serial 0-based positions of those rows

    @property
    def n_steps(self) -> int:
        return len(self.phase_idx)


def build_indexer(plan: SicPlan, s: int, shape: RnnShape) -> InputIndexer:
    if plan.n_stages != shape.n_stages or s != shape.s:
        raise ValueError("indexer stage geometry does not match the model shape")
    n_big = plan.n_stages
    per = plan.per_stage
    phases = shape.phases
    t_steps = per * phases
    delta = (shape.l_y - 1) // 2
    nabla = shape.l_y - 1 - delta

    y_idx = np.full((t_steps, shape.l_y), -1, dtype=int)
    v_idx = np.full((t_steps, max(shape.l_ic, 1)), -1, dtype=int)[:, :shape.l_ic]
    phase_idx = np.empty(t_steps, dtype=int)
    view = StageView(plan=plan, s=s,
                     known_idx=np.sort(np.concatenate(
                         [plan.stage_positions(j) for j in range(1, s)]).astype(int))
                     if s > 1 else np.empty(0, dtype=int),
                     known_val=np.empty(0))
    step = 0
    n_y = shape.n_os * plan.n
    for t in range(1, per + 1):
        for j in range(s, n_big + 1):
            center = shape.n_os * kappa(j, t, n_big)  # 1-based observation index
            window = center - 1 - delta + np.arange(shape.l_y)
            window[(window < 0) | (window >= n_y)] = -1
            y_idx[step] = window
            if shape.l_ic > 0:
                v_idx[step] = ic_window_indices(j, t, view, shape.l_ic)
            phase_idx[step] = j - s
            step += 1
    out_steps = np.flatnonzero(phase_idx == 0)
    target_serial = np.array([kappa(s, t, n_big) - 1 for t in range(1, per + 1)])
    return InputIndexer(shape=shape, plan=plan, y_idx=y_idx, v_idx=v_idx,
                        phase_idx=phase_idx, out_steps=out_steps,
                        target_serial=target_serial)


def gather_inputs(indexer: InputIndexer, y: np.ndarray, x: np.ndarray,
                  norm: Normalization) -> np.ndarray:
    """Assemble the (T, dims[0]) input sequence for one block, or (B, T, d)
    when y and x carry a leading batch axis."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    batched = y.ndim == 2
    if not batched:
        y, x = y[None, :], x[None, :]
    y_std = (y - norm.y_mean) / norm.y_std
    yw = y_std[:, np.clip(indexer.y_idx, 0, y.shape[1] - 1)]
    yw[:, indexer.y_idx < 0] = 0.0
    if indexer.shape.l_ic > 0:
        vw = x[:, np.clip(indexer.v_idx, 0, x.shape[1] - 1)] * norm.sym_scale
        vw[:, indexer.v_idx < 0] = 0.0
        out = np.concatenate([yw, vw], axis=2)
    else:
        out = yw
    return out if batched else out[0]


def assemble_inputs(y: np.ndarray, view: StageView, shape: RnnShape,
                    norm: Optional[Normalization] = None) -> np.ndarray:
    """Unrolled input sequence for one block given a stage view; decided
    symbols are read from the view, targets contribute nothing."""
    norm = norm or Normalization()
    indexer = build_indexer(view.plan, view.s, shape)
    x_full = np.zeros(view.plan.n)
    if len(view.known_idx):
        x_full[view.known_idx] = view.known_val
    return gather_inputs(indexer, y, x_full, norm)


# ---------------------------------------------------------------------------
# Forward pass


@dataclass
class ForwardCache:
    """Activations retained for reverse-mode differentiation."""

    inputs: list        # r^i per layer, (B, T, dims[i])
    pre_fw: list        # pre-activations, (B, T, half)
    pre_bw: list
    h_fw: list
    h_bw: list
    logits: np.ndarray  # (B, N, M)
    probs: np.ndarray
    logp: np.ndarray


def _check_finite(arr: np.ndarray, layer: int, what: str):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))
        step = int(bad[0][1]) if arr.ndim == 3 else int(bad[0][0])
        raise FloatingPointError(
            f"non-finite {what} activation in layer {layer} at step {step}")


def forward(model: RnnModel, inputs: np.ndarray, phase_idx: np.ndarray,
            out_steps: np.ndarray, counter: Optional[MultCounter] = None,
            want_cache: bool = False):
    """Run the network over an unrolled input sequence.

    inputs: (T, dims[0]) or (B, T, dims[0]).  Returns (logp, cache) with
    logp of shape (B, N, M); cache is None unless requested.
    """
    shape = model.shape
    r = np.asarray(inputs, dtype=np.float64)
    if r.ndim == 2:
        r = r[None]
    b, t_steps, _ = r.shape
    p_count = shape.phases

    cache = ForwardCache([], [], [], [], [], None, None, None) if want_cache else None
    for i in range(shape.n_recurrent):
        half = shape.dims[i + 1] // 2
        pre_fw = np.empty((b, t_steps, half))
        pre_bw = np.empty((b, t_steps, half))
        h_fw = np.empty((b, t_steps, half))
        h_bw = np.empty((b, t_steps, half))

        state = np.zeros((b, half))
        for step in range(t_steps):
            p = phase_idx[step]
            q = (p - 1) % p_count
            z = (r[:, step] @ model.fw_in_w[i][p].T + model.fw_in_b[i][p]
                 + state @ model.fw_st_w[i][q].T + model.fw_st_b[i][q])
            pre_fw[:, step] = z
            state = np.maximum(z, 0.0)
            h_fw[:, step] = state

        state = np.zeros((b, half))
        for step in range(t_steps - 1, -1, -1):
            p = phase_idx[step]
            q = (p + 1) % p_count
            z = (r[:, step] @ model.bw_in_w[i][p].T + model.bw_in_b[i][p]
                 + state @ model.bw_st_w[i][q].T + model.bw_st_b[i][q])
            pre_bw[:, step] = z
            state = np.maximum(z, 0.0)
            h_bw[:, step] = state

        if counter is not None:
            d_in = shape.dims[i]
            counter.add(f"layer{i}", t_steps * (d_in * 2 * half + 2 * half * half))
        _check_finite(pre_fw, i, "forward")
        _check_finite(pre_bw, i, "backward")
        if want_cache:
            cache.inputs.append(r)
            cache.pre_fw.append(pre_fw)
            cache.pre_bw.append(pre_bw)
            cache.h_fw.append(h_fw)
            cache.h_bw.append(h_bw)
        r = np.concatenate([h_fw, h_bw], axis=2)

    logits = r[:, out_steps] @ model.out_w.T + model.out_b
    if counter is not None:
        counter.add("out", len(out_steps) * shape.m_symbols * shape.dims[-1])
    mx = logits.max(axis=2, keepdims=True)
    z = np.exp(logits - mx)
    denom = z.sum(axis=2, keepdims=True)
    logp = (logits - mx) - np.log(denom)
    if want_cache:
        cache.inputs.append(r)
        cache.logits = logits
        cache.probs = z / denom
        cache.logp = logp
    return logp, cache


def rnn_app(model: RnnModel, y: np.ndarray, view: StageView,
            counter: Optional[MultCounter] = None) -> AppMatrix:
    """Detector-facing inference: APPs for the current stage's targets."""
    indexer = build_indexer(view.plan, view.s, model.shape)
    x_full = np.zeros(view.plan.n)
    if len(view.known_idx):
        x_full[view.known_idx] = view.known_val
    data = gather_inputs(indexer, y, x_full, model.norm)
    logp, _ = forward(model, data, indexer.phase_idx, indexer.out_steps,
                      counter=counter)
    return AppMatrix(probs=np.exp(logp[0]), logp=logp[0],
                     positions=indexer.target_serial)


def count_rnn_multiplications(shape: RnnShape) -> int:
    """Real multiplications per input step (output cell charged once per
    produced APP): sum of dims[i]*dims[i+1] + dims[i+1]^2/2 over recurrent
    layers plus m_symbols*dims[-1]."""
    total = 0
    for i in range(shape.n_recurrent):
        total += shape.dims[i] * shape.dims[i + 1] + shape.dims[i + 1] ** 2 // 2
    return total + shape.dims[-1] * shape.m_symbols


# ---------------------------------------------------------------------------
# Serialization: raw little-endian f64 tensors plus a JSON sidecar


def save_model(model: RnnModel, stem) -> None:
    stem = Path(stem)
    names, shapes = [], []
    with open(stem.with_suffix(".bin"), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        for name, arr in model.parameters():
            names.append(name)
            shapes.append(list(arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = {
        "format_version": _FORMAT_VERSION,
        "shape": {
            "dims": list(model.shape.dims),
            "l_y": model.shape.l_y,
            "l_ic": model.shape.l_ic,
            "n_stages": model.shape.n_stages,
            "s": model.shape.s,
            "m_symbols": model.shape.m_symbols,
            "n_os": model.shape.n_os,
        },
        "phases": model.shape.phases,
        "tensors": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
        "normalization": vars(model.norm),
        "provenance": model.provenance,
    }
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(stem) -> RnnModel:
    stem = Path(stem)
    with open(stem.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    if sidecar["format_version"] != _FORMAT_VERSION:
        raise ValueError(f"unsupported model format {sidecar['format_version']}")
    sh = sidecar["shape"]
    shape = RnnShape(dims=tuple(sh["dims"]), l_y=sh["l_y"], l_ic=sh["l_ic"],
                     n_stages=sh["n_stages"], s=sh["s"],
                     m_symbols=sh["m_symbols"], n_os=sh["n_os"])
    model = RnnModel(shape, norm=Normalization(**sidecar["normalization"]),
                     provenance=sidecar.get("provenance", {}))
    with open(stem.with_suffix(".bin"), "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not a model file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported model format {version}")
        for (name, arr), meta in zip(model.parameters(), sidecar["tensors"]):
            if name != meta["name"] or list(arr.shape) != meta["shape"]:
                raise ValueError(f"model file does not match shape at {name}")
            raw = fh.read(arr.size * 8)
            arr[...] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
    return model
