"""The five tensor-decomposition formats (plus a dense passthrough).

A :class:`TDConfig` describes how one layer weight is factorized; a
:class:`CoreSet` holds the factor tensors. The same reconstruction and
contraction code runs on plain :class:`~tdnets.tensor.DenseTensor` values
(``ops=tdnets.tensor``) and on tape Variables (``ops=autodiff.traced_ops``).

Core layouts (``d`` input modes ``n_i``, ``k`` output modes ``m_j``)::

    CP       factors (n_i, R), (m_j, R); conv adds a leading (K*K, R) factor
    TUCKER2  (I, r1), (r1, r2), (r2, O); conv core is (K, K, r1, r2)
    BTT      per block: core (R_1..R_d), factors (n_i*m_i, R_i);
             conv: core (R_s, R_1..R_d) and a (K*K, R_s) factor
    TT       (r_{i-1}, n_i, m_i, r_i), r_0 = r_d = 1;
             conv: (1, K*K, r_0') prepended and r_0 = r_0'
    TR       ring of (b_i, dim_i, b_{i+1}) over dims n..., [K, K,] m...;
             the conv spatial core is (b, K, K, b')
    DENSE    (I, O) or (K, K, C_in, C_out)

Reconstructed weights have axes ``[K, K,] n_1..n_d, m_1..m_k``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import (
    InvalidConfig,
    InvalidCoreSet,
    ModePairingRequired,
    NonPositiveExtent,
    RankListLengthMismatch,
    UnsupportedFormat,
)
from .tensor import DenseTensor

__all__ = [
    "Format",
    "TDConfig",
    "CoreSet",
    "PlanStep",
    "ContractionPlan",
    "validate",
    "param_count",
    "dense_param_count",
    "compression_ratio",
    "core_shapes",
    "init_cores",
    "init_std",
    "reconstruct",
    "reconstruct_cores",
    "ring_contract",
    "contraction_plan",
    "apply_plan",
    "make_rng",
    "split_modes",
]


class Format(str, enum.Enum):
    CP = "cp"
    TUCKER2 = "tucker2"
    BTT = "btt"
    TT = "tt"
    TR = "tr"
    DENSE = "dense"

    @classmethod
    def parse(cls, value) -> "Format":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"tk2": "tucker2", "tucker": "tucker2", "bt": "btt", "btd": "btt"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise UnsupportedFormat(f"unknown format {value!r}") from None

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class TDConfig:
    format: Format
    in_modes: tuple[int, ...]
    out_modes: tuple[int, ...]
    ranks: tuple[int, ...] = ()
    kernel: int | None = None
    blocks: int = 1

    def __post_init__(self):
        object.__setattr__(self, "format", Format.parse(self.format))
        for name in ("in_modes", "out_modes", "ranks"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.kernel is not None:
            object.__setattr__(self, "kernel", int(self.kernel))
        object.__setattr__(self, "blocks", int(self.blocks))

    @property
    def is_conv(self) -> bool:
        return self.kernel is not None

    @property
    def in_size(self) -> int:
        return math.prod(self.in_modes)

    @property
    def out_size(self) -> int:
        return math.prod(self.out_modes)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        spatial = (self.kernel, self.kernel) if self.is_conv else ()
        return spatial + self.in_modes + self.out_modes

    def to_dict(self) -> dict:
        return {
            "format": self.format.value,
            "in_modes": list(self.in_modes),
            "out_modes": list(self.out_modes),
            "ranks": list(self.ranks),
            "kernel": self.kernel,
            "blocks": self.blocks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TDConfig":
        return cls(d["format"], d["in_modes"], d["out_modes"], d.get("ranks", ()), d.get("kernel"), d.get("blocks", 1))


def expected_rank_length(cfg: TDConfig) -> int:
    d, k, conv = len(cfg.in_modes), len(cfg.out_modes), cfg.is_conv
    return {
        Format.DENSE: 0,
        Format.CP: 1,
        Format.TUCKER2: 2,
        Format.BTT: d + conv,
        Format.TT: d if conv else d - 1,
        Format.TR: d + k + conv,
    }[cfg.format]


def validate(cfg: TDConfig) -> TDConfig:
    """Return ``cfg`` unchanged if it is well formed, else raise."""
    if not cfg.in_modes or not cfg.out_modes:
        raise NonPositiveExtent("in_modes and out_modes must be non-empty")
    for name, vals in (("in_modes", cfg.in_modes), ("out_modes", cfg.out_modes), ("ranks", cfg.ranks)):
        if any(v <= 0 for v in vals):
            raise NonPositiveExtent(f"{name} must be positive, got {list(vals)}")
    if cfg.kernel is not None and cfg.kernel <= 0:
        raise NonPositiveExtent(f"kernel must be positive, got {cfg.kernel}")
    if cfg.blocks <= 0:
        raise NonPositiveExtent(f"blocks must be positive, got {cfg.blocks}")
    if cfg.format in (Format.TT, Format.BTT) and len(cfg.in_modes) != len(cfg.out_modes):
        raise ModePairingRequired(
            f"{cfg.format.value} pairs input and output modes; got d={len(cfg.in_modes)}, k={len(cfg.out_modes)}"
        )
    want = expected_rank_length(cfg)
    if len(cfg.ranks) != want:
        kind = "conv" if cfg.is_conv else "linear"
        raise RankListLengthMismatch(
            f"{cfg.format.value} {kind} with d={len(cfg.in_modes)}, k={len(cfg.out_modes)} "
            f"needs {want} ranks, got {len(cfg.ranks)}"
        )
    return cfg


def dense_param_count(cfg: TDConfig) -> int:
    """Weight entries of the unfactorized layer (bias excluded)."""
    spatial = cfg.kernel**2 if cfg.is_conv else 1
    return spatial * cfg.in_size * cfg.out_size


def param_count(cfg: TDConfig) -> int:
    """Stored scalars of the factorization (bias excluded)."""
    validate(cfg)
    n, m, r = cfg.in_modes, cfg.out_modes, cfg.ranks
    kk = cfg.kernel**2 if cfg.is_conv else 0
    f = cfg.format
    if f is Format.DENSE:
        return dense_param_count(cfg)
    if f is Format.CP:
        return r[0] * (sum(n) + sum(m) + kk)
    if f is Format.TUCKER2:
        return cfg.in_size * r[0] + max(kk, 1) * r[0] * r[1] + r[1] * cfg.out_size
    if f is Format.BTT:
        if cfg.is_conv:
            rs, rr = r[0], r[1:]
            per_block = rs * math.prod(rr) + kk * rs
        else:
            rr = r
            per_block = math.prod(rr)
        per_block += sum(ni * mi * ri for ni, mi, ri in zip(n, m, rr))
        return cfg.blocks * per_block
    if f is Format.TT:
        if cfg.is_conv:
            bonds = list(r) + [1]
            total = kk * r[0]
        else:
            bonds = [1] + list(r) + [1]
            total = 0
        return total + sum(bonds[i] * n[i] * m[i] * bonds[i + 1] for i in range(len(n)))
    if f is Format.TR:
        dims = list(n) + ([kk] if cfg.is_conv else []) + list(m)
        c = len(dims)
        return sum(r[i] * dims[i] * r[(i + 1) % c] for i in range(c))
    raise UnsupportedFormat(str(f))


def compression_ratio(cfg: TDConfig) -> float:
    return dense_param_count(cfg) / param_count(cfg)


def core_shapes(cfg: TDConfig) -> list[tuple[str, tuple[int, ...]]]:
    """``(role, shape)`` for every core in storage order."""
    validate(cfg)
    n, m, r, K = cfg.in_modes, cfg.out_modes, cfg.ranks, cfg.kernel
    f = cfg.format
    out: list[tuple[str, tuple[int, ...]]] = []
    if f is Format.DENSE:
        shape = (K, K, cfg.in_size, cfg.out_size) if cfg.is_conv else (cfg.in_size, cfg.out_size)
        out.append(("weight", shape))
    elif f is Format.CP:
        if cfg.is_conv:
            out.append(("spatial", (K * K, r[0])))
        out += [(f"in{i}", (ni, r[0])) for i, ni in enumerate(n)]
        out += [(f"out{j}", (mj, r[0])) for j, mj in enumerate(m)]
    elif f is Format.TUCKER2:
        core = (K, K, r[0], r[1]) if cfg.is_conv else (r[0], r[1])
        out += [("in_factor", (cfg.in_size, r[0])), ("core", core), ("out_factor", (r[1], cfg.out_size))]
    elif f is Format.BTT:
        rr = r[1:] if cfg.is_conv else r
        for b in range(cfg.blocks):
            out.append((f"b{b}.core", tuple(r)))
            if cfg.is_conv:
                out.append((f"b{b}.spatial", (K * K, r[0])))
            out += [(f"b{b}.f{i}", (ni * mi, ri)) for i, (ni, mi, ri) in enumerate(zip(n, m, rr))]
    elif f is Format.TT:
        if cfg.is_conv:
            out.append(("spatial", (1, K * K, r[0])))
            bonds = list(r) + [1]
        else:
            bonds = [1] + list(r) + [1]
        out += [(f"core{i}", (bonds[i], ni, mi, bonds[i + 1])) for i, (ni, mi) in enumerate(zip(n, m))]
    elif f is Format.TR:
        roles = [(f"in{i}", (ni,)) for i, ni in enumerate(n)]
        if cfg.is_conv:
            roles.append(("spatial", (K, K)))
        roles += [(f"out{j}", (mj,)) for j, mj in enumerate(m)]
        c = len(roles)
        out = [(role, (r[i],) + dims + (r[(i + 1) % c],)) for i, (role, dims) in enumerate(roles)]
    return out


@dataclass(frozen=True)
class CoreSet:
    config: TDConfig
    cores: tuple[tuple[str, DenseTensor], ...] = field(default_factory=tuple)

    def __post_init__(self):
        want = core_shapes(self.config)
        got = [(role, tuple(t.shape)) for role, t in self.cores]
        if want != got:
            raise InvalidCoreSet(f"cores {got} do not match config, expected {want}")

    @property
    def tensors(self) -> list[DenseTensor]:
        return [t for _, t in self.cores]

    @property
    def roles(self) -> list[str]:
        return [role for role, _ in self.cores]

    def num_elements(self) -> int:
        return sum(t.size for _, t in self.cores)

    def replace(self, tensors: Sequence) -> "CoreSet":
        return CoreSet(self.config, tuple((role, tc.as_tensor(t)) for role, t in zip(self.roles, tensors)))


def make_rng(seed) -> np.random.Generator:
    """The project-wide generator: PCG64."""
    return np.random.Generator(np.random.PCG64(seed))


def _path_structure(cfg: TDConfig) -> tuple[int, int]:
    """(cores multiplied along one reconstruction path, summed-index count)."""
    n, r = cfg.in_modes, cfg.ranks
    conv = int(cfg.is_conv)
    f = cfg.format
    if f is Format.DENSE:
        return 1, 1
    if f is Format.CP:
        return len(n) + len(cfg.out_modes) + conv, r[0]
    if f is Format.TUCKER2:
        return 3, r[0] * r[1]
    if f is Format.BTT:
        return len(n) + 1 + conv, cfg.blocks * math.prod(r)
    if f is Format.TT:
        return len(n) + conv, math.prod(r)
    if f is Format.TR:
        return len(r), math.prod(r)
    raise UnsupportedFormat(str(f))


def init_std(cfg: TDConfig, target_std: float) -> float:
    """Per-core std making reconstructed entries have std ``target_std``."""
    c, paths = _path_structure(cfg)
    return (target_std**2 / paths) ** (1.0 / (2 * c))


def init_cores(cfg: TDConfig, seed, target_std: float) -> CoreSet:
    """I.i.d. Gaussian cores, filled in storage order from one PCG64 stream."""
    if not target_std > 0:
        raise InvalidConfig(f"target_std must be positive, got {target_std}")
    shapes = core_shapes(cfg)
    sigma = init_std(cfg, target_std)
    rng = make_rng(seed)
    cores = tuple((role, DenseTensor._wrap(rng.standard_normal(shape) * sigma)) for role, shape in shapes)
    return CoreSet(cfg, cores)


# --- reconstruction -------------------------------------------------------


def _delta3(r: int) -> np.ndarray:
    d = np.zeros((r, r, r))
    idx = np.arange(r)
    d[idx, idx, idx] = 1.0
    return d


def _chain(cores, ops):
    t = cores[0]
    for c in cores[1:]:
        t = ops.contract(t, c, [len(t.shape) - 1], [0])
    return t


def ring_contract(cores: Sequence, ops=tc):
    """Close a ring of ``(b_i, *dims_i, b_{i+1})`` cores; axes follow core order."""
    t = _chain(list(cores), ops)
    b0 = t.shape[0]
    return ops.contract(t, np.eye(b0), [0, len(t.shape) - 1], [0, 1])


def reconstruct_cores(cfg: TDConfig, cores: Sequence, ops=tc):
    """Full weight from raw core values (DenseTensors or Variables)."""
    n, m, K = cfg.in_modes, cfg.out_modes, cfg.kernel
    d, k = len(n), len(m)
    spatial = (K, K) if cfg.is_conv else ()
    f = cfg.format
    cores = list(cores)
    if f is Format.DENSE:
        return ops.reshape(cores[0], cfg.weight_shape)
    if f is Format.CP:
        delta = _delta3(cfg.ranks[0])
        t = cores[0]
        for fac in cores[1:-1]:
            t = ops.contract(t, ops.contract(fac, delta, [1], [0]), [len(t.shape) - 1], [1])
        t = ops.contract(t, cores[-1], [len(t.shape) - 1], [1])
        return ops.reshape(t, cfg.weight_shape)
    if f is Format.TUCKER2:
        u_in, core, u_out = cores
        if cfg.is_conv:
            t = ops.contract(u_in, core, [1], [2])  # (Cin, K, K, r2)
            t = ops.contract(t, u_out, [3], [0])  # (Cin, K, K, Cout)
            t = ops.permute(t, [1, 2, 0, 3])
        else:
            t = ops.contract(ops.contract(u_in, core, [1], [0]), u_out, [1], [0])
        return ops.reshape(t, cfg.weight_shape)
    if f is Format.BTT:
        per = 1 + int(cfg.is_conv) + d
        total = None
        split = [s for i in range(d) for s in (n[i], m[i])]
        order = list(range(len(spatial)))
        order += [len(spatial) + 2 * i for i in range(d)] + [len(spatial) + 2 * i + 1 for i in range(d)]
        for b in range(cfg.blocks):
            block = cores[b * per : (b + 1) * per]
            t = block[0]
            for fac in block[1:]:
                t = ops.contract(t, fac, [0], [1])
            t = ops.permute(ops.reshape(t, spatial + tuple(split)), order)
            total = t if total is None else ops.add(total, t)
        return total
    if f is Format.TT:
        t = _chain(cores, ops)
        # (1, [K*K,] n1, m1, ..., nd, md, 1)
        split = [s for i in range(d) for s in (n[i], m[i])]
        t = ops.reshape(t, spatial + tuple(split))
        off = len(spatial)
        order = list(range(off)) + [off + 2 * i for i in range(d)] + [off + 2 * i + 1 for i in range(d)]
        return ops.permute(t, order)
    if f is Format.TR:
        t = ring_contract(cores, ops)  # (n..., [K, K,] m...)
        if cfg.is_conv:
            t = ops.permute(t, [d, d + 1] + list(range(d)) + list(range(d + 2, d + 2 + k)))
        return t
    raise UnsupportedFormat(str(f))


def reconstruct(cs: CoreSet) -> DenseTensor:
    return reconstruct_cores(cs.config, cs.tensors, tc)


# --- linear forward plans -------------------------------------------------


@dataclass(frozen=True)
class PlanStep:
    """One pairwise step applied to the running tensor ``x``.

    ``absorb``: ``x = contract(x, core', x_axes, core_axes)`` where ``core'``
    is the stored core, first reshaped to ``core_shape`` if given, then (if
    ``diag_axis`` is set) expanded along that rank axis by a diagonal so the
    rank is carried through instead of summed. ``permute``/``reshape`` act on
    ``x``; ``None`` in a reshape target stands for the batch extent.
    """

    kind: str
    core: int = -1
    x_axes: tuple[int, ...] = ()
    core_axes: tuple[int, ...] = ()
    diag_axis: int | None = None
    core_shape: tuple[int, ...] | None = None
    order: tuple[int, ...] = ()
    shape: tuple[int | None, ...] = ()


@dataclass(frozen=True)
class ContractionPlan:
    """Branches are evaluated independently and summed (BTT blocks)."""

    config: TDConfig
    branches: tuple[tuple[PlanStep, ...], ...]

    @property
    def steps(self) -> tuple[PlanStep, ...]:
        return tuple(s for br in self.branches for s in br)

    def count(self, kind: str) -> int:
        return sum(1 for s in self.steps if s.kind == kind)


class _Builder:
    """Tracks axis labels of the running tensor to emit integer-axis steps."""

    def __init__(self, labels):
        self.labels = list(labels)
        self.steps: list[PlanStep] = []

    def absorb(self, core: int, core_labels, diag: str | None = None, core_shape=None):
        core_labels = list(core_labels)
        shared = [lab for lab in self.labels if lab in core_labels]
        diag_axis = None
        if diag is not None:
            # After expansion the core's diag axis becomes (diag_in, diag_out)
            # appended at the end; only diag_in is summed.
            diag_axis = core_labels.index(diag)
            core_labels = [lab for lab in core_labels if lab != diag] + [diag, diag + "'"]
        x_axes = tuple(self.labels.index(lab) for lab in shared)
        core_axes = tuple(core_labels.index(lab) for lab in shared)
        self.steps.append(PlanStep("absorb", core, x_axes, core_axes, diag_axis, core_shape))
        self.labels = [lab for lab in self.labels if lab not in shared] + [
            lab for lab in core_labels if lab not in shared
        ]
        if diag is not None:
            self.labels = [diag if lab == diag + "'" else lab for lab in self.labels]

    def finish(self, out_labels, out_size):
        rest = [lab for lab in self.labels if lab != "batch" and lab not in out_labels]
        order = ["batch"] + list(out_labels) + rest
        perm = tuple(self.labels.index(lab) for lab in order)
        if perm != tuple(range(len(perm))):
            self.steps.append(PlanStep("permute", order=perm))
        self.steps.append(PlanStep("reshape", shape=(None, out_size)))
        return tuple(self.steps)


def contraction_plan(cfg: TDConfig) -> ContractionPlan:
    """Left-to-right pairwise plan taking ``[batch, n_1..n_d]`` to ``[batch, O]``."""
    validate(cfg)
    if cfg.is_conv:
        raise UnsupportedFormat("contraction plans cover linear configs; conv layers reconstruct")
    f = cfg.format
    d, k = len(cfg.in_modes), len(cfg.out_modes)
    ins = [f"n{i}" for i in range(d)]
    outs = [f"m{j}" for j in range(k)]
    x0 = ["batch"] + ins
    O = cfg.out_size
    if f is Format.DENSE:
        raise UnsupportedFormat("dense layers have no contraction plan")
    if f is Format.CP:
        b = _Builder(x0)
        factors = ins + outs
        for i, lab in enumerate(factors):
            first, last = i == 0, i == len(factors) - 1
            b.absorb(i, [lab, "r"], diag=None if (first or last) else "r")
        return ContractionPlan(cfg, (b.finish(outs, O),))
    if f is Format.TUCKER2:
        b = _Builder(x0)
        b.steps.append(PlanStep("reshape", shape=(None, cfg.in_size)))
        b.labels = ["batch", "I"]
        b.absorb(0, ["I", "r1"])
        b.absorb(1, ["r1", "r2"])
        b.absorb(2, ["r2", "O"])
        return ContractionPlan(cfg, (b.finish(["O"], O),))
    if f is Format.BTT:
        branches = []
        per = 1 + d
        for blk in range(cfg.blocks):
            b = _Builder(x0)
            for i in range(d):
                shape = (cfg.in_modes[i], cfg.out_modes[i], cfg.ranks[i])
                b.absorb(blk * per + 1 + i, [ins[i], outs[i], f"R{i}"], core_shape=shape)
            b.absorb(blk * per, [f"R{i}" for i in range(d)])
            branches.append(b.finish(outs, O))
        return ContractionPlan(cfg, tuple(branches))
    if f is Format.TT:
        b = _Builder(x0)
        for i in range(d):
            b.absorb(i, [f"a{i}", ins[i], outs[i], f"a{i + 1}"])
        return ContractionPlan(cfg, (b.finish(outs, O),))
    if f is Format.TR:
        b = _Builder(x0)
        dims = ins + outs
        c = len(dims)
        for i, lab in enumerate(dims):
            b.absorb(i, [f"b{i}", lab, f"b{(i + 1) % c}"])
        return ContractionPlan(cfg, (b.finish(outs, O),))
    raise UnsupportedFormat(str(f))


def apply_plan(plan: ContractionPlan, x, cores: Sequence, ops=tc):
    """Run ``plan`` on ``x`` of shape ``[batch, n_1..n_d]``."""
    batch = x.shape[0]
    total = None
    for branch in plan.branches:
        t = x
        for step in branch:
            if step.kind == "absorb":
                core = cores[step.core]
                if step.core_shape is not None:
                    core = ops.reshape(core, step.core_shape)
                if step.diag_axis is not None:
                    r = core.shape[step.diag_axis]
                    core = ops.contract(core, _delta3(r), [step.diag_axis], [0])
                t = ops.contract(t, core, step.x_axes, step.core_axes)
            elif step.kind == "permute":
                t = ops.permute(t, step.order)
            elif step.kind == "reshape":
                t = ops.reshape(t, tuple(batch if s is None else s for s in step.shape))
            else:
                raise ValueError(f"unknown plan step {step.kind!r}")
        total = t if total is None else ops.add(total, t)
    return total


def split_modes(n: int, d: int) -> tuple[int, ...]:
    """Factor ``n`` into ``d`` near-balanced ascending factors (1s allowed)."""
    primes = []
    x, p = n, 2
    while p * p <= x:
        while x % p == 0:
            primes.append(p)
            x //= p
        p += 1
    if x > 1:
        primes.append(x)
    modes = [1] * d
    for q in sorted(primes, reverse=True):
        i = min(range(d), key=lambda j: (modes[j], j))
        modes[i] *= q
    return tuple(sorted(modes))
