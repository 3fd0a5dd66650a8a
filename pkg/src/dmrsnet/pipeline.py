"""Denoise -> linear interpolation -> refine, with per-sample normalization.

Also owns the named-tensor weight container (32-bit or 16-bit storage).
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .denoiser import DenoiseConfig, Denoiser, csif_inputs
from .grid import ChannelGrid, DmrsGrid, DmrsPattern, interp_matrices
from .ops import init_parameters
from .refiner import RefineConfig, Refiner

ORDERS = ("dlr", "refine_first")

WEIGHTS_MAGIC = b"DLRW"
WEIGHTS_VERSION = 1
DTYPE_CODES = {"f32": 0, "f16": 1}
_NP_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}


class WeightsFormatError(ValueError):
    pass


class LinearStage(nn.Module):
    """Fixed separable interpolation ``(B, 48, 2, 2) -> (B, 96, 14, 2)`` and its pilot selector."""

    def __init__(self, pattern: DmrsPattern):
        super().__init__()
        self.pattern = pattern
        kf, kt = interp_matrices(pattern)
        self.register_buffer("kf", torch.tensor(kf, dtype=torch.float32), persistent=False)
        self.register_buffer("kt", torch.tensor(kt, dtype=torch.float32), persistent=False)
        self.register_buffer("fi", torch.tensor(pattern.freq_indices), persistent=False)
        self.register_buffer("ti", torch.tensor(pattern.time_indices), persistent=False)

    def forward(self, dmrs):
        return torch.einsum("fk,bksp,ts->bftp", self.kf.to(dmrs.dtype), dmrs, self.kt.to(dmrs.dtype))

    def extract(self, grid):
        return grid[:, self.fi][:, :, self.ti]


def normalize(dmrs: torch.Tensor, eps: float):
    """Divide each sample by ``max(rms, eps)``; rms over complex entries.

    Returns ``(normalized, scale)`` with ``scale`` shaped ``(B,)``.
    """
    n_entries = dmrs.shape[1] * dmrs.shape[2]
    rms = torch.sqrt(dmrs.pow(2).sum(dim=(1, 2, 3)) / n_entries)
    scale = torch.clamp(rms, min=eps)
    return dmrs / scale[:, None, None, None], scale


def denormalize(x: torch.Tensor, scale: torch.Tensor):
    return x * scale.reshape(-1, *([1] * (x.dim() - 1)))


def raw_csif(dmrs: torch.Tensor, snr_db: torch.Tensor) -> torch.Tensor:
    """``(B, 3)`` of ``[mean, population variance, snr_db]`` from unnormalized pilots."""
    flat = dmrs.reshape(dmrs.shape[0], -1)
    mean = flat.mean(dim=1)
    var = (flat - mean[:, None]).pow(2).mean(dim=1)
    return torch.stack([mean, var, snr_db.to(flat.dtype)], dim=1)


class DlrModel(nn.Module):
    def __init__(
        self,
        denoise_config: DenoiseConfig = DenoiseConfig(),
        refine_config: RefineConfig = RefineConfig(),
        pattern: DmrsPattern | None = None,
        norm_epsilon: float = 1e-6,
    ):
        super().__init__()
        if not norm_epsilon > 0:
            raise ValueError("norm_epsilon must be positive")
        self.denoise_config = denoise_config
        self.refine_config = refine_config
        self.pattern = pattern or DmrsPattern()
        self.norm_epsilon = norm_epsilon
        self.denoiser = Denoiser(denoise_config)
        self.refiner = Refiner(refine_config)
        self.linear = LinearStage(self.pattern)

    def forward(self, dmrs, snr_db, order="dlr", csif=None, csif_enabled=True):
        """Full-grid estimate at physical scale.

        ``dmrs`` is ``(B, 48, 2, 2)``, ``snr_db`` ``(B,)``. ``csif`` optionally
        overrides the raw ``[mean, var, snr_db]`` statistics.
        """
        if order not in ORDERS:
            raise ValueError(f"unknown pipeline order {order!r}")
        if csif is None:
            csif = raw_csif(dmrs, torch.as_tensor(snr_db))
        c = csif_inputs(csif).to(dmrs.dtype)
        if not csif_enabled:
            c = torch.zeros_like(c)
        x, scale = normalize(dmrs, self.norm_epsilon)
        if order == "dlr":
            denoised = self.denoiser(x, c)
            out = self.refiner(self.linear(denoised), c)
        else:
            refined = self.refiner(self.linear(x), c)
            out = self.linear(self.denoiser(self.linear.extract(refined), c))
        return denormalize(out, scale)

    def stages(self, dmrs, snr_db):
        """Intermediate tensors of the DLR order, for inspection."""
        csif = raw_csif(dmrs, torch.as_tensor(snr_db))
        c = csif_inputs(csif)
        x, scale = normalize(dmrs, self.norm_epsilon)
        denoised = self.denoiser(x, c)
        coarse = self.linear(denoised)
        return {"normalized": x, "scale": scale, "denoised": denoised, "coarse": coarse, "refined": self.refiner(coarse, c)}

    def configs(self) -> dict:
        return {
            "denoise": asdict(self.denoise_config),
            "refine": asdict(self.refine_config),
            "pattern": {"freq_indices": list(self.pattern.freq_indices), "time_indices": list(self.pattern.time_indices)},
            "norm_epsilon": self.norm_epsilon,
        }

    @classmethod
    def from_configs(cls, cfg: dict) -> "DlrModel":
        d = dict(cfg.get("denoise", {}))
        for key in ("windows", "heads"):
            if key in d:
                d[key] = tuple(d[key])
        pat = cfg.get("pattern")
        return cls(
            DenoiseConfig(**d),
            RefineConfig(**cfg.get("refine", {})),
            DmrsPattern(pat["freq_indices"], pat["time_indices"]) if pat else None,
            cfg.get("norm_epsilon", 1e-6),
        )


def build_model(denoise_config=DenoiseConfig(), refine_config=RefineConfig(), pattern=None, seed=0, norm_epsilon=1e-6) -> DlrModel:
    model = DlrModel(denoise_config, refine_config, pattern, norm_epsilon)
    init_parameters(model, seed)
    return model


def zero_output_projections(model: DlrModel) -> None:
    """Zero both networks' final layers so each reduces to its residual path."""
    with torch.no_grad():
        for layer in (model.denoiser.out_proj, model.refiner.final):
            layer.weight.zero_()
            layer.bias.zero_()


def _as_batch(dmrs, snr_db):
    if isinstance(dmrs, DmrsGrid):
        dmrs = dmrs.to_array()[None]
    x = torch.from_numpy(np.array(dmrs, dtype=np.float32))
    snr = torch.as_tensor(np.broadcast_to(np.asarray(snr_db, dtype=np.float32), (x.shape[0],)).copy())
    return x, snr


def dlr_forward(model: DlrModel, dmrs_noisy, snr_db, order="dlr", csif_enabled=True) -> ChannelGrid | np.ndarray:
    """Inference entry point. A single :class:`DmrsGrid` yields a :class:`ChannelGrid`;
    a ``(B, 48, 2, 2)`` array yields a float32 ``(B, 96, 14, 2)`` array."""
    single = isinstance(dmrs_noisy, DmrsGrid)
    x, snr = _as_batch(dmrs_noisy, snr_db)
    with torch.no_grad():
        out = model(x, snr, order=order, csif_enabled=csif_enabled).numpy()
    return ChannelGrid.from_array(out[0].astype(np.float64)) if single else out


def linear_path(dmrs: torch.Tensor, linear: LinearStage, eps: float) -> torch.Tensor:
    """Normalize, interpolate, denormalize: the pipeline with both networks removed."""
    x, scale = normalize(dmrs, eps)
    return denormalize(linear(x), scale)


def baseline_linear(dmrs_noisy, pattern: DmrsPattern, eps: float = 1e-6):
    single = isinstance(dmrs_noisy, DmrsGrid)
    x, _ = _as_batch(dmrs_noisy, 0.0)
    with torch.no_grad():
        out = linear_path(x, LinearStage(pattern), eps).numpy()
    return ChannelGrid.from_array(out[0].astype(np.float64)) if single else out


# --- weight container -----------------------------------------------------


def save_weights(model_or_tree, path, dtype: str = "f32") -> None:
    """Write the named tensors. 16-bit storage rounds to nearest-even."""
    if dtype not in DTYPE_CODES:
        raise ValueError(f"dtype must be one of {sorted(DTYPE_CODES)}, got {dtype!r}")
    tree = model_or_tree.state_dict() if isinstance(model_or_tree, nn.Module) else model_or_tree
    code = DTYPE_CODES[dtype]
    np_dtype = _NP_DTYPES[code]
    parts = [WEIGHTS_MAGIC, struct.pack("<IBI", WEIGHTS_VERSION, code, len(tree))]
    for name, t in tree.items():
        arr = t.detach().cpu().numpy().astype(np.float32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype(np_dtype).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> tuple["OrderedDict[str, torch.Tensor]", str]:
    """Read a weight file into 32-bit tensors; returns ``(tree, stored_dtype)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic, not a DLRW weight file")
    try:
        version, code, count = struct.unpack_from("<IBI", buf, 4)
        if version != WEIGHTS_VERSION:
            raise WeightsFormatError(f"{path}: version mismatch, file has {version}")
        if code not in _NP_DTYPES:
            raise WeightsFormatError(f"{path}: unknown dtype code {code}")
        np_dtype = _NP_DTYPES[code]
        pos = 4 + struct.calcsize("<IBI")
        tree = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize
            if pos + size > len(buf):
                raise WeightsFormatError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(buf, dtype=np_dtype, count=size // np_dtype.itemsize, offset=pos)
            pos += size
            tree[name] = torch.from_numpy(arr.astype(np.float32).reshape(dims))
    except struct.error as exc:
        raise WeightsFormatError(f"{path}: truncated header ({exc})") from None
    if pos != len(buf):
        raise WeightsFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    dtype = next(k for k, v in DTYPE_CODES.items() if v == code)
    return tree, dtype


def payload_bytes(path) -> int:
    """Bytes occupied by raw scalars only (headers excluded)."""
    tree, dtype = load_weights(path)
    itemsize = _NP_DTYPES[DTYPE_CODES[dtype]].itemsize
    return sum(t.numel() for t in tree.values()) * itemsize


def apply_weights(model: DlrModel, tree) -> DlrModel:
    expected = model.state_dict()
    missing = set(expected) - set(tree)
    extra = set(tree) - set(expected)
    if missing or extra:
        raise WeightsFormatError(f"weight names do not match config: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for name, t in tree.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise WeightsFormatError(f"tensor {name!r} has shape {tuple(t.shape)}, config expects {tuple(expected[name].shape)}")
    model.load_state_dict(tree)
    return model


def config_path(path) -> Path:
    return Path(str(path) + ".json")


def save_model(model: DlrModel, path, dtype="f32") -> None:
    """Weights plus a JSON sidecar holding the configs needed to rebuild the model."""
    save_weights(model, path, dtype)
    config_path(path).write_text(json.dumps(model.configs(), indent=2))


def load_model(path, configs: dict | None = None) -> DlrModel:
    if configs is None:
        side = config_path(path)
        if not side.exists():
            raise FileNotFoundError(f"missing config sidecar {side}")
        configs = json.loads(side.read_text())
    model = DlrModel.from_configs(configs)
    tree, _ = load_weights(path)
    return apply_weights(model, tree)
