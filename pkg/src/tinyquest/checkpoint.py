"""QCKP checkpoints: model parameters, quantizer state and a provenance block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binfmt import FormatError, read_container, write_container
from .diffusion import ToyUNet, layer_selection
from .finetune import QuantizedModel
from .quant import FakeQuantizer, TimeAwareQuantizerSet

QCKP_MAGIC = b"QCKP"
QCKP_VERSION = 1


class ConfigMismatchError(RuntimeError):
    def __init__(self, path, expected: str, found: str):
        super().__init__(f"{path}: config hash {found[:12]} differs from the current config {expected[:12]}; "
                         "rerun the producing command or pass --allow-config-mismatch")
        self.expected = expected
        self.found = found


@dataclass
class Checkpoint:
    model: ToyUNet | QuantizedModel
    provenance: dict = field(default_factory=dict)

    @property
    def quantized(self) -> bool:
        return isinstance(self.model, QuantizedModel)

    @property
    def teacher(self) -> ToyUNet:
        return self.model.base if self.quantized else self.model

    def check_hash(self, expected: str, path="checkpoint", allow_mismatch: bool = False) -> None:
        found = self.provenance.get("config_hash", "")
        if found != expected and not allow_mismatch:
            raise ConfigMismatchError(path, expected, found)


def _quantizer_meta(fq: FakeQuantizer) -> dict:
    return {"bits": fq.bits, "signed": fq.signed, "learnable": fq.scale_learnable, "frozen": fq.frozen,
            "name": fq.name, "shape": list(fq.scale.shape)}


def _quantizer_records(prefix: str, fq: FakeQuantizer) -> list[tuple[str, np.ndarray]]:
    return [(f"{prefix}/scale", fq.scale.data.astype("<f4")), (f"{prefix}/zero_point", fq.zero_point.astype("<i4"))]


def _restore_quantizer(meta: dict, arrays: dict, prefix: str) -> FakeQuantizer:
    fq = FakeQuantizer(arrays[f"{prefix}/scale"].copy(), arrays[f"{prefix}/zero_point"].astype(np.int64),
                       meta["bits"], meta["signed"], scale_learnable=meta["learnable"], frozen=meta["frozen"],
                       name=meta["name"])
    fq.scale.data = fq.scale.data.reshape(meta["shape"])
    fq.zero_point = fq.zero_point.reshape(meta["shape"]) if fq.zero_point.size > 1 else fq.zero_point
    return fq


def save_checkpoint(path, model: ToyUNet | QuantizedModel, provenance: dict | None = None) -> None:
    quantized = isinstance(model, QuantizedModel)
    base = model.base if quantized else model
    header: dict = {"kind": "quantized" if quantized else "teacher", "arch": base.config,
                    "provenance": dict(provenance or {})}
    records = [(f"param/{name}", arr.astype("<f4")) for name, arr in sorted(base.state_arrays().items())]
    if quantized:
        header["provenance"]["stage_history"] = list(model.history)
        qset = model.act_quantizers
        header["weight_quantizers"] = {lid: _quantizer_meta(fq) for lid, fq in sorted(model.weight_quantizers.items())}
        header["act_quantizers"] = {"T": qset.T, "num_clusters": qset.num_clusters,
                                    "entries": [[lid, k, _quantizer_meta(fq)]
                                                for (lid, k), fq in sorted(qset.quantizers.items())]}
        for lid, fq in sorted(model.weight_quantizers.items()):
            records += _quantizer_records(f"wq/{lid}", fq)
        for (lid, k), fq in sorted(qset.quantizers.items()):
            records += _quantizer_records(f"aq/{lid}/{k}", fq)
    write_container(path, QCKP_MAGIC, QCKP_VERSION, header, records)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path, QCKP_MAGIC, QCKP_VERSION)
    if header.get("kind") not in ("teacher", "quantized"):
        raise FormatError(f"{path}: unknown checkpoint kind {header.get('kind')!r}")
    arch = header["arch"]
    base = ToyUNet(arch["resolution"], arch["in_channels"], tuple(arch["channels"]), arch["d_e"], arch["d_temb"],
                   init="zeros")
    base.load_state_arrays({k.removeprefix("param/"): v for k, v in arrays.items() if k.startswith("param/")})
    provenance = header.get("provenance", {})
    if header["kind"] == "teacher":
        return Checkpoint(base, provenance)
    base.set_requires_grad(False)
    weight_q = {lid: _restore_quantizer(meta, arrays, f"wq/{lid}") for lid, meta in header["weight_quantizers"].items()}
    aq = header["act_quantizers"]
    qset = TimeAwareQuantizerSet(aq["T"], aq["num_clusters"])
    for lid, k, meta in aq["entries"]:
        qset.quantizers[(lid, k)] = _restore_quantizer(meta, arrays, f"aq/{lid}/{k}")
    qm = QuantizedModel(base, weight_q, qset, layer_selection(base), list(provenance.get("stage_history", [])))
    return Checkpoint(qm, provenance)
