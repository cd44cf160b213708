"""On-disk filter banks and checkpoints.

A checkpoint directory holds::

    bank.json      {"layers": [{name, kind, C_out, C_in, W, H, D}, ...]}
    <layer>.base.tsr / <layer>.weight.tsr, <layer>.bias.tsr
    thetas.csv     layer,filter,step,s,r,tx,ty  (factorized layers only)
    head.weight.tsr, head.bias.tsr
    state.json     model spec and training state

A bare filter bank is the same without the head files and ``state.json``.
Floats in the CSV are written with ``repr`` so they read back bit-exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import ContractError, load_tsr, save_tsr
from .filters import identity_thetas
from .network import Model, ModelSpec, build_model

__all__ = [
    "save_bank",
    "load_bank",
    "write_thetas_csv",
    "read_thetas_csv",
    "save_checkpoint",
    "load_checkpoint",
    "BankLayer",
]

THETA_COLUMNS = ["layer", "filter", "step", "s", "r", "tx", "ty"]


class BankLayer(dict):
    """Arrays of one stored conv layer: ``base`` or ``weight``, ``thetas``, ``bias``."""

    @property
    def kind(self) -> str:
        return self["kind"]


def write_thetas_csv(path, thetas_by_layer: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(THETA_COLUMNS)
        for name, th in thetas_by_layer.items():
            for f in range(th.shape[0]):
                for t in range(th.shape[1]):
                    w.writerow([name, f, t + 1] + [repr(float(v)) for v in th[f, t]])


def read_thetas_csv(path, shapes: dict[str, tuple[int, int]]) -> dict[str, np.ndarray]:
    """``shapes`` maps layer name to ``(C_out, D)``; missing rows are an error."""
    out = {name: np.full((c, max(d - 1, 0), 4), np.nan) for name, (c, d) in shapes.items()}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != THETA_COLUMNS:
            raise ContractError(f"{path}: expected columns {THETA_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            name = row["layer"]
            if name not in out:
                raise ContractError(f"{path}: thetas for unknown layer {name!r}")
            f, t = int(row["filter"]), int(row["step"]) - 1
            arr = out[name]
            if not (0 <= f < arr.shape[0] and 0 <= t < arr.shape[1]):
                raise ContractError(f"{path}: row {name}/{f}/{t + 1} outside the layer geometry")
            arr[f, t] = [float(row[k]) for k in ("s", "r", "tx", "ty")]
    for name, arr in out.items():
        if np.isnan(arr).any():
            raise ContractError(f"{path}: missing theta rows for layer {name!r}")
    return out


def save_bank(path, model: Model) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, thetas = [], {}
    for layer in model.conv_layers:
        g = layer.geometry
        entries.append({"name": layer.name, "kind": layer.kind, "C_out": g.c_out, "C_in": g.c_in,
                        "W": g.kernel[1], "H": g.kernel[2], "D": g.kernel[0]})
        if layer.kind == "conv3t":
            save_tsr(path / f"{layer.name}.base.tsr", layer.base.data)
            thetas[layer.name] = layer.thetas.data
        else:
            save_tsr(path / f"{layer.name}.weight.tsr", layer.weight_.data)
        save_tsr(path / f"{layer.name}.bias.tsr", layer.bias.data)
    (path / "bank.json").write_text(json.dumps({"layers": entries}, indent=2) + "\n")
    write_thetas_csv(path / "thetas.csv", thetas)


def load_bank(path) -> dict[str, BankLayer]:
    path = Path(path)
    manifest_path = path / "bank.json"
    if not manifest_path.is_file():
        raise ContractError(f"{path} is not a filter bank (no bank.json)")
    entries = json.loads(manifest_path.read_text())["layers"]
    shapes = {e["name"]: (e["C_out"], e["D"]) for e in entries if e["kind"] == "conv3t"}
    thetas = read_thetas_csv(path / "thetas.csv", shapes) if shapes else {}
    out = {}
    for e in entries:
        layer = BankLayer(e)
        if e["kind"] == "conv3t":
            layer["base"] = load_tsr(path / f"{e['name']}.base.tsr")
            layer["thetas"] = thetas[e["name"]]
            expected = (e["C_out"], e["C_in"], e["W"], e["H"])
            got = layer["base"].shape
        else:
            layer["weight"] = load_tsr(path / f"{e['name']}.weight.tsr")
            expected = (e["C_out"], e["C_in"], e["D"], e["W"], e["H"])
            got = layer["weight"].shape
        if tuple(got) != expected:
            raise ContractError(f"{e['name']}: stored shape {tuple(got)} does not match manifest {expected}")
        layer["bias"] = load_tsr(path / f"{e['name']}.bias.tsr")
        out[e["name"]] = layer
    return out


def save_checkpoint(path, model: Model, train_state: dict | None = None) -> None:
    path = Path(path)
    save_bank(path, model)
    save_tsr(path / "head.weight.tsr", model.head.weight_.data)
    save_tsr(path / "head.bias.tsr", model.head.bias.data)
    state = {"spec": model.spec.to_dict(), "train": train_state or {}}
    (path / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if not (path / "state.json").is_file():
        raise ContractError(f"{path} is not a checkpoint (no state.json)")
    state = json.loads((path / "state.json").read_text())
    model = build_model(ModelSpec(**state["spec"]))
    bank = load_bank(path)
    for layer in model.conv_layers:
        if layer.name not in bank:
            raise ContractError(f"checkpoint has no layer {layer.name!r}")
        stored = bank[layer.name]
        if stored.kind != layer.kind:
            raise ContractError(f"{layer.name}: stored {stored.kind}, model expects {layer.kind}")
        if layer.kind == "conv3t":
            _assign(layer.base, stored["base"])
            _assign(layer.thetas, stored["thetas"] if stored["thetas"].size
                    else identity_thetas(layer.base.shape[0], layer.depth))
        else:
            _assign(layer.weight_, stored["weight"])
        _assign(layer.bias, stored["bias"])
    _assign(model.head.weight_, load_tsr(path / "head.weight.tsr"))
    _assign(model.head.bias, load_tsr(path / "head.bias.tsr"))
    return model, state.get("train", {})


def _assign(param, value) -> None:
    value = np.asarray(value)
    if value.shape != param.shape:
        raise ContractError(f"{param.name}: stored shape {value.shape} != {param.shape}")
    param.data = value.astype(np.float64, copy=True)
