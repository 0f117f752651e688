"""JSON files for networks, properties and certificates.

Floats are written with Python's shortest round-trip repr, so a load gives back
bit-identical arrays and certificate checks agree before and after a save.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .network import AffineLayer, Network, ReluLayer
from .verifier import Box, Certificate, Fairness, IsLabel, NotLabel, Reachability, Robustness


class FormatError(ValueError):
    """A file does not have the expected structure."""


def _floats(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def _array(v, path, what) -> np.ndarray:
    try:
        return np.array(v, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {what} is not numeric") from exc


# -- networks ----------------------------------------------------------------------


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, AffineLayer):
            layers.append({"kind": "affine", "weights": _floats(layer.weights), "bias": _floats(layer.bias)})
        else:
            layers.append({"kind": "relu"})
    d = {"input_dim": net.input_dim, "layers": layers}
    if net.old_param_mask is not None:
        d["old_param_mask"] = np.asarray(net.old_param_mask, dtype=bool).tolist()
    if net.frozen_mask is not None:
        d["frozen_mask"] = np.asarray(net.frozen_mask, dtype=bool).tolist()
    return d


def network_from_dict(d: dict, path="<network>") -> Network:
    try:
        layers = []
        for i, spec in enumerate(d["layers"]):
            kind = spec["kind"]
            if kind == "relu":
                layers.append(ReluLayer())
            elif kind == "affine":
                w = _array(spec["weights"], path, f"layer {i} weights")
                if w.ndim == 1 and w.size == 0:
                    w = w.reshape(0, 0)
                layers.append(AffineLayer(w, _array(spec["bias"], path, f"layer {i} bias")))
            else:
                raise FormatError(f"{path}: layer {i} has unknown kind {kind!r}")
        masks = {k: np.array(d[k], dtype=bool) for k in ("old_param_mask", "frozen_mask") if d.get(k) is not None}
        return Network(layers, int(d["input_dim"]), **masks)
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None


def save_network(net: Network, path):
    Path(path).write_text(json.dumps(network_to_dict(net)))


def load_network(path) -> Network:
    return network_from_dict(_load_json(path), path)


# -- properties --------------------------------------------------------------------


def post_to_dict(post) -> dict:
    return {"kind": "is_label" if isinstance(post, IsLabel) else "not_label", "label": post.label}


def post_from_dict(d: dict, path="<post>"):
    kinds = {"is_label": IsLabel, "not_label": NotLabel}
    if d.get("kind") not in kinds:
        raise FormatError(f"{path}: unknown post-condition kind {d.get('kind')!r}")
    return kinds[d["kind"]](int(d["label"]))


def property_to_dict(prop) -> dict:
    if isinstance(prop, Robustness):
        return {
            "kind": "robustness",
            "x0": _floats(prop.x0),
            "label": prop.y0_label,
            "epsilon": prop.epsilon,
            "clamp": list(prop.clamp) if prop.clamp is not None else None,
        }
    if isinstance(prop, Fairness):
        return {
            "kind": "fairness",
            "x": _floats(prop.x),
            "sensitive_index": prop.sensitive_index,
            "sensitive_values": list(prop.sensitive_values),
            "epsilon_other": prop.epsilon_other,
            "clamp": list(prop.clamp) if prop.clamp is not None else None,
        }
    return {"kind": "reachability", "lw": _floats(prop.pre.lw), "up": _floats(prop.pre.up), "post": post_to_dict(prop.post)}


def property_from_dict(d: dict, path="<property>"):
    kind = d.get("kind")
    clamp = tuple(d["clamp"]) if d.get("clamp") is not None else None
    try:
        if kind == "robustness":
            return Robustness(_array(d["x0"], path, "x0"), int(d["label"]), float(d["epsilon"]), clamp)
        if kind == "fairness":
            return Fairness(
                _array(d["x"], path, "x"),
                int(d["sensitive_index"]),
                list(d["sensitive_values"]),
                float(d.get("epsilon_other", 0.0)),
                clamp,
            )
        if kind == "reachability":
            return Reachability(Box(d["lw"], d["up"]), post_from_dict(d["post"], path))
    except KeyError as exc:
        raise FormatError(f"{path}: {kind} property missing field {exc}") from None
    raise FormatError(f"{path}: unknown property kind {kind!r}")


def save_properties(props: list[tuple[str, object]], path):
    Path(path).write_text(json.dumps({"properties": [{"id": pid, **property_to_dict(p)} for pid, p in props]}))


def load_properties(path) -> list[tuple[str, object]]:
    d = _load_json(path)
    items = d.get("properties") if isinstance(d, dict) else d
    if not isinstance(items, list):
        raise FormatError(f"{path}: expected a list of properties")
    out = []
    for i, item in enumerate(items):
        out.append((str(item.get("id", f"p{i}")), property_from_dict(item, f"{path}[{i}]")))
    return out


# -- certificates ------------------------------------------------------------------


def certificate_to_dict(cert: Certificate) -> dict:
    return {
        "property_id": cert.property_id,
        "variant_tag": cert.variant_tag,
        "property": property_to_dict(cert.property) if cert.property is not None else None,
        "post": post_to_dict(cert.post),
        "boxes": [{"lw": _floats(b.lw), "up": _floats(b.up)} for b in cert.boxes],
    }


def certificate_from_dict(d: dict, path="<certificate>") -> Certificate:
    try:
        boxes = [Box(_array(b["lw"], path, "lw"), _array(b["up"], path, "up")) for b in d["boxes"]]
        return Certificate(
            str(d["property_id"]),
            property_from_dict(d["property"], path) if d.get("property") is not None else None,
            post_from_dict(d["post"], path),
            boxes,
            d.get("variant_tag"),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: certificate missing field {exc}") from None


def save_certificates(certs: list[Certificate], path):
    Path(path).write_text(json.dumps({"certificates": [certificate_to_dict(c) for c in certs]}))


def load_certificates(path) -> list[Certificate]:
    d = _load_json(path)
    if not isinstance(d, dict) or not isinstance(d.get("certificates"), list):
        raise FormatError(f"{path}: expected an object with a 'certificates' list")
    return [certificate_from_dict(c, f"{path}[{i}]") for i, c in enumerate(d["certificates"])]


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
