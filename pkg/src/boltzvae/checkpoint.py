"""Single-file model checkpoints: JSON header plus raw float64 payload.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON
header, then the named arrays concatenated as little-endian float64.  The
header carries the graph, hierarchy scheme, layer specs, and array shapes,
so evaluation needs nothing from the original run config.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import vae
from .graph import Connectivity, hierarchy_mapping
from .nets import HierEncoder, LayerSpec, NetStack
from .rbm import BmParams

MAGIC = b"BVZ1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _spec_doc(spec: LayerSpec) -> dict:
    return {
        "kind": spec.kind,
        "in_dim": spec.in_dim,
        "out_dim": spec.out_dim,
        "use_batchnorm": spec.use_batchnorm,
        "dropout_rate": spec.dropout_rate,
    }


def _stack_docs(stack: NetStack) -> list[dict]:
    return [_spec_doc(s) for s in stack.specs]


def _collect_arrays(model: vae.VaeModel) -> list[tuple[str, np.ndarray]]:
    arrays = [(name, value) for name, value, _ in model.parameters()]
    arrays += list(model.state_arrays())
    return arrays


def save_model(path, model: vae.VaeModel, extra: dict | None = None) -> None:
    arrays = _collect_arrays(model)
    index = []
    offset = 0
    for name, value in arrays:
        index.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += value.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "graph": json.loads(model.conn.to_json()),
        "mapping_scheme": model.mapping.scheme,
        "tau": model.tau,
        "stacks": {
            "trunk": _stack_docs(model.encoder.trunk),
            "head1": _stack_docs(model.encoder.head1),
            "head2": _stack_docs(model.encoder.head2),
            "decoder": _stack_docs(model.decoder),
        },
        "arrays": index,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, value in arrays:
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def _stack_from_docs(docs: list[dict], rng) -> NetStack:
    specs = [
        LayerSpec(d["kind"], d["in_dim"], d["out_dim"], d["use_batchnorm"], d["dropout_rate"])
        for d in docs
    ]
    return NetStack(specs, rng)


def load_model(path) -> tuple[vae.VaeModel, dict]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format {header.get('format_version')} unsupported; "
            f"this build reads version {FORMAT_VERSION}"
        )
    conn = Connectivity.from_json(json.dumps(header["graph"]))
    mapping = hierarchy_mapping(conn, header["mapping_scheme"])
    rng = np.random.default_rng(0)
    stacks = header["stacks"]
    encoder = HierEncoder(
        _stack_from_docs(stacks["trunk"], rng),
        _stack_from_docs(stacks["head1"], rng),
        _stack_from_docs(stacks["head2"], rng),
        mapping,
        conn.num_nodes,
    )
    decoder = _stack_from_docs(stacks["decoder"], rng)
    model = vae.VaeModel(conn, mapping, BmParams.zeros(conn), encoder, decoder, header["tau"])
    targets = {name: value for name, value, _ in model.parameters()}
    targets.update(dict(model.state_arrays()))
    for entry in header["arrays"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in targets:
            raise CheckpointError(f"{path}: unknown array {name!r}")
        size = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
        if targets[name].shape != shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}")
        targets[name][...] = flat.reshape(shape)
    return model, header.get("extra", {})
