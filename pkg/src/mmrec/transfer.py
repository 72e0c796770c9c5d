"""Component-wise checkpoint serialization and the five transfer modes.

Checkpoint layout: magic, 8-byte little-endian manifest length, a JSON
manifest (format version, model config, group -> parameter -> shape),
the raw float64 payload in manifest order, and a trailing sha256 digest
over manifest + payload. Writing is fully deterministic, so identical
models produce byte-identical files.
"""

import hashlib
import json

import numpy as np

from . import autodiff as ad
from . import objectives
from .encoders import ModelConfig
from .model import RecModel

MAGIC = b"MMRB0001"
FORMAT_VERSION = 1

TRANSFER_MODES = ("full", "item_encoders", "user_encoder", "text_only", "vision_only")

# groups carried over from the bundle, per mode
LOADED_GROUPS = {
    "full": ("text_encoder", "vision_encoder", "fusion", "user_encoder", "nid_head"),
    "item_encoders": ("text_encoder", "vision_encoder", "fusion"),
    "user_encoder": ("user_encoder",),
    "text_only": ("text_encoder", "user_encoder"),
    "vision_only": ("vision_encoder", "user_encoder"),
}

MODE_MODALITY = {
    "full": "both",
    "item_encoders": "both",
    "user_encoder": "both",
    "text_only": "text",
    "vision_only": "vision",
}


class BundleError(ValueError):
    pass


def save_bundle(model, path):
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "groups": {
            g: {p: list(t.shape) for p, t in sorted(model.groups[g].items())}
            for g in sorted(model.groups)
        },
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    payload = b"".join(
        np.ascontiguousarray(model.groups[g][p].data).tobytes()
        for g in sorted(model.groups)
        for p in sorted(model.groups[g])
    )
    digest = hashlib.sha256(mbytes + payload).digest()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(mbytes).to_bytes(8, "little"))
        f.write(mbytes)
        f.write(payload)
        f.write(digest)


def load_bundle(path):
    """Read and checksum-verify a bundle; returns (config dict, group arrays)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise BundleError(f"{path}: not a checkpoint bundle (bad magic)")
    mlen = int.from_bytes(raw[8:16], "little")
    mbytes = raw[16 : 16 + mlen]
    digest = raw[-32:]
    payload = raw[16 + mlen : -32]
    if hashlib.sha256(mbytes + payload).digest() != digest:
        raise BundleError(f"{path}: checksum mismatch, file is corrupted")
    manifest = json.loads(mbytes)
    if manifest["format_version"] != FORMAT_VERSION:
        raise BundleError(
            f"{path}: unsupported format version {manifest['format_version']}"
        )
    groups = {}
    offset = 0
    for g in sorted(manifest["groups"]):
        groups[g] = {}
        for p, shape in sorted(manifest["groups"][g].items()):
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(
                payload, dtype=np.float64, count=n, offset=offset
            ).reshape(shape).copy()
            offset += n * 8
            groups[g][p] = arr
    if offset != len(payload):
        raise BundleError(f"{path}: payload length does not match manifest")
    return manifest["config"], groups


def describe(path):
    cfg, groups = load_bundle(path)
    lines = [f"format_version={FORMAT_VERSION}  d={cfg['d']}  modality={cfg['modality']}"]
    for g in sorted(groups):
        n = sum(a.size for a in groups[g].values())
        lines.append(f"  {g}: {len(groups[g])} arrays, {n} parameters")
        for p in sorted(groups[g]):
            sha = hashlib.sha256(groups[g][p].tobytes()).hexdigest()[:12]
            lines.append(f"    {p}  shape={tuple(groups[g][p].shape)}  sha={sha}")
    return "\n".join(lines)


def load_components(path, mode, fresh_init_seed):
    """Build a model from a bundle according to the transfer mode.

    Groups the mode transfers are loaded; remaining required groups are
    freshly initialized from `fresh_init_seed`; groups the mode discards
    (e.g. vision/fusion under text_only) are absent from the model.
    """
    if mode not in TRANSFER_MODES:
        raise BundleError(f"unknown transfer mode {mode!r}")
    cfg_dict, groups = load_bundle(path)
    cfg_dict = dict(cfg_dict)
    cfg_dict["modality"] = MODE_MODALITY[mode]
    cfg = ModelConfig(**cfg_dict)
    model = RecModel.init(cfg, fresh_init_seed)
    for gname in LOADED_GROUPS[mode]:
        if gname not in groups:
            raise BundleError(f"bundle lacks required group {gname!r} for mode {mode!r}")
        if gname not in model.groups:
            continue
        for pname, tensor in model.groups[gname].items():
            if pname not in groups[gname]:
                raise BundleError(f"bundle group {gname!r} lacks parameter {pname!r}")
            arr = groups[gname][pname]
            if arr.shape != tensor.data.shape:
                raise BundleError(
                    f"shape mismatch in {gname}.{pname}: bundle {arr.shape} "
                    f"vs model {tensor.data.shape}"
                )
            tensor.data = arr.copy()
    return model


def model_from_bundle(path):
    """Reconstruct the exact saved model (all groups, saved modality)."""
    cfg_dict, groups = load_bundle(path)
    cfg = ModelConfig(**cfg_dict)
    model = RecModel.init(cfg, 0)
    if set(model.groups) != set(groups):
        raise BundleError(
            f"bundle groups {sorted(groups)} do not match modality "
            f"{cfg.modality!r} expecting {sorted(model.groups)}"
        )
    for gname, group in model.groups.items():
        for pname, tensor in group.items():
            arr = groups[gname][pname]
            if arr.shape != tensor.data.shape:
                raise BundleError(
                    f"shape mismatch in {gname}.{pname}: bundle {arr.shape} "
                    f"vs model {tensor.data.shape}"
                )
            tensor.data = arr.copy()
    return model


# ---------------------------------------------------------------------------
# catalog scoring
# ---------------------------------------------------------------------------

class ItemIndex:
    """Cached per-item representations for full-catalog scoring."""

    def __init__(self, order, reps, model_version):
        self.order = order  # catalog indices, sorted
        self.reps = reps  # (n_items, d)
        self.row_of = {c: r for r, c in enumerate(order)}
        self.model_version = model_version
        self.n_encoded = len(order)

    def fresh_for(self, model):
        return self.model_version == model.version


def build_item_index(model, items, chunk=256):
    """Encode every catalog item once (no gradients) and cache the result."""
    if not items:
        raise ValueError("catalog is empty")
    order = sorted(items)
    reps = np.zeros((len(order), model.cfg.d))
    with ad.no_grad():
        for start in range(0, len(order), chunk):
            part = order[start : start + chunk]
            ids, mask, patches = objectives.pack_item_features(items, part)
            emb = model.item_embeddings(ids, mask, patches)
            reps[start : start + len(part)] = emb["e_cls"].data
    return ItemIndex(order, reps, model.version)


def encode_prefixes(model, prefixes, items, index, L_max, chunk=128):
    """Last-position user states for a list of prefix sequences; (n, d)."""
    out = np.zeros((len(prefixes), model.cfg.d))
    with ad.no_grad():
        for start in range(0, len(prefixes), chunk):
            part = [p[-L_max:] for p in prefixes[start : start + chunk]]
            width = max(len(p) for p in part)
            rows = np.zeros((len(part), width), dtype=np.int64)
            mask = np.zeros((len(part), width))
            for r, p in enumerate(part):
                rows[r, : len(p)] = [index.row_of[i] for i in p]
                mask[r, : len(p)] = 1.0
            reps = ad.Tensor(index.reps[rows])
            h = model.encode_sequence(reps, mask)
            last = mask.sum(axis=1).astype(np.int64) - 1
            out[start : start + len(part)] = h.data[np.arange(len(part)), last]
    return out


def predict_scores(model, prefix, items, index=None, L_max=None):
    """Softmax distribution over the whole catalog for one prefix sequence."""
    if not prefix:
        raise ValueError("prefix must contain at least one item")
    if not items:
        raise ValueError("catalog is empty")
    if index is None or not index.fresh_for(model):
        index = build_item_index(model, items)
    L_max = L_max or model.cfg.L_max
    h = encode_prefixes(model, [list(prefix)], items, index, L_max)[0]
    logits = index.reps @ h
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()
