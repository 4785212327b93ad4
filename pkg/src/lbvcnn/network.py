"""LBVCNN subnets, the fused three-view network, and parameter accounting."""

from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .bank import TernaryFilterBank, bank_from_bytes, bank_to_bytes
from .errors import CheckpointError, InvalidShapeError
from .layers import (
    DEFAULT_BLOCK_ORDER,
    AvgPool3d,
    Dense,
    Flatten,
    LbvBlock,
    MaxPool3d,
    ReLU,
    pool_output_shape,
    softmax,
)
from .tensor import Rng, tensor_from_bytes, tensor_to_bytes

CHECKPOINT_VERSION = 1
VIEWS = ("xy", "xt", "yt")
# view -> axis order applied to an [X, Y, T] cuboid
VIEW_PERMUTATIONS = {"xy": (0, 1, 2), "xt": (0, 2, 1), "yt": (2, 1, 0)}
DEFAULT_CUBOID = (64, 64, 11)


def view_shape(view, cuboid=DEFAULT_CUBOID):
    return tuple(cuboid[i] for i in VIEW_PERMUTATIONS[view])


@dataclass
class NetworkSpec:
    """Declarative description of one single-view subnet."""

    view: str
    classes: int
    bank_id: str
    input_shape: tuple = DEFAULT_CUBOID
    channel_plan: tuple = (64, 64, 64, 64, 64)
    dense_width: int = 256
    block_order: tuple = DEFAULT_BLOCK_ORDER
    pool: str = "max"
    bank_count: int = 64

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.channel_plan = tuple(self.channel_plan)
        self.block_order = tuple(self.block_order)
        self.validate()

    def validate(self):
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")
        if len(self.channel_plan) != 5:
            raise ValueError(f"channel plan needs 5 entries, got {len(self.channel_plan)}")
        if any(c < 1 for c in self.channel_plan):
            raise ValueError("channel widths must be positive")
        if self.classes < 1:
            raise ValueError("classes must be positive")
        if self.dense_width < 1:
            raise ValueError("dense width must be positive")
        if self.pool not in ("max", "avg"):
            raise ValueError("pool must be 'max' or 'avg'")
        if len(self.input_shape) != 3:
            raise InvalidShapeError("input shape must have three axes")

    def layers(self):
        """Ordered layer descriptors, e.g. ``{"type": "lbv", "in": 1, "out": 64}``."""
        out = []
        spatial = self.input_shape
        cin = 1
        for i, cout in enumerate(self.channel_plan):
            out.append({"type": "lbv", "in": cin, "out": cout, "spatial": list(spatial),
                        "bank_id": self.bank_id, "order": list(self.block_order)})
            cin = cout
            if i < 4:
                spatial = pool_output_shape(spatial)
                out.append({"type": f"{self.pool}pool", "window": 2, "spatial": list(spatial)})
        out.append({"type": "flatten", "features": cin * int(np.prod(spatial))})
        out.append({"type": "dense", "in": cin * int(np.prod(spatial)), "out": self.dense_width,
                    "activation": "relu"})
        out.append({"type": "softmax", "in": self.dense_width, "out": self.classes})
        return out

    def feature_shape(self):
        """Shape entering the flatten layer, ``[C, D, H, W]``."""
        spatial = self.input_shape
        for _ in range(4):
            spatial = pool_output_shape(spatial)
        return (self.channel_plan[-1],) + tuple(spatial)

    def to_dict(self):
        d = asdict(self)
        d["kind"] = "subnet"
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("kind", None)
        return cls(**d)


class Subnet:
    """Executable single-view network: 5 LBV blocks, 4 pools, dense(256), head."""

    def __init__(self, spec: NetworkSpec, bank: TernaryFilterBank, rng=None,
                 dtype=np.float32, method="add"):
        if bank.id != spec.bank_id:
            raise CheckpointError(f"bank id {bank.id} does not match spec bank id {spec.bank_id}")
        if bank.count != spec.bank_count:
            raise ValueError("spec bank_count does not match the bank")
        rng = rng if rng is not None else Rng(0)
        self.spec = spec
        self.bank = bank
        self.body = []
        cin = 1
        for i, cout in enumerate(spec.channel_plan):
            block = LbvBlock(bank, cin, cout, rng, spec.block_order, method, dtype)
            self.body.append((f"block{i + 1}", block))
            if i < 4:
                pool = MaxPool3d(2) if spec.pool == "max" else AvgPool3d(2)
                self.body.append((f"pool{i + 1}", pool))
            cin = cout
        self.body[0][1].set_input_grad(False)
        features = int(np.prod(spec.feature_shape()))
        self.flatten = Flatten()
        self.fc = Dense(features, spec.dense_width, rng, dtype)
        self.fc_relu = ReLU()
        self.head = Dense(spec.dense_width, spec.classes, rng, dtype)

    # -- structure -------------------------------------------------------
    def blocks(self):
        return [layer for _, layer in self.body if isinstance(layer, LbvBlock)]

    def named_layers(self, with_head=True):
        out = list(self.body) + [("fc", self.fc)]
        if with_head:
            out.append(("head", self.head))
        return out

    def parameters(self, with_head=True):
        """``{qualified name: array}`` for every trainable tensor."""
        return {f"{name}.{k}": v for name, layer in self.named_layers(with_head)
                for k, v in layer.params.items()}

    def gradients(self, with_head=True):
        return {f"{name}.{k}": v for name, layer in self.named_layers(with_head)
                for k, v in layer.grads.items()}

    def buffers(self):
        return {f"{name}.{k}": v for name, layer in self.body for k, v in layer.state().items()}

    def load_buffers(self, buffers):
        for name, layer in self.body:
            prefix = name + "."
            sub = {k[len(prefix):]: v for k, v in buffers.items() if k.startswith(prefix)}
            if sub:
                layer.load_state(sub)

    def set_method(self, method):
        for b in self.blocks():
            b.set_method(method)

    def astype(self, dtype):
        for _, layer in self.named_layers():
            layer.astype(dtype)
        return self

    # -- compute ---------------------------------------------------------
    def _prepare(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim == 4:
            x = x[:, None]
        if x.ndim != 5 or x.shape[1] != 1:
            raise InvalidShapeError(f"expected cuboids shaped {self.spec.input_shape}, got {x.shape}")
        if tuple(x.shape[2:]) != self.spec.input_shape:
            raise InvalidShapeError(
                f"{self.spec.view} subnet expects input {self.spec.input_shape}, "
                f"got {tuple(x.shape[2:])}")
        return x

    def features(self, x, training=False):
        """256-wide activations after the dense layer and its ReLU."""
        h = self._prepare(x)
        for _, layer in self.body:
            h = layer.forward(h, training)
        h = self.flatten.forward(h, training)
        h = self.fc.forward(h, training)
        return self.fc_relu.forward(h, training)

    def forward(self, x, training=False):
        """Class logits; apply :func:`softmax` for probabilities."""
        return self.head.forward(self.features(x, training), training)

    def predict_proba(self, x):
        return softmax(self.forward(x))

    def backward_features(self, grad):
        grad = self.fc_relu.backward(grad)
        grad = self.fc.backward(grad)
        grad = self.flatten.backward(grad)
        for _, layer in reversed(self.body):
            grad = layer.backward(grad)
            if grad is None:
                break
        return grad

    def backward(self, grad_logits):
        return self.backward_features(self.head.backward(grad_logits))


def build_subnet(view, classes, bank, channel_plan=(64, 64, 64, 64, 64), rng=None,
                 cuboid=DEFAULT_CUBOID, dtype=np.float32, method="add", **spec_kw):
    spec = NetworkSpec(view=view, classes=classes, bank_id=bank.id,
                       input_shape=view_shape(view, cuboid), channel_plan=tuple(channel_plan),
                       bank_count=bank.count, **spec_kw)
    return Subnet(spec, bank, rng, dtype, method)


# -- fusion ------------------------------------------------------------------

def fuse_mean(v1, v2, v3):
    # equal to (v1 + v2 + v3) / 3, but returns v1 bit-exactly when all three agree
    return v1 + ((v2 - v1) + (v3 - v1)) / 3


@dataclass
class FusionSpec:
    subnets: dict
    classes: int
    dense_width: int = 256
    fusion: str = "mean"

    def to_dict(self):
        return {"kind": "fusion", "classes": self.classes, "dense_width": self.dense_width,
                "fusion": self.fusion,
                "subnets": {v: s.to_dict() for v, s in self.subnets.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(subnets={v: NetworkSpec.from_dict(s) for v, s in d["subnets"].items()},
                   classes=d["classes"], dense_width=d["dense_width"], fusion=d["fusion"])


class FusedNet:
    """Three subnets without heads, averaged 256-wide outputs, fresh softmax head."""

    def __init__(self, xy: Subnet, xt: Subnet, yt: Subnet, rng=None, dtype=np.float32):
        nets = {"xy": xy, "xt": xt, "yt": yt}
        widths = {n.spec.dense_width for n in nets.values()}
        classes = {n.spec.classes for n in nets.values()}
        if len(widths) != 1:
            raise ValueError(f"subnet dense widths differ: {sorted(widths)}")
        if len(classes) != 1:
            raise ValueError(f"subnet class counts differ: {sorted(classes)}")
        banks = {n.bank.id for n in nets.values()}
        if len(banks) != 1:
            raise ValueError("subnets reference different banks")
        for view, net in nets.items():
            if net.spec.view != view:
                raise ValueError(f"expected a {view} subnet, got {net.spec.view}")
        rng = rng if rng is not None else Rng(0)
        self.subnets = nets
        self.bank = xy.bank
        width = widths.pop()
        self.spec = FusionSpec({v: n.spec for v, n in nets.items()}, classes.pop(), width)
        self.head = Dense(width, self.spec.classes, rng, dtype)

    def features(self, views, training=False):
        feats = [self.subnets[v].features(views[i], training) for i, v in enumerate(VIEWS)]
        return fuse_mean(*feats)

    def forward(self, views, training=False):
        """``views`` is an (xy, xt, yt) triple of batches."""
        return self.head.forward(self.features(views, training), training)

    def predict_proba(self, views):
        return softmax(self.forward(views))

    def backward(self, grad_logits):
        g = self.head.backward(grad_logits) / 3
        for v in VIEWS:
            self.subnets[v].backward_features(g)

    def parameters(self):
        out = {}
        for v in VIEWS:
            for k, p in self.subnets[v].parameters(with_head=False).items():
                out[f"{v}/{k}"] = p
        for k, p in self.head.params.items():
            out[f"head.{k}"] = p
        return out

    def gradients(self):
        out = {}
        for v in VIEWS:
            for k, g in self.subnets[v].gradients(with_head=False).items():
                out[f"{v}/{k}"] = g
        for k, g in self.head.grads.items():
            out[f"head.{k}"] = g
        return out

    def buffers(self):
        return {f"{v}/{k}": b for v in VIEWS for k, b in self.subnets[v].buffers().items()}

    def load_buffers(self, buffers):
        for v in VIEWS:
            prefix = v + "/"
            self.subnets[v].load_buffers(
                {k[len(prefix):]: b for k, b in buffers.items() if k.startswith(prefix)})

    def set_method(self, method):
        for n in self.subnets.values():
            n.set_method(method)


def build_fusion(xy, xt, yt, rng=None, copy=True):
    """Fuse three trained subnets; parameters are deep-copied unless ``copy=False``."""
    if copy:
        xy, xt, yt = (clone_subnet(n) for n in (xy, xt, yt))
    dtype = xy.fc.params["weight"].dtype
    return FusedNet(xy, xt, yt, rng, dtype)


def clone_subnet(net: Subnet) -> Subnet:
    twin = Subnet(net.spec, net.bank, Rng(0), net.fc.params["weight"].dtype,
                  net.blocks()[0].ternary.method)
    _copy_into(twin.parameters(), net.parameters())
    _copy_into(twin.buffers(), net.buffers())
    twin.trained_epochs = getattr(net, "trained_epochs", 0)
    return twin


def _copy_into(dst, src):
    for k, v in src.items():
        if dst[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {k}: {dst[k].shape} vs {v.shape}")
        dst[k][...] = v


# -- parameter accounting ----------------------------------------------------

@dataclass
class ParamReport:
    layers: list = field(default_factory=list)
    trainable_weights: int = 0
    trainable_bias: int = 0
    bn_params: int = 0
    dense_head_params: int = 0
    fixed_ternary_entries: int = 0
    pointwise_weights: int = 0
    dense_equivalent_weights: int = 0

    @property
    def trainable_total(self):
        return self.trainable_weights + self.trainable_bias + self.bn_params + self.dense_head_params

    @property
    def ratio(self):
        """Dense 3x3x3 weight count over pointwise weight count, LBV blocks only."""
        return self.dense_equivalent_weights / self.pointwise_weights

    def as_dict(self):
        d = asdict(self)
        d["trainable_total"] = self.trainable_total
        d["ratio"] = self.ratio
        return d


def lbv_block_params(in_channels, out_channels, bank_count=64, taps=27,
                     order=DEFAULT_BLOCK_ORDER):
    """Counts for one block; the dense counterpart is a ``taps``-tap conv in->out."""
    bn = 0
    channels = in_channels
    for stage in order:
        if stage == "ternary":
            channels = bank_count
        elif stage == "pointwise":
            channels = out_channels
        elif stage == "bn":
            bn += 2 * channels
    return {"type": "lbv", "in": in_channels, "out": out_channels,
            "pointwise_weights": out_channels * bank_count, "bias": out_channels,
            "bn": bn, "fixed_ternary_entries": bank_count * taps,
            "dense_equivalent_weights": out_channels * in_channels * taps,
            "ratio": out_channels * in_channels * taps / (out_channels * bank_count)}


def count_params(spec) -> ParamReport:
    """Exhaustive per-layer accounting for a :class:`NetworkSpec` or :class:`FusionSpec`.

    The shared bank is counted once per network and never as trainable.
    """
    rep = ParamReport()
    if isinstance(spec, FusionSpec):
        for view in VIEWS:
            sub = count_params(spec.subnets[view])
            for layer in sub.layers:
                if layer["type"] == "softmax":
                    continue
                rep.layers.append({**layer, "view": view})
            rep.trainable_weights += sub.trainable_weights
            rep.trainable_bias += sub.trainable_bias
            rep.bn_params += sub.bn_params
            rep.pointwise_weights += sub.pointwise_weights
            rep.dense_equivalent_weights += sub.dense_equivalent_weights
            head = sub.layers[-1]
            rep.dense_head_params += sub.dense_head_params - head["weights"] - head["bias"]
        rep.fixed_ternary_entries = spec.subnets["xy"].bank_count * 27
        head = {"type": "softmax", "weights": spec.dense_width * spec.classes,
                "bias": spec.classes}
        rep.layers.append(head)
        rep.dense_head_params += head["weights"] + head["bias"]
        return rep
    for desc in spec.layers():
        if desc["type"] == "lbv":
            layer = lbv_block_params(desc["in"], desc["out"], spec.bank_count,
                                     order=spec.block_order)
            rep.trainable_weights += layer["pointwise_weights"]
            rep.pointwise_weights += layer["pointwise_weights"]
            rep.trainable_bias += layer["bias"]
            rep.bn_params += layer["bn"]
            rep.dense_equivalent_weights += layer["dense_equivalent_weights"]
            rep.layers.append(layer)
        elif desc["type"] in ("dense", "softmax"):
            layer = {"type": desc["type"], "weights": desc["in"] * desc["out"], "bias": desc["out"]}
            rep.dense_head_params += layer["weights"] + layer["bias"]
            rep.layers.append(layer)
        else:
            rep.layers.append({"type": desc["type"]})
    rep.fixed_ternary_entries = spec.bank_count * 27
    return rep


def enumerate_trainable(model) -> int:
    """Number of trainable scalars held by a live model."""
    return int(sum(p.size for p in model.parameters().values()))


# -- checkpoints -------------------------------------------------------------

def _sha(b):
    return hashlib.sha256(b).hexdigest()


def save_network(model, path):
    """Write a zip archive: spec JSON, LBVT parameter/buffer files, bank, manifest."""
    entries = {}
    entries["spec.json"] = json.dumps(model.spec.to_dict(), indent=2, sort_keys=True).encode()
    entries["bank.lbvb"] = bank_to_bytes(model.bank)
    for k, v in model.parameters().items():
        entries[f"params/{k}.lbvt"] = tensor_to_bytes(v)
    for k, v in model.buffers().items():
        entries[f"buffers/{k}.lbvt"] = tensor_to_bytes(v)
    if isinstance(model, FusedNet):
        epochs = {v: getattr(n, "trained_epochs", 0) for v, n in model.subnets.items()}
    else:
        epochs = getattr(model, "trained_epochs", 0)
    manifest = {"version": CHECKPOINT_VERSION, "bank_id": model.bank.id, "trained_epochs": epochs,
                "files": {name: _sha(data) for name, data in sorted(entries.items())}}
    target = path if hasattr(path, "write") else os.fspath(path)
    with zipfile.ZipFile(target, "w", zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for name in sorted(entries):
            _write_entry(zf, name, entries[name])


def _write_entry(zf, name, data):
    # fixed timestamp so identical models give identical archives
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def load_network(path, method="add"):
    """Load a :class:`Subnet` or :class:`FusedNet` checkpoint."""
    try:
        zf = zipfile.ZipFile(path if hasattr(path, "read") else os.fspath(path), "r")
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path} is not a checkpoint archive") from exc
    with zf:
        names = set(zf.namelist())
        if "manifest.json" not in names:
            raise CheckpointError("checkpoint has no manifest")
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
        data = {}
        for name, digest in manifest["files"].items():
            if name not in names:
                raise CheckpointError(f"checkpoint is missing {name}")
            blob = zf.read(name)
            if _sha(blob) != digest:
                raise CheckpointError(f"hash mismatch for {name}")
            data[name] = blob
    if "bank.lbvb" not in data:
        raise CheckpointError("checkpoint does not contain its bank")
    bank = bank_from_bytes(data["bank.lbvb"])
    if bank.id != manifest["bank_id"]:
        raise CheckpointError(f"bank id {bank.id} does not match manifest {manifest['bank_id']}")
    spec_d = json.loads(data["spec.json"])
    params = {n[len("params/"):-len(".lbvt")]: tensor_from_bytes(b)
              for n, b in data.items() if n.startswith("params/")}
    buffers = {n[len("buffers/"):-len(".lbvt")]: tensor_from_bytes(b)
               for n, b in data.items() if n.startswith("buffers/")}
    dtype = next(iter(params.values())).dtype
    if spec_d.get("kind") == "fusion":
        spec = FusionSpec.from_dict(spec_d)
        for s in spec.subnets.values():
            if s.bank_id != bank.id:
                raise CheckpointError("subnet spec references a different bank id")
        nets = [Subnet(spec.subnets[v], bank, Rng(0), dtype, method) for v in VIEWS]
        model = FusedNet(*nets, rng=Rng(0), dtype=dtype)
    else:
        spec = NetworkSpec.from_dict(spec_d)
        if spec.bank_id != bank.id:
            raise CheckpointError("spec references a bank id not present in the checkpoint")
        model = Subnet(spec, bank, Rng(0), dtype, method)
    live = model.parameters()
    if set(live) != set(params):
        raise CheckpointError("checkpoint parameters do not match the architecture")
    _copy_into(live, params)
    model.load_buffers(buffers)
    epochs = manifest.get("trained_epochs", 0)
    if isinstance(model, FusedNet):
        for v, n in model.subnets.items():
            n.trained_epochs = epochs.get(v, 0) if isinstance(epochs, dict) else 0
    else:
        model.trained_epochs = epochs if isinstance(epochs, int) else 0
    return model


def checkpoint_bytes(model) -> bytes:
    buf = io.BytesIO()
    save_network(model, buf)
    return buf.getvalue()
