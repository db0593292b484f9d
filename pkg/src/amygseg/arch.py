"""Network definitions: single-branch nets and the dual receptive-field net.

Every network is fully convolutional with stride 1 and same padding, so all
activations keep the input's spatial shape and the output is a dense
voxel-wise logit map. A branch is: one 3x3x3 stem conv (30 channels), four
residual blocks (conv -> ReLU -> conv, skip joined before the closing ReLU,
1x1x1 projection on the skip when channels change), then a voxel-wise head
of two 1x1x1 layers and a 1x1x1 classifier.

The dual network runs a non-dilated branch and a dilated branch side by
side. After each of the eight block convolutions the two branches' results
(including, for the closing conv of a block, the residual term) are summed
element-wise, and that single fused tensor feeds both branches' next layer;
after the last fusion a single shared head produces the logits. The fused
sums are the only cross-branch edges: 2 per block, 8 in total.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Graph, Node, Tensor, _conv3d_arrays

DILATION_SCHEDULE = ((2, 4), (2, 8), (2, 4), (2, 1))
CHANNEL_SCHEDULE = ((30, 30), (30, 40), (40, 40), (40, 50))
MODES = ("normal", "dilated", "dual")

NET_FORMAT = "amygseg-net-v1"
CHECKPOINT_MAGIC = b"AMYG1"
CHECKPOINT_FORMAT = "amygseg-checkpoint-v1"


@dataclass(frozen=True)
class ResBlockSpec:
    """One residual block: two 3x3x3 stride-1 convs plus the skip path."""

    in_ch: int
    out_ch: int
    dilations: tuple[int, int]

    def __post_init__(self):
        if self.in_ch < 1 or self.out_ch < 1:
            raise ConfigError(f"channel counts must be >= 1, got {self.in_ch}->{self.out_ch}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")

    @property
    def has_reshape(self) -> bool:
        # 1x1x1 projection on the skip path, present exactly when channels change
        return self.in_ch != self.out_ch


@dataclass(frozen=True)
class NetworkSpec:
    mode: str
    num_classes: int
    channel_schedule: tuple[tuple[int, int], ...] = CHANNEL_SCHEDULE
    dilation_schedule: tuple[tuple[int, int], ...] = DILATION_SCHEDULE
    initial_channels: int = 30
    hidden_channels: int = 150

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.channel_schedule) != len(self.dilation_schedule):
            raise ConfigError("channel and dilation schedules must have equal length")
        if not self.channel_schedule:
            raise ConfigError("network needs at least one block")
        for k in range(1, len(self.channel_schedule)):
            if self.channel_schedule[k][0] != self.channel_schedule[k - 1][1]:
                raise ConfigError("block channel schedule is not chained")
        if self.channel_schedule[0][0] != self.initial_channels:
            raise ConfigError("first block must consume the stem conv's channels")

    @property
    def num_blocks(self) -> int:
        return len(self.channel_schedule)

    @property
    def branches(self) -> tuple[str, ...]:
        return ("normal", "dilated") if self.mode == "dual" else (self.mode,)

    def branch_blocks(self, branch: str) -> tuple[ResBlockSpec, ...]:
        """Blocks as seen by one branch; the normal role is never dilated."""
        if branch == "normal":
            dils = ((1, 1),) * self.num_blocks
        elif branch == "dilated":
            dils = self.dilation_schedule
        else:
            raise ConfigError(f"unknown branch '{branch}'")
        return tuple(
            ResBlockSpec(cin, cout, dils[k])
            for k, (cin, cout) in enumerate(self.channel_schedule)
        )

    @property
    def blocks(self) -> tuple[ResBlockSpec, ...]:
        if self.mode == "dual":
            raise ConfigError("dual network has per-branch blocks; use branch_blocks()")
        return self.branch_blocks(self.mode)

    # -- interchange format -------------------------------------------------

    def layers(self) -> list[dict]:
        """Flat layer list (interchange schema), in parameter/initialisation order.

        Entry fields: name, kernel, stride, dilation, in_ch, out_ch,
        fusion_group (None outside the dual net), stage (initial|block|skip|head),
        branch (None for shared/single-branch layers).
        """
        dual = self.mode == "dual"
        prefixes = [(b + "/", b) for b in self.branches] if dual else [("", None)]

        def entry(name, kernel, dilation, cin, cout, stage, branch=None, fusion=None):
            return {
                "name": name,
                "kernel": kernel,
                "stride": 1,
                "dilation": dilation,
                "in_ch": cin,
                "out_ch": cout,
                "fusion_group": fusion,
                "stage": stage,
                "branch": branch,
            }

        out = []
        for prefix, branch in prefixes:
            out.append(entry(prefix + "init", 3, 1, 1, self.initial_channels, "initial", branch))
        for k, (cin, cout) in enumerate(self.channel_schedule, start=1):
            for conv_idx in (0, 1):
                fusion = 2 * (k - 1) + conv_idx + 1 if dual else None
                for prefix, branch in prefixes:
                    role = branch if dual else self.mode
                    dil = self.branch_blocks(role)[k - 1].dilations[conv_idx]
                    cin_k = cin if conv_idx == 0 else cout
                    out.append(
                        entry(
                            f"{prefix}b{k}c{conv_idx + 1}", 3, dil, cin_k, cout,
                            "block", branch, fusion,
                        )
                    )
            if cin != cout:
                for prefix, branch in prefixes:
                    out.append(entry(f"{prefix}b{k}skip", 1, 1, cin, cout, "skip", branch))
        last = self.channel_schedule[-1][1]
        hid = self.hidden_channels
        out.append(entry("fc1", 1, 1, last, hid, "head"))
        out.append(entry("fc2", 1, 1, hid, hid, "head"))
        out.append(entry("cls", 1, 1, hid, self.num_classes, "head"))
        return out

    def to_json_dict(self) -> dict:
        return {
            "format": NET_FORMAT,
            "mode": self.mode,
            "num_classes": self.num_classes,
            "initial_channels": self.initial_channels,
            "hidden_channels": self.hidden_channels,
            "channel_schedule": [list(p) for p in self.channel_schedule],
            "dilation_schedule": [list(p) for p in self.dilation_schedule],
            "layers": self.layers(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "NetworkSpec":
        if doc.get("format") != NET_FORMAT:
            raise DataError(f"unsupported network format: {doc.get('format')!r}")
        try:
            return cls(
                mode=doc["mode"],
                num_classes=int(doc["num_classes"]),
                channel_schedule=tuple(tuple(p) for p in doc["channel_schedule"]),
                dilation_schedule=tuple(tuple(p) for p in doc["dilation_schedule"]),
                initial_channels=int(doc["initial_channels"]),
                hidden_channels=int(doc["hidden_channels"]),
            )
        except KeyError as exc:
            raise DataError(f"network description missing field {exc}") from exc


def build_branch(mode: str, num_classes: int, num_blocks: int = 4,
                 hidden_channels: int = 150) -> NetworkSpec:
    """Single-branch network; dilated mode differs from normal only in dilations."""
    if mode not in ("normal", "dilated"):
        raise ConfigError(f"branch mode must be 'normal' or 'dilated', got '{mode}'")
    dil = DILATION_SCHEDULE if mode == "dilated" else ((1, 1),) * 4
    return NetworkSpec(
        mode=mode,
        num_classes=num_classes,
        channel_schedule=CHANNEL_SCHEDULE[:num_blocks],
        dilation_schedule=dil[:num_blocks],
        hidden_channels=hidden_channels,
    )


def build_amygnet(num_classes: int, num_blocks: int = 4,
                  hidden_channels: int = 150) -> NetworkSpec:
    """Dual-branch network fusing both branches by element-wise summation."""
    return NetworkSpec(
        mode="dual",
        num_classes=num_classes,
        channel_schedule=CHANNEL_SCHEDULE[:num_blocks],
        dilation_schedule=DILATION_SCHEDULE[:num_blocks],
        hidden_channels=hidden_channels,
    )


def count_fusions(spec: NetworkSpec) -> int:
    groups = {e["fusion_group"] for e in spec.layers() if e["fusion_group"] is not None}
    return len(groups)


def spec_digest(spec: NetworkSpec) -> str:
    payload = json.dumps(spec.to_json_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# parameters and execution
# ---------------------------------------------------------------------------


@dataclass
class Model:
    spec: NetworkSpec
    params: dict[str, Tensor]  # "<layer>.w" / "<layer>.b"
    seed: int

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())


def instantiate(spec: NetworkSpec, seed: int, dtype=np.float32) -> Model:
    """He-normal weights scaled to keep activations stable; zero biases.

    Single-branch layers use variance 2/fan_in. In the dual network every
    block-level conv output is element-wise summed with its counterpart from
    the other branch, which would double activation variance at each of the
    eight fusions (about 50x in std by the classifier); those paired convs
    (and the paired skip projections) therefore use half that variance so a
    fused sum keeps the single-branch scale. Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for layer in spec.layers():
        k, cin, cout = layer["kernel"], layer["in_ch"], layer["out_ch"]
        fan_in = cin * k ** 3
        variance = 2.0 / fan_in
        if spec.mode == "dual" and layer["stage"] != "head":
            variance /= 2.0
        w = rng.normal(0.0, np.sqrt(variance), size=(cout, cin, k, k, k)).astype(dtype)
        params[layer["name"] + ".w"] = Tensor(w)
        params[layer["name"] + ".b"] = Tensor(np.zeros(cout, dtype=dtype))
    return Model(spec=spec, params=params, seed=seed)


class _ArrayOps:
    """Immediate numpy execution; nothing retained (inference path)."""

    def __init__(self, model: Model):
        self.params = model.params

    def input(self, x: Tensor):
        return x.data

    def conv(self, x, name, dilation):
        return _conv3d_arrays(
            x, self.params[name + ".w"].data, self.params[name + ".b"].data, dilation
        )

    def add(self, a, b, tag=None):
        return a + b

    def relu(self, x):
        return np.maximum(x, 0)


class _GraphOps:
    """Tape-recording execution (training path)."""

    def __init__(self, model: Model, graph: Graph):
        self.graph = graph
        self.param_nodes = {
            name: graph.parameter(t, name) for name, t in model.params.items()
        }

    def input(self, x: Tensor):
        return self.graph.tensor_input(x, name="patch")

    def conv(self, x, name, dilation):
        return self.graph.conv3d(
            x, self.param_nodes[name + ".w"], self.param_nodes[name + ".b"], dilation
        )

    def add(self, a, b, tag=None):
        return self.graph.add(a, b, tag=tag)

    def relu(self, x):
        return self.graph.relu(x)


def _wire(spec: NetworkSpec, ops, x):
    """Single source of truth for the forward wiring, on either ops backend."""
    nb = spec.num_blocks
    if spec.mode == "dual":
        blocks_n = spec.branch_blocks("normal")
        blocks_d = spec.branch_blocks("dilated")
        tn = ops.relu(ops.conv(x, "normal/init", 1))
        td = ops.relu(ops.conv(x, "dilated/init", 1))
        t = None
        for k in range(1, nb + 1):
            bn, bd = blocks_n[k - 1], blocks_d[k - 1]
            un = ops.conv(tn, f"normal/b{k}c1", bn.dilations[0])
            ud = ops.conv(td, f"dilated/b{k}c1", bd.dilations[0])
            a = ops.relu(ops.add(un, ud, tag="fusion"))
            vn = ops.conv(a, f"normal/b{k}c2", bn.dilations[1])
            vd = ops.conv(a, f"dilated/b{k}c2", bd.dilations[1])
            sn = ops.conv(tn, f"normal/b{k}skip", 1) if bn.has_reshape else tn
            sd = ops.conv(td, f"dilated/b{k}skip", 1) if bd.has_reshape else td
            rn = ops.add(vn, sn)
            rd = ops.add(vd, sd)
            t = ops.relu(ops.add(rn, rd, tag="fusion"))
            tn = td = t
    else:
        blocks = spec.blocks
        t = ops.relu(ops.conv(x, "init", 1))
        for k in range(1, nb + 1):
            blk = blocks[k - 1]
            u = ops.conv(t, f"b{k}c1", blk.dilations[0])
            a = ops.relu(u)
            v = ops.conv(a, f"b{k}c2", blk.dilations[1])
            s = ops.conv(t, f"b{k}skip", 1) if blk.has_reshape else t
            t = ops.relu(ops.add(v, s))
    h = ops.relu(ops.conv(t, "fc1", 1))
    h = ops.relu(ops.conv(h, "fc2", 1))
    return ops.conv(h, "cls", 1)


def _check_patch(model: Model, patch: Tensor):
    if patch.ndim != 4 or patch.shape[0] != 1:
        raise ShapeError(f"patch must be [1,D,H,W], got {patch.shape}")
    if patch.dtype != model.dtype:
        raise ConfigError(f"patch dtype {patch.dtype} does not match model {model.dtype}")


def forward(model: Model, patch: Tensor) -> Tensor:
    """Voxel-wise logits [num_classes, D, H, W]; inference only, no tape."""
    _check_patch(model, patch)
    ops = _ArrayOps(model)
    return Tensor(_wire(model.spec, ops, ops.input(patch)))


def build_training_graph(
    model: Model, patch: Tensor, labels: np.ndarray
) -> tuple[Graph, Node, dict[str, Node]]:
    """Record the forward pass plus the cross-entropy loss on a fresh tape."""
    _check_patch(model, patch)
    graph = Graph()
    ops = _GraphOps(model, graph)
    logits = _wire(model.spec, ops, ops.input(patch))
    loss = graph.softmax_cross_entropy(logits, labels)
    return graph, loss, ops.param_nodes


def count_fusion_nodes(graph: Graph) -> int:
    return graph.count_nodes("add", tag="fusion")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path, epoch: int) -> None:
    """Write magic "AMYG1", a JSON header, then raw little-endian f32 blobs."""
    names = list(model.params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "spec_digest": spec_digest(model.spec),
        "seed": model.seed,
        "epoch": epoch,
        "dtype": "float32",
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "spec": model.spec.to_json_dict(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Model, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r} in {path}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise DataError(f"truncated checkpoint header length in {path}")
        (hlen,) = struct.unpack("<I", raw_len)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise DataError(f"truncated checkpoint header in {path}")
        try:
            header = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise DataError(f"unparseable checkpoint header in {path}: {exc}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"unsupported checkpoint format {header.get('format')!r}")
        spec = NetworkSpec.from_json_dict(header["spec"])
        if spec_digest(spec) != header["spec_digest"]:
            raise DataError("checkpoint spec digest does not match embedded spec")
        params: dict[str, Tensor] = {}
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape))
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise DataError(
                    f"truncated parameter blob '{meta['name']}' in {path}: "
                    f"expected {count * 4} bytes, got {len(buf)}"
                )
            params[meta["name"]] = Tensor(
                np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            )
    return Model(spec=spec, params=params, seed=int(header["seed"])), int(header["epoch"])


def checkpoint_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
