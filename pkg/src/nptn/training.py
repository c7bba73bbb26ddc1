"""Two-block networks, SGD training, evaluation and checkpoints."""

import csv
import json
import re
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import AugmentPolicy, augment_batch
from .errors import ConfigError, ContractError, FormatError, NumericAbort
from .layers import (
    AGGREGATES,
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    Nptn,
    NptnLayerSpec,
    PReLU,
    softmax_xent,
)
from .tensor import make_rng, rng_from_state, rng_state

# ---------------------------------------------------------------------------
# architecture


@dataclass
class LayerDef:
    kind: str
    in_channels: int
    out_channels: int
    G: int = 1
    kernel: int = 5
    pad: int = 2
    aggregate: str = "sum"


@dataclass
class ArchSpec:
    """Blocks of (conv | nptn) -> batchnorm -> prelu -> 2x2 maxpool, then a linear head."""

    input_shape: tuple
    layers: list
    num_classes: int = 10

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.layers = [l if isinstance(l, LayerDef) else LayerDef(**l) for l in self.layers]

    def validate(self):
        if not self.layers:
            raise ConfigError("architecture has no layers", "arch.layers")
        channels = self.input_shape[0]
        for i, l in enumerate(self.layers):
            where = f"arch.layers[{i}]"
            if l.kind not in ("conv", "nptn"):
                raise ConfigError(f"{where}: kind must be 'conv' or 'nptn', got {l.kind!r}", where + ".kind")
            if l.kind == "conv" and l.G != 1:
                raise ConfigError(f"{where}: a conv layer has G=1", where + ".G")
            if l.in_channels != channels:
                raise ConfigError(f"{where}: expects {l.in_channels} input channels but receives {channels}",
                                  where + ".in_channels")
            if min(l.out_channels, l.G, l.kernel) < 1 or l.pad < 0:
                raise ConfigError(f"{where}: channels, G and kernel must be >= 1", where)
            if l.aggregate not in AGGREGATES:
                raise ConfigError(f"{where}: aggregate must be one of {AGGREGATES}", where + ".aggregate")
            channels = l.out_channels
        self.feature_shape()
        return self

    def feature_shape(self):
        C, H, W = self.input_shape
        for l in self.layers:
            H = (H + 2 * l.pad - l.kernel) + 1
            W = (W + 2 * l.pad - l.kernel) + 1
            H, W, C = H // 2, W // 2, l.out_channels
            if H < 1 or W < 1:
                raise ConfigError("input too small for the number of pooling blocks", "arch.input_shape")
        return C, H, W

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": [asdict(l) for l in self.layers],
                "num_classes": self.num_classes}


_LABEL = re.compile(r"^\s*(?:(ConvNet)\s*\(\s*(\d+)\s*\)|NPTN\s*\(\s*(\d+)\s*,\s*(\d+)\s*\))\s*$", re.I)

DATASET_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}
SECOND_LAYER_CHANNELS = 16


def parse_model_label(label):
    """``"ConvNet(36)"`` -> ("conv", 36, 1); ``"NPTN(12, 3)"`` -> ("nptn", 12, 3)."""
    m = _LABEL.match(label)
    if not m:
        raise ConfigError(f"unrecognized model label {label!r}; use ConvNet(C) or NPTN(C, G)", "model")
    if m.group(1):
        return "conv", int(m.group(2)), 1
    return "nptn", int(m.group(3)), int(m.group(4))


def model_label(kind, channels, G):
    return f"ConvNet({channels})" if kind == "conv" else f"NPTN({channels}, {G})"


def two_layer_arch(dataset, kind, channels, G, kernel=5, pad=2, aggregate="sum"):
    """The benchmark two-block network: channels [in, channels, 16]."""
    C, H, W = DATASET_SHAPES[dataset]
    layers = [
        LayerDef(kind, C, channels, G, kernel, pad, aggregate),
        LayerDef(kind, channels, SECOND_LAYER_CHANNELS, G, kernel, pad, aggregate),
    ]
    return ArchSpec((C, H, W), layers, 10).validate()


def arch_from_label(label, dataset, **kw):
    kind, channels, G = parse_model_label(label)
    return two_layer_arch(dataset, kind, channels, G, **kw)


def count_filters(arch):
    return sum(l.in_channels * l.out_channels * l.G for l in arch.layers)


class Model:
    """An ordered list of named layers."""

    def __init__(self, arch, layers):
        self.arch = arch
        self.layers = layers

    def forward(self, x, train=True):
        for _, layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, d):
        for _, layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def named_params(self):
        return [(f"{n}.{k}", v) for n, layer in self.layers for k, v in layer.params.items()]

    def named_grads(self):
        return [(f"{n}.{k}", layer.grads[k]) for n, layer in self.layers for k in layer.params]

    def named_buffers(self):
        return [(f"{n}.{k}", v) for n, layer in self.layers for k, v in layer.buffers.items()]

    def set_tensor(self, name, value):
        prefix, key = name.rsplit(".", 1)
        for n, layer in self.layers:
            if n == prefix:
                target = layer.params if key in layer.params else layer.buffers
                if key not in target or target[key].shape != value.shape:
                    break
                target[key] = value
                return
        raise FormatError(f"tensor {name} {value.shape} does not fit this model")

    def nptn_layers(self):
        return [(n, layer) for n, layer in self.layers if isinstance(layer, Nptn)]


def build_model(arch, rng):
    """Instantiate ``arch``; weights draw from ``rng`` in layer order."""
    arch.validate()
    layers = []
    for i, l in enumerate(arch.layers):
        if l.kind == "nptn":
            spec = NptnLayerSpec(l.in_channels, l.out_channels, l.G, l.kernel, l.pad, 1, l.aggregate)
            layers.append((f"block{i}.nptn", Nptn(spec, rng=rng)))
        else:
            layers.append((f"block{i}.conv", Conv2d(l.in_channels, l.out_channels, l.kernel, l.pad, rng=rng)))
        layers.append((f"block{i}.bn", BatchNorm2d(l.out_channels)))
        layers.append((f"block{i}.prelu", PReLU(l.out_channels)))
        layers.append((f"block{i}.pool", MaxPool2d(2, 2)))
    layers[0][1].input_grad = False  # nothing upstream of the image
    C, H, W = arch.feature_shape()
    layers.append(("flatten", Flatten()))
    layers.append(("head", Linear(C * H * W, arch.num_classes, rng=rng)))
    return Model(arch, layers)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class TrainConfig:
    epochs: int = 15
    base_lr: float = 0.1
    decay_epochs: list = field(default_factory=lambda: [8, 12])
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    grad_clip: float = 5.0
    seed: int = 0
    aggregate: str = "sum"
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    test_augment_seed: int = 271828
    eval_batch_size: int = 500

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**self.augment)
        self.decay_epochs = list(self.decay_epochs)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "train.epochs")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing", "train.decay_epochs")
        if any(not 0 <= e < self.epochs for e in self.decay_epochs):
            raise ConfigError("decay_epochs must lie in [0, epochs)", "train.decay_epochs")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)", "train.batch_size")
        for key in ("base_lr", "momentum", "weight_decay", "grad_clip"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative", f"train.{key}")
        if self.aggregate not in AGGREGATES:
            raise ConfigError(f"aggregate must be one of {AGGREGATES}", "train.aggregate")
        return self

    def to_dict(self):
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def lr_schedule(epoch, config):
    drops = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.base_lr * config.decay_factor ** drops


def clip_grad_norm(grads, max_norm):
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm`` (0 disables).

    Returns the norm before clipping; the sum runs in float64 for determinism
    across batch layouts.
    """
    norm = float(np.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def sgd_step(params, grads, lr, momentum, weight_decay, velocity):
    """In-place momentum SGD: ``v = m v + g + wd p``; ``p -= lr v``.

    ``params``/``grads``/``velocity`` are dicts keyed by parameter name;
    missing velocity entries start at zero.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    test_error_pct: float
    seconds: float = 0.0


METRIC_COLUMNS = ["epoch", "train_loss", "test_loss", "test_error_pct"]


@dataclass
class Metrics:
    rows: list = field(default_factory=list)

    def write_csv(self, path):
        """Deterministic columns only; wall-clock time goes to :meth:`write_timing`."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.test_loss), repr(r.test_error_pct)])

    def write_timing(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "seconds"])
            for r in self.rows:
                w.writerow([r.epoch, f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path):
        with open(path) as f:
            rows = list(csv.DictReader(f))
        return cls([EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["test_loss"]),
                                float(r["test_error_pct"])) for r in rows])


@dataclass
class TrainState:
    epoch: int  # epochs completed
    rng: np.random.Generator
    velocity: dict = field(default_factory=dict)
    metrics: Metrics = field(default_factory=Metrics)

    @classmethod
    def fresh(cls, config):
        return cls(0, make_rng(config.seed))


@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    state: TrainState
    extra: dict = field(default_factory=dict)


def evaluate(model, dataset, batch_size=500):
    """Mean loss and error rate (percent) in eval mode; ties go to the lowest class."""
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    total_loss, wrong = 0.0, 0
    for i in range(0, n, batch_size):
        x = dataset.images[i:i + batch_size]
        y = dataset.labels[i:i + batch_size]
        logits = model.forward(x, train=False)
        loss, _ = softmax_xent(logits, y)
        total_loss += loss * len(y)
        wrong += int(np.sum(logits.argmax(axis=1) != y))
    return total_loss / n, 100.0 * wrong / n


def train(model, train_set, test_set, config, state=None, stop_epoch=None, on_epoch_end=None, log=None):
    """Run (or resume) SGD training and return ``(Metrics, Checkpoint)``.

    Each epoch draws a permutation and the per-sample augmentations from the
    state's generator, trains in batch-norm train mode, then evaluates
    ``test_set`` in eval mode.  ``stop_epoch`` ends early (for resumable
    runs); ``on_epoch_end(checkpoint)`` is called after every epoch.
    """
    config.validate()
    state = state or TrainState.fresh(config)
    params = dict(model.named_params())
    n = len(train_set)
    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    while state.epoch < end:
        epoch = state.epoch
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = state.rng.permutation(n)
        seen, loss_sum = 0, 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                break  # batch norm needs two samples
            x = augment_batch(train_set.images[idx], config.augment, state.rng, training=True)
            logits = model.forward(x, train=True)
            loss, d_logits = softmax_xent(logits, train_set.labels[idx])
            if not np.isfinite(loss):
                raise NumericAbort(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            model.backward(d_logits)
            grads = dict(model.named_grads())
            clip_grad_norm(grads, config.grad_clip)
            sgd_step(params, grads, lr, config.momentum, config.weight_decay, state.velocity)
            loss_sum += loss * len(idx)
            seen += len(idx)
        test_loss, test_err = evaluate(model, test_set, config.eval_batch_size)
        record = EpochRecord(epoch, loss_sum / seen, test_loss, test_err, time.perf_counter() - t0)
        state.metrics.rows.append(record)
        state.epoch += 1
        if log:
            log(f"epoch {epoch:3d}  lr {lr:.4g}  train_loss {record.train_loss:.4f}  "
                f"test_loss {test_loss:.4f}  test_err {test_err:.2f}%  ({record.seconds:.1f}s)")
        if on_epoch_end:
            on_epoch_end(Checkpoint(model, config, state))
    return state.metrics, Checkpoint(model, config, state)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"NPTN1"


def save_checkpoint(path, model, config, state=None, extra=None):
    """Write magic, u64 header length, JSON header, then little-endian float32 tensors.

    ``extra`` is any JSON-serializable run metadata (dataset, sizes).
    """
    state = state or TrainState.fresh(config)
    tensors = model.named_params() + model.named_buffers()
    tensors += [(f"velocity:{k}", v) for k, v in state.velocity.items()]
    header = {
        "arch": model.arch.to_dict(),
        "config": config.to_dict(),
        "epoch": state.epoch,
        "rng_state": rng_state(state.rng),
        "metrics": [asdict(r) for r in state.metrics.rows],
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, v in tensors:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise FormatError(f"{path}: not an NPTN checkpoint")
    if len(raw) < 13:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[5:13])
    if len(raw) < 13 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[13:13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    try:
        arch = ArchSpec(**header["arch"])
        config = TrainConfig(**header["config"])
        model = build_model(arch, None)
        specs = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from None
    offset = 13 + hlen
    velocity = {}
    for name, shape in specs:
        count = int(np.prod(shape))
        if offset + 4 * count > len(raw):
            raise FormatError(f"{path}: truncated tensor data at {name}")
        value = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
        offset += 4 * count
        if name.startswith("velocity:"):
            velocity[name[len("velocity:"):]] = value
        else:
            model.set_tensor(name, value)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    metrics = Metrics([EpochRecord(**r) for r in header["metrics"]])
    state = TrainState(header["epoch"], rng_from_state(header["rng_state"]), velocity, metrics)
    return Checkpoint(model, config, state, header.get("extra", {}))
