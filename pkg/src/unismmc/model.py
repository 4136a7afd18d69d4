"""Encoders, unimodal classifiers, and the concatenation-fusion classifier.

Each modality gets its own multilayer perceptron encoder producing a
representation of the shared width, a per-modality classifier head, and
the fused classifier consumes the concatenation of all representations in
modality order. Classifiers are three affine maps with a rectifier between
them; encoders are rectifier stacks with a linear output layer so that
representations are not sign-constrained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .container import read_container, write_container
from .errors import ConfigurationError, FormatError, ShapeError

_CHECKPOINT_MAGIC = b"UMCK"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigurationError(f"encoder dims must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")

    def layer_dims(self):
        return list(zip((self.input_dim, *self.hidden_dims), (*self.hidden_dims, self.output_dim)))


@dataclass(frozen=True)
class ClassifierSpec:
    """Exactly two hidden layers, i.e. three affine maps."""

    input_dim: int
    hidden_dims: tuple[int, int]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if len(self.hidden_dims) != 2:
            raise ConfigurationError(
                f"classifier needs exactly two hidden layers, got {self.hidden_dims}"
            )
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(int(d) < 1 for d in dims):
            raise ConfigurationError(f"classifier dims must be >= 1, got {dims}")
        if self.num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.num_classes}")

    def layer_dims(self):
        return list(zip((self.input_dim, *self.hidden_dims), (*self.hidden_dims, self.num_classes)))


@dataclass(frozen=True)
class ModelSpec:
    encoders: tuple[EncoderSpec, ...]
    unimodal_classifiers: tuple[ClassifierSpec, ...]
    fusion_classifier: ClassifierSpec

    def __post_init__(self):
        object.__setattr__(self, "encoders", tuple(self.encoders))
        object.__setattr__(self, "unimodal_classifiers", tuple(self.unimodal_classifiers))
        if not self.encoders:
            raise ConfigurationError("need at least one modality encoder")
        if len(self.unimodal_classifiers) != len(self.encoders):
            raise ConfigurationError("one unimodal classifier per encoder is required")
        widths = {e.output_dim for e in self.encoders}
        if len(widths) != 1:
            raise ConfigurationError(f"encoder output widths must all match, got {sorted(widths)}")
        width = self.encoders[0].output_dim
        for m, clf in enumerate(self.unimodal_classifiers):
            if clf.input_dim != width:
                raise ConfigurationError(
                    f"unimodal classifier {m} expects input {clf.input_dim}, encoders produce {width}"
                )
        if self.fusion_classifier.input_dim != width * len(self.encoders):
            raise ConfigurationError(
                f"fusion classifier expects input {self.fusion_classifier.input_dim}, "
                f"fusion produces {width * len(self.encoders)}"
            )
        classes = {c.num_classes for c in (*self.unimodal_classifiers, self.fusion_classifier)}
        if len(classes) != 1:
            raise ConfigurationError(f"classifiers disagree on class count: {sorted(classes)}")

    @property
    def num_modalities(self):
        return len(self.encoders)

    @property
    def representation_dim(self):
        return self.encoders[0].output_dim

    @property
    def num_classes(self):
        return self.fusion_classifier.num_classes


def make_model_spec(
    input_dims,
    num_classes,
    representation_dim=32,
    encoder_hidden=(64, 64),
    classifier_hidden=(64, 64),
):
    """Default architecture: small trainable perceptrons for every modality."""
    encoders = tuple(
        EncoderSpec(int(d), tuple(encoder_hidden), int(representation_dim)) for d in input_dims
    )
    unimodal = tuple(
        ClassifierSpec(int(representation_dim), tuple(classifier_hidden), int(num_classes))
        for _ in input_dims
    )
    fusion = ClassifierSpec(
        int(representation_dim) * len(encoders), tuple(classifier_hidden), int(num_classes)
    )
    return ModelSpec(encoders, unimodal, fusion)


@dataclass
class ModelState:
    """All trainable parameters; layers are (weight, bias) tensor pairs."""

    spec: ModelSpec
    encoders: list = field(default_factory=list)
    unimodal_classifiers: list = field(default_factory=list)
    fusion_classifier: list = field(default_factory=list)

    def named_parameters(self):
        """Deterministically ordered (name, tensor) pairs."""
        out = []
        for m, layers in enumerate(self.encoders):
            for i, (w, b) in enumerate(layers):
                out.append((f"encoder{m}.layer{i}.weight", w))
                out.append((f"encoder{m}.layer{i}.bias", b))
        for m, layers in enumerate(self.unimodal_classifiers):
            for i, (w, b) in enumerate(layers):
                out.append((f"unimodal{m}.layer{i}.weight", w))
                out.append((f"unimodal{m}.layer{i}.bias", b))
        for i, (w, b) in enumerate(self.fusion_classifier):
            out.append((f"fusion.layer{i}.weight", w))
            out.append((f"fusion.layer{i}.bias", b))
        return out

    def clone(self):
        copy = ModelState(self.spec)
        copy.encoders = [[_clone_layer(l) for l in layers] for layers in self.encoders]
        copy.unimodal_classifiers = [
            [_clone_layer(l) for l in layers] for layers in self.unimodal_classifiers
        ]
        copy.fusion_classifier = [_clone_layer(l) for l in self.fusion_classifier]
        return copy


def _clone_layer(layer):
    w, b = layer
    return (
        ad.Tensor(w.values.copy(), requires_grad=True),
        ad.Tensor(b.values.copy(), requires_grad=True),
    )


def _init_stack(rng, layer_dims):
    layers = []
    for fan_in, fan_out in layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(
            (
                ad.Tensor(w, requires_grad=True),
                ad.Tensor(np.zeros(fan_out), requires_grad=True),
            )
        )
    return layers


def init_model(spec, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    state = ModelState(spec)
    state.encoders = [_init_stack(rng, e.layer_dims()) for e in spec.encoders]
    state.unimodal_classifiers = [_init_stack(rng, c.layer_dims()) for c in spec.unimodal_classifiers]
    state.fusion_classifier = _init_stack(rng, spec.fusion_classifier.layer_dims())
    return state


def _forward_stack(layers, x):
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = ad.relu(h)
    return h


def encode(state, batch):
    """One representation matrix per modality, rows aligned across modalities."""
    if len(batch.features) != state.spec.num_modalities:
        raise ShapeError(
            f"batch has {len(batch.features)} modalities, model expects {state.spec.num_modalities}"
        )
    reps = []
    for m, features in enumerate(batch.features):
        expected = state.spec.encoders[m].input_dim
        if features.ndim != 2 or features.shape[1] != expected:
            raise ShapeError(
                f"modality {m}: feature width {features.shape[1:]} does not match encoder input {expected}"
            )
        reps.append(_forward_stack(state.encoders[m], ad.Tensor(features)))
    return reps


def predict_unimodal(state, representation, modality):
    expected = state.spec.unimodal_classifiers[modality].input_dim
    if representation.shape[1] != expected:
        raise ShapeError(
            f"modality {modality}: representation width {representation.shape[1]} "
            f"does not match classifier input {expected}"
        )
    return _forward_stack(state.unimodal_classifiers[modality], representation)


def fuse_and_predict(state, representations):
    """Concatenate representations in modality order and classify the result."""
    rows = {r.shape[0] for r in representations}
    if len(rows) != 1:
        raise ShapeError(f"representations are not row-aligned: row counts {sorted(rows)}")
    fused = ad.concat(representations, axis=1)
    return fused, _forward_stack(state.fusion_classifier, fused)


def _spec_to_dict(spec):
    return {
        "encoders": [
            {"input_dim": e.input_dim, "hidden_dims": list(e.hidden_dims), "output_dim": e.output_dim}
            for e in spec.encoders
        ],
        "unimodal_classifiers": [
            {"input_dim": c.input_dim, "hidden_dims": list(c.hidden_dims), "num_classes": c.num_classes}
            for c in spec.unimodal_classifiers
        ],
        "fusion_classifier": {
            "input_dim": spec.fusion_classifier.input_dim,
            "hidden_dims": list(spec.fusion_classifier.hidden_dims),
            "num_classes": spec.fusion_classifier.num_classes,
        },
    }


def _spec_from_dict(d):
    return ModelSpec(
        tuple(EncoderSpec(e["input_dim"], tuple(e["hidden_dims"]), e["output_dim"]) for e in d["encoders"]),
        tuple(
            ClassifierSpec(c["input_dim"], tuple(c["hidden_dims"]), c["num_classes"])
            for c in d["unimodal_classifiers"]
        ),
        ClassifierSpec(
            d["fusion_classifier"]["input_dim"],
            tuple(d["fusion_classifier"]["hidden_dims"]),
            d["fusion_classifier"]["num_classes"],
        ),
    )


def save_model(state, path):
    """Checkpoint: container with the spec and one raw float64 block per parameter."""
    params = state.named_parameters()
    header = {
        "kind": "model-checkpoint",
        "spec": _spec_to_dict(state.spec),
        "parameters": [{"name": n, "shape": list(t.shape)} for n, t in params],
    }
    blocks = [np.ascontiguousarray(t.values, dtype="<f8").tobytes() for _, t in params]
    return write_container(path, _CHECKPOINT_MAGIC, _CHECKPOINT_VERSION, header, blocks)


def load_model(path):
    header, blocks = read_container(path, _CHECKPOINT_MAGIC, _CHECKPOINT_VERSION)
    if header.get("kind") != "model-checkpoint":
        raise FormatError(f"{path}: not a model checkpoint")
    spec = _spec_from_dict(header["spec"])
    state = init_model(spec, seed=0)
    params = state.named_parameters()
    recorded = header["parameters"]
    if len(recorded) != len(params) or len(blocks) != len(params):
        raise FormatError(f"{path}: parameter count does not match the recorded spec")
    for (name, tensor), meta, block in zip(params, recorded, blocks):
        if meta["name"] != name or tuple(meta["shape"]) != tensor.shape:
            raise FormatError(f"{path}: parameter {meta['name']} does not match the spec layout")
        if len(block) != tensor.values.size * 8:
            raise FormatError(f"{path}: parameter block for {name} has the wrong size")
        values = np.frombuffer(block, dtype="<f8").reshape(tensor.shape)
        tensor.values = values.astype(np.float64)
    return state
