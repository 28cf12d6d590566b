"""Frozen pretrained backbones with a trainable classification head."""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torchvision

from .dataset import NUM_SCANS, PreprocessConfig
from .errors import (
    CheckpointError,
    CheckpointMismatchError,
    RegistryError,
    ShapeError,
    WeightLoadError,
)

CHECKPOINT_FORMAT = "path24-checkpoint/1"


@dataclass(frozen=True)
class BackboneEntry:
    factory: Callable[[], nn.Module]
    feature_dim: int
    weights: Optional[str] = None  # torchvision weights enum name


_BACKBONES: dict = {}


def register_backbone(name: str, feature_dim: int, weights: Optional[str] = None):
    """Decorator registering a factory that returns a pooled feature extractor.

    The factory must build a module mapping ``B x 3 x H x W`` images to
    ``B x feature_dim`` features with random weights. ``weights`` names a
    torchvision weights enum member used when pretrained weights are
    requested without an explicit file.
    """
    def wrap(factory):
        _BACKBONES[name] = BackboneEntry(factory, feature_dim, weights)
        return factory
    return wrap


def registered_backbones() -> list:
    return sorted(_BACKBONES)


def _strip_classifier(net: nn.Module, attr: str) -> nn.Module:
    setattr(net, attr, nn.Identity())
    return net


@register_backbone("resnet50", 2048, "ResNet50_Weights.IMAGENET1K_V1")
def _resnet50():
    # keeps the global average pool, drops the fc layer
    return _strip_classifier(torchvision.models.resnet50(weights=None), "fc")


@register_backbone("densenet161", 2208, "DenseNet161_Weights.IMAGENET1K_V1")
def _densenet161():
    return _strip_classifier(torchvision.models.densenet161(weights=None), "classifier")


@register_backbone("resnet18", 512, "ResNet18_Weights.IMAGENET1K_V1")
def _resnet18():
    return _strip_classifier(torchvision.models.resnet18(weights=None), "fc")


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "resnet50"
    pretrained: bool = True
    weights_path: Optional[str] = None

    @property
    def feature_dim(self) -> int:
        return _lookup(self.name).feature_dim

    def to_dict(self) -> dict:
        return {"name": self.name, "pretrained": self.pretrained,
                "weights_path": self.weights_path, "feature_dim": self.feature_dim}


def _lookup(name: str) -> BackboneEntry:
    try:
        return _BACKBONES[name]
    except KeyError:
        raise RegistryError(
            f"unknown backbone {name!r}; registered: {', '.join(registered_backbones())}"
        ) from None


@dataclass(frozen=True)
class HeadConfig:
    hidden_width: int = 512
    dropout_rates: tuple = (0.25, 0.50)
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    num_classes: int = NUM_SCANS
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "dropout_rates", tuple(float(r) for r in self.dropout_rates))
        if len(self.dropout_rates) != 2 or not all(0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ValueError(f"dropout_rates must be two values in [0, 1), got {self.dropout_rates}")
        if self.hidden_width < 1 or self.num_classes < 1:
            raise ValueError("hidden_width and num_classes must be >= 1")
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be > 0")
        if not 0.0 <= self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must be in [0, 1]")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"activation must be 'relu' or 'none', got {self.activation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout_rates"] = list(self.dropout_rates)
        return d


def build_head(in_features: int, config: HeadConfig) -> nn.Sequential:
    """BN -> dropout -> FC -> [ReLU] -> BN -> dropout -> FC, emitting logits."""
    r1, r2 = config.dropout_rates
    layers = [
        nn.BatchNorm1d(in_features, eps=config.bn_epsilon, momentum=config.bn_momentum),
        nn.Dropout(r1),
        nn.Linear(in_features, config.hidden_width),
    ]
    if config.activation == "relu":
        layers.append(nn.ReLU(inplace=True))
    layers += [
        nn.BatchNorm1d(config.hidden_width, eps=config.bn_epsilon, momentum=config.bn_momentum),
        nn.Dropout(r2),
        nn.Linear(config.hidden_width, config.num_classes),
    ]
    return nn.Sequential(*layers)


class ClassifierModel(nn.Module):
    """Backbone feature extractor followed by the classification head.

    ``forward`` returns logits. While the base is frozen the backbone stays
    in eval mode even when the model is put in training mode, so its
    batch-norm running statistics never move.
    """

    def __init__(self, backbone: nn.Module, head: nn.Module, backbone_spec: BackboneSpec,
                 head_config: HeadConfig, preprocess: Optional[PreprocessConfig] = None,
                 seed: Optional[int] = None):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.backbone_spec = backbone_spec
        self.head_config = head_config
        self.preprocess = preprocess or PreprocessConfig()
        self.seed = seed
        self.base_frozen = False

    def train(self, mode: bool = True):
        super().train(mode)
        if self.base_frozen:
            self.backbone.eval()
        return self

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if self.base_frozen:
            with torch.no_grad():
                return self.backbone(x)
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def trainable_mask(self) -> dict:
        return {name: p.requires_grad for name, p in self.named_parameters()}


def _load_pretrained(net: nn.Module, spec: BackboneSpec, entry: BackboneEntry):
    if spec.weights_path is not None:
        path = Path(spec.weights_path)
        if not path.is_file():
            raise WeightLoadError(f"backbone weight file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise WeightLoadError(f"cannot read backbone weights {path}: {exc}") from exc
    elif entry.weights is not None:
        enum_name, member = entry.weights.split(".")
        try:
            weights = getattr(torchvision.models, enum_name)[member]
            state = weights.get_state_dict(progress=False)
        except Exception as exc:
            raise WeightLoadError(
                f"cannot fetch pretrained weights {entry.weights} for {spec.name}: {exc}; "
                "pass weights_path to load them from a local file"
            ) from exc
    else:
        raise WeightLoadError(f"backbone {spec.name} has no pretrained weights; set weights_path")
    # classifier weights from the full model are dropped along with the layer
    state = {k: v for k, v in state.items() if not k.startswith(("fc.", "classifier."))}
    missing, unexpected = net.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise WeightLoadError(
            f"weights for {spec.name} do not fit: missing={missing[:5]} unexpected={unexpected[:5]}"
        )


def build_classifier(
    backbone: BackboneSpec | str = "resnet50",
    head: Optional[HeadConfig] = None,
    preprocess: Optional[PreprocessConfig] = None,
    seed: Optional[int] = 0,
    freeze: bool = True,
) -> ClassifierModel:
    """Graft a fresh head onto a registered backbone and freeze the base.

    ``seed`` controls the head (and random backbone) initialization.
    """
    spec = BackboneSpec(backbone) if isinstance(backbone, str) else backbone
    head = head or HeadConfig()
    entry = _lookup(spec.name)
    gen_state = torch.random.get_rng_state()
    try:
        if seed is not None:
            torch.manual_seed(seed)
        net = entry.factory()
        if spec.pretrained:
            _load_pretrained(net, spec, entry)
        head_module = build_head(entry.feature_dim, head)
    finally:
        if seed is not None:
            torch.random.set_rng_state(gen_state)
    model = ClassifierModel(net, head_module, spec, head, preprocess, seed)
    if freeze:
        freeze_base(model)
    return model


def freeze_base(model: ClassifierModel) -> ClassifierModel:
    """Exclude every backbone parameter from gradient updates. Idempotent."""
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    for p in model.head.parameters():
        p.requires_grad_(True)
    model.base_frozen = True
    model.backbone.eval()
    return model


def trainable_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def head_parameter_count(feature_dim: int, config: HeadConfig) -> int:
    """Closed-form parameter count of :func:`build_head`."""
    h, c = config.hidden_width, config.num_classes
    return 2 * feature_dim + (feature_dim * h + h) + 2 * h + (h * c + c)


def state_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer of ``module``."""
    digest = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _as_batch(batch) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch)
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-d batch (B x S x S x 3 or B x 3 x S x S), got shape {tuple(x.shape)}")
    if x.shape[1] != 3 and x.shape[-1] == 3:
        x = x.permute(0, 3, 1, 2)
    if x.shape[1] != 3:
        raise ShapeError(f"expected 3 channels, got batch shape {tuple(x.shape)}")
    return x.float().contiguous()


def forward(model: ClassifierModel, batch, mode: str = "eval") -> torch.Tensor:
    """Run a batch through the model.

    ``mode="eval"`` disables dropout, uses running batch-norm statistics and
    returns class probabilities; ``mode="train"`` returns logits with the
    graph attached.
    """
    x = _as_batch(batch)
    size = model.preprocess.target_size
    if x.shape[-2:] != (size, size):
        raise ShapeError(
            f"expected images of {size}x{size}, got {x.shape[-2]}x{x.shape[-1]}"
        )
    if mode == "eval":
        model.eval()
        with torch.no_grad():
            return torch.softmax(model(x), dim=1)
    if mode == "train":
        model.train()
        return model(x)
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def argmax_with_confidence(probs):
    """First index of the maximum (lowest class wins ties) and its value."""
    p = np.asarray(probs.detach().cpu() if torch.is_tensor(probs) else probs, dtype=np.float64)
    k = int(np.argmax(p))
    return k, float(p[k])


def predict(model: ClassifierModel, image):
    """Classify one preprocessed image; returns ``(scan_id, confidence)``."""
    probs = forward(model, np.asarray(image)[None] if not torch.is_tensor(image) else image[None])
    return argmax_with_confidence(probs[0])


def save_checkpoint(model: ClassifierModel, path, extra: Optional[dict] = None) -> Path:
    """Write weights and every config needed to rebuild ``model``, atomically."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "backbone": model.backbone_spec.to_dict(),
        "head": model.head_config.to_dict(),
        "preprocess": model.preprocess.to_dict(),
        "seed": model.seed,
        "base_frozen": model.base_frozen,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return payload


def load_checkpoint(path, backbone: Optional[str] = None, head: Optional[HeadConfig] = None) -> ClassifierModel:
    """Rebuild a model from a checkpoint.

    If ``backbone`` or ``head`` are given they must match what the
    checkpoint was saved with.
    """
    payload = read_checkpoint(path)
    b = payload["backbone"]
    if backbone is not None and backbone != b["name"]:
        raise CheckpointMismatchError(
            f"checkpoint {path} holds a {b['name']} model, requested {backbone}"
        )
    head_cfg = HeadConfig(**payload["head"])
    if head is not None and head != head_cfg:
        raise CheckpointMismatchError(f"checkpoint {path} head {head_cfg} != requested {head}")
    spec = BackboneSpec(b["name"], b["pretrained"], b["weights_path"])
    if b["feature_dim"] != spec.feature_dim:
        raise CheckpointMismatchError(
            f"checkpoint {path} feature width {b['feature_dim']} != registered {spec.feature_dim}"
        )
    model = build_classifier(
        BackboneSpec(spec.name, pretrained=False),
        head_cfg,
        PreprocessConfig(**payload["preprocess"]),
        seed=0,  # overwritten below; fixed so loading leaves the global RNG alone
        freeze=False,
    )
    model.backbone_spec = spec
    model.seed = payload["seed"]
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise CheckpointMismatchError(f"weights in {path} do not fit the model: {exc}") from exc
    if payload.get("base_frozen", True):
        freeze_base(model)
    model.eval()
    return model
