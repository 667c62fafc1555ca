"""Adapter around the frozen classifier that MACE explains.

The adapter exposes the activation of the last convolutional layer (the tap
``x``), the output of the first dense layer ``z``, the continuation from ``z``
to class probabilities, and the probabilities themselves. MACE never updates
black-box weights.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_archive, save_archive
from .synthetic import IMAGE_SIZE, class_names as synthetic_class_names, split_dataset, stack

log = logging.getLogger(__name__)

DTYPE = torch.float64


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlackBoxSpec:
    num_classes: int
    tap_height: int
    tap_width: int
    tap_depth: int
    dense_dim: int
    input_height: int
    input_width: int
    input_channels: int
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("tap_height", "tap_width", "tap_depth", "dense_dim",
                     "input_height", "input_width", "input_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.class_names) != self.num_classes or len(set(self.class_names)) != self.num_classes:
            raise ValueError("class_names must hold num_classes distinct labels")

    @property
    def tap_shape(self):
        return (self.tap_height, self.tap_width, self.tap_depth)

    @property
    def input_shape(self):
        return (self.input_height, self.input_width, self.input_channels)

    def class_index(self, key):
        """Resolve a class given as an index, a digit string or a name."""
        if isinstance(key, (int, np.integer)):
            k = int(key)
        elif isinstance(key, str) and key.isdigit():
            k = int(key)
        elif key in self.class_names:
            k = self.class_names.index(key)
        else:
            raise ValueError(f"unknown class {key!r}; known: {self.class_names}")
        if not 0 <= k < self.num_classes:
            raise ValueError(f"class index {k} out of range [0, {self.num_classes})")
        return k


@dataclass
class TapOutput:
    x: np.ndarray  # H x W x D
    z: np.ndarray  # L
    probs: np.ndarray  # K


class BlackBox:
    """Interface every explained classifier implements.

    Batched tensor methods take images as N x H x W x C and taps as N x H x W x D
    (channels last). ``head`` must be differentiable with respect to ``z``.
    """

    spec: BlackBoxSpec

    def tap(self, images):
        """Return (x, z, probs) tensors for a batch of images."""
        raise NotImplementedError

    def dense(self, x):
        """Map tap activations to the first dense-layer output z."""
        raise NotImplementedError

    def head(self, z):
        """Continue from z to class probabilities."""
        raise NotImplementedError

    def predict_proba(self, images):
        return self.tap(images)[2]

    def forward_tap(self, image):
        pixels = getattr(image, "pixels", image)
        pixels = np.asarray(pixels)
        if pixels.shape != self.spec.input_shape:
            raise ValueError(f"image shape {pixels.shape} != expected {self.spec.input_shape}")
        with torch.no_grad():
            x, z, probs = self.tap(torch.as_tensor(pixels, dtype=DTYPE)[None])
        return TapOutput(x[0].numpy(), z[0].numpy(), probs[0].numpy())

    def forward_from_dense(self, z_hat):
        z_hat = np.asarray(z_hat, dtype=np.float64)
        if z_hat.shape != (self.spec.dense_dim,):
            raise ValueError(f"z_hat must have length {self.spec.dense_dim}, got shape {z_hat.shape}")
        with torch.no_grad():
            return self.head(torch.as_tensor(z_hat)[None])[0].numpy()

    def forward_from_tap(self, x):
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(x), dtype=DTYPE)
            return self.head(self.dense(x[None]))[0].numpy()

    def tap_dataset(self, images, batch_size=256):
        """Tap a list of LabeledImage (or an N x H x W x C array) in batches."""
        pixels = stack(images)[0] if isinstance(images, list) else np.asarray(images)
        xs, zs, ps = [], [], []
        with torch.no_grad():
            for start in range(0, len(pixels), batch_size):
                x, z, p = self.tap(torch.as_tensor(pixels[start:start + batch_size], dtype=DTYPE))
                xs.append(x)
                zs.append(z)
                ps.append(p)
        return torch.cat(xs), torch.cat(zs), torch.cat(ps)


class ToyClassifier(nn.Module, BlackBox):
    """Three stride-2 3x3 conv blocks with ReLU, one ReLU dense layer of width L, softmax head.

    A 64 x 64 input gives an 8 x 8 tap.
    """

    def __init__(self, spec, widths=(16, 32)):
        super().__init__()
        self.spec = spec
        self.widths = tuple(widths)
        chans = [spec.input_channels, *widths, spec.tap_depth]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, kernel_size=3, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:])
        )
        self.fc = nn.Linear(spec.tap_height * spec.tap_width * spec.tap_depth, spec.dense_dim)
        self.out = nn.Linear(spec.dense_dim, spec.num_classes)
        self.accuracy = None
        self.seed = None
        self.to(DTYPE)

    def features(self, images):
        h = images.permute(0, 3, 1, 2)
        for conv in self.convs:
            h = F.relu(conv(h))
        return h.permute(0, 2, 3, 1)

    def dense(self, x):
        return F.relu(self.fc(x.reshape(x.shape[0], -1)))

    def head(self, z):
        return torch.softmax(self.out(z), dim=-1)

    def logits(self, images):
        return self.out(self.dense(self.features(images)))

    def tap(self, images):
        images = images.to(self.out.weight.dtype)
        if tuple(images.shape[1:]) != self.spec.input_shape:
            raise ValueError(f"image shape {tuple(images.shape[1:])} != expected {self.spec.input_shape}")
        x = self.features(images)
        z = self.dense(x)
        return x, z, self.head(z)

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def save(self, path):
        arrays = {name: t.detach().numpy() for name, t in self.state_dict().items()}
        manifest = {
            "kind": "toy-classifier",
            "spec": asdict(self.spec),
            "widths": list(self.widths),
            "seed": self.seed,
            "accuracy": self.accuracy,
            "z_tap": "post-activation",
        }
        save_archive(path, arrays, manifest)

    @classmethod
    def load(cls, path):
        arrays, manifest = load_archive(path)
        if manifest.get("kind") != "toy-classifier":
            raise ValueError(f"{path} is not a toy-classifier checkpoint")
        model = cls(BlackBoxSpec(**manifest["spec"]), widths=tuple(manifest["widths"]))
        model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
        model.accuracy = manifest["accuracy"]
        model.seed = manifest["seed"]
        return model.freeze()


def toy_spec(num_classes=4, tap_depth=16, dense_dim=64, image_size=IMAGE_SIZE):
    tap = image_size // 8
    return BlackBoxSpec(
        num_classes=num_classes,
        tap_height=tap,
        tap_width=tap,
        tap_depth=tap_depth,
        dense_dim=dense_dim,
        input_height=image_size,
        input_width=image_size,
        input_channels=3,
        class_names=synthetic_class_names(num_classes),
    )


def accuracy(blackbox, images):
    pixels, labels, _ = stack(images)
    _, _, probs = blackbox.tap_dataset(pixels)
    return float((probs.argmax(1).numpy() == labels).mean())


def train_toy_classifier(dataset, epochs=30, seed=0, heldout=None, spec=None,
                         batch_size=32, lr=1e-3, weight_decay=0.0, activation_penalty=1e-3,
                         min_accuracy=0.8):
    """Train the reference conv net and return it frozen, with held-out accuracy recorded.

    Without ``heldout``, a stratified 20% of ``dataset`` is held out. Raises
    TrainingError when a run with epochs > 0 ends below ``min_accuracy``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if heldout is None:
        dataset, heldout = split_dataset(dataset, (0.8, 0.2), seed)
    num_classes = max(im.label for im in dataset) + 1
    spec = spec or toy_spec(num_classes)

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ToyClassifier(spec).float()
    gen = torch.Generator().manual_seed(seed)
    pixels, labels, _ = stack(dataset)
    # trained in float32 for speed, frozen in float64
    pixels = torch.as_tensor(pixels, dtype=torch.float32)
    labels = torch.as_tensor(labels)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)

    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(pixels), generator=gen)
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            z = model.dense(model.features(pixels[idx]))
            loss = F.cross_entropy(model.out(z), labels[idx])
            if activation_penalty:
                loss = loss + activation_penalty * (z ** 2).sum(1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.debug("toy classifier epoch %d loss %.4f", epoch, total / len(order))

    model.to(DTYPE).freeze()
    model.seed = seed
    model.accuracy = accuracy(model, heldout)
    if epochs > 0 and model.accuracy < min_accuracy:
        raise TrainingError(
            f"toy classifier reached held-out accuracy {model.accuracy:.3f} < {min_accuracy} "
            f"after {epochs} epochs (seed={seed}, lr={lr}, n_train={len(dataset)})"
        )
    return model
