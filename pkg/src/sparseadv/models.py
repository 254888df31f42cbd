"""
Desk-scale classifier zoo.

Four small networks with different connectivity patterns stand in for the
residual, plain, densely connected and multi-branch families. Every model
normalizes its input internally so attacks always operate on [0, 1] images.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .data import iterate_minibatches

logger = logging.getLogger(__name__)

ACCURACY_FLOOR = 0.75


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def _conv_bn(cin, cout, k=3, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, k // 2, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.b1 = nn.BatchNorm2d(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.b2 = nn.BatchNorm2d(cout)
        self.skip = nn.Identity()
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                      nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.b1(self.c1(x)))
        return F.relu(self.b2(self.c2(out)) + self.skip(x))


class SmallResNet(nn.Module):
    def __init__(self, in_ch, num_classes, width=16):
        super().__init__()
        self.stem = _conv_bn(in_ch, width)
        self.layers = nn.Sequential(
            _BasicBlock(width, width, 1), _BasicBlock(width, 2 * width, 2),
            _BasicBlock(2 * width, 4 * width, 2))
        self.fc = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        x = self.layers(self.stem(x))
        return self.fc(F.adaptive_avg_pool2d(x, 1).flatten(1))


class SmallVGG(nn.Module):
    # plain stack, no batch norm
    def __init__(self, in_ch, num_classes, width=16):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(in_ch, w, 3, padding=1), nn.ReLU(True),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(True), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(True),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(True), nn.MaxPool2d(2),
        )
        self.classifier = nn.Sequential(
            nn.AdaptiveAvgPool2d(2), nn.Flatten(), nn.Linear(8 * w, 64), nn.ReLU(True),
            nn.Linear(64, num_classes))

    def forward(self, x):
        return self.classifier(self.features(x))


class _DenseLayer(nn.Module):
    def __init__(self, cin, growth):
        super().__init__()
        self.body = nn.Sequential(nn.BatchNorm2d(cin), nn.ReLU(True),
                                  nn.Conv2d(cin, growth, 3, padding=1, bias=False))

    def forward(self, x):
        return torch.cat([x, self.body(x)], dim=1)


class SmallDenseNet(nn.Module):
    def __init__(self, in_ch, num_classes, growth=8, layers=(3, 3)):
        super().__init__()
        ch = 2 * growth
        mods = [nn.Conv2d(in_ch, ch, 3, padding=1, bias=False)]
        for i, n in enumerate(layers):
            for _ in range(n):
                mods.append(_DenseLayer(ch, growth))
                ch += growth
            if i < len(layers) - 1:
                mods += [nn.BatchNorm2d(ch), nn.ReLU(True), nn.Conv2d(ch, ch // 2, 1, bias=False),
                         nn.AvgPool2d(2)]
                ch //= 2
        mods += [nn.BatchNorm2d(ch), nn.ReLU(True)]
        self.features = nn.Sequential(*mods)
        self.fc = nn.Linear(ch, num_classes)

    def forward(self, x):
        return self.fc(F.adaptive_avg_pool2d(self.features(x), 1).flatten(1))


class _InceptionModule(nn.Module):
    def __init__(self, cin, b):
        super().__init__()
        self.b1 = _conv_bn(cin, b, 1)
        self.b3 = nn.Sequential(_conv_bn(cin, b, 1), _conv_bn(b, b, 3))
        self.b5 = nn.Sequential(_conv_bn(cin, b // 2, 1), _conv_bn(b // 2, b, 5))
        self.bp = nn.Sequential(nn.MaxPool2d(3, 1, 1), _conv_bn(cin, b, 1))

    def forward(self, x):
        return torch.cat([self.b1(x), self.b3(x), self.b5(x), self.bp(x)], dim=1)


class SmallInception(nn.Module):
    def __init__(self, in_ch, num_classes, branch=8):
        super().__init__()
        self.stem = _conv_bn(in_ch, 2 * branch)
        self.m1 = _InceptionModule(2 * branch, branch)
        self.pool = nn.MaxPool2d(2)
        self.m2 = _InceptionModule(4 * branch, 2 * branch)
        self.fc = nn.Linear(8 * branch, num_classes)

    def forward(self, x):
        x = self.m2(self.pool(self.m1(self.stem(x))))
        return self.fc(F.adaptive_avg_pool2d(x, 1).flatten(1))


ARCHITECTURES = {
    "small-resnet": SmallResNet,
    "small-vgg": SmallVGG,
    "small-densenet": SmallDenseNet,
    "small-inception-like": SmallInception,
}


@dataclass
class ClassifierManifest:
    arch: str
    seed: int
    accuracy: float
    epochs: int
    dataset_id: str
    num_classes: int
    input_channels: int
    resolution: list
    mean: list
    std: list
    checksum: str = ""
    below_floor: bool = False


class ClassifierHandle(nn.Module):
    """A frozen-able classifier with its own input normalization."""

    def __init__(self, arch, num_classes, mean, std, resolution, input_channels=3):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
        self.arch = arch
        self.num_classes = num_classes
        self.resolution = tuple(resolution)
        self.normalize = Normalize(mean, std)
        self.net = ARCHITECTURES[arch](input_channels, num_classes)
        self.manifest = None

    def forward(self, x):
        if tuple(x.shape[2:]) != self.resolution:
            raise ValueError(f"{self.arch} expects {self.resolution} inputs, got {tuple(x.shape[2:])}")
        return self.net(self.normalize(x))

    @property
    def model_id(self):
        return self.arch

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def logits(f: ClassifierHandle, x, requires_grad=False):
    if requires_grad:
        return f(x)
    with torch.no_grad():
        return f(x)


@torch.no_grad()
def predict(f, x, batch_size=500):
    return torch.cat([f(x[i:i + batch_size]).argmax(dim=1) for i in range(0, len(x), batch_size)])


def accuracy(f, dataset):
    f.eval()
    return (predict(f, dataset.images) == dataset.labels).double().mean().item()


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_classifier(arch, train_set, test_set, seed=0, epochs=30, batch_size=64, lr=2e-3,
                     out_dir=None):
    """Train one zoo member, record its clean accuracy and optionally save it."""
    torch.manual_seed(seed)
    f = ClassifierHandle(arch, train_set.num_classes, train_set.channel_mean,
                         train_set.channel_std, train_set.resolution,
                         train_set.images.shape[1])
    opt = torch.optim.Adam(f.parameters(), lr=lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    g = torch.Generator().manual_seed(seed + 1)
    for epoch in range(epochs):
        f.train()
        for idx in iterate_minibatches(len(train_set), batch_size, seed, epoch):
            x = train_set.images[idx]
            # light augmentation: random shift by up to one pixel
            dx, dy = torch.randint(-1, 2, (2,), generator=g).tolist()
            x = torch.roll(x, shifts=(dy, dx), dims=(2, 3))
            loss = F.cross_entropy(f(x), train_set.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    f.freeze()
    acc = accuracy(f, test_set)
    f.manifest = ClassifierManifest(
        arch=arch, seed=seed, accuracy=acc, epochs=epochs, dataset_id=train_set.dataset_id,
        num_classes=train_set.num_classes, input_channels=train_set.images.shape[1],
        resolution=list(train_set.resolution), mean=train_set.channel_mean,
        std=train_set.channel_std, below_floor=acc < ACCURACY_FLOOR)
    if f.manifest.below_floor:
        logger.warning("%s reached only %.3f clean accuracy (floor %.2f)", arch, acc, ACCURACY_FLOOR)
    if out_dir is not None:
        save_classifier(f, out_dir)
    return f


def save_classifier(f: ClassifierHandle, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weights = directory / f"{f.arch}.pt"
    torch.save(f.state_dict(), weights)
    f.manifest.checksum = hashlib.sha256(weights.read_bytes()).hexdigest()
    (directory / f"{f.arch}.json").write_text(json.dumps(asdict(f.manifest), indent=2))
    return weights


def load_classifier(directory, arch):
    directory = Path(directory)
    meta = ClassifierManifest(**json.loads((directory / f"{arch}.json").read_text()))
    weights = directory / f"{arch}.pt"
    digest = hashlib.sha256(weights.read_bytes()).hexdigest()
    if meta.checksum and digest != meta.checksum:
        raise ValueError(f"checksum mismatch for {weights}")
    f = ClassifierHandle(meta.arch, meta.num_classes, meta.mean, meta.std, meta.resolution,
                         meta.input_channels)
    f.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    f.manifest = meta
    return f.freeze()
