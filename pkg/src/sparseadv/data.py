"""
Dataset ingestion.

Two sources are supported:

* a folder tree ``root/<split>/<class_name>/<image files>``, decoded with PIL
  to float tensors in [0, 1] (RGB, channels first);
* ``builtin:digits`` -- the 10-class handwritten digits set bundled with
  scikit-learn, upsampled to a configurable square resolution and painted
  with per-image random colours (``builtin:digits-gray`` keeps the grey
  level). It is the desk-scale default because it needs no download.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".ppm", ".tif", ".tiff", ".gif"}
BUILTIN_PREFIX = "builtin:"
DIGITS_TEST_COUNT = 400
DIGITS_SPLIT_SEED = 20200601


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetHandle:
    split: str
    images: torch.Tensor          # (N, C, H, W), float32 in [0, 1]
    labels: torch.Tensor          # (N,), int64
    class_names: list
    dataset_id: str
    paths: list = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    @property
    def resolution(self):
        return tuple(self.images.shape[2:])

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def channel_mean(self):
        return self.images.mean(dim=(0, 2, 3)).tolist()

    @property
    def channel_std(self):
        return self.images.std(dim=(0, 2, 3)).clamp_min(1e-3).tolist()

    def subset(self, index):
        index = torch.as_tensor(index, dtype=torch.long)
        paths = [self.paths[i] for i in index.tolist()] if self.paths else []
        return DatasetHandle(self.split, self.images[index], self.labels[index],
                             self.class_names, self.dataset_id, paths)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.images.numpy().tobytes())
        h.update(self.labels.numpy().tobytes())
        return h.hexdigest()[:16]


def _decode(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as err:
        raise DatasetError(f"cannot read image {path}: {err}") from err
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_folder(root, split):
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DatasetError(f"split directory not found: {split_dir}")
    class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class folders in {split_dir}")
    images, labels, paths = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class folder has no images: {cdir}")
        for f in files:
            images.append(_decode(f))
            labels.append(label)
            paths.append(str(f))
    shapes = {tuple(t.shape) for t in images}
    if len(shapes) != 1:
        raise DatasetError(f"images in {split_dir} have mixed sizes: {sorted(shapes)}")
    return DatasetHandle(split, torch.stack(images), torch.tensor(labels, dtype=torch.long),
                         [d.name for d in class_dirs], f"folder:{Path(root).name}", paths)


def _colorize(gray, seed, min_contrast=0.35):
    """Paint each digit with its own random foreground and background colour."""
    g = torch.Generator().manual_seed(seed)
    n = gray.shape[0]
    bg = torch.rand(n, 3, 1, 1, generator=g)
    fg = torch.rand(n, 3, 1, 1, generator=g)
    lum = torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
    for _ in range(100):
        weak = ((fg - bg) * lum).sum(dim=1).abs().flatten() < min_contrast
        if not weak.any():
            break
        fg[weak] = torch.rand(int(weak.sum()), 3, 1, 1, generator=g)
        bg[weak] = torch.rand(int(weak.sum()), 3, 1, 1, generator=g)
    return bg + gray * (fg - bg)


def load_digits(split, size=16, color=True):
    """Bundled 8x8 digits, bilinearly upsampled to ``size``, as RGB.

    With ``color`` each image gets seeded random foreground/background
    colours; otherwise the grey level is replicated over three channels.
    """
    from sklearn.datasets import load_digits as _sk_digits

    if split not in ("train", "test"):
        raise DatasetError(f"unknown split {split!r} for builtin digits (use train/test)")
    bunch = _sk_digits()
    x = torch.from_numpy(bunch.images.astype(np.float32) / 16.0)[:, None]
    if size != 8:
        x = torch.nn.functional.interpolate(x, size=(size, size), mode="bilinear",
                                            align_corners=False)
    x = x.clamp(0, 1)
    x = _colorize(x, DIGITS_SPLIT_SEED + 1) if color else x.expand(-1, 3, -1, -1)
    # quantize to 8-bit so a lossless PNG round trip is exact
    x = (torch.round(x.clamp(0, 1) * 255) / 255).contiguous()
    y = torch.from_numpy(bunch.target.astype(np.int64))
    order = torch.randperm(len(y), generator=torch.Generator().manual_seed(DIGITS_SPLIT_SEED))
    idx = order[:DIGITS_TEST_COUNT] if split == "test" else order[DIGITS_TEST_COUNT:]
    idx = idx.sort().values
    return DatasetHandle(split, x[idx], y[idx], [str(i) for i in range(10)],
                         f"digits{size}" + ("" if color else "-gray"))


def load_dataset(root, split, size=16):
    """Load ``split`` from a folder tree or a ``builtin:<name>`` source."""
    root = str(root)
    if root.startswith(BUILTIN_PREFIX):
        name = root[len(BUILTIN_PREFIX):]
        if name not in ("digits", "digits-gray"):
            raise DatasetError(f"unknown builtin dataset {name!r}")
        return load_digits(split, size=size, color=name == "digits")
    return load_folder(root, split)


def export_folder(handle: DatasetHandle, root):
    """Write a handle as lossless PNGs in the folder layout read by :func:`load_folder`."""
    root = Path(root) / handle.split
    counters = {}
    for img, label in zip(handle.images, handle.labels.tolist()):
        name = handle.class_names[label]
        counters[name] = counters.get(name, 0) + 1
        out = root / name / f"{counters[name]:05d}.png"
        out.parent.mkdir(parents=True, exist_ok=True)
        save_png(img, out)
    return root.parent


def save_png(img: torch.Tensor, path):
    arr = (img.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def iterate_minibatches(n, batch_size, seed, epoch):
    """Deterministic shuffled index batches for one epoch."""
    g = torch.Generator().manual_seed(seed * 100_003 + epoch)
    perm = torch.randperm(n, generator=g)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
